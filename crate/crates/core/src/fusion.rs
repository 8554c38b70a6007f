//! Multi-atlas segmentation: propagate atlas labels through the registration
//! network and fuse them by summed probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_atlas, AugmentConfig};
use crate::error::{ensure_shape, Error, Result};
use crate::regnet::RegNet;
use crate::volume::{argmax_scores, make_one_hot, Atlas, LabelMap, ProbMap, Volume};
use crate::warp::warp_probmap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct FusionConfig {
    /// Augmented atlas copies added to the pool.
    pub n_augmented: usize,
    pub augment: AugmentConfig,
    pub rng_seed: u64,
}


/// Warp the atlas' one-hot labels onto `target`.
pub fn propagate_atlas(net: &RegNet, atlas: &Atlas, target: &Volume) -> Result<ProbMap> {
    let field = net.forward(&atlas.image, target)?;
    warp_probmap(&make_one_hot(&atlas.labels)?, &field)
}

/// Sum the maps channel-wise and take the per-voxel argmax.
pub fn fuse(maps: &[ProbMap]) -> Result<LabelMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::input("fusion needs at least one probability map"))?;
    let mut sum = vec![0.0; first.probs().len()];
    for m in maps {
        ensure_shape(first.shape(), m.shape())?;
        if m.num_labels() != first.num_labels() {
            return Err(Error::input(format!(
                "maps disagree on label count ({} vs {})",
                first.num_labels(),
                m.num_labels()
            )));
        }
        sum.iter_mut().zip(m.probs()).for_each(|(s, p)| *s += p);
    }
    argmax_scores(&sum, first.num_labels(), first.shape(), first.spacing())
}

/// The atlas pool: originals followed by `n_augmented` round-robin copies.
pub fn atlas_pool(atlases: &[Atlas], cfg: &FusionConfig) -> Result<Vec<Atlas>> {
    if atlases.is_empty() {
        return Err(Error::input("multi-atlas segmentation needs at least one atlas"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pool = atlases.to_vec();
    for k in 0..cfg.n_augmented {
        let src = &atlases[k % atlases.len()];
        let mut copy = augment_atlas(src, &cfg.augment, &mut rng)?;
        copy.id = format!("{}~aug{k}", src.id);
        pool.push(copy);
    }
    Ok(pool)
}

/// Segment `target` by fusing every propagated atlas in the pool.
pub fn mas_segment(
    net: &RegNet,
    atlases: &[Atlas],
    target: &Volume,
    cfg: &FusionConfig,
) -> Result<LabelMap> {
    let pool = atlas_pool(atlases, cfg)?;
    if pool.iter().any(|a| a.num_labels() != pool[0].num_labels()) {
        return Err(Error::input("atlases disagree on label count"));
    }
    let maps = pool
        .iter()
        .map(|a| propagate_atlas(net, a, target))
        .collect::<Result<Vec<_>>>()?;
    fuse(&maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regnet::{build_regnet, RegNetConfig};
    use crate::volume::argmax_labels;
    use rand::Rng;

    fn random_onehot(shape: &[usize], l: usize, rng: &mut ChaCha8Rng) -> ProbMap {
        let n: usize = shape.iter().product();
        let labels = (0..n).map(|_| rng.random_range(0..l as u32)).collect();
        make_one_hot(&LabelMap::from_labels(shape.to_vec(), l, labels).unwrap()).unwrap()
    }

    fn brute_force(maps: &[ProbMap]) -> Vec<u32> {
        let l = maps[0].num_labels();
        (0..maps[0].num_voxels())
            .map(|p| {
                let mut best = (0u32, f64::NEG_INFINITY);
                for c in 0..l {
                    let total: f64 = maps.iter().map(|m| m.channel(c)[p]).sum();
                    if total > best.1 {
                        best = (c as u32, total);
                    }
                }
                best.0
            })
            .collect()
    }

    #[test]
    fn majority_vote_with_tie_break() {
        let mk = |v: u32| make_one_hot(&LabelMap::from_labels(vec![2, 2], 3, vec![v; 4]).unwrap()).unwrap();
        assert_eq!(fuse(&[mk(1), mk(1), mk(2)]).unwrap().labels(), &[1; 4]);
        assert_eq!(fuse(&[mk(2), mk(1)]).unwrap().labels(), &[1; 4]);
        assert_eq!(fuse(&[mk(2)]).unwrap().labels(), &[2; 4]);
    }

    #[test]
    fn matches_brute_force_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let l = rng.random_range(2..=5);
            let k = rng.random_range(1..=4);
            let maps: Vec<ProbMap> = (0..k).map(|_| random_onehot(&[8, 8, 8], l, &mut rng)).collect();
            let fused = fuse(&maps).unwrap();
            assert_eq!(fused.labels(), brute_force(&maps).as_slice());
            let mut rev = maps.clone();
            rev.reverse();
            assert_eq!(fuse(&rev).unwrap(), fused);
        }
    }

    #[test]
    fn rejects_mismatched_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_onehot(&[4, 4], 3, &mut rng);
        let b = random_onehot(&[4, 4], 2, &mut rng);
        let c = random_onehot(&[4, 6], 3, &mut rng);
        assert!(fuse(&[a.clone(), b]).is_err());
        assert!(fuse(&[a, c]).is_err());
        assert!(fuse(&[]).is_err());
    }

    fn atlas(id: &str, shift: usize) -> Atlas {
        let (h, w) = (16usize, 16usize);
        let labels: Vec<u32> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                u32::from((4 + shift..12 + shift).contains(&x) && (4..12).contains(&y))
            })
            .collect();
        let image = labels.iter().map(|&l| l as f64).collect();
        Atlas::new(
            id,
            Volume::from_data(vec![h, w], image).unwrap(),
            LabelMap::from_labels(vec![h, w], 2, labels).unwrap(),
        )
        .unwrap()
    }

    fn tiny_net() -> RegNet {
        let cfg = RegNetConfig {
            enc_filters: vec![2, 2],
            dec_filters: vec![2, 2],
            levels: 2,
            ..RegNetConfig::default()
        };
        build_regnet(&cfg, &[16, 16], &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn untrained_network_propagates_labels_unchanged() {
        let net = tiny_net();
        let a = atlas("a", 0);
        let p = propagate_atlas(&net, &a, &atlas("b", 2).image).unwrap();
        assert_eq!(argmax_labels(&p).unwrap(), a.labels);
        let one = mas_segment(&net, std::slice::from_ref(&a), &atlas("b", 2).image, &FusionConfig::default()).unwrap();
        assert_eq!(one, argmax_labels(&p).unwrap());
    }

    #[test]
    fn augmented_pool_is_reproducible() {
        let net = tiny_net();
        let atlases = [atlas("a", 0), atlas("b", 2)];
        let cfg = FusionConfig {
            n_augmented: 3,
            rng_seed: 4,
            ..FusionConfig::default()
        };
        let pool = atlas_pool(&atlases, &cfg).unwrap();
        assert_eq!(pool.len(), 5);
        assert!(pool[2].id.starts_with('a') && pool[3].id.starts_with('b') && pool[4].id.starts_with('a'));
        let target = atlas("c", 1).image;
        let x = mas_segment(&net, &atlases, &target, &cfg).unwrap();
        let y = mas_segment(&net, &atlases, &target, &cfg).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.num_labels(), 2);
    }
}
