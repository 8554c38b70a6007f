//! Procedural phantom populations standing in for labelled brain scans.
//!
//! The base phantom has four labels: background, a ring ("cortex"), the
//! region enclosed by the ring, and a small blob inside it that covers under
//! 2% of the foreground. Each subject is the base deformed by a smooth random
//! field plus Gaussian intensity noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_field, sample_smooth_field, AugmentConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{Atlas, LabelMap, Volume};

pub const NUM_LABELS: usize = 4;
const MAX_RETRIES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPopConfig {
    pub shape: Vec<usize>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_unlabeled: usize,
    /// Mean outer radius of the ring, in voxels.
    pub outer_radius: f64,
    pub ring_thickness: f64,
    /// Relative amplitude of the three-lobed boundary modulation.
    pub lobe_amplitude: f64,
    pub small_radius: f64,
    /// Noise-free intensity of each label.
    pub intensities: Vec<f64>,
    /// Inter-subject deformation.
    pub deformation: AugmentConfig,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticPopConfig {
    fn default() -> Self {
        SyntheticPopConfig {
            shape: vec![64, 64],
            n_train: 18,
            n_validation: 10,
            n_test: 10,
            n_unlabeled: 40,
            outer_radius: 26.0,
            ring_thickness: 6.0,
            lobe_amplitude: 0.08,
            small_radius: 3.5,
            intensities: vec![0.0, 0.45, 0.85, 0.25],
            deformation: AugmentConfig {
                control_spacing: 16,
                max_amplitude: 4.0,
                rng_seed: 0,
            },
            noise_sigma: 0.03,
            rng_seed: 0,
        }
    }
}

impl SyntheticPopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.shape.len()) || self.shape.iter().any(|&n| n < 8) {
            return Err(Error::config(format!(
                "phantom shape must be 2D or 3D with axes >= 8, got {:?}",
                self.shape
            )));
        }
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 || self.n_unlabeled == 0 {
            return Err(Error::config("every split needs at least one subject"));
        }
        let half = *self.shape.iter().min().unwrap() as f64 / 2.0;
        if !(self.outer_radius > self.ring_thickness
            && self.ring_thickness > 0.0
            && self.outer_radius * (1.0 + self.lobe_amplitude) < half)
        {
            return Err(Error::config("ring does not fit inside the grid"));
        }
        if !(self.small_radius > 0.0 && self.small_radius < self.outer_radius - self.ring_thickness) {
            return Err(Error::config("small structure must fit inside the ring"));
        }
        if self.intensities.len() != NUM_LABELS || self.intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("need {NUM_LABELS} finite label intensities")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        self.deformation.validate()
    }
}

/// Noise-free base phantom.
pub fn base_phantom(cfg: &SyntheticPopConfig) -> Result<Atlas> {
    cfg.validate()?;
    let g = Grid::from_shape(&cfg.shape);
    let f0 = g.first_active();
    let centre: Vec<f64> = cfg.shape.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let inner_r = cfg.outer_radius - cfg.ring_thickness;
    // blob centred halfway between the centre and the inner ring edge
    let mut blob = centre.clone();
    let last = blob.len() - 1;
    blob[last] += 0.5 * inner_r;
    let mut labels = Vec::with_capacity(g.len());
    for z in 0..g.n[0] {
        for y in 0..g.n[1] {
            for x in 0..g.n[2] {
                let p: Vec<f64> = [z, y, x][f0..].iter().map(|&v| v as f64).collect();
                let d: Vec<f64> = p.iter().zip(&centre).map(|(a, c)| a - c).collect();
                let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                let theta = d[last - 1].atan2(d[last]);
                let outer = cfg.outer_radius * (1.0 + cfg.lobe_amplitude * (3.0 * theta).sin());
                let rb = p
                    .iter()
                    .zip(&blob)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let label = if rb <= cfg.small_radius {
                    3
                } else if r < outer - cfg.ring_thickness {
                    2
                } else if r < outer {
                    1
                } else {
                    0
                };
                labels.push(label);
            }
        }
    }
    let image = labels.iter().map(|&l| cfg.intensities[l as usize]).collect();
    let spacing = vec![1.0; cfg.shape.len()];
    Atlas::new(
        "base",
        Volume::new(cfg.shape.clone(), spacing.clone(), image)?,
        LabelMap::new(cfg.shape.clone(), spacing, NUM_LABELS, labels)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Atlas>,
    pub validation: Vec<Atlas>,
    pub test: Vec<Atlas>,
    pub unlabeled: Vec<Volume>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.train.first().map_or(0, Atlas::num_labels)
    }

    pub fn shape(&self) -> &[usize] {
        self.train.first().map_or(&[], Atlas::shape)
    }

    /// Reject duplicate ids across labelled splits and empty splits.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::input("dataset needs train and test atlases"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !ids.insert(a.id.as_str()) {
                return Err(Error::input(format!("subject {} appears in more than one split", a.id)));
            }
            if a.shape() != self.shape() || a.num_labels() != self.num_labels() {
                return Err(Error::input(format!("subject {} differs in shape or labels", a.id)));
            }
        }
        if let Some(u) = self.unlabeled.iter().find(|u| u.shape() != self.shape()) {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                found: u.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn subject(base: &Atlas, cfg: &SyntheticPopConfig, id: String, index: u64) -> Result<Atlas> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(index);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    for _ in 0..MAX_RETRIES {
        let field = sample_smooth_field(base.shape(), &cfg.deformation, &mut rng)?;
        let warped = apply_field(base, &field)?;
        if warped.labels.histogram().contains(&0) {
            continue;
        }
        let data: Vec<f64> = if cfg.noise_sigma > 0.0 {
            warped
                .image
                .data()
                .iter()
                .map(|&v| v + noise.sample(&mut rng))
                .collect()
        } else {
            warped.image.data().to_vec()
        };
        let image = Volume::new(base.shape().to_vec(), base.image.spacing().to_vec(), data)?;
        return Atlas::new(id, image, warped.labels);
    }
    Err(Error::InvalidInput(format!(
        "subject {id}: a label vanished in {MAX_RETRIES} consecutive deformations"
    )))
}

/// Deterministic population with disjoint splits.
pub fn synth_population(cfg: &SyntheticPopConfig) -> Result<Dataset> {
    let base = base_phantom(cfg)?;
    let mut index = 0u64;
    let mut split = |prefix: &str, n: usize| -> Result<Vec<Atlas>> {
        (0..n)
            .map(|k| {
                index += 1;
                subject(&base, cfg, format!("{prefix}-{k:03}"), index)
            })
            .collect()
    };
    let train = split("train", cfg.n_train)?;
    let validation = split("val", cfg.n_validation)?;
    let test = split("test", cfg.n_test)?;
    let unlabeled = split("unlabeled", cfg.n_unlabeled)?
        .into_iter()
        .map(|a| a.image)
        .collect();
    let ds = Dataset {
        train,
        validation,
        test,
        unlabeled,
    };
    ds.validate()?;
    Ok(ds)
}

/// `n` random `k`-subsets of `pool`, each without replacement.
pub fn sample_atlas_sets<R: Rng>(pool: &[String], k: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<String>>> {
    if k == 0 || k > pool.len() {
        return Err(Error::input(format!(
            "cannot draw {k} atlases from a pool of {}",
            pool.len()
        )));
    }
    Ok((0..n)
        .map(|_| {
            let mut idx = rand::seq::index::sample(rng, pool.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i].clone()).collect()
        })
        .collect())
}
