//! Patch-based segmentation network `f(I) -> label probabilities`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::grid::Grid;
use crate::losses::cross_entropy_kernel;
use crate::nn::{softmax_backward, softmax_channels, Tensor, UNet};
use crate::regnet::RegNetConfig;
use crate::volume::{make_one_hot, Atlas, LabelMap, ProbMap, Volume};
use crate::warp::renormalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    /// Same structure as the registration network; `final_init_std` is unused.
    pub network: RegNetConfig,
    pub patch_size: Vec<usize>,
    /// Defaults to half the patch size.
    pub patch_stride: Option<Vec<usize>>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            network: RegNetConfig::default(),
            patch_size: vec![32, 32],
            patch_stride: None,
        }
    }
}

impl SegNetConfig {
    pub fn stride(&self) -> Vec<usize> {
        self.patch_stride
            .clone()
            .unwrap_or_else(|| self.patch_size.iter().map(|&p| (p / 2).max(1)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let nd = self.patch_size.len();
        self.network.unet_spec(nd, 1, 1).check_shape(&self.patch_size)?;
        let stride = self.stride();
        if stride.len() != nd {
            return Err(Error::config("patch_stride rank differs from patch_size"));
        }
        if stride.iter().zip(&self.patch_size).any(|(&s, &p)| s == 0 || s > p) {
            return Err(Error::config(format!(
                "patch_stride {stride:?} must satisfy 0 < stride <= patch {:?}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Window starts along one axis; the last window is clamped to the edge.
fn axis_offsets(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let last_start = n - patch;
    while out.last().unwrap() + patch < n {
        let next = (out.last().unwrap() + stride).min(last_start);
        out.push(next);
    }
    out
}

/// All sliding-window offsets covering `shape`, in row-major order.
pub fn patch_offsets(shape: &[usize], patch: &[usize], stride: &[usize]) -> Result<Vec<Vec<usize>>> {
    if shape.len() != patch.len() || stride.len() != patch.len() {
        return Err(Error::input("shape, patch and stride ranks differ"));
    }
    if shape.iter().zip(patch).any(|(&n, &p)| p == 0 || p > n) {
        return Err(Error::input(format!("patch {patch:?} does not fit in volume {shape:?}")));
    }
    if stride.iter().zip(patch).any(|(&s, &p)| s == 0 || s > p) {
        return Err(Error::input(format!("invalid stride {stride:?} for patch {patch:?}")));
    }
    let per_axis: Vec<Vec<usize>> = (0..shape.len())
        .map(|a| axis_offsets(shape[a], patch[a], stride[a]))
        .collect();
    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for offs in &per_axis {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                offs.iter().map(move |&o| {
                    let mut v = prefix.clone();
                    v.push(o);
                    v
                })
            })
            .collect();
    }
    Ok(combos)
}

fn pad3(offset: &[usize]) -> [usize; 3] {
    let mut o = [0usize; 3];
    o[3 - offset.len()..].copy_from_slice(offset);
    o
}

/// Copy a `patch`-shaped window starting at `offset` out of channel-major data.
fn crop(src: &[f64], channels: usize, src_grid: Grid, offset: &[usize], patch: Grid) -> Vec<f64> {
    let o = pad3(offset);
    let mut out = Vec::with_capacity(channels * patch.len());
    for c in 0..channels {
        let base = c * src_grid.len();
        for z in 0..patch.n[0] {
            for y in 0..patch.n[1] {
                let start = base + src_grid.index(z + o[0], y + o[1], o[2]);
                out.extend_from_slice(&src[start..start + patch.n[2]]);
            }
        }
    }
    out
}

/// Add a patch into channel-major `dst` at `offset`.
fn paste_add(dst: &mut [f64], channels: usize, dst_grid: Grid, offset: &[usize], patch: Grid, src: &[f64]) {
    let o = pad3(offset);
    for c in 0..channels {
        for z in 0..patch.n[0] {
            for y in 0..patch.n[1] {
                let d = c * dst_grid.len() + dst_grid.index(z + o[0], y + o[1], o[2]);
                let s = c * patch.len() + patch.index(z, y, 0);
                for x in 0..patch.n[2] {
                    dst[d + x] += src[s + x];
                }
            }
        }
    }
}

pub fn crop_volume(v: &Volume, offset: &[usize], patch: &[usize]) -> Result<Volume> {
    check_window(v.shape(), offset, patch)?;
    let data = crop(v.data(), 1, Grid::from_shape(v.shape()), offset, Grid::from_shape(patch));
    Ok(Volume::from_parts(patch.to_vec(), v.spacing().to_vec(), data))
}

pub fn crop_atlas(a: &Atlas, offset: &[usize], patch: &[usize]) -> Result<Atlas> {
    let image = crop_volume(&a.image, offset, patch)?;
    let src: Vec<f64> = a.labels.labels().iter().map(|&l| l as f64).collect();
    let cropped = crop(&src, 1, Grid::from_shape(a.shape()), offset, Grid::from_shape(patch));
    let labels = LabelMap::from_parts(
        patch.to_vec(),
        a.labels.spacing().to_vec(),
        a.num_labels(),
        cropped.into_iter().map(|l| l as u32).collect(),
    );
    Atlas::new(a.id.clone(), image, labels)
}

fn check_window(shape: &[usize], offset: &[usize], patch: &[usize]) -> Result<()> {
    if shape.len() != offset.len() || shape.len() != patch.len() {
        return Err(Error::input("window rank differs from volume rank"));
    }
    if (0..shape.len()).any(|a| offset[a] + patch[a] > shape[a]) {
        return Err(Error::input(format!(
            "window at {offset:?} of size {patch:?} leaves volume {shape:?}"
        )));
    }
    Ok(())
}

/// Sliding-window patches with the offsets needed to stitch them back.
pub fn extract_patches(v: &Volume, cfg: &SegNetConfig) -> Result<Vec<(Volume, Vec<usize>)>> {
    patch_offsets(v.shape(), &cfg.patch_size, &cfg.stride())?
        .into_iter()
        .map(|o| Ok((crop_volume(v, &o, &cfg.patch_size)?, o)))
        .collect()
}

/// Average overlapping patch predictions and renormalize every voxel.
pub fn stitch_patches(patches: &[ProbMap], offsets: &[Vec<usize>], shape: &[usize]) -> Result<ProbMap> {
    let first = patches
        .first()
        .ok_or_else(|| Error::input("no patches to stitch"))?;
    if patches.len() != offsets.len() {
        return Err(Error::input("patch and offset counts differ"));
    }
    let l = first.num_labels();
    let grid = Grid::from_shape(shape);
    let mut sum = vec![0.0; l * grid.len()];
    let mut count = vec![0.0; grid.len()];
    for (p, o) in patches.iter().zip(offsets) {
        if p.num_labels() != l || p.shape().len() != shape.len() {
            return Err(Error::input("patches disagree on labels or rank"));
        }
        check_window(shape, o, p.shape())?;
        let pg = Grid::from_shape(p.shape());
        paste_add(&mut sum, l, grid, o, pg, p.probs());
        paste_add(&mut count, 1, grid, o, pg, &vec![1.0; pg.len()]);
    }
    if let Some(i) = count.iter().position(|&c| c == 0.0) {
        return Err(Error::input(format!("voxel {i} is not covered by any patch")));
    }
    let nvox = grid.len();
    for c in 0..l {
        for (s, n) in sum[c * nvox..(c + 1) * nvox].iter_mut().zip(&count) {
            *s /= n;
        }
    }
    // voxels seen by a single patch keep that patch's values bit-exactly
    let mut probs = renormalize(&sum, l, nvox);
    for (p, &n) in count.iter().enumerate() {
        if n == 1.0 {
            for c in 0..l {
                probs[c * nvox + p] = sum[c * nvox + p];
            }
        }
    }
    Ok(ProbMap::from_parts(
        shape.to_vec(),
        first.spacing().to_vec(),
        l,
        probs,
    ))
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    num_labels: usize,
    net: UNet,
}

pub fn build_segnet<R: Rng>(cfg: &SegNetConfig, num_labels: usize, rng: &mut R) -> Result<SegNet> {
    cfg.validate()?;
    if num_labels < 2 {
        return Err(Error::config("segmentation needs at least 2 labels"));
    }
    let spec = cfg.network.unet_spec(cfg.patch_size.len(), 1, num_labels);
    let net = UNet::new(spec, None, rng)?;
    Ok(SegNet {
        config: cfg.clone(),
        num_labels,
        net,
    })
}

impl SegNet {
    pub fn from_params(cfg: &SegNetConfig, num_labels: usize, params: Vec<f64>) -> Result<Self> {
        // the draw is overwritten; any seed gives the same layout
        let mut net = build_segnet(cfg, num_labels, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.net.set_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn input(&self, patch: &Volume) -> Result<Tensor> {
        ensure_shape(&self.config.patch_size, patch.shape())?;
        Ok(Tensor::new(
            1,
            Grid::from_shape(patch.shape()),
            patch.data().to_vec(),
        ))
    }

    /// Softmax probabilities for one patch-sized volume.
    pub fn forward_patch(&self, patch: &Volume) -> Result<ProbMap> {
        let (out, _) = self.net.forward(&self.input(patch)?, false)?;
        let nvox = patch.len();
        let probs = softmax_channels(&out.data, self.num_labels, nvox);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("segmentation network output".into()));
        }
        Ok(ProbMap::from_parts(
            patch.shape().to_vec(),
            patch.spacing().to_vec(),
            self.num_labels,
            probs,
        ))
    }

    /// Segment a whole volume patch by patch.
    pub fn forward_full(&self, v: &Volume) -> Result<ProbMap> {
        let patches = extract_patches(v, &self.config)?;
        let mut probs = Vec::with_capacity(patches.len());
        let mut offsets = Vec::with_capacity(patches.len());
        for (p, o) in patches {
            probs.push(self.forward_patch(&p)?);
            offsets.push(o);
        }
        stitch_patches(&probs, &offsets, v.shape())
    }

    fn evaluate(&self, patch: &Atlas, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        if patch.num_labels() != self.num_labels {
            return Err(Error::input(format!(
                "network predicts {} labels, atlas has {}",
                self.num_labels,
                patch.num_labels()
            )));
        }
        let input = self.input(&patch.image)?;
        let (out, cache) = self.net.forward(&input, want_grad)?;
        let nvox = patch.image.len();
        let l = self.num_labels;
        let probs = softmax_channels(&out.data, l, nvox);
        let target = make_one_hot(&patch.labels)?;
        let (loss, g_probs) = cross_entropy_kernel(&probs, target.probs(), nvox, want_grad);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy {loss}")));
        }
        let grads = match (cache, g_probs) {
            (Some(c), Some(gp)) => {
                let g_logits = softmax_backward(&probs, &gp, l, nvox);
                Some(self.net.backward(&c, &g_logits))
            }
            _ => None,
        };
        Ok((loss, grads))
    }

    /// Cross-entropy of the prediction on a patch-sized atlas.
    pub fn loss(&self, patch: &Atlas) -> Result<f64> {
        self.evaluate(patch, false).map(|(l, _)| l)
    }

    pub fn loss_and_grad(&self, patch: &Atlas) -> Result<(f64, Vec<f64>)> {
        self.evaluate(patch, true)
            .map(|(l, g)| (l, g.expect("gradient requested")))
    }
}

/// Uniformly random window start for a patch inside `shape`.
pub fn random_offset<R: Rng>(shape: &[usize], patch: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    if shape.len() != patch.len() || shape.iter().zip(patch).any(|(&n, &p)| p > n) {
        return Err(Error::input(format!("patch {patch:?} does not fit in {shape:?}")));
    }
    Ok(shape
        .iter()
        .zip(patch)
        .map(|(&n, &p)| rng.random_range(0..=n - p))
        .collect())
}
