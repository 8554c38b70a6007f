//! Differentiable objectives: local NCC, displacement smoothness, soft Dice,
//! the unsupervised and semi-supervised registration losses, and the
//! segmentation cross-entropy.
//!
//! Every loss has a `*_grad` companion returning the analytic gradient with
//! respect to its differentiable arguments.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::grid::{box_sum, Grid};
use crate::volume::{make_one_hot, Atlas, ProbMap, Volume};
use crate::warp::{self, DisplacementField, Sampler};

/// Stabiliser added inside the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Stabiliser inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Side of the cubic NCC window, per axis. Must be odd.
    pub ncc_window: usize,
    pub ncc_eps: f64,
    /// Smoothness weight.
    pub lambda: f64,
    /// Segmentation (soft Dice) weight.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ncc_window: 9,
            ncc_eps: 1e-5,
            lambda: 1.5,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window == 0 || self.ncc_window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "ncc_window must be odd and >= 1, got {}",
                self.ncc_window
            )));
        }
        if !(self.ncc_eps > 0.0) {
            return Err(Error::config("ncc_eps must be > 0"));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::config("lambda and gamma must be >= 0"));
        }
        Ok(())
    }
}

/// Windowed squared NCC on raw slices. Returns the loss and, when asked,
/// the gradients with respect to both inputs.
pub(crate) fn ncc_kernel(
    fixed: &[f64],
    moved: &[f64],
    grid: Grid,
    window: usize,
    eps: f64,
    want_grad: bool,
) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let nvox = grid.len();
    let r = window / 2;
    let ones = vec![1.0; nvox];
    let count = box_sum(&ones, grid, r);
    let ii: Vec<f64> = fixed.iter().map(|a| a * a).collect();
    let jj: Vec<f64> = moved.iter().map(|b| b * b).collect();
    let ij: Vec<f64> = fixed.iter().zip(moved).map(|(a, b)| a * b).collect();
    let s_i = box_sum(fixed, grid, r);
    let s_j = box_sum(moved, grid, r);
    let s_ii = box_sum(&ii, grid, r);
    let s_jj = box_sum(&jj, grid, r);
    let s_ij = box_sum(&ij, grid, r);

    let scale = -1.0 / nvox as f64;
    let mut total = 0.0;
    // per-window sensitivities, later spread back over the windows
    let (mut g_si, mut g_sii, mut g_sj, mut g_sjj, mut g_sij) = if want_grad {
        (
            vec![0.0; nvox],
            vec![0.0; nvox],
            vec![0.0; nvox],
            vec![0.0; nvox],
            vec![0.0; nvox],
        )
    } else {
        Default::default()
    };
    for p in 0..nvox {
        let n = count[p];
        let cross = s_ij[p] - s_i[p] * s_j[p] / n;
        let var_i = s_ii[p] - s_i[p] * s_i[p] / n;
        let var_j = s_jj[p] - s_j[p] * s_j[p] / n;
        let den = var_i * var_j + eps;
        let cc = cross * cross / den;
        total += cc;
        if want_grad {
            let d_cross = 2.0 * cross / den * scale;
            let d_var_i = -cross * cross * var_j / (den * den) * scale;
            let d_var_j = -cross * cross * var_i / (den * den) * scale;
            g_sij[p] = d_cross;
            g_si[p] = d_cross * (-s_j[p] / n) + d_var_i * (-2.0 * s_i[p] / n);
            g_sj[p] = d_cross * (-s_i[p] / n) + d_var_j * (-2.0 * s_j[p] / n);
            g_sii[p] = d_var_i;
            g_sjj[p] = d_var_j;
        }
    }
    let loss = total * scale;
    if !want_grad {
        return (loss, None);
    }
    // the clipped window is symmetric, so the adjoint of a box sum is a box sum
    let a_i = box_sum(&g_si, grid, r);
    let b_i = box_sum(&g_sii, grid, r);
    let a_j = box_sum(&g_sj, grid, r);
    let b_j = box_sum(&g_sjj, grid, r);
    let c = box_sum(&g_sij, grid, r);
    let mut grad_fixed = vec![0.0; nvox];
    let mut grad_moved = vec![0.0; nvox];
    for q in 0..nvox {
        grad_fixed[q] = a_i[q] + 2.0 * fixed[q] * b_i[q] + moved[q] * c[q];
        grad_moved[q] = a_j[q] + 2.0 * moved[q] * b_j[q] + fixed[q] * c[q];
    }
    (loss, Some((grad_fixed, grad_moved)))
}

fn check_window(shape: &[usize], cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(&n) = shape.iter().find(|&&n| n < cfg.ncc_window) {
        return Err(Error::config(format!(
            "ncc_window {} exceeds axis length {n}",
            cfg.ncc_window
        )));
    }
    Ok(())
}

/// Negative mean local squared NCC, in `[-1, 0]`.
pub fn ncc_loss(fixed: &Volume, moved: &Volume, cfg: &LossConfig) -> Result<f64> {
    ensure_shape(fixed.shape(), moved.shape())?;
    check_window(fixed.shape(), cfg)?;
    let grid = Grid::from_shape(fixed.shape());
    Ok(ncc_kernel(fixed.data(), moved.data(), grid, cfg.ncc_window, cfg.ncc_eps, false).0)
}

/// [`ncc_loss`] with gradients `(loss, d/d fixed, d/d moved)`.
pub fn ncc_loss_grad(
    fixed: &Volume,
    moved: &Volume,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_shape(fixed.shape(), moved.shape())?;
    check_window(fixed.shape(), cfg)?;
    let grid = Grid::from_shape(fixed.shape());
    let (loss, g) = ncc_kernel(fixed.data(), moved.data(), grid, cfg.ncc_window, cfg.ncc_eps, true);
    let (gf, gm) = g.expect("gradient requested");
    Ok((loss, gf, gm))
}

/// Mean squared forward differences, averaged over axes. `components`
/// channel-major arrays on `grid`.
pub(crate) fn smoothness_kernel(
    u: &[f64],
    components: usize,
    grid: Grid,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let nvox = grid.len();
    let strides = grid.strides();
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; u.len()] } else { Vec::new() };
    let n_axes = grid.ndim as f64;
    for a in grid.first_active()..3 {
        let n = grid.n[a];
        let pairs = nvox / n * (n - 1) * components;
        let w = 1.0 / (pairs as f64 * n_axes);
        let s = strides[a];
        let mut acc = 0.0;
        for c in 0..components {
            let comp = &u[c * nvox..(c + 1) * nvox];
            for z in 0..grid.n[0] {
                for y in 0..grid.n[1] {
                    for x in 0..grid.n[2] {
                        let pos = [z, y, x];
                        if pos[a] + 1 >= n {
                            continue;
                        }
                        let p = grid.index(z, y, x);
                        let d = comp[p + s] - comp[p];
                        acc += d * d;
                        if want_grad {
                            grad[c * nvox + p + s] += 2.0 * w * d;
                            grad[c * nvox + p] -= 2.0 * w * d;
                        }
                    }
                }
            }
        }
        loss += acc * w;
    }
    (loss, want_grad.then_some(grad))
}

/// Diffusion regulariser on the displacement field; `>= 0`.
pub fn smoothness_loss(f: &DisplacementField) -> f64 {
    let grid = Grid::from_shape(f.shape());
    smoothness_kernel(f.data(), f.ndim(), grid, false).0
}

pub fn smoothness_loss_grad(f: &DisplacementField) -> (f64, Vec<f64>) {
    let grid = Grid::from_shape(f.shape());
    let (l, g) = smoothness_kernel(f.data(), f.ndim(), grid, true);
    (l, g.expect("gradient requested"))
}

fn check_probmaps(a: &ProbMap, b: &ProbMap) -> Result<()> {
    ensure_shape(a.shape(), b.shape())?;
    if a.num_labels() != b.num_labels() {
        return Err(Error::input(format!(
            "label count mismatch: {} vs {}",
            a.num_labels(),
            b.num_labels()
        )));
    }
    Ok(())
}

pub(crate) fn soft_dice_kernel(
    a: &[f64],
    b: &[f64],
    channels: usize,
    nvox: usize,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; b.len()] } else { Vec::new() };
    let scale = -1.0 / channels as f64;
    for l in 0..channels {
        let ca = &a[l * nvox..(l + 1) * nvox];
        let cb = &b[l * nvox..(l + 1) * nvox];
        let inter: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
        let sa: f64 = ca.iter().sum();
        let sb: f64 = cb.iter().sum();
        let den = sa + sb + DICE_EPS;
        loss += scale * 2.0 * inter / den;
        if want_grad {
            let g = &mut grad[l * nvox..(l + 1) * nvox];
            for p in 0..nvox {
                g[p] = scale * (2.0 * ca[p] / den - 2.0 * inter / (den * den));
            }
        }
    }
    (loss, want_grad.then_some(grad))
}

/// Negative mean soft Dice over all channels, in `[-1, 0]`.
pub fn soft_dice_loss(a: &ProbMap, b: &ProbMap) -> Result<f64> {
    check_probmaps(a, b)?;
    Ok(soft_dice_kernel(a.probs(), b.probs(), a.num_labels(), a.num_voxels(), false).0)
}

/// [`soft_dice_loss`] and its gradient with respect to `b`.
pub fn soft_dice_loss_grad(a: &ProbMap, b: &ProbMap) -> Result<(f64, Vec<f64>)> {
    check_probmaps(a, b)?;
    let (l, g) = soft_dice_kernel(a.probs(), b.probs(), a.num_labels(), a.num_voxels(), true);
    Ok((l, g.expect("gradient requested")))
}

/// Breakdown of a registration objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
    /// Soft Dice term (unweighted); zero for unsupervised steps.
    pub segmentation: f64,
}

/// Shared forward/backward for both registration objectives on raw data.
/// `labels` carries `(fixed one-hot, moving one-hot, channels)` for the
/// supervised objective.
pub(crate) fn registration_objective(
    fixed: &[f64],
    moving: &[f64],
    u: &[f64],
    grid: Grid,
    labels: Option<(&[f64], &[f64], usize)>,
    cfg: &LossConfig,
    want_grad: bool,
) -> (LossTerms, Option<Vec<f64>>) {
    let nvox = grid.len();
    let sampler = Sampler::new(grid, u);
    let moved = warp::warp_channels(moving, 1, &sampler);
    let (sim, g_sim) = ncc_kernel(fixed, &moved, grid, cfg.ncc_window, cfg.ncc_eps, want_grad);
    let (smooth, g_smooth) = smoothness_kernel(u, grid.ndim, grid, want_grad);
    let mut terms = LossTerms {
        total: sim + cfg.lambda * smooth,
        similarity: sim,
        smoothness: smooth,
        segmentation: 0.0,
    };
    let mut grad_u = if want_grad {
        let (_, g_moved) = g_sim.expect("gradient requested");
        let mut gu = vec![0.0; u.len()];
        sampler.backward(moving, &g_moved, None, Some(&mut gu));
        for (g, s) in gu.iter_mut().zip(g_smooth.expect("gradient requested")) {
            *g += cfg.lambda * s;
        }
        Some(gu)
    } else {
        None
    };
    if let Some((fixed_oh, moving_oh, channels)) = labels {
        let raw = warp::warp_channels(moving_oh, channels, &sampler);
        let warped = warp::renormalize(&raw, channels, nvox);
        let (seg, g_seg) = soft_dice_kernel(fixed_oh, &warped, channels, nvox, want_grad);
        terms.segmentation = seg;
        terms.total += cfg.gamma * seg;
        if let Some(gu) = grad_u.as_mut() {
            if cfg.gamma != 0.0 {
                let g_warped: Vec<f64> = g_seg
                    .expect("gradient requested")
                    .into_iter()
                    .map(|g| g * cfg.gamma)
                    .collect();
                let g_from_seg =
                    warp::probmap_field_grad(moving_oh, channels, &sampler, &g_warped);
                for (g, s) in gu.iter_mut().zip(g_from_seg) {
                    *g += s;
                }
            }
        }
    }
    (terms, grad_u)
}

fn check_registration_inputs(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<()> {
    ensure_shape(fixed.shape(), moving.shape())?;
    ensure_shape(fixed.shape(), field.shape())?;
    check_window(fixed.shape(), cfg)
}

/// Unsupervised objective: `ncc(fixed, moving ∘ phi) + lambda * smooth(phi)`.
pub fn registration_loss_unsup(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    registration_loss_unsup_grad_impl(fixed, moving, field, cfg, false).map(|(t, _)| t)
}

/// Unsupervised objective and its gradient with respect to the field.
pub fn registration_loss_unsup_grad(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    registration_loss_unsup_grad_impl(fixed, moving, field, cfg, true)
        .map(|(t, g)| (t, g.expect("gradient requested")))
}

fn registration_loss_unsup_grad_impl(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    check_registration_inputs(fixed, moving, field, cfg)?;
    let grid = Grid::from_shape(fixed.shape());
    Ok(registration_objective(
        fixed.data(),
        moving.data(),
        field.data(),
        grid,
        None,
        cfg,
        want_grad,
    ))
}

fn semisup_impl(
    fixed: &Atlas,
    moving: &Atlas,
    field: &DisplacementField,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    check_registration_inputs(&fixed.image, &moving.image, field, cfg)?;
    if fixed.num_labels() != moving.num_labels() {
        return Err(Error::input("atlases disagree on the number of labels"));
    }
    let fixed_oh = make_one_hot(&fixed.labels)?;
    let moving_oh = make_one_hot(&moving.labels)?;
    let grid = Grid::from_shape(fixed.shape());
    Ok(registration_objective(
        fixed.image.data(),
        moving.image.data(),
        field.data(),
        grid,
        Some((fixed_oh.probs(), moving_oh.probs(), fixed.num_labels())),
        cfg,
        want_grad,
    ))
}

/// Semi-supervised objective: unsupervised terms plus
/// `gamma * soft_dice(one_hot(S_fixed), one_hot(S_moving) ∘ phi)`.
pub fn registration_loss_semisup(
    fixed: &Atlas,
    moving: &Atlas,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    semisup_impl(fixed, moving, field, cfg, false).map(|(t, _)| t)
}

pub fn registration_loss_semisup_grad(
    fixed: &Atlas,
    moving: &Atlas,
    field: &DisplacementField,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    semisup_impl(fixed, moving, field, cfg, true).map(|(t, g)| (t, g.expect("gradient requested")))
}

pub(crate) fn cross_entropy_kernel(
    pred: &[f64],
    target: &[f64],
    nvox: usize,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let scale = 1.0 / nvox as f64;
    // offset so a perfect prediction scores exactly zero
    let offset = (1.0 + CE_EPS).ln();
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; pred.len()] } else { Vec::new() };
    for i in 0..pred.len() {
        let t = target[i];
        if t != 0.0 {
            loss -= scale * t * ((pred[i] + CE_EPS).ln() - offset);
            if want_grad {
                grad[i] = -scale * t / (pred[i] + CE_EPS);
            }
        }
    }
    (loss, want_grad.then_some(grad))
}

/// Mean over voxels of `-sum_l target_l * ln((pred_l + eps) / (1 + eps))`.
pub fn cross_entropy_loss(pred: &ProbMap, target: &ProbMap) -> Result<f64> {
    check_probmaps(pred, target)?;
    Ok(cross_entropy_kernel(pred.probs(), target.probs(), pred.num_voxels(), false).0)
}

/// [`cross_entropy_loss`] and its gradient with respect to `pred`.
pub fn cross_entropy_loss_grad(pred: &ProbMap, target: &ProbMap) -> Result<(f64, Vec<f64>)> {
    check_probmaps(pred, target)?;
    let (l, g) = cross_entropy_kernel(pred.probs(), target.probs(), pred.num_voxels(), true);
    Ok((l, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelMap;
    use crate::warp::{identity_field, warp_probmap, warp_scalar};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(rng: &mut ChaCha8Rng, shape: &[usize]) -> Volume {
        let n: usize = shape.iter().product();
        Volume::from_data(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn rand_field(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> DisplacementField {
        let n: usize = shape.iter().product::<usize>() * shape.len();
        DisplacementField::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-amp..amp)).collect())
            .unwrap()
    }

    fn small_cfg() -> LossConfig {
        LossConfig {
            ncc_window: 5,
            ..LossConfig::default()
        }
    }

    #[test]
    fn ncc_self_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_vol(&mut rng, &[16, 16]);
        let l = ncc_loss(&v, &v, &LossConfig::default()).unwrap();
        assert!((l + 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn ncc_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = rand_vol(&mut rng, &[16, 16]);
        let w = Volume::from_data(vec![16, 16], v.data().iter().map(|x| 2.5 * x + 0.7).collect())
            .unwrap();
        let l = ncc_loss(&v, &w, &LossConfig::default()).unwrap();
        assert!((l + 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn ncc_constant_inputs_finite() {
        let a = Volume::from_data(vec![10, 10], vec![0.3; 100]).unwrap();
        let b = Volume::from_data(vec![10, 10], vec![0.9; 100]).unwrap();
        let l = ncc_loss(&a, &b, &LossConfig::default()).unwrap();
        assert!(l.is_finite());
        assert!((-1.0..=0.0).contains(&l));
    }

    #[test]
    fn ncc_window_too_large_rejected() {
        let a = Volume::from_data(vec![8, 16], vec![0.0; 128]).unwrap();
        assert!(ncc_loss(&a, &a, &LossConfig::default()).is_err());
        let even = LossConfig {
            ncc_window: 4,
            ..LossConfig::default()
        };
        assert!(ncc_loss(&a, &a, &even).is_err());
    }

    #[test]
    fn ncc_range_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_vol(&mut rng, &[12, 12]);
            let b = rand_vol(&mut rng, &[12, 12]);
            let l = ncc_loss(&a, &b, &small_cfg()).unwrap();
            assert!((-1.0..=0.0).contains(&l));
        }
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_loss(&identity_field(&[5, 5]).unwrap()), 0.0);
        let c = DisplacementField::new(vec![4, 4], vec![1.7; 32]).unwrap();
        assert_eq!(smoothness_loss(&c), 0.0);
        // 1D ramp u(x) = x on four samples
        let grid = Grid::from_shape(&[4]);
        let (l, _) = smoothness_kernel(&[0.0, 1.0, 2.0, 3.0], 1, grid, false);
        assert_eq!(l, 1.0);
        // the same ramp along both axes of a 2D field
        let mut u = vec![0.0; 2 * 16];
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    u[c * 16 + y * 4 + x] = (x + y) as f64;
                }
            }
        }
        let f = DisplacementField::new(vec![4, 4], u).unwrap();
        assert_eq!(smoothness_loss(&f), 1.0);
    }

    #[test]
    fn soft_dice_examples() {
        let labels: Vec<u32> = (0..48).map(|i| (i % 3) as u32).collect();
        let s = LabelMap::from_labels(vec![6, 8], 3, labels).unwrap();
        let oh = make_one_hot(&s).unwrap();
        assert!((soft_dice_loss(&oh, &oh).unwrap() + 1.0).abs() < 1e-6);

        let a = LabelMap::from_labels(vec![2, 2], 2, vec![0, 0, 1, 1]).unwrap();
        let b = LabelMap::from_labels(vec![2, 2], 2, vec![1, 1, 0, 0]).unwrap();
        let l = soft_dice_loss(&make_one_hot(&a).unwrap(), &make_one_hot(&b).unwrap()).unwrap();
        assert!(l.abs() < 1e-6);

        // L = 1: a = ones on four voxels, b = ones on two of them
        let (l, _) = soft_dice_kernel(&[1.0; 4], &[1.0, 1.0, 0.0, 0.0], 1, 4, false);
        assert!((l + 2.0 / 3.0).abs() < 1e-5, "{l}");
    }

    #[test]
    fn soft_dice_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..3 * 25).map(|_| rng.random::<f64>()).collect();
            let p = warp::renormalize(&raw, 3, 25);
            ProbMap::new(vec![5, 5], vec![1.0, 1.0], 3, p).unwrap()
        };
        for _ in 0..10 {
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(soft_dice_loss(&a, &b).unwrap(), soft_dice_loss(&b, &a).unwrap());
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let s = LabelMap::from_labels(vec![2, 2], 4, vec![0, 1, 2, 3]).unwrap();
        let oh = make_one_hot(&s).unwrap();
        let l = cross_entropy_loss(&oh, &oh).unwrap();
        assert!((0.0..1e-6).contains(&l));

        let uniform = ProbMap::new(vec![2, 2], vec![1.0, 1.0], 4, vec![0.25; 16]).unwrap();
        let l = cross_entropy_loss(&uniform, &oh).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-6);

        let (l, _) = cross_entropy_kernel(&[0.8, 0.2], &[1.0, 0.0], 1, false);
        assert!((l + 0.8f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn unsup_aligned_pair_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_vol(&mut rng, &[16, 16]);
        let id = identity_field(&[16, 16]).unwrap();
        let t = registration_loss_unsup(&v, &v, &id, &LossConfig::default()).unwrap();
        assert!((t.total + 1.0).abs() < 1e-3);

        let m = rand_vol(&mut rng, &[16, 16]);
        let f = rand_field(&mut rng, &[16, 16], 2.0);
        let cfg0 = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let t0 = registration_loss_unsup(&v, &m, &f, &cfg0).unwrap();
        let ncc = ncc_loss(&v, &warp_scalar(&m, &f).unwrap(), &cfg0).unwrap();
        assert_eq!(t0.total, ncc);

        let cfg = LossConfig::default();
        let t = registration_loss_unsup(&v, &m, &f, &cfg).unwrap();
        let expect = ncc + 1.5 * smoothness_loss(&f);
        assert!((t.total - expect).abs() < 1e-12);
    }

    fn rand_atlas(rng: &mut ChaCha8Rng, shape: &[usize], l: usize) -> Atlas {
        let img = rand_vol(rng, shape);
        let n: usize = shape.iter().product();
        let labels = LabelMap::from_labels(
            shape.to_vec(),
            l,
            (0..n).map(|_| rng.random_range(0..l as u32)).collect(),
        )
        .unwrap();
        Atlas::new("r", img, labels).unwrap()
    }

    #[test]
    fn semisup_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_atlas(&mut rng, &[16, 16], 3);
        let id = identity_field(&[16, 16]).unwrap();
        let cfg = LossConfig::default();
        let t = registration_loss_semisup(&a, &a, &id, &cfg).unwrap();
        assert!((t.total - (-1.0 - 1.0)).abs() < 1e-3, "{t:?}");

        let b = rand_atlas(&mut rng, &[16, 16], 3);
        let f = rand_field(&mut rng, &[16, 16], 2.0);
        let cfg0 = LossConfig {
            gamma: 0.0,
            ..cfg.clone()
        };
        let semi = registration_loss_semisup(&a, &b, &f, &cfg0).unwrap();
        let unsup = registration_loss_unsup(&a.image, &b.image, &f, &cfg0).unwrap();
        assert_eq!(semi.total, unsup.total);

        let semi = registration_loss_semisup(&a, &b, &f, &cfg).unwrap();
        let dice = soft_dice_loss(
            &make_one_hot(&a.labels).unwrap(),
            &warp_probmap(&make_one_hot(&b.labels).unwrap(), &f).unwrap(),
        )
        .unwrap();
        assert!((semi.total - (unsup.total + dice)).abs() < 1e-12);
    }

    fn fd_check(
        x: &[f64],
        grad: &[f64],
        f: impl Fn(&[f64]) -> f64,
        tol: f64,
    ) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-7);
            assert!(
                (fd - grad[i]).abs() / denom < tol,
                "entry {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn ncc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = [12, 12];
        let a = rand_vol(&mut rng, &shape);
        let b = rand_vol(&mut rng, &shape);
        let cfg = small_cfg();
        let (_, ga, gb) = ncc_loss_grad(&a, &b, &cfg).unwrap();
        let mk = |d: &[f64]| Volume::from_data(shape.to_vec(), d.to_vec()).unwrap();
        fd_check(b.data(), &gb, |d| ncc_loss(&a, &mk(d), &cfg).unwrap(), 1e-4);
        fd_check(a.data(), &ga, |d| ncc_loss(&mk(d), &b, &cfg).unwrap(), 1e-4);
    }

    #[test]
    fn smoothness_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_field(&mut rng, &[6, 7], 2.0);
        let (_, g) = smoothness_loss_grad(&f);
        fd_check(f.data(), &g, |d| {
            smoothness_loss(&DisplacementField::new(vec![6, 7], d.to_vec()).unwrap())
        }, 1e-4);
    }

    #[test]
    fn dice_and_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..3 * 36).map(|_| rng.random::<f64>()).collect();
        let b = warp::renormalize(&raw, 3, 36);
        let a =
            make_one_hot(&rand_atlas(&mut rng, &[6, 6], 3).labels).unwrap();
        let (_, g) = soft_dice_kernel(a.probs(), &b, 3, 36, true);
        fd_check(&b, &g.unwrap(), |d| soft_dice_kernel(a.probs(), d, 3, 36, false).0, 1e-4);
        let (_, g) = cross_entropy_kernel(&b, a.probs(), 36, true);
        fd_check(&b, &g.unwrap(), |d| cross_entropy_kernel(d, a.probs(), 36, false).0, 1e-4);
    }

    #[test]
    fn registration_gradients_wrt_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = [12, 12];
        let fixed = rand_atlas(&mut rng, &shape, 3);
        let moving = rand_atlas(&mut rng, &shape, 3);
        let f = rand_field(&mut rng, &shape, 1.5);
        let cfg = small_cfg();
        let mk = |d: &[f64]| DisplacementField::new(shape.to_vec(), d.to_vec()).unwrap();
        let (_, g) = registration_loss_unsup_grad(&fixed.image, &moving.image, &f, &cfg).unwrap();
        fd_check(f.data(), &g, |d| {
            registration_loss_unsup(&fixed.image, &moving.image, &mk(d), &cfg).unwrap().total
        }, 1e-4);
        let (_, g) = registration_loss_semisup_grad(&fixed, &moving, &f, &cfg).unwrap();
        fd_check(f.data(), &g, |d| {
            registration_loss_semisup(&fixed, &moving, &mk(d), &cfg).unwrap().total
        }, 1e-4);
    }
}
