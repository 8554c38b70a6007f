//! Differentiable spatial transformation with multilinear interpolation.
//!
//! A [`DisplacementField`] stores one displacement component per spatial axis,
//! in voxel units, channel-major. The deformation it represents is
//! `phi(p) = p + u(p)`. Sample coordinates that leave the grid are clamped to
//! the boundary.

use crate::error::{ensure_shape, Error, Result};
use crate::grid::Grid;
use crate::volume::{num_voxels, ProbMap, Volume};

/// Guard on the channel sum when renormalising warped probabilities.
pub const RENORM_EPS: f64 = 1e-7;

/// Per-voxel displacement vectors, `u[k * nvox + p]` displaces along axis `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    shape: Vec<usize>,
    u: Vec<f64>,
}

impl DisplacementField {
    pub fn new(shape: Vec<usize>, u: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) || shape.iter().any(|&n| n < 2) {
            return Err(Error::input(format!("invalid field shape {shape:?}")));
        }
        if u.len() != shape.len() * num_voxels(&shape) {
            return Err(Error::input(format!(
                "field data length {} does not match {} x {:?}",
                u.len(),
                shape.len(),
                shape
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { shape, u })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, u: Vec<f64>) -> Self {
        debug_assert_eq!(u.len(), shape.len() * num_voxels(&shape));
        DisplacementField { shape, u }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.u
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let n = num_voxels(&self.shape);
        &self.u[k * n..(k + 1) * n]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.u
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Zero displacement, i.e. the identity deformation.
pub fn identity_field(shape: &[usize]) -> Result<DisplacementField> {
    let n = num_voxels(shape);
    DisplacementField::new(shape.to_vec(), vec![0.0; shape.len() * n])
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    let v = a + w * (b - a);
    // rounding can overshoot by an ulp; keep the result inside [a, b]
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Precomputed interpolation stencil for one displacement field.
///
/// Works on any rank 1..=3 so kernels can be checked on 1D rows.
pub(crate) struct Sampler {
    grid: Grid,
    base: Vec<usize>,
    // per active axis (indexed 0..ndim): offset to the upper neighbour, weight, gradient mask
    step: Vec<[usize; 3]>,
    frac: Vec<[f64; 3]>,
    live: Vec<[bool; 3]>,
}

impl Sampler {
    /// `u` holds `grid.ndim` components, channel-major.
    pub fn new(grid: Grid, u: &[f64]) -> Self {
        let nvox = grid.len();
        let nd = grid.ndim;
        assert_eq!(u.len(), nd * nvox);
        let strides = grid.strides();
        let first = grid.first_active();
        let mut base = Vec::with_capacity(nvox);
        let mut step = Vec::with_capacity(nvox);
        let mut frac = Vec::with_capacity(nvox);
        let mut live = Vec::with_capacity(nvox);
        for z in 0..grid.n[0] {
            for y in 0..grid.n[1] {
                for x in 0..grid.n[2] {
                    let pos = [z, y, x];
                    let p = grid.index(z, y, x);
                    let mut b = 0usize;
                    let mut st = [0usize; 3];
                    let mut fr = [0.0f64; 3];
                    let mut lv = [false; 3];
                    for a in 0..3 {
                        if a < first {
                            b += pos[a] * strides[a];
                            continue;
                        }
                        let k = a - first;
                        let n = grid.n[a];
                        let hi = (n - 1) as f64;
                        let c = pos[a] as f64 + u[k * nvox + p];
                        let c_clamped = c.clamp(0.0, hi);
                        lv[k] = c > 0.0 && c < hi;
                        let i0 = (c_clamped.floor() as usize).min(n - 1);
                        if i0 >= n - 1 {
                            b += (n - 1) * strides[a];
                        } else {
                            b += i0 * strides[a];
                            st[k] = strides[a];
                            fr[k] = c_clamped - i0 as f64;
                        }
                    }
                    base.push(b);
                    step.push(st);
                    frac.push(fr);
                    live.push(lv);
                }
            }
        }
        Sampler {
            grid,
            base,
            step,
            frac,
            live,
        }
    }

    #[inline]
    fn corner_offset(&self, p: usize, m: usize) -> usize {
        let mut off = 0;
        for k in 0..self.grid.ndim {
            if m >> k & 1 == 1 {
                off += self.step[p][k];
            }
        }
        off
    }

    /// Interpolate one channel.
    pub fn sample(&self, src: &[f64], out: &mut [f64]) {
        let nd = self.grid.ndim;
        let ncorner = 1usize << nd;
        let mut vals = [0.0f64; 8];
        for p in 0..self.base.len() {
            let b = self.base[p];
            for (m, v) in vals.iter_mut().enumerate().take(ncorner) {
                *v = src[b + self.corner_offset(p, m)];
            }
            let mut len = ncorner;
            for k in 0..nd {
                let w = self.frac[p][k];
                len /= 2;
                for m in 0..len {
                    vals[m] = lerp(vals[2 * m], vals[2 * m + 1], w);
                }
            }
            out[p] = vals[0];
        }
    }

    /// Backward pass of [`Sampler::sample`] for one channel. Accumulates into
    /// `grad_src` (if given) and `grad_u` (channel-major, `ndim` components).
    pub fn backward(
        &self,
        src: &[f64],
        grad_out: &[f64],
        mut grad_src: Option<&mut [f64]>,
        grad_u: Option<&mut [f64]>,
    ) {
        let nd = self.grid.ndim;
        let nvox = self.base.len();
        let ncorner = 1usize << nd;
        let mut gu = grad_u;
        for p in 0..nvox {
            let g = grad_out[p];
            if g == 0.0 {
                continue;
            }
            let b = self.base[p];
            let fr = self.frac[p];
            for m in 0..ncorner {
                let off = b + self.corner_offset(p, m);
                if let Some(gs) = grad_src.as_deref_mut() {
                    let mut w = 1.0;
                    for (k, &f) in fr.iter().enumerate().take(nd) {
                        w *= if m >> k & 1 == 1 { f } else { 1.0 - f };
                    }
                    gs[off] += g * w;
                }
                if let Some(gu) = gu.as_deref_mut() {
                    let v = src[off];
                    for k in 0..nd {
                        if !self.live[p][k] {
                            continue;
                        }
                        let mut w = if m >> k & 1 == 1 { 1.0 } else { -1.0 };
                        for (j, &f) in fr.iter().enumerate().take(nd) {
                            if j != k {
                                w *= if m >> j & 1 == 1 { f } else { 1.0 - f };
                            }
                        }
                        gu[k * nvox + p] += g * w * v;
                    }
                }
            }
        }
    }
}

/// Sample a channel-major multi-channel array at displaced positions.
pub(crate) fn warp_channels(src: &[f64], channels: usize, sampler: &Sampler) -> Vec<f64> {
    let nvox = sampler.grid.len();
    let mut out = vec![0.0; channels * nvox];
    for c in 0..channels {
        sampler.sample(&src[c * nvox..(c + 1) * nvox], &mut out[c * nvox..(c + 1) * nvox]);
    }
    out
}

/// Divide each voxel's channels by their sum (guarded by [`RENORM_EPS`]).
pub(crate) fn renormalize(raw: &[f64], channels: usize, nvox: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for p in 0..nvox {
        let s: f64 = (0..channels).map(|c| raw[c * nvox + p]).sum();
        let s = s.max(RENORM_EPS);
        for c in 0..channels {
            out[c * nvox + p] = (raw[c * nvox + p] / s).min(1.0);
        }
    }
    out
}

/// Gradient of [`renormalize`] with respect to its input.
pub(crate) fn renormalize_backward(
    raw: &[f64],
    grad_out: &[f64],
    channels: usize,
    nvox: usize,
) -> Vec<f64> {
    let mut g = vec![0.0; raw.len()];
    for p in 0..nvox {
        let s: f64 = (0..channels).map(|c| raw[c * nvox + p]).sum();
        if s >= RENORM_EPS {
            let dot: f64 = (0..channels)
                .map(|c| grad_out[c * nvox + p] * raw[c * nvox + p])
                .sum();
            for c in 0..channels {
                g[c * nvox + p] = grad_out[c * nvox + p] / s - dot / (s * s);
            }
        } else {
            for c in 0..channels {
                g[c * nvox + p] = grad_out[c * nvox + p] / RENORM_EPS;
            }
        }
    }
    g
}

fn sampler_for(shape: &[usize], f: &DisplacementField) -> Result<Sampler> {
    ensure_shape(f.shape(), shape)?;
    Ok(Sampler::new(Grid::from_shape(shape), f.data()))
}

/// `out(p) = v(p + u(p))` by multilinear interpolation.
pub fn warp_scalar(v: &Volume, f: &DisplacementField) -> Result<Volume> {
    let sampler = sampler_for(v.shape(), f)?;
    let out = warp_channels(v.data(), 1, &sampler);
    Ok(Volume::from_parts(
        v.shape().to_vec(),
        v.spacing().to_vec(),
        out,
    ))
}

/// Gradients of `sum(grad_out * warp_scalar(v, f))` with respect to `v` and `u`.
pub fn warp_scalar_backward(
    v: &Volume,
    f: &DisplacementField,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sampler = sampler_for(v.shape(), f)?;
    if grad_out.len() != v.len() {
        return Err(Error::input("gradient length does not match volume"));
    }
    let mut gv = vec![0.0; v.len()];
    let mut gu = vec![0.0; f.data().len()];
    sampler.backward(v.data(), grad_out, Some(&mut gv), Some(&mut gu));
    Ok((gv, gu))
}

/// Warp every channel of a probability map, then renormalise per voxel.
pub fn warp_probmap(s: &ProbMap, f: &DisplacementField) -> Result<ProbMap> {
    let sampler = sampler_for(s.shape(), f)?;
    let raw = warp_channels(s.probs(), s.num_labels(), &sampler);
    let out = renormalize(&raw, s.num_labels(), s.num_voxels());
    Ok(ProbMap::from_parts(
        s.shape().to_vec(),
        s.spacing().to_vec(),
        s.num_labels(),
        out,
    ))
}

/// Gradient of `sum(grad_out * warp_probmap(s, f))` with respect to `u`.
pub fn warp_probmap_backward(
    s: &ProbMap,
    f: &DisplacementField,
    grad_out: &[f64],
) -> Result<Vec<f64>> {
    let sampler = sampler_for(s.shape(), f)?;
    if grad_out.len() != s.probs().len() {
        return Err(Error::input("gradient length does not match probability map"));
    }
    Ok(probmap_field_grad(s.probs(), s.num_labels(), &sampler, grad_out))
}

pub(crate) fn probmap_field_grad(
    probs: &[f64],
    channels: usize,
    sampler: &Sampler,
    grad_out: &[f64],
) -> Vec<f64> {
    let nvox = sampler.grid.len();
    let raw = warp_channels(probs, channels, sampler);
    let g_raw = renormalize_backward(&raw, grad_out, channels, nvox);
    let mut gu = vec![0.0; sampler.grid.ndim * nvox];
    for c in 0..channels {
        sampler.backward(
            &probs[c * nvox..(c + 1) * nvox],
            &g_raw[c * nvox..(c + 1) * nvox],
            None,
            Some(&mut gu),
        );
    }
    gu
}

/// Composite displacement of `f1 ∘ f2`: `u2(p) + u1(p + u2(p))`.
pub fn compose_fields(f1: &DisplacementField, f2: &DisplacementField) -> Result<DisplacementField> {
    ensure_shape(f1.shape(), f2.shape())?;
    let sampler = Sampler::new(Grid::from_shape(f2.shape()), f2.data());
    let mut out = warp_channels(f1.data(), f1.ndim(), &sampler);
    for (o, &u2) in out.iter_mut().zip(f2.data()) {
        *o += u2;
    }
    Ok(DisplacementField::from_parts(f2.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_one_hot, LabelMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_1d(row: &[f64], u: &[f64]) -> Vec<f64> {
        let grid = Grid::from_shape(&[row.len()]);
        let s = Sampler::new(grid, u);
        warp_channels(row, 1, &s)
    }

    fn random_volume(rng: &mut ChaCha8Rng, shape: &[usize]) -> Volume {
        let n = num_voxels(shape);
        Volume::from_data(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> DisplacementField {
        let n = num_voxels(shape) * shape.len();
        DisplacementField::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-amp..amp)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_field_is_zero() {
        let f = identity_field(&[4, 4]).unwrap();
        assert_eq!(f.data().len(), 2 * 16);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_interpolation_1d() {
        // row [0, 2] shifted by +0.5: first sample at x = 0.5
        let out = sample_1d(&[0.0, 2.0], &[0.5, 0.5]);
        assert_eq!(out[0], 1.0);
        // second sample clamps to the right edge
        assert_eq!(out[1], 2.0);
    }

    #[test]
    fn midpoint_interpolation_2d() {
        let v = Volume::from_data(vec![2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let mut u = vec![0.0; 8];
        u[4..].fill(0.5); // second component moves along the last axis
        let f = DisplacementField::new(vec![2, 2], u).unwrap();
        let out = warp_scalar(&v, &f).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn low_boundary_clamps() {
        let row = [3.0, 5.0, 7.0, 9.0];
        let out = sample_1d(&row, &[-1.0; 4]);
        assert_eq!(out, vec![3.0, 3.0, 5.0, 7.0]);
        let v = Volume::from_data(vec![2, 4], [row, row].concat()).unwrap();
        let mut u = vec![0.0; 16];
        u[8..].fill(-1.0);
        let f = DisplacementField::new(vec![2, 4], u).unwrap();
        let out = warp_scalar(&v, &f).unwrap();
        assert_eq!(&out.data()[..4], &[3.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [vec![5, 7], vec![3, 4, 5]] {
            let v = random_volume(&mut rng, &shape);
            let out = warp_scalar(&v, &identity_field(&shape).unwrap()).unwrap();
            assert_eq!(out, v);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let v = Volume::zeros(vec![4, 4], vec![1.0, 1.0]).unwrap();
        let f = identity_field(&[4, 5]).unwrap();
        assert!(matches!(
            warp_scalar(&v, &f),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn convexity_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = random_volume(&mut rng, &[6, 5]);
            let f = random_field(&mut rng, &[6, 5], 4.0);
            let (lo, hi) = v.min_max();
            let out = warp_scalar(&v, &f).unwrap();
            assert!(out.data().iter().all(|&x| x >= lo && x <= hi));
        }
    }

    #[test]
    fn probmap_identity_and_normalisation() {
        let s = LabelMap::from_labels(vec![3, 3], 3, vec![0, 1, 2, 1, 1, 0, 2, 2, 0]).unwrap();
        let oh = make_one_hot(&s).unwrap();
        let out = warp_probmap(&oh, &identity_field(&[3, 3]).unwrap()).unwrap();
        assert_eq!(out, oh);

        let mut u = vec![0.0; 18];
        u[..9].fill(0.5);
        let f = DisplacementField::new(vec![3, 3], u).unwrap();
        let out = warp_probmap(&oh, &f).unwrap();
        for p in 0..9 {
            let sum: f64 = (0..3).map(|l| out.channel(l)[p]).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn integer_shift_equals_shifted_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6usize, 7usize);
        let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
        let s = LabelMap::from_labels(vec![h, w], 3, labels.clone()).unwrap();
        let (dy, dx) = (1i64, -2i64);
        let mut u = vec![0.0; 2 * h * w];
        u[..h * w].fill(dy as f64);
        u[h * w..].fill(dx as f64);
        let f = DisplacementField::new(vec![h, w], u).unwrap();
        let warped = warp_probmap(&make_one_hot(&s).unwrap(), &f).unwrap();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y + dy, x + dx);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                let want = labels[(sy * w as i64 + sx) as usize] as usize;
                let p = (y * w as i64 + x) as usize;
                for l in 0..3 {
                    let expect = if l == want { 1.0 } else { 0.0 };
                    assert_eq!(warped.channel(l)[p], expect);
                }
            }
        }
    }

    #[test]
    fn compose_identity_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_field(&mut rng, &[5, 6], 2.0);
        let id = identity_field(&[5, 6]).unwrap();
        assert_eq!(compose_fields(&id, &f).unwrap(), f);
        assert_eq!(compose_fields(&f, &id).unwrap(), f);
    }

    #[test]
    fn compose_constant_shifts_add() {
        let shape = [6, 6];
        let constant = |a: f64, b: f64| {
            let mut u = vec![a; 72];
            u[36..].fill(b);
            DisplacementField::new(shape.to_vec(), u).unwrap()
        };
        let c = compose_fields(&constant(1.0, -2.0), &constant(2.0, 1.0)).unwrap();
        assert_eq!(c, constant(3.0, -1.0));
    }

    #[test]
    fn scalar_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = [8, 8];
        let v = random_volume(&mut rng, &shape);
        let f = random_field(&mut rng, &shape, 1.5);
        let weights: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |v: &Volume, f: &DisplacementField| -> f64 {
            let out = warp_scalar(v, f).unwrap();
            out.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (gv, gu) = warp_scalar_backward(&v, &f, &weights).unwrap();
        let h = 1e-6;
        for i in 0..f.data().len() {
            let mut up = f.data().to_vec();
            up[i] += h;
            let mut dn = f.data().to_vec();
            dn[i] -= h;
            let fd = (objective(&v, &DisplacementField::new(shape.to_vec(), up).unwrap())
                - objective(&v, &DisplacementField::new(shape.to_vec(), dn).unwrap()))
                / (2.0 * h);
            let denom = fd.abs().max(gu[i].abs()).max(1e-8);
            assert!((fd - gu[i]).abs() / denom < 1e-4, "u[{i}]: fd {fd} vs {}", gu[i]);
        }
        for i in 0..v.len() {
            let mut up = v.data().to_vec();
            up[i] += h;
            let mut dn = v.data().to_vec();
            dn[i] -= h;
            let fd = (objective(&Volume::from_data(shape.to_vec(), up).unwrap(), &f)
                - objective(&Volume::from_data(shape.to_vec(), dn).unwrap(), &f))
                / (2.0 * h);
            let denom = fd.abs().max(gv[i].abs()).max(1e-8);
            assert!((fd - gv[i]).abs() / denom < 1e-4, "v[{i}]");
        }
    }
}
