//! Minimal CPU tensor kernels with hand-written backward passes.
//!
//! Tensors are channel-major over a padded 3-axis grid (see `grid`), which
//! lets the same 3-tap convolution code run in 2D and 3D.

mod adam;
mod unet;

pub use adam::{Adam, AdamConfig};
pub use unet::{ForwardCache, ParamSlot, UNet, UNetSpec};

use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub(crate) grid: Grid,
    pub data: Vec<f64>,
}

impl Tensor {
    pub(crate) fn new(channels: usize, grid: Grid, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * grid.len());
        Tensor {
            channels,
            grid,
            data,
        }
    }

    pub(crate) fn zeros(channels: usize, grid: Grid) -> Self {
        Tensor::new(channels, grid, vec![0.0; channels * grid.len()])
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        self.grid.shape()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Geometry of a 3-tap convolution with padding 1 on every active axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub ndim: usize,
}

impl ConvGeom {
    /// Kernel taps per input channel.
    pub fn taps(&self) -> usize {
        3usize.pow(self.ndim as u32)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn out_grid(&self, g: Grid) -> Grid {
        let mut n = g.n;
        for (a, v) in n.iter_mut().enumerate() {
            if g.is_active(a) && self.stride == 2 {
                *v /= 2;
            }
        }
        Grid::with_ndim(n, g.ndim)
    }

    fn kernel_extent(&self, g: Grid, a: usize) -> (usize, usize) {
        // (taps, stride) along padded axis `a`
        if g.is_active(a) {
            (3, self.stride)
        } else {
            (1, 1)
        }
    }
}

/// Unfold the input into a `[cin * taps, out_voxels]` matrix.
pub(crate) fn im2col(input: &[f64], g: Grid, geom: ConvGeom) -> (Vec<f64>, Grid) {
    let og = geom.out_grid(g);
    let p_out = og.len();
    let taps = geom.taps();
    let mut cols = vec![0.0; geom.cin * taps * p_out];
    let (kz, sz) = geom.kernel_extent(g, 0);
    let (ky, sy) = geom.kernel_extent(g, 1);
    let (kx, sx) = geom.kernel_extent(g, 2);
    let pz = kz / 2;
    let py = ky / 2;
    let px = kx / 2;
    let nin = g.len();
    for ci in 0..geom.cin {
        let src = &input[ci * nin..(ci + 1) * nin];
        let mut tap = 0;
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = &mut cols[(ci * taps + tap) * p_out..(ci * taps + tap + 1) * p_out];
                    for oz in 0..og.n[0] {
                        let iz = (oz * sz + dz) as isize - pz as isize;
                        if iz < 0 || iz >= g.n[0] as isize {
                            continue;
                        }
                        for oy in 0..og.n[1] {
                            let iy = (oy * sy + dy) as isize - py as isize;
                            if iy < 0 || iy >= g.n[1] as isize {
                                continue;
                            }
                            let in_base = (iz as usize * g.n[1] + iy as usize) * g.n[2];
                            let out_base = (oz * og.n[1] + oy) * og.n[2];
                            // valid ox: 0 <= ox*sx + dx - px < n2
                            let lo = if dx >= px { 0 } else { (px - dx).div_ceil(sx) };
                            let hi_excl = (g.n[2] + px - dx).div_ceil(sx).min(og.n[2]);
                            for ox in lo..hi_excl {
                                row[out_base + ox] = src[in_base + ox * sx + dx - px];
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
    (cols, og)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: Grid, geom: ConvGeom) -> Vec<f64> {
    let og = geom.out_grid(g);
    let p_out = og.len();
    let taps = geom.taps();
    let nin = g.len();
    let mut out = vec![0.0; geom.cin * nin];
    let (kz, sz) = geom.kernel_extent(g, 0);
    let (ky, sy) = geom.kernel_extent(g, 1);
    let (kx, sx) = geom.kernel_extent(g, 2);
    let pz = kz / 2;
    let py = ky / 2;
    let px = kx / 2;
    for ci in 0..geom.cin {
        let dst = &mut out[ci * nin..(ci + 1) * nin];
        let mut tap = 0;
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = &cols[(ci * taps + tap) * p_out..(ci * taps + tap + 1) * p_out];
                    for oz in 0..og.n[0] {
                        let iz = (oz * sz + dz) as isize - pz as isize;
                        if iz < 0 || iz >= g.n[0] as isize {
                            continue;
                        }
                        for oy in 0..og.n[1] {
                            let iy = (oy * sy + dy) as isize - py as isize;
                            if iy < 0 || iy >= g.n[1] as isize {
                                continue;
                            }
                            let in_base = (iz as usize * g.n[1] + iy as usize) * g.n[2];
                            let out_base = (oz * og.n[1] + oy) * og.n[2];
                            let lo = if dx >= px { 0 } else { (px - dx).div_ceil(sx) };
                            let hi_excl = (g.n[2] + px - dx).div_ceil(sx).min(og.n[2]);
                            for ox in lo..hi_excl {
                                dst[in_base + ox * sx + dx - px] += row[out_base + ox];
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
    out
}

/// `c[m x n] = alpha * a[m x k] . b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every access through the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward. Returns the output and the unfolded input.
pub(crate) fn conv_forward(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    geom: ConvGeom,
) -> (Tensor, Vec<f64>) {
    debug_assert_eq!(input.channels, geom.cin);
    let (cols, og) = im2col(&input.data, input.grid, geom);
    let p = og.len();
    let kdim = geom.cin * geom.taps();
    let mut out = vec![0.0; geom.cout * p];
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(geom.cout, kdim, p, weight, (kdim, 1), &cols, (p, 1), 1.0, &mut out);
    (Tensor::new(geom.cout, og, out), cols)
}

/// Convolution backward. Accumulates weight/bias gradients and returns the
/// input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    grad_out: &[f64],
    cols: &[f64],
    in_grid: Grid,
    weight: &[f64],
    geom: ConvGeom,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let og = geom.out_grid(in_grid);
    let p = og.len();
    let kdim = geom.cin * geom.taps();
    for (co, g) in grad_b.iter_mut().enumerate() {
        *g += grad_out[co * p..(co + 1) * p].iter().sum::<f64>();
    }
    gemm(geom.cout, p, kdim, grad_out, (p, 1), cols, (1, p), 1.0, grad_w);
    if !need_input {
        return None;
    }
    let mut dcols = vec![0.0; kdim * p];
    gemm(kdim, geom.cout, p, weight, (1, kdim), grad_out, (p, 1), 0.0, &mut dcols);
    Some(col2im(&dcols, in_grid, geom))
}

pub(crate) fn leaky_relu_inplace(x: &mut [f64], slope: f64) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Gradient through LeakyReLU given its output (same sign as its input for slope > 0).
pub(crate) fn leaky_relu_backward(grad: &mut [f64], out: &[f64], slope: f64) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o < 0.0 {
            *g *= slope;
        }
    }
}

/// Nearest-neighbour x2 upsampling on the active axes.
pub(crate) fn upsample2(t: &Tensor) -> Tensor {
    let g = t.grid;
    let mut n = g.n;
    let mut f = [1usize; 3];
    for a in g.first_active()..3 {
        n[a] *= 2;
        f[a] = 2;
    }
    let og = Grid::with_ndim(n, g.ndim);
    let mut out = Tensor::zeros(t.channels, og);
    let nin = g.len();
    let nout = og.len();
    for c in 0..t.channels {
        let src = &t.data[c * nin..(c + 1) * nin];
        let dst = &mut out.data[c * nout..(c + 1) * nout];
        for z in 0..n[0] {
            for y in 0..n[1] {
                let sbase = ((z / f[0]) * g.n[1] + y / f[1]) * g.n[2];
                let dbase = (z * n[1] + y) * n[2];
                for x in 0..n[2] {
                    dst[dbase + x] = src[sbase + x / f[2]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sum each 2^d block onto its source voxel.
pub(crate) fn upsample2_backward(grad: &[f64], channels: usize, coarse: Grid) -> Vec<f64> {
    let mut n = coarse.n;
    let mut f = [1usize; 3];
    for a in coarse.first_active()..3 {
        n[a] *= 2;
        f[a] = 2;
    }
    let nin = coarse.len();
    let nout = n[0] * n[1] * n[2];
    let mut out = vec![0.0; channels * nin];
    for c in 0..channels {
        let src = &grad[c * nout..(c + 1) * nout];
        let dst = &mut out[c * nin..(c + 1) * nin];
        for z in 0..n[0] {
            for y in 0..n[1] {
                let dbase = ((z / f[0]) * coarse.n[1] + y / f[1]) * coarse.n[2];
                let sbase = (z * n[1] + y) * n[2];
                for x in 0..n[2] {
                    dst[dbase + x / f[2]] += src[sbase + x];
                }
            }
        }
    }
    out
}

pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.grid, b.grid);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(a.channels + b.channels, a.grid, data)
}

/// Per-voxel softmax over channels.
pub(crate) fn softmax_channels(logits: &[f64], channels: usize, nvox: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for p in 0..nvox {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..channels {
            mx = mx.max(logits[c * nvox + p]);
        }
        let mut s = 0.0;
        for c in 0..channels {
            let e = (logits[c * nvox + p] - mx).exp();
            out[c * nvox + p] = e;
            s += e;
        }
        for c in 0..channels {
            out[c * nvox + p] /= s;
        }
    }
    out
}

/// Gradient through softmax: `dz_k = p_k (g_k - sum_l g_l p_l)`.
pub(crate) fn softmax_backward(probs: &[f64], grad: &[f64], channels: usize, nvox: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for p in 0..nvox {
        let dot: f64 = (0..channels)
            .map(|c| probs[c * nvox + p] * grad[c * nvox + p])
            .sum();
        for c in 0..channels {
            let i = c * nvox + p;
            out[i] = probs[i] * (grad[i] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution oracle on the padded grid.
    fn conv_direct(input: &[f64], g: Grid, w: &[f64], b: &[f64], geom: ConvGeom) -> Vec<f64> {
        let og = geom.out_grid(g);
        let taps = geom.taps();
        let mut out = vec![0.0; geom.cout * og.len()];
        let ext = |a: usize| if g.is_active(a) { (3usize, geom.stride) } else { (1, 1) };
        for co in 0..geom.cout {
            for oz in 0..og.n[0] {
                for oy in 0..og.n[1] {
                    for ox in 0..og.n[2] {
                        let mut s = b[co];
                        for ci in 0..geom.cin {
                            let mut tap = 0;
                            let (kz, sz) = ext(0);
                            let (ky, sy) = ext(1);
                            let (kx, sx) = ext(2);
                            for dz in 0..kz {
                                for dy in 0..ky {
                                    for dx in 0..kx {
                                        let iz = (oz * sz + dz) as isize - (kz / 2) as isize;
                                        let iy = (oy * sy + dy) as isize - (ky / 2) as isize;
                                        let ix = (ox * sx + dx) as isize - (kx / 2) as isize;
                                        if iz >= 0
                                            && iy >= 0
                                            && ix >= 0
                                            && (iz as usize) < g.n[0]
                                            && (iy as usize) < g.n[1]
                                            && (ix as usize) < g.n[2]
                                        {
                                            let v = input[ci * g.len()
                                                + g.index(iz as usize, iy as usize, ix as usize)];
                                            s += w[(co * geom.cin + ci) * taps + tap] * v;
                                        }
                                        tap += 1;
                                    }
                                }
                            }
                        }
                        out[co * og.len() + og.index(oz, oy, ox)] = s;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (shape, stride) in [(vec![6, 8], 1), (vec![6, 8], 2), (vec![4, 4, 6], 2), (vec![4, 2, 6], 1)] {
            let g = Grid::from_shape(&shape);
            let geom = ConvGeom {
                cin: 3,
                cout: 2,
                stride,
                ndim: shape.len(),
            };
            let x = Tensor::new(3, g, rand_vec(&mut rng, 3 * g.len()));
            let w = rand_vec(&mut rng, geom.weight_len());
            let b = rand_vec(&mut rng, 2);
            let (y, _) = conv_forward(&x, &w, &b, geom);
            let want = conv_direct(&x.data, g, &w, &b, geom);
            for (a, b) in y.data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid::from_shape(&[6, 4, 8]);
        let geom = ConvGeom {
            cin: 2,
            cout: 1,
            stride: 2,
            ndim: 3,
        };
        let x = rand_vec(&mut rng, 2 * g.len());
        let (cols, _) = im2col(&x, g, geom);
        let y = rand_vec(&mut rng, cols.len());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, g, geom);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::from_shape(&[3, 5]);
        let t = Tensor::new(2, g, rand_vec(&mut rng, 2 * g.len()));
        let up = upsample2(&t);
        assert_eq!(up.spatial_shape(), vec![6, 10]);
        let y = rand_vec(&mut rng, up.data.len());
        let lhs: f64 = up.data.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&y, 2, g);
        let rhs: f64 = t.data.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_vec(&mut rng, 4 * 10);
        let p = softmax_channels(&z, 4, 10);
        for v in 0..10 {
            let s: f64 = (0..4).map(|c| p[c * 10 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
