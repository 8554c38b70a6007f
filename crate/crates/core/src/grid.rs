//! Padded 3-axis indexing shared by the numeric kernels.
//!
//! Every spatial array is stored row-major with the last axis contiguous.
//! Kernels treat a shape of rank `ndim <= 3` as a 3-axis grid with leading
//! unit axes, so one code path serves 1D, 2D and 3D data. Only the trailing
//! `ndim` axes are "active": stencils, windows and displacements live there.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Grid {
    pub n: [usize; 3],
    pub ndim: usize,
}

impl Grid {
    pub fn from_shape(shape: &[usize]) -> Self {
        assert!((1..=3).contains(&shape.len()), "rank must be 1..=3");
        let mut n = [1usize; 3];
        let off = 3 - shape.len();
        n[off..].copy_from_slice(shape);
        Grid {
            n,
            ndim: shape.len(),
        }
    }

    pub fn with_ndim(n: [usize; 3], ndim: usize) -> Self {
        Grid { n, ndim }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [self.n[1] * self.n[2], self.n[2], 1]
    }

    /// First padded axis that is active.
    #[inline]
    pub fn first_active(&self) -> usize {
        3 - self.ndim
    }

    #[inline]
    pub fn is_active(&self, axis: usize) -> bool {
        axis >= self.first_active()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.n[self.first_active()..].to_vec()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.n[1] + y) * self.n[2] + x
    }
}

/// Sliding-window sum along one axis, window clipped at the borders.
/// `radius` voxels on each side of the centre.
pub(crate) fn box_sum_axis(src: &[f64], dst: &mut [f64], grid: Grid, axis: usize, radius: usize) {
    let n = grid.n[axis];
    let stride = grid.strides()[axis];
    let outer: usize = grid.len() / n;
    let mut prefix = vec![0.0; n + 1];
    for line in 0..outer {
        // decompose `line` into the base offset of a 1D line along `axis`
        let base = line_base(grid, axis, line);
        for i in 0..n {
            prefix[i + 1] = prefix[i] + src[base + i * stride];
        }
        for i in 0..n {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            dst[base + i * stride] = prefix[hi] - prefix[lo];
        }
    }
}

/// Offset of the first element of the `line`-th 1D line along `axis`.
#[inline]
pub(crate) fn line_base(grid: Grid, axis: usize, line: usize) -> usize {
    let s = grid.strides();
    match axis {
        0 => line,
        1 => {
            let z = line / grid.n[2];
            let x = line % grid.n[2];
            z * s[0] + x
        }
        _ => line * grid.n[2],
    }
}

/// Clipped-window box sum over all active axes.
pub(crate) fn box_sum(src: &[f64], grid: Grid, radius: usize) -> Vec<f64> {
    let mut a = src.to_vec();
    let mut b = vec![0.0; src.len()];
    for axis in grid.first_active()..3 {
        box_sum_axis(&a, &mut b, grid, axis, radius);
        std::mem::swap(&mut a, &mut b);
    }
    a
}
