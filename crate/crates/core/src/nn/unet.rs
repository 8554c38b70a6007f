//! UNet with stride-2 encoder convolutions, nearest-upsampling decoder and
//! skip connections between matching resolutions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    concat, conv_backward, conv_forward, leaky_relu_backward, leaky_relu_inplace, upsample2,
    upsample2_backward, ConvGeom, Tensor,
};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub ndim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// One entry per downsampling level.
    pub enc_filters: Vec<usize>,
    /// The first `levels` entries run before each upsampling, the rest at full resolution.
    pub dec_filters: Vec<usize>,
    pub leaky_slope: f64,
}

impl UNetSpec {
    pub fn levels(&self) -> usize {
        self.enc_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.ndim) {
            return Err(Error::config(format!("ndim must be 2 or 3, got {}", self.ndim)));
        }
        if self.enc_filters.is_empty() {
            return Err(Error::config("at least one encoder level is required"));
        }
        if self.dec_filters.len() < self.enc_filters.len() {
            return Err(Error::config(format!(
                "need at least {} decoder filters, got {}",
                self.enc_filters.len(),
                self.dec_filters.len()
            )));
        }
        if self.in_channels == 0
            || self.out_channels == 0
            || self.enc_filters.iter().chain(&self.dec_filters).any(|&f| f == 0)
        {
            return Err(Error::config("all channel counts must be >= 1"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Reject spatial shapes that cannot be halved `levels` times.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.ndim {
            return Err(Error::config(format!(
                "network is {}D but input is {}D",
                self.ndim,
                shape.len()
            )));
        }
        let div = 1usize << self.levels();
        if let Some(&n) = shape.iter().find(|&&n| n % div != 0 || n < div) {
            return Err(Error::config(format!(
                "axis length {n} is not divisible by 2^{} = {div}",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Spatial shape at every encoder level (level 0 is the input).
    pub fn level_shapes(&self, shape: &[usize]) -> Vec<Vec<usize>> {
        (0..=self.levels())
            .map(|l| shape.iter().map(|n| n >> l).collect())
            .collect()
    }
}

/// A named parameter array inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    geom: ConvGeom,
    w_off: usize,
    b_off: usize,
    activate: bool,
}

#[derive(Clone, Debug)]
pub struct UNet {
    spec: UNetSpec,
    layers: Vec<Layer>,
    slots: Vec<ParamSlot>,
    params: Vec<f64>,
}

/// Intermediate values kept by [`UNet::forward`] for the backward pass.
pub struct ForwardCache {
    cols: Vec<Vec<f64>>,
    in_grids: Vec<Grid>,
    acts: Vec<Vec<f64>>,
    skip_channels: Vec<usize>,
    skip_grids: Vec<Grid>,
}

impl UNet {
    /// Build with He-normal hidden layers; the output layer is drawn from
    /// `Normal(0, final_std)` when given, otherwise like the hidden layers.
    pub fn new<R: Rng>(spec: UNetSpec, final_std: Option<f64>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let levels = spec.levels();
        let nd = spec.ndim;
        let mut skip_ch = vec![spec.in_channels];
        skip_ch.extend(spec.enc_filters.iter().copied());

        let mut geoms: Vec<(String, ConvGeom, bool)> = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &f) in spec.enc_filters.iter().enumerate() {
            geoms.push((format!("enc{i}"), ConvGeom { cin, cout: f, stride: 2, ndim: nd }, true));
            cin = f;
        }
        for (j, &f) in spec.dec_filters.iter().enumerate() {
            geoms.push((format!("dec{j}"), ConvGeom { cin, cout: f, stride: 1, ndim: nd }, true));
            cin = if j < levels { f + skip_ch[levels - 1 - j] } else { f };
        }
        geoms.push((
            "out".to_string(),
            ConvGeom {
                cin,
                cout: spec.out_channels,
                stride: 1,
                ndim: nd,
            },
            false,
        ));

        let mut layers = Vec::new();
        let mut slots = Vec::new();
        let mut params = Vec::new();
        let n_layers = geoms.len();
        for (idx, (name, geom, activate)) in geoms.into_iter().enumerate() {
            let fan_in = (geom.cin * geom.taps()) as f64;
            let is_final = idx + 1 == n_layers;
            let std = match (is_final, final_std) {
                (true, Some(s)) => s,
                _ => (2.0 / ((1.0 + spec.leaky_slope.powi(2)) * fan_in)).sqrt(),
            };
            let w_off = params.len();
            let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            params.extend((0..geom.weight_len()).map(|_| dist.sample(rng)));
            let mut wshape = vec![geom.cout, geom.cin];
            wshape.extend(std::iter::repeat_n(3, nd));
            slots.push(ParamSlot {
                name: format!("{name}.weight"),
                shape: wshape,
                offset: w_off,
                len: geom.weight_len(),
            });
            let b_off = params.len();
            params.extend(std::iter::repeat_n(0.0, geom.cout));
            slots.push(ParamSlot {
                name: format!("{name}.bias"),
                shape: vec![geom.cout],
                offset: b_off,
                len: geom.cout,
            });
            layers.push(Layer {
                geom,
                w_off,
                b_off,
                activate,
            });
        }
        Ok(UNet {
            spec,
            layers,
            slots,
            params,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    /// Replace all parameters; lengths must match.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn final_layer_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().expect("network has layers");
        last.w_off..last.b_off + last.geom.cout
    }

    fn run_layer(&self, idx: usize, h: &Tensor, cache: &mut Option<ForwardCache>) -> Tensor {
        let l = self.layers[idx];
        let w = &self.params[l.w_off..l.w_off + l.geom.weight_len()];
        let b = &self.params[l.b_off..l.b_off + l.geom.cout];
        let (mut out, cols) = conv_forward(h, w, b, l.geom);
        if l.activate {
            leaky_relu_inplace(&mut out.data, self.spec.leaky_slope);
        }
        if let Some(c) = cache.as_mut() {
            c.cols.push(cols);
            c.in_grids.push(h.grid);
            c.acts.push(if l.activate { out.data.clone() } else { Vec::new() });
        }
        out
    }

    /// Forward pass. Keeps the intermediates when `keep` is set.
    pub fn forward(&self, input: &Tensor, keep: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        if input.channels != self.spec.in_channels {
            return Err(Error::input(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, input.channels
            )));
        }
        self.spec.check_shape(&input.spatial_shape())?;
        let levels = self.spec.levels();
        let mut cache = keep.then(|| ForwardCache {
            cols: Vec::new(),
            in_grids: Vec::new(),
            acts: Vec::new(),
            skip_channels: Vec::new(),
            skip_grids: Vec::new(),
        });
        let mut skips = vec![input.clone()];
        let mut h = input.clone();
        for i in 0..levels {
            h = self.run_layer(i, &h, &mut cache);
            skips.push(h.clone());
        }
        if let Some(c) = cache.as_mut() {
            c.skip_channels = skips.iter().map(|s| s.channels).collect();
            c.skip_grids = skips.iter().map(|s| s.grid).collect();
        }
        let n_dec = self.spec.dec_filters.len();
        for j in 0..n_dec {
            h = self.run_layer(levels + j, &h, &mut cache);
            if j < levels {
                h = upsample2(&h);
                h = concat(&h, &skips[levels - 1 - j]);
            }
        }
        let out = self.run_layer(levels + n_dec, &h, &mut cache);
        Ok((out, cache))
    }

    fn layer_backward(
        &self,
        idx: usize,
        cache: &ForwardCache,
        mut grad: Vec<f64>,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let l = self.layers[idx];
        if l.activate {
            leaky_relu_backward(&mut grad, &cache.acts[idx], self.spec.leaky_slope);
        }
        let wlen = l.geom.weight_len();
        let (gw, gb) = {
            let (head, tail) = grads.split_at_mut(l.b_off);
            (&mut head[l.w_off..l.w_off + wlen], &mut tail[..l.geom.cout])
        };
        conv_backward(
            &grad,
            &cache.cols[idx],
            cache.in_grids[idx],
            &self.params[l.w_off..l.w_off + wlen],
            l.geom,
            gw,
            gb,
            need_input,
        )
    }

    /// Parameter gradient of `sum(grad_out * forward(input))`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
        let levels = self.spec.levels();
        let n_dec = self.spec.dec_filters.len();
        let mut grads = vec![0.0; self.params.len()];
        let mut skip_grads: Vec<Option<Vec<f64>>> = vec![None; levels + 1];

        let mut g = self
            .layer_backward(levels + n_dec, cache, grad_out.to_vec(), &mut grads, true)
            .expect("input gradient");
        for j in (0..n_dec).rev() {
            if j < levels {
                // undo concat(upsampled, skip) then the upsampling
                let s = levels - 1 - j;
                let up_grid = cache.skip_grids[s];
                let skip_len = cache.skip_channels[s] * up_grid.len();
                let up_len = g.len() - skip_len;
                let skip_part = g.split_off(up_len);
                match &mut skip_grads[s] {
                    Some(acc) => acc.iter_mut().zip(&skip_part).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(skip_part),
                }
                let channels = self.spec.dec_filters[j];
                let coarse = cache.in_grids[levels + j];
                let coarse = self.layers[levels + j].geom.out_grid(coarse);
                g = upsample2_backward(&g, channels, coarse);
            }
            g = self
                .layer_backward(levels + j, cache, g, &mut grads, true)
                .expect("input gradient");
        }
        for i in (0..levels).rev() {
            if let Some(sg) = skip_grads[i + 1].take() {
                g.iter_mut().zip(&sg).for_each(|(a, b)| *a += b);
            }
            let need = i > 0;
            match self.layer_backward(i, cache, g, &mut grads, need) {
                Some(next) => g = next,
                None => break,
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(ndim: usize) -> UNetSpec {
        UNetSpec {
            ndim,
            in_channels: 2,
            out_channels: ndim,
            enc_filters: vec![3, 4],
            dec_filters: vec![4, 3, 3],
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn output_shape_and_level_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(spec(2), None, &mut rng).unwrap();
        let g = Grid::from_shape(&[8, 12]);
        let x = Tensor::new(2, g, (0..2 * g.len()).map(|i| (i as f64).sin()).collect());
        let (y, _) = net.forward(&x, false).unwrap();
        assert_eq!(y.channels, 2);
        assert_eq!(y.spatial_shape(), vec![8, 12]);
        assert_eq!(
            net.spec().level_shapes(&[8, 12]),
            vec![vec![8, 12], vec![4, 6], vec![2, 3]]
        );
        assert!(net.spec().check_shape(&[6, 12]).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for nd in [2usize, 3] {
            let mut net = UNet::new(spec(nd), None, &mut rng).unwrap();
            let shape = if nd == 2 { vec![8, 8] } else { vec![4, 4, 4] };
            let g = Grid::from_shape(&shape);
            let x = Tensor::new(2, g, (0..2 * g.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (y, cache) = net.forward(&x, true).unwrap();
            let w: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads = net.backward(&cache.unwrap(), &w);
            let h = 1e-6;
            let objective = |net: &UNet| -> f64 {
                let (y, _) = net.forward(&x, false).unwrap();
                y.data.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            for i in (0..net.num_params()).step_by(7) {
                let orig = net.params()[i];
                net.params_mut()[i] = orig + h;
                let up = objective(&net);
                net.params_mut()[i] = orig - h;
                let dn = objective(&net);
                net.params_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                // central-difference roundoff is ~1e-9 at this step size
                let tol = 1e-5 * fd.abs().max(grads[i].abs()) + 1e-7;
                assert!(
                    (fd - grads[i]).abs() < tol,
                    "{nd}D param {i}: fd {fd} analytic {}",
                    grads[i]
                );
            }
        }
    }

    #[test]
    fn same_spec_same_layout() {
        let a = UNet::new(spec(2), Some(1e-5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = UNet::new(spec(2), Some(1e-5), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.slots(), b.slots());
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(2);
        s.dec_filters = vec![4];
        assert!(s.validate().is_err());
        let mut s = spec(2);
        s.enc_filters.clear();
        assert!(s.validate().is_err());
    }
}
