//! Registration network: `g(moving, fixed) -> displacement field` that warps
//! `moving` toward `fixed`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::grid::Grid;
use crate::losses::{registration_objective, LossConfig, LossTerms};
use crate::nn::{Tensor, UNet, UNetSpec};
use crate::volume::{make_one_hot, Atlas, Volume};
use crate::warp::DisplacementField;

/// Structural hyperparameters shared by the registration and segmentation
/// networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegNetConfig {
    pub enc_filters: Vec<usize>,
    pub dec_filters: Vec<usize>,
    pub levels: usize,
    pub leaky_slope: f64,
    /// Standard deviation of the output convolution at build time.
    pub final_init_std: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        RegNetConfig {
            enc_filters: vec![16, 32, 32, 32],
            dec_filters: vec![32, 32, 32, 32, 16, 16],
            levels: 4,
            leaky_slope: 0.2,
            final_init_std: 1e-5,
        }
    }
}

impl RegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.enc_filters.len() != self.levels {
            return Err(Error::config(format!(
                "enc_filters has {} entries but levels = {}",
                self.enc_filters.len(),
                self.levels
            )));
        }
        if !(self.final_init_std >= 0.0 && self.final_init_std.is_finite()) {
            return Err(Error::config("final_init_std must be finite and >= 0"));
        }
        self.unet_spec(2, 1, 1).validate()
    }

    pub(crate) fn unet_spec(&self, ndim: usize, in_channels: usize, out_channels: usize) -> UNetSpec {
        UNetSpec {
            ndim,
            in_channels,
            out_channels,
            enc_filters: self.enc_filters.clone(),
            dec_filters: self.dec_filters.clone(),
            leaky_slope: self.leaky_slope,
        }
    }
}

/// A moving/fixed pair together with the objective it is trained on.
#[derive(Clone, Copy, Debug)]
pub enum RegPair<'a> {
    /// Image similarity plus smoothness.
    Unsupervised { moving: &'a Volume, fixed: &'a Volume },
    /// Adds the soft Dice term between the atlases' label maps.
    Supervised { moving: &'a Atlas, fixed: &'a Atlas },
}

impl<'a> RegPair<'a> {
    fn images(&self) -> (&'a Volume, &'a Volume) {
        match *self {
            RegPair::Unsupervised { moving, fixed } => (moving, fixed),
            RegPair::Supervised { moving, fixed } => (&moving.image, &fixed.image),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegNet {
    config: RegNetConfig,
    shape: Vec<usize>,
    net: UNet,
}

/// Build a registration network for images of `shape`.
pub fn build_regnet<R: Rng>(cfg: &RegNetConfig, shape: &[usize], rng: &mut R) -> Result<RegNet> {
    cfg.validate()?;
    let nd = shape.len();
    let spec = cfg.unet_spec(nd, 2, nd);
    spec.check_shape(shape)?;
    let net = UNet::new(spec, Some(cfg.final_init_std), rng)?;
    Ok(RegNet {
        config: cfg.clone(),
        shape: shape.to_vec(),
        net,
    })
}

impl RegNet {
    /// Rebuild from stored parameters.
    pub fn from_params(cfg: &RegNetConfig, shape: &[usize], params: Vec<f64>) -> Result<Self> {
        // the draw is overwritten; any seed gives the same layout
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = build_regnet(cfg, shape, &mut rng)?;
        net.net.set_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &RegNetConfig {
        &self.config
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Multiply the output convolution by `factor`; used to move away from
    /// the near-identity start when probing gradients.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let range = self.net.final_layer_range();
        self.net.params_mut()[range].iter_mut().for_each(|p| *p *= factor);
    }

    fn input(&self, moving: &Volume, fixed: &Volume) -> Result<Tensor> {
        ensure_shape(&self.shape, moving.shape())?;
        ensure_shape(&self.shape, fixed.shape())?;
        let mut data = Vec::with_capacity(2 * moving.len());
        data.extend_from_slice(moving.data());
        data.extend_from_slice(fixed.data());
        Ok(Tensor::new(2, Grid::from_shape(&self.shape), data))
    }

    /// Predict the field that warps `moving` onto `fixed`.
    pub fn forward(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        let (out, _) = self.net.forward(&self.input(moving, fixed)?, false)?;
        let field = DisplacementField::from_parts(self.shape.clone(), out.data);
        if field.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("registration network output".into()));
        }
        Ok(field)
    }

    fn evaluate(
        &self,
        pair: RegPair<'_>,
        cfg: &LossConfig,
        want_grad: bool,
    ) -> Result<(LossTerms, Option<Vec<f64>>)> {
        cfg.validate()?;
        let (moving, fixed) = pair.images();
        let input = self.input(moving, fixed)?;
        let grid = input.grid;
        if self.shape.iter().any(|&n| n < cfg.ncc_window) {
            return Err(Error::config(format!(
                "ncc_window {} exceeds image shape {:?}",
                cfg.ncc_window, self.shape
            )));
        }
        let (out, cache) = self.net.forward(&input, want_grad)?;
        let one_hots = match pair {
            RegPair::Supervised { moving, fixed } => {
                if moving.num_labels() != fixed.num_labels() {
                    return Err(Error::input("atlases disagree on the number of labels"));
                }
                Some((make_one_hot(&fixed.labels)?, make_one_hot(&moving.labels)?))
            }
            RegPair::Unsupervised { .. } => None,
        };
        let labels = one_hots
            .as_ref()
            .map(|(f, m)| (f.probs(), m.probs(), f.num_labels()));
        let (terms, grad_u) = registration_objective(
            fixed.data(),
            moving.data(),
            &out.data,
            grid,
            labels,
            cfg,
            want_grad,
        );
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("registration loss {terms:?}")));
        }
        let grads = match (cache, grad_u) {
            (Some(c), Some(gu)) => Some(self.net.backward(&c, &gu)),
            _ => None,
        };
        Ok((terms, grads))
    }

    /// Loss of the predicted field on `pair`.
    pub fn loss(&self, pair: RegPair<'_>, cfg: &LossConfig) -> Result<LossTerms> {
        self.evaluate(pair, cfg, false).map(|(t, _)| t)
    }

    /// Loss and its gradient with respect to every network parameter.
    pub fn loss_and_grad(&self, pair: RegPair<'_>, cfg: &LossConfig) -> Result<(LossTerms, Vec<f64>)> {
        self.evaluate(pair, cfg, true)
            .map(|(t, g)| (t, g.expect("gradient requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RegNetConfig {
        RegNetConfig {
            enc_filters: vec![4, 4, 4],
            dec_filters: vec![4, 4, 4, 4],
            levels: 3,
            ..RegNetConfig::default()
        }
    }

    fn blob(shape: &[usize], cx: f64) -> Volume {
        let (h, w) = (shape[0], shape[1]);
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (-((y - 8.0).powi(2) + (x - cx).powi(2)) / 12.0).exp()
            })
            .collect();
        Volume::from_data(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn fresh_network_is_near_identity() {
        let net = build_regnet(&small(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let f = net.forward(&blob(&[16, 16], 7.0), &blob(&[16, 16], 9.0)).unwrap();
        assert_eq!(f.shape(), &[16, 16]);
        assert!(f.max_abs() < 1e-2, "max displacement {}", f.max_abs());
    }

    #[test]
    fn rejects_indivisible_shape_and_bad_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_regnet(&small(), &[12, 16], &mut rng).is_err());
        let mut cfg = small();
        cfg.levels = 2;
        assert!(build_regnet(&cfg, &[16, 16], &mut rng).is_err());
    }

    #[test]
    fn forward_rejects_other_shapes_and_is_deterministic() {
        let net = build_regnet(&small(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = blob(&[16, 16], 7.0);
        let b = blob(&[16, 16], 9.0);
        assert_eq!(net.forward(&a, &b).unwrap(), net.forward(&a, &b).unwrap());
        let c = Volume::zeros(vec![32, 32], vec![1.0, 1.0]).unwrap();
        assert!(net.forward(&c, &c).is_err());
    }

    #[test]
    fn layout_independent_of_rng() {
        let a = build_regnet(&small(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_regnet(&small(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.network().slots(), b.network().slots());
        let c = RegNet::from_params(&small(), &[16, 16], a.params().to_vec()).unwrap();
        assert_eq!(c.params(), a.params());
    }
}
