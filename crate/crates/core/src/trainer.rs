//! Training loops for the registration and segmentation networks, plus a
//! finite-difference gradient checker.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_atlas, AugmentConfig};
use crate::error::{Error, Result};
use crate::fusion::propagate_atlas;
use crate::losses::{LossConfig, LossTerms};
use crate::metrics::dice_score;
use crate::nn::{Adam, AdamConfig};
use crate::regnet::{build_regnet, RegNet, RegNetConfig, RegPair};
use crate::segnet::{build_segnet, crop_atlas, random_offset, SegNet, SegNetConfig};
use crate::volume::{argmax_labels, Atlas, LabelMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Probability that an iteration registers atlas to atlas with labels.
    pub p_supervised: f64,
    pub loss: LossConfig,
    /// Deform training atlases with a fresh random field every iteration.
    pub use_augment: bool,
    pub augment: AugmentConfig,
    /// Validate and keep the best parameters every this many iterations.
    pub checkpoint_every: usize,
    pub rng_seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            learning_rate: 1e-4,
            p_supervised: 0.1,
            loss: LossConfig::default(),
            use_augment: true,
            augment: AugmentConfig::default(),
            checkpoint_every: 250,
            rng_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Segmentation schedule. The registration step of 1e-4 leaves the patch
    /// CNN under-fit within desk-scale iteration budgets.
    pub fn segmentation_default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            p_supervised: 0.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_supervised) {
            return Err(Error::config("p_supervised must lie in [0, 1]"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub similarity: f64,
    pub smoothness: f64,
    pub segmentation: f64,
    pub supervised: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Iterations completed when the parameters were scored.
    pub iteration: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iterations: Vec<IterationRecord>,
    pub validation: Vec<ValidationRecord>,
    /// Checkpoint whose parameters were returned.
    pub best_iteration: usize,
}

impl TrainHistory {
    pub fn supervised_fraction(&self) -> f64 {
        let n = self.iterations.len().max(1) as f64;
        self.iterations.iter().filter(|r| r.supervised).count() as f64 / n
    }

    /// Mean loss over a window of records.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let r = &self.iterations[range];
        r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64
    }
}

/// Independent random stream for one iteration.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Tracks the best validation score; ties keep the earliest checkpoint.
struct BestCheckpoint {
    dice: f64,
    iteration: usize,
    params: Vec<f64>,
}

impl BestCheckpoint {
    fn offer(&mut self, dice: f64, iteration: usize, params: &[f64]) {
        if dice > self.dice {
            self.dice = dice;
            self.iteration = iteration;
            self.params = params.to_vec();
        }
    }
}

fn foreground_dice(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    let l = truth.num_labels() as u32;
    if l < 2 {
        return Err(Error::input("validation needs at least one foreground label"));
    }
    let mut s = 0.0;
    for label in 1..l {
        s += dice_score(pred, truth, label)?;
    }
    Ok(s / (l - 1) as f64)
}

/// Mean foreground Dice of every atlas propagated onto every validation subject.
pub fn registration_validation_dice(net: &RegNet, atlases: &[Atlas], validation: &[Atlas]) -> Result<f64> {
    let mut total = 0.0;
    for v in validation {
        for a in atlases {
            let warped = argmax_labels(&propagate_atlas(net, a, &v.image)?)?;
            total += foreground_dice(&warped, &v.labels)?;
        }
    }
    Ok(total / (validation.len() * atlases.len()) as f64)
}

/// Mean foreground Dice of the network's segmentation of each subject.
pub fn segmentation_validation_dice(net: &SegNet, validation: &[Atlas]) -> Result<f64> {
    let mut total = 0.0;
    for v in validation {
        let pred = argmax_labels(&net.forward_full(&v.image)?)?;
        total += foreground_dice(&pred, &v.labels)?;
    }
    Ok(total / validation.len() as f64)
}

fn check_atlases(atlases: &[Atlas]) -> Result<()> {
    let first = atlases
        .first()
        .ok_or_else(|| Error::input("training needs at least one atlas"))?;
    for a in atlases {
        if a.shape() != first.shape() || a.num_labels() != first.num_labels() {
            return Err(Error::input(format!(
                "atlas {} differs in shape or label count from {}",
                a.id, first.id
            )));
        }
    }
    Ok(())
}

fn abort_non_finite(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("iteration {iteration}: {what}")),
        other => other,
    }
}

fn is_checkpoint(cfg: &TrainConfig, done: usize) -> bool {
    done.is_multiple_of(cfg.checkpoint_every) || done == cfg.iterations
}

/// Semi-supervised registration training.
///
/// Each iteration deforms a random atlas (when augmentation is on). With
/// probability `p_supervised` a second, distinct atlas becomes the fixed image
/// and the step adds the label overlap term; otherwise a random unlabeled
/// image is the fixed image.
pub fn train_registration(
    cfg: &TrainConfig,
    net_cfg: &RegNetConfig,
    atlases: &[Atlas],
    unlabeled: &[Volume],
    validation: &[Atlas],
) -> Result<(RegNet, TrainHistory)> {
    cfg.validate()?;
    check_atlases(atlases)?;
    if cfg.p_supervised > 0.0 && atlases.len() < 2 {
        return Err(Error::config(
            "supervised atlas-to-atlas iterations need at least 2 atlases",
        ));
    }
    if cfg.p_supervised < 1.0 && unlabeled.is_empty() {
        return Err(Error::input("unsupervised iterations need at least 1 unlabeled image"));
    }
    let shape = atlases[0].shape().to_vec();
    if let Some(u) = unlabeled.iter().find(|u| u.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch {
            expected: shape.clone(),
            found: u.shape().to_vec(),
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut net = build_regnet(net_cfg, &shape, &mut init_rng)?;
    let mut opt = Adam::new(net.num_params(), cfg.learning_rate, cfg.adam.clone());
    let mut history = TrainHistory::default();
    let mut best = BestCheckpoint {
        dice: f64::NEG_INFINITY,
        iteration: 0,
        params: net.params().to_vec(),
    };
    if !validation.is_empty() {
        let dice = registration_validation_dice(&net, atlases, validation)?;
        history.validation.push(ValidationRecord { iteration: 0, dice });
        best.offer(dice, 0, net.params());
    }

    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.rng_seed, it);
        let draw = |rng: &mut ChaCha8Rng, a: &Atlas| -> Result<Atlas> {
            if cfg.use_augment {
                augment_atlas(a, &cfg.augment, rng)
            } else {
                Ok(a.clone())
            }
        };
        let mi = rng.random_range(0..atlases.len());
        let moving = draw(&mut rng, &atlases[mi])?;
        let supervised = rng.random_bool(cfg.p_supervised);
        let (terms, grads): (LossTerms, Vec<f64>) = if supervised {
            let mut fi = rng.random_range(0..atlases.len() - 1);
            if fi >= mi {
                fi += 1;
            }
            let fixed = draw(&mut rng, &atlases[fi])?;
            net.loss_and_grad(
                RegPair::Supervised {
                    moving: &moving,
                    fixed: &fixed,
                },
                &cfg.loss,
            )
        } else {
            let fixed = &unlabeled[rng.random_range(0..unlabeled.len())];
            net.loss_and_grad(
                RegPair::Unsupervised {
                    moving: &moving.image,
                    fixed,
                },
                &cfg.loss,
            )
        }
        .map_err(|e| abort_non_finite(it, e))?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("iteration {it}: parameter gradient")));
        }
        opt.step(net.params_mut(), &grads);
        history.iterations.push(IterationRecord {
            iteration: it,
            loss: terms.total,
            similarity: terms.similarity,
            smoothness: terms.smoothness,
            segmentation: terms.segmentation,
            supervised,
        });
        let done = it + 1;
        if !validation.is_empty() && is_checkpoint(cfg, done) {
            let dice = registration_validation_dice(&net, atlases, validation)?;
            history.validation.push(ValidationRecord { iteration: done, dice });
            best.offer(dice, done, net.params());
        }
    }
    if validation.is_empty() {
        history.best_iteration = cfg.iterations;
    } else {
        history.best_iteration = best.iteration;
        net = RegNet::from_params(net_cfg, &shape, best.params)?;
    }
    Ok((net, history))
}

/// Supervised patch-based segmentation training with cross-entropy.
pub fn train_segmentation(
    cfg: &TrainConfig,
    net_cfg: &SegNetConfig,
    atlases: &[Atlas],
    validation: &[Atlas],
    use_augment: bool,
) -> Result<(SegNet, TrainHistory)> {
    cfg.validate()?;
    net_cfg.validate()?;
    check_atlases(atlases)?;
    let l = atlases[0].num_labels();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut net = build_segnet(net_cfg, l, &mut init_rng)?;
    let mut opt = Adam::new(net.params().len(), cfg.learning_rate, cfg.adam.clone());
    let mut history = TrainHistory::default();
    let mut best = BestCheckpoint {
        dice: f64::NEG_INFINITY,
        iteration: 0,
        params: net.params().to_vec(),
    };
    for it in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.rng_seed, it);
        let a = &atlases[rng.random_range(0..atlases.len())];
        let a = if use_augment {
            augment_atlas(a, &cfg.augment, &mut rng)?
        } else {
            a.clone()
        };
        let offset = random_offset(a.shape(), &net_cfg.patch_size, &mut rng)?;
        let patch = crop_atlas(&a, &offset, &net_cfg.patch_size)?;
        let (loss, grads) = net.loss_and_grad(&patch).map_err(|e| abort_non_finite(it, e))?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("iteration {it}: parameter gradient")));
        }
        opt.step(net.params_mut(), &grads);
        history.iterations.push(IterationRecord {
            iteration: it,
            loss,
            similarity: 0.0,
            smoothness: 0.0,
            segmentation: loss,
            supervised: true,
        });
        let done = it + 1;
        if !validation.is_empty() && is_checkpoint(cfg, done) {
            let dice = segmentation_validation_dice(&net, validation)?;
            history.validation.push(ValidationRecord { iteration: done, dice });
            best.offer(dice, done, net.params());
        }
    }
    if validation.is_empty() {
        history.best_iteration = cfg.iterations;
    } else {
        history.best_iteration = best.iteration;
        net = SegNet::from_params(net_cfg, l, best.params)?;
    }
    Ok((net, history))
}

/// A differentiable scalar function of a parameter vector.
pub trait Objective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Fraction of parameters probed (at least one is always probed).
    pub sample_fraction: f64,
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries with
    /// vanishing gradient are judged by absolute error instead.
    pub abs_floor: f64,
    pub rng_seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            sample_fraction: 0.01,
            step: 1e-6,
            abs_floor: 1e-8,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare the analytic gradient with central differences on a random subset.
pub fn gradcheck<O: Objective>(obj: &mut O, params: &[f64], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if params.is_empty() {
        return Err(Error::input("no parameters to check"));
    }
    let analytic = obj.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::input("gradient length differs from parameter count"));
    }
    let k = ((params.len() as f64 * cfg.sample_fraction).ceil() as usize).clamp(1, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut idx = sample(&mut rng, params.len(), k).into_vec();
    idx.sort_unstable();
    let mut x = params.to_vec();
    let mut report = GradcheckReport {
        checked: k,
        max_rel_error: 0.0,
        worst_index: idx[0],
        worst_analytic: analytic[idx[0]],
        worst_numeric: f64::NAN,
    };
    for i in idx {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let up = obj.value(&x)?;
        x[i] = orig - cfg.step;
        let down = obj.value(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let denom = numeric.abs().max(analytic[i].abs()).max(cfg.abs_floor);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > report.max_rel_error || report.worst_numeric.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Registration loss on a fixed pair as a function of the network parameters.
pub struct RegistrationObjective<'a> {
    pub net: RegNet,
    pub moving: &'a Atlas,
    pub fixed: &'a Atlas,
    pub supervised: bool,
    pub loss: LossConfig,
}

impl RegistrationObjective<'_> {
    fn pair(&self) -> RegPair<'_> {
        if self.supervised {
            RegPair::Supervised {
                moving: self.moving,
                fixed: self.fixed,
            }
        } else {
            RegPair::Unsupervised {
                moving: &self.moving.image,
                fixed: &self.fixed.image,
            }
        }
    }

    fn load(&mut self, params: &[f64]) {
        self.net.params_mut().copy_from_slice(params);
    }
}

impl Objective for RegistrationObjective<'_> {
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        self.load(params);
        Ok(self.net.loss(self.pair(), &self.loss)?.total)
    }

    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>> {
        self.load(params);
        Ok(self.net.loss_and_grad(self.pair(), &self.loss)?.1)
    }
}
