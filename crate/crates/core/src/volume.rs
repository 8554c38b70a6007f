//! Volumetric data model: intensity images, label maps, soft label maps and atlases.
//!
//! All grids are stored row-major with the last axis contiguous. Both 2D and
//! 3D grids are supported; every shape entry must be at least 2.

use crate::error::{ensure_shape, Error, Result};

fn validate_geometry(shape: &[usize], spacing: &[f64]) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::input(format!(
            "only 2D and 3D grids are supported, got rank {}",
            shape.len()
        )));
    }
    if let Some(&n) = shape.iter().find(|&&n| n < 2) {
        return Err(Error::input(format!("every axis needs >= 2 voxels, got {n}")));
    }
    if spacing.len() != shape.len() {
        return Err(Error::input(format!(
            "spacing has {} entries for a rank-{} grid",
            spacing.len(),
            shape.len()
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::input(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Number of voxels in a grid of the given shape.
pub fn num_voxels(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Scalar intensity grid with per-axis spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: Vec<usize>, spacing: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        validate_geometry(&shape, &spacing)?;
        if data.len() != num_voxels(&shape) {
            return Err(Error::input(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    /// Unit-spacing volume.
    pub fn from_data(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let spacing = vec![1.0; shape.len()];
        Self::new(shape, spacing, data)
    }

    pub fn zeros(shape: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        let n = num_voxels(&shape);
        Self::new(shape, spacing, vec![0.0; n])
    }

    /// Internal constructor for data produced by kernels that preserve the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, spacing: Vec<f64>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), num_voxels(&shape));
        Volume {
            shape,
            spacing,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Discrete segmentation over `num_labels` labels; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    num_labels: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        num_labels: usize,
        labels: Vec<u32>,
    ) -> Result<Self> {
        validate_geometry(&shape, &spacing)?;
        if num_labels == 0 {
            return Err(Error::input("a label map needs at least one label"));
        }
        if labels.len() != num_voxels(&shape) {
            return Err(Error::input(format!(
                "label data length {} does not match shape {:?}",
                labels.len(),
                shape
            )));
        }
        if let Some(&value) = labels.iter().find(|&&v| v as usize >= num_labels) {
            return Err(Error::LabelOutOfRange { value, num_labels });
        }
        Ok(LabelMap {
            shape,
            spacing,
            num_labels,
            labels,
        })
    }

    pub fn from_labels(shape: Vec<usize>, num_labels: usize, labels: Vec<u32>) -> Result<Self> {
        let spacing = vec![1.0; shape.len()];
        Self::new(shape, spacing, num_labels, labels)
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        num_labels: usize,
        labels: Vec<u32>,
    ) -> Self {
        debug_assert!(labels.iter().all(|&l| (l as usize) < num_labels));
        LabelMap {
            shape,
            spacing,
            num_labels,
            labels,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Voxel count per label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_labels];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Same voxels interpreted over a larger label set.
    pub fn with_num_labels(&self, num_labels: usize) -> Result<Self> {
        LabelMap::new(
            self.shape.clone(),
            self.spacing.clone(),
            num_labels,
            self.labels.clone(),
        )
    }
}

/// Per-voxel label probabilities, channel-major: `probs[l * nvox + p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    num_labels: usize,
    probs: Vec<f64>,
}

/// Tolerance on the per-voxel channel sum.
pub const PROB_SUM_TOL: f64 = 1e-5;

impl ProbMap {
    pub fn new(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        num_labels: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        validate_geometry(&shape, &spacing)?;
        if num_labels == 0 {
            return Err(Error::input("probability map needs at least one channel"));
        }
        let nvox = num_voxels(&shape);
        if probs.len() != nvox * num_labels {
            return Err(Error::input(format!(
                "probability data length {} does not match {} x {:?}",
                probs.len(),
                num_labels,
                shape
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input("probabilities must lie in [0, 1]"));
        }
        for p in 0..nvox {
            let s: f64 = (0..num_labels).map(|l| probs[l * nvox + p]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::input(format!(
                    "channel sum {s} at voxel {p} is not 1"
                )));
            }
        }
        Ok(ProbMap {
            shape,
            spacing,
            num_labels,
            probs,
        })
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        num_labels: usize,
        probs: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(probs.len(), num_voxels(&shape) * num_labels);
        ProbMap {
            shape,
            spacing,
            num_labels,
            probs,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_voxels(&self) -> usize {
        num_voxels(&self.shape)
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.probs[l * n..(l + 1) * n]
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// A labelled example: image plus manual segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub id: String,
    pub image: Volume,
    pub labels: LabelMap,
}

impl Atlas {
    pub fn new(id: impl Into<String>, image: Volume, labels: LabelMap) -> Result<Self> {
        ensure_shape(image.shape(), labels.shape())?;
        Ok(Atlas {
            id: id.into(),
            image,
            labels,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.image.shape()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.num_labels()
    }
}

/// One-hot encoding of a label map.
pub fn make_one_hot(labels: &LabelMap) -> Result<ProbMap> {
    let l_count = labels.num_labels();
    let nvox = labels.len();
    let mut probs = vec![0.0; l_count * nvox];
    for (p, &v) in labels.labels().iter().enumerate() {
        if v as usize >= l_count {
            return Err(Error::LabelOutOfRange {
                value: v,
                num_labels: l_count,
            });
        }
        probs[v as usize * nvox + p] = 1.0;
    }
    Ok(ProbMap::from_parts(
        labels.shape().to_vec(),
        labels.spacing().to_vec(),
        l_count,
        probs,
    ))
}

/// Per-voxel argmax over channel-major scores; ties go to the lowest channel.
///
/// Scores need not be normalised, so this also serves summed fusion maps.
pub fn argmax_scores(
    scores: &[f64],
    num_labels: usize,
    shape: &[usize],
    spacing: &[f64],
) -> Result<LabelMap> {
    if num_labels == 0 {
        return Err(Error::input("argmax over an empty channel axis"));
    }
    let nvox = num_voxels(shape);
    if scores.len() != nvox * num_labels {
        return Err(Error::input(format!(
            "score length {} does not match {} x {:?}",
            scores.len(),
            num_labels,
            shape
        )));
    }
    let mut best = scores[..nvox].to_vec();
    let mut labels = vec![0u32; nvox];
    for l in 1..num_labels {
        let ch = &scores[l * nvox..(l + 1) * nvox];
        for p in 0..nvox {
            // strict comparison keeps the lowest index on ties
            if ch[p] > best[p] {
                best[p] = ch[p];
                labels[p] = l as u32;
            }
        }
    }
    LabelMap::new(shape.to_vec(), spacing.to_vec(), num_labels, labels)
}

/// Maximum-likelihood label per voxel.
pub fn argmax_labels(probs: &ProbMap) -> Result<LabelMap> {
    argmax_scores(
        probs.probs(),
        probs.num_labels(),
        probs.shape(),
        probs.spacing(),
    )
}
