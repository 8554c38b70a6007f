//! Overlap and surface-distance metrics between hard segmentations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::grid::Grid;
use crate::volume::LabelMap;

fn check_pair(pred: &LabelMap, truth: &LabelMap, label: u32) -> Result<()> {
    ensure_shape(truth.shape(), pred.shape())?;
    let l = pred.num_labels().max(truth.num_labels());
    if label as usize >= l {
        return Err(Error::LabelOutOfRange {
            value: label,
            num_labels: l,
        });
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)`; 1 when both sets are empty.
pub fn dice_score(pred: &LabelMap, truth: &LabelMap, label: u32) -> Result<f64> {
    check_pair(pred, truth, label)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == label, b == label);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    })
}

/// Voxels of `label` with a face neighbour of another label or outside the grid.
pub fn extract_surface(m: &LabelMap, label: u32) -> Vec<usize> {
    let g = Grid::from_shape(m.shape());
    let lab = m.labels();
    let st = g.strides();
    let mut out = Vec::new();
    for z in 0..g.n[0] {
        for y in 0..g.n[1] {
            for x in 0..g.n[2] {
                let i = g.index(z, y, x);
                if lab[i] != label {
                    continue;
                }
                let pos = [z, y, x];
                let boundary = (g.first_active()..3).any(|a| {
                    pos[a] == 0
                        || pos[a] + 1 == g.n[a]
                        || lab[i - st[a]] != label
                        || lab[i + st[a]] != label
                });
                if boundary {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], w2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |q: usize| f[q] + w2 * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(last)) / (2.0 * w2 * (q - last) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q.abs_diff(v[k]) as f64;
        *o = f[v[k]] + w2 * d * d;
    }
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest site.
fn squared_distance_map(sites: &[usize], g: Grid, spacing: &[f64]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; g.len()];
    for &s in sites {
        d[s] = 0.0;
    }
    let st = g.strides();
    let first = g.first_active();
    for a in first..3 {
        let w = spacing[a - first];
        let n = g.n[a];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for base in 0..g.len() {
            // visit each line once, from its first element
            if !(base / st[a]).is_multiple_of(n) {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[base + k * st[a]];
            }
            edt_line(&line, w * w, &mut res);
            for (k, r) in res.iter().enumerate() {
                d[base + k * st[a]] = *r;
            }
        }
    }
    d
}

/// Symmetric surface distance summary for one label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistance {
    pub mean: f64,
    pub max: f64,
    /// Exactly one of the two surfaces was empty; both values are infinite.
    pub one_sided: bool,
}

fn directed(from: &[usize], to_sq: &[f64], acc: &mut (f64, f64)) {
    for &i in from {
        let d = to_sq[i].sqrt();
        acc.0 += d;
        acc.1 = acc.1.max(d);
    }
}

/// Pooled distances from each boundary voxel to the other boundary, in mm.
pub fn surface_distance(
    pred: &LabelMap,
    truth: &LabelMap,
    label: u32,
    spacing: &[f64],
) -> Result<SurfaceDistance> {
    check_pair(pred, truth, label)?;
    if spacing.len() != pred.shape().len() || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::input(format!("invalid spacing {spacing:?}")));
    }
    let sp = extract_surface(pred, label);
    let st = extract_surface(truth, label);
    match (sp.is_empty(), st.is_empty()) {
        (true, true) => {
            return Ok(SurfaceDistance {
                mean: 0.0,
                max: 0.0,
                one_sided: false,
            })
        }
        (true, false) | (false, true) => {
            return Ok(SurfaceDistance {
                mean: f64::INFINITY,
                max: f64::INFINITY,
                one_sided: true,
            })
        }
        _ => {}
    }
    let g = Grid::from_shape(pred.shape());
    let to_truth = squared_distance_map(&st, g, spacing);
    let to_pred = squared_distance_map(&sp, g, spacing);
    let mut acc = (0.0, 0.0);
    directed(&sp, &to_truth, &mut acc);
    directed(&st, &to_pred, &mut acc);
    Ok(SurfaceDistance {
        mean: acc.0 / (sp.len() + st.len()) as f64,
        max: acc.1,
        one_sided: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: u32,
    pub dice: f64,
    pub mean_sd: f64,
    pub max_sd: f64,
    pub one_sided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub labels: Vec<LabelMetrics>,
    pub mean_dice: f64,
    /// Unweighted mean of the per-label mean distances.
    pub mean_sd: f64,
    /// Unweighted mean of the per-label maximum distances.
    pub mean_max_sd: f64,
    /// Largest per-label maximum distance.
    pub max_sd: f64,
}

impl MetricReport {
    pub fn has_one_sided(&self) -> bool {
        self.labels.iter().any(|l| l.one_sided)
    }
}

/// Foreground labels that occur in either map.
pub fn default_labels(pred: &LabelMap, truth: &LabelMap) -> Vec<u32> {
    let l = pred.num_labels().max(truth.num_labels());
    let mut seen = vec![false; l];
    for &v in pred.labels().iter().chain(truth.labels()) {
        seen[v as usize] = true;
    }
    (1..l as u32).filter(|&v| seen[v as usize]).collect()
}

/// Per-label metrics and their averages. `labels = None` takes the
/// foreground labels present in either map.
pub fn evaluate(
    pred: &LabelMap,
    truth: &LabelMap,
    spacing: &[f64],
    labels: Option<&[u32]>,
) -> Result<MetricReport> {
    ensure_shape(truth.shape(), pred.shape())?;
    let included = match labels {
        Some(l) => l.to_vec(),
        None => default_labels(pred, truth),
    };
    if included.is_empty() {
        return Err(Error::input("no labels to evaluate"));
    }
    let mut rows = Vec::with_capacity(included.len());
    for &label in &included {
        let sd = surface_distance(pred, truth, label, spacing)?;
        rows.push(LabelMetrics {
            label,
            dice: dice_score(pred, truth, label)?,
            mean_sd: sd.mean,
            max_sd: sd.max,
            one_sided: sd.one_sided,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&LabelMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mean_dice: mean(|r| r.dice),
        mean_sd: mean(|r| r.mean_sd),
        mean_max_sd: mean(|r| r.max_sd),
        max_sd: rows.iter().map(|r| r.max_sd).fold(0.0, f64::max),
        labels: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(shape: &[usize], l: usize, f: impl Fn(&[usize]) -> u32) -> LabelMap {
        let g = Grid::from_shape(shape);
        let f0 = g.first_active();
        let mut labels = Vec::with_capacity(g.len());
        for z in 0..g.n[0] {
            for y in 0..g.n[1] {
                for x in 0..g.n[2] {
                    labels.push(f(&[z, y, x][f0..]));
                }
            }
        }
        LabelMap::from_labels(shape.to_vec(), l, labels).unwrap()
    }

    fn coords(i: usize, g: Grid) -> [usize; 3] {
        let st = g.strides();
        [i / st[0], (i / st[1]) % g.n[1], i % g.n[2]]
    }

    fn brute_sd(pred: &LabelMap, truth: &LabelMap, label: u32, spacing: &[f64]) -> (f64, f64) {
        let g = Grid::from_shape(pred.shape());
        let off = g.first_active();
        let sp = extract_surface(pred, label);
        let st = extract_surface(truth, label);
        let dist = |a: usize, b: usize| {
            let (ca, cb) = (coords(a, g), coords(b, g));
            (off..3)
                .map(|k| ((ca[k] as f64 - cb[k] as f64) * spacing[k - off]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut all = Vec::new();
        for &a in &sp {
            all.push(st.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min));
        }
        for &b in &st {
            all.push(sp.iter().map(|&a| dist(b, a)).fold(f64::INFINITY, f64::min));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        (mean, all.iter().cloned().fold(0.0, f64::max))
    }

    #[test]
    fn dice_hand_counts() {
        let p = LabelMap::from_labels(vec![2, 4], 2, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let t = LabelMap::from_labels(vec![2, 4], 2, vec![1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(dice_score(&p, &t, 1).unwrap(), 2.0 / 3.0);
        assert_eq!(dice_score(&t, &p, 1).unwrap(), 2.0 / 3.0);
        assert_eq!(dice_score(&p, &p, 1).unwrap(), 1.0);
        let q = LabelMap::from_labels(vec![2, 4], 2, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dice_score(&p, &q, 1).unwrap(), 0.0);
        let empty = LabelMap::from_labels(vec![2, 4], 3, vec![0; 8]).unwrap();
        assert_eq!(dice_score(&empty, &empty, 2).unwrap(), 1.0);
        assert_eq!(dice_score(&p, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn cube_surface_counts() {
        let cube = map(&[6, 6, 6], 2, |c| u32::from(c.iter().all(|&v| (1..5).contains(&v))));
        assert_eq!(extract_surface(&cube, 1).len(), 56);
        let dot = map(&[5, 5], 2, |c| u32::from(c == [2, 2]));
        assert_eq!(extract_surface(&dot, 1), vec![12]);
        // outer ring plus the four face neighbours of the dot
        assert_eq!(extract_surface(&dot, 0).len(), 20);
        let none = map(&[5, 5], 3, |_| 0);
        assert!(extract_surface(&none, 2).is_empty());
    }

    #[test]
    fn offset_cubes_max_distance() {
        let a = map(&[12, 12, 12], 2, |c| u32::from(c.iter().all(|&v| (2..6).contains(&v))));
        let b = map(&[12, 12, 12], 2, |c| {
            u32::from((4..8).contains(&c[0]) && (2..6).contains(&c[1]) && (2..6).contains(&c[2]))
        });
        let sd = surface_distance(&a, &b, 1, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(sd.max, 2.0);
        let sd2 = surface_distance(&a, &b, 1, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(sd2.max, 4.0);
        assert_eq!(sd2.mean, 2.0 * sd.mean);
        assert_eq!(surface_distance(&a, &a, 1, &[1.0; 3]).unwrap().max, 0.0);
    }

    #[test]
    fn empty_surfaces() {
        let a = map(&[6, 6], 3, |c| u32::from(c[0] < 3));
        let both = surface_distance(&a, &a, 2, &[1.0, 1.0]).unwrap();
        assert_eq!((both.mean, both.max, both.one_sided), (0.0, 0.0, false));
        let b = map(&[6, 6], 3, |c| 2 * u32::from(c[0] < 3));
        let one = surface_distance(&a, &b, 2, &[1.0, 1.0]).unwrap();
        assert!(one.one_sided && one.max.is_infinite());
    }

    #[test]
    fn matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spacings: [&[f64]; 3] = [&[1.0, 1.0, 1.0], &[1.0, 1.5, 2.0], &[0.5, 2.0, 1.25]];
        for trial in 0..20 {
            let shape = [rng.random_range(2..=12), rng.random_range(2..=12), rng.random_range(2..=12)];
            let l = rng.random_range(2..=4);
            let mk = |rng: &mut ChaCha8Rng| {
                let n: usize = shape.iter().product();
                let labels = (0..n).map(|_| rng.random_range(0..l as u32)).collect();
                LabelMap::from_labels(shape.to_vec(), l, labels).unwrap()
            };
            let (p, t) = (mk(&mut rng), mk(&mut rng));
            let spacing = spacings[trial % 3];
            for label in 0..l as u32 {
                let sd = surface_distance(&p, &t, label, spacing).unwrap();
                if sd.one_sided {
                    continue;
                }
                let (mean, max) = brute_sd(&p, &t, label, spacing);
                assert_eq!(sd.max, max);
                assert!((sd.mean - mean).abs() <= 1e-12 * mean.max(1.0));
            }
        }
    }

    #[test]
    fn report_averages_and_unused_labels() {
        let t = map(&[10, 10], 3, |c| if c[0] < 3 { 1 } else if c[1] > 6 { 2 } else { 0 });
        let p = map(&[10, 10], 3, |c| if c[0] < 4 { 1 } else if c[1] > 5 { 2 } else { 0 });
        let r = evaluate(&p, &t, &[1.0, 1.0], None).unwrap();
        assert_eq!(r.labels.len(), 2);
        let md = r.labels.iter().map(|l| l.dice).sum::<f64>() / 2.0;
        assert_eq!(r.mean_dice, md);
        let p4 = p.with_num_labels(4).unwrap();
        let t4 = t.with_num_labels(4).unwrap();
        assert_eq!(evaluate(&p4, &t4, &[1.0, 1.0], None).unwrap(), r);
        let same = evaluate(&t, &t, &[1.0, 1.0], None).unwrap();
        assert!(same.labels.iter().all(|l| l.dice == 1.0 && l.max_sd == 0.0));
    }
}
