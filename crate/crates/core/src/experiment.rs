//! The comparative protocol: for every method, atlas count N and repeat,
//! train on a random N-atlas set, segment the test split and record
//! per-subject, per-label metrics.
//!
//! Each (method, N, repeat) cell writes its rows to `cells/<cell>.csv` and
//! then a `<cell>.done` marker, both atomically. A rerun skips cells whose
//! marker exists, so an interrupted grid resumes where it stopped and the
//! assembled `results.csv` comes out byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{mas_segment, FusionConfig};
use crate::io::{read_bytes, write_atomic, write_json};
use crate::metrics::evaluate;
use crate::regnet::RegNetConfig;
use crate::segnet::SegNetConfig;
use crate::synth::{sample_atlas_sets, Dataset};
use crate::trainer::{train_registration, train_segmentation, TrainConfig, TrainHistory};
use crate::volume::{argmax_labels, Atlas, LabelMap};

pub const RESULTS_HEADER: [&str; 8] = [
    "method",
    "n_atlases",
    "repeat",
    "subject",
    "label",
    "dice",
    "mean_sd",
    "max_sd",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MAS")]
    Mas,
    #[serde(rename = "MAS-DA")]
    MasDa,
    #[serde(rename = "MAS-SS")]
    MasSs,
    #[serde(rename = "SegNet")]
    SegNet,
    #[serde(rename = "SegNet-DA")]
    SegNetDa,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mas,
        Method::MasDa,
        Method::MasSs,
        Method::SegNet,
        Method::SegNetDa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mas => "MAS",
            Method::MasDa => "MAS-DA",
            Method::MasSs => "MAS-SS",
            Method::SegNet => "SegNet",
            Method::SegNetDa => "SegNet-DA",
        }
    }

    pub fn is_registration(self) -> bool {
        matches!(self, Method::Mas | Method::MasDa | Method::MasSs)
    }

    /// Smallest atlas count the method can train with.
    pub fn min_atlases(self) -> usize {
        if self == Method::MasSs {
            2
        } else {
            1
        }
    }

    /// The registration training schedule this method implies.
    pub fn registration_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Method::Mas => {
                cfg.p_supervised = 0.0;
                cfg.use_augment = false;
            }
            Method::MasDa => {
                cfg.p_supervised = 0.0;
                cfg.use_augment = true;
            }
            Method::MasSs => cfg.use_augment = true,
            Method::SegNet | Method::SegNetDa => {}
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Atlas counts to evaluate.
    pub n_atlases: Vec<usize>,
    pub n_repeats: usize,
    pub methods: Vec<Method>,
    /// Base schedule for the MAS variants; each method overrides the
    /// supervision and augmentation switches.
    pub registration: TrainConfig,
    pub segmentation: TrainConfig,
    pub regnet: RegNetConfig,
    pub segnet: SegNetConfig,
    pub fusion: FusionConfig,
    /// Use only the first this many unlabeled images.
    pub max_unlabeled: Option<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_atlases: (1..=7).collect(),
            n_repeats: 3,
            methods: Method::ALL.to_vec(),
            registration: TrainConfig::default(),
            segmentation: TrainConfig::segmentation_default(),
            regnet: RegNetConfig::default(),
            segnet: SegNetConfig::default(),
            fusion: FusionConfig::default(),
            max_unlabeled: None,
            output_dir: PathBuf::from("experiment"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Check everything that can be checked before any training starts.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::config("n_repeats must be >= 1"));
        }
        if self.n_atlases.is_empty() || self.methods.is_empty() {
            return Err(Error::config("need at least one atlas count and one method"));
        }
        if let Some(&n) = self.n_atlases.iter().find(|&&n| n == 0 || n > ds.train.len()) {
            return Err(Error::config(format!(
                "atlas count {n} outside 1..={} (training pool size)",
                ds.train.len()
            )));
        }
        if ds.test.is_empty() {
            return Err(Error::input("dataset has no test subjects"));
        }
        self.registration.validate()?;
        self.segmentation.validate()?;
        self.regnet.validate()?;
        self.segnet.validate()?;
        self.fusion.augment.validate()?;
        if self.methods.iter().any(|m| m.is_registration()) && self.unlabeled(ds).is_empty() {
            return Err(Error::input("registration methods need unlabeled images"));
        }
        ds.validate()
    }

    fn unlabeled<'a>(&self, ds: &'a Dataset) -> &'a [crate::volume::Volume] {
        let k = self.max_unlabeled.unwrap_or(ds.unlabeled.len()).min(ds.unlabeled.len());
        &ds.unlabeled[..k]
    }
}

/// Parse a comma-separated method list, rejecting unknown names.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::config("empty method list"));
    }
    Ok(out)
}

/// splitmix64 finalizer folded over `parts`.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub n_atlases: usize,
    pub repeat: usize,
    pub subject: String,
    pub label: u32,
    pub dice: f64,
    pub mean_sd: f64,
    pub max_sd: f64,
}

impl ResultRow {
    pub(crate) fn sort_key(&self) -> (Method, usize, usize, &str, u32) {
        (self.method, self.n_atlases, self.repeat, &self.subject, self.label)
    }

    fn record(&self) -> [String; 8] {
        [
            self.method.to_string(),
            self.n_atlases.to_string(),
            self.repeat.to_string(),
            self.subject.clone(),
            self.label.to_string(),
            self.dice.to_string(),
            self.mean_sd.to_string(),
            self.max_sd.to_string(),
        ]
    }
}

/// Serialize rows with the fixed header. `f64` values use the shortest
/// representation that parses back to the same bits.
pub fn results_to_csv(rows: &[ResultRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.record()).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn parse_results_csv(bytes: &[u8], path: &Path) -> Result<Vec<ResultRow>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse()
                .map_err(|_| bad(format!("row {}: bad number {:?}", i + 1, field(k))))
        };
        let int = |k: usize| -> Result<usize> {
            field(k)
                .parse()
                .map_err(|_| bad(format!("row {}: bad integer {:?}", i + 1, field(k))))
        };
        rows.push(ResultRow {
            method: field(0).parse()?,
            n_atlases: int(1)?,
            repeat: int(2)?,
            subject: field(3).to_string(),
            label: int(4)? as u32,
            dice: num(5)?,
            mean_sd: num(6)?,
            max_sd: num(7)?,
        });
    }
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    parse_results_csv(&read_bytes(path)?, path)
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    write_atomic(path, &results_to_csv(rows))
}

/// Merge `rows` into the table at `path` (created if absent), keeping the
/// rows sorted, and replace the file atomically.
pub fn append_metrics_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut all = if path.exists() { read_results(path)? } else { Vec::new() };
    all.extend_from_slice(rows);
    all.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    write_results(&all, path)
}

/// Per-(method, N) averages over all rows, i.e. over labels, subjects and repeats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub n_atlases: usize,
    pub repeats: usize,
    pub mean_dice: f64,
    pub mean_sd: f64,
    pub mean_max_sd: f64,
    /// Largest `max_sd` of any row.
    pub max_sd: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.n_atlases)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, n_atlases), g)| {
            let n = g.len() as f64;
            let mut repeats: Vec<usize> = g.iter().map(|r| r.repeat).collect();
            repeats.sort_unstable();
            repeats.dedup();
            SummaryRow {
                method,
                n_atlases,
                repeats: repeats.len(),
                mean_dice: g.iter().map(|r| r.dice).sum::<f64>() / n,
                mean_sd: g.iter().map(|r| r.mean_sd).sum::<f64>() / n,
                mean_max_sd: g.iter().map(|r| r.max_sd).sum::<f64>() / n,
                max_sd: g.iter().map(|r| r.max_sd).fold(0.0, f64::max),
            }
        })
        .collect()
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "n_atlases", "repeats", "mean_dice", "mean_sd", "mean_max_sd", "max_sd"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.n_atlases.to_string(),
            r.repeats.to_string(),
            r.mean_dice.to_string(),
            r.mean_sd.to_string(),
            r.mean_max_sd.to_string(),
            r.max_sd.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Identifies one training run of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub method: Method,
    pub n_atlases: usize,
    pub repeat: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_n{}_r{}", self.method, self.n_atlases, self.repeat)
    }

    /// Network initialisation and sampling seed. Shared by every method in
    /// the same (N, repeat) so comparisons are paired.
    pub fn train_seed(&self, seed: u64) -> u64 {
        mix_seed(seed, &[1, self.n_atlases as u64, self.repeat as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Done,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub cell: Cell,
    pub status: CellStatus,
    /// Whether the cell was trained in this run rather than loaded from disk.
    pub ran: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub cells: Vec<CellOutcome>,
    pub results_path: PathBuf,
}

/// The N-atlas sets for every repeat, shared by all methods.
pub fn atlas_sets(cfg: &ExperimentConfig, ds: &Dataset, n: usize) -> Result<Vec<Vec<String>>> {
    let pool: Vec<String> = ds.train.iter().map(|a| a.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0, n as u64]));
    sample_atlas_sets(&pool, n, cfg.n_repeats, &mut rng)
}

fn evaluate_subjects(
    cell: Cell,
    test: &[Atlas],
    mut segment: impl FnMut(&Atlas) -> Result<LabelMap>,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for t in test {
        let pred = segment(t)?;
        let labels: Vec<u32> = (1..t.num_labels() as u32).collect();
        let report = evaluate(&pred, &t.labels, t.image.spacing(), Some(&labels))?;
        for l in report.labels {
            rows.push(ResultRow {
                method: cell.method,
                n_atlases: cell.n_atlases,
                repeat: cell.repeat,
                subject: t.id.clone(),
                label: l.label,
                dice: l.dice,
                mean_sd: l.mean_sd,
                max_sd: l.max_sd,
            });
        }
    }
    Ok(rows)
}

/// Train and evaluate one cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cell: Cell,
    atlas_ids: &[String],
) -> Result<(Vec<ResultRow>, TrainHistory)> {
    let atlases: Vec<Atlas> = atlas_ids
        .iter()
        .map(|id| {
            ds.train
                .iter()
                .find(|a| &a.id == id)
                .cloned()
                .ok_or_else(|| Error::input(format!("atlas {id} not in training split")))
        })
        .collect::<Result<_>>()?;
    let seed = cell.train_seed(cfg.seed);
    if cell.method.is_registration() {
        let mut tc = cell.method.registration_config(&cfg.registration);
        tc.rng_seed = seed;
        let (net, history) =
            train_registration(&tc, &cfg.regnet, &atlases, cfg.unlabeled(ds), &ds.validation)?;
        let rows = evaluate_subjects(cell, &ds.test, |t| {
            mas_segment(&net, &atlases, &t.image, &cfg.fusion)
        })?;
        Ok((rows, history))
    } else {
        let mut tc = cfg.segmentation.clone();
        tc.rng_seed = seed;
        let augment = cell.method == Method::SegNetDa;
        let (net, history) = train_segmentation(&tc, &cfg.segnet, &atlases, &ds.validation, augment)?;
        let rows = evaluate_subjects(cell, &ds.test, |t| argmax_labels(&net.forward_full(&t.image)?))?;
        Ok((rows, history))
    }
}

fn cell_paths(dir: &Path, cell: &Cell) -> (PathBuf, PathBuf, PathBuf) {
    let base = dir.join("cells");
    let name = cell.name();
    (
        base.join(format!("{name}.csv")),
        base.join(format!("{name}.done")),
        base.join(format!("{name}.history.json")),
    )
}

/// Every cell in grid order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.n_atlases {
            for repeat in 0..cfg.n_repeats {
                cells.push(Cell {
                    method,
                    n_atlases: n,
                    repeat,
                });
            }
        }
    }
    cells
}

/// Run (or resume) the full grid and write `results.csv` and `summary.csv`
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentResults> {
    cfg.validate(ds)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir.join("cells")).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut sets = BTreeMap::new();
    for &n in &cfg.n_atlases {
        sets.insert(n, atlas_sets(cfg, ds, n)?);
    }
    write_json(&dir.join("atlas_sets.json"), &sets)?;

    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for cell in grid_cells(cfg) {
        let (csv_path, done_path, history_path) = cell_paths(dir, &cell);
        if done_path.exists() {
            let marker = String::from_utf8_lossy(&read_bytes(&done_path)?).into_owned();
            let status = match marker.strip_prefix("skipped: ") {
                Some(reason) => CellStatus::Skipped(reason.trim_end().to_string()),
                None => {
                    rows.extend(read_results(&csv_path)?);
                    CellStatus::Done
                }
            };
            outcomes.push(CellOutcome {
                cell,
                status,
                ran: false,
            });
            continue;
        }
        if cell.n_atlases < cell.method.min_atlases() {
            let reason = format!(
                "{} needs at least {} atlases",
                cell.method,
                cell.method.min_atlases()
            );
            info!("cell {}: skipped ({reason})", cell.name());
            write_atomic(&done_path, format!("skipped: {reason}\n").as_bytes())?;
            outcomes.push(CellOutcome {
                cell,
                status: CellStatus::Skipped(reason),
                ran: true,
            });
            continue;
        }
        info!("cell {}: training", cell.name());
        let ids = &sets[&cell.n_atlases][cell.repeat];
        let (cell_rows, history) = run_cell(cfg, ds, cell, ids)?;
        write_atomic(&csv_path, &results_to_csv(&cell_rows))?;
        write_json(&history_path, &history)?;
        write_atomic(&done_path, b"done\n")?;
        let mean = cell_rows.iter().map(|r| r.dice).sum::<f64>() / cell_rows.len().max(1) as f64;
        info!("cell {}: mean test Dice {mean:.4}", cell.name());
        rows.extend(cell_rows);
        outcomes.push(CellOutcome {
            cell,
            status: CellStatus::Done,
            ran: true,
        });
    }
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let results_path = dir.join("results.csv");
    write_results(&rows, &results_path)?;
    let summary = summarize(&rows);
    write_atomic(&dir.join("summary.csv"), &summary_to_csv(&summary))?;
    Ok(ExperimentResults {
        rows,
        summary,
        cells: outcomes,
        results_path,
    })
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
