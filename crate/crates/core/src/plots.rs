//! Figures from a results table: Dice and surface distance against the
//! number of atlases, and per-structure Dice bars. Every figure is written
//! as SVG next to a CSV of the exact series it draws.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::{summarize, Method, ResultRow, SummaryRow};
use crate::io::write_atomic;

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
];

fn color(m: Method) -> RGBColor {
    PALETTE[Method::ALL.iter().position(|&x| x == m).unwrap_or(0)]
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plotting failed: {e}"))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Mean Dice over subjects and repeats, keyed by (N, method, label).
fn per_structure(rows: &[ResultRow]) -> BTreeMap<(usize, Method, u32), f64> {
    let mut acc: BTreeMap<(usize, Method, u32), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.n_atlases, r.method, r.label)).or_default();
        e.0 += r.dice;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn series(summary: &[SummaryRow], value: impl Fn(&SummaryRow) -> f64) -> BTreeMap<Method, Vec<(f64, f64)>> {
    let mut out: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for s in summary {
        let v = value(s);
        if v.is_finite() {
            out.entry(s.method).or_default().push((s.n_atlases as f64, v));
        }
    }
    out
}

fn axis_range(values: impl Iterator<Item = f64>, floor_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if floor_zero {
        lo = 0.0;
    }
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - if floor_zero { 0.0 } else { pad }, hi + pad)
}

fn line_panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    y_label: &str,
    data: &BTreeMap<Method, Vec<(f64, f64)>>,
    n_range: (f64, f64),
    floor_zero: bool,
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    let (y0, y1) = axis_range(data.values().flatten().map(|p| p.1), floor_zero);
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(n_range.0 - 0.5..n_range.1 + 0.5, y0..y1)?;
    chart
        .configure_mesh()
        .x_desc("number of atlases N")
        .y_desc(y_label)
        .x_labels((n_range.1 - n_range.0) as usize + 1)
        .x_label_formatter(&|x| format!("{}", x.round()))
        .draw()?;
    for (&m, pts) in data {
        let c = color(m);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))?
            .label(m.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, c.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    Ok(())
}

fn bar_panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    labels: &[u32],
    bars: &BTreeMap<(Method, u32), f64>,
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    let methods: Vec<Method> = {
        let mut m: Vec<Method> = bars.keys().map(|k| k.0).collect();
        m.dedup();
        m
    };
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..labels.len() as f64, 0.0..1.05)?;
    let names: Vec<String> = labels.iter().map(|l| format!("label {l}")).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(labels.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let f = x.fract();
            if (f - 0.5).abs() < 1e-6 {
                names.get(x.floor() as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("mean Dice")
        .draw()?;
    let width = 0.8 / methods.len().max(1) as f64;
    for (k, &m) in methods.iter().enumerate() {
        let c = color(m);
        let rects = labels.iter().enumerate().filter_map(|(i, l)| {
            bars.get(&(m, *l)).map(|&v| {
                let x0 = i as f64 + 0.1 + k as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, v)], c.filled())
            })
        });
        chart
            .draw_series(rects)?
            .label(m.name())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    Ok(())
}

fn render(path: &Path, size: (u32, u32), draw: impl FnOnce(&DrawingArea<SVGBackend, plotters::coord::Shift>) -> std::result::Result<(), String>) -> Result<()> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, size).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        draw(&root).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())
}

/// Write every figure and its data series into `dir`; returns the files written.
pub fn emit_plots(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::input("cannot plot an empty results table"));
    }
    // fixed summation order regardless of how the table was assembled
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let rows = sorted.as_slice();
    let summary = summarize(rows);
    let n_lo = summary.iter().map(|s| s.n_atlases).min().unwrap() as f64;
    let n_hi = summary.iter().map(|s| s.n_atlases).max().unwrap() as f64;
    let mut written = Vec::new();

    let dice_csv = dir.join("dice_vs_n.csv");
    write_atomic(
        &dice_csv,
        &csv_bytes(
            &["method", "n_atlases", "mean_dice"],
            summary
                .iter()
                .map(|s| vec![s.method.to_string(), s.n_atlases.to_string(), s.mean_dice.to_string()]),
        ),
    )?;
    written.push(dice_csv);
    let sd_csv = dir.join("sd_vs_n.csv");
    write_atomic(
        &sd_csv,
        &csv_bytes(
            &["method", "n_atlases", "mean_sd", "mean_max_sd"],
            summary.iter().map(|s| {
                vec![
                    s.method.to_string(),
                    s.n_atlases.to_string(),
                    s.mean_sd.to_string(),
                    s.mean_max_sd.to_string(),
                ]
            }),
        ),
    )?;
    written.push(sd_csv);

    let dice = series(&summary, |s| s.mean_dice);
    let p = dir.join("dice_vs_n.svg");
    render(&p, (800, 500), |root| {
        line_panel(root, "Mean test Dice", "Dice", &dice, (n_lo, n_hi), false).map_err(|e| e.to_string())
    })?;
    written.push(p);

    let mean_sd = series(&summary, |s| s.mean_sd);
    let max_sd = series(&summary, |s| s.mean_max_sd);
    let p = dir.join("sd_vs_n.svg");
    render(&p, (1200, 500), |root| {
        let (l, r) = root.split_horizontally(600);
        line_panel(&l, "Mean surface distance", "mm", &mean_sd, (n_lo, n_hi), true).map_err(|e| e.to_string())?;
        line_panel(&r, "Maximum surface distance", "mm", &max_sd, (n_lo, n_hi), true).map_err(|e| e.to_string())
    })?;
    written.push(p);

    let structures = per_structure(rows);
    let struct_csv = dir.join("per_structure.csv");
    write_atomic(
        &struct_csv,
        &csv_bytes(
            &["method", "n_atlases", "label", "mean_dice"],
            structures.iter().map(|(&(n, m, l), &v)| {
                vec![m.to_string(), n.to_string(), l.to_string(), v.to_string()]
            }),
        ),
    )?;
    written.push(struct_csv);
    let mut by_n: BTreeMap<usize, BTreeMap<(Method, u32), f64>> = BTreeMap::new();
    for (&(n, m, l), &v) in &structures {
        by_n.entry(n).or_default().insert((m, l), v);
    }
    for (n, bars) in &by_n {
        let mut labels: Vec<u32> = bars.keys().map(|k| k.1).collect();
        labels.sort_unstable();
        labels.dedup();
        let p = dir.join(format!("per_structure_n{n}.svg"));
        render(&p, (800, 500), |root| {
            bar_panel(root, &format!("Per-structure Dice, N = {n}"), &labels, bars).map_err(|e| e.to_string())
        })?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, n: usize, repeat: usize, label: u32, dice: f64) -> ResultRow {
        ResultRow {
            method,
            n_atlases: n,
            repeat,
            subject: "test-000".into(),
            label,
            dice,
            mean_sd: 1.0 - dice,
            max_sd: 4.0 * (1.0 - dice),
        }
    }

    fn table() -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (k, m) in [Method::Mas, Method::MasSs, Method::SegNetDa].into_iter().enumerate() {
            for n in 2..=4 {
                for l in 1..=3 {
                    rows.push(row(m, n, 0, l, 0.6 + 0.05 * n as f64 + 0.01 * (k as f64 + l as f64)));
                }
            }
        }
        rows
    }

    #[test]
    fn empty_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], dir.path()).is_err());
    }

    #[test]
    fn one_point_per_method_and_n() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&table(), dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let svg = std::fs::read_to_string(dir.path().join("dice_vs_n.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("MAS-SS"));
        let series = std::fs::read_to_string(dir.path().join("dice_vs_n.csv")).unwrap();
        // header + 3 methods x 3 N
        assert_eq!(series.lines().count(), 1 + 9);
        assert!(dir.path().join("per_structure_n3.svg").exists());
    }

    #[test]
    fn single_point_series_renders() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(Method::Mas, 1, 0, 1, 0.8)];
        emit_plots(&rows, dir.path()).unwrap();
        let series = std::fs::read_to_string(dir.path().join("dice_vs_n.csv")).unwrap();
        assert_eq!(series, "method,n_atlases,mean_dice\nMAS,1,0.8\n");
    }

    #[test]
    fn rerun_gives_identical_series() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut rows = table();
        emit_plots(&rows, a.path()).unwrap();
        rows.reverse();
        emit_plots(&rows, b.path()).unwrap();
        for f in ["dice_vs_n.csv", "sd_vs_n.csv", "per_structure.csv", "dice_vs_n.svg"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn infinite_distances_stay_in_series_but_not_in_axes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = table();
        rows[0].max_sd = f64::INFINITY;
        emit_plots(&rows, dir.path()).unwrap();
        let series = std::fs::read_to_string(dir.path().join("sd_vs_n.csv")).unwrap();
        assert!(series.contains("inf"));
    }
}
