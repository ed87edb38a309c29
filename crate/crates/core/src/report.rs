//! Cross-run reporting from completed run directories.
//!
//! Outputs, all long-format except the comparison table:
//!
//! - `comparison.csv`: one row per layer. With several runs, one
//!   `<run_id>_median` column per run and, for exactly one baseline and one
//!   invariance run, `difference` (invariance − baseline). A single run
//!   yields `median,q1,q3,image_mean_median`.
//! - `boxplot.csv`: `run_id,mode,layer,layer_name,pooling,count,min,q1,median,q3,max,mean`.
//! - `dynamics.csv`: `run_id,mode,epoch,axis_position,layer,layer_name,inv_loss`,
//!   where `axis_position = sqrt(epoch)` places epochs on a quadratic axis.
//! - `runs.csv`: one row per run with mode, variant, copies, α, reduced
//!   flag, accuracy and checkpoint id.
//!
//! Statistics are recomputed from `invariance.csv` and written at full
//! precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifacts::{
    read_invariance_csv, read_meta, read_metrics, MetricsRow, EVAL_META, INVARIANCE, METRICS, RUN_META,
};
use crate::error::{Error, Result};
use crate::evaluator::Summary;
use crate::network::Architecture;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSigma {
    pub all: Summary,
    pub image_mean: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub run_id: String,
    pub mode: String,
    pub meta: BTreeMap<String, String>,
    pub eval_meta: BTreeMap<String, String>,
    pub layers: BTreeMap<usize, LayerSigma>,
    pub dynamics: Vec<MetricsRow>,
}

impl RunSummary {
    pub fn accuracy(&self) -> Option<f64> {
        self.eval_meta.get("accuracy").and_then(|a| a.parse().ok())
    }

    fn meta_or(&self, key: &str, default: &str) -> String {
        self.meta.get(key).cloned().unwrap_or_else(|| default.to_string())
    }
}

/// Per-layer summaries of both poolings from invariance rows.
pub fn summarize_sigma(rows: &[crate::artifacts::SigmaRow]) -> BTreeMap<usize, LayerSigma> {
    type Scores = (Vec<f64>, BTreeMap<usize, Vec<f64>>);
    let mut by_layer: BTreeMap<usize, Scores> = BTreeMap::new();
    for r in rows {
        let entry = by_layer.entry(r.layer).or_default();
        entry.0.push(r.sigma);
        entry.1.entry(r.image_id).or_default().push(r.sigma);
    }
    by_layer
        .into_iter()
        .map(|(layer, (all, per_image))| {
            let means: Vec<f64> = per_image.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            (layer, LayerSigma { all: Summary::of(&all), image_mean: Summary::of(&means) })
        })
        .collect()
}

/// Loads a run directory. Needs `run.meta` and at least one of
/// `invariance.csv` and `metrics.csv`.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let meta: BTreeMap<String, String> = read_meta(&dir.join(RUN_META))?.into_iter().collect();
    let has_sigma = dir.join(INVARIANCE).is_file();
    let has_metrics = dir.join(METRICS).is_file();
    if !has_sigma && !has_metrics {
        return Err(Error::MissingInput(dir.join(INVARIANCE)));
    }
    let layers =
        if has_sigma { summarize_sigma(&read_invariance_csv(&dir.join(INVARIANCE))?) } else { BTreeMap::new() };
    let dynamics = if has_metrics { read_metrics(&dir.join(METRICS))? } else { Vec::new() };
    let eval_meta = if dir.join(EVAL_META).is_file() {
        read_meta(&dir.join(EVAL_META))?.into_iter().collect()
    } else {
        BTreeMap::new()
    };
    let run_id = meta
        .get("run_id")
        .cloned()
        .unwrap_or_else(|| dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned()));
    let mode = match meta.get("invariance_mode").map(String::as_str) {
        Some("false") => "baseline",
        _ => "invariance",
    }
    .to_string();
    Ok(RunSummary { dir: dir.to_path_buf(), run_id, mode, meta, eval_meta, layers, dynamics })
}

fn labels(runs: &[RunSummary]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    runs.iter()
        .map(|r| {
            let n = seen.entry(&r.run_id).or_insert(0);
            *n += 1;
            if *n == 1 {
                r.run_id.clone()
            } else {
                format!("{}#{}", r.run_id, n)
            }
        })
        .collect()
}

fn all_layers(runs: &[RunSummary]) -> Vec<usize> {
    let mut v: Vec<usize> = runs.iter().flat_map(|r| r.layers.keys().copied()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn num(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Index of the baseline and the invariance run when the pair is exactly that.
fn contrast_pair(runs: &[RunSummary]) -> Option<(usize, usize)> {
    if runs.len() != 2 {
        return None;
    }
    match (runs[0].mode.as_str(), runs[1].mode.as_str()) {
        ("baseline", "invariance") => Some((0, 1)),
        ("invariance", "baseline") => Some((1, 0)),
        _ => None,
    }
}

/// Header and rows of the comparison table.
pub fn comparison_table(runs: &[RunSummary]) -> (Vec<String>, Vec<Vec<String>>) {
    let layers = all_layers(runs);
    let mut header = vec!["layer".to_string(), "layer_name".to_string()];
    let mut rows = Vec::new();
    if runs.len() == 1 {
        header.extend(["median", "q1", "q3", "image_mean_median"].map(String::from));
        for &l in &layers {
            let s = &runs[0].layers[&l];
            rows.push(vec![
                l.to_string(),
                Architecture::layer_name(l),
                s.all.median.to_string(),
                s.all.q1.to_string(),
                s.all.q3.to_string(),
                s.image_mean.median.to_string(),
            ]);
        }
        return (header, rows);
    }
    header.extend(labels(runs).iter().map(|l| format!("{l}_median")));
    let pair = contrast_pair(runs);
    if pair.is_some() {
        header.push("difference".into());
    }
    for &l in &layers {
        let medians: Vec<Option<f64>> = runs.iter().map(|r| r.layers.get(&l).map(|s| s.all.median)).collect();
        let mut row = vec![l.to_string(), Architecture::layer_name(l)];
        row.extend(medians.iter().map(|m| num(*m)));
        if let Some((b, i)) = pair {
            row.push(num(medians[i].zip(medians[b]).map(|(i, b)| i - b)));
        }
        rows.push(row);
    }
    (header, rows)
}

/// Fixed-width text rendering of the comparison table.
pub fn render_comparison(runs: &[RunSummary]) -> String {
    let (header, rows) = comparison_table(runs);
    let mut out = String::new();
    let mut title = String::from("median invariance score per layer:");
    for (label, r) in labels(runs).iter().zip(runs) {
        let _ = write!(title, " {label} ({})", r.mode);
        if let Some(a) = r.accuracy() {
            let _ = write!(title, " acc {:.4}", a);
        }
        title.push(';');
    }
    title.pop();
    out += &title;
    out.push('\n');
    let widths: Vec<usize> = header.iter().map(|h| h.len().max(10)).collect();
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, "{h:>w$} ");
    }
    out.push('\n');
    for row in rows {
        for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
            let text = match cell.parse::<f64>() {
                Ok(v) if i >= 2 => format!("{v:.4}"),
                _ => cell.clone(),
            };
            let _ = write!(out, "{text:>w$} ");
        }
        out.push('\n');
    }
    out
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const BOXPLOT_HEADER: [&str; 12] =
    ["run_id", "mode", "layer", "layer_name", "pooling", "count", "min", "q1", "median", "q3", "max", "mean"];
pub const DYNAMICS_HEADER: [&str; 7] = ["run_id", "mode", "epoch", "axis_position", "layer", "layer_name", "inv_loss"];
pub const RUNS_HEADER: [&str; 9] =
    ["run_id", "mode", "variant", "m_copies", "alpha", "reduced", "accuracy", "checkpoint_id", "dir"];

/// Writes all report files into `out_dir` and returns the text table.
pub fn write_report(runs: &[RunSummary], out_dir: &Path) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("report needs at least one run directory"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = labels(runs);
    let strings = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let (header, rows) = comparison_table(runs);
    write_csv(&out_dir.join("comparison.csv"), &header, &rows)?;

    let mut rows = Vec::new();
    for (name, run) in names.iter().zip(runs) {
        for (&l, s) in &run.layers {
            for (pooling, q) in [("all", &s.all), ("image_mean", &s.image_mean)] {
                rows.push(vec![
                    name.clone(),
                    run.mode.clone(),
                    l.to_string(),
                    Architecture::layer_name(l),
                    pooling.to_string(),
                    q.count.to_string(),
                    q.min.to_string(),
                    q.q1.to_string(),
                    q.median.to_string(),
                    q.q3.to_string(),
                    q.max.to_string(),
                    q.mean.to_string(),
                ]);
            }
        }
    }
    write_csv(&out_dir.join("boxplot.csv"), &strings(&BOXPLOT_HEADER), &rows)?;

    let mut rows = Vec::new();
    for (name, run) in names.iter().zip(runs) {
        for m in &run.dynamics {
            for &(l, v) in &m.inv {
                rows.push(vec![
                    name.clone(),
                    run.mode.clone(),
                    m.epoch.to_string(),
                    (m.epoch as f64).sqrt().to_string(),
                    l.to_string(),
                    Architecture::layer_name(l),
                    num(v),
                ]);
            }
        }
    }
    write_csv(&out_dir.join("dynamics.csv"), &strings(&DYNAMICS_HEADER), &rows)?;

    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(runs)
        .map(|(name, r)| {
            vec![
                name.clone(),
                r.mode.clone(),
                r.meta_or("inv_variant", ""),
                r.meta_or("m_copies", ""),
                r.meta_or("alpha", ""),
                r.meta_or("meta.reduced", ""),
                num(r.accuracy()),
                r.eval_meta.get("checkpoint_id").cloned().unwrap_or_default(),
                r.dir.display().to_string(),
            ]
        })
        .collect();
    write_csv(&out_dir.join("runs.csv"), &strings(&RUNS_HEADER), &rows)?;

    Ok(render_comparison(runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::SigmaRow;

    fn run(id: &str, mode: &str, shift: f64) -> RunSummary {
        let rows: Vec<SigmaRow> = (0..10)
            .flat_map(|layer| {
                (0..4).flat_map(move |image| {
                    (0..2).map(move |t| SigmaRow {
                        layer,
                        image_id: image,
                        transform: t,
                        sigma: shift + 0.01 * (layer * 8 + image * 2 + t) as f64,
                    })
                })
            })
            .collect();
        RunSummary {
            dir: PathBuf::from(id),
            run_id: id.into(),
            mode: mode.into(),
            meta: BTreeMap::new(),
            eval_meta: BTreeMap::new(),
            layers: summarize_sigma(&rows),
            dynamics: Vec::new(),
        }
    }

    #[test]
    fn two_runs_give_ten_rows_two_models() {
        let runs = [run("base", "baseline", 0.0), run("inv", "invariance", 0.1)];
        let (header, rows) = comparison_table(&runs);
        assert_eq!(header, ["layer", "layer_name", "base_median", "inv_median", "difference"]);
        assert_eq!(rows.len(), 10);
        let diff: f64 = rows[3][4].parse().unwrap();
        assert!((diff - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_run_summary() {
        let (header, rows) = comparison_table(&[run("solo", "invariance", 0.0)]);
        assert_eq!(header[2..], ["median", "q1", "q3", "image_mean_median"]);
        assert_eq!(rows.len(), 10);
        // layer 0: sigmas 0.00..0.07, median 0.035
        assert!((rows[0][2].parse::<f64>().unwrap() - 0.035).abs() < 1e-12);
    }

    #[test]
    fn image_mean_pooling() {
        let rows = [
            SigmaRow { layer: 1, image_id: 0, transform: 0, sigma: 0.0 },
            SigmaRow { layer: 1, image_id: 0, transform: 1, sigma: 1.0 },
            SigmaRow { layer: 1, image_id: 1, transform: 0, sigma: 0.2 },
            SigmaRow { layer: 1, image_id: 1, transform: 1, sigma: 0.2 },
        ];
        let s = &summarize_sigma(&rows)[&1];
        assert_eq!(s.all.count, 4);
        assert_eq!(s.image_mean.count, 2);
        assert!((s.image_mean.median - 0.35).abs() < 1e-12);
    }

    #[test]
    fn duplicate_ids_are_disambiguated() {
        let runs = [run("a", "baseline", 0.0), run("a", "baseline", 0.0)];
        assert_eq!(labels(&runs), ["a", "a#2"]);
        assert_eq!(comparison_table(&runs).0.len(), 4);
    }
}
