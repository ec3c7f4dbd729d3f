//! Aggregation of run directories into mean/std tables and figures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{seed_dir, ExperimentKind};
use crate::error::{CliError, Result};
use crate::plot::{heatmap, line_plot, Series};
use crate::run::{Manifest, BINDING_FILE, CURVE_FILE, LOG_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// A numeric CSV keyed by its first column; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub index_name: String,
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<Option<f64>>)>,
}

/// Reads a table, dropping the columns named in `skip`.
pub fn read_table(path: &Path, skip: &[&str]) -> Result<Table> {
    let bad = |m: String| CliError::Report(format!("{}: {m}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    let keep: Vec<usize> = (1..header.len()).filter(|&c| !skip.contains(&&header[c])).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let index: usize = rec[0].parse().map_err(|_| bad(format!("bad index `{}`", &rec[0])))?;
        let values = keep
            .iter()
            .map(|&c| match rec[c].trim() {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(format!("bad value `{s}`"))),
            })
            .collect::<Result<_>>()?;
        rows.push((index, values));
    }
    Ok(Table {
        index_name: header[0].to_string(),
        columns: keep.iter().map(|&c| header[c].to_string()).collect(),
        rows,
    })
}

/// Mean and sample standard deviation (0 for a single run) per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub index_name: String,
    pub columns: Vec<String>,
    pub index: Vec<usize>,
    /// Runs contributing to each row.
    pub n: Vec<usize>,
    pub mean: Vec<Vec<Option<f64>>>,
    pub std: Vec<Vec<Option<f64>>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(tables: &[Table]) -> Result<Aggregate> {
    let first = tables
        .first()
        .ok_or_else(|| CliError::Report("nothing to aggregate".into()))?;
    for t in tables {
        if t.columns != first.columns || t.rows.len() != first.rows.len() {
            return Err(CliError::Report("runs have different table layouts".into()));
        }
        if t.rows.iter().zip(&first.rows).any(|(a, b)| a.0 != b.0) {
            return Err(CliError::Report("runs have different step indices".into()));
        }
    }
    let (mut mean, mut std, mut n) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..first.rows.len() {
        let (mut m, mut s) = (Vec::new(), Vec::new());
        for c in 0..first.columns.len() {
            let vals: Vec<f64> = tables.iter().filter_map(|t| t.rows[r].1[c]).collect();
            if vals.is_empty() {
                m.push(None);
                s.push(None);
            } else {
                let (a, b) = mean_std(&vals);
                m.push(Some(a));
                s.push(Some(b));
            }
        }
        mean.push(m);
        std.push(s);
        n.push(tables.len());
    }
    Ok(Aggregate {
        index_name: first.index_name.clone(),
        columns: first.columns.clone(),
        index: first.rows.iter().map(|r| r.0).collect(),
        n,
        mean,
        std,
    })
}

impl Aggregate {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| CliError::Report(format!("{}: {e}", path.display()));
        let mut wr = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec![self.index_name.clone(), "n".into()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        wr.write_record(&header).map_err(io)?;
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in 0..self.index.len() {
            let mut rec = vec![self.index[r].to_string(), self.n[r].to_string()];
            for c in 0..self.columns.len() {
                rec.push(cell(self.mean[r][c]));
                rec.push(cell(self.std[r][c]));
            }
            wr.write_record(&rec).map_err(io)?;
        }
        wr.flush().map_err(|e| CliError::io(path)(e))
    }

    pub fn series(&self, column: &str, label: &str) -> Option<Series> {
        let c = self.column(column)?;
        let points = (0..self.index.len())
            .filter_map(|r| Some((self.index[r] as f64, self.mean[r][c]?, self.std[r][c].unwrap_or(0.0))))
            .collect();
        Some(Series {
            label: label.into(),
            points,
        })
    }

    /// `(mean, std)` of `column` in the last row.
    pub fn last(&self, column: &str) -> Option<(f64, f64)> {
        let c = self.column(column)?;
        let r = self.index.len().checked_sub(1)?;
        Some((self.mean[r][c]?, self.std[r][c]?))
    }
}

/// Final mean and std of a run directory's headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub kind: ExperimentKind,
    pub runs: usize,
    /// `(metric, mean, std)` at the last step or epoch.
    pub finals: Vec<(String, f64, f64)>,
}

struct Loaded {
    dir: PathBuf,
    label: String,
    manifest: Manifest,
    aggregate: Aggregate,
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn headline(kind: ExperimentKind) -> &'static [&'static str] {
    match kind {
        ExperimentKind::Train => &["L_p", "L_d", "L_m"],
        ExperimentKind::Bind => &["FBE", "L"],
        ExperimentKind::Perspective => &["OD", "TD", "TD_cm", "L"],
        _ => &["FBE", "OD", "TD", "TD_cm", "L"],
    }
}

fn load(dir: &Path) -> Result<Loaded> {
    let manifest = Manifest::load(dir)?;
    let kind = manifest.config.kind;
    if kind == ExperimentKind::Ablation {
        return Err(CliError::Report(format!(
            "{} is an ablation; report its arm directories",
            dir.display()
        )));
    }
    let ok: Vec<u64> = manifest.runs.iter().filter(|r| r.ok()).map(|r| r.seed).collect();
    if ok.is_empty() {
        return Err(CliError::Report(format!("{} has no completed runs", dir.display())));
    }
    let (file, skip): (&str, &[&str]) = if kind == ExperimentKind::Train {
        (CURVE_FILE, &[])
    } else {
        (LOG_FILE, &["frame"])
    };
    let tables = ok
        .iter()
        .map(|&s| read_table(&dir.join(seed_dir(s)).join(file), skip))
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded {
        dir: dir.to_path_buf(),
        label: label_of(dir),
        aggregate: aggregate(&tables)?,
        manifest,
    })
}

fn mean_binding(l: &Loaded) -> Result<Option<Vec<Vec<f64>>>> {
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut count = 0.0;
    for r in l.manifest.runs.iter().filter(|r| r.ok()) {
        let t = read_table_plain(&l.dir.join(seed_dir(r.seed)).join(BINDING_FILE))?;
        let acc = acc.get_or_insert_with(|| vec![vec![0.0; t[0].len()]; t.len()]);
        if acc.len() != t.len() {
            return Err(CliError::Report("binding matrices differ in shape".into()));
        }
        for (a, row) in acc.iter_mut().zip(&t) {
            for (x, v) in a.iter_mut().zip(row) {
                *x += v;
            }
        }
        count += 1.0;
    }
    Ok(acc.map(|mut a| {
        a.iter_mut().flatten().for_each(|v| *v /= count);
        a
    }))
}

fn read_table_plain(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bad = |m: String| CliError::Report(format!("{}: {m}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|s| s.parse().map_err(|_| bad(format!("bad value `{s}`"))))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    if rows.is_empty() {
        return Err(bad("empty matrix".into()));
    }
    Ok(rows)
}

fn write_single(l: &Loaded, out: &Path) -> Result<RunSummary> {
    let kind = l.manifest.config.kind;
    l.aggregate.write_csv(&out.join(SUMMARY_FILE))?;
    let a = &l.aggregate;
    if kind == ExperimentKind::Train {
        let series: Vec<Series> = ["L_p", "L_d", "L_m"].iter().filter_map(|c| a.series(c, c)).collect();
        line_plot(
            &out.join("training.svg"),
            "reconstruction loss",
            "epoch",
            "loss",
            &series,
        )?;
    } else {
        for (col, file, y) in [
            ("FBE", "fbe.svg", "FBE"),
            ("OD", "od.svg", "OD (degrees)"),
            ("TD", "td.svg", "TD (scene units)"),
            ("L", "loss.svg", "L"),
        ] {
            let relevant = match kind {
                ExperimentKind::Bind => col == "FBE" || col == "L",
                ExperimentKind::Perspective => col != "FBE",
                _ => true,
            };
            if let (true, Some(s)) = (relevant, a.series(col, "")) {
                line_plot(&out.join(file), &format!("{} {col}", l.label), "step", y, &[s])?;
            }
        }
        if let Some(m) = mean_binding(l)? {
            heatmap(&out.join("binding.svg"), &format!("{} mean binding", l.label), &m)?;
            let path = out.join("binding_mean.csv");
            let mut wr = csv::Writer::from_path(&path).map_err(|e| CliError::Report(e.to_string()))?;
            for row in &m {
                wr.write_record(row.iter().map(|v| v.to_string()))
                    .map_err(|e| CliError::Report(e.to_string()))?;
            }
            wr.flush().map_err(CliError::io(&path))?;
        }
    }
    Ok(summary(l))
}

fn summary(l: &Loaded) -> RunSummary {
    let kind = l.manifest.config.kind;
    RunSummary {
        label: l.label.clone(),
        kind,
        runs: l.aggregate.n.last().copied().unwrap_or(0),
        finals: headline(kind)
            .iter()
            .filter_map(|c| l.aggregate.last(c).map(|(m, s)| (c.to_string(), m, s)))
            .collect(),
    }
}

fn check_compatible(all: &[Loaded]) -> Result<()> {
    let first = &all[0].manifest;
    for l in &all[1..] {
        let m = &l.manifest;
        let mismatch = if m.config.kind != first.config.kind {
            Some(format!("kind {} vs {}", m.config.kind.name(), first.config.kind.name()))
        } else if m.config.kind.is_inference() && m.config.inference.steps != first.config.inference.steps {
            Some(format!(
                "{} vs {} steps",
                m.config.inference.steps, first.config.inference.steps
            ))
        } else if m.config.kind == ExperimentKind::Train && m.config.train.epochs != first.config.train.epochs {
            Some(format!(
                "{} vs {} epochs",
                m.config.train.epochs, first.config.train.epochs
            ))
        } else if m.data_hash != first.data_hash {
            Some("different data".into())
        } else if m.config.seeds != first.config.seeds {
            Some("different seeds".into())
        } else {
            None
        };
        if let Some(why) = mismatch {
            return Err(CliError::Report(format!(
                "incompatible runs {} and {}: {why}",
                all[0].dir.display(),
                l.dir.display()
            )));
        }
    }
    Ok(())
}

/// Aggregates each directory across its seeds, writing `summary.csv` and
/// figures into it; several directories are also compared side by side in
/// `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Vec<RunSummary>> {
    if dirs.is_empty() {
        return Err(CliError::Report("no run directories given".into()));
    }
    let all = dirs.iter().map(|d| load(d)).collect::<Result<Vec<_>>>()?;
    check_compatible(&all)?;
    let summaries = all
        .iter()
        .map(|l| write_single(l, &l.dir))
        .collect::<Result<Vec<_>>>()?;
    if all.len() > 1 {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
        write_comparison(&all, &summaries, out)?;
    } else if out != all[0].dir {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
        write_single(&all[0], out)?;
    }
    Ok(summaries)
}

fn write_comparison(all: &[Loaded], summaries: &[RunSummary], out: &Path) -> Result<()> {
    let path = out.join(COMPARISON_FILE);
    let err = |e: csv::Error| CliError::Report(format!("{}: {e}", path.display()));
    let mut wr = csv::Writer::from_path(&path).map_err(err)?;
    let metrics = headline(summaries[0].kind);
    let mut header = vec!["run".to_string(), "n".into()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    wr.write_record(&header).map_err(err)?;
    for s in summaries {
        let mut rec = vec![s.label.clone(), s.runs.to_string()];
        for m in metrics {
            match s.finals.iter().find(|f| f.0 == *m) {
                Some((_, mean, std)) => rec.extend([mean.to_string(), std.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        wr.write_record(&rec).map_err(err)?;
    }
    wr.flush().map_err(CliError::io(&path))?;
    for m in metrics {
        let series: Vec<Series> = all.iter().filter_map(|l| l.aggregate.series(m, &l.label)).collect();
        if !series.is_empty() {
            let x = if summaries[0].kind == ExperimentKind::Train {
                "epoch"
            } else {
                "step"
            };
            line_plot(&out.join(format!("compare_{}.svg", m.to_lowercase())), m, x, m, &series)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_counts_and_skips_empty_cells() {
        let t = |v: f64| Table {
            index_name: "step".into(),
            columns: vec!["L".into(), "FBE".into()],
            rows: vec![(0, vec![None, Some(v)]), (1, vec![Some(v), Some(v / 2.0)])],
        };
        let a = aggregate(&[t(1.0), t(3.0)]).unwrap();
        assert_eq!(a.n, vec![2, 2]);
        assert_eq!(a.mean[0], vec![None, Some(2.0)]);
        assert_eq!(a.last("FBE"), Some((1.0, 2f64.sqrt() / 2.0)));
        let mut other = t(1.0);
        other.rows.pop();
        assert!(aggregate(&[t(1.0), other]).is_err());
    }
}
