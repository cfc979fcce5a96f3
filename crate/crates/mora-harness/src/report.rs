//! Run reports: per-seed, per-test-spec results with seed aggregates,
//! JSON persistence, and the CSV emitters consumed by plotting tools.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mora::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub train_avail_img: f64,
    pub train_avail_txt: f64,
    pub test_avail_img: f64,
    pub test_avail_txt: f64,
    pub macro_f1: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub train_avail_img: f64,
    pub train_avail_txt: f64,
    pub test_avail_img: f64,
    pub test_avail_txt: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec_hash: String,
    pub method: String,
    /// Run label within a sweep, e.g. `train`, `rank_4`, or `blocks_0_1`.
    pub label: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_ratio: f64,
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
    pub wall_clock_secs: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates cells over seeds, preserving the first-seen order of
/// (train spec, test spec) pairs.
pub fn summarize(cells: &[CellResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(f64, f64, f64, f64)> = Vec::new();
    for c in cells {
        let key = (
            c.train_avail_img,
            c.train_avail_txt,
            c.test_avail_img,
            c.test_avail_txt,
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|key| {
            let scores: Vec<f64> = cells
                .iter()
                .filter(|c| {
                    (
                        c.train_avail_img,
                        c.train_avail_txt,
                        c.test_avail_img,
                        c.test_avail_txt,
                    ) == key
                })
                .map(|c| c.macro_f1)
                .collect();
            let (mean_f1, std_f1) = mean_std(&scores);
            CellSummary {
                train_avail_img: key.0,
                train_avail_txt: key.1,
                test_avail_img: key.2,
                test_avail_txt: key.3,
                mean_f1,
                std_f1,
            }
        })
        .collect()
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        let report: RunReport = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Ingestion(format!("corrupt report {}: {e}", path.display())))?;
        report.check_consistency(path)?;
        Ok(report)
    }

    /// Stored means must equal recomputation from the per-seed cells.
    pub fn check_consistency(&self, origin: &Path) -> Result<()> {
        let recomputed = summarize(&self.cells);
        if recomputed.len() != self.summary.len() {
            return Err(Error::Ingestion(format!(
                "report {}: summary rows diverge from cells",
                origin.display()
            )));
        }
        for (stored, fresh) in self.summary.iter().zip(&recomputed) {
            if (stored.mean_f1 - fresh.mean_f1).abs() > 1e-12
                || (stored.std_f1 - fresh.std_f1).abs() > 1e-12
            {
                return Err(Error::Ingestion(format!(
                    "report {}: stored mean/std do not match the per-seed cells",
                    origin.display()
                )));
            }
        }
        Ok(())
    }

    /// Serialization with the wall clock zeroed, for byte comparisons.
    pub fn comparable_bytes(&self) -> Result<Vec<u8>> {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        Ok(serde_json::to_vec_pretty(&clone)?)
    }
}

// ── CSV emitters ─────────────────────────────────────────────────────

pub fn write_summary_csv(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut out = String::from(
        "method,label,train_img,train_txt,test_img,test_txt,mean_f1,std_f1,trainable_params,trainable_ratio\n",
    );
    for r in reports {
        for s in &r.summary {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.label,
                s.train_avail_img,
                s.train_avail_txt,
                s.test_avail_img,
                s.test_avail_txt,
                s.mean_f1,
                s.std_f1,
                r.trainable_params,
                r.trainable_ratio
            )
            .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_grid_csv(cells: &[CellResult], path: &Path) -> Result<()> {
    let mut out = String::from("train_img,train_txt,test_img,test_txt,seed,macro_f1\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.train_avail_img,
            c.train_avail_txt,
            c.test_avail_img,
            c.test_avail_txt,
            c.seed,
            c.macro_f1
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plot-ready series for the symmetric missing-rate curve: one row per
/// (eta, method), where eta = 2 - avail_img - avail_txt and only symmetric
/// test specs qualify.
pub fn write_missing_rate_series(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut rows: Vec<(f64, String, f64, f64)> = Vec::new();
    for r in reports {
        for s in &r.summary {
            if (s.test_avail_img - s.test_avail_txt).abs() < 1e-9 {
                let eta = 2.0 - s.test_avail_img - s.test_avail_txt;
                rows.push((eta, r.method.clone(), s.mean_f1, s.std_f1));
            }
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = String::from("eta,method,mean_f1,std_f1\n");
    for (eta, method, mean, std) in rows {
        writeln!(out, "{eta},{method},{mean},{std}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Recursively collects every `report.json` under a run directory.
pub fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, found)?;
            } else if path.file_name().is_some_and(|n| n == "report.json") {
                found.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Ingestion(format!(
            "no report.json files under {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| RunReport::load(&p).map(|r| (p, r)))
        .collect()
}

/// Merges every report under `run_dir` into `summary.csv` and
/// `fig2_series.csv` in `out_dir`, returning the merged reports.
pub fn consolidate(run_dir: &Path, out_dir: &Path) -> Result<Vec<RunReport>> {
    let reports: Vec<RunReport> = collect_reports(run_dir)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    std::fs::create_dir_all(out_dir)?;
    write_summary_csv(&reports, &out_dir.join("summary.csv"))?;
    write_missing_rate_series(&reports, &out_dir.join("fig2_series.csv"))?;
    Ok(reports)
}
