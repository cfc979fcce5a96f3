//! Experiment execution: the generate / split / apply-missing / train /
//! evaluate pipeline per seed, plus the sweep and ablation commands.
//!
//! The complete dataset is split first and availability rates are applied
//! per subset afterwards, so a test spec can disagree with the train spec
//! (the mismatched train/test grid) without destroying held-out contents.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mora::data::{apply_missing, generate_synthetic, split, MissingSpec};
use mora::error::{Error, Result};
use mora::model::{ModelConfig, MultimodalEncoder, ParamCounts};
use mora::seed;
use mora::training::{evaluate, train};

use crate::config::ExperimentConfig;
use crate::report::{summarize, write_grid_csv, write_summary_csv, CellResult, RunReport};

/// Per-seed pipeline seeds, all derived from the run seed mixed with the
/// config's own component seeds.
struct StageSeeds {
    data: u64,
    split: u64,
    model: u64,
    adapters: u64,
    train: u64,
    miss_train: u64,
    miss_val: u64,
}

impl StageSeeds {
    fn new(cfg: &ExperimentConfig, run_seed: u64) -> Self {
        StageSeeds {
            data: seed::derive(run_seed ^ cfg.task.seed, "data"),
            split: seed::derive(run_seed, "split"),
            model: seed::derive(run_seed, "model"),
            adapters: seed::derive(run_seed, "adapters"),
            train: seed::derive(run_seed ^ cfg.train.seed, "train"),
            miss_train: seed::derive(run_seed ^ cfg.missing.train.seed, "missing-train"),
            miss_val: seed::derive(run_seed ^ cfg.missing.train.seed, "missing-val"),
        }
    }

    fn miss_test(&self, run_seed: u64, index: usize) -> u64 {
        seed::derive(run_seed, &format!("missing-test-{index}"))
    }
}

/// One trained model per seed, evaluated across every test spec.
pub struct SingleRun {
    pub report: RunReport,
    pub counts: ParamCounts,
}

fn run_label_dir(out_dir: &Path, label: &str) -> PathBuf {
    if label == "train" {
        out_dir.to_path_buf()
    } else {
        out_dir.join(label)
    }
}

/// Trains `cfg.method` under `train_spec` for every seed and evaluates each
/// best checkpoint across `test_specs`. Writes `report.json` and per-seed
/// checkpoints under the label directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    train_spec: &MissingSpec,
    test_specs: &[MissingSpec],
    label: &str,
    out_dir: &Path,
) -> Result<SingleRun> {
    if test_specs.is_empty() {
        return Err(Error::Config("at least one test spec is required".into()));
    }
    let started = Instant::now();
    let dir = run_label_dir(out_dir, label);
    std::fs::create_dir_all(&dir)?;

    let geom = model_cfg.geometry();
    let mut cells = Vec::new();
    let mut counts: Option<ParamCounts> = None;

    for &run_seed in &cfg.seeds {
        let seeds = StageSeeds::new(cfg, run_seed);

        let mut task = cfg.task.clone();
        task.seed = seeds.data;
        let full = generate_synthetic(&task, &geom, cfg.num_samples)?;
        let (train_c, val_c, test_c) = split(&full, cfg.split, seeds.split)?;

        let train_ds = apply_missing(
            &train_c,
            &MissingSpec::new(train_spec.avail_img, train_spec.avail_txt, seeds.miss_train)?,
        )?;
        let val_ds = apply_missing(
            &val_c,
            &MissingSpec::new(train_spec.avail_img, train_spec.avail_txt, seeds.miss_val)?,
        )?;

        let mut model = MultimodalEncoder::new(model_cfg, seeds.model)?;
        model.attach_adapters(cfg.method, seeds.adapters)?;
        model.freeze_backbone();
        counts.get_or_insert_with(|| model.count_params());

        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seeds.train;
        let (checkpoint, train_report) = train(&mut model, &train_ds, &val_ds, &train_cfg)?;
        checkpoint.save(&dir.join(format!("checkpoint_seed{run_seed}.json")))?;

        for (i, test_spec) in test_specs.iter().enumerate() {
            let test_ds = apply_missing(
                &test_c,
                &MissingSpec::new(
                    test_spec.avail_img,
                    test_spec.avail_txt,
                    seeds.miss_test(run_seed, i),
                )?,
            )?;
            let metrics = evaluate(&model, &test_ds, 0.5)?;
            cells.push(CellResult {
                seed: run_seed,
                train_avail_img: train_spec.avail_img,
                train_avail_txt: train_spec.avail_txt,
                test_avail_img: test_spec.avail_img,
                test_avail_txt: test_spec.avail_txt,
                macro_f1: metrics.macro_f1,
                best_epoch: train_report.best_epoch,
            });
        }
    }

    let counts = counts.expect("at least one seed ran");
    let summary = summarize(&cells);
    let report = RunReport {
        spec_hash: cfg.spec_hash(),
        method: cfg.method.to_string(),
        label: label.to_string(),
        total_params: counts.total,
        trainable_params: counts.trainable,
        trainable_ratio: counts.ratio,
        cells,
        summary,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    report.save(&dir.join("report.json"))?;
    Ok(SingleRun { report, counts })
}

/// `train`: the configured method under the configured missing rates.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let run = run_experiment(
        cfg,
        &cfg.model,
        &cfg.missing.train,
        &cfg.missing.test,
        "train",
        out_dir,
    )?;
    write_summary_csv(std::slice::from_ref(&run.report), &out_dir.join("summary.csv"))?;
    Ok(run.report)
}

/// `sweep-missing`: one trained model per (train spec, seed), each
/// evaluated across the full test grid; emits `grid.csv`.
pub fn cmd_sweep_missing(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunReport>> {
    let train_specs = if cfg.sweep.train_specs.is_empty() {
        vec![cfg.missing.train]
    } else {
        cfg.sweep.train_specs.clone()
    };
    let mut test_specs = if cfg.sweep.test_specs.is_empty() {
        cfg.missing.test.clone()
    } else {
        cfg.sweep.test_specs.clone()
    };
    for &eta in &cfg.sweep.etas {
        test_specs.push(MissingSpec::symmetric(eta, 0)?);
    }

    let mut reports = Vec::new();
    let mut all_cells = Vec::new();
    for (i, train_spec) in train_specs.iter().enumerate() {
        let label = format!("sweep_{i}_img{}_txt{}", train_spec.avail_img, train_spec.avail_txt);
        let run = run_experiment(cfg, &cfg.model, train_spec, &test_specs, &label, out_dir)?;
        all_cells.extend(run.report.cells.clone());
        reports.push(run.report);
    }
    write_grid_csv(&all_cells, &out_dir.join("grid.csv"))?;
    write_summary_csv(&reports, &out_dir.join("summary.csv"))?;
    Ok(reports)
}

/// `ablate-rank`: trains per rank at the configured missing rates. The
/// degenerate `rank = hidden_dim` cell is allowed; anything larger errors.
pub fn cmd_ablate_rank(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunReport>> {
    let d = cfg.model.hidden_dim;
    let ranks = if cfg.sweep.ranks.is_empty() {
        let mut default = vec![1, 2, 4, 16];
        default.retain(|&r| r < d);
        default.push(d);
        default
    } else {
        cfg.sweep.ranks.clone()
    };
    for &r in &ranks {
        if r == 0 || r > d {
            return Err(Error::Config(format!(
                "rank {r} is outside the valid range 1..={d}"
            )));
        }
    }

    let mut reports = Vec::new();
    for &rank in &ranks {
        let mut model_cfg = cfg.model.clone();
        model_cfg.adapter.rank = rank;
        let label = format!("rank_{rank}");
        let run = run_experiment(
            cfg,
            &model_cfg,
            &cfg.missing.train,
            &cfg.missing.test,
            &label,
            out_dir,
        )?;
        reports.push(run.report);
    }
    write_summary_csv(&reports, &out_dir.join("summary.csv"))?;
    Ok(reports)
}

/// `ablate-blocks`: trains per plugged-block set; the empty set degenerates
/// to the classifier-only baseline.
pub fn cmd_ablate_blocks(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunReport>> {
    let sets = if cfg.sweep.block_sets.is_empty() {
        let last = cfg.model.num_blocks - 1;
        let mut defaults = vec![vec![0]];
        if last > 0 {
            defaults.push(vec![0, 1]);
            defaults.push(vec![last]);
        }
        defaults
    } else {
        cfg.sweep.block_sets.clone()
    };

    let mut reports = Vec::new();
    for set in &sets {
        if let Some(&bad) = set.iter().find(|&&b| b >= cfg.model.num_blocks) {
            return Err(Error::Config(format!(
                "plugged block {bad} is out of range for {} blocks",
                cfg.model.num_blocks
            )));
        }
        let mut model_cfg = cfg.model.clone();
        model_cfg.adapter.target_blocks = set.clone();
        let label = if set.is_empty() {
            "blocks_none".to_string()
        } else {
            format!(
                "blocks_{}",
                set.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("_")
            )
        };
        let run = run_experiment(
            cfg,
            &model_cfg,
            &cfg.missing.train,
            &cfg.missing.test,
            &label,
            out_dir,
        )?;
        reports.push(run.report);
    }
    write_summary_csv(&reports, &out_dir.join("summary.csv"))?;
    Ok(reports)
}
