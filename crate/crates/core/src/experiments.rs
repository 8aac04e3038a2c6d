//! Multi-seed studies: main results, the no-GCN ablation, bandwidth and
//! depth sweeps, and full-length training curves.
//!
//! Every study trains on one graph with one fixed split, so only the swept
//! variable and the model seed change between runs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_split, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind};
use crate::model::{gcn_dims_for_depth, ModelSpec, Variant};
use crate::ops::ConvMode;
use crate::preset::Preset;
use crate::scalar::Scalar;
use crate::trainer::{curves_csv, train, EpochRecord, RunConfig, RunResult, RunSummary};

/// Applies the preset's split unless `keep_existing` is set and the graph
/// already carries a training mask.
pub fn apply_split<T: Scalar>(
    g: &Graph<T>,
    preset: &Preset,
    keep_existing: bool,
) -> Result<(Graph<T>, Option<SplitSpec>)> {
    if keep_existing && g.masks().count(MaskKind::Train) > 0 {
        return Ok((g.clone(), None));
    }
    let spec = SplitSpec::parse(&preset.meta.split, preset.meta.split_seed)?;
    let masks = make_split(g, &spec)?;
    Ok((g.with_masks(masks)?, Some(spec)))
}

/// One trained run, reduced to what studies report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_acc: f64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    pub runs: Vec<SeedResult>,
}

impl Aggregate {
    fn new(label: String, runs: Vec<SeedResult>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.test_acc).sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs
                .iter()
                .map(|r| (r.test_acc - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        } else {
            0.0
        };
        Self {
            label,
            mean,
            std,
            runs,
        }
    }
}

/// A configuration to train under several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
}

fn seeds_from(base: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|i| base + i).collect()
}

/// Runs every `(point, seed)` pair; results come back in grid order.
pub fn run_grid<T: Scalar>(
    g: &Graph<T>,
    grid: &[GridPoint],
) -> Result<Vec<(Aggregate, Vec<RunResult<T>>)>> {
    let jobs: Vec<(usize, RunConfig)> = grid
        .iter()
        .enumerate()
        .flat_map(|(p, pt)| {
            pt.seeds.iter().map(move |&s| {
                let mut cfg = pt.config.clone();
                cfg.seed = s;
                (p, cfg)
            })
        })
        .collect();
    let results: Vec<Result<(usize, u64, RunResult<T>)>> = jobs
        .into_par_iter()
        .map(|(p, cfg)| {
            log::info!("{}: seed {}", grid[p].label, cfg.seed);
            let r = train(g, &cfg)?;
            Ok((p, cfg.seed, r))
        })
        .collect();
    let mut per_point: Vec<Vec<(u64, RunResult<T>)>> =
        (0..grid.len()).map(|_| Vec::new()).collect();
    for r in results {
        let (p, seed, run) = r?;
        per_point[p].push((seed, run));
    }
    grid.iter()
        .zip(per_point)
        .map(|(pt, runs)| {
            let seeds = runs
                .iter()
                .map(|(seed, r)| {
                    let test_acc = r.test_acc.ok_or_else(|| Error::EmptyMask("test".into()))?;
                    Ok(SeedResult {
                        seed: *seed,
                        test_acc,
                        best_epoch: r.best_epoch,
                        best_val_acc: r.best_val_acc,
                        epochs_run: r.curves.len(),
                        wall_seconds: r.wall_seconds,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                Aggregate::new(pt.label.clone(), seeds),
                runs.into_iter().map(|(_, r)| r).collect(),
            ))
        })
        .collect()
}

/// Finished study: aggregates per grid point plus the runs behind them.
#[derive(Debug, Clone)]
pub struct Study<T> {
    pub experiment: String,
    pub grid: Vec<GridPoint>,
    pub aggregates: Vec<Aggregate>,
    pub runs: Vec<Vec<RunResult<T>>>,
}

impl<T: Scalar> Study<T> {
    fn run(experiment: &str, g: &Graph<T>, grid: Vec<GridPoint>) -> Result<Self> {
        let out = run_grid(g, &grid)?;
        let (aggregates, runs) = out.into_iter().unzip();
        Ok(Self {
            experiment: experiment.to_string(),
            grid,
            aggregates,
            runs,
        })
    }

    pub fn means(&self) -> Vec<f64> {
        self.aggregates.iter().map(|a| a.mean).collect()
    }

    /// Largest minus smallest mean over the grid points whose labels start
    /// with `prefix`.
    pub fn spread(&self, prefix: &str) -> f64 {
        let m: Vec<f64> = self
            .aggregates
            .iter()
            .filter(|a| a.label.starts_with(prefix))
            .map(|a| a.mean)
            .collect();
        let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = m.iter().copied().fold(f64::INFINITY, f64::min);
        if m.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

/// `repeats` seeds of each preset, one grid point per preset.
pub fn run_main<T: Scalar>(g: &Graph<T>, presets: &[&Preset], repeats: usize) -> Result<Study<T>> {
    let grid = presets
        .iter()
        .map(|p| GridPoint {
            label: p.name.clone(),
            config: p.run.clone(),
            seeds: seeds_from(p.run.seed, repeats),
        })
        .collect();
    Study::run("main", g, grid)
}

/// Classifier directly on the first-level representation: node-feature
/// convolution versus the plain mean of the sampled columns.
pub fn run_ablation_no_gcn<T: Scalar>(
    g: &Graph<T>,
    nfc_only: &Preset,
    mean_only: &Preset,
    repeats: usize,
) -> Result<Study<T>> {
    for (p, want) in [
        (nfc_only, Variant::NfcOnly),
        (mean_only, Variant::Mean5Only),
    ] {
        if p.run.model.variant != want {
            return Err(Error::Config(format!(
                "preset `{}` is not a {want} preset",
                p.name
            )));
        }
    }
    let grid = [nfc_only, mean_only]
        .into_iter()
        .map(|p| GridPoint {
            label: p.run.model.variant.to_string(),
            config: p.run.clone(),
            seeds: seeds_from(p.run.seed, repeats),
        })
        .collect();
    Study::run("no-gcn", g, grid)
}

/// Same architecture, node bandwidth `n` varied. A 2D filter wider than
/// `n` is narrowed to `n`.
pub fn with_bandwidth(spec: &ModelSpec, n: usize) -> ModelSpec {
    let mut s = spec.clone();
    s.bandwidth = n;
    if let Some(c) = s.conv.as_mut() {
        if c.mode == ConvMode::Conv2d {
            c.width = c.width.min(n);
        }
    }
    s
}

pub fn run_bandwidth_sweep<T: Scalar>(
    g: &Graph<T>,
    preset: &Preset,
    n_values: &[usize],
    repeats: usize,
) -> Result<Study<T>> {
    let grid = n_values
        .iter()
        .map(|&n| {
            let mut config = preset.run.clone();
            config.model = with_bandwidth(&preset.run.model, n);
            GridPoint {
                label: format!("n={n}"),
                config,
                seeds: seeds_from(preset.run.seed, repeats),
            }
        })
        .collect();
    Study::run("bandwidth", g, grid)
}

/// Same model with `K - 1` hidden graph layers plus the output layer.
pub fn with_depth(spec: &ModelSpec, depth: usize) -> ModelSpec {
    let hidden = if spec.gcn_dims.len() >= 2 {
        spec.gcn_dims[0]
    } else {
        16
    };
    let mut s = spec.clone();
    s.gcn_dims = gcn_dims_for_depth(depth, hidden, spec.num_classes);
    s
}

/// Depth sweep for the preset, and for `baseline` at the same depths when
/// given. Labels are `nfc K=k` and `baseline K=k`.
pub fn run_depth_sweep<T: Scalar>(
    g: &Graph<T>,
    preset: &Preset,
    baseline: Option<&Preset>,
    k_values: &[usize],
    repeats: usize,
) -> Result<Study<T>> {
    let mut grid = Vec::new();
    for (tag, p) in std::iter::once(("nfc", preset)).chain(baseline.map(|b| ("baseline", b))) {
        for &k in k_values {
            let mut config = p.run.clone();
            config.model = with_depth(&p.run.model, k);
            grid.push(GridPoint {
                label: format!("{tag} K={k}"),
                config,
                seeds: seeds_from(p.run.seed, repeats),
            });
        }
    }
    Study::run("depth", g, grid)
}

/// Full-length runs without early stopping, for plotting.
pub fn run_curves<T: Scalar>(
    g: &Graph<T>,
    presets: &[&Preset],
    repeats: usize,
) -> Result<Study<T>> {
    let grid = presets
        .iter()
        .map(|p| {
            let mut config = p.run.clone();
            config.early_stopping = false;
            GridPoint {
                label: p.name.clone(),
                config,
                seeds: seeds_from(p.run.seed, repeats),
            }
        })
        .collect();
    Study::run("curves", g, grid)
}

pub fn export_curves(curves: &[EpochRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, curves_csv(curves)).map_err(|e| Error::io(path, e))
}

/// Everything needed to rerun a study: the exact configs, seeds and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub experiment: String,
    pub dataset: String,
    /// `None` when the dataset's own split file was used.
    pub split: Option<SplitSpec>,
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub experiment: String,
    pub dataset: String,
    pub points: Vec<Aggregate>,
    pub runs: Vec<Vec<RunSummary>>,
}

impl<T: Scalar> Study<T> {
    pub fn config(&self, dataset: &str, split: Option<SplitSpec>) -> StudyConfig {
        StudyConfig {
            experiment: self.experiment.clone(),
            dataset: dataset.to_string(),
            split,
            grid: self.grid.clone(),
        }
    }

    pub fn summary(&self, dataset: &str) -> StudySummary {
        let runs = self
            .grid
            .iter()
            .zip(&self.runs)
            .map(|(pt, runs)| {
                runs.iter()
                    .zip(&pt.seeds)
                    .map(|(r, &seed)| {
                        let mut cfg = pt.config.clone();
                        cfg.seed = seed;
                        RunSummary::new(&cfg, r)
                    })
                    .collect()
            })
            .collect();
        StudySummary {
            experiment: self.experiment.clone(),
            dataset: dataset.to_string(),
            points: self.aggregates.clone(),
            runs,
        }
    }
}

/// Reruns a study from its config echo on the same dataset.
pub fn replay<T: Scalar>(g: &Graph<T>, cfg: &StudyConfig) -> Result<Study<T>> {
    let g = match &cfg.split {
        Some(s) => g.with_masks(make_split(g, s)?)?,
        None => g.clone(),
    };
    Study::run(&cfg.experiment, &g, cfg.grid.clone())
}

/// Creates `root/results/<experiment>/<dataset>/<timestamp>/`.
pub fn results_dir(root: &Path, experiment: &str, dataset: &str) -> Result<PathBuf> {
    let base = root.join("results").join(experiment).join(dataset);
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
    let mut dir = base.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Other(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `config.json`, `summary.json` and `curves.csv` (first run of the
/// first grid point), plus every run's curves under `runs/`.
pub fn write_study<T: Scalar>(dir: &Path, study: &Study<T>, config: &StudyConfig) -> Result<()> {
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("summary.json"), &study.summary(&config.dataset))?;
    if let Some(first) = study.runs.first().and_then(|r| r.first()) {
        export_curves(&first.curves, &dir.join("curves.csv"))?;
    }
    for (pt, runs) in study.grid.iter().zip(&study.runs) {
        for (r, seed) in runs.iter().zip(&pt.seeds) {
            let name: String = pt
                .label
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            export_curves(
                &r.curves,
                &dir.join("runs").join(format!("{name}-seed{seed}.csv")),
            )?;
        }
    }
    Ok(())
}
