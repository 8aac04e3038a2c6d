use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nfcgcn::dataset::{
    find_linqs_files, load_any, load_canonical, load_idmap, make_split, parse_linqs,
    save_canonical, SplitSpec, IDMAP_FILE,
};
use nfcgcn::experiments::{
    apply_split, replay, results_dir, run_ablation_no_gcn, run_bandwidth_sweep, run_curves,
    run_depth_sweep, run_main, write_study, Study, StudyConfig,
};
use nfcgcn::gradcheck::{render_table, run_cases, standard_suite, GradCheckConfig};
use nfcgcn::graph::MaskKind;
use nfcgcn::model::{load_checkpoint, save_checkpoint, GraphInputs};
use nfcgcn::preset::{load_preset, parse_override, Preset};
use nfcgcn::trainer::{curves_csv, eval_neighborhoods, evaluate, train, RunSummary};
use nfcgcn::{Checkpoint, ErrorKind, Graph};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{
    EvalArgs, ExperimentArgs, GradcheckArgs, InputFormat, MaskArg, PrepareArgs, RunArgs,
    Study as StudyArg, TrainArgs, VariantArg,
};

pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_NUMERIC => "numeric",
            _ => "data",
        }
    }
}

impl From<nfcgcn::Error> for Failure {
    fn from(e: nfcgcn::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Numeric => EXIT_NUMERIC,
        };
        let mut message = e.to_string();
        if let nfcgcn::Error::MissingFile(_) = e {
            message.push_str(" (run `nfcgcn prepare` to create a canonical dataset)");
        }
        Self { code, message }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn data_failure(what: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: format!("{what} {}: {e}", path.display()),
    }
}

/// What a command reports: human text, the `--json` document and the exit code.
pub struct Outcome {
    pub text: String,
    pub json: Value,
    pub code: i32,
}

impl Outcome {
    fn ok(text: String, json: Value) -> Self {
        Self {
            text,
            json,
            code: 0,
        }
    }
}

pub struct Context {
    pub workdir: PathBuf,
}

impl Context {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn preset(&self, name: &str, overrides: &[(String, String)]) -> Result<Preset> {
        let name = if name.ends_with(".toml") {
            self.path(Path::new(name)).to_string_lossy().into_owned()
        } else {
            name.to_string()
        };
        Ok(load_preset(&name, overrides)?)
    }

    fn results_root(&self, run: &RunArgs) -> PathBuf {
        match &run.results {
            Some(r) => self.path(r),
            None => self.workdir.clone(),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| data_failure("cannot write", path, e))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn prepare(ctx: &Context, a: &PrepareArgs) -> Result<Outcome> {
    let input = ctx.path(&a.input);
    let out = ctx.path(&a.out);
    let mut report = json!({});
    let (graph, ids): (Graph, Option<Vec<String>>) = match a.format {
        InputFormat::Linqs => {
            let (content, cites) = find_linqs_files(&input)?;
            let d = parse_linqs::<f64>(&content, &cites)?;
            report["citation_lines"] = json!(d.cite_lines);
            report["dropped_edges"] = json!(d.dropped_edges);
            report["class_names"] = json!(d.classes);
            (d.graph, Some(d.ids))
        }
        InputFormat::Canonical => {
            let g = load_canonical::<f64>(&input)?;
            let ids = if input.join(IDMAP_FILE).exists() {
                Some(load_idmap(&input)?)
            } else {
                None
            };
            (g, ids)
        }
    };
    let graph = match &a.split {
        Some(s) => {
            let spec = SplitSpec::parse(s, a.seed)?;
            report["split"] = json!(spec);
            graph.with_masks(make_split(&graph, &spec)?)?
        }
        None => graph,
    };
    save_canonical(&graph, &out, ids.as_deref())?;

    let m = graph.masks();
    let counts = [MaskKind::Train, MaskKind::Val, MaskKind::Test].map(|k| m.count(k));
    let fields = [
        ("nodes", graph.num_nodes()),
        ("edges", graph.num_edges()),
        ("features", graph.feature_dim()),
        ("classes", graph.num_classes()),
        ("train", counts[0]),
        ("val", counts[1]),
        ("test", counts[2]),
    ];
    for (k, v) in fields {
        report[k] = json!(v);
    }
    report["out"] = json!(out);
    let mut text = format!(
        "{} nodes, {} edges, {} features, {} classes\nsplit: {} train, {} val, {} test\n",
        graph.num_nodes(),
        graph.num_edges(),
        graph.feature_dim(),
        graph.num_classes(),
        counts[0],
        counts[1],
        counts[2]
    );
    if let (Some(lines), Some(dropped)) =
        (report.get("citation_lines"), report.get("dropped_edges"))
    {
        writeln!(text, "{lines} citation lines read, {dropped} dropped")
            .expect("writing to a String");
    }
    write!(text, "wrote {}", out.display()).expect("writing to a String");
    Ok(Outcome::ok(text, report))
}

/// `--override` values plus the flag shorthands, in one list so that a flag
/// contradicting an explicit override is reported as a conflict.
fn overrides(run: &RunArgs, seed: Option<u64>) -> Result<Vec<(String, String)>> {
    let mut out = run
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<nfcgcn::Result<Vec<_>>>()?;
    if run.no_classifier_affine {
        out.push(("model.classifier_affine".into(), "false".into()));
    }
    if run.resample_per_epoch {
        out.push(("resample_per_epoch".into(), "true".into()));
    }
    if let Some(s) = seed {
        out.push(("seed".into(), s.to_string()));
    }
    Ok(out)
}

fn load_data(ctx: &Context, data: &Path) -> Result<(Graph, PathBuf)> {
    let dir = ctx.path(data);
    if !dir.is_dir() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "dataset directory {} not found (run `nfcgcn prepare` to create one)",
                dir.display()
            ),
        });
    }
    Ok((load_any::<f64>(&dir)?, dir))
}

/// Metadata stored in a checkpoint so `eval` can rebuild the exact inputs.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    preset: String,
    dataset: String,
    split: Option<SplitSpec>,
    sampling_seed: u64,
    best_epoch: usize,
    test_acc: Option<f64>,
}

pub fn train_cmd(ctx: &Context, a: &TrainArgs) -> Result<Outcome> {
    let ovr = overrides(&a.run, a.seed)?;
    let preset = ctx.preset(&a.preset, &ovr)?;
    let (graph, _) = load_data(ctx, &a.run.data)?;
    let (graph, split) = apply_split(&graph, &preset, !a.run.resplit)?;
    let result = train(&graph, &preset.run)?;

    let dataset = preset.meta.dataset.clone();
    let dir = results_dir(&ctx.results_root(&a.run), "train", &dataset)?;
    let summary = RunSummary::new(&preset.run, &result);
    write_json(
        &dir.join("config.json"),
        &json!({ "preset": preset, "split": split }),
    )?;
    write_json(&dir.join("summary.json"), &summary)?;
    let curves = dir.join("curves.csv");
    fs::write(&curves, curves_csv(&result.curves))
        .map_err(|e| data_failure("cannot write", &curves, e))?;
    let meta = CheckpointMeta {
        preset: preset.name.clone(),
        dataset: dataset.clone(),
        split,
        sampling_seed: result.sampling_seed,
        best_epoch: result.best_epoch,
        test_acc: result.test_acc,
    };
    let checkpoint = dir.join("checkpoint.tsv");
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            spec: preset.run.model.clone(),
            feature_dim: graph.feature_dim(),
            meta: serde_json::to_value(&meta).expect("serializable"),
            params: result.params,
        },
    )?;

    let acc = summary
        .test_acc
        .map_or_else(|| "n/a (empty test mask)".to_string(), pct);
    let text = format!(
        "{}: test accuracy {acc}, best validation {} at epoch {} of {}\nresults in {}",
        preset.name,
        pct(summary.best_val_acc),
        summary.best_epoch,
        summary.epochs_run,
        dir.display()
    );
    let json = json!({
        "command": "train",
        "preset": preset.name,
        "results_dir": dir,
        "checkpoint": checkpoint,
        "summary": summary,
    });
    Ok(Outcome::ok(text, json))
}

pub fn eval_cmd(ctx: &Context, a: &EvalArgs) -> Result<Outcome> {
    let path = ctx.path(&a.checkpoint);
    let ckpt = load_checkpoint::<f64>(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| data_failure("checkpoint metadata in", &path, e))?;
    let (graph, _) = load_data(ctx, &a.data)?;
    if graph.feature_dim() != ckpt.feature_dim {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "checkpoint expects {} features, dataset has {}",
                ckpt.feature_dim,
                graph.feature_dim()
            ),
        });
    }
    let graph = match &meta.split {
        Some(s) => graph.with_masks(make_split(&graph, s)?)?,
        None => graph,
    };
    let mask = match a.mask {
        MaskArg::Train => MaskKind::Train,
        MaskArg::Val => MaskKind::Val,
        MaskArg::Test => MaskKind::Test,
    };
    let inputs = GraphInputs::new(&graph, ckpt.spec.aggregation);
    let nbs = eval_neighborhoods(&graph, &ckpt.spec, meta.sampling_seed)?;
    let acc = evaluate(&inputs, &ckpt.params, &ckpt.spec, nbs.as_ref(), mask)?;
    let text = format!(
        "{} accuracy {} ({} nodes)",
        mask,
        pct(acc),
        graph.masks().count(mask)
    );
    let json = json!({
        "command": "eval",
        "checkpoint": path,
        "mask": mask,
        "nodes": graph.masks().count(mask),
        "accuracy": acc,
    });
    Ok(Outcome::ok(text, json))
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome> {
    let wanted = match a.variant {
        VariantArg::All => None,
        VariantArg::NfcGcn => Some("nfc-gcn"),
        VariantArg::GcnBaseline => Some("gcn-baseline"),
        VariantArg::NfcOnly => Some("nfc-only"),
        VariantArg::Mean5Only => Some("mean5-only"),
    };
    let cases: Vec<_> = standard_suite(a.seed)?
        .into_iter()
        .filter(|c| wanted.is_none_or(|w| c.spec.variant.name() == w))
        .collect();
    let reports = run_cases(&cases, a.seed, &GradCheckConfig::default())?;
    let pass = reports.iter().all(|r| r.pass);
    Ok(Outcome {
        text: render_table(&reports).trim_end().to_string(),
        json: json!({ "command": "gradcheck", "pass": pass, "reports": reports }),
        code: if pass { 0 } else { EXIT_NUMERIC },
    })
}

/// Presets for a study and the dataset name used in the results path. With
/// explicit presets the name defaults to the first preset's dataset; the
/// built-in defaults are looked up by `--dataset` or the data directory name.
fn study_presets(
    ctx: &Context,
    a: &ExperimentArgs,
    study: StudyArg,
    data_dir: &Path,
) -> Result<(Vec<Preset>, String)> {
    let ovr = overrides(&a.run, None)?;
    let expected = match study {
        StudyArg::NoGcn => Some(2..=2),
        StudyArg::Bandwidth => Some(1..=1),
        StudyArg::Depth => Some(1..=2),
        StudyArg::Main | StudyArg::Curves => None,
    };
    if let Some(range) = expected.filter(|_| !a.preset.is_empty()) {
        if !range.contains(&a.preset.len()) {
            return Err(Failure::usage(format!(
                "this study takes {}..={} presets, got {}",
                range.start(),
                range.end(),
                a.preset.len()
            )));
        }
    }
    if !a.preset.is_empty() {
        let presets = a
            .preset
            .iter()
            .map(|n| ctx.preset(n, &ovr))
            .collect::<Result<Vec<_>>>()?;
        let dataset = a
            .dataset
            .clone()
            .unwrap_or_else(|| presets[0].meta.dataset.clone());
        return Ok((presets, dataset));
    }
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        data_dir
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default()
    });
    let suffixes: &[&str] = match study {
        StudyArg::Main | StudyArg::Curves => &["1d", "gcn"],
        StudyArg::NoGcn => &["nfc-only", "mean5-only"],
        StudyArg::Bandwidth => &["1d"],
        StudyArg::Depth if a.no_baseline => &["1d"],
        StudyArg::Depth => &["1d", "gcn"],
    };
    let presets = suffixes
        .iter()
        .map(|s| ctx.preset(&format!("{dataset}-{s}"), &ovr))
        .collect::<Result<Vec<_>>>()?;
    Ok((presets, dataset))
}

fn study_name(s: StudyArg) -> &'static str {
    match s {
        StudyArg::Main => "main",
        StudyArg::NoGcn => "no-gcn",
        StudyArg::Bandwidth => "bandwidth",
        StudyArg::Depth => "depth",
        StudyArg::Curves => "curves",
    }
}

fn render_study(study: &Study<f64>, dir: &Path) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<24} {:>9} {:>8} {:>6}",
        "point", "mean", "std", "runs"
    )
    .expect("writing to a String");
    for a in &study.aggregates {
        writeln!(
            out,
            "{:<24} {:>9} {:>8.2} {:>6}",
            a.label,
            pct(a.mean),
            100.0 * a.std,
            a.runs.len()
        )
        .expect("writing to a String");
    }
    match study.experiment.as_str() {
        "no-gcn" if study.aggregates.len() == 2 => {
            let gap = study.aggregates[0].mean - study.aggregates[1].mean;
            writeln!(out, "gap: {:.2} points", 100.0 * gap).expect("writing to a String");
        }
        "depth" => {
            for prefix in ["nfc", "baseline"] {
                if study.aggregates.iter().any(|a| a.label.starts_with(prefix)) {
                    writeln!(
                        out,
                        "{prefix} spread: {:.2} points",
                        100.0 * study.spread(prefix)
                    )
                    .expect("writing to a String");
                }
            }
        }
        _ => {}
    }
    write!(out, "results in {}", dir.display()).expect("writing to a String");
    out
}

pub fn experiment_cmd(ctx: &Context, a: &ExperimentArgs) -> Result<Outcome> {
    if a.repeats == 0 {
        return Err(Failure::usage("--repeats must be at least 1"));
    }
    let (graph, data_dir) = load_data(ctx, &a.run.data)?;

    let (study, config) = if let Some(path) = &a.replay {
        let path = ctx.path(path);
        let text = fs::read_to_string(&path).map_err(|e| data_failure("cannot read", &path, e))?;
        let cfg: StudyConfig =
            serde_json::from_str(&text).map_err(|e| data_failure("bad study config", &path, e))?;
        (replay(&graph, &cfg)?, cfg)
    } else {
        let kind = a.study.expect("clap requires a study unless replaying");
        let (presets, dataset) = study_presets(ctx, a, kind, &data_dir)?;
        let (graph, split) = apply_split(&graph, &presets[0], !a.run.resplit)?;
        let refs: Vec<&Preset> = presets.iter().collect();
        let values = |default: std::ops::RangeInclusive<usize>| -> Vec<usize> {
            if a.values.is_empty() {
                default.collect()
            } else {
                a.values.clone()
            }
        };
        let study = match kind {
            StudyArg::Main => run_main(&graph, &refs, a.repeats)?,
            StudyArg::NoGcn => run_ablation_no_gcn(&graph, refs[0], refs[1], a.repeats)?,
            StudyArg::Bandwidth => run_bandwidth_sweep(&graph, refs[0], &values(2..=6), a.repeats)?,
            StudyArg::Depth => run_depth_sweep(
                &graph,
                refs[0],
                refs.get(1).copied(),
                &values(1..=5),
                a.repeats,
            )?,
            StudyArg::Curves => run_curves(&graph, &refs, a.repeats)?,
        };
        debug_assert_eq!(study.experiment, study_name(kind));
        let config = study.config(&dataset, split);
        (study, config)
    };

    let dir = results_dir(
        &ctx.results_root(&a.run),
        &config.experiment,
        &config.dataset,
    )?;
    write_study(&dir, &study, &config)?;
    let summary = study.summary(&config.dataset);
    let text = render_study(&study, &dir);
    let json = json!({
        "command": "experiment",
        "experiment": config.experiment,
        "dataset": config.dataset,
        "results_dir": dir,
        "points": summary.points,
    });
    Ok(Outcome::ok(text, json))
}
