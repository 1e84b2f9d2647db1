//! Command implementations behind the `bitsiam` binary.
//!
//! Every command validates its inputs before touching the filesystem, so a
//! rejected config leaves no output directory behind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, BackboneConfig, LoadPolicy, Model};
use crate::config::{Init, RunConfig};
use crate::data::source::{preload, split_source};
use crate::data::{build_splits, synth_dataset, ImageSource, InMemory, Manifest, Normalize, Split, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::probe::{LabeledSource, TrialResult};
use crate::eval::{balanced_metrics, export_embeddings, extract_features, knn_predict, linear_evaluate, EvalReport};
use crate::ssl::train::{read_metrics, METRICS_FILE, STATE_FILE};
use crate::ssl::{pretrain, Monitor, PretrainOptions, TrainRecord};
use crate::surgery::{config_from_meta, convert_gn_to_bn, load_archive, verify_surgery, Checkpoint, NameMap, SurgeryReport};
use crate::viz::{bar_chart, line_plot, Series};

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const RESOLVED_TOML: &str = "resolved.toml";
pub const RESOLVED_JSON: &str = "resolved.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Collapse is flagged when the final collapse statistic falls below
/// `COLLAPSE_FACTOR / sqrt(D)`.
pub const COLLAPSE_FACTOR: f64 = 0.02;

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn name_map(spec: &str) -> Result<NameMap> {
    match spec {
        "bit" => Ok(NameMap::bit_resnet_v2()),
        "identity" => Ok(NameMap::identity()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            NameMap::from_json(&text)
        }
    }
}

// ---------------------------------------------------------------- surgery

/// Converts a GN+WS archive to the batch-norm layout of `target`, verifies the
/// result and writes it to `out`.
pub fn surgeon_convert(
    input: &Path,
    out: &Path,
    target: &BackboneConfig,
    bake_ws: bool,
    map: &NameMap,
) -> Result<SurgeryReport> {
    let src = load_archive(input, map)?;
    let dst = convert_gn_to_bn(&src, target, bake_ws)?;
    let report = verify_surgery(&src, &dst, target, bake_ws);
    if !report.passed {
        return Err(Error::Structure(format!("verify_surgery failed: {}", report.failures.join("; "))));
    }
    dst.write(out)?;
    Ok(report)
}

/// Re-checks a converted checkpoint against its source. The target config and
/// `bake_ws` come from the converted checkpoint's metadata.
pub fn surgeon_verify(src: &Path, dst: &Path, map: &NameMap) -> Result<SurgeryReport> {
    let s = load_archive(src, map)?;
    let d = Checkpoint::read(dst)?;
    let cfg = config_from_meta(&d)?;
    let bake = d.meta.get("bake_ws").map(String::as_str) == Some("true");
    Ok(verify_surgery(&s, &d, &cfg, bake))
}

// ------------------------------------------------------------------- data

/// The run's manifest, re-split when the config asks for it.
pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let m = Manifest::load(&cfg.data.manifest)?;
    match &cfg.data.split {
        Some(spec) => build_splits(&m, spec),
        None => Ok(m),
    }
}

/// Normalization from the manifest sidecar, else pretrain-split statistics.
pub fn dataset_norm(m: &Manifest, size: usize, pretrain_images: Option<&InMemory>) -> Result<Normalize> {
    if let Some(n) = m.normalize {
        return Ok(n);
    }
    let owned;
    let imgs = match pretrain_images {
        Some(i) => i,
        None => {
            owned = preload(&split_source(m, Split::Pretrain, size).0)?;
            &owned
        }
    };
    Normalize::from_images(imgs.0.iter().map(|a| a.view()))
}

// --------------------------------------------------------------- pretrain

#[derive(Debug, Clone, Default)]
pub struct PretrainRequest {
    /// Continue an interrupted run into a new generation directory.
    pub resume: bool,
    /// Stop after this many epochs (leaves a resumable state).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub run_dir: PathBuf,
    pub generation: usize,
    pub resumed_from: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub init: String,
    pub surgery: Option<SurgeryReport>,
    pub stem_reinit: bool,
    pub epochs_completed: usize,
    pub epochs_planned: usize,
    pub complete: bool,
    pub final_record: Option<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub feature_dim: usize,
    pub projector_dim: usize,
    pub train_images: usize,
    pub normalize: Normalize,
    pub backbone_hash: String,
}

fn generation_dir(base: &Path, g: usize) -> PathBuf {
    if g == 1 {
        base.to_path_buf()
    } else {
        let mut s = base.as_os_str().to_owned();
        s.push(format!(".gen{g}"));
        PathBuf::from(s)
    }
}

/// Latest existing generation of `base`, if any.
pub fn latest_generation(base: &Path) -> Option<(usize, PathBuf)> {
    let mut found = None;
    let mut g = 1;
    while generation_dir(base, g).exists() {
        found = Some((g, generation_dir(base, g)));
        g += 1;
    }
    found
}

/// Picks the directory this invocation writes and the state it resumes from.
fn plan_run_dir(base: &Path, resume: bool) -> Result<(usize, PathBuf, Option<PathBuf>)> {
    match latest_generation(base) {
        None if resume => Err(Error::Resume(format!("nothing to resume at {}", base.display()))),
        None => Ok((1, base.to_path_buf(), None)),
        Some((g, dir)) => {
            if !resume {
                return Err(Error::Config(format!(
                    "{} already exists; run directories are never overwritten (use --resume to continue an interrupted run)",
                    dir.display()
                )));
            }
            if let Ok(text) = std::fs::read_to_string(dir.join(REPORT_FILE)) {
                let v: serde_json::Value = serde_json::from_str(&text)?;
                if v["complete"] == serde_json::Value::Bool(true) {
                    return Err(Error::Resume(format!("{} finished; nothing to resume", dir.display())));
                }
            }
            let state = dir.join(STATE_FILE);
            if !state.exists() {
                return Err(Error::Resume(format!("{} has no {STATE_FILE}", dir.display())));
            }
            Ok((g + 1, generation_dir(base, g + 1), Some(state)))
        }
    }
}

fn init_model(cfg: &RunConfig) -> Result<(Model, Option<SurgeryReport>, bool, Option<Checkpoint>)> {
    let mut model = build_model(cfg.backbone, Some(cfg.head), cfg.seed)?;
    match &cfg.init {
        Init::Scratch {} => Ok((model, None, false, None)),
        Init::Pretrained { checkpoint } => {
            let ck = Checkpoint::read(checkpoint)?;
            let policy = LoadPolicy {
                allow_unexpected: vec!["head.".into(), "optim.".into()],
                ..LoadPolicy::backbone_only()
            };
            model.load_checkpoint(&ck, &policy)?;
            Ok((model, None, false, None))
        }
        Init::Surgery {
            checkpoint,
            bake_ws,
            name_map: map,
        } => {
            let src = load_archive(checkpoint, &name_map(map)?)?;
            let dst = convert_gn_to_bn(&src, &cfg.backbone, *bake_ws)?;
            let report = verify_surgery(&src, &dst, &cfg.backbone, *bake_ws);
            if !report.passed {
                return Err(Error::Structure(format!("verify_surgery failed: {}", report.failures.join("; "))));
            }
            log::info!(
                "verify_surgery pass: {} conv tensors reused, {} batch-norm tensors at defaults",
                report.conv_checked,
                report.bn_checked
            );
            let reinit = dst.meta.get("stem_reinit").map(String::as_str) == Some("true");
            let mut policy = LoadPolicy::backbone_only();
            if reinit {
                log::info!("stem shape differs from the source; stem is freshly initialized");
                policy = policy.allowing_missing("stem.");
            }
            let loaded = model.load_checkpoint(&dst, &policy)?;
            log::info!("loaded {} backbone tensors from {}", loaded.loaded.len(), checkpoint.display());
            Ok((model, Some(report), reinit, Some(dst)))
        }
    }
}

/// Surgery (if configured) followed by SimSiam pretraining. Returns the run
/// directory.
pub fn cmd_pretrain(cfg: &RunConfig, config_text: &str, req: &PretrainRequest) -> Result<PathBuf> {
    let mut optim = cfg.optimizer.clone();
    if cfg.deterministic {
        optim.mixed_precision = false;
    }
    let aug = cfg.augment.resolve();
    aug.validate()?;
    let (generation, dir, resume_from) = plan_run_dir(&cfg.output_dir, req.resume)?;

    // Everything that can fail on bad inputs happens before the run directory
    // is created.
    let manifest = load_manifest(cfg)?;
    let size = cfg.data.image_size;
    let (train_files, _) = split_source(&manifest, Split::Pretrain, size);
    if train_files.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretrain split has {} images; need at least 2",
            train_files.len()
        )));
    }
    let train_mem = if cfg.data.preload || manifest.normalize.is_none() {
        Some(preload(&train_files)?)
    } else {
        None
    };
    let norm = dataset_norm(&manifest, size, train_mem.as_ref())?;
    let (mut model, surgery, stem_reinit, converted) = init_model(cfg)?;

    let (bank, bank_labels) = split_source(&manifest, Split::Finetune, size);
    let (queries, query_labels) = split_source(&manifest, Split::Val, size);
    let (bank, queries) = (preload(&bank)?, preload(&queries)?);
    let monitor = (cfg.monitor.enabled && !bank.is_empty() && !queries.is_empty()).then(|| Monitor {
        bank: &bank,
        bank_labels: &bank_labels,
        queries: &queries,
        query_labels: &query_labels,
        num_classes: manifest.class_names.len(),
        knn: cfg.monitor.knn(),
    });

    create_dir(&dir)?;
    std::fs::write(dir.join(CONFIG_COPY), config_text).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join(RESOLVED_TOML), cfg.to_toml()).map_err(|e| Error::io(&dir, e))?;
    write_json(
        &dir.join(RESOLVED_JSON),
        &serde_json::json!({ "config": cfg, "augment": aug, "optimizer": optim, "normalize": norm }),
    )?;
    manifest.save(&dir.join("manifest.csv"))?;
    if let (Some(r), Some(ck)) = (&surgery, &converted) {
        write_json(&dir.join("surgery_report.json"), r)?;
        ck.write(&dir.join("converted.ckpt"))?;
    }

    let mut opts = PretrainOptions::new(optim.clone(), aug, norm, cfg.seed);
    opts.save_every = cfg.train.save_every;
    opts.out_dir = Some(dir.clone());
    opts.monitor = monitor;
    opts.resume_from = resume_from.clone();
    opts.stop_after = req.stop_after;
    let data: &dyn ImageSource = match &train_mem {
        Some(m) => m,
        None => &train_files,
    };
    let outcome = pretrain(&mut model, data, &opts)?;

    let done = outcome.records.last().map_or(0, |r| r.epoch);
    let report = RunReport {
        name: cfg.name.clone(),
        run_dir: dir.clone(),
        generation,
        resumed_from: resume_from,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        init: match cfg.init {
            Init::Scratch {} => "scratch",
            Init::Surgery { .. } => "surgery",
            Init::Pretrained { .. } => "pretrained",
        }
        .into(),
        surgery,
        stem_reinit,
        epochs_completed: done,
        epochs_planned: optim.epochs,
        complete: done == optim.epochs,
        final_record: outcome.records.last().copied(),
        checkpoints: outcome.checkpoints,
        feature_dim: model.feature_dim(),
        projector_dim: cfg.head.projector_dim,
        train_images: data.len(),
        normalize: norm,
        backbone_hash: model.backbone_hash(),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(dir)
}

// ------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Knn,
    Linear,
    Both,
}

impl EvalMode {
    fn knn(self) -> bool {
        self != EvalMode::Linear
    }
    fn linear(self) -> bool {
        self != EvalMode::Knn
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub mode: EvalMode,
    /// Checkpoint files, or run directories (their latest epoch checkpoint).
    pub checkpoints: Vec<PathBuf>,
    /// Bar labels; defaults to the checkpoint file or run directory name.
    pub labels: Vec<String>,
    pub trials: Option<usize>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub label: String,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// A checkpoint path, or the newest `checkpoints/epoch_*.ckpt` of a run
/// directory.
pub fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    if p.is_dir() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(p.join("checkpoints"))
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        found.sort();
        return found
            .pop()
            .ok_or_else(|| Error::InvalidArgument(format!("{} holds no checkpoints", p.display())));
    }
    Err(Error::InvalidArgument(format!("checkpoint {} does not exist", p.display())))
}

/// Backbone-only model loaded from `path`; heads and optimizer state are
/// ignored, a missing or misshapen backbone tensor is an error.
pub fn load_backbone(cfg: &BackboneConfig, path: &Path) -> Result<Model> {
    let ck = Checkpoint::read(path)?;
    let mut model = build_model(*cfg, None, 0)?;
    let policy = LoadPolicy {
        allow_missing: vec![],
        allow_unexpected: vec!["projector.".into(), "predictor.".into(), "head.".into(), "optim.".into()],
    };
    model.load_checkpoint(&ck, &policy)?;
    Ok(model)
}

fn knn_report(
    model: &Model,
    bank: (&dyn ImageSource, &[usize]),
    val: (&dyn ImageSource, &[usize]),
    test: (&dyn ImageSource, &[usize]),
    norm: &Normalize,
    class_names: &[String],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let fb = extract_features(model, bank.0, norm)?;
    let k = cfg.monitor.k.min(fb.nrows());
    let t = cfg.monitor.temperature;
    let score = |src: &dyn ImageSource, labels: &[usize]| -> Result<_> {
        let q = extract_features(model, src, norm)?;
        let pred = knn_predict(fb.view(), bank.1, q.view(), k, t)?;
        balanced_metrics(&pred, labels, class_names.len())
    };
    let val_score = if val.0.is_empty() {
        f64::NAN
    } else {
        score(val.0, val.1)?.balanced_accuracy
    };
    let trial = TrialResult {
        seed: 0,
        best_epoch: 0,
        val_balanced_accuracy: val_score,
        val_curve: vec![],
        test: score(test.0, test.1)?,
    };
    let mut r = EvalReport::from_trials("knn", vec![trial], class_names.to_vec())?;
    r.backbone_hash = model.backbone_hash();
    Ok(r)
}

fn write_confusion(path: &Path, report: &EvalReport) -> Result<()> {
    let n = report.class_names.len();
    let mut total = vec![vec![0u64; n]; n];
    for t in &report.trials {
        for (i, row) in t.test.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                total[i][j] += v;
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(report.class_names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in total.iter().enumerate() {
        let mut rec = vec![report.class_names[i].clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn file_label(p: &Path) -> String {
    let base = if p.is_dir() { p.file_name() } else { p.file_stem() };
    base.map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

/// kNN and/or linear evaluation of each checkpoint against the configured
/// data splits. Writes `eval_report.json`, one confusion CSV per entry (counts
/// summed over trials) and a balanced-accuracy bar chart.
pub fn cmd_eval(cfg: &RunConfig, req: &EvalRequest) -> Result<Vec<EvalEntry>> {
    if req.checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoint given".into()));
    }
    if !req.labels.is_empty() && req.labels.len() != req.checkpoints.len() {
        return Err(Error::InvalidArgument("one label per checkpoint".into()));
    }
    let paths = req
        .checkpoints
        .iter()
        .map(|p| resolve_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let mut probe = cfg.eval.clone();
    if let Some(t) = req.trials {
        probe.trials = t;
    }
    probe.validate()?;

    let manifest = load_manifest(cfg)?;
    let size = cfg.data.image_size;
    let norm = dataset_norm(&manifest, size, None)?;
    let load = |s| -> Result<(InMemory, Vec<usize>)> {
        let (f, l) = split_source(&manifest, s, size);
        Ok((preload(&f)?, l))
    };
    let (ft, ftl) = load(Split::Finetune)?;
    let (va, val) = load(Split::Val)?;
    let (te, tel) = load(Split::Test)?;
    if ft.is_empty() || te.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs finetune and test images".into()));
    }
    let names = &manifest.class_names;

    let mut entries = Vec::new();
    for (i, (orig, path)) in req.checkpoints.iter().zip(&paths).enumerate() {
        let label = req.labels.get(i).cloned().unwrap_or_else(|| file_label(orig));
        let model = load_backbone(&cfg.backbone, path)?;
        if req.mode.knn() {
            let r = knn_report(&model, (&ft, &ftl), (&va, &val), (&te, &tel), &norm, names, cfg)?;
            log::info!("{label} knn balanced accuracy {:.4}", r.balanced_accuracy);
            entries.push(EvalEntry {
                label: label.clone(),
                checkpoint: path.clone(),
                report: r,
            });
        }
        if req.mode.linear() {
            let src = |images, labels| LabeledSource { images, labels };
            let r = linear_evaluate(
                &model,
                src(&ft, &ftl),
                src(&va, &val),
                src(&te, &tel),
                &norm,
                names,
                &probe,
            )?;
            log::info!(
                "{label} linear balanced accuracy {:.4} over {} trials",
                r.balanced_accuracy,
                r.trials.len()
            );
            entries.push(EvalEntry {
                label,
                checkpoint: path.clone(),
                report: r,
            });
        }
    }

    create_dir(&req.out_dir)?;
    write_json(&req.out_dir.join(EVAL_REPORT_FILE), &entries)?;
    for e in &entries {
        write_confusion(
            &req.out_dir.join(format!("confusion_{}_{}.csv", e.label, e.report.mode)),
            &e.report,
        )?;
    }
    let bars: Vec<(String, f64)> = entries
        .iter()
        .map(|e| (format!("{} {}", e.label, e.report.mode), e.report.balanced_accuracy))
        .collect();
    bar_chart(
        &req.out_dir.join("balanced_accuracy.png"),
        "Balanced accuracy",
        "balanced accuracy",
        &bars,
    )?;
    Ok(entries)
}

// ------------------------------------------------------------------- plot

#[derive(Debug, Clone, Default)]
pub struct PlotOutputs {
    pub knn_png: PathBuf,
    pub loss_png: PathBuf,
    pub collapse_png: PathBuf,
    /// Labels of runs whose final collapse statistic is below threshold.
    pub collapsed: Vec<String>,
}

/// Projector width recorded in a run directory, for the collapse threshold.
fn run_projector_dim(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["projector_dim"].as_u64().map(|d| d as usize)
}

pub fn is_collapsed(final_std: f64, dim: usize) -> bool {
    final_std.is_finite() && final_std < COLLAPSE_FACTOR / (dim as f64).sqrt()
}

/// Overlays the kNN, loss and collapse curves of several runs. `dim`
/// overrides the projector width read from each run's report.
pub fn cmd_plot(runs: &[PathBuf], labels: &[String], dim: Option<usize>, out_dir: &Path) -> Result<PlotOutputs> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    if !labels.is_empty() && labels.len() != runs.len() {
        return Err(Error::InvalidArgument("one label per run".into()));
    }
    let mut knn = Vec::new();
    let mut loss = Vec::new();
    let mut collapse = Vec::new();
    let mut collapsed = Vec::new();
    for (i, dir) in runs.iter().enumerate() {
        let label = labels.get(i).cloned().unwrap_or_else(|| file_label(dir));
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        let curve = |f: fn(&TrainRecord) -> f64| -> Vec<(f64, f64)> {
            records
                .iter()
                .filter(|r| f(r).is_finite())
                .map(|r| (r.epoch as f64, f(r)))
                .collect()
        };
        let flagged = match (records.last(), dim.or_else(|| run_projector_dim(dir))) {
            (Some(r), Some(d)) => is_collapsed(r.collapse_std, d),
            _ => false,
        };
        if flagged {
            collapsed.push(label.clone());
        }
        let series = |points| Series {
            label: label.clone(),
            points,
            flagged,
        };
        knn.push(series(curve(|r| r.knn_balanced_acc)));
        loss.push(series(curve(|r| r.loss)));
        collapse.push(series(curve(|r| r.collapse_std)));
    }
    create_dir(out_dir)?;
    let out = PlotOutputs {
        knn_png: out_dir.join("knn_balanced_acc.png"),
        loss_png: out_dir.join("loss.png"),
        collapse_png: out_dir.join("collapse_std.png"),
        collapsed,
    };
    line_plot(&out.knn_png, "kNN balanced accuracy", "epoch", "balanced accuracy", &knn)?;
    line_plot(&out.loss_png, "SimSiam loss", "epoch", "loss", &loss)?;
    line_plot(&out.collapse_png, "Output std of normalized z", "epoch", "collapse_std", &collapse)?;
    Ok(out)
}

// ------------------------------------------------------------------ embed

/// Frozen features of one split, their t-SNE map and the two scatter plots.
/// `focus` names the class plotted against the rest; defaults to the first.
pub fn cmd_embed(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    focus: Option<&str>,
    out_dir: &Path,
) -> Result<crate::eval::embed::EmbeddingOutputs> {
    let path = resolve_checkpoint(checkpoint)?;
    let manifest = load_manifest(cfg)?;
    let focus = match focus {
        Some(f) => manifest
            .class_index(f)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class `{f}`")))?,
        None => 0,
    };
    let size = cfg.data.image_size;
    let norm = dataset_norm(&manifest, size, None)?;
    let model = load_backbone(&cfg.backbone, &path)?;
    let (src, labels) = split_source(&manifest, split, size);
    let ids: Vec<String> = manifest
        .indices(split)
        .iter()
        .map(|&i| {
            let p = Path::new(&manifest.entries[i].path);
            p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    let src = preload(&src)?;
    create_dir(out_dir)?;
    export_embeddings(&model, &src, &ids, &labels, &manifest.class_names, focus, &norm, out_dir, &cfg.tsne)
}

// ------------------------------------------------------------- data tools

/// Renders a synthetic dataset and its tagged manifest under `out_dir`.
pub fn cmd_synth(out_dir: &Path, spec: &SynthSpec, split: &SplitSpec) -> Result<Manifest> {
    split.validate()?;
    synth_dataset(out_dir, spec, split)
}

/// Re-tags the entries of a manifest and writes the result to `out`.
pub fn cmd_split(manifest: &Path, spec: &SplitSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let m = Manifest::load(manifest)?;
    let mut s = build_splits(&m, spec)?;
    // Paths in the output stay valid relative to the new location.
    let out_root = out.parent().map(Path::to_path_buf).unwrap_or_default();
    for e in &mut s.entries {
        let abs = m.root.join(&e.path);
        if Path::new(&e.path).is_relative() && out_root != m.root {
            e.path = std::path::absolute(&abs)
                .map_err(|err| Error::io(&abs, err))?
                .display()
                .to_string();
        }
    }
    s.root = out_root;
    s.save(out)?;
    Ok(s)
}
