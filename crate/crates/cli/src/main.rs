//! `bitsiam` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bitsiam::backbone::{BackboneConfig, StemKind};
use bitsiam::config::RunConfig;
use bitsiam::data::ingest::{ingest_cifar10, ingest_ham10000};
use bitsiam::data::{Split, SplitSpec, SynthSpec};
use bitsiam::pipeline::{self, EvalMode, EvalRequest, PretrainRequest};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bitsiam", version, about = "SimSiam pretraining from GN+WS checkpoints via batch-norm surgery")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; its meaning depends on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Full precision and fixed reduction order, for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Checkpoint surgery.
    Surgeon {
        #[command(subcommand)]
        cmd: SurgeonCmd,
    },
    /// Surgery (if configured) and SimSiam pretraining.
    Pretrain {
        /// Continue the interrupted run into a new generation directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving a resumable state.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// kNN and/or linear-probe evaluation of frozen backbones.
    Eval {
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
        /// Linear-probe trials (default: from the config).
        #[arg(long)]
        trials: Option<usize>,
        /// Checkpoint file or run directory; repeatable.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Label per checkpoint for the report and chart.
        #[arg(long)]
        label: Vec<String>,
    },
    /// kNN, loss and collapse curves of one or more runs.
    Plot {
        /// Run directories to overlay.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Legend label per run (default: directory name).
        #[arg(long)]
        label: Vec<String>,
        /// Projector width for the collapse threshold (default: from each run).
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Feature export, t-SNE map and scatter plots for one split.
    Embed {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// pretrain, finetune, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Class plotted against all others.
        #[arg(long)]
        focus: Option<String>,
    },
    /// Renders a synthetic labeled image set with a tagged manifest.
    SynthData {
        /// Number of images.
        #[arg(long, default_value_t = 700)]
        n: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Uniform classes instead of the seven-class skin-lesion-like profile.
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Re-tags a manifest into pretrain/finetune/val/test.
    Split {
        /// Manifest CSV to re-tag.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Builds a manifest from a public dataset on disk.
    Ingest {
        #[command(subcommand)]
        cmd: IngestCmd,
    },
}

#[derive(Subcommand)]
enum SurgeonCmd {
    /// Converts a GN+WS archive to batch norm; writes to --out.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "resnet50v2")]
        arch: String,
        #[arg(long)]
        bake_ws: bool,
        #[arg(long, value_enum, default_value = "standard")]
        stem: Stem,
        #[arg(long)]
        groups: Option<usize>,
        /// `bit`, `identity` or a JSON name-map file.
        #[arg(long, default_value = "bit")]
        name_map: String,
    },
    /// Checks a converted checkpoint against its source.
    Verify {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value = "bit")]
        name_map: String,
    },
}

#[derive(Subcommand)]
enum IngestCmd {
    /// HAM10000 metadata CSV plus image directories.
    Ham10000 {
        /// `HAM10000_metadata.csv`.
        #[arg(long)]
        metadata: PathBuf,
        /// Directories searched for `<image_id>.jpg`; repeatable.
        #[arg(long, required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// CIFAR-10 binary training batches.
    Cifar10 {
        /// Directory holding the `data_batch_*.bin` files.
        #[arg(long)]
        dir: PathBuf,
        /// Keep only the first this many images.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.6)]
    pretrain: f64,
    #[arg(long, default_value_t = 0.1)]
    finetune: f64,
    #[arg(long, default_value_t = 0.1)]
    val: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    /// Apply the split per class.
    #[arg(long)]
    stratified: bool,
}

impl SplitArgs {
    fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            pretrain: self.pretrain,
            finetune: self.finetune,
            val: self.val,
            test: self.test,
            seed,
            stratified: self.stratified,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Knn,
    Linear,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stem {
    Standard,
    Cifar,
}

fn load_config(cli: &Cli) -> Result<(RunConfig, String)> {
    let path = cli.config.as_deref().context("this command needs --config")?;
    let (mut cfg, text) = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = std::path::absolute(o)?;
    }
    if cli.deterministic {
        cfg.deterministic = true;
        cfg.optimizer.mixed_precision = false;
    }
    Ok((cfg, text))
}

fn required_out(cli: &Cli, what: &str) -> Result<PathBuf> {
    cli.out.clone().with_context(|| format!("{what} needs --out"))
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.cmd {
        Cmd::Surgeon { cmd } => match cmd {
            SurgeonCmd::Convert {
                input,
                arch,
                bake_ws,
                stem,
                groups,
                name_map,
            } => {
                let out = required_out(cli, "surgeon convert")?;
                let mut cfg = BackboneConfig::from_arch(arch)?.with_stem(match stem {
                    Stem::Standard => StemKind::Standard,
                    Stem::Cifar => StemKind::Cifar,
                });
                if let Some(g) = groups {
                    cfg = cfg.with_groups(*g);
                }
                let r = pipeline::surgeon_convert(input, &out, &cfg, *bake_ws, &pipeline::name_map(name_map)?)?;
                println!(
                    "verify_surgery pass: {} conv tensors, {} batch-norm tensors -> {}",
                    r.conv_checked,
                    r.bn_checked,
                    out.display()
                );
            }
            SurgeonCmd::Verify { src, dst, name_map } => {
                let r = pipeline::surgeon_verify(src, dst, &pipeline::name_map(name_map)?)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
                if !r.passed {
                    bail!("verify_surgery failed with {} problems", r.failures.len());
                }
            }
        },
        Cmd::Pretrain { resume, stop_after } => {
            let (cfg, text) = load_config(cli)?;
            let req = PretrainRequest {
                resume: *resume,
                stop_after: *stop_after,
            };
            let dir = pipeline::cmd_pretrain(&cfg, &text, &req)?;
            println!("{}", dir.display());
        }
        Cmd::Eval {
            mode,
            trials,
            checkpoint,
            label,
        } => {
            let (cfg, _) = load_config(cli)?;
            let out_dir = match &cli.out {
                Some(o) => o.clone(),
                None => sibling(&cfg.output_dir, ".eval"),
            };
            let req = EvalRequest {
                mode: match mode {
                    Mode::Knn => EvalMode::Knn,
                    Mode::Linear => EvalMode::Linear,
                    Mode::Both => EvalMode::Both,
                },
                checkpoints: checkpoint.clone(),
                labels: label.clone(),
                trials: *trials,
                out_dir: out_dir.clone(),
            };
            for e in pipeline::cmd_eval(&cfg, &req)? {
                println!(
                    "{} {}: balanced accuracy {:.4}, macro F1 {:.4}",
                    e.label, e.report.mode, e.report.balanced_accuracy, e.report.macro_f1
                );
            }
            println!("{}", out_dir.display());
        }
        Cmd::Plot { runs, label, dim } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
            let r = pipeline::cmd_plot(runs, label, *dim, &out)?;
            for l in &r.collapsed {
                println!("collapsed: {l}");
            }
            println!("{}", out.display());
        }
        Cmd::Embed {
            checkpoint,
            split,
            focus,
        } => {
            let (cfg, _) = load_config(cli)?;
            let split: Split = split.parse()?;
            let out = match &cli.out {
                Some(o) => o.clone(),
                None => sibling(&cfg.output_dir, ".embed"),
            };
            let r = pipeline::cmd_embed(&cfg, checkpoint, split, focus.as_deref(), &out)?;
            println!("{}", r.features_csv.display());
        }
        Cmd::SynthData {
            n,
            size,
            classes,
            split,
        } => {
            let out = required_out(cli, "synth-data")?;
            let spec = match classes {
                Some(k) => SynthSpec::new(*n, *k, *size, seed),
                None => SynthSpec::ham_like(*n, *size, seed),
            };
            let m = pipeline::cmd_synth(&out, &spec, &split.spec(seed))?;
            println!("{} images -> {}", m.entries.len(), out.join("manifest.csv").display());
        }
        Cmd::Split { manifest, split } => {
            let out = required_out(cli, "split")?;
            let m = pipeline::cmd_split(manifest, &split.spec(seed), &out)?;
            for (s, c) in m.split_counts() {
                println!("{}: {c}", s.as_str());
            }
        }
        Cmd::Ingest { cmd } => {
            let out = required_out(cli, "ingest")?;
            let m = match cmd {
                IngestCmd::Ham10000 {
                    metadata,
                    images,
                    split,
                } => {
                    let m = ingest_ham10000(metadata, images, &split.spec(seed))?;
                    m.save(&out)?;
                    m
                }
                IngestCmd::Cifar10 { dir, limit, split } => ingest_cifar10(dir, &out, *limit, &split.spec(seed))?,
            };
            println!("{} images", m.entries.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
