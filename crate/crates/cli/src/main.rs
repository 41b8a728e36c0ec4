//! `castnet` command line: build panels, train, search, evaluate and explain.
//!
//! Every command writes into a fresh run directory under the output root and
//! finishes with a `manifest.json` holding the configuration fingerprint and
//! a SHA-256 per artifact.

mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use castnet::artifact::{Checkpoint, RunIdentity};
use castnet::data::panel::ArchiveExtras;
use castnet::data::{make_samples, run_ingest, IngestConfig, PanelDataset, SplitSpec};
use castnet::eval::{baseline_metrics, export_attention, export_feature_importance, BaselineMetrics, MetricsReport};
use castnet::synth::{generate, score_recovery, GroundTruth, SynthSpec};
use castnet::training::{evaluate, grid_search, train, ConfigSpace, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use run_dir::{config_fingerprint, RunDir, OUT_ENV};

const PANEL_FILE: &str = "panel.cpanel";

#[derive(Parser)]
#[command(name = "castnet", version, about = "Community-attention forecasting of weekly overdose counts")]
struct Cli {
    /// Output root; each invocation creates its own run directory inside it.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a weekly panel archive from incident exports.
    Ingest {
        /// Ingestion config (JSON); relative paths resolve against its directory.
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic panel with planted communities.
    Synth {
        /// Synthetic spec (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every configuration of a search space.
    Grid {
        #[arg(long)]
        panel: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint and the simple baselines on its panel.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        panel: PathBuf,
    },
    /// Export memberships, contributions and feature importance.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        /// Ground truth from `synth`; adds a recovery score.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// Flags shared by `train` and `grid`; they override the config file.
#[derive(Args)]
struct Overrides {
    /// Run config (JSON with optional `train`, `split` and, for grid, `space`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of communities; a comma-separated list sweeps K in `grid`.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Orthogonality weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Group Lasso weight.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    no_gl: bool,
    #[arg(long)]
    no_ortho: bool,
    #[arg(long)]
    no_sa: bool,
    #[arg(long)]
    no_ta: bool,
    #[arg(long)]
    no_ca: bool,
    #[arg(long)]
    no_sc: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    split: SplitSpec,
    space: ConfigSpace,
}

impl Overrides {
    fn resolve(&self, sweep: bool) -> Result<RunConfig> {
        let mut rc: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        let t = &mut rc.train;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        match (self.k.as_slice(), sweep) {
            ([], _) => {}
            ([k], false) => t.communities = *k,
            (_, false) => bail!("train takes a single --k value"),
            (ks, true) => rc.space.communities = ks.to_vec(),
        }
        if let Some(w) = self.window {
            t.window = w;
            rc.space.windows.clear();
        }
        if let Some(l) = self.lambda {
            t.lambda = l;
            rc.space.lambdas.clear();
        }
        if let Some(e) = self.eta {
            t.eta = e;
            rc.space.etas.clear();
        }
        let a = &mut t.ablation;
        a.no_gl |= self.no_gl;
        a.no_ortho |= self.no_ortho;
        a.no_sa |= self.no_sa;
        a.no_ta |= self.no_ta;
        a.no_ca |= self.no_ca;
        a.no_sc |= self.no_sc;
        rc.split.validate()?;
        rc.train.validate()?;
        if !sweep && rc.space != ConfigSpace::default() {
            bail!("train does not take a search space; use grid");
        }
        Ok(rc)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn load_panel(path: &Path) -> Result<(PanelDataset, String)> {
    let (panel, header) = PanelDataset::load(path).with_context(|| format!("cannot load panel {}", path.display()))?;
    Ok((panel, header.fingerprint))
}

fn load_checkpoint(path: &Path, panel_fingerprint: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    ckpt.verify_panel(panel_fingerprint)
        .context("checkpoint was trained on a different panel")?;
    Ok(ckpt)
}

fn ingest(out: &Path, config_path: &Path) -> Result<PathBuf> {
    let config = IngestConfig::load(config_path).with_context(|| format!("cannot load {}", config_path.display()))?;
    let fp = config_fingerprint("ingest", &config)?;
    let (panel, summary) = run_ingest(&config)?;
    let mut run = RunDir::create(out, "ingest", &fp)?;
    let mut extras = ArchiveExtras::default();
    extras.metadata.insert("config_fingerprint".into(), fp.clone().into());
    let panel_fp = panel.save(&run.file(PANEL_FILE), extras)?;
    run.record(PANEL_FILE);
    run.write_json("ingest_config.json", &config)?;
    run.write_json(
        "ingest_report.json",
        &Stamped {
            config_fingerprint: &fp,
            panel_fingerprint: &panel_fp,
            body: &summary,
        },
    )?;
    run.finish(Some(&panel_fp))
}

fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>, window: Option<usize>) -> Result<PathBuf> {
    let mut spec: SynthSpec = match config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(w) = window {
        spec.window = w;
    }
    let fp = config_fingerprint("synth", &spec)?;
    let (panel, truth) = generate(&spec)?;
    let mut run = RunDir::create(out, "synth", &fp)?;
    let mut extras = ArchiveExtras::default();
    extras.metadata.insert("config_fingerprint".into(), fp.clone().into());
    let panel_fp = panel.save(&run.file(PANEL_FILE), extras)?;
    run.record(PANEL_FILE);
    run.write_json("synth_spec.json", &spec)?;
    run.write_json(
        "ground_truth.json",
        &Stamped {
            config_fingerprint: &fp,
            panel_fingerprint: &panel_fp,
            body: &truth,
        },
    )?;
    run.finish(Some(&panel_fp))
}

/// A report body together with the fingerprints it belongs to.
#[derive(Serialize)]
struct Stamped<'a, T> {
    config_fingerprint: &'a str,
    panel_fingerprint: &'a str,
    #[serde(flatten)]
    body: T,
}

fn train_cmd(out: &Path, panel_path: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let rc = overrides.resolve(false)?;
    let (panel, panel_fp) = load_panel(panel_path)?;
    let identity = RunIdentity {
        panel_fingerprint: panel_fp.clone(),
        split: rc.split,
        train: rc.train.clone(),
    };
    let fp = identity.fingerprint()?;
    let splits = make_samples(&panel, rc.train.window, rc.train.lead, rc.split)?;
    let outcome = train(&splits, &rc.train)?;
    let mut run = RunDir::create(out, "train", &fp)?;
    Checkpoint::new(identity.clone(), &outcome.model)?.save(&run.file("checkpoint.json"))?;
    run.record("checkpoint.json");
    run.write_json("run_config.json", &identity)?;
    run.write_json(
        "report.json",
        &Stamped {
            config_fingerprint: &fp,
            panel_fingerprint: &panel_fp,
            body: &outcome.report,
        },
    )?;
    run.write_text("loss_curve.csv", &outcome.report.loss_curve_csv())?;
    run.finish(Some(&panel_fp))
}

fn grid_cmd(out: &Path, panel_path: &Path, threads: usize, overrides: &Overrides) -> Result<PathBuf> {
    let rc = overrides.resolve(true)?;
    let (panel, panel_fp) = load_panel(panel_path)?;
    let fp = config_fingerprint("grid", &(&panel_fp, &rc))?;
    let report = grid_search(&panel, rc.split, &rc.train, &rc.space, threads)?;
    let mut run = RunDir::create(out, "grid", &fp)?;
    run.write_json("run_config.json", &rc)?;
    run.write_json(
        "grid.json",
        &Stamped {
            config_fingerprint: &fp,
            panel_fingerprint: &panel_fp,
            body: &report,
        },
    )?;
    run.write_text("k_sweep.csv", &report.k_sweep_csv())?;
    run.finish(Some(&panel_fp))
}

#[derive(Serialize)]
struct SplitEval {
    castnet: MetricsReport,
    baselines: BaselineMetrics,
}

#[derive(Serialize)]
struct EvalReport {
    val: SplitEval,
    test: Option<SplitEval>,
}

fn eval_cmd(out: &Path, checkpoint: &Path, panel_path: &Path) -> Result<PathBuf> {
    let (panel, panel_fp) = load_panel(panel_path)?;
    let ckpt = load_checkpoint(checkpoint, &panel_fp)?;
    let id = &ckpt.identity;
    let model = ckpt.model()?;
    let splits = make_samples(&panel, id.train.window, id.train.lead, id.split)?;
    let score = |samples: &[castnet::data::SampleRef]| -> Result<SplitEval> {
        Ok(SplitEval {
            castnet: evaluate(&model, &splits, samples)?,
            baselines: baseline_metrics(&splits, samples)?,
        })
    };
    let report = EvalReport {
        val: score(&splits.val)?,
        test: if splits.test.is_empty() { None } else { Some(score(&splits.test)?) },
    };
    let mut run = RunDir::create(out, "eval", &ckpt.config_fingerprint)?;
    run.write_json(
        "eval.json",
        &Stamped {
            config_fingerprint: &ckpt.config_fingerprint,
            panel_fingerprint: &panel_fp,
            body: &report,
        },
    )?;
    run.finish(Some(&panel_fp))
}

#[derive(Serialize)]
struct ExplainSummary {
    /// Samples whose attention was averaged (validation and test).
    samples: usize,
    dynamic_importance: Vec<f64>,
    recovery: Option<f64>,
}

#[derive(Deserialize)]
struct TruthFile {
    panel_fingerprint: String,
    #[serde(flatten)]
    truth: GroundTruth,
}

fn explain_cmd(out: &Path, checkpoint: &Path, panel_path: &Path, truth: Option<&Path>) -> Result<PathBuf> {
    let (panel, panel_fp) = load_panel(panel_path)?;
    let ckpt = load_checkpoint(checkpoint, &panel_fp)?;
    let id = &ckpt.identity;
    let model = ckpt.model()?;
    let splits = make_samples(&panel, id.train.window, id.train.lead, id.split)?;
    let samples: Vec<_> = splits.val.iter().chain(&splits.test).copied().collect();
    let (membership, contribution) = export_attention(&model, &splits, &samples)?;
    let importance = export_feature_importance(&model, &panel.dynamic_names, &panel.static_names)?;
    let recovery = match truth {
        None => None,
        Some(p) => {
            let file: TruthFile = read_json(p)?;
            if file.panel_fingerprint != panel_fp {
                bail!(
                    "ground truth belongs to panel {}, not {}",
                    file.panel_fingerprint,
                    panel_fp
                );
            }
            Some(score_recovery(&membership, &file.truth)?)
        }
    };
    let summary = ExplainSummary {
        samples: samples.len(),
        dynamic_importance: importance.dynamic_importance(),
        recovery,
    };
    let mut run = RunDir::create(out, "explain", &ckpt.config_fingerprint)?;
    run.write_text("memberships.csv", &membership.to_csv(&panel.location_names))?;
    run.write_text("contributions.csv", &contribution.to_csv(&panel.location_names))?;
    run.write_text("feature_importance.csv", &importance.to_csv())?;
    run.write_json(
        "explain.json",
        &Stamped {
            config_fingerprint: &ckpt.config_fingerprint,
            panel_fingerprint: &panel_fp,
            body: &summary,
        },
    )?;
    run.finish(Some(&panel_fp))
}

fn run(cli: Cli) -> Result<PathBuf> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Ingest { config } => ingest(out, config),
        Command::Synth { config, seed, window } => synth(out, config.as_deref(), *seed, *window),
        Command::Train { panel, overrides } => train_cmd(out, panel, overrides),
        Command::Grid {
            panel,
            threads,
            overrides,
        } => grid_cmd(out, panel, *threads, overrides),
        Command::Eval { checkpoint, panel } => eval_cmd(out, checkpoint, panel),
        Command::Explain {
            checkpoint,
            panel,
            truth,
        } => explain_cmd(out, checkpoint, panel, truth.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
