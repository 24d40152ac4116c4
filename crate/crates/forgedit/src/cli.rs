//! The `forgedit` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use forgedit_core::editor::{Combination, EditRequest, SweepKind};
use forgedit_core::forgetting::{strategy_report, BUILTIN_NAMES};
use forgedit_core::{DenoiserParams, ForgettingStrategy, Stage};

use crate::config::{
    resolve_method, AutoOpts, CaptionOpts, DreamboothOpts, FinetuneOpts, LayoutName, PretrainOpts, SamplingOpts,
    Settings, DEFAULT_SCHEDULE_STEPS,
};
use crate::pipeline::{self, AutoRequest, FinetuneInput, SweepRequest};
use crate::store::{Kind, Store};
use crate::{imageio, Error, Model, Run};

#[derive(Debug, Parser)]
#[command(name = "forgedit", version, about = "Text-guided editing of small images on a toy diffusion model")]
pub struct Cli {
    /// TOML settings file shared with the service.
    #[arg(long, global = true, env = "FORGEDIT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Storage root for runs, sweeps and the default model.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Model directory written by `pretrain`.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CombinationArg {
    Subtraction,
    Projection,
}

impl From<CombinationArg> for SweepKind {
    fn from(c: CombinationArg) -> Self {
        match c {
            CombinationArg::Subtraction => SweepKind::Subtraction,
            CombinationArg::Projection => SweepKind::Projection,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains the base denoiser on the bundled corpus.
    Pretrain {
        /// Model directory to create (default: the configured model).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Fine-tunes the model on one image and writes a run directory.
    Finetune {
        #[arg(long)]
        image: PathBuf,
        /// Key for the caption table (default: the image file stem).
        #[arg(long)]
        image_id: Option<String>,
        #[command(flatten)]
        captions: CaptionOpts,
        /// Run directory to create (default: `<data-dir>/runs/<next id>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        finetune: FinetuneOpts,
        #[command(flatten)]
        dreambooth: DreamboothOpts,
    },
    /// Produces one edited image.
    Edit {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, value_enum)]
        combination: CombinationArg,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value = "none")]
        strategy: String,
        /// Allows a forgetting strategy together with projection.
        #[arg(long)]
        allow_any_pairing: bool,
        #[command(flatten)]
        sampling: SamplingOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edits over the full hyperparameter grid of a combination.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, value_enum)]
        combination: CombinationArg,
        #[arg(long, default_value = "none")]
        strategy: String,
        #[arg(long)]
        allow_any_pairing: bool,
        #[command(flatten)]
        sampling: SamplingOpts,
        /// Sweep directory to create (default: `<data-dir>/sweeps/<next id>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweeps without forgetting, then with each strategy, until a
    /// candidate clears both thresholds.
    Auto {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        target: String,
        #[command(flatten)]
        auto: AutoOpts,
        #[command(flatten)]
        sampling: SamplingOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lists the builtin forgetting strategies with path counts.
    Strategies {
        #[arg(long, value_enum, default_value = "default")]
        layout: LayoutName,
    },
    /// Summarizes a run: loss trace and parameter drift per strategy.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Method(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Method(e)
    }
}

impl From<forgedit_core::Error> for Failure {
    fn from(e: forgedit_core::Error) -> Self {
        Failure::Method(e.into())
    }
}

/// Formats `key=value` pairs on one line, quoting values with spaces.
pub fn summary_line(pairs: &[(&str, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| {
            if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
                format!("{k}={v:?}")
            } else {
                format!("{k}={v}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("For more information, try '--help'.");
            2
        }
        Err(Failure::Method(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut s = Settings::load_optional(cli.config.as_deref())?;
    if cli.data_dir.is_some() {
        s.data_dir.clone_from(&cli.data_dir);
    }
    if cli.model.is_some() {
        s.model.clone_from(&cli.model);
    }
    Ok(s)
}

fn allocate(settings: &Settings, kind: Kind) -> Result<PathBuf, Failure> {
    let store = Store::open(settings.data_dir())?;
    Ok(store.path(kind, &store.allocate(kind))?)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn step_logger(what: &'static str) -> impl FnMut(f64) {
    let mut last = 0.0;
    move |f: f64| {
        if f >= last + 0.1 || f >= 1.0 && last < 1.0 {
            last = f;
            log::info!("{what}: {:.0}%", f * 100.0);
        }
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    let settings = settings(&cli)?;
    match cli.command {
        Command::Pretrain { out, opts } => {
            let opts = opts.overlay(&settings.pretrain);
            let cfg = opts.config();
            let layout = opts.layout.unwrap_or_default();
            let out = out.unwrap_or_else(|| settings.model_dir());
            let start = Instant::now();
            let mut cb = |step: usize, total: usize, loss: f64| {
                if step.is_multiple_of(100) || step == total {
                    log::info!("pretrain step {step}/{total} loss {loss:.5}");
                }
            };
            let (model, trace) =
                Model::pretrain(layout.layout(), opts.schedule_steps.unwrap_or(DEFAULT_SCHEDULE_STEPS), &cfg, Some(&mut cb))?;
            model.save(&out, &trace)?;
            Ok(summary_line(&[
                ("command", "pretrain".into()),
                ("out", out.display().to_string()),
                ("steps", trace.len().to_string()),
                ("final_loss", format!("{:.6}", model.info.final_loss)),
                ("wall_time", format!("{:.1}", start.elapsed().as_secs_f64())),
            ]))
        }
        Command::Finetune { image, image_id, captions, out, finetune, dreambooth } => {
            let model = Model::load(&settings.model_dir())?;
            let img = imageio::read(&image)?;
            let image_id = image_id.unwrap_or_else(|| {
                image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let (caption, _) = captions.overlay(&settings.captions).resolve(&image_id, &img)?;
            let method =
                resolve_method(&finetune.overlay(&settings.finetune), &dreambooth.overlay(&settings.dreambooth))?;
            let dest = match out {
                Some(p) => p,
                None => allocate(&settings, Kind::Run)?,
            };
            let run_id = name_of(&dest);
            let input = FinetuneInput { image: &img, image_id: &image_id, caption: &caption, method: &method };
            let m = pipeline::finetune(&model, &input, &dest, &run_id, &mut step_logger("finetune"))?;
            Ok(summary_line(&[
                ("command", "finetune".into()),
                ("run", dest.display().to_string()),
                ("mode", format!("{:?}", m.mode).to_lowercase()),
                ("steps", m.steps_run.to_string()),
                ("final_loss", format!("{:.6}", m.final_loss)),
                ("wall_time", format!("{:.1}", m.wall_time_secs)),
                ("caption", caption),
            ]))
        }
        Command::Edit { run, target, combination, gamma, alpha, beta, strategy, allow_any_pairing, sampling, out } => {
            let combination = match combination {
                CombinationArg::Subtraction => match (gamma, alpha, beta) {
                    (Some(gamma), None, None) => Combination::Subtraction { gamma },
                    _ => return Err(Failure::Usage("subtraction takes --gamma only".into())),
                },
                CombinationArg::Projection => match (gamma, alpha, beta) {
                    (None, Some(alpha), Some(beta)) => Combination::Projection { alpha, beta },
                    _ => return Err(Failure::Usage("projection takes --alpha and --beta".into())),
                },
            };
            let run = Run::load(&run)?;
            let req = EditRequest {
                target_prompt: target,
                combination,
                strategy: ForgettingStrategy::parse(&strategy)?,
                sampling: sampling.overlay(&settings.sampling).resolve(),
                allow_any_pairing,
            };
            let c = pipeline::edit(&run, &req)?;
            imageio::write(&c.image, &out)?;
            Ok(summary_line(&[
                ("command", "edit".into()),
                ("out", out.display().to_string()),
                ("combination", combination.label()),
                ("strategy", req.strategy.spec()),
                ("fidelity", format!("{:.6}", c.fidelity)),
                ("alignment", format!("{:.6}", c.alignment)),
            ]))
        }
        Command::Sweep { run, target, combination, strategy, allow_any_pairing, sampling, out } => {
            let run = Run::load(&run)?;
            let req = SweepRequest {
                target_prompt: target,
                combination: combination.into(),
                strategy,
                sampling: sampling.overlay(&settings.sampling).resolve(),
                allow_any_pairing,
            };
            let dest = match out {
                Some(p) => p,
                None => allocate(&settings, Kind::Sweep)?,
            };
            let rows = pipeline::sweep(&run, &req, &dest, &mut step_logger("sweep"))?;
            let best = rows.iter().max_by(|a, b| a.alignment.total_cmp(&b.alignment)).expect("non-empty grid");
            Ok(summary_line(&[
                ("command", "sweep".into()),
                ("out", dest.display().to_string()),
                ("candidates", rows.len().to_string()),
                ("best_alignment_file", best.file.clone()),
                ("best_alignment", format!("{:.6}", best.alignment)),
            ]))
        }
        Command::Auto { run, target, auto, sampling, out } => {
            let run = Run::load(&run)?;
            let opts = auto.overlay(&settings.auto);
            let req = AutoRequest {
                target_prompt: target,
                thresholds: opts.thresholds(),
                strategies: opts.strategies(),
                sampling: sampling.overlay(&settings.sampling).resolve(),
            };
            let dest = match out {
                Some(p) => p,
                None => allocate(&settings, Kind::Auto)?,
            };
            let trace = pipeline::auto(&run, &req, &dest, &mut step_logger("auto"))?;
            Ok(summary_line(&[
                ("command", "auto".into()),
                ("out", dest.display().to_string()),
                ("stages", trace.stages.len().to_string()),
                ("cleared", trace.cleared.to_string()),
                ("strategy", trace.chosen.strategy.clone()),
                ("combination", trace.chosen.combination.label()),
                ("fidelity", format!("{:.6}", trace.chosen.fidelity)),
                ("alignment", format!("{:.6}", trace.chosen.alignment)),
            ]))
        }
        Command::Strategies { layout } => {
            let params = DenoiserParams::init(layout.layout(), 0)?;
            let stages: Vec<String> = Stage::all().iter().map(|s| s.prefix()).collect();
            let mut header = format!("{:<26} {:>9} {:>5}", "strategy", "forgotten", "kept");
            for s in &stages {
                header.push_str(&format!(" {:>10}", s.trim_end_matches('.')));
            }
            println!("{header}");
            for name in BUILTIN_NAMES {
                let strategy = ForgettingStrategy::builtin(name).expect("builtin");
                let r = strategy_report(&params, &params, &strategy)?;
                let mut line = format!("{:<26} {:>9} {:>5}", name, r.forgotten, r.kept);
                for s in &stages {
                    let n = r.stages.iter().find(|(k, _)| k == s).map_or(0, |(_, c)| c.forgotten);
                    line.push_str(&format!(" {n:>10}"));
                }
                println!("{line}");
            }
            Ok(summary_line(&[
                ("command", "strategies".into()),
                ("layout", format!("{layout:?}").to_lowercase()),
                ("strategies", BUILTIN_NAMES.len().to_string()),
                ("paths", params.entries().len().to_string()),
            ]))
        }
        Command::Report { run } => {
            let r = Run::load(&run)?;
            let min = r.loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
            println!("source prompt: {}", r.config.source_prompt);
            println!("loss: first {:.6}  min {:.6}  final {:.6}", r.loss_trace[0], min, r.manifest.final_loss);
            println!("{:<26} {:>9} {:>5} {:>14}", "strategy", "forgotten", "kept", "max_drift");
            for name in BUILTIN_NAMES {
                let strategy = ForgettingStrategy::builtin(name).expect("builtin");
                let rep = strategy_report(&r.learned, &r.original, &strategy)?;
                let mut drift: f64 = 0.0;
                for (path, w) in r.learned.entries() {
                    if strategy.forget.matches(path) {
                        drift = drift.max(w.max_abs_diff(r.original.get(path).expect("same structure"))?);
                    }
                }
                println!("{:<26} {:>9} {:>5} {:>14.6e}", name, rep.forgotten, rep.kept, drift);
            }
            Ok(summary_line(&[
                ("command", "report".into()),
                ("run", run.display().to_string()),
                ("mode", format!("{:?}", r.manifest.mode).to_lowercase()),
                ("steps", r.manifest.steps_run.to_string()),
                ("final_loss", format!("{:.6}", r.manifest.final_loss)),
                ("min_loss", format!("{min:.6}")),
            ]))
        }
    }
}
