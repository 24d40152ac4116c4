//! Operations shared by the CLI and the service. Both front ends call these
//! functions with the same resolved inputs, so their artifacts match byte
//! for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use forgedit_core::editor::{
    self, AutoConfig, CandidateResult, Combination, EditContext, EditRequest, Sampling, SweepKind, SweepSpec,
    Thresholds, TraceStage,
};
use forgedit_core::finetune::{
    dreambooth_finetune, joint_finetune, DreamBoothConfig, FinetuneConfig, FinetuneMode,
};
use forgedit_core::image::encode_latent;
use forgedit_core::{
    DenoiserParams, ForgettingStrategy, NoiseSchedule, PromptEmbedding, Provenance, RgbImage, StageLayout,
    ToyTextEncoder,
};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext};
use crate::model::{trace_csv, Model, TextSpec};
use crate::store::{read_json, write_atomic, write_json, Staging};
use crate::{checkpoint, imageio, rawarray, Result};

pub const RUN_FORMAT: &str = "forgedit-run/1";

/// Files written into every run directory.
pub const RUN_FILES: [&str; 7] = [
    "config.json",
    "loss_trace.csv",
    "learned.ckpt",
    "original.ckpt",
    "embedding.bin",
    "source.png",
    "manifest.json",
];
pub const TEXT_TABLE_FILE: &str = "text_encoder.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Method {
    Joint(FinetuneConfig),
    Dreambooth(DreamBoothConfig),
}

/// Deterministic description of a run; no ids, paths or clocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format: String,
    pub image_id: String,
    pub source_prompt: String,
    pub method: Method,
    pub layout: StageLayout,
    pub schedule_steps: usize,
    pub text: TextSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: FinetuneMode,
    pub steps_run: usize,
    pub final_loss: f64,
    pub wall_time_secs: f64,
    pub files: Vec<String>,
}

/// Quantizes to 8 bits so the stored source image reloads exactly.
pub fn quantize(img: &RgbImage) -> RgbImage {
    RgbImage::from_u8(img.width(), img.height(), &img.to_u8()).expect("same size")
}

pub struct FinetuneInput<'a> {
    pub image: &'a RgbImage,
    pub image_id: &'a str,
    pub caption: &'a str,
    pub method: &'a Method,
}

/// Fine-tunes and writes the run directory `dest`.
pub fn finetune(
    model: &Model,
    input: &FinetuneInput<'_>,
    dest: &Path,
    run_id: &str,
    progress: &mut dyn FnMut(f64),
) -> Result<RunManifest> {
    let image = quantize(input.image);
    let latent = encode_latent(&image)?;
    let config = RunConfig {
        format: RUN_FORMAT.into(),
        image_id: input.image_id.into(),
        source_prompt: input.caption.into(),
        method: *input.method,
        layout: *model.params.layout(),
        schedule_steps: model.sched.steps(),
        text: model.info.text,
    };
    let st = Staging::new(dest)?;
    let start = Instant::now();
    let mut cb = |step: usize, max: usize, _loss: f64| progress(step as f64 / max as f64);
    let res = match input.method {
        Method::Joint(c) => {
            joint_finetune(&latent, input.caption, &model.encoder, &model.params, &model.sched, c, Some(&mut cb))?
        }
        Method::Dreambooth(c) => {
            dreambooth_finetune(&latent, input.caption, &model.encoder, &model.params, &model.sched, c, Some(&mut cb))?
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let mut files: Vec<String> = RUN_FILES.iter().map(|s| s.to_string()).collect();
    write_json(&st.file("config.json"), &config)?;
    write_atomic(&st.file("loss_trace.csv"), trace_csv(&res.loss_trace).as_bytes())?;
    checkpoint::save(&res.learned_params, &st.file("learned.ckpt"))?;
    checkpoint::save(&res.original_params, &st.file("original.ckpt"))?;
    rawarray::save(res.learned_embedding.data(), &st.file("embedding.bin"))?;
    imageio::write(&image, &st.file("source.png"))?;
    if let Some(table) = &res.text_table {
        rawarray::save(table, &st.file(TEXT_TABLE_FILE))?;
        files.push(TEXT_TABLE_FILE.into());
    }
    let manifest = RunManifest {
        run_id: run_id.into(),
        mode: res.mode,
        steps_run: res.steps_run,
        final_loss: res.loss_trace.last().copied().unwrap_or(f64::NAN),
        wall_time_secs: wall,
        files,
    };
    write_json(&st.file("manifest.json"), &manifest)?;
    st.publish()?;
    Ok(manifest)
}

/// A finished fine-tune loaded back from disk.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub learned: DenoiserParams,
    pub original: DenoiserParams,
    pub embedding: PromptEmbedding,
    pub encoder: ToyTextEncoder,
    pub sched: NoiseSchedule,
    pub source: RgbImage,
    pub loss_trace: Vec<f64>,
}

pub fn parse_trace(text: &str, origin: &Path) -> Result<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| format_err(origin, format!("bad trace line {l:?}")))
        })
        .collect()
}

impl Run {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: RunConfig = read_json(&dir.join("config.json"))?;
        if config.format != RUN_FORMAT {
            return Err(format_err(dir, format!("unsupported run format {:?}", config.format)));
        }
        let mut encoder = config.text.encoder()?;
        let table = dir.join(TEXT_TABLE_FILE);
        if table.exists() {
            encoder.set_table(rawarray::load(&table)?)?;
        }
        let trace_path = dir.join("loss_trace.csv");
        let trace = std::fs::read_to_string(&trace_path).at(&trace_path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: read_json(&dir.join("manifest.json"))?,
            learned: checkpoint::load(&dir.join("learned.ckpt"))?,
            original: checkpoint::load(&dir.join("original.ckpt"))?,
            embedding: PromptEmbedding::new(rawarray::load(&dir.join("embedding.bin"))?, Provenance::Learned)?,
            encoder,
            sched: NoiseSchedule::cosine(config.schedule_steps)?,
            source: imageio::read(&dir.join("source.png"))?,
            loss_trace: parse_trace(&trace, &trace_path)?,
            config,
        })
    }

    pub fn context(&self) -> EditContext<'_> {
        EditContext {
            learned_params: &self.learned,
            original_params: &self.original,
            learned_embedding: &self.embedding,
            encoder: &self.encoder,
            sched: &self.sched,
            source_image: &self.source,
        }
    }
}

pub fn edit(run: &Run, req: &EditRequest) -> Result<CandidateResult> {
    Ok(editor::edit(&run.context(), req)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub target_prompt: String,
    pub combination: SweepKind,
    /// Strategy spec string, stored in canonical form.
    pub strategy: String,
    pub sampling: Sampling,
    pub allow_any_pairing: bool,
}

/// One line of a sweep's `manifest.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub index: usize,
    pub file: String,
    pub kind: String,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub strategy: String,
    pub guidance_scale: f64,
    pub seed: u64,
    pub ddim_steps: usize,
    pub fidelity: f64,
    pub alignment: f64,
}

impl CandidateRow {
    fn new(index: usize, c: &CandidateResult) -> Self {
        let (kind, gamma, alpha, beta) = match c.request.combination {
            Combination::Subtraction { gamma } => ("subtraction", Some(gamma), None, None),
            Combination::Projection { alpha, beta } => ("projection", None, Some(alpha), Some(beta)),
        };
        Self {
            index,
            file: candidate_file(index),
            kind: kind.into(),
            gamma,
            alpha,
            beta,
            strategy: c.request.strategy.spec(),
            guidance_scale: c.request.sampling.guidance_scale,
            seed: c.request.sampling.seed,
            ddim_steps: c.request.sampling.ddim_steps,
            fidelity: c.fidelity,
            alignment: c.alignment,
        }
    }
}

pub fn candidate_file(index: usize) -> String {
    format!("cand_{index:03}.png")
}

/// Canonicalizes the strategy spec and checks the request before any work.
pub fn prepare_sweep(req: &SweepRequest) -> Result<SweepRequest> {
    let strategy = ForgettingStrategy::parse(&req.strategy)?;
    Ok(SweepRequest { strategy: strategy.spec(), ..req.clone() })
}

/// Runs the grid for the request and writes the sweep directory `dest`.
pub fn sweep(run: &Run, req: &SweepRequest, dest: &Path, progress: &mut dyn FnMut(f64)) -> Result<Vec<CandidateRow>> {
    let req = prepare_sweep(req)?;
    let strategy = ForgettingStrategy::parse(&req.strategy)?;
    let spec = SweepSpec::for_kind(req.combination, strategy.forgets(&run.learned));
    let st = Staging::new(dest)?;
    let mut cb = |i: usize, n: usize| progress(i as f64 / n as f64);
    let cands = editor::sweep(
        &run.context(),
        &req.target_prompt,
        &spec,
        &strategy,
        &req.sampling,
        req.allow_any_pairing,
        Some(&mut cb),
    )?;
    let rows: Vec<CandidateRow> = cands.iter().enumerate().map(|(i, c)| CandidateRow::new(i, c)).collect();
    for (row, c) in rows.iter().zip(&cands) {
        imageio::write(&c.image, &st.file(&row.file))?;
    }
    write_json(&st.file("request.json"), &req)?;
    write_atomic(&st.file("manifest.csv"), &rows_csv(&rows)?)?;
    st.publish()?;
    Ok(rows)
}

pub fn rows_csv(rows: &[CandidateRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| format_err(Path::new("manifest.csv"), e))?;
    }
    w.into_inner().map_err(|e| format_err(Path::new("manifest.csv"), e.error()))
}

pub fn read_rows(dir: &Path) -> Result<Vec<CandidateRow>> {
    let path = dir.join("manifest.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| format_err(&path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_err(&path, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoRequest {
    pub target_prompt: String,
    pub thresholds: Thresholds,
    pub strategies: Vec<String>,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub strategy: String,
    pub combination: Combination,
    pub fidelity: f64,
    pub alignment: f64,
}

/// The decision record of one auto workflow, stored as `trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoTrace {
    pub target_prompt: String,
    pub thresholds: Thresholds,
    pub cleared: bool,
    pub chosen: Chosen,
    pub stages: Vec<TraceStage>,
}

pub fn prepare_auto(req: &AutoRequest) -> Result<(AutoRequest, AutoConfig)> {
    let strategies =
        req.strategies.iter().map(|s| ForgettingStrategy::parse(s)).collect::<forgedit_core::Result<Vec<_>>>()?;
    let canonical = AutoRequest { strategies: strategies.iter().map(|s| s.spec()).collect(), ..req.clone() };
    Ok((canonical, AutoConfig { strategies, sampling: req.sampling }))
}

/// Runs the threshold workflow and writes `dest` with the trace and the
/// chosen image.
pub fn auto(run: &Run, req: &AutoRequest, dest: &Path, progress: &mut dyn FnMut(f64)) -> Result<AutoTrace> {
    let (req, cfg) = prepare_auto(req)?;
    let st = Staging::new(dest)?;
    let mut cb = |i: usize, n: usize| progress(i as f64 / n as f64);
    let out = editor::auto_workflow(&run.context(), &req.target_prompt, &req.thresholds, &cfg, Some(&mut cb))?;
    let trace = AutoTrace {
        target_prompt: req.target_prompt.clone(),
        thresholds: req.thresholds,
        cleared: out.cleared,
        chosen: Chosen {
            strategy: out.candidate.request.strategy.spec(),
            combination: out.candidate.request.combination,
            fidelity: out.candidate.fidelity,
            alignment: out.candidate.alignment,
        },
        stages: out.trace,
    };
    write_json(&st.file("request.json"), &req)?;
    write_json(&st.file("trace.json"), &trace)?;
    imageio::write(&out.candidate.image, &st.file("best.png"))?;
    st.publish()?;
    Ok(trace)
}
