//! The pretrained base model: denoiser checkpoint, text encoder settings
//! and noise schedule, stored together in one directory.

use std::path::Path;

use forgedit_core::finetune::{pretrain, PretrainConfig, Progress};
use forgedit_core::fixtures::{encoded_corpus, CORPUS_SEED, TEXT_SEED};
use forgedit_core::{DenoiserParams, NoiseSchedule, StageLayout, ToyTextEncoder};
use serde::{Deserialize, Serialize};

use crate::store::{read_json, write_atomic, write_json, Staging};
use crate::{checkpoint, Error, Result};

pub const MODEL_FORMAT: &str = "forgedit-model/1";
const CHECKPOINT: &str = "base.ckpt";
const INFO: &str = "model.json";
const TRACE: &str = "pretrain_trace.csv";

/// Everything needed to rebuild the toy text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpec {
    pub tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl TextSpec {
    pub fn for_layout(layout: &StageLayout) -> Self {
        Self { tokens: layout.tokens, dim: layout.embed_dim, seed: TEXT_SEED }
    }

    pub fn encoder(&self) -> Result<ToyTextEncoder> {
        Ok(ToyTextEncoder::new(self.tokens, self.dim, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format: String,
    pub layout: StageLayout,
    pub schedule_steps: usize,
    pub text: TextSpec,
    pub corpus_seed: u64,
    pub pretrain: PretrainConfig,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub info: ModelInfo,
    pub params: DenoiserParams,
    pub encoder: ToyTextEncoder,
    pub sched: NoiseSchedule,
}

/// `step,loss` lines with a header.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

impl Model {
    /// Trains the base denoiser on the bundled corpus.
    pub fn pretrain(
        layout: StageLayout,
        schedule_steps: usize,
        cfg: &PretrainConfig,
        progress: Option<Progress<'_>>,
    ) -> Result<(Self, Vec<f64>)> {
        layout.validate()?;
        let sched = NoiseSchedule::cosine(schedule_steps)?;
        let text = TextSpec::for_layout(&layout);
        let encoder = text.encoder()?;
        let corpus = encoded_corpus(&encoder);
        let uncond = encoder.encode_prompt("");
        let (params, trace) = pretrain(&corpus, &uncond, layout, &sched, cfg, progress)?;
        let info = ModelInfo {
            format: MODEL_FORMAT.into(),
            layout,
            schedule_steps,
            text,
            corpus_seed: CORPUS_SEED,
            pretrain: *cfg,
            final_loss: trace.last().copied().unwrap_or(f64::NAN),
        };
        Ok((Self { info, params, encoder, sched }, trace))
    }

    pub fn save(&self, dir: &Path, trace: &[f64]) -> Result<()> {
        let st = Staging::new(dir)?;
        checkpoint::save(&self.params, &st.file(CHECKPOINT))?;
        write_json(&st.file(INFO), &self.info)?;
        write_atomic(&st.file(TRACE), trace_csv(trace).as_bytes())?;
        st.publish()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(INFO).exists() {
            return Err(Error::NotFound(format!(
                "no model at {}; create one with `forgedit pretrain`",
                dir.display()
            )));
        }
        let info: ModelInfo = read_json(&dir.join(INFO))?;
        if info.format != MODEL_FORMAT {
            return Err(Error::Config(format!("unsupported model format {:?}", info.format)));
        }
        let params = checkpoint::load(&dir.join(CHECKPOINT))?;
        if *params.layout() != info.layout {
            return Err(Error::Config("checkpoint layout differs from model.json".into()));
        }
        Ok(Self { encoder: info.text.encoder()?, sched: NoiseSchedule::cosine(info.schedule_steps)?, params, info })
    }
}
