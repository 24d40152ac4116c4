//! Joint embedding/UNet fine-tuning on a single image, the DreamBooth-style
//! variants, and corpus pretraining of the base denoiser.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{batch_loss_and_grads, TrainSample};
use crate::diffusion::standard_normal;
use crate::optim::{Adam, AdamConfig};
use crate::{Array, DenoiserParams, Error, LatentImage, NoiseSchedule, PromptEmbedding, Provenance, Result, ToyTextEncoder};

/// Hyperparameters of the joint fine-tune.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneConfig {
    pub lr_embedding: f64,
    pub lr_unet: f64,
    pub batch_repeat: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub loss_threshold: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_embedding: 1e-3,
            lr_unet: 6e-5,
            batch_repeat: 10,
            min_steps: 35,
            max_steps: 40,
            loss_threshold: 0.03,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Calibrated for the toy model: reaches the overfit threshold on the
    /// bundled fixture well inside the step budget.
    pub fn desk() -> Self {
        Self {
            lr_embedding: DESK_LR_EMBEDDING,
            lr_unet: DESK_LR_UNET,
            min_steps: DESK_MIN_STEPS,
            max_steps: DESK_MAX_STEPS,
            loss_threshold: DESK_LOSS_THRESHOLD,
            ..Self::default()
        }
    }

    /// Learning rates may be zero (that freezes a group) but not negative.
    pub fn validate(&self) -> Result<()> {
        if self.min_steps > self.max_steps || self.max_steps == 0 {
            return Err(Error::InvalidArgument("need 1 <= max_steps and min_steps <= max_steps".into()));
        }
        if !(self.lr_embedding >= 0.0 && self.lr_unet >= 0.0) || !self.lr_embedding.is_finite() || !self.lr_unet.is_finite() {
            return Err(Error::InvalidArgument("learning rates must be finite and non-negative".into()));
        }
        if self.batch_repeat == 0 {
            return Err(Error::InvalidArgument("batch_repeat must be positive".into()));
        }
        if !self.loss_threshold.is_finite() {
            return Err(Error::InvalidArgument("loss_threshold must be finite".into()));
        }
        Ok(())
    }
}

pub const DESK_LR_EMBEDDING: f64 = 1e-3;
pub const DESK_LR_UNET: f64 = 6e-5;
pub const DESK_MIN_STEPS: usize = 150;
pub const DESK_MAX_STEPS: usize = 400;
pub const DESK_LOSS_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DreamBoothVariant {
    UnetOnly,
    UnetAndText,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DreamBoothConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub variant: DreamBoothVariant,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DreamBoothConfig {
    fn default() -> Self {
        Self { lr: 5e-6, batch: 4, steps: 100, variant: DreamBoothVariant::UnetOnly, adam: AdamConfig::default(), seed: 0 }
    }
}

impl DreamBoothConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("steps and batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum FinetuneMode {
    Joint,
    DreamBoothUnet,
    DreamBoothText,
}

/// Outcome of a fine-tune. `wall_time` is left at zero here; callers that
/// own a clock fill it in.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub mode: FinetuneMode,
    pub learned_embedding: PromptEmbedding,
    pub learned_params: DenoiserParams,
    pub original_params: DenoiserParams,
    pub loss_trace: Vec<f64>,
    pub steps_run: usize,
    pub wall_time: f64,
    /// Fine-tuned text table (`unet-and-text` only).
    pub text_table: Option<Array>,
}

/// Per-step progress callback: `(step, max_steps, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize, f64);

enum EmbeddingGroup {
    Fixed(Vec<f64>),
    Learned { data: Vec<f64>, lr: f64, adam: Adam },
    Table { encoder: ToyTextEncoder, ids: Vec<usize>, positions: Vec<f64>, lr: f64, adam: Adam },
}

impl EmbeddingGroup {
    fn current(&self) -> Vec<f64> {
        match self {
            EmbeddingGroup::Fixed(d) | EmbeddingGroup::Learned { data: d, .. } => d.clone(),
            EmbeddingGroup::Table { encoder, ids, positions, .. } => {
                let c = encoder.dim();
                let table = encoder.table().data();
                let mut out = positions.clone();
                for (n, &id) in ids.iter().enumerate() {
                    for k in 0..c {
                        out[n * c + k] += table[id * c + k];
                    }
                }
                out
            }
        }
    }

    fn update(&mut self, grad: &[f64]) {
        match self {
            EmbeddingGroup::Fixed(_) => {}
            EmbeddingGroup::Learned { data, lr, adam } => adam.step(data, grad, *lr),
            EmbeddingGroup::Table { encoder, ids, lr, adam, .. } => {
                let c = encoder.dim();
                let mut table = encoder.table().clone();
                let mut g = vec![0.0; table.len()];
                for (n, &id) in ids.iter().enumerate() {
                    for k in 0..c {
                        g[id * c + k] += grad[n * c + k];
                    }
                }
                adam.step(table.data_mut(), &g, *lr);
                encoder.set_table(table).expect("same shape");
            }
        }
    }
}

struct LoopSpec {
    trainable: BTreeSet<String>,
    lr_unet: f64,
    adam: AdamConfig,
    batch: usize,
    min_steps: usize,
    max_steps: usize,
    threshold: Option<f64>,
    seed: u64,
    embedding: EmbeddingGroup,
}

struct LoopOutput {
    params: DenoiserParams,
    embedding: EmbeddingGroup,
    trace: Vec<f64>,
}

fn train_loop(
    image: &LatentImage,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    mut spec: LoopSpec,
    progress: Option<Progress<'_>>,
) -> Result<LoopOutput> {
    let layout = params.layout();
    if image.shape() != layout.input_shape() {
        return Err(Error::ShapeMismatch { expected: layout.input_shape().to_vec(), got: image.shape().to_vec() });
    }
    let mut progress = progress;
    let mut params = params.clone();
    let mut optims: BTreeMap<String, Adam> = spec
        .trainable
        .iter()
        .map(|p| (p.clone(), Adam::new(params.leaf(p).len(), spec.adam)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps_t = sched.steps();
    let mut trace = Vec::new();
    for step in 1..=spec.max_steps {
        let emb = spec.embedding.current();
        let batch: Vec<TrainSample<'_>> = (0..spec.batch)
            .map(|_| {
                let t = rng.random_range(1..=steps_t);
                let eps = standard_normal(&mut rng, image.shape());
                TrainSample { x0: image.array(), t, eps, embedding: &emb }
            })
            .collect();
        let (loss, grads) = batch_loss_and_grads(&params, sched, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        trace.push(loss);
        for (path, adam) in optims.iter_mut() {
            let g = grads.params.leaf(path);
            let w = params.get_mut(path).expect("trainable path exists");
            adam.step(w.data_mut(), g, spec.lr_unet);
        }
        let mut d_emb = vec![0.0; emb.len()];
        for d in &grads.embeddings {
            for (a, b) in d_emb.iter_mut().zip(d) {
                *a += b;
            }
        }
        spec.embedding.update(&d_emb);
        if let Some(cb) = progress.as_mut() {
            cb(step, spec.max_steps, loss);
        }
        if let Some(th) = spec.threshold {
            if step >= spec.min_steps && loss < th {
                break;
            }
        }
    }
    Ok(LoopOutput { params, embedding: spec.embedding, trace })
}

fn embedding_from(layout_shape: [usize; 3], data: Vec<f64>, provenance: Provenance) -> Result<PromptEmbedding> {
    PromptEmbedding::new(Array::from_vec(&layout_shape, data)?, provenance)
}

fn check_prompt_fits(encoder: &ToyTextEncoder, params: &DenoiserParams) -> Result<()> {
    let lay = params.layout();
    if encoder.tokens() != lay.tokens || encoder.dim() != lay.embed_dim {
        return Err(Error::ShapeMismatch {
            expected: lay.embedding_shape().to_vec(),
            got: vec![1, encoder.tokens(), encoder.dim()],
        });
    }
    Ok(())
}

/// Optimizes the source embedding together with the trainable UNet stages.
pub fn joint_finetune(
    image: &LatentImage,
    source_prompt: &str,
    encoder: &ToyTextEncoder,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &FinetuneConfig,
    progress: Option<Progress<'_>>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    check_prompt_fits(encoder, params)?;
    let init = encoder.encode_prompt(source_prompt).data().data().to_vec();
    let len = init.len();
    let spec = LoopSpec {
        trainable: params.trainable_paths(),
        lr_unet: cfg.lr_unet,
        adam: cfg.adam,
        batch: cfg.batch_repeat,
        min_steps: cfg.min_steps,
        max_steps: cfg.max_steps,
        threshold: Some(cfg.loss_threshold),
        seed: cfg.seed,
        embedding: EmbeddingGroup::Learned { data: init, lr: cfg.lr_embedding, adam: Adam::new(len, cfg.adam) },
    };
    let out = train_loop(image, params, sched, spec, progress)?;
    let data = out.embedding.current();
    Ok(FinetuneResult {
        mode: FinetuneMode::Joint,
        learned_embedding: embedding_from(params.layout().embedding_shape(), data, Provenance::Learned)?,
        learned_params: out.params,
        original_params: params.clone(),
        steps_run: out.trace.len(),
        loss_trace: out.trace,
        wall_time: 0.0,
        text_table: None,
    })
}

/// Same schedule of batches as [`joint_finetune`] but with the embedding
/// held fixed: the plain noise-prediction objective on the trainable stages.
pub fn plain_finetune(
    image: &LatentImage,
    embedding: &PromptEmbedding,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &FinetuneConfig,
) -> Result<(DenoiserParams, Vec<f64>)> {
    cfg.validate()?;
    params.check_inputs(image.array(), embedding)?;
    let spec = LoopSpec {
        trainable: params.trainable_paths(),
        lr_unet: cfg.lr_unet,
        adam: cfg.adam,
        batch: cfg.batch_repeat,
        min_steps: cfg.min_steps,
        max_steps: cfg.max_steps,
        threshold: Some(cfg.loss_threshold),
        seed: cfg.seed,
        embedding: EmbeddingGroup::Fixed(embedding.data().data().to_vec()),
    };
    let out = train_loop(image, params, sched, spec, None)?;
    Ok((out.params, out.trace))
}

/// Trains every UNet path (and for `unet-and-text` the text table) for a
/// fixed number of steps.
pub fn dreambooth_finetune(
    image: &LatentImage,
    source_prompt: &str,
    encoder: &ToyTextEncoder,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &DreamBoothConfig,
    progress: Option<Progress<'_>>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    check_prompt_fits(encoder, params)?;
    let (embedding, mode) = match cfg.variant {
        DreamBoothVariant::UnetOnly => {
            (EmbeddingGroup::Fixed(encoder.encode_prompt(source_prompt).data().data().to_vec()), FinetuneMode::DreamBoothUnet)
        }
        DreamBoothVariant::UnetAndText => {
            let ids = encoder.token_ids(source_prompt);
            let c = encoder.dim();
            let table = encoder.table().data();
            let mut positions = encoder.encode_prompt(source_prompt).data().data().to_vec();
            for (n, &id) in ids.iter().enumerate() {
                for k in 0..c {
                    positions[n * c + k] -= table[id * c + k];
                }
            }
            let len = encoder.table().len();
            (
                EmbeddingGroup::Table {
                    encoder: encoder.clone(),
                    ids,
                    positions,
                    lr: cfg.lr,
                    adam: Adam::new(len, cfg.adam),
                },
                FinetuneMode::DreamBoothText,
            )
        }
    };
    let spec = LoopSpec {
        trainable: params.paths().map(String::from).collect(),
        lr_unet: cfg.lr,
        adam: cfg.adam,
        batch: cfg.batch,
        min_steps: cfg.steps,
        max_steps: cfg.steps,
        threshold: None,
        seed: cfg.seed,
        embedding,
    };
    let out = train_loop(image, params, sched, spec, progress)?;
    let (learned_embedding, text_table) = match &out.embedding {
        EmbeddingGroup::Table { encoder, .. } => {
            (encoder.encode_prompt(source_prompt).with_provenance(Provenance::Learned), Some(encoder.table().clone()))
        }
        other => (embedding_from(params.layout().embedding_shape(), other.current(), Provenance::Encoded)?, None),
    };
    Ok(FinetuneResult {
        mode,
        learned_embedding,
        learned_params: out.params,
        original_params: params.clone(),
        steps_run: out.trace.len(),
        loss_trace: out.trace,
        wall_time: 0.0,
        text_table,
    })
}

/// Corpus training of the base denoiser from random initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate reached by linear decay.
    pub lr_final: f64,
    /// Fraction of samples trained on the empty prompt.
    pub cond_dropout: f64,
    pub adam: AdamConfig,
    pub init_seed: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            lr_final: 2e-4,
            cond_dropout: 0.1,
            adam: AdamConfig::default(),
            init_seed: 1,
            seed: 2,
        }
    }
}

/// Pretrains on `(latent, prompt embedding)` pairs; `uncond` replaces the
/// prompt for the dropout fraction. Returns the parameters and loss trace.
pub fn pretrain(
    corpus: &[(LatentImage, PromptEmbedding)],
    uncond: &PromptEmbedding,
    layout: crate::StageLayout,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    mut progress: Option<Progress<'_>>,
) -> Result<(DenoiserParams, Vec<f64>)> {
    if corpus.is_empty() || cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::InvalidArgument("pretraining needs a corpus, batch and steps".into()));
    }
    let mut params = DenoiserParams::init(layout, cfg.init_seed)?;
    for (x, e) in corpus {
        params.check_inputs(x.array(), e)?;
    }
    let paths: Vec<String> = params.paths().map(String::from).collect();
    let mut optims: Vec<Adam> = paths.iter().map(|p| Adam::new(params.leaf(p).len(), cfg.adam)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<TrainSample<'_>> = (0..cfg.batch)
            .map(|_| {
                let (x, e) = &corpus[rng.random_range(0..corpus.len())];
                let e = if rng.random::<f64>() < cfg.cond_dropout { uncond } else { e };
                let t = rng.random_range(1..=sched.steps());
                let eps = standard_normal(&mut rng, x.shape());
                TrainSample { x0: x.array(), t, eps, embedding: e.data().data() }
            })
            .collect();
        let (loss, grads) = batch_loss_and_grads(&params, sched, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        trace.push(loss);
        let frac = (step - 1) as f64 / cfg.steps as f64;
        let lr = cfg.lr + (cfg.lr_final - cfg.lr) * frac;
        for (path, adam) in paths.iter().zip(optims.iter_mut()) {
            let g = grads.params.leaf(path);
            adam.step(params.get_mut(path).expect("path exists").data_mut(), g, lr);
        }
        if let Some(cb) = progress.as_mut() {
            cb(step, cfg.steps, loss);
        }
    }
    Ok((params, trace))
}
