//! DDIM editing with classifier-free guidance, candidate scoring, grid
//! sweeps and the threshold-driven editing workflow.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{add_noise, cfg_combine, ddim_step, standard_normal, training_loss};
use crate::embedding::{vector_projection, vector_subtraction};
use crate::finetune::FinetuneResult;
use crate::forgetting::{merge_parameters, ForgettingStrategy};
use crate::image::{decode_latent, encode_latent};
use crate::{
    DenoiserParams, Error, LatentImage, NoiseSample, NoiseSchedule, PromptEmbedding, Result, RgbImage, ToyTextEncoder,
};

pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const PROBE_COUNT: usize = 8;
const PROBE_SEED: u64 = 0x0005_c04e;

/// How the learned source embedding and the target embedding are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Combination {
    Subtraction { gamma: f64 },
    Projection { alpha: f64, beta: f64 },
}

impl Combination {
    pub fn apply(&self, e_src: &PromptEmbedding, e_tgt: &PromptEmbedding) -> Result<PromptEmbedding> {
        match *self {
            Combination::Subtraction { gamma } => vector_subtraction(e_src, e_tgt, gamma),
            Combination::Projection { alpha, beta } => vector_projection(e_src, e_tgt, alpha, beta),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Combination::Subtraction { gamma } => format!("gamma={gamma}"),
            Combination::Projection { alpha, beta } => format!("alpha={alpha} beta={beta}"),
        }
    }
}

/// Sampler settings shared by every candidate of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Sampling {
    pub guidance_scale: f64,
    pub seed: u64,
    pub ddim_steps: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { guidance_scale: DEFAULT_GUIDANCE, seed: 0, ddim_steps: DEFAULT_DDIM_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub target_prompt: String,
    pub combination: Combination,
    pub strategy: ForgettingStrategy,
    pub sampling: Sampling,
    /// Permits forgetting together with projection.
    pub allow_any_pairing: bool,
}

impl EditRequest {
    pub fn new(target_prompt: impl Into<String>, combination: Combination) -> Self {
        Self {
            target_prompt: target_prompt.into(),
            combination,
            strategy: ForgettingStrategy::none(),
            sampling: Sampling::default(),
            allow_any_pairing: false,
        }
    }
}

/// Everything an edit needs from a finished fine-tune.
#[derive(Debug, Clone, Copy)]
pub struct EditContext<'a> {
    pub learned_params: &'a DenoiserParams,
    pub original_params: &'a DenoiserParams,
    pub learned_embedding: &'a PromptEmbedding,
    pub encoder: &'a ToyTextEncoder,
    pub sched: &'a NoiseSchedule,
    pub source_image: &'a RgbImage,
}

impl<'a> EditContext<'a> {
    pub fn new(
        run: &'a FinetuneResult,
        encoder: &'a ToyTextEncoder,
        sched: &'a NoiseSchedule,
        source_image: &'a RgbImage,
    ) -> Self {
        Self {
            learned_params: &run.learned_params,
            original_params: &run.original_params,
            learned_embedding: &run.learned_embedding,
            encoder,
            sched,
            source_image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scores {
    pub fidelity: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    /// Clamped to `[0, 1]`.
    pub image: RgbImage,
    pub request: EditRequest,
    pub fidelity: f64,
    pub alignment: f64,
}

/// Full DDIM trajectory from seeded noise with guidance at every step.
pub fn sample(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    cond: &PromptEmbedding,
    uncond: &PromptEmbedding,
    sampling: &Sampling,
) -> Result<LatentImage> {
    let shape = params.layout().input_shape();
    let mut x = NoiseSample::draw(sampling.seed, &shape).data;
    let ts = sched.ddim_timesteps(sampling.ddim_steps)?;
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_u = params.predict_noise(&x, t, uncond)?;
        let eps_c = params.predict_noise(&x, t, cond)?;
        let eps = cfg_combine(&eps_u, &eps_c, sampling.guidance_scale)?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("sampling diverged to non-finite values".into()));
    }
    LatentImage::new(x)
}

/// Fidelity is the negated pixel MSE against the original; alignment is
/// the negated noise-prediction loss of the candidate under the target
/// embedding, averaged over fixed probes and scored with `scorer`.
pub fn score_candidate(
    candidate: &RgbImage,
    original: &RgbImage,
    target: &PromptEmbedding,
    scorer: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<Scores> {
    let fidelity = -candidate.mse(original)?;
    let x0 = encode_latent(candidate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let mut total = 0.0;
    for k in 0..PROBE_COUNT {
        let t = 1 + (2 * k + 1) * (sched.steps() - 1) / (2 * PROBE_COUNT);
        let eps = standard_normal(&mut rng, x0.shape());
        let xt = add_noise(x0.array(), &eps, t, sched)?;
        let pred = scorer.predict_noise(&xt, t, target)?;
        total += training_loss(&eps, &pred)?;
    }
    Ok(Scores { fidelity, alignment: -total / PROBE_COUNT as f64 })
}

fn check_pairing(req: &EditRequest, params: &DenoiserParams) -> Result<()> {
    if !req.allow_any_pairing
        && matches!(req.combination, Combination::Projection { .. })
        && req.strategy.forgets(params)
    {
        return Err(Error::InvalidArgument(format!(
            "forgetting strategy {:?} is only paired with subtraction unless the pairing override is set",
            req.strategy.name
        )));
    }
    Ok(())
}

/// Edits with explicit sampling parameters, skipping the merge.
pub fn edit_with_params(ctx: &EditContext<'_>, params: &DenoiserParams, req: &EditRequest) -> Result<CandidateResult> {
    let target = ctx.encoder.encode_prompt(&req.target_prompt);
    let uncond = ctx.encoder.encode_prompt("");
    let e = req.combination.apply(ctx.learned_embedding, &target)?;
    let latent = sample(params, ctx.sched, &e, &uncond, &req.sampling)?;
    let image = decode_latent(&latent)?.clamped();
    let scores = score_candidate(&image, ctx.source_image, &target, ctx.original_params, ctx.sched)?;
    Ok(CandidateResult { image, request: req.clone(), fidelity: scores.fidelity, alignment: scores.alignment })
}

pub fn edit(ctx: &EditContext<'_>, req: &EditRequest) -> Result<CandidateResult> {
    check_pairing(req, ctx.learned_params)?;
    let params = merge_parameters(ctx.learned_params, ctx.original_params, &req.strategy)?;
    edit_with_params(ctx, &params, req)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SweepKind {
    Subtraction,
    Projection,
}

/// A hyperparameter grid. Gamma and beta advance in steps of 0.1.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// Subtraction only: the wider gamma range meant for forgetting.
    pub forgetting_range: bool,
    pub grid: Vec<Combination>,
}

fn tenths(lo: u32, hi: u32) -> impl Iterator<Item = f64> {
    (lo..=hi).map(|i| i as f64 / 10.0)
}

impl SweepSpec {
    /// Gamma in [0.8, 1.6], or [0.0, 1.4] when forgetting.
    pub fn subtraction(forgetting: bool) -> Self {
        let (lo, hi) = if forgetting { (0, 14) } else { (8, 16) };
        Self {
            kind: SweepKind::Subtraction,
            forgetting_range: forgetting,
            grid: tenths(lo, hi).map(|gamma| Combination::Subtraction { gamma }).collect(),
        }
    }

    /// Alpha in {0.8, 1.1} crossed with beta in [1.0, 1.5].
    pub fn projection() -> Self {
        let grid = [0.8, 1.1]
            .into_iter()
            .flat_map(|alpha| tenths(10, 15).map(move |beta| Combination::Projection { alpha, beta }))
            .collect();
        Self { kind: SweepKind::Projection, forgetting_range: false, grid }
    }

    pub fn for_kind(kind: SweepKind, forgetting: bool) -> Self {
        match kind {
            SweepKind::Subtraction => Self::subtraction(forgetting),
            SweepKind::Projection => Self::projection(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("empty sweep grid".into()));
        }
        let (glo, ghi) = if self.forgetting_range { (0.0, 1.4) } else { (0.8, 1.6) };
        for c in &self.grid {
            let ok = match (*c, self.kind) {
                (Combination::Subtraction { gamma }, SweepKind::Subtraction) => gamma >= glo - 1e-12 && gamma <= ghi + 1e-12,
                (Combination::Projection { alpha, beta }, SweepKind::Projection) => {
                    (alpha == 0.8 || alpha == 1.1) && (1.0 - 1e-12..=1.5 + 1e-12).contains(&beta)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("grid point {} outside the declared range", c.label())));
            }
        }
        Ok(())
    }
}

/// One candidate per grid point, in grid order.
pub fn sweep(
    ctx: &EditContext<'_>,
    target_prompt: &str,
    spec: &SweepSpec,
    strategy: &ForgettingStrategy,
    sampling: &Sampling,
    allow_any_pairing: bool,
    mut progress: Option<&mut dyn FnMut(usize, usize)>,
) -> Result<Vec<CandidateResult>> {
    spec.validate()?;
    let forgets = strategy.forgets(ctx.learned_params);
    if spec.kind == SweepKind::Subtraction && forgets && !spec.forgetting_range {
        return Err(Error::InvalidArgument(format!(
            "strategy {:?} forgets parameters; use the gamma range [0.0, 1.4]",
            strategy.name
        )));
    }
    let params = merge_parameters(ctx.learned_params, ctx.original_params, strategy)?;
    let mut out = Vec::with_capacity(spec.grid.len());
    for (i, c) in spec.grid.iter().enumerate() {
        let req = EditRequest {
            target_prompt: target_prompt.into(),
            combination: *c,
            strategy: strategy.clone(),
            sampling: *sampling,
            allow_any_pairing,
        };
        check_pairing(&req, ctx.learned_params)?;
        out.push(edit_with_params(ctx, &params, &req)?);
        if let Some(cb) = progress.as_mut() {
            cb(i + 1, spec.grid.len());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Thresholds {
    pub min_alignment: f64,
    pub min_fidelity: f64,
}

impl Thresholds {
    pub fn clears(&self, c: &CandidateResult) -> bool {
        c.alignment >= self.min_alignment && c.fidelity >= self.min_fidelity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoConfig {
    /// Forgetting strategies tried, in order, after the plain sweep.
    pub strategies: Vec<ForgettingStrategy>,
    pub sampling: Sampling,
}

impl Default for AutoConfig {
    fn default() -> Self {
        Self {
            strategies: ["decoderattn", "encoderattn"]
                .iter()
                .map(|n| ForgettingStrategy::builtin(n).expect("builtin"))
                .collect(),
            sampling: Sampling::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Decision {
    Accept,
    NextStrategy,
    Exhausted,
}

/// What one stage of the workflow saw and decided.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceStage {
    pub stage: usize,
    pub strategy: String,
    pub gammas: Vec<f64>,
    pub fidelity: Vec<f64>,
    pub alignment: Vec<f64>,
    pub cleared: Vec<usize>,
    pub best_index: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoOutcome {
    pub candidate: CandidateResult,
    pub cleared: bool,
    pub trace: Vec<TraceStage>,
}

fn best_by_alignment<'a>(cands: impl Iterator<Item = (usize, &'a CandidateResult)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands {
        if best.is_none_or(|(_, a)| c.alignment > a) {
            best = Some((i, c.alignment));
        }
    }
    best.map(|(i, _)| i)
}

/// Plain subtraction sweep first, then each forgetting strategy with the
/// wider gamma range, stopping at the first stage where some candidate
/// clears both thresholds. Falls back to the best-aligned candidate seen.
pub fn auto_workflow(
    ctx: &EditContext<'_>,
    target_prompt: &str,
    thresholds: &Thresholds,
    cfg: &AutoConfig,
    mut progress: Option<&mut dyn FnMut(usize, usize)>,
) -> Result<AutoOutcome> {
    let mut stages: Vec<(ForgettingStrategy, SweepSpec)> = Vec::new();
    stages.push((ForgettingStrategy::none(), SweepSpec::subtraction(false)));
    for s in &cfg.strategies {
        stages.push((s.clone(), SweepSpec::subtraction(true)));
    }
    let total = stages.len();
    let mut trace = Vec::new();
    let mut fallback: Option<CandidateResult> = None;
    for (k, (strategy, spec)) in stages.iter().enumerate() {
        let cands = sweep(ctx, target_prompt, spec, strategy, &cfg.sampling, false, None)?;
        let cleared: Vec<usize> = (0..cands.len()).filter(|&i| thresholds.clears(&cands[i])).collect();
        let pick = best_by_alignment(cleared.iter().map(|&i| (i, &cands[i])));
        let best_index = pick.or_else(|| best_by_alignment(cands.iter().enumerate())).expect("non-empty grid");
        let decision = match (pick, k + 1 == total) {
            (Some(_), _) => Decision::Accept,
            (None, false) => Decision::NextStrategy,
            (None, true) => Decision::Exhausted,
        };
        trace.push(TraceStage {
            stage: k + 1,
            strategy: strategy.spec(),
            gammas: spec
                .grid
                .iter()
                .map(|c| match c {
                    Combination::Subtraction { gamma } => *gamma,
                    Combination::Projection { .. } => f64::NAN,
                })
                .collect(),
            fidelity: cands.iter().map(|c| c.fidelity).collect(),
            alignment: cands.iter().map(|c| c.alignment).collect(),
            cleared: cleared.clone(),
            best_index,
            decision,
        });
        if let Some(cb) = progress.as_mut() {
            cb(k + 1, total);
        }
        let best = cands.into_iter().nth(best_index).expect("index in range");
        if pick.is_some() {
            return Ok(AutoOutcome { candidate: best, cleared: true, trace });
        }
        if fallback.as_ref().is_none_or(|f| best.alignment > f.alignment) {
            fallback = Some(best);
        }
    }
    Ok(AutoOutcome { candidate: fallback.expect("at least one stage"), cleared: false, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{kit, quick_run};
    use crate::{fixtures::EDIT_TARGET, Array, Provenance};

    fn fast() -> Sampling {
        Sampling { ddim_steps: 5, ..Sampling::default() }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(SweepSpec::subtraction(false).grid.len(), 9);
        assert_eq!(SweepSpec::subtraction(true).grid.len(), 15);
        assert_eq!(SweepSpec::projection().grid.len(), 12);
        assert_eq!(SweepSpec::subtraction(false).grid[0], Combination::Subtraction { gamma: 0.8 });
        assert_eq!(SweepSpec::subtraction(true).grid[14], Combination::Subtraction { gamma: 1.4 });
        for s in [SweepSpec::subtraction(false), SweepSpec::subtraction(true), SweepSpec::projection()] {
            s.validate().unwrap();
        }
        let mut bad = SweepSpec::subtraction(false);
        bad.grid.push(Combination::Subtraction { gamma: 0.1 });
        assert!(bad.validate().is_err());
        bad.grid.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn edit_is_deterministic_and_merge_free_for_none() {
        let k = kit();
        let run = quick_run(&k);
        let ctx = EditContext::new(&run, &k.encoder, &k.sched, &k.image);
        let mut req = EditRequest::new(EDIT_TARGET, Combination::Subtraction { gamma: 1.2 });
        req.sampling = fast();
        let a = edit(&ctx, &req).unwrap();
        let b = edit(&ctx, &req).unwrap();
        assert_eq!(a, b);
        let c = edit_with_params(&ctx, &run.learned_params, &req).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_guidance_ignores_target() {
        let k = kit();
        let run = quick_run(&k);
        let ctx = EditContext::new(&run, &k.encoder, &k.sched, &k.image);
        let s = Sampling { guidance_scale: 0.0, ..fast() };
        let uncond = k.encoder.encode_prompt("");
        let e1 = k.encoder.encode_prompt("a red square");
        let e2 = k.encoder.encode_prompt("a blue ring");
        let a = sample(&run.learned_params, &k.sched, &e1, &uncond, &s).unwrap();
        let b = sample(&run.learned_params, &k.sched, &e2, &uncond, &s).unwrap();
        assert_eq!(a, b);
        let c = sample(&run.learned_params, &k.sched, &uncond, &uncond, &s).unwrap();
        assert_eq!(a, c);
        let _ = ctx;
    }

    #[test]
    fn pairing_rules() {
        let k = kit();
        let run = quick_run(&k);
        let ctx = EditContext::new(&run, &k.encoder, &k.sched, &k.image);
        let mut req = EditRequest::new(EDIT_TARGET, Combination::Projection { alpha: 0.8, beta: 1.0 });
        req.sampling = fast();
        req.strategy = ForgettingStrategy::builtin("decoderattn").unwrap();
        assert!(edit(&ctx, &req).is_err());
        req.allow_any_pairing = true;
        assert!(edit(&ctx, &req).is_ok());
        let s = sweep(&ctx, EDIT_TARGET, &SweepSpec::subtraction(false), &req.strategy, &fast(), false, None);
        assert!(s.is_err());
    }

    #[test]
    fn projection_with_degenerate_source_fails() {
        let k = kit();
        let mut run = quick_run(&k);
        let shape = run.learned_embedding.data().shape().to_vec();
        run.learned_embedding = PromptEmbedding::new(Array::zeros(&shape), Provenance::Learned).unwrap();
        let ctx = EditContext::new(&run, &k.encoder, &k.sched, &k.image);
        let mut req = EditRequest::new(EDIT_TARGET, Combination::Projection { alpha: 0.8, beta: 1.0 });
        req.sampling = fast();
        assert!(matches!(edit(&ctx, &req), Err(Error::DegenerateSource { batch: 0, token: 0 })));
    }

    #[test]
    fn scores() {
        let k = kit();
        let e = k.encoder.encode_prompt(EDIT_TARGET);
        let s = score_candidate(&k.image, &k.image, &e, &k.params, &k.sched).unwrap();
        assert_eq!(s.fidelity, 0.0);
        assert!(s.alignment < 0.0);
        let flat = RgbImage::new(32, 32, alloc::vec![0.3; 32 * 32 * 3]).unwrap();
        let a = score_candidate(&flat, &k.image, &e, &k.params, &k.sched).unwrap();
        let b = score_candidate(&k.image, &flat, &e, &k.params, &k.sched).unwrap();
        assert_eq!(a.fidelity, b.fidelity);
        assert!(a.fidelity < 0.0);
    }

    #[test]
    fn auto_threshold_extremes() {
        let k = kit();
        let run = quick_run(&k);
        let ctx = EditContext::new(&run, &k.encoder, &k.sched, &k.image);
        let cfg = AutoConfig { sampling: fast(), ..AutoConfig::default() };
        let lo = Thresholds { min_alignment: f64::NEG_INFINITY, min_fidelity: f64::NEG_INFINITY };
        let out = auto_workflow(&ctx, EDIT_TARGET, &lo, &cfg, None).unwrap();
        assert!(out.cleared);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].decision, Decision::Accept);
        let best = out.trace[0].alignment.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.candidate.alignment, best);

        let hi = Thresholds { min_alignment: f64::INFINITY, min_fidelity: f64::INFINITY };
        let out = auto_workflow(&ctx, EDIT_TARGET, &hi, &cfg, None).unwrap();
        assert!(!out.cleared);
        assert_eq!(out.trace.len(), 3);
        assert_eq!(out.trace[2].decision, Decision::Exhausted);
        assert_eq!(out.trace[1].strategy, "decoderattn");
        assert_eq!(out.trace[1].gammas.len(), 15);
    }
}
