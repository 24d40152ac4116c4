//! Analytic UNet and embedding gradients against central differences.

use forgedit_core::denoiser::{batch_loss_and_grads, TrainSample};
use forgedit_core::diffusion::NoiseSample;
use forgedit_core::{Array, DenoiserParams, NoiseSchedule, StageLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;

struct Problem {
    params: DenoiserParams,
    sched: NoiseSchedule,
    x0: Array,
    emb: Vec<f64>,
    draws: Vec<(usize, Array)>,
}

impl Problem {
    fn new(seed: u64) -> Self {
        let layout = StageLayout::default();
        let params = DenoiserParams::init(layout, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x0 = Array::from_vec(&layout.input_shape(), (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let emb = (0..layout.tokens * layout.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let draws = (0..3u64)
            .map(|i| (rng.random_range(1..=100), NoiseSample::draw(seed * 10 + i, &layout.input_shape()).data))
            .collect();
        Self { params, sched: NoiseSchedule::cosine(100).unwrap(), x0, emb, draws }
    }

    fn loss(&self, params: &DenoiserParams, emb: &[f64]) -> (f64, forgedit_core::denoiser::Gradients) {
        let batch: Vec<TrainSample<'_>> = self
            .draws
            .iter()
            .map(|(t, eps)| TrainSample { x0: &self.x0, t: *t, eps: eps.clone(), embedding: emb })
            .collect();
        batch_loss_and_grads(params, &self.sched, &batch).unwrap()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[test]
fn unet_parameter_gradients_match_central_differences() {
    let p = Problem::new(5);
    let (_, grads) = p.loss(&p.params, &p.emb);
    let paths: Vec<String> = p.params.paths().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    while checked < 10 {
        let path = &paths[rng.random_range(0..paths.len())];
        let len = p.params.get(path).unwrap().len();
        let idx = rng.random_range(0..len);
        let analytic = grads.params.get(path).unwrap().data()[idx];
        let mut plus = p.params.clone();
        plus.get_mut(path).unwrap().data_mut()[idx] += H;
        let mut minus = p.params.clone();
        minus.get_mut(path).unwrap().data_mut()[idx] -= H;
        let numeric = (p.loss(&plus, &p.emb).0 - p.loss(&minus, &p.emb).0) / (2.0 * H);
        let err = rel_err(analytic, numeric);
        assert!(err < REL_TOL, "{path}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {err:e}");
        checked += 1;
    }
}

#[test]
fn embedding_gradients_match_central_differences() {
    let p = Problem::new(8);
    let (_, grads) = p.loss(&p.params, &p.emb);
    let total: Vec<f64> = (0..p.emb.len()).map(|i| grads.embeddings.iter().map(|g| g[i]).sum()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let idx = rng.random_range(0..p.emb.len());
        let mut plus = p.emb.clone();
        plus[idx] += H;
        let mut minus = p.emb.clone();
        minus[idx] -= H;
        let numeric = (p.loss(&p.params, &plus).0 - p.loss(&p.params, &minus).0) / (2.0 * H);
        let err = rel_err(total[idx], numeric);
        assert!(err < REL_TOL, "e[{idx}]: analytic {:e} numeric {numeric:e} rel {err:e}", total[idx]);
    }
}

#[test]
fn every_leaf_receives_gradient() {
    let p = Problem::new(2);
    let (_, grads) = p.loss(&p.params, &p.emb);
    for (path, g) in grads.params.entries() {
        // softmax over a single position is constant: no signal reaches q/k
        let one_token = ["encoder.3.", "mid.", "decoder.0."].iter().any(|s| path.starts_with(s));
        if one_token && (path.ends_with("selfattn.qw") || path.ends_with("selfattn.kw")) {
            assert!(g.data().iter().all(|v| *v == 0.0), "{path}");
            continue;
        }
        assert!(g.data().iter().any(|v| *v != 0.0), "{path} has an all-zero gradient");
    }
}
