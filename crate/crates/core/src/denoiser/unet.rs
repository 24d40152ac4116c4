//! Forward pass with activation caching and the matching reverse pass.
//!
//! Feature maps are token grids: `rows = h * w` positions by `d` channels,
//! row-major. Every block is pre-normalized with a parameter-free RMS norm
//! and adds its output to the residual stream.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::*;
use super::{DenoiserParams, Stage, StageLayout};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::{Array, Error, Result};

struct AttnCache {
    n: Vec<f64>,
    inv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
}

struct BlockCache {
    n: Vec<f64>,
    inv: Vec<f64>,
    a: Vec<f64>,
    g: Vec<f64>,
    selfattn: AttnCache,
    crossattn: AttnCache,
}

struct StageCache {
    /// Input of `proj.w_in`; empty for mid.
    proj_input: Vec<f64>,
    block: BlockCache,
}

pub(crate) struct Cache {
    temb: Vec<f64>,
    stages: Vec<StageCache>,
    out_input: Vec<f64>,
}

fn to_tokens(x: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for p in 0..positions {
            out[p * channels + c] = x[c * positions + p];
        }
    }
    out
}

fn from_tokens(x: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for p in 0..positions {
            out[c * positions + p] = x[p * channels + c];
        }
    }
    out
}

struct Ctx<'a> {
    params: &'a DenoiserParams,
    temb: &'a [f64],
    e: &'a [f64],
}

impl Ctx<'_> {
    fn w(&self, prefix: &str, leaf: &str) -> &[f64] {
        self.params.leaf(&format!("{prefix}.{leaf}"))
    }

    fn layout(&self) -> &StageLayout {
        self.params.layout()
    }

    fn attn_forward(&self, prefix: &str, h: &[f64], d: usize, cross: bool) -> (Vec<f64>, AttnCache) {
        let rows = h.len() / d;
        let (n, inv) = rms_norm(h, d);
        let q = matmul(&n, self.w(prefix, "qw"), rows, d, d);
        let (src, src_rows, src_dim) = if cross {
            let c = self.layout().embed_dim;
            (self.e, self.layout().tokens, c)
        } else {
            (n.as_slice(), rows, d)
        };
        let k = matmul(src, self.w(prefix, "kw"), src_rows, src_dim, d);
        let v = matmul(src, self.w(prefix, "vw"), src_rows, src_dim, d);
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut p = matmul_nt(&q, &k, rows, d, src_rows);
        p.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(&mut p, src_rows);
        let o = matmul(&p, &v, rows, src_rows, d);
        let delta = matmul(&o, self.w(prefix, "ow"), rows, d, d);
        (delta, AttnCache { n, inv, q, k, v, p, o })
    }

    fn block_forward(&self, prefix: &str, mut h: Vec<f64>, d: usize) -> (Vec<f64>, BlockCache) {
        let rows = h.len() / d;
        let f = self.layout().time_features;
        let res = format!("{prefix}.resnet");
        let (n, inv) = rms_norm(&h, d);
        let mut a = matmul(&n, self.w(&res, "w1"), rows, d, d);
        let mut tproj = matmul(self.temb, self.w(&res, "tw"), 1, f, d);
        add_assign(&mut tproj, self.w(&res, "tb"));
        add_row_bias(&mut a, self.w(&res, "b1"));
        add_row_bias(&mut a, &tproj);
        let g = silu(&a);
        let mut r = matmul(&g, self.w(&res, "w2"), rows, d, d);
        add_row_bias(&mut r, self.w(&res, "b2"));
        add_assign(&mut h, &r);

        let (delta, selfattn) = self.attn_forward(&format!("{prefix}.selfattn"), &h, d, false);
        add_assign(&mut h, &delta);
        let (delta, crossattn) = self.attn_forward(&format!("{prefix}.crossattn"), &h, d, true);
        add_assign(&mut h, &delta);
        (h, BlockCache { n, inv, a, g, selfattn, crossattn })
    }

    fn proj_in(&self, prefix: &str, input: &[f64], fan_in: usize, d: usize) -> Vec<f64> {
        let rows = input.len() / fan_in;
        let mut h = matmul(input, self.w(prefix, "proj.w_in"), rows, fan_in, d);
        add_row_bias(&mut h, self.w(prefix, "proj.b_in"));
        add_assign(&mut h, self.w(prefix, "proj.pos"));
        h
    }
}

pub(crate) fn forward(params: &DenoiserParams, x: &[f64], t: usize, e: &[f64]) -> (Array, Cache) {
    let lay = *params.layout();
    let temb = time_features(t, lay.time_features);
    let ctx = Ctx { params, temb: &temb, e };
    let positions = lay.height * lay.width;
    let mut stages = Vec::with_capacity(9);
    let mut skips: Vec<Vec<f64>> = Vec::with_capacity(4);

    let mut h = Vec::new();
    for i in 0..4 {
        let prefix = Stage::Encoder(i).prefix();
        let d = lay.widths[i];
        let (input, fan_in) = if i == 0 {
            (to_tokens(x, lay.in_channels, positions), lay.in_channels)
        } else {
            let (gh, gw) = lay.grid(i - 1);
            (merge_2x2(&h, gh, gw, lay.widths[i - 1]), 4 * lay.widths[i - 1])
        };
        let projected = ctx.proj_in(&prefix, &input, fan_in, d);
        let (out, block) = ctx.block_forward(&prefix, projected, d);
        skips.push(out.clone());
        stages.push(StageCache { proj_input: input, block });
        h = out;
    }

    let (out, block) = ctx.block_forward("mid", h, lay.widths[3]);
    stages.push(StageCache { proj_input: Vec::new(), block });
    h = out;

    let mut prev_d = lay.widths[3];
    for i in 0..4 {
        let stage = Stage::Decoder(i);
        let prefix = stage.prefix();
        let d = lay.stage_width(stage);
        let up = if i == 0 {
            h
        } else {
            let (gh, gw) = lay.grid(Stage::Decoder(i - 1).level());
            upsample_2x(&h, gh, gw, prev_d)
        };
        let skip_d = lay.widths[StageLayout::skip_source(i)];
        let input = concat_cols(&up, prev_d, &skips[StageLayout::skip_source(i)], skip_d);
        let projected = ctx.proj_in(&prefix, &input, prev_d + skip_d, d);
        let (out, block) = ctx.block_forward(&prefix, projected, d);
        stages.push(StageCache { proj_input: input, block });
        h = out;
        prev_d = d;
    }

    let d0 = lay.widths[0];
    let mut y = matmul(&h, params.leaf("decoder.3.proj.w_out"), positions, d0, lay.in_channels);
    add_row_bias(&mut y, params.leaf("decoder.3.proj.b_out"));
    let out = Array::from_vec(&lay.input_shape(), from_tokens(&y, lay.in_channels, positions))
        .expect("output matches input shape");
    (out, Cache { temb, stages, out_input: h })
}

/// Parameter gradients plus the gradient with respect to each sample's
/// prompt embedding.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: DenoiserParams,
    pub embeddings: Vec<Vec<f64>>,
}

struct Backward<'a> {
    params: &'a DenoiserParams,
    grads: &'a mut DenoiserParams,
    temb: &'a [f64],
    e: &'a [f64],
    d_e: &'a mut [f64],
}

impl Backward<'_> {
    fn w(&self, prefix: &str, leaf: &str) -> &[f64] {
        self.params.leaf(&format!("{prefix}.{leaf}"))
    }

    fn g(&mut self, prefix: &str, leaf: &str) -> &mut [f64] {
        let path: String = format!("{prefix}.{leaf}");
        self.grads.get_mut(&path).unwrap_or_else(|| panic!("missing gradient {path}")).data_mut()
    }

    /// Returns the gradient reaching the residual input through the norm.
    fn attn_backward(&mut self, prefix: &str, c: &AttnCache, d_delta: &[f64], d: usize, cross: bool) -> Vec<f64> {
        let rows = d_delta.len() / d;
        let lay = *self.params.layout();
        let (src_rows, src_dim) = if cross { (lay.tokens, lay.embed_dim) } else { (rows, d) };
        let src: Vec<f64> = if cross { self.e.to_vec() } else { c.n.clone() };

        matmul_tn_acc(&c.o, d_delta, rows, d, d, self.g(prefix, "ow"));
        let d_o = matmul_nt(d_delta, self.w(prefix, "ow"), rows, d, d);
        let d_p = matmul_nt(&d_o, &c.v, rows, d, src_rows);
        let mut d_v = vec![0.0; src_rows * d];
        matmul_tn_acc(&c.p, &d_o, rows, src_rows, d, &mut d_v);
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut d_s = softmax_rows_backward(&c.p, &d_p, src_rows);
        d_s.iter_mut().for_each(|v| *v *= scale);
        let d_q = matmul(&d_s, &c.k, rows, src_rows, d);
        let mut d_k = vec![0.0; src_rows * d];
        matmul_tn_acc(&d_s, &c.q, rows, src_rows, d, &mut d_k);

        matmul_tn_acc(&c.n, &d_q, rows, d, d, self.g(prefix, "qw"));
        matmul_tn_acc(&src, &d_k, src_rows, src_dim, d, self.g(prefix, "kw"));
        matmul_tn_acc(&src, &d_v, src_rows, src_dim, d, self.g(prefix, "vw"));

        let mut d_n = matmul_nt(&d_q, self.w(prefix, "qw"), rows, d, d);
        let mut d_src = matmul_nt(&d_k, self.w(prefix, "kw"), src_rows, d, src_dim);
        add_assign(&mut d_src, &matmul_nt(&d_v, self.w(prefix, "vw"), src_rows, d, src_dim));
        if cross {
            add_assign(self.d_e, &d_src);
        } else {
            add_assign(&mut d_n, &d_src);
        }
        rms_norm_backward(&c.n, &c.inv, &d_n, d)
    }

    fn block_backward(&mut self, prefix: &str, c: &BlockCache, d_out: Vec<f64>, d: usize) -> Vec<f64> {
        let rows = d_out.len() / d;
        let f = self.params.layout().time_features;

        let mut dh = d_out;
        let back = self.attn_backward(&format!("{prefix}.crossattn"), &c.crossattn, &dh, d, true);
        add_assign(&mut dh, &back);
        let back = self.attn_backward(&format!("{prefix}.selfattn"), &c.selfattn, &dh, d, false);
        add_assign(&mut dh, &back);

        let res = format!("{prefix}.resnet");
        col_sum_acc(&dh, d, self.g(&res, "b2"));
        matmul_tn_acc(&c.g, &dh, rows, d, d, self.g(&res, "w2"));
        let dg = matmul_nt(&dh, self.w(&res, "w2"), rows, d, d);
        let da = silu_backward(&c.a, &dg);
        let mut da_sum = vec![0.0; d];
        col_sum_acc(&da, d, &mut da_sum);
        add_assign(self.g(&res, "b1"), &da_sum);
        add_assign(self.g(&res, "tb"), &da_sum);
        let temb = self.temb.to_vec();
        matmul_tn_acc(&temb, &da_sum, 1, f, d, self.g(&res, "tw"));
        matmul_tn_acc(&c.n, &da, rows, d, d, self.g(&res, "w1"));
        let dn = matmul_nt(&da, self.w(&res, "w1"), rows, d, d);
        add_assign(&mut dh, &rms_norm_backward(&c.n, &c.inv, &dn, d));
        dh
    }

    /// Backward through `input * w_in + b_in + pos`; returns the input gradient.
    fn proj_backward(&mut self, prefix: &str, input: &[f64], dh: &[f64], fan_in: usize, d: usize) -> Vec<f64> {
        let rows = dh.len() / d;
        matmul_tn_acc(input, dh, rows, fan_in, d, self.g(prefix, "proj.w_in"));
        col_sum_acc(dh, d, self.g(prefix, "proj.b_in"));
        add_assign(self.g(prefix, "proj.pos"), dh);
        matmul_nt(dh, self.w(prefix, "proj.w_in"), rows, d, fan_in)
    }
}

fn backward(
    params: &DenoiserParams,
    cache: &Cache,
    d_out: &[f64],
    e: &[f64],
    grads: &mut DenoiserParams,
    d_e: &mut [f64],
) {
    let lay = *params.layout();
    let positions = lay.height * lay.width;
    let d0 = lay.widths[0];
    let mut bw = Backward { params, grads, temb: &cache.temb, e, d_e };

    let d_y = to_tokens(d_out, lay.in_channels, positions);
    matmul_tn_acc(&cache.out_input, &d_y, positions, d0, lay.in_channels, bw.g("decoder.3.proj", "w_out"));
    col_sum_acc(&d_y, lay.in_channels, bw.g("decoder.3.proj", "b_out"));
    let mut dh = matmul_nt(&d_y, params.leaf("decoder.3.proj.w_out"), positions, lay.in_channels, d0);

    let mut d_skips: Vec<Vec<f64>> =
        (0..4).map(|i| vec![0.0; { let (h, w) = lay.grid(i); h * w } * lay.widths[i]]).collect();

    for i in (0..4).rev() {
        let stage = Stage::Decoder(i);
        let prefix = stage.prefix();
        let d = lay.stage_width(stage);
        let sc = &cache.stages[5 + i];
        dh = bw.block_backward(&prefix, &sc.block, dh, d);
        let prev_d = if i == 0 { lay.widths[3] } else { lay.stage_width(Stage::Decoder(i - 1)) };
        let skip = StageLayout::skip_source(i);
        let d_input = bw.proj_backward(&prefix, &sc.proj_input, &dh, prev_d + lay.widths[skip], d);
        let (d_up, d_skip) = split_cols(&d_input, prev_d, lay.widths[skip]);
        add_assign(&mut d_skips[skip], &d_skip);
        dh = if i == 0 {
            d_up
        } else {
            let (gh, gw) = lay.grid(Stage::Decoder(i - 1).level());
            upsample_2x_backward(&d_up, gh, gw, prev_d)
        };
    }

    dh = bw.block_backward("mid", &cache.stages[4].block, dh, lay.widths[3]);

    for i in (0..4).rev() {
        let prefix = Stage::Encoder(i).prefix();
        let d = lay.widths[i];
        add_assign(&mut dh, &d_skips[i]);
        let sc = &cache.stages[i];
        dh = bw.block_backward(&prefix, &sc.block, dh, d);
        let fan_in = if i == 0 { lay.in_channels } else { 4 * lay.widths[i - 1] };
        let d_input = bw.proj_backward(&prefix, &sc.proj_input, &dh, fan_in, d);
        if i > 0 {
            let (gh, gw) = lay.grid(i - 1);
            dh = merge_2x2_backward(&d_input, gh, gw, lay.widths[i - 1]);
        }
    }
}

/// One element of a training batch: the clean latent, a timestep, the noise
/// drawn for it, and the conditioning embedding (`N x C`, row-major).
#[derive(Debug, Clone)]
pub struct TrainSample<'a> {
    pub x0: &'a Array,
    pub t: usize,
    pub eps: Array,
    pub embedding: &'a [f64],
}

/// Mean noise-prediction loss over the batch and its gradients.
pub fn batch_loss_and_grads(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    batch: &[TrainSample<'_>],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let lay = params.layout();
    let emb_len = lay.tokens * lay.embed_dim;
    let mut grads = params.zeros_like();
    let mut d_embs = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for s in batch {
        if s.x0.shape() != lay.input_shape() {
            return Err(Error::ShapeMismatch { expected: lay.input_shape().to_vec(), got: s.x0.shape().to_vec() });
        }
        if s.embedding.len() != emb_len {
            return Err(Error::ShapeMismatch { expected: lay.embedding_shape().to_vec(), got: vec![s.embedding.len()] });
        }
        let xt = add_noise(s.x0, &s.eps, s.t, sched)?;
        let (pred, cache) = forward(params, xt.data(), s.t, s.embedding);
        let n = pred.len() as f64;
        let mut d_out = Vec::with_capacity(pred.len());
        let mut sq = 0.0;
        for (p, e) in pred.data().iter().zip(s.eps.data()) {
            let r = p - e;
            sq += r * r;
            d_out.push(2.0 * r / (n * batch.len() as f64));
        }
        total += sq / n;
        let mut d_e = vec![0.0; emb_len];
        backward(params, &cache, &d_out, s.embedding, &mut grads, &mut d_e);
        d_embs.push(d_e);
    }
    Ok((total / batch.len() as f64, Gradients { params: grads, embeddings: d_embs }))
}
