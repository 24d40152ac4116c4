//! Prompt embeddings and the two ways of combining a learned source
//! embedding with a target embedding: interpolation along the difference
//! vector, and projection onto the source direction per token.

use alloc::vec::Vec;

use crate::denoiser::ops_dot as dot;
use crate::{Array, Error, Result};

/// Norm below which a source token cannot define a projection direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Provenance {
    Encoded,
    Learned,
    Combined,
}

/// A `B x N x C` embedding (batch, tokens, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    data: Array,
    provenance: Provenance,
}

impl PromptEmbedding {
    pub fn new(data: Array, provenance: Provenance) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::InvalidArgument(alloc::format!("embedding must be B x N x C, got {s:?}")));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
        }
        Ok(Self { data, provenance })
    }

    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// `(B, N, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    fn tokens(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.data().chunks_exact(self.dims().2)
    }
}

/// `gamma * e_tgt + (1 - gamma) * e_src`. Exact at both endpoints.
pub fn vector_subtraction(e_src: &PromptEmbedding, e_tgt: &PromptEmbedding, gamma: f64) -> Result<PromptEmbedding> {
    let data = e_src.data.zip_map(&e_tgt.data, |s, t| gamma * t + (1.0 - gamma) * s)?;
    PromptEmbedding::new(data, Provenance::Combined)
}

/// Per-token decomposition `e_tgt = r * e_src + e_edit` with `e_edit`
/// orthogonal to `e_src` over the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One ratio per `(b, n)` token, batch-major.
    pub ratios: Vec<f64>,
    pub edit: PromptEmbedding,
}

pub fn project(e_src: &PromptEmbedding, e_tgt: &PromptEmbedding) -> Result<Projection> {
    e_src.data.check_same_shape(&e_tgt.data)?;
    let (_, n, c) = e_src.dims();
    let mut ratios = Vec::with_capacity(e_src.data.len() / c);
    let mut edit = Vec::with_capacity(e_src.data.len());
    for (i, (s, t)) in e_src.tokens().zip(e_tgt.tokens()).enumerate() {
        let ss = dot(s, s);
        if libm::sqrt(ss) < DEGENERATE_NORM {
            return Err(Error::DegenerateSource { batch: i / n, token: i % n });
        }
        let mut r = dot(s, t) / ss;
        let mut e: Vec<f64> = s.iter().zip(t).map(|(a, b)| b - r * a).collect();
        // second Gram-Schmidt pass removes the rounding residue along e_src
        let fix = dot(s, &e) / ss;
        r += fix;
        e.iter_mut().zip(s).for_each(|(v, a)| *v -= fix * a);
        ratios.push(r);
        edit.extend(e);
    }
    let edit = PromptEmbedding::new(Array::from_vec(e_src.data.shape(), edit)?, Provenance::Combined)?;
    Ok(Projection { ratios, edit })
}

/// `alpha * e_src + beta * e_edit` with `e_edit` from [`project`].
pub fn vector_projection(
    e_src: &PromptEmbedding,
    e_tgt: &PromptEmbedding,
    alpha: f64,
    beta: f64,
) -> Result<PromptEmbedding> {
    let p = project(e_src, e_tgt)?;
    recombine(e_src, &p.edit, |_| alpha, beta)
}

/// Projection recombination with a separate `alpha` for every token.
pub fn vector_projection_per_token(
    e_src: &PromptEmbedding,
    e_tgt: &PromptEmbedding,
    alphas: &[f64],
    beta: f64,
) -> Result<PromptEmbedding> {
    let p = project(e_src, e_tgt)?;
    if alphas.len() != p.ratios.len() {
        return Err(Error::ShapeMismatch { expected: alloc::vec![p.ratios.len()], got: alloc::vec![alphas.len()] });
    }
    recombine(e_src, &p.edit, |i| alphas[i], beta)
}

fn recombine(
    e_src: &PromptEmbedding,
    edit: &PromptEmbedding,
    alpha: impl Fn(usize) -> f64,
    beta: f64,
) -> Result<PromptEmbedding> {
    let c = e_src.dims().2;
    let mut out = Vec::with_capacity(e_src.data.len());
    for (i, (s, e)) in e_src.tokens().zip(edit.tokens()).enumerate() {
        let a = alpha(i);
        out.extend(s.iter().zip(e).map(|(sv, ev)| a * sv + beta * ev));
    }
    debug_assert_eq!(out.len() % c, 0);
    PromptEmbedding::new(Array::from_vec(e_src.data.shape(), out)?, Provenance::Combined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn emb(tokens: &[&[f64]]) -> PromptEmbedding {
        let c = tokens[0].len();
        let data: Vec<f64> = tokens.iter().flat_map(|t| t.iter().copied()).collect();
        PromptEmbedding::new(Array::from_vec(&[1, tokens.len(), c], data).unwrap(), Provenance::Encoded).unwrap()
    }

    #[test]
    fn subtraction_cases() {
        let s = emb(&[&[1.0, 0.0]]);
        let t = emb(&[&[0.0, 1.0]]);
        assert_eq!(vector_subtraction(&s, &t, 0.0).unwrap().data(), s.data());
        assert_eq!(vector_subtraction(&s, &t, 1.0).unwrap().data(), t.data());
        assert_eq!(vector_subtraction(&s, &t, 1.5).unwrap().data().data(), &[-0.5, 1.5]);
        let bad = emb(&[&[0.0, 1.0, 2.0]]);
        assert!(vector_subtraction(&s, &bad, 0.5).is_err());
    }

    #[test]
    fn projection_hand_example() {
        let s = emb(&[&[1.0, 0.0]]);
        let t = emb(&[&[3.0, 4.0]]);
        let p = project(&s, &t).unwrap();
        assert_eq!(p.ratios, vec![3.0]);
        assert_eq!(p.edit.data().data(), &[0.0, 4.0]);
        assert_eq!(vector_projection(&s, &t, 1.0, 1.0).unwrap().data().data(), &[1.0, 4.0]);
    }

    #[test]
    fn parallel_target_has_no_edit() {
        let s = emb(&[&[0.5, -1.0, 2.0]]);
        let t = emb(&[&[1.5, -3.0, 6.0]]);
        let out = vector_projection(&s, &t, 0.8, 1.3).unwrap();
        for (o, sv) in out.data().data().iter().zip(s.data().data()) {
            assert!((o - 0.8 * sv).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_token_is_named() {
        let s = emb(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let t = emb(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(vector_projection(&s, &t, 1.0, 1.0), Err(Error::DegenerateSource { batch: 0, token: 1 }));
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-3.0..3.0f64, 12), prop::collection::vec(-3.0..3.0f64, 12))
            .prop_filter("nonzero source tokens", |(s, _)| s.chunks(4).all(|c| c.iter().any(|v| v.abs() > 1e-3)))
    }

    proptest! {
        #[test]
        fn both_combinations_are_linear_in_target((s, t) in arb_pair(), k in -2.0..2.0f64) {
            let s = PromptEmbedding::new(Array::from_vec(&[1, 3, 4], s).unwrap(), Provenance::Learned).unwrap();
            let t1 = PromptEmbedding::new(Array::from_vec(&[1, 3, 4], t.clone()).unwrap(), Provenance::Encoded).unwrap();
            let tk = PromptEmbedding::new(
                Array::from_vec(&[1, 3, 4], t.iter().map(|v| k * v).collect()).unwrap(),
                Provenance::Encoded,
            ).unwrap();
            // edit component scales with the target
            let e1 = project(&s, &t1).unwrap();
            let ek = project(&s, &tk).unwrap();
            for (a, b) in e1.edit.data().data().iter().zip(ek.edit.data().data()) {
                prop_assert!((k * a - b).abs() < 1e-9);
            }
            for (a, b) in e1.ratios.iter().zip(&ek.ratios) {
                prop_assert!((k * a - b).abs() < 1e-9);
            }
            // subtraction: gamma * t part is linear
            let g = 0.7;
            let z = PromptEmbedding::new(Array::zeros(&[1, 3, 4]), Provenance::Encoded).unwrap();
            let base = vector_subtraction(&s, &z, g).unwrap();
            let full = vector_subtraction(&s, &tk, g).unwrap();
            for ((f, b), tv) in full.data().data().iter().zip(base.data().data()).zip(&t) {
                prop_assert!((f - b - g * k * tv).abs() < 1e-9);
            }
        }
    }
}
