//! UNet-shaped conditional noise predictor.
//!
//! Parameters live in a flat map keyed by dotted paths such as
//! `encoder.0.crossattn.kw`. The first segment pair names the stage
//! (`encoder.{0..3}`, `mid`, `decoder.{0..3}`), the next the block
//! (`proj`, `resnet`, `selfattn`, `crossattn`) and the last the leaf.
//! Forgetting strategies and the fine-tuning recipe select parameters
//! purely through these paths.

mod ops;
mod unet;

pub(crate) use ops::dot as ops_dot;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::standard_normal;
use crate::{Array, Error, PromptEmbedding, Result};

pub use unet::{batch_loss_and_grads, Gradients, TrainSample};

/// Shape of the toy UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageLayout {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of encoder stages 0..3; decoder stage `i` mirrors
    /// encoder stage `3 - i` and mid uses the deepest width.
    pub widths: [usize; 4],
    /// Prompt length `N`.
    pub tokens: usize,
    /// Prompt channel width `C`.
    pub embed_dim: usize,
    pub time_features: usize,
}

impl Default for StageLayout {
    fn default() -> Self {
        Self {
            in_channels: 4,
            height: 8,
            width: 8,
            widths: [32, 64, 128, 128],
            tokens: 8,
            embed_dim: 64,
            time_features: 32,
        }
    }
}

impl StageLayout {
    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.height > 0
            && self.width > 0
            && self.height.is_multiple_of(8)
            && self.width.is_multiple_of(8)
            && self.widths.iter().all(|&w| w > 0)
            && self.tokens > 0
            && self.embed_dim > 0
            && self.time_features >= 2
            && self.time_features.is_multiple_of(2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid stage layout {self:?}")))
        }
    }

    /// Shape of the noisy input and of the predicted noise.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// Shape of a prompt embedding with batch size one.
    pub fn embedding_shape(&self) -> [usize; 3] {
        [1, self.tokens, self.embed_dim]
    }

    /// Token grid `(h, w)` at a resolution level (0 is full resolution).
    pub fn grid(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn stage_width(&self, stage: Stage) -> usize {
        self.widths[stage.level()]
    }

    /// Decoder stage `i` takes its skip connection from this encoder stage.
    pub fn skip_source(decoder: usize) -> usize {
        3 - decoder
    }

    /// Every parameter path with its shape, in path order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, c) = (self.time_features, self.embed_dim);
        let mut out = Vec::new();
        for stage in Stage::all() {
            let p = stage.prefix();
            let d = self.stage_width(stage);
            let level = stage.level();
            let (gh, gw) = self.grid(level);
            let positions = gh * gw;
            let proj_in = match stage {
                Stage::Encoder(0) => Some(self.in_channels),
                Stage::Encoder(i) => Some(4 * self.widths[i - 1]),
                Stage::Mid => None,
                Stage::Decoder(0) => Some(self.widths[3] + self.widths[Self::skip_source(0)]),
                Stage::Decoder(i) => {
                    Some(self.widths[Stage::Decoder(i - 1).level()] + self.widths[Self::skip_source(i)])
                }
            };
            if let Some(fan_in) = proj_in {
                out.push((format!("{p}.proj.w_in"), vec![fan_in, d]));
                out.push((format!("{p}.proj.b_in"), vec![d]));
                out.push((format!("{p}.proj.pos"), vec![positions, d]));
            }
            if stage == Stage::Decoder(3) {
                out.push((format!("{p}.proj.w_out"), vec![d, self.in_channels]));
                out.push((format!("{p}.proj.b_out"), vec![self.in_channels]));
            }
            for (leaf, shape) in [
                ("w1", vec![d, d]),
                ("b1", vec![d]),
                ("tw", vec![f, d]),
                ("tb", vec![d]),
                ("w2", vec![d, d]),
                ("b2", vec![d]),
            ] {
                out.push((format!("{p}.resnet.{leaf}"), shape));
            }
            for leaf in ["qw", "kw", "vw", "ow"] {
                out.push((format!("{p}.selfattn.{leaf}"), vec![d, d]));
            }
            for (leaf, rows) in [("qw", d), ("kw", c), ("vw", c), ("ow", d)] {
                out.push((format!("{p}.crossattn.{leaf}"), vec![rows, d]));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// One of the nine UNet stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder(usize),
    Mid,
    Decoder(usize),
}

impl Stage {
    pub fn all() -> [Stage; 9] {
        [
            Stage::Encoder(0),
            Stage::Encoder(1),
            Stage::Encoder(2),
            Stage::Encoder(3),
            Stage::Mid,
            Stage::Decoder(0),
            Stage::Decoder(1),
            Stage::Decoder(2),
            Stage::Decoder(3),
        ]
    }

    pub fn prefix(self) -> String {
        match self {
            Stage::Encoder(i) => format!("encoder.{i}"),
            Stage::Mid => "mid".to_string(),
            Stage::Decoder(i) => format!("decoder.{i}"),
        }
    }

    /// Resolution level the stage runs at.
    pub fn level(self) -> usize {
        match self {
            Stage::Encoder(i) => i,
            Stage::Mid => 3,
            Stage::Decoder(i) => 3 - i,
        }
    }

    /// Stage a parameter path belongs to.
    pub fn of_path(path: &str) -> Option<Stage> {
        let mut parts = path.split('.');
        match parts.next()? {
            "mid" => Some(Stage::Mid),
            "encoder" => parts.next()?.parse().ok().filter(|&i: &usize| i < 4).map(Stage::Encoder),
            "decoder" => parts.next()?.parse().ok().filter(|&i: &usize| i < 4).map(Stage::Decoder),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

/// Predicate over parameter paths.
#[derive(Debug, Clone, PartialEq)]
pub enum PathPredicate {
    Never,
    Always,
    Prefix(String),
    Contains(String),
    /// Some dot-separated segment equals the string.
    Segment(String),
    /// Shell-style pattern where `*` matches any run of characters.
    Glob(String),
    Any(Vec<PathPredicate>),
    All(Vec<PathPredicate>),
    Not(alloc::boxed::Box<PathPredicate>),
}

impl PathPredicate {
    pub fn matches(&self, path: &str) -> bool {
        match self {
            PathPredicate::Never => false,
            PathPredicate::Always => true,
            PathPredicate::Prefix(p) => path.starts_with(p.as_str()),
            PathPredicate::Contains(s) => path.contains(s.as_str()),
            PathPredicate::Segment(s) => path.split('.').any(|seg| seg == s),
            PathPredicate::Glob(g) => glob_match(g.as_bytes(), path.as_bytes()),
            PathPredicate::Any(ps) => ps.iter().any(|p| p.matches(path)),
            PathPredicate::All(ps) => ps.iter().all(|p| p.matches(path)),
            PathPredicate::Not(p) => !p.matches(path),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        PathPredicate::Not(alloc::boxed::Box::new(self))
    }

    /// Leaves of the self- and cross-attention blocks.
    pub fn attention() -> Self {
        PathPredicate::Any(vec![
            PathPredicate::Segment("selfattn".into()),
            PathPredicate::Segment("crossattn".into()),
        ])
    }

    pub fn stage(stage: Stage) -> Self {
        PathPredicate::Prefix(format!("{}.", stage.prefix()))
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if p < pattern.len() && pattern[p] == text[t] {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

/// Named parameter tree of the denoiser. The path set is fixed by the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    layout: StageLayout,
    entries: BTreeMap<String, Array>,
}

impl DenoiserParams {
    /// Seeded random initialization.
    pub fn init(layout: StageLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for (path, shape) in layout.param_shapes() {
            let leaf = path.rsplit('.').next().unwrap_or_default();
            let scale = match leaf {
                b if b.starts_with('b') && shape.len() == 1 => 0.0,
                "pos" => 0.1,
                // residual branch outputs start small
                "w2" | "ow" => 0.2 / libm::sqrt(shape[0] as f64),
                _ => 1.0 / libm::sqrt(shape[0] as f64),
            };
            let mut arr = standard_normal(&mut rng, &shape);
            arr.data_mut().iter_mut().for_each(|v| *v *= scale);
            entries.insert(path, arr);
        }
        Ok(Self { layout, entries })
    }

    /// Builds params from explicit entries; the path set and shapes must match the layout.
    pub fn from_entries(layout: StageLayout, entries: BTreeMap<String, Array>) -> Result<Self> {
        layout.validate()?;
        let expected = layout.param_shapes();
        let expected_paths: BTreeSet<&str> = expected.iter().map(|(p, _)| p.as_str()).collect();
        let got: BTreeSet<&str> = entries.keys().map(String::as_str).collect();
        if expected_paths != got {
            let diff = expected_paths.symmetric_difference(&got).map(|s| s.to_string()).collect();
            return Err(Error::PathMismatch(diff));
        }
        for (path, shape) in &expected {
            let arr = &entries[path];
            if arr.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { expected: shape.clone(), got: arr.shape().to_vec() });
            }
        }
        Ok(Self { layout, entries })
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn get(&self, path: &str) -> Option<&Array> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Array> {
        self.entries.get_mut(path)
    }

    pub fn entries(&self) -> &BTreeMap<String, Array> {
        &self.entries
    }

    /// Values only: the path set cannot change.
    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Same path set and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let entries = self.entries.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect();
        Self { layout: self.layout, entries }
    }

    pub(crate) fn leaf(&self, path: &str) -> &[f64] {
        self.entries.get(path).unwrap_or_else(|| panic!("missing parameter {path}")).data()
    }

    /// Paths adjusted by joint fine-tuning: encoder 0-2 and decoder 1-3.
    /// The deepest stages (encoder.3, mid, decoder.0) stay frozen.
    pub fn trainable_paths(&self) -> BTreeSet<String> {
        self.select_paths(&trainable_predicate())
    }

    pub fn select_paths(&self, predicate: &PathPredicate) -> BTreeSet<String> {
        self.entries.keys().filter(|p| predicate.matches(p)).cloned().collect()
    }

    /// Path sets differ → symmetric difference.
    pub fn check_same_structure(&self, other: &DenoiserParams) -> Result<()> {
        let a: BTreeSet<&String> = self.entries.keys().collect();
        let b: BTreeSet<&String> = other.entries.keys().collect();
        if a != b {
            return Err(Error::PathMismatch(a.symmetric_difference(&b).map(|s| (*s).clone()).collect()));
        }
        for (k, v) in &self.entries {
            v.check_same_shape(&other.entries[k])?;
        }
        Ok(())
    }

    /// Noise prediction `eps_theta(x_t, t, e)` for a single image.
    pub fn predict_noise(&self, xt: &Array, t: usize, e: &PromptEmbedding) -> Result<Array> {
        self.check_inputs(xt, e)?;
        Ok(unet::forward(self, xt.data(), t, e.data().data()).0)
    }

    pub(crate) fn check_inputs(&self, xt: &Array, e: &PromptEmbedding) -> Result<()> {
        if xt.shape() != self.layout.input_shape() {
            return Err(Error::ShapeMismatch { expected: self.layout.input_shape().to_vec(), got: xt.shape().to_vec() });
        }
        if e.data().shape() != self.layout.embedding_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.layout.embedding_shape().to_vec(),
                got: e.data().shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub(crate) fn trainable_predicate() -> PathPredicate {
    PathPredicate::Any(
        [Stage::Encoder(0), Stage::Encoder(1), Stage::Encoder(2), Stage::Decoder(1), Stage::Decoder(2), Stage::Decoder(3)]
            .into_iter()
            .map(PathPredicate::stage)
            .collect(),
    )
}
