//! Settings shared by the CLI and the service. Each option group is both a
//! TOML table and a set of CLI flags; a flag wins over the file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use forgedit_core::editor::{Sampling, Thresholds};
use forgedit_core::finetune::{DreamBoothConfig, DreamBoothVariant, FinetuneConfig, PretrainConfig};
use forgedit_core::text::{CaptionProvider, FixtureCaptions};
use forgedit_core::{RgbImage, StageLayout};
use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::pipeline::Method;
use crate::{Error, Result};

/// Captions of the bundled fixture images.
pub const BUNDLED_CAPTIONS: &str = include_str!("../fixtures/captions.tsv");

/// Calibrated on the bundled fixture and base model.
pub const DEFAULT_MIN_ALIGNMENT: f64 = -0.12;
pub const DEFAULT_MIN_FIDELITY: f64 = -0.1;

macro_rules! overlay {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl $ty {
            /// Fields set in `self` win over `base`.
            pub fn overlay(&self, base: &Self) -> Self {
                Self { $($f: self.$f.clone().or_else(|| base.$f.clone())),* }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Calibrated for the toy model.
    Desk,
    /// The reference hyperparameters for a pretrained large model.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Joint,
    Dreambooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Variant {
    UnetOnly,
    UnetAndText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutName {
    #[default]
    Default,
    /// A narrow network for quick experiments and tests.
    Tiny,
}

impl LayoutName {
    pub fn layout(self) -> StageLayout {
        match self {
            LayoutName::Default => StageLayout::default(),
            LayoutName::Tiny => {
                StageLayout { widths: [8, 8, 16, 16], embed_dim: 16, time_features: 8, ..StageLayout::default() }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionOpts {
    /// Caption source when no caption is given (only `fixture` is built in).
    #[arg(long = "caption-provider")]
    pub provider: Option<String>,
    /// Tab-separated `image-id<TAB>caption` table for the fixture provider.
    #[arg(long = "caption-file")]
    pub file: Option<PathBuf>,
    /// Uses this caption verbatim.
    #[arg(long)]
    pub caption: Option<String>,
}
overlay!(CaptionOpts { provider, file, caption });

impl CaptionOpts {
    /// Returns the caption and where it came from.
    pub fn resolve(&self, image_id: &str, image: &RgbImage) -> Result<(String, String)> {
        if let Some(c) = &self.caption {
            if c.trim().is_empty() {
                return Err(Error::Invalid("caption is empty".into()));
            }
            return Ok((c.clone(), "override".into()));
        }
        let provider: Box<dyn CaptionProvider> = match self.provider.as_deref().unwrap_or("fixture") {
            "fixture" => {
                let text = match &self.file {
                    Some(p) => std::fs::read_to_string(p).at(p)?,
                    None => BUNDLED_CAPTIONS.to_string(),
                };
                Box::new(FixtureCaptions::parse_tsv(&text)?)
            }
            other => return Err(Error::Config(format!("unknown caption provider {other:?}"))),
        };
        let caption = provider.caption(image_id, image).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok((caption, format!("provider:{}", provider.name())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneOpts {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Base hyperparameters for the joint fine-tune (default desk).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub lr_embedding: Option<f64>,
    #[arg(long)]
    pub lr_unet: Option<f64>,
    #[arg(long)]
    pub batch_repeat: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub loss_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
overlay!(FinetuneOpts { mode, preset, lr_embedding, lr_unet, batch_repeat, min_steps, max_steps, loss_threshold, seed });

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct DreamboothOpts {
    #[arg(long = "db-lr")]
    pub lr: Option<f64>,
    #[arg(long = "db-batch")]
    pub batch: Option<usize>,
    #[arg(long = "db-steps")]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
}
overlay!(DreamboothOpts { lr, batch, steps, variant });

/// Resolves the fine-tune method from option groups already overlaid.
pub fn resolve_method(ft: &FinetuneOpts, db: &DreamboothOpts) -> Result<Method> {
    let method = match ft.mode.unwrap_or(Mode::Joint) {
        Mode::Joint => {
            let mut c = match ft.preset.unwrap_or(Preset::Desk) {
                Preset::Desk => FinetuneConfig::desk(),
                Preset::Paper => FinetuneConfig::default(),
            };
            c.lr_embedding = ft.lr_embedding.unwrap_or(c.lr_embedding);
            c.lr_unet = ft.lr_unet.unwrap_or(c.lr_unet);
            c.batch_repeat = ft.batch_repeat.unwrap_or(c.batch_repeat);
            c.min_steps = ft.min_steps.unwrap_or(c.min_steps);
            c.max_steps = ft.max_steps.unwrap_or(c.max_steps);
            c.loss_threshold = ft.loss_threshold.unwrap_or(c.loss_threshold);
            c.seed = ft.seed.unwrap_or(c.seed);
            c.validate()?;
            Method::Joint(c)
        }
        Mode::Dreambooth => {
            let mut c = DreamBoothConfig::default();
            c.lr = db.lr.unwrap_or(c.lr);
            c.batch = db.batch.unwrap_or(c.batch);
            c.steps = db.steps.unwrap_or(c.steps);
            c.variant = match db.variant {
                Some(Variant::UnetAndText) => DreamBoothVariant::UnetAndText,
                Some(Variant::UnetOnly) => DreamBoothVariant::UnetOnly,
                None => c.variant,
            };
            c.seed = ft.seed.unwrap_or(c.seed);
            c.validate()?;
            Method::Dreambooth(c)
        }
    };
    Ok(method)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingOpts {
    /// Classifier-free guidance scale.
    #[arg(long = "guidance")]
    pub guidance_scale: Option<f64>,
    /// Seed of the initial sampling noise.
    #[arg(long = "seed")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
}
overlay!(SamplingOpts { guidance_scale, seed, ddim_steps });

impl SamplingOpts {
    pub fn resolve(&self) -> Sampling {
        let d = Sampling::default();
        Sampling {
            guidance_scale: self.guidance_scale.unwrap_or(d.guidance_scale),
            seed: self.seed.unwrap_or(d.seed),
            ddim_steps: self.ddim_steps.unwrap_or(d.ddim_steps),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct AutoOpts {
    #[arg(long)]
    pub min_alignment: Option<f64>,
    #[arg(long)]
    pub min_fidelity: Option<f64>,
    /// Forgetting strategies tried after the plain sweep, in order.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
}
overlay!(AutoOpts { min_alignment, min_fidelity, strategies });

impl AutoOpts {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            min_alignment: self.min_alignment.unwrap_or(DEFAULT_MIN_ALIGNMENT),
            min_fidelity: self.min_fidelity.unwrap_or(DEFAULT_MIN_FIDELITY),
        }
    }

    pub fn strategies(&self) -> Vec<String> {
        self.strategies.clone().unwrap_or_else(|| vec!["decoderattn".into(), "encoderattn".into()])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOpts {
    #[arg(long, value_enum)]
    pub layout: Option<LayoutName>,
    /// Diffusion steps T of the noise schedule.
    #[arg(long)]
    pub schedule_steps: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}
overlay!(PretrainOpts { layout, schedule_steps, steps, batch, lr, lr_final, cond_dropout, init_seed, seed });

pub const DEFAULT_SCHEDULE_STEPS: usize = 100;

impl PretrainOpts {
    pub fn config(&self) -> PretrainConfig {
        let d = PretrainConfig::default();
        PretrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            batch: self.batch.unwrap_or(d.batch),
            lr: self.lr.unwrap_or(d.lr),
            lr_final: self.lr_final.unwrap_or(d.lr_final),
            cond_dropout: self.cond_dropout.unwrap_or(d.cond_dropout),
            init_seed: self.init_seed.unwrap_or(d.init_seed),
            seed: self.seed.unwrap_or(d.seed),
            adam: d.adam,
        }
    }
}

/// Contents of the TOML settings file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub workers: Option<usize>,
    /// Model directory; defaults to `<data_dir>/model`.
    pub model: Option<PathBuf>,
    pub captions: CaptionOpts,
    pub finetune: FinetuneOpts,
    pub dreambooth: DreamboothOpts,
    pub sampling: SamplingOpts,
    pub auto: AutoOpts,
    pub pretrain: PretrainOpts,
}

pub const DEFAULT_DATA_DIR: &str = "forgedit-data";
pub const DEFAULT_PORT: u16 = 8080;

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.data_dir().join("model"))
    }

    pub fn port(&self) -> u16 {
        self.port.unwrap_or(DEFAULT_PORT)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overlay() {
        let text = r#"
            data_dir = "/tmp/x"
            workers = 2
            [finetune]
            preset = "paper"
            lr_unet = 1e-4
            [sampling]
            guidance_scale = 5.0
            [auto]
            strategies = ["encoderattn"]
        "#;
        let s: Settings = toml::from_str(text).unwrap();
        assert_eq!(s.workers(), 2);
        let flags = FinetuneOpts { lr_unet: Some(2e-4), seed: Some(4), ..Default::default() };
        let ft = flags.overlay(&s.finetune);
        let Method::Joint(c) = resolve_method(&ft, &DreamboothOpts::default()).unwrap() else { panic!() };
        assert_eq!(c.lr_unet, 2e-4);
        assert_eq!(c.seed, 4);
        assert_eq!(c.max_steps, FinetuneConfig::default().max_steps);
        assert_eq!(SamplingOpts::default().overlay(&s.sampling).resolve().guidance_scale, 5.0);
        assert_eq!(s.auto.strategies(), vec!["encoderattn".to_string()]);
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }

    #[test]
    fn defaults_are_desk_joint() {
        let m = resolve_method(&FinetuneOpts::default(), &DreamboothOpts::default()).unwrap();
        assert_eq!(m, Method::Joint(FinetuneConfig::desk()));
        let ft = FinetuneOpts { mode: Some(Mode::Dreambooth), seed: Some(3), ..Default::default() };
        let db = DreamboothOpts { variant: Some(Variant::UnetAndText), ..Default::default() };
        let Method::Dreambooth(c) = resolve_method(&ft, &db).unwrap() else { panic!() };
        assert_eq!((c.seed, c.variant), (3, DreamBoothVariant::UnetAndText));
        let bad = FinetuneOpts { min_steps: Some(9), max_steps: Some(3), ..Default::default() };
        assert!(resolve_method(&bad, &DreamboothOpts::default()).is_err());
    }

    #[test]
    fn captions_resolve() {
        let (img, cap) = forgedit_core::fixtures::edit_fixture();
        let opts = CaptionOpts::default();
        assert_eq!(opts.resolve("edit", &img).unwrap(), (cap, "provider:fixture".to_string()));
        assert!(opts.resolve("unknown", &img).is_err());
        let o = CaptionOpts { caption: Some("a photo of a dog".into()), ..Default::default() };
        assert_eq!(o.resolve("edit", &img).unwrap().0, "a photo of a dog");
        let o = CaptionOpts { caption: Some("  ".into()), ..Default::default() };
        assert!(o.resolve("edit", &img).is_err());
    }
}
