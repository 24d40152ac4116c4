use crate::finetune::{joint_finetune, FinetuneConfig, FinetuneResult};
use crate::image::encode_latent;
use crate::{fixtures, DenoiserParams, LatentImage, NoiseSchedule, RgbImage, StageLayout, ToyTextEncoder};

pub fn tiny_layout() -> StageLayout {
    StageLayout { widths: [4, 4, 8, 8], embed_dim: 8, time_features: 4, ..StageLayout::default() }
}

pub struct Kit {
    pub params: DenoiserParams,
    pub encoder: ToyTextEncoder,
    pub sched: NoiseSchedule,
    pub image: RgbImage,
    pub latent: LatentImage,
    pub caption: alloc::string::String,
}

pub fn kit() -> Kit {
    let lay = tiny_layout();
    let (image, caption) = fixtures::edit_fixture();
    Kit {
        params: DenoiserParams::init(lay, 3).unwrap(),
        encoder: ToyTextEncoder::new(lay.tokens, lay.embed_dim, 5).unwrap(),
        sched: NoiseSchedule::cosine(20).unwrap(),
        latent: encode_latent(&image).unwrap(),
        image,
        caption,
    }
}

pub fn quick_cfg() -> FinetuneConfig {
    FinetuneConfig { batch_repeat: 2, min_steps: 3, max_steps: 6, lr_unet: 1e-3, loss_threshold: 0.0, ..FinetuneConfig::default() }
}

pub fn quick_run(k: &Kit) -> FinetuneResult {
    joint_finetune(&k.latent, &k.caption, &k.encoder, &k.params, &k.sched, &quick_cfg(), None).unwrap()
}
