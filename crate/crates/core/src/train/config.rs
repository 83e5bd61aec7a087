use crate::error::{Error, Result};
use crate::hma::{FeatureMode, HmaConfig, Masking};
use crate::model::{Components, ModelConfig, Preset};
use crate::sfts::SftsConfig;
use crate::vit::BackboneConfig;

/// Everything the training loop needs. Loss weights only take effect when
/// the preset enables the corresponding loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr_base: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub p: usize,
    pub k: usize,
    pub s: usize,
    pub f: usize,
    pub dhwt_levels: usize,
    pub alpha: f64,
    pub w_bcc: f64,
    pub w_ocfr: f64,
    pub hma_mode: FeatureMode,
    pub masking: Masking,
    pub shared_encoder: bool,
    pub smoothing: f64,
    pub margin: f64,
    /// Batch-standardise features before the classifiers; the retrieval
    /// and triplet features stay unnormalised.
    pub bn_neck: bool,
    /// Evaluate every this many iterations when a held-out split is
    /// available; 0 disables.
    pub eval_every: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub camera_embedding: bool,
    pub num_cameras: usize,
    pub augment: bool,
    /// Training samples whose selections are compared across epochs.
    pub monitor_samples: usize,
    /// Iterations per epoch; 0 means one pass over the training split.
    pub epoch_iters: usize,
    /// Stop (leaving the schedule untouched) once this many iterations are
    /// done; 0 runs to `total_iters`.
    pub stop_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::F,
            lr_base: 0.001,
            warmup_iters: 100,
            total_iters: 2000,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            p: 4,
            k: 4,
            s: 2,
            f: 10,
            dhwt_levels: 4,
            alpha: 0.8,
            w_bcc: 1.0,
            w_ocfr: 1.0,
            hma_mode: FeatureMode::AveragedPatches,
            masking: Masking::Additive,
            shared_encoder: true,
            smoothing: 0.1,
            margin: 0.3,
            bn_neck: true,
            eval_every: 0,
            height: 64,
            width: 32,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            camera_embedding: true,
            num_cameras: 2,
            augment: true,
            monitor_samples: 32,
            epoch_iters: 0,
            stop_after: 0,
        }
    }
}

impl TrainConfig {
    pub fn components(&self) -> Components {
        self.preset.components()
    }

    /// Loss weights after applying the preset switches.
    pub fn effective_weights(&self) -> (f64, f64) {
        let c = self.components();
        (
            if c.bcc { self.w_bcc } else { 0.0 },
            if c.ocfr { self.w_ocfr } else { 0.0 },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be positive"));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::config("warmup_iters must be below total_iters"));
        }
        if !(self.lr_base > 0.0) || !self.lr_base.is_finite() {
            return Err(Error::config("lr_base must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::config("batch-hard mining needs P >= 2 and K >= 2"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if self.w_bcc < 0.0 || self.w_ocfr < 0.0 || self.margin < 0.0 {
            return Err(Error::config("loss weights and margin must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            height: self.height,
            width: self.width,
            channels: 3,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            use_camera_embedding: self.camera_embedding,
            num_cameras: self.num_cameras,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let c = self.components();
        ModelConfig {
            backbone: self.backbone_config(),
            num_classes,
            use_sfts: c.sfts,
            use_hma: c.hma,
            hma: HmaConfig {
                mode: self.hma_mode,
                masking: self.masking,
                shared_encoder: self.shared_encoder,
            },
            sfts: SftsConfig {
                patch: self.patch,
                s: self.s,
                f: self.f,
                levels: self.dhwt_levels,
            },
        }
    }
}
