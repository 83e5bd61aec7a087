//! The complete re-identification model: shared backbone, optional token
//! selection, optional masked aggregation and identity classifiers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::hma::{class_tokens, Hma, HmaConfig, HmaOutput};
use crate::sfts::{select_tokens, Selection, SftsConfig, TokenMask};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::vit::{trunc_normal, Backbone, BackboneConfig, BackboneInput, Modality};

/// Component switches for the ablation rows A-F.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Backbone only.
    A,
    /// + masked aggregation.
    B,
    /// + token selection.
    C,
    /// + background consistency.
    D,
    /// + identity-center refinement (no background consistency).
    E,
    /// Everything.
    F,
}

/// Which modules and losses a preset enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub sfts: bool,
    pub hma: bool,
    pub bcc: bool,
    pub ocfr: bool,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E, Preset::F];

    pub fn components(self) -> Components {
        let (sfts, hma, bcc, ocfr) = match self {
            Preset::A => (false, false, false, false),
            Preset::B => (false, true, false, false),
            Preset::C => (true, true, false, false),
            Preset::D => (true, true, true, false),
            Preset::E => (true, true, false, true),
            Preset::F => (true, true, true, true),
        };
        Components { sfts, hma, bcc, ocfr }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            "F" => Ok(Preset::F),
            _ => Err(Error::config(format!("unknown preset {s:?} (A..F)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub use_sfts: bool,
    pub use_hma: bool,
    pub hma: HmaConfig,
    pub sfts: SftsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("need at least two training identities"));
        }
        let np = self.backbone.num_patches();
        if self.sfts.patch != self.backbone.patch {
            return Err(Error::config("selection patch size must match the backbone"));
        }
        if self.use_sfts {
            if self.sfts.s == 0 || self.sfts.s > np {
                return Err(Error::config(format!("s = {} outside 1..={np}", self.sfts.s)));
            }
            if self.sfts.f == 0 || self.sfts.f > np {
                return Err(Error::config(format!("f = {} outside 1..={np}", self.sfts.f)));
            }
            if self.sfts.levels == 0 {
                return Err(Error::config("wavelet levels must be positive"));
            }
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        if self.use_hma {
            self.hma.mode.width(self.backbone.dim)
        } else {
            3 * self.backbone.dim
        }
    }
}

/// One tri-modal input.
#[derive(Clone, Copy)]
pub struct ModelInput<'a> {
    pub images: [&'a Image; 3],
    pub camera: usize,
}

pub struct ModelForward {
    pub samples: usize,
    /// Backbone tokens `[B·3·T, D]`, layout `[sample][modality][token]`.
    pub tokens: Var,
    /// Backbone class token per modality, each `[B, D]`.
    pub backbone_cls: [Var; 3],
    /// Selections when token selection is enabled.
    pub selections: Option<Vec<Selection>>,
    /// Kept patches per sample (all patches without selection).
    pub masks: Vec<TokenMask>,
    pub hma: Option<HmaOutput>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub hma: Option<Hma>,
    pub vit_head: ParamId,
    pub hma_head: Option<ParamId>,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let bb = &cfg.backbone;
        let backbone = Backbone::new(bb.clone(), &mut store, rng)?;
        let hma = if cfg.use_hma {
            Some(Hma::new(&mut store, cfg.hma, bb.dim, bb.heads, bb.mlp_ratio, rng)?)
        } else {
            None
        };
        let vit_head = store.add("head.backbone.weight", trunc_normal(rng, &[bb.dim, cfg.num_classes]))?;
        let hma_head = if cfg.use_hma {
            Some(store.add(
                "head.aggregate.weight",
                trunc_normal(rng, &[cfg.feature_width(), cfg.num_classes]),
            )?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            store,
            backbone,
            hma,
            vit_head,
            hma_head,
        })
    }

    pub fn tokens(&self) -> usize {
        self.cfg.backbone.tokens()
    }

    fn backbone_inputs<'a>(inputs: &[ModelInput<'a>]) -> Vec<BackboneInput<'a>> {
        inputs
            .iter()
            .flat_map(|s| {
                Modality::ALL.map(|m| BackboneInput {
                    image: s.images[m.index()],
                    modality: m,
                    camera: s.camera,
                })
            })
            .collect()
    }

    /// Forward pass for a batch of samples.
    pub fn forward(&self, tape: &mut Tape, inputs: &[ModelInput]) -> Result<ModelForward> {
        let b = inputs.len();
        let t = self.tokens();
        let np = t - 1;
        let out = self.backbone.forward(tape, &self.store, &Self::backbone_inputs(inputs))?;
        let tokens = out.tokens;
        let cls: Vec<Var> = (0..3)
            .map(|m| class_tokens(tape, tokens, m, b, t))
            .collect::<Result<_>>()?;

        let selections = if self.cfg.use_sfts {
            let heads = self.cfg.backbone.heads;
            let mut sels = Vec::with_capacity(b);
            for (i, inp) in inputs.iter().enumerate() {
                let stacks = [0, 1, 2].map(|m| out.attention_stack(tape, i * 3 + m, heads, t));
                sels.push(select_tokens([&stacks[0], &stacks[1], &stacks[2]], inp.images, &self.cfg.sfts)?);
            }
            Some(sels)
        } else {
            None
        };
        let masks: Vec<TokenMask> = match &selections {
            Some(s) => s.iter().map(|s| s.union.clone()).collect(),
            None => vec![TokenMask::ones(np); b],
        };
        let hma = match &self.hma {
            Some(h) => Some(h.forward(tape, &self.store, tokens, &masks, t)?),
            None => None,
        };
        Ok(ModelForward {
            samples: b,
            tokens,
            backbone_cls: [cls[0], cls[1], cls[2]],
            selections,
            masks,
            hma,
        })
    }

    /// Retrieval feature: the aggregated feature, or the concatenated
    /// backbone class tokens without aggregation.
    pub fn retrieval_feature(&self, tape: &mut Tape, fwd: &ModelForward) -> Result<Var> {
        match &fwd.hma {
            Some(h) => Ok(h.feature),
            None => tape.concat(&fwd.backbone_cls, 1),
        }
    }

    /// Features (and selections) for many samples, `batch` at a time.
    pub fn extract(&self, inputs: &[ModelInput], batch: usize) -> Result<(Tensor, Option<Vec<Selection>>)> {
        let width = self.cfg.feature_width();
        let mut feats = Vec::with_capacity(inputs.len() * width);
        let mut sels = self.cfg.use_sfts.then(Vec::new);
        for chunk in inputs.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, chunk)?;
            let f = self.retrieval_feature(&mut tape, &fwd)?;
            feats.extend_from_slice(tape.value(f).data());
            if let (Some(all), Some(s)) = (sels.as_mut(), fwd.selections) {
                all.extend(s);
            }
        }
        if inputs.is_empty() {
            return Err(Error::contract("no samples to extract"));
        }
        Ok((Tensor::from_raw(vec![inputs.len(), width], feats), sels))
    }

    /// Token selection alone (backbone pass only).
    pub fn select(&self, inputs: &[ModelInput], batch: usize) -> Result<Vec<Selection>> {
        if !self.cfg.use_sfts {
            return Err(Error::config("token selection is disabled for this model"));
        }
        let t = self.tokens();
        let heads = self.cfg.backbone.heads;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let bo = self.backbone.forward(&mut tape, &self.store, &Self::backbone_inputs(chunk))?;
            for (i, inp) in chunk.iter().enumerate() {
                let stacks = [0, 1, 2].map(|m| bo.attention_stack(&tape, i * 3 + m, heads, t));
                out.push(select_tokens([&stacks[0], &stacks[1], &stacks[2]], inp.images, &self.cfg.sfts)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(preset: Preset) -> ModelConfig {
        let c = preset.components();
        ModelConfig {
            backbone: BackboneConfig {
                height: 32,
                width: 16,
                patch: 8,
                dim: 16,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                ..Default::default()
            },
            num_classes: 4,
            use_sfts: c.sfts,
            use_hma: c.hma,
            hma: HmaConfig::default(),
            sfts: SftsConfig {
                patch: 8,
                s: 1,
                f: 2,
                levels: 2,
            },
        }
    }

    fn images(rng: &mut ChaCha8Rng) -> Vec<Image> {
        (0..6)
            .map(|_| Image::new(3, 32, 16, (0..3 * 32 * 16).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn preset_table() {
        assert_eq!(
            Preset::A.components(),
            Components { sfts: false, hma: false, bcc: false, ocfr: false }
        );
        assert_eq!(Preset::E.components(), Components { sfts: true, hma: true, bcc: false, ocfr: true });
        assert_eq!("f".parse::<Preset>().unwrap(), Preset::F);
        assert!("G".parse::<Preset>().is_err());
    }

    #[test]
    fn feature_widths_per_preset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = images(&mut rng);
        let inputs = [
            ModelInput { images: [&imgs[0], &imgs[1], &imgs[2]], camera: 0 },
            ModelInput { images: [&imgs[3], &imgs[4], &imgs[5]], camera: 1 },
        ];
        for (p, width, sels) in [(Preset::A, 48, false), (Preset::B, 96, false), (Preset::F, 96, true)] {
            let model = Model::new(cfg(p), &mut rng).unwrap();
            let (f, s) = model.extract(&inputs, 1).unwrap();
            assert_eq!(f.shape(), &[2, width]);
            assert_eq!(s.is_some(), sels);
            if let Some(s) = s {
                let again = model.select(&inputs, 2).unwrap();
                assert_eq!(s, again);
                for sel in &s {
                    assert!(sel.reserved() >= 2);
                }
            }
        }
    }

    #[test]
    fn invalid_selection_counts_are_config_errors() {
        let mut c = cfg(Preset::C);
        c.sfts.f = 9;
        assert!(matches!(Model::new(c, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }
}
