//! Masked aggregation over the selected tokens.
//!
//! Independent stage: each modality's sequence passes through the masked
//! encoder block with unselected patches removed from attention. Collaborative
//! stage: the three sequences of a sample are concatenated along the token axis
//! and passed through the block again with the tripled mask. The retrieval
//! feature is built from the class tokens (and optionally the mean selected
//! patch token) of each modality.
//!
//! Batched token layout is `[sample][modality][token]`, so the three
//! sequences of one sample are contiguous and form one collaborative group.

use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sfts::TokenMask;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::vit::TransformerBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Three class tokens, `3D`.
    ClassOnly,
    /// Per modality `[class; mean selected patch]`, `6D`.
    AveragedPatches,
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_only" => Ok(FeatureMode::ClassOnly),
            "averaged_patches" => Ok(FeatureMode::AveragedPatches),
            other => Err(Error::config(format!(
                "unknown feature mode {other:?} (class_only | averaged_patches)"
            ))),
        }
    }
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::ClassOnly => "class_only",
            FeatureMode::AveragedPatches => "averaged_patches",
        }
    }

    pub fn width(self, dim: usize) -> usize {
        match self {
            FeatureMode::ClassOnly => 3 * dim,
            FeatureMode::AveragedPatches => 6 * dim,
        }
    }
}

/// How unselected tokens are kept out of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Masking {
    /// Zero the unselected inputs and exclude them as attention keys.
    Additive,
    /// Only zero the unselected inputs; they still take part in attention.
    Zeroing,
}

impl FromStr for Masking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Masking::Additive),
            "zeroing" => Ok(Masking::Zeroing),
            other => Err(Error::config(format!("unknown masking {other:?} (additive | zeroing)"))),
        }
    }
}

impl Masking {
    pub fn as_str(self) -> &'static str {
        match self {
            Masking::Additive => "additive",
            Masking::Zeroing => "zeroing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HmaConfig {
    pub mode: FeatureMode,
    pub masking: Masking,
    /// One block for both stages; otherwise each stage has its own.
    pub shared_encoder: bool,
}

impl Default for HmaConfig {
    fn default() -> Self {
        HmaConfig {
            mode: FeatureMode::AveragedPatches,
            masking: Masking::Additive,
            shared_encoder: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hma {
    pub cfg: HmaConfig,
    pub independent: TransformerBlock,
    pub collaborative: TransformerBlock,
}

pub struct HmaOutput {
    /// Independent-stage tokens, same layout as the input.
    pub independent: Var,
    /// Collaborative-stage tokens, same layout as the input.
    pub aggregated: Var,
    /// Retrieval feature `[B, 3D or 6D]`.
    pub feature: Var,
}

/// Token rows kept for each sequence: class token plus selected patches.
fn keep_flags(masks: &[TokenMask]) -> Vec<bool> {
    let mut keep = Vec::new();
    for m in masks {
        for _ in 0..3 {
            keep.push(true);
            keep.extend_from_slice(m.bits());
        }
    }
    keep
}

/// Row index of token `t` of modality `m` in sample `b`.
pub fn token_row(b: usize, m: usize, t: usize, tokens: usize) -> usize {
    (b * 3 + m) * tokens + t
}

/// Gathers the class token of modality `m` for every sample: `[B, D]`.
pub fn class_tokens(tape: &mut Tape, x: Var, m: usize, samples: usize, tokens: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..samples).map(|b| token_row(b, m, 0, tokens)).collect();
    tape.gather_rows(x, &idx)
}

impl Hma {
    pub fn new(
        store: &mut ParamStore,
        cfg: HmaConfig,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let independent = TransformerBlock::new(store, "hma.encoder", dim, heads, mlp_ratio, rng)?;
        let collaborative = if cfg.shared_encoder {
            independent.clone()
        } else {
            TransformerBlock::new(store, "hma.joint_encoder", dim, heads, mlp_ratio, rng)?
        };
        Ok(Hma {
            cfg,
            independent,
            collaborative,
        })
    }

    /// `x` is `[B·3·T, D]` with one mask per sample (length `T − 1`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        masks: &[TokenMask],
        tokens: usize,
    ) -> Result<HmaOutput> {
        let b = masks.len();
        let rows = tape.value(x).rows();
        if b == 0 || rows != b * 3 * tokens {
            return Err(Error::dim(format!(
                "masked encoder got {rows} token rows for {b} samples of 3x{tokens}"
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() + 1 != tokens {
                return Err(Error::dim(format!(
                    "sample {i}: mask length {} for {} patch tokens",
                    m.len(),
                    tokens - 1
                )));
            }
            if m.popcount() == 0 {
                return Err(Error::contract(format!("sample {i}: empty token selection")));
            }
        }
        let keep = keep_flags(masks);
        let factors: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let key_mask = match self.cfg.masking {
            Masking::Additive => Some(keep.as_slice()),
            Masking::Zeroing => None,
        };

        let h = tape.mul_rows(x, &factors)?;
        let h = self.independent.forward(tape, store, h, 3 * b, key_mask)?.tokens;
        let independent = tape.mul_rows(h, &factors)?;
        let h = self.collaborative.forward(tape, store, independent, b, key_mask)?.tokens;
        let aggregated = tape.mul_rows(h, &factors)?;
        let feature = self.feature(tape, aggregated, masks, tokens)?;
        Ok(HmaOutput {
            independent,
            aggregated,
            feature,
        })
    }

    fn feature(&self, tape: &mut Tape, agg: Var, masks: &[TokenMask], tokens: usize) -> Result<Var> {
        let b = masks.len();
        let mut parts = Vec::with_capacity(6);
        for m in 0..3 {
            parts.push(class_tokens(tape, agg, m, b, tokens)?);
            if self.cfg.mode == FeatureMode::AveragedPatches {
                let mut w = vec![0.0; b * b * 3 * tokens];
                for (s, mask) in masks.iter().enumerate() {
                    let inv = 1.0 / mask.popcount() as f64;
                    let row = &mut w[s * b * 3 * tokens..(s + 1) * b * 3 * tokens];
                    for p in mask.indices() {
                        row[token_row(s, m, p + 1, tokens)] = inv;
                    }
                }
                let avg = tape.constant(Tensor::from_raw(vec![b, b * 3 * tokens], w));
                parts.push(tape.matmul(avg, agg)?);
            }
        }
        tape.concat(&parts, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const T: usize = 5;

    fn setup(cfg: HmaConfig) -> (ParamStore, Hma, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let hma = Hma::new(&mut store, cfg, D, 2, 2, &mut rng).unwrap();
        (store, hma, rng)
    }

    fn tokens(rng: &mut ChaCha8Rng, samples: usize) -> Tensor {
        let n = samples * 3 * T * D;
        Tensor::matrix(samples * 3 * T, D, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(hma: &Hma, store: &ParamStore, x: &Tensor, masks: &[TokenMask]) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = hma.forward(&mut tape, store, v, masks, T).unwrap();
        (tape.value(out.aggregated).clone(), tape.value(out.feature).clone())
    }

    #[test]
    fn feature_widths() {
        for (mode, width) in [(FeatureMode::ClassOnly, 3 * D), (FeatureMode::AveragedPatches, 6 * D)] {
            let (store, hma, mut rng) = setup(HmaConfig {
                mode,
                ..Default::default()
            });
            let x = tokens(&mut rng, 2);
            let masks = vec![TokenMask::ones(T - 1), TokenMask::from_indices(T - 1, &[2]).unwrap()];
            let (agg, f) = run(&hma, &store, &x, &masks);
            assert_eq!(agg.shape(), &[2 * 3 * T, D]);
            assert_eq!(f.shape(), &[2, width]);
        }
        assert!("mean".parse::<FeatureMode>().is_err());
    }

    #[test]
    fn single_selected_token_average_is_that_token() {
        let (store, hma, mut rng) = setup(HmaConfig::default());
        let x = tokens(&mut rng, 1);
        let masks = vec![TokenMask::from_indices(T - 1, &[1]).unwrap()];
        let (agg, f) = run(&hma, &store, &x, &masks);
        for m in 0..3 {
            let avg = &f.row(0)[(2 * m + 1) * D..(2 * m + 2) * D];
            assert_eq!(avg, agg.row(token_row(0, m, 2, T)));
            let cls = &f.row(0)[2 * m * D..(2 * m + 1) * D];
            assert_eq!(cls, agg.row(token_row(0, m, 0, T)));
        }
    }

    #[test]
    fn unselected_outputs_are_zero_and_background_is_ignored() {
        let (store, hma, mut rng) = setup(HmaConfig::default());
        let x = tokens(&mut rng, 2);
        let masks = vec![
            TokenMask::from_indices(T - 1, &[0, 3]).unwrap(),
            TokenMask::from_indices(T - 1, &[1]).unwrap(),
        ];
        let (agg, f) = run(&hma, &store, &x, &masks);
        let mut y = x.clone();
        for b in 0..2 {
            for m in 0..3 {
                for p in 0..T - 1 {
                    if !masks[b].get(p) {
                        let r = token_row(b, m, p + 1, T);
                        assert!(agg.row(r).iter().all(|&v| v == 0.0));
                        for c in 0..D {
                            y.data_mut()[r * D + c] += rng.gen_range(-5.0..5.0);
                        }
                    }
                }
            }
        }
        let (agg2, f2) = run(&hma, &store, &y, &masks);
        assert!(agg.max_abs_diff(&agg2) < 1e-12);
        assert!(f.max_abs_diff(&f2) < 1e-12);
    }

    #[test]
    fn zeroing_mode_lets_background_positions_draw_attention() {
        let (store, hma, mut rng) = setup(HmaConfig {
            masking: Masking::Zeroing,
            ..Default::default()
        });
        let (store_a, hma_a, _) = setup(HmaConfig::default());
        let x = tokens(&mut rng, 1);
        let masks = vec![TokenMask::from_indices(T - 1, &[0]).unwrap()];
        let (_, fz) = run(&hma, &store, &x, &masks);
        let (_, fa) = run(&hma_a, &store_a, &x, &masks);
        assert!(fz.max_abs_diff(&fa) > 1e-6);
    }

    #[test]
    fn full_mask_matches_plain_blocks() {
        let (store, hma, mut rng) = setup(HmaConfig::default());
        let x = tokens(&mut rng, 1);
        let masks = vec![TokenMask::ones(T - 1)];
        let (agg, _) = run(&hma, &store, &x, &masks);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let h = hma.independent.forward(&mut tape, &store, v, 3, None).unwrap().tokens;
        let h = hma.collaborative.forward(&mut tape, &store, h, 1, None).unwrap().tokens;
        assert!(agg.max_abs_diff(tape.value(h)) < 1e-12);
    }

    #[test]
    fn identical_modalities_give_identical_class_outputs() {
        let (store, hma, mut rng) = setup(HmaConfig::default());
        let one = tokens(&mut rng, 1);
        let mut x = one.clone();
        for m in 1..3 {
            for t in 0..T {
                let src = one.row(t).to_vec();
                x.data_mut()[(m * T + t) * D..(m * T + t + 1) * D].copy_from_slice(&src);
            }
        }
        let (_, f) = run(&hma, &store, &x, &[TokenMask::ones(T - 1)]);
        let w = 2 * D;
        assert!(f.row(0)[..w].iter().zip(&f.row(0)[w..2 * w]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(f.row(0)[..w].iter().zip(&f.row(0)[2 * w..]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn shared_and_separate_encoders() {
        let (store, hma, _) = setup(HmaConfig::default());
        assert_eq!(hma.independent.param_ids(), hma.collaborative.param_ids());
        assert_eq!(store.ids().count(), 12);
        let (store, hma, _) = setup(HmaConfig {
            shared_encoder: false,
            ..Default::default()
        });
        assert_ne!(hma.independent.param_ids(), hma.collaborative.param_ids());
        assert_eq!(store.ids().count(), 24);
    }

    #[test]
    fn empty_selection_is_rejected() {
        let (store, hma, mut rng) = setup(HmaConfig::default());
        let x = tokens(&mut rng, 1);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let r = hma.forward(&mut tape, &store, v, &[TokenMask::zeros(T - 1)], T);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
