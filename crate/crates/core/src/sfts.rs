//! Spatial-frequency token selection.
//!
//! Spatial side: per-head attention rollout of the class token, top-`s`
//! patches per head, OR-ed over heads and then over modalities (`M_S`).
//! Frequency side: Haar pyramids of the three luminance images are summed
//! band-wise and reconstructed; the absolute result is pooled per patch and
//! the top-`f` patches kept (`M_F`). `M_U = M_S | M_F`, `M_B = !M_U`.
//!
//! Every top-k in this module breaks ties by lowest patch index.

use std::fmt;

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::vit::AttentionStack;
use crate::wavelet::{decompose, reconstruct, Plane, DEFAULT_LEVELS};

/// Selection over patch positions (class token excluded).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(bits: Vec<bool>) -> Self {
        TokenMask { bits }
    }

    pub fn zeros(n: usize) -> Self {
        TokenMask { bits: vec![false; n] }
    }

    pub fn ones(n: usize) -> Self {
        TokenMask { bits: vec![true; n] }
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in idx {
            *bits
                .get_mut(i)
                .ok_or_else(|| Error::dim(format!("index {i} outside mask of length {n}")))? = true;
        }
        Ok(TokenMask { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    fn check_len(&self, other: &TokenMask) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "mask lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &TokenMask) -> Result<TokenMask> {
        self.check_len(other)?;
        Ok(TokenMask::new(self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect()))
    }

    pub fn intersection(&self, other: &TokenMask) -> Result<TokenMask> {
        self.check_len(other)?;
        Ok(TokenMask::new(self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect()))
    }

    pub fn complement(&self) -> TokenMask {
        TokenMask::new(self.bits.iter().map(|b| !b).collect())
    }

    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Intersection over union; two empty masks count as identical (1.0).
    pub fn iou(&self, other: &TokenMask) -> Result<f64> {
        self.check_len(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            uni += (*a || *b) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::config(format!("mask character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenMask::new)
    }
}

impl fmt::Display for TokenMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// OR over any number of equal-length masks.
pub fn union_all(masks: &[TokenMask]) -> Result<TokenMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::contract("union of zero masks"))?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.union(m))
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<TokenMask> {
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!(
            "selection count {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    TokenMask::from_indices(scores.len(), &order[..k])
}

/// Per-head class-token attribution over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutScore {
    /// `heads × N_p`, class column removed.
    pub scores: Vec<Vec<f64>>,
    /// Row-0 sums before the class column was dropped.
    pub row_sums: Vec<f64>,
}

/// Row 0 of `A_K · … · A_1` per head, computed as a row vector pushed
/// through the layers from last to first.
pub fn attention_rollout(stack: &AttentionStack) -> Result<RolloutScore> {
    let (k, n) = (stack.layers(), stack.tokens());
    if k == 0 {
        return Err(Error::contract("attention rollout needs at least one layer"));
    }
    let mut scores = Vec::with_capacity(stack.heads());
    let mut row_sums = Vec::with_capacity(stack.heads());
    for h in 0..stack.heads() {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        for layer in (0..k).rev() {
            let a = stack.matrix(layer, h);
            let mut next = vec![0.0; n];
            for (i, &vi) in v.iter().enumerate() {
                if vi != 0.0 {
                    for (o, &w) in next.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                        *o += vi * w;
                    }
                }
            }
            v = next;
        }
        row_sums.push(v.iter().sum());
        scores.push(v[1..].to_vec());
    }
    Ok(RolloutScore { scores, row_sums })
}

pub fn select_spatial_per_head(scores: &RolloutScore, s: usize) -> Result<Vec<TokenMask>> {
    scores.scores.iter().map(|row| top_k(row, s)).collect()
}

pub fn head_union(masks: &[TokenMask]) -> Result<TokenMask> {
    union_all(masks)
}

/// `M_S`: one mask shared by all three modalities.
pub fn modality_union(m_r: &TokenMask, m_n: &TokenMask, m_t: &TokenMask) -> Result<TokenMask> {
    m_r.union(m_n)?.union(m_t)
}

/// `|IDHWT(Σ_m DHWT(lum_m))|` at pixel resolution. Extents that `2^levels`
/// does not divide are reflect-padded and the result cropped back.
pub fn frequency_saliency(imgs: [&Image; 3], levels: usize) -> Result<Plane> {
    let (h, w) = (imgs[0].height(), imgs[0].width());
    if imgs.iter().any(|i| !i.same_extent(imgs[0])) {
        return Err(Error::dim("modality images differ in extent"));
    }
    let multiple = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::config("too many decomposition levels"))?;
    let mut sum = None;
    for img in imgs {
        let pyr = decompose(&img.luminance().pad_reflect(multiple), levels)?;
        sum = Some(match sum {
            None => pyr,
            Some(acc) => pyr.try_add(&acc)?,
        });
    }
    let rec = reconstruct(&sum.expect("three modalities"))?;
    Ok(rec.crop(h, w).map(f64::abs))
}

/// Sum of saliency inside each non-overlapping `p × p` patch, raster order.
pub fn patch_scores(saliency: &Plane, p: usize) -> Result<Vec<f64>> {
    if p == 0 || saliency.rows() % p != 0 || saliency.cols() % p != 0 {
        return Err(Error::dim(format!(
            "{}x{} saliency does not tile into {p}px patches",
            saliency.rows(),
            saliency.cols()
        )));
    }
    let (gr, gc) = (saliency.rows() / p, saliency.cols() / p);
    let mut out = vec![0.0; gr * gc];
    for y in 0..saliency.rows() {
        for x in 0..saliency.cols() {
            out[(y / p) * gc + x / p] += saliency.get(y, x);
        }
    }
    Ok(out)
}

pub fn select_frequency(saliency: &Plane, p: usize, f: usize) -> Result<TokenMask> {
    top_k(&patch_scores(saliency, p)?, f)
}

/// `(M_U, M_B)`.
pub fn final_union(m_s: &TokenMask, m_f: &TokenMask) -> Result<(TokenMask, TokenMask)> {
    let u = m_s.union(m_f)?;
    let b = u.complement();
    Ok((u, b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftsConfig {
    pub patch: usize,
    pub s: usize,
    pub f: usize,
    pub levels: usize,
}

impl Default for SftsConfig {
    fn default() -> Self {
        SftsConfig {
            patch: 8,
            s: 2,
            f: 10,
            levels: DEFAULT_LEVELS,
        }
    }
}

/// All masks produced for one sample triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Head-union mask per modality (R, N, T).
    pub per_modality: [TokenMask; 3],
    pub spatial: TokenMask,
    pub frequency: TokenMask,
    pub union: TokenMask,
    pub background: TokenMask,
}

impl Selection {
    /// Reserved token count `N_r`.
    pub fn reserved(&self) -> usize {
        self.union.popcount()
    }

    /// Dump line: `id M_S M_F M_U`.
    pub fn dump_line(&self, id: &str) -> String {
        format!("{id} {} {} {}", self.spatial, self.frequency, self.union)
    }
}

/// Parses a dump line back into `(id, M_S, M_F, M_U)`.
pub fn parse_dump_line(line: &str) -> Result<(String, TokenMask, TokenMask, TokenMask)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::config(format!("mask dump line needs 4 fields: {line:?}")));
    }
    Ok((
        parts[0].to_string(),
        TokenMask::parse(parts[1])?,
        TokenMask::parse(parts[2])?,
        TokenMask::parse(parts[3])?,
    ))
}

/// Full selection for one sample from its three attention stacks and images.
pub fn select_tokens(stacks: [&AttentionStack; 3], imgs: [&Image; 3], cfg: &SftsConfig) -> Result<Selection> {
    let mut per = Vec::with_capacity(3);
    for stack in stacks {
        let heads = select_spatial_per_head(&attention_rollout(stack)?, cfg.s)?;
        per.push(head_union(&heads)?);
    }
    let spatial = modality_union(&per[0], &per[1], &per[2])?;
    let sal = frequency_saliency(imgs, cfg.levels)?;
    let frequency = select_frequency(&sal, cfg.patch, cfg.f)?;
    let (union, background) = final_union(&spatial, &frequency)?;
    let [r, n, t]: [TokenMask; 3] = per.try_into().expect("three modalities");
    Ok(Selection {
        per_modality: [r, n, t],
        spatial,
        frequency,
        union,
        background,
    })
}
