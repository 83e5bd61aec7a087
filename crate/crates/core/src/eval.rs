//! Retrieval metrics (mAP, CMC) and token-selection diagnostics.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::image::PixelMask;
use crate::error::{Error, Result};
use crate::sfts::TokenMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config(format!("unknown metric {other:?} (euclidean | cosine)"))),
        }
    }
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

/// Scales every row to unit length (zero rows stay zero).
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// `[queries, gallery]` distances. Cosine distance is `1 − cos`.
pub fn pairwise_dist(queries: &Tensor, gallery: &Tensor, metric: Metric) -> Result<Tensor> {
    if queries.cols() != gallery.cols() {
        return Err(Error::dim(format!(
            "feature widths differ: {} vs {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let (nq, ng) = (queries.rows(), gallery.rows());
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let q = queries.row(i);
        for j in 0..ng {
            let g = gallery.row(j);
            out.push(match metric {
                Metric::Euclidean => q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                Metric::Cosine => {
                    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
                    let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let ng: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if nq == 0.0 || ng == 0.0 {
                        1.0
                    } else {
                        1.0 - dot / (nq * ng)
                    }
                }
            });
        }
    }
    Ok(Tensor::from_raw(vec![nq, ng], out))
}

/// Identity and camera of one retrieval item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub id: usize,
    pub camera: usize,
}

/// Relevance flags of one query's gallery in ascending-distance order
/// (ties by gallery index), after protocol filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub relevant: Vec<bool>,
}

/// Ranks the gallery for every query. With `camera_filter`, gallery items
/// sharing both identity and camera with the query are dropped.
pub fn rank(dist: &Tensor, queries: &[ItemMeta], gallery: &[ItemMeta], camera_filter: bool) -> Result<Vec<Ranking>> {
    if gallery.is_empty() {
        return Err(Error::contract("empty gallery"));
    }
    if dist.rows() != queries.len() || dist.cols() != gallery.len() {
        return Err(Error::dim("distance matrix does not match query/gallery counts"));
    }
    Ok(queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let row = dist.row(i);
            let mut order: Vec<usize> = (0..gallery.len())
                .filter(|&j| !(camera_filter && gallery[j].id == q.id && gallery[j].camera == q.camera))
                .collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let relevant = order.iter().map(|&j| gallery[j].id == q.id).collect();
            Ranking { order, relevant }
        })
        .collect())
}

/// Mean over relevant positions `k` of `hits(≤k)/k`; `None` without any
/// relevant item.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// `(mAP, skipped)`: queries without a relevant item are skipped.
pub fn compute_map(rankings: &[Ranking]) -> Result<(f64, usize)> {
    let aps: Vec<f64> = rankings.iter().filter_map(|r| average_precision(&r.relevant)).collect();
    let skipped = rankings.len() - aps.len();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok((map, skipped))
}

/// Fraction of (non-skipped) queries whose first match is within top `k`.
pub fn compute_cmc(rankings: &[Ranking], ks: &[usize]) -> Result<Vec<f64>> {
    let firsts: Vec<usize> = rankings
        .iter()
        .filter_map(|r| r.relevant.iter().position(|&x| x))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            if firsts.is_empty() {
                0.0
            } else {
                firsts.iter().filter(|&&f| f < k).count() as f64 / firsts.len() as f64
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

pub fn evaluate_retrieval(
    query_feats: &Tensor,
    gallery_feats: &Tensor,
    queries: &[ItemMeta],
    gallery: &[ItemMeta],
    metric: Metric,
    camera_filter: bool,
) -> Result<RetrievalMetrics> {
    let dist = pairwise_dist(query_feats, gallery_feats, metric)?;
    let rankings = rank(&dist, queries, gallery, camera_filter)?;
    let (map, n_skipped) = compute_map(&rankings)?;
    let cmc = compute_cmc(&rankings, &[1, 5, 10])?;
    Ok(RetrievalMetrics {
        map,
        rank1: cmc[0],
        rank5: cmc[1],
        rank10: cmc[2],
        n_queries: queries.len(),
        n_skipped,
    })
}

/// Patches with at least half of their pixels in the foreground.
pub fn ground_truth_tokens(fg: &PixelMask, p: usize) -> Result<TokenMask> {
    if p == 0 || fg.height() % p != 0 || fg.width() % p != 0 {
        return Err(Error::dim(format!(
            "{}x{} mask does not tile into {p}px patches",
            fg.height(),
            fg.width()
        )));
    }
    let (gr, gc) = (fg.height() / p, fg.width() / p);
    let mut bits = Vec::with_capacity(gr * gc);
    for r in 0..gr {
        for c in 0..gc {
            let mut n = 0;
            for y in 0..p {
                for x in 0..p {
                    n += fg.get(r * p + y, c * p + x) as usize;
                }
            }
            bits.push(2 * n >= p * p);
        }
    }
    Ok(TokenMask::new(bits))
}

pub fn selection_iou(selected: &TokenMask, fg: &PixelMask, p: usize) -> Result<f64> {
    selected.iou(&ground_truth_tokens(fg, p)?)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Expected IoU between a fixed mask with `g` of `n` bits set and a
/// uniformly random mask with `k` bits set.
pub fn expected_random_iou(n: usize, g: usize, k: usize) -> f64 {
    if g + k == 0 {
        return 1.0;
    }
    let lo = (g + k).saturating_sub(n);
    let total = ln_choose(n, k);
    (lo..=g.min(k))
        .map(|i| {
            let p = (ln_choose(g, i) + ln_choose(n - g, k - i) - total).exp();
            p * i as f64 / (g + k - i) as f64
        })
        .sum()
}

/// Mean per-sample IoU of masks from two consecutive epochs.
pub fn epoch_mask_iou(prev: &[TokenMask], next: &[TokenMask]) -> Result<f64> {
    if prev.len() != next.len() || prev.is_empty() {
        return Err(Error::contract(format!(
            "mask sets differ in size: {} vs {}",
            prev.len(),
            next.len()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in prev.iter().zip(next) {
        sum += a.iou(b)?;
    }
    Ok(sum / prev.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
    /// Mean IoU of the selection against foreground tokens; absent when
    /// the model does no selection.
    pub selection_iou_mean: Option<f64>,
    /// Same quantity for random masks of equal popcount.
    pub selection_iou_random: Option<f64>,
    pub epoch_mask_iou: Vec<f64>,
}

impl EvalReport {
    pub fn new(m: RetrievalMetrics) -> Self {
        EvalReport {
            map: m.map,
            rank1: m.rank1,
            rank5: m.rank5,
            rank10: m.rank10,
            n_queries: m.n_queries,
            n_skipped: m.n_skipped,
            selection_iou_mean: None,
            selection_iou_random: None,
            epoch_mask_iou: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(rel: &[u8]) -> Ranking {
        Ranking {
            order: (0..rel.len()).collect(),
            relevant: rel.iter().map(|&r| r == 1).collect(),
        }
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[true, false, true, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-15);
        assert!((ap - 0.80556).abs() < 1e-5);
        assert_eq!(average_precision(&[true; 5]), Some(1.0));
        for r in 1..8 {
            let mut rel = vec![false; 8];
            rel[r - 1] = true;
            assert_eq!(average_precision(&rel), Some(1.0 / r as f64));
        }
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_examples() {
        let all_first = vec![ranking(&[1, 0, 0]), ranking(&[1, 1, 0])];
        assert_eq!(compute_cmc(&all_first, &[1]).unwrap(), vec![1.0]);
        let third = vec![ranking(&[0, 0, 1, 0, 0, 0])];
        assert_eq!(compute_cmc(&third, &[1, 5]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn skipped_queries_are_counted() {
        let r = vec![ranking(&[0, 1]), ranking(&[0, 0])];
        assert_eq!(compute_map(&r).unwrap(), (0.5, 1));
    }

    #[test]
    fn distance_examples() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.6, 0.8]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let e = pairwise_dist(&a, &b, Metric::Euclidean).unwrap();
        let c = pairwise_dist(&a, &b, Metric::Cosine).unwrap();
        assert_eq!(e.get(0, 0), 0.0);
        assert_eq!(c.get(0, 0), 0.0);
        assert!((e.get(0, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
        assert!(pairwise_dist(&a, &Tensor::zeros(&[1, 3]), Metric::Cosine).is_err());
    }

    #[test]
    fn camera_filter_drops_same_camera_matches() {
        let dist = Tensor::from_rows(&[&[0.1, 0.2, 0.3]]).unwrap();
        let q = [ItemMeta { id: 1, camera: 0 }];
        let g = [
            ItemMeta { id: 1, camera: 0 },
            ItemMeta { id: 2, camera: 1 },
            ItemMeta { id: 1, camera: 1 },
        ];
        let r = rank(&dist, &q, &g, true).unwrap();
        assert_eq!(r[0].order, vec![1, 2]);
        assert_eq!(r[0].relevant, vec![false, true]);
        let r = rank(&dist, &q, &g, false).unwrap();
        assert_eq!(r[0].relevant, vec![true, false, true]);
        assert!(rank(&Tensor::zeros(&[1, 1]), &q, &[], true).is_err());
    }

    #[test]
    fn ground_truth_token_threshold() {
        let mut fg = PixelMask::empty(4, 4);
        // top-left patch: 2 of 4 pixels; top-right: 1 of 4
        fg.set(0, 0, true);
        fg.set(1, 1, true);
        fg.set(0, 3, true);
        let gt = ground_truth_tokens(&fg, 2).unwrap();
        assert_eq!(gt, TokenMask::from_indices(4, &[0]).unwrap());
        assert_eq!(selection_iou(&gt, &fg, 2).unwrap(), 1.0);
        assert_eq!(selection_iou(&gt.complement(), &fg, 2).unwrap(), 0.0);
    }

    #[test]
    fn random_iou_matches_enumeration() {
        for (n, g, k) in [(6, 2, 3), (8, 3, 3), (5, 5, 2), (7, 0, 2), (4, 1, 4)] {
            let truth = TokenMask::from_indices(n, &(0..g).collect::<Vec<_>>()).unwrap();
            let (mut sum, mut count) = (0.0, 0usize);
            for bits in 0u32..(1 << n) {
                if bits.count_ones() as usize == k {
                    let m = TokenMask::new((0..n).map(|i| bits >> i & 1 == 1).collect());
                    sum += truth.iou(&m).unwrap();
                    count += 1;
                }
            }
            let want = sum / count as f64;
            assert!((expected_random_iou(n, g, k) - want).abs() < 1e-12, "{n} {g} {k}");
        }
    }

    #[test]
    fn epoch_iou_examples() {
        let a = vec![TokenMask::from_indices(4, &[0, 1]).unwrap()];
        assert_eq!(epoch_mask_iou(&a, &a).unwrap(), 1.0);
        let b = vec![a[0].complement()];
        assert_eq!(epoch_mask_iou(&a, &b).unwrap(), 0.0);
        assert!(epoch_mask_iou(&a, &[]).is_err());
    }
}
