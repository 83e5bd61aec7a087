//! Training objectives: background consistency, identity-center
//! refinement, label-smoothed cross-entropy and batch-hard triplet.

use std::collections::BTreeMap;

use crate::checkpoint::NamedArrays;
use crate::error::{Error, Result};
use crate::sfts::TokenMask;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Background rows of one sample inside a token tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundRows {
    /// Row indices of background tokens for R, N, T, in matching order.
    pub rows: [Vec<usize>; 3],
    /// Selected patch count `N_r`.
    pub reserved: usize,
}

impl BackgroundRows {
    /// Rows for sample `b` in `[sample][modality][token]` layout.
    pub fn for_sample(b: usize, background: &TokenMask, tokens: usize) -> Self {
        let rows = [0, 1, 2].map(|m| {
            background
                .indices()
                .into_iter()
                .map(|p| (b * 3 + m) * tokens + p + 1)
                .collect()
        });
        BackgroundRows {
            rows,
            reserved: background.len() - background.popcount(),
        }
    }
}

/// Batch mean of `(‖R_b−N_b‖² + ‖R_b−T_b‖² + ‖N_b−T_b‖²) / N_r`, where
/// `X_b` are the background patch tokens of each modality.
pub fn bcc_loss(tape: &mut Tape, tokens: Var, samples: &[BackgroundRows]) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::contract("background consistency over an empty batch"));
    }
    let mut idx: [Vec<usize>; 3] = Default::default();
    let mut weights = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.reserved == 0 {
            return Err(Error::contract(format!("sample {i}: no reserved tokens")));
        }
        let n = s.rows[0].len();
        if s.rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim(format!("sample {i}: background row counts differ")));
        }
        for m in 0..3 {
            idx[m].extend_from_slice(&s.rows[m]);
        }
        weights.extend(std::iter::repeat(1.0 / (s.reserved as f64 * samples.len() as f64)).take(n));
    }
    if weights.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let parts: Vec<Var> = idx
        .iter()
        .map(|r| tape.gather_rows(tokens, r))
        .collect::<Result<_>>()?;
    let mut total = None;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let d = tape.sub(parts[a], parts[b])?;
        let sq = tape.square(d);
        let w = tape.mul_rows(sq, &weights)?;
        let s = tape.sum(w);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.expect("three pairs"))
}

/// Single-sample form over three `[N_p, D]` patch tensors.
pub fn bcc_loss_single(tape: &mut Tape, patches: [Var; 3], background: &TokenMask) -> Result<Var> {
    let n = tape.value(patches[0]).rows();
    if background.len() != n {
        return Err(Error::dim(format!(
            "background mask length {} for {n} patches",
            background.len()
        )));
    }
    let stacked = tape.concat(&patches, 0)?;
    let idx = background.indices();
    let rows = [0, 1, 2].map(|m| idx.iter().map(|&p| m * n + p).collect());
    bcc_loss(
        tape,
        stacked,
        &[BackgroundRows {
            rows,
            reserved: n - idx.len(),
        }],
    )
}

/// Per-modality EMA feature centers keyed by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCenters {
    pub alpha: f64,
    centers: [BTreeMap<usize, Vec<f64>>; 3],
}

impl IdentityCenters {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("center decay {alpha} outside (0, 1]")));
        }
        Ok(IdentityCenters {
            alpha,
            centers: Default::default(),
        })
    }

    pub fn get(&self, modality: usize, id: usize) -> Option<&[f64]> {
        self.centers[modality].get(&id).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, modality: usize, id: usize, center: Vec<f64>) {
        self.centers[modality].insert(id, center);
    }

    pub fn len(&self, modality: usize) -> usize {
        self.centers[modality].len()
    }

    /// `C := α·mean_batch(f) + (1−α)·C`; first sighting sets `C := mean`.
    pub fn update(&mut self, modality: usize, features: &Tensor, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::dim("one label per feature row"));
        }
        let d = features.cols();
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], 0));
            for (s, v) in e.0.iter_mut().zip(features.row(i)) {
                *s += v;
            }
            e.1 += 1;
        }
        let alpha = self.alpha;
        for (id, (sum, n)) in sums {
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            match self.centers[modality].get_mut(&id) {
                Some(c) if c.len() == d => {
                    for (c, f) in c.iter_mut().zip(&mean) {
                        *c = alpha * f + (1.0 - alpha) * *c;
                    }
                }
                Some(_) => return Err(Error::dim(format!("center {id} has a different width"))),
                None => {
                    self.centers[modality].insert(id, mean);
                }
            }
        }
        Ok(())
    }

    /// `(1/B) Σ ‖f_i − C_{y_i}‖²` for one modality; centers are constants.
    pub fn loss(&self, tape: &mut Tape, modality: usize, features: Var, labels: &[usize]) -> Result<Var> {
        let (b, d) = (tape.value(features).rows(), tape.value(features).cols());
        if b != labels.len() {
            return Err(Error::dim("one label per feature row"));
        }
        let mut target = Vec::with_capacity(b * d);
        for &l in labels {
            let c = self
                .get(modality, l)
                .ok_or_else(|| Error::contract(format!("no center for identity {l}")))?;
            if c.len() != d {
                return Err(Error::dim(format!("center {l} has width {}, features {d}", c.len())));
            }
            target.extend_from_slice(c);
        }
        let c = tape.constant(Tensor::from_raw(vec![b, d], target));
        let diff = tape.sub(features, c)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / b as f64))
    }

    /// Arrays named `center/<modality>/<id>`.
    pub fn to_arrays(&self) -> NamedArrays {
        let mut out = Vec::new();
        for (m, map) in self.centers.iter().enumerate() {
            for (id, c) in map {
                out.push((format!("center/{m}/{id}"), Tensor::from_raw(vec![c.len()], c.clone())));
            }
        }
        out
    }

    /// Inverse of [`to_arrays`](Self::to_arrays) for one array; returns false
    /// when the name is not a center.
    pub fn load_array(&mut self, name: &str, t: &Tensor) -> Result<bool> {
        let Some(rest) = name.strip_prefix("center/") else {
            return Ok(false);
        };
        let bad = || Error::Checkpoint(format!("malformed center name {name:?}"));
        let (m, id) = rest.split_once('/').ok_or_else(bad)?;
        let m: usize = m.parse().map_err(|_| bad())?;
        let id: usize = id.parse().map_err(|_| bad())?;
        if m >= 3 {
            return Err(bad());
        }
        self.centers[m].insert(id, t.data().to_vec());
        Ok(true)
    }
}

/// Mean over rows of cross-entropy against `(1−ε)·onehot + ε/C`.
pub fn ce_label_smooth(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (b, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if labels.len() != b {
        return Err(Error::dim("one label per logit row"));
    }
    let mut q = vec![eps / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::contract(format!("label {l} outside {c} classes")));
        }
        q[i * c + l] += 1.0 - eps;
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let weighted = tape.mul_const(lsm, &q)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Hardest-positive and hardest-negative index per anchor, by current
/// Euclidean distance; ties go to the lower index.
pub fn hardest_pairs(features: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = features.rows();
    if labels.len() != b {
        return Err(Error::dim("one label per feature row"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::contract(format!("identity {id} has a single instance in the batch")));
    }
    if counts.len() < 2 {
        return Err(Error::contract("triplet mining needs at least two identities"));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("triplet features contain NaN or infinity".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    Ok((0..b)
        .map(|i| {
            let (mut pos, mut pd) = (usize::MAX, f64::NEG_INFINITY);
            let (mut neg, mut nd) = (usize::MAX, f64::INFINITY);
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d = dist(i, j);
                if labels[j] == labels[i] {
                    if d > pd {
                        (pos, pd) = (j, d);
                    }
                } else if d < nd {
                    (neg, nd) = (j, d);
                }
            }
            (pos, neg)
        })
        .collect())
}

/// Mean over anchors of `max(0, d(a, p*) − d(a, n*) + margin)`.
pub fn batch_hard_triplet(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let pairs = hardest_pairs(tape.value(features), labels)?;
    let anchors: Vec<usize> = (0..pairs.len()).collect();
    let pos: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let neg: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = tape.gather_rows(features, &anchors)?;
    let dist = |tape: &mut Tape, idx: &[usize]| -> Result<Var> {
        let o = tape.gather_rows(features, idx)?;
        let d = tape.sub(a, o)?;
        let sq = tape.square(d);
        let s = tape.sum_axis(sq, 1)?;
        Ok(tape.sqrt(s))
    };
    let dp = dist(tape, &pos)?;
    let dn = dist(tape, &neg)?;
    let gap = tape.sub(dp, dn)?;
    let hinge = tape.add_scalar(gap, margin);
    let hinge = tape.relu(hinge);
    let s = tape.sum(hinge);
    Ok(tape.scale(s, 1.0 / pairs.len() as f64))
}

/// Weighted total plus the individual values for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_g_vit: f64,
    pub l_g_hma: f64,
    pub l_bcc: f64,
    pub l_ocfr: f64,
    pub w_bcc: f64,
    pub w_ocfr: f64,
    pub total: f64,
}

/// `vit + hma + w_bcc·bcc + w_ocfr·ocfr`; absent terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    vit: Var,
    hma: Option<Var>,
    bcc: Option<Var>,
    ocfr: Option<Var>,
    w_bcc: f64,
    w_ocfr: f64,
) -> Result<(Var, LossBundle)> {
    let val = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let mut bundle = LossBundle {
        l_g_vit: tape.value(vit).item(),
        l_g_hma: val(tape, hma),
        l_bcc: val(tape, bcc),
        l_ocfr: val(tape, ocfr),
        w_bcc,
        w_ocfr,
        total: 0.0,
    };
    let mut total = vit;
    if let Some(h) = hma {
        total = tape.add(total, h)?;
    }
    for (term, w) in [(bcc, w_bcc), (ocfr, w_ocfr)] {
        if let Some(t) = term {
            let s = tape.scale(t, w);
            total = tape.add(total, s)?;
        }
    }
    bundle.total = tape.value(total).item();
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn bcc_hand_example() {
        let mut tape = Tape::new();
        let r = m(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[5.0, 5.0, 5.0], &[7.0, 0.0, 0.0]]);
        let n = m(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[9.0, 9.0, 9.0], &[0.0, 3.0, 0.0]]);
        // Background rows 0 and 1: R - N = 1 everywhere (R2N = 2*3), T = R so
        // R2T = 0 and N2T = 6; N_r = 2 -> (6 + 0 + 6) / 2.
        let vars = [tape.constant(r.clone()), tape.constant(n), tape.constant(r)];
        let bg = TokenMask::from_indices(4, &[0, 1]).unwrap();
        let l = bcc_loss_single(&mut tape, vars, &bg).unwrap();
        assert!((tape.value(l).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn bcc_identical_backgrounds_and_scaling() {
        let mut tape = Tape::new();
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[0.5, 0.5]]);
        let vars = [tape.constant(a.clone()), tape.constant(a.clone()), tape.constant(a)];
        let bg = TokenMask::from_indices(3, &[0, 2]).unwrap();
        let l = bcc_loss_single(&mut tape, vars, &bg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let x = [m(&[&[1.0, -2.0], &[0.3, 4.0]]), m(&[&[0.0, 2.0], &[3.0, 1.0]]), m(&[&[2.0, 2.0], &[-1.0, 0.0]])];
        let bg = TokenMask::from_indices(2, &[1]).unwrap();
        let once = {
            let v = x.clone().map(|t| tape.constant(t));
            let l = bcc_loss_single(&mut tape, v, &bg).unwrap();
            tape.value(l).item()
        };
        let twice = {
            let v = x.map(|t| {
                let mut t = t;
                t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
                tape.constant(t)
            });
            let l = bcc_loss_single(&mut tape, v, &bg).unwrap();
            tape.value(l).item()
        };
        assert!((twice - 4.0 * once).abs() < 1e-12);
    }

    #[test]
    fn bcc_rejects_zero_reserved() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let r = bcc_loss_single(&mut tape, [a, a, a], &TokenMask::ones(2));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn center_updates() {
        let mut c = IdentityCenters::new(0.8).unwrap();
        c.insert(0, 3, vec![0.0, 0.0]);
        c.update(0, &m(&[&[1.0, 1.0]]), &[3]).unwrap();
        assert_eq!(c.get(0, 3).unwrap(), &[0.8, 0.8]);

        let mut c = IdentityCenters::new(1.0).unwrap();
        c.insert(1, 0, vec![5.0]);
        c.update(1, &m(&[&[1.0], &[3.0], &[9.0]]), &[0, 0, 1]).unwrap();
        assert_eq!(c.get(1, 0).unwrap(), &[2.0]);
        assert_eq!(c.get(1, 1).unwrap(), &[9.0]);
        assert!(c.get(0, 0).is_none());
        assert!(IdentityCenters::new(0.0).is_err());
        assert!(IdentityCenters::new(1.5).is_err());
    }

    #[test]
    fn center_loss_example() {
        let mut c = IdentityCenters::new(0.8).unwrap();
        c.insert(0, 7, vec![0.5, 0.5]);
        let mut tape = Tape::new();
        let f = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = c.loss(&mut tape, 0, f, &[7, 7]).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
        assert!(matches!(c.loss(&mut tape, 0, f, &[7, 8]), Err(Error::Contract(_))));
    }

    #[test]
    fn center_arrays_round_trip() {
        let mut c = IdentityCenters::new(0.8).unwrap();
        c.insert(2, 11, vec![1.0, 2.0]);
        c.insert(0, 4, vec![3.0, 4.0]);
        let mut back = IdentityCenters::new(0.8).unwrap();
        for (name, t) in c.to_arrays() {
            assert!(back.load_array(&name, &t).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.load_array("param/x", &Tensor::scalar(1.0)).unwrap());
        assert!(back.load_array("center/9/1", &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(m(&[&[0.0, 0.0]]));
        for eps in [0.0, 0.1, 0.5] {
            let l = ce_label_smooth(&mut tape, z, &[1], eps).unwrap();
            assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let z = tape.constant(m(&[&[10.0, 0.0, 0.0]]));
        let l = ce_label_smooth(&mut tape, z, &[0], 0.1).unwrap();
        let norm = (10f64.exp() + 2.0).ln();
        let logp = [10.0 - norm, -norm, -norm];
        let q = [0.9 + 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let want: f64 = -q.iter().zip(logp).map(|(q, lp)| q * lp).sum::<f64>();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        let plain = ce_label_smooth(&mut tape, z, &[0], 0.0).unwrap();
        assert!((tape.value(plain).item() + logp[0]).abs() < 1e-12);
        assert!(matches!(ce_label_smooth(&mut tape, z, &[3], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn triplet_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(m(&[&[0.0], &[2.0], &[1.0], &[5.0]]));
        let l = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], 0.3).unwrap();
        // anchor 0: p=2, n=1 -> 1.3; anchor 2 (value 2): p=0 d2, n=1 d1 -> 1.3;
        // anchor 1 (value 1): p=5 d4, n=2 d1 -> 3.3; anchor 5: p=1 d4, n=2 d3 -> 1.3
        assert!((tape.value(l).item() - (1.3 + 1.3 + 3.3 + 1.3) / 4.0).abs() < 1e-12);

        let f = tape.constant(m(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]));
        let l = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let f = tape.constant(m(&[&[0.0, 0.0], &[0.0, 0.0], &[0.2, 0.0], &[0.2, 0.0]]));
        let l = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.value(l).item() - 0.1).abs() < 1e-12);

        let err = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 2], 0.3).unwrap_err();
        assert!(err.to_string().contains("identity 1"), "{err}");
        assert!(batch_hard_triplet(&mut tape, f, &[0, 0, 0, 0], 0.3).is_err());
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let (t, b) = total_loss(&mut tape, z, Some(z), Some(z), Some(z), 1.0, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
        assert_eq!(b.total, 0.0);
        let v = [1.5, 0.5, 2.0, 4.0].map(|x| tape.constant(Tensor::scalar(x)));
        let (_, b) = total_loss(&mut tape, v[0], Some(v[1]), Some(v[2]), Some(v[3]), 1.0, 1.0).unwrap();
        assert_eq!(b.total, 8.0);
        let (_, b) = total_loss(&mut tape, v[0], Some(v[1]), Some(v[2]), Some(v[3]), 0.0, 0.0).unwrap();
        assert_eq!(b.total, 2.0);
        let (_, b) = total_loss(&mut tape, v[0], None, None, None, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 1.5);
    }
}
