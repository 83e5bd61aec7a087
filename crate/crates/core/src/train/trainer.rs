use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Sgd;
use super::schedule::lr_schedule;
use crate::checkpoint::{self, NamedArrays};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::derive_rng;
use crate::data::sampler::pk_sample_batch;
use crate::data::synth::Sample;
use crate::error::{Error, Result};
use crate::eval::epoch_mask_iou;
use crate::hma::class_tokens;
use crate::losses::{
    batch_hard_triplet, bcc_loss, ce_label_smooth, total_loss, BackgroundRows, IdentityCenters, LossBundle,
};
use crate::model::{Model, ModelForward, ModelInput};
use crate::sfts::TokenMask;
use crate::tensor::{Tape, Tensor, Var};

/// Training samples with contiguous class labels.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub samples: Vec<Sample>,
    pub labels: Vec<usize>,
    /// Identity of each class label.
    pub class_ids: Vec<usize>,
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

impl TrainSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("empty training split"));
        }
        let mut class_ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        class_ids.sort_unstable();
        class_ids.dedup();
        let labels: Vec<usize> = samples
            .iter()
            .map(|s| class_ids.binary_search(&s.identity).expect("identity present"))
            .collect();
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        Ok(TrainSet {
            samples,
            labels,
            class_ids,
            by_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub lr: f64,
    pub l_g_vit: f64,
    pub l_g_hma: f64,
    pub l_bcc: f64,
    pub l_ocfr: f64,
    pub total: f64,
    /// Mean reserved-token count over the batch.
    pub n_r_mean: f64,
}

pub fn inputs_of<'a>(samples: &[&'a Sample]) -> Vec<ModelInput<'a>> {
    samples
        .iter()
        .map(|s| ModelInput {
            images: [&s.images[0], &s.images[1], &s.images[2]],
            camera: s.camera,
        })
        .collect()
}

/// Standardises every feature column over the batch (zero mean, unit
/// variance, no affine). Used in front of the classifiers.
pub fn batch_standardize(tape: &mut Tape, f: Var) -> Result<Var> {
    let b = tape.value(f).rows();
    if b < 2 {
        return Err(Error::contract("batch standardisation needs at least two rows"));
    }
    let t = tape.transpose(f)?;
    let g = tape.constant(Tensor::full(&[b], 1.0));
    let z = tape.constant(Tensor::zeros(&[b]));
    let n = tape.layer_norm(t, g, z, 1e-5)?;
    tape.transpose(n)
}

fn classifier_input(tape: &mut Tape, cfg: &TrainConfig, f: Var) -> Result<Var> {
    if cfg.bn_neck {
        batch_standardize(tape, f)
    } else {
        Ok(f)
    }
}

/// Identity loss (label-smoothed CE plus batch-hard triplet).
fn identity_loss(
    tape: &mut Tape,
    cfg: &TrainConfig,
    logits: &[Var],
    embedding: Var,
    labels: &[usize],
) -> Result<Var> {
    let mut ce = None;
    for &l in logits {
        let c = ce_label_smooth(tape, l, labels, cfg.smoothing)?;
        ce = Some(match ce {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
    }
    let ce = tape.scale(ce.expect("at least one head"), 1.0 / logits.len() as f64);
    let tri = batch_hard_triplet(tape, embedding, labels, cfg.margin)?;
    tape.add(ce, tri)
}

/// Builds every loss term for a forward pass. Centers are updated with the
/// current batch before their loss is formed.
pub fn compute_losses(
    model: &Model,
    cfg: &TrainConfig,
    tape: &mut Tape,
    fwd: &ModelForward,
    labels: &[usize],
    centers: &mut IdentityCenters,
) -> Result<(Var, LossBundle)> {
    let (w_bcc, w_ocfr) = cfg.effective_weights();
    let vit_w = tape.param(&model.store, model.vit_head);
    let logits: Vec<Var> = fwd
        .backbone_cls
        .iter()
        .map(|&c| {
            let c = classifier_input(tape, cfg, c)?;
            tape.matmul(c, vit_w)
        })
        .collect::<Result<_>>()?;
    let joint = tape.concat(&fwd.backbone_cls, 1)?;
    let l_vit = identity_loss(tape, cfg, &logits, joint, labels)?;

    let l_hma = match (&fwd.hma, model.hma_head) {
        (Some(h), Some(head)) => {
            let w = tape.param(&model.store, head);
            let hf = classifier_input(tape, cfg, h.feature)?;
            let logits = tape.matmul(hf, w)?;
            Some(identity_loss(tape, cfg, &[logits], h.feature, labels)?)
        }
        _ => None,
    };

    let l_bcc = match &fwd.selections {
        Some(sels) if w_bcc > 0.0 => {
            let t = model.tokens();
            let rows: Vec<BackgroundRows> = sels
                .iter()
                .enumerate()
                .map(|(b, s)| BackgroundRows::for_sample(b, &s.background, t))
                .collect();
            Some(bcc_loss(tape, fwd.tokens, &rows)?)
        }
        _ => None,
    };

    let l_ocfr = match &fwd.hma {
        Some(h) if w_ocfr > 0.0 => {
            let t = model.tokens();
            let mut sum = None;
            for m in 0..3 {
                let cls = class_tokens(tape, h.independent, m, fwd.samples, t)?;
                centers.update(m, tape.value(cls), labels)?;
                let l = centers.loss(tape, m, cls, labels)?;
                sum = Some(match sum {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            sum
        }
        _ => None,
    };
    total_loss(tape, l_vit, l_hma, l_bcc, l_ocfr, w_bcc, w_ocfr)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub sgd: Sgd,
    pub centers: IdentityCenters,
    /// Iterations completed.
    pub iter: usize,
    pub epoch_mask_iou: Vec<f64>,
    monitor_masks: Option<Vec<TokenMask>>,
}

const INIT_STREAM: u64 = 0x1417;
const STEP_STREAM: u64 = 0x57E9;

impl Trainer {
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(num_classes), &mut derive_rng(cfg.seed, &[INIT_STREAM]))?;
        let sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
        let centers = IdentityCenters::new(cfg.alpha)?;
        Ok(Trainer {
            cfg,
            model,
            sgd,
            centers,
            iter: 0,
            epoch_mask_iou: Vec::new(),
            monitor_masks: None,
        })
    }

    pub fn iters_per_epoch(&self, set: &TrainSet) -> usize {
        if self.cfg.epoch_iters > 0 {
            self.cfg.epoch_iters
        } else {
            (set.samples.len() / (self.cfg.p * self.cfg.k)).max(1)
        }
    }

    /// Evenly spread training samples used for the epoch mask comparison.
    pub fn monitor_indices(&self, set: &TrainSet) -> Vec<usize> {
        let n = set.samples.len();
        let m = self.cfg.monitor_samples.min(n);
        (0..m).map(|i| i * n / m).collect()
    }

    /// Runs one optimisation step.
    pub fn step(&mut self, set: &TrainSet) -> Result<IterMetrics> {
        let cfg = &self.cfg;
        let iter = self.iter;
        let lr = lr_schedule(iter, cfg.lr_base, cfg.warmup_iters, cfg.total_iters)?;
        let mut rng = derive_rng(cfg.seed, &[STEP_STREAM, iter as u64]);
        let batch = pk_sample_batch(&set.by_class, cfg.p, cfg.k, &mut rng)?;
        let aug_cfg = AugmentConfig::default();
        let samples: Vec<Sample> = batch
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&set.samples[i], &aug_cfg, &mut rng).0
                } else {
                    set.samples[i].clone()
                }
            })
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
        let refs: Vec<&Sample> = samples.iter().collect();

        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, &inputs_of(&refs))?;
        let (loss, bundle) = compute_losses(&self.model, cfg, &mut tape, &fwd, &labels, &mut self.centers)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("iteration {iter}: {msg}; batch samples {batch:?}")),
                e => e,
            })?;
        if !bundle.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {iter}: total loss {} (vit {}, hma {}, bcc {}, ocfr {}); batch samples {batch:?}",
                bundle.total, bundle.l_g_vit, bundle.l_g_hma, bundle.l_bcc, bundle.l_ocfr
            )));
        }
        let grads = tape.backward(loss, &self.model.store)?;
        self.sgd.step(&mut self.model.store, &grads, lr)?;
        let n_r_mean = fwd.masks.iter().map(|m| m.popcount() as f64).sum::<f64>() / fwd.masks.len() as f64;
        self.iter += 1;
        if self.model.cfg.use_sfts && self.iter % self.iters_per_epoch(set) == 0 {
            self.record_epoch(set)?;
        }
        Ok(IterMetrics {
            iter,
            lr,
            l_g_vit: bundle.l_g_vit,
            l_g_hma: bundle.l_g_hma,
            l_bcc: bundle.l_bcc,
            l_ocfr: bundle.l_ocfr,
            total: bundle.total,
            n_r_mean,
        })
    }

    fn record_epoch(&mut self, set: &TrainSet) -> Result<()> {
        let idx = self.monitor_indices(set);
        let refs: Vec<&Sample> = idx.iter().map(|&i| &set.samples[i]).collect();
        let masks: Vec<TokenMask> = self
            .model
            .select(&inputs_of(&refs), self.cfg.p * self.cfg.k)?
            .into_iter()
            .map(|s| s.union)
            .collect();
        if let Some(prev) = &self.monitor_masks {
            self.epoch_mask_iou.push(epoch_mask_iou(prev, &masks)?);
        }
        self.monitor_masks = Some(masks);
        Ok(())
    }

    /// Trains until `total_iters` (or `stop_after`, when set), calling
    /// `on_iter` after every step.
    pub fn train(&mut self, set: &TrainSet, mut on_iter: impl FnMut(&Trainer, &IterMetrics) -> Result<()>) -> Result<()> {
        let end = match self.cfg.stop_after {
            0 => self.cfg.total_iters,
            n => n.min(self.cfg.total_iters),
        };
        while self.iter < end {
            let m = self.step(set)?;
            on_iter(self, &m)?;
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let store = &self.model.store;
        let mut out: NamedArrays = store
            .ids()
            .map(|id| (format!("param/{}", store.name(id)), store.get(id).clone()))
            .collect();
        out.extend(
            store
                .ids()
                .map(|id| (format!("velocity/{}", store.name(id)), self.sgd.velocity[id.index()].clone())),
        );
        out.extend(self.centers.to_arrays());
        out.push(("state/iter".into(), Tensor::scalar(self.iter as f64)));
        if !self.epoch_mask_iou.is_empty() {
            out.push((
                "state/epoch_mask_iou".into(),
                Tensor::from_raw(vec![self.epoch_mask_iou.len()], self.epoch_mask_iou.clone()),
            ));
        }
        if let Some(masks) = &self.monitor_masks {
            for (i, m) in masks.iter().enumerate() {
                let bits = m.bits().iter().map(|&b| b as u8 as f64).collect();
                out.push((format!("state/monitor_mask/{i}"), Tensor::from_raw(vec![m.len()], bits)));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_arrays())
    }

    /// Rebuilds a trainer from checkpoint arrays; the class count is read
    /// from the backbone head.
    pub fn from_arrays(cfg: TrainConfig, arrays: &NamedArrays) -> Result<Self> {
        let head = arrays
            .iter()
            .find(|(n, _)| n == "param/head.backbone.weight")
            .ok_or_else(|| Error::Checkpoint("missing param/head.backbone.weight".into()))?;
        let mut t = Trainer::new(cfg, head.1.cols())?;
        let mut masks: BTreeMap<usize, TokenMask> = BTreeMap::new();
        let mut seen_params = 0;
        for (name, value) in arrays {
            if let Some(p) = name.strip_prefix("param/") {
                t.model.store.set(p, value.clone())?;
                seen_params += 1;
            } else if let Some(p) = name.strip_prefix("velocity/") {
                let id = t
                    .model
                    .store
                    .id(p)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown array {name}")))?;
                if value.shape() != t.sgd.velocity[id.index()].shape() {
                    return Err(Error::Checkpoint(format!("array {name} has the wrong shape")));
                }
                t.sgd.velocity[id.index()] = value.clone();
            } else if t.centers.load_array(name, value)? {
            } else if name == "state/iter" {
                t.iter = value.item() as usize;
            } else if name == "state/epoch_mask_iou" {
                t.epoch_mask_iou = value.data().to_vec();
            } else if let Some(i) = name.strip_prefix("state/monitor_mask/") {
                let i: usize = i
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("unknown array {name}")))?;
                masks.insert(i, TokenMask::new(value.data().iter().map(|&v| v != 0.0).collect()));
            } else {
                return Err(Error::Checkpoint(format!("unknown array {name}")));
            }
        }
        if seen_params != t.model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {seen_params} parameters, model needs {}",
                t.model.store.len()
            )));
        }
        if !masks.is_empty() {
            t.monitor_masks = Some(masks.into_values().collect());
        }
        Ok(t)
    }

    pub fn load(path: &Path, cfg: TrainConfig) -> Result<Self> {
        Trainer::from_arrays(cfg, &checkpoint::load(path)?)
    }
}
