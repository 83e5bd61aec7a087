use crate::data::synth::Sample;
use crate::error::Result;
use crate::eval::{
    evaluate_retrieval, expected_random_iou, ground_truth_tokens, l2_normalize, EvalReport, ItemMeta, Metric,
};
use crate::model::Model;

use super::trainer::inputs_of;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub metric: Metric,
    pub camera_filter: bool,
    /// Samples per forward pass.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metric: Metric::Euclidean,
            camera_filter: true,
            batch: 16,
        }
    }
}

fn meta(samples: &[&Sample]) -> Vec<ItemMeta> {
    samples
        .iter()
        .map(|s| ItemMeta {
            id: s.identity,
            camera: s.camera,
        })
        .collect()
}

/// Retrieval metrics on L2-normalised features, plus selection quality over
/// every query and gallery sample when the model selects tokens.
pub fn evaluate(model: &Model, query: &[&Sample], gallery: &[&Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let (qf, qsel) = model.extract(&inputs_of(query), opts.batch)?;
    let (gf, gsel) = model.extract(&inputs_of(gallery), opts.batch)?;
    let metrics = evaluate_retrieval(
        &l2_normalize(&qf),
        &l2_normalize(&gf),
        &meta(query),
        &meta(gallery),
        opts.metric,
        opts.camera_filter,
    )?;
    let mut report = EvalReport::new(metrics);
    if let (Some(qs), Some(gs)) = (qsel, gsel) {
        let p = model.cfg.backbone.patch;
        let (mut iou, mut random) = (0.0, 0.0);
        let samples = query.iter().chain(gallery);
        let sels = qs.iter().chain(&gs);
        let n = qs.len() + gs.len();
        for (s, sel) in samples.zip(sels) {
            let gt = ground_truth_tokens(&s.fg_mask, p)?;
            iou += sel.union.iou(&gt)?;
            random += expected_random_iou(gt.len(), gt.popcount(), sel.union.popcount());
        }
        report.selection_iou_mean = Some(iou / n as f64);
        report.selection_iou_random = Some(random / n as f64);
    }
    Ok(report)
}
