use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup to `lr_base`, then cosine decay to `lr_base / 100` at the
/// final iteration.
pub fn lr_schedule(iter: usize, lr_base: f64, warmup_iters: usize, total_iters: usize) -> Result<f64> {
    if iter >= total_iters {
        return Err(Error::contract(format!(
            "iteration {iter} outside schedule of {total_iters}"
        )));
    }
    if iter < warmup_iters {
        return Ok(lr_base * (iter + 1) as f64 / warmup_iters as f64);
    }
    let lr_min = lr_base / 100.0;
    let span = (total_iters - warmup_iters).saturating_sub(1).max(1);
    let progress = (iter - warmup_iters) as f64 / span as f64;
    Ok(lr_min + 0.5 * (lr_base - lr_min) * (1.0 + (PI * progress).cos()))
}
