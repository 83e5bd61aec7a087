//! Identity-balanced batches: `P` identities with `K` instances each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Returns `P·K` item indices grouped by identity. Identities are drawn
/// without replacement; instances too unless an identity has fewer than `K`.
pub fn pk_sample_batch(
    by_identity: &BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::config("P and K must be positive"));
    }
    let ids: Vec<usize> = by_identity.iter().filter(|(_, v)| !v.is_empty()).map(|(&id, _)| id).collect();
    if ids.len() < p {
        return Err(Error::contract(format!(
            "batch needs {p} identities, split has {}",
            ids.len()
        )));
    }
    let chosen: Vec<usize> = ids.choose_multiple(rng, p).copied().collect();
    let mut out = Vec::with_capacity(p * k);
    for id in chosen {
        let items = &by_identity[&id];
        if items.len() >= k {
            out.extend(items.choose_multiple(rng, k).copied());
        } else {
            out.extend((0..k).map(|_| *items.choose(rng).expect("non-empty")));
        }
    }
    Ok(out)
}
