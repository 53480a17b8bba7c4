use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::UpgradeModule;
use crate::par::Exec;
use crate::rng::{stream, tags};

use super::gallery::Gallery;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshPoint {
    pub fraction: f64,
    pub backfilled: usize,
    pub map: f64,
}

/// Fractions must start at 0, end at 1 and strictly increase.
pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    let ok = fractions.first() == Some(&0.0)
        && fractions.last() == Some(&1.0)
        && fractions.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "refresh fractions must rise strictly from 0 to 1, got {fractions:?}"
        )))
    }
}

/// Upgrades the gallery item by item in a seeded random order, scoring the
/// new-model queries after each fraction. The gallery starts fully old, so
/// the first point equals the backward-compatible score and the last equals
/// the fully upgraded one.
#[allow(clippy::too_many_arguments)]
pub fn hot_refresh(
    gallery: &Gallery,
    psi: &UpgradeModule,
    queries: &Tensor,
    query_labels: &[usize],
    fractions: &[f64],
    order_seed: u64,
    generation: u32,
    k: usize,
    exec: Exec,
) -> Result<Vec<RefreshPoint>> {
    validate_fractions(fractions)?;
    let n = gallery.len();
    let upgraded = psi.upgrade(gallery.embeddings())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(order_seed, tags::BACKFILL));

    let mut live = gallery.clone();
    let mut done = 0;
    let mut curve = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let target = ((f * n as f64).round() as usize).min(n);
        if target > done {
            let batch = &order[done..target];
            live.backfill(batch, &upgraded.select_rows(batch), generation)?;
            done = target;
        }
        let r = live.map_at_k(queries, query_labels, k, exec)?;
        curve.push(RefreshPoint {
            fraction: f,
            backfilled: done,
            map: r.map,
        });
    }
    Ok(curve)
}
