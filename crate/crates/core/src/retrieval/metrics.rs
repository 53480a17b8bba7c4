use std::cmp::Ordering;

use crate::autodiff::{dot, Tensor};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Descending score, then ascending id.
fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top-`k` `(id, score)` pairs by inner product with `query`.
///
/// The query is normalized first, so any positive rescaling of it leaves the
/// ranking unchanged.
pub fn rank(query: &[f64], ids: &[u64], embeddings: &Tensor, k: usize) -> Result<Vec<(u64, f64)>> {
    if embeddings.rows() == 0 {
        return Err(Error::Retrieval(
            "cannot rank against an empty gallery".into(),
        ));
    }
    if query.len() != embeddings.cols() {
        return Err(Error::shape("rank", &[query.len()], &embeddings.shape()));
    }
    if k > embeddings.rows() {
        return Err(Error::Retrieval(format!(
            "k = {k} exceeds gallery size {}",
            embeddings.rows()
        )));
    }
    let q = Tensor::row(query).l2_normalized()?;
    let mut scored: Vec<(u64, f64)> = ids
        .iter()
        .zip(embeddings.iter_rows())
        .map(|(&id, g)| (id, dot(q.data(), g)))
        .collect();
    top_k(&mut scored, k);
    Ok(scored)
}

fn top_k(scored: &mut Vec<(u64, f64)>, k: usize) {
    if k == 0 {
        scored.clear();
        return;
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
}

/// AP@k with denominator `min(R, k)`; `None` when the query has no positives.
pub fn average_precision_at_k(relevant: &[bool], total_positives: usize, k: usize) -> Option<f64> {
    if total_positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &rel) in relevant.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    Some(acc / total_positives.min(k) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any gallery positive, left out of the mean.
    pub excluded: usize,
}

/// mAP@k of labelled queries against a labelled gallery. Queries are scored
/// independently (in parallel under [`Exec::Parallel`]) and averaged in
/// query order.
pub fn mean_average_precision(
    queries: &Tensor,
    query_labels: &[usize],
    gallery_ids: &[u64],
    gallery_labels: &[usize],
    gallery: &Tensor,
    k: usize,
    exec: Exec,
) -> Result<MapResult> {
    if queries.rows() != query_labels.len() {
        return Err(Error::shape(
            "mAP queries",
            &queries.shape(),
            &[query_labels.len()],
        ));
    }
    if gallery.rows() != gallery_labels.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::shape(
            "mAP gallery",
            &gallery.shape(),
            &[gallery_labels.len()],
        ));
    }
    let label_of: std::collections::HashMap<u64, usize> = gallery_ids
        .iter()
        .copied()
        .zip(gallery_labels.iter().copied())
        .collect();
    let per_query = par::map_range(exec, queries.rows(), |qi| -> Result<Option<f64>> {
        let y = query_labels[qi];
        let positives = gallery_labels.iter().filter(|&&g| g == y).count();
        let ranked = rank(queries.row_slice(qi), gallery_ids, gallery, k)?;
        let rel: Vec<bool> = ranked.iter().map(|(id, _)| label_of[id] == y).collect();
        Ok(average_precision_at_k(&rel, positives, k))
    });
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for ap in per_query {
        match ap? {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    let map = if evaluated > 0 {
        sum / evaluated as f64
    } else {
        0.0
    };
    Ok(MapResult {
        map,
        evaluated,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_ranking_scores_one() {
        assert_eq!(average_precision_at_k(&[true; 5], 7, 5), Some(1.0));
        assert_eq!(average_precision_at_k(&[true; 3], 3, 5), Some(1.0));
    }

    #[test]
    fn hand_evaluated_ap() {
        let ap = average_precision_at_k(&[true, false, true], 2, 3).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.83333).abs() < 1e-5);
    }

    #[test]
    fn no_hits_and_no_positives() {
        assert_eq!(average_precision_at_k(&[false; 4], 3, 4), Some(0.0));
        assert_eq!(average_precision_at_k(&[false; 4], 0, 4), None);
    }

    #[test]
    fn exact_match_ranks_first_with_unit_score() {
        let g = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let r = rank(&[1.0, 0.0, 0.0], &[10, 11, 12], &g, 3).unwrap();
        assert_eq!(r[0], (11, 1.0));
        // remaining ties break by ascending id
        assert_eq!(r[1].0, 10);
        assert_eq!(r[2].0, 12);
    }

    #[test]
    fn query_scale_does_not_change_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let g = Tensor::from_rows(&rows).unwrap().l2_normalized().unwrap();
        let ids: Vec<u64> = (0..20).collect();
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base: Vec<u64> = rank(&q, &ids, &g, 20)
            .unwrap()
            .into_iter()
            .map(|r| r.0)
            .collect();
        for s in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = q.iter().map(|x| x * s).collect();
            let got: Vec<u64> = rank(&scaled, &ids, &g, 20)
                .unwrap()
                .into_iter()
                .map(|r| r.0)
                .collect();
            assert_eq!(got, base);
        }
    }

    #[test]
    fn ranking_errors() {
        let empty = Tensor::zeros(0, 3);
        assert!(rank(&[1.0, 0.0, 0.0], &[], &empty, 0).is_err());
        let g = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(rank(&[1.0, 0.0], &[0], &g, 2).is_err());
        assert!(rank(&[1.0, 0.0, 0.0], &[0], &g, 1).is_err());
    }

    #[test]
    fn zero_positive_queries_are_excluded() {
        let g = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let res =
            mean_average_precision(&q, &[0, 5], &[0, 1], &[0, 1], &g, 2, Exec::Sequential).unwrap();
        assert_eq!(res.evaluated, 1);
        assert_eq!(res.excluded, 1);
        assert_eq!(res.map, 1.0);
    }
}
