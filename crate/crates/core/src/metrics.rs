//! Full-ranking top-K evaluation: Recall@K and NDCG@K over every item the
//! user has not already been shown.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::PgtrModel;
use crate::numerics::dense::norm2;
use crate::numerics::DenseMatrix;

pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub per_user: Vec<UserMetrics>,
}

/// Indices of the `k` best-scoring items, skipping `excluded` (sorted).
/// Ties go to the lower index.
pub fn top_k(scores: &[f64], excluded: &[usize], k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates
}

/// Recall and NDCG of one ranked list against the user's relevant items
/// (sorted). Gain is 1 per hit with discount `1/log2(rank+1)`.
pub fn user_metrics(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64) {
    if relevant.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

fn sorted_items(sets: &[&InteractionDataset], n_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_users];
    for ds in sets {
        for r in ds.records() {
            out[r.user].push(r.item);
        }
    }
    for items in &mut out {
        items.sort_unstable();
        items.dedup();
    }
    out
}

/// Metrics from a full `N x M` score matrix. Items in any `masked` set are
/// never ranked; users without `target` items are skipped.
pub fn evaluate_scores(
    scores: &DenseMatrix,
    masked: &[&InteractionDataset],
    target: &InteractionDataset,
    k: usize,
) -> Result<RankingMetrics> {
    let n_users = scores.rows();
    if target.n_users() != n_users || target.n_items() != scores.cols() {
        return Err(Error::InvalidArgument(
            "score matrix does not match the dataset".into(),
        ));
    }
    let excluded = sorted_items(masked, n_users);
    let relevant = sorted_items(&[target], n_users);
    let per_user: Vec<UserMetrics> = (0..n_users)
        .into_par_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| {
            let ranked = top_k(scores.row(u), &excluded[u], k);
            let (recall, ndcg) = user_metrics(&ranked, &relevant[u], k);
            UserMetrics {
                user: u,
                recall,
                ndcg,
            }
        })
        .collect();
    if per_user.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = per_user.len() as f64;
    Ok(RankingMetrics {
        k,
        recall: per_user.iter().map(|m| m.recall).sum::<f64>() / n,
        ndcg: per_user.iter().map(|m| m.ndcg).sum::<f64>() / n,
        per_user,
    })
}

/// User-by-item scores (cosine over `tau`) from a final node table.
pub fn score_matrix(table: &DenseMatrix, n_users: usize, tau: f64) -> Result<DenseMatrix> {
    let mut normed = table.clone();
    for r in 0..normed.rows() {
        let n = norm2(normed.row(r));
        if n == 0.0 {
            return Err(Error::ZeroNorm { node: r });
        }
        normed.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    let users = normed.slice_rows(0, n_users);
    let items = normed.slice_rows(n_users, normed.rows() - n_users);
    Ok(users.matmul_nt(&items).scale(1.0 / tau))
}

pub fn evaluate(
    model: &PgtrModel,
    masked: &[&InteractionDataset],
    target: &InteractionDataset,
    k: usize,
) -> Result<RankingMetrics> {
    let table = model.final_table()?;
    let scores = score_matrix(&table, model.n_users(), model.config().tau)?;
    evaluate_scores(&scores, masked, target, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let (r, _) = user_metrics(&[5, 1, 2], &[1, 9], 20);
        assert_eq!(r, 0.5);
        let (_, n) = user_metrics(&[3, 0], &[3], 20);
        assert_eq!(n, 1.0);
        let (_, n) = user_metrics(&[0, 3], &[3], 20);
        assert!((n - 0.6309297535714575).abs() < 1e-15);
    }

    #[test]
    fn top_k_breaks_ties_by_index_and_skips_masked() {
        let s = [0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(top_k(&s, &[], 3), vec![1, 3, 0]);
        assert_eq!(top_k(&s, &[1], 3), vec![3, 0, 2]);
        assert_eq!(top_k(&s, &[0, 1, 2, 3], 3), vec![4]);
    }

    #[test]
    fn masked_items_never_ranked() {
        let ds = |pairs: &[(usize, usize)]| InteractionDataset::from_pairs(1, 4, pairs).unwrap();
        let scores = DenseMatrix::from_rows(&[vec![4.0, 3.0, 2.0, 1.0]]);
        let m = evaluate_scores(
            &scores,
            &[&ds(&[(0, 0)]), &ds(&[(0, 1)])],
            &ds(&[(0, 3)]),
            1,
        )
        .unwrap();
        assert_eq!(m.recall, 0.0);
        let m = evaluate_scores(
            &scores,
            &[&ds(&[(0, 0)]), &ds(&[(0, 1)])],
            &ds(&[(0, 2)]),
            1,
        )
        .unwrap();
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn score_matrix_is_cosine_over_tau() {
        let t = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![5.0, 5.0], vec![0.0, 2.0]]);
        let s = score_matrix(&t, 1, 0.2).unwrap();
        assert!((s.get(0, 0) - 0.5f64.sqrt() / 0.2).abs() < 1e-12);
        assert!(s.get(0, 1).abs() < 1e-15);
    }
}
