//! Damped PageRank by power iteration.

use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct PageRankOptions {
    pub damping: f64,
    /// Convergence threshold on the L1 change between iterates.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankOptions {
    fn default() -> Self {
        Self {
            damping: 0.85,
            tol: 1e-12,
            max_iter: 1000,
        }
    }
}

/// PageRank of a weighted adjacency matrix (row `u` lists the out-edges of
/// `u`; an undirected graph stores both directions). Nodes without out-edges
/// spread their mass uniformly. The result sums to one.
pub fn pagerank(adj: &CsrMatrix, opts: &PageRankOptions) -> Result<Vec<f64>> {
    let n = adj.n_rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if adj.n_cols() != n {
        return Err(Error::InvalidArgument(
            "pagerank needs a square adjacency".into(),
        ));
    }
    let out_weight: Vec<f64> = (0..n).map(|u| adj.row_values(u).iter().sum()).collect();
    let uniform = 1.0 / n as f64;
    let mut x = vec![uniform; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        let dangling: f64 = (0..n).filter(|&u| out_weight[u] == 0.0).map(|u| x[u]).sum();
        let base = (1.0 - opts.damping) * uniform + opts.damping * dangling * uniform;
        next.iter_mut().for_each(|v| *v = base);
        for u in 0..n {
            if out_weight[u] == 0.0 {
                continue;
            }
            let share = opts.damping * x[u] / out_weight[u];
            for (v, w) in adj.row_iter(u) {
                next[v] += share * w;
            }
        }
        // keep the iterate on the simplex despite rounding
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        residual = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if residual < opts.tol {
            log::debug!("pagerank converged after {iter} iterations");
            return Ok(x);
        }
    }
    Err(Error::PageRankNotConverged {
        residual,
        iterations: opts.max_iter,
    })
}
