//! Smallest eigenpairs of sparse symmetric matrices.
//!
//! The matrix is first split into the connected blocks of its sparsity
//! pattern; each block is solved on its own and the spectra are merged.
//! Blocks of at most [`DENSE_LIMIT`] rows use a dense symmetric
//! decomposition, larger ones a block Lanczos iteration with full
//! reorthogonalization and explicit Rayleigh-Ritz extraction. Both paths
//! are held to the same residual contract before anything is returned.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dense::{dot, norm2, DenseMatrix};
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

pub const DENSE_LIMIT: usize = 512;

/// Number of simultaneous start vectors in the Lanczos path; eigenvalues of
/// multiplicity up to this value inside one block are resolved.
const LANCZOS_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EigenStrategy {
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Clone, Copy, Debug)]
pub struct EigenOptions {
    pub tol: f64,
    pub strategy: EigenStrategy,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            strategy: EigenStrategy::Auto,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigenPairs {
    /// Ascending.
    pub values: Vec<f64>,
    /// `n x k`, column `j` pairs with `values[j]`.
    pub vectors: DenseMatrix,
}

impl EigenPairs {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.vectors.rows())
            .map(|r| self.vectors.get(r, j))
            .collect()
    }
}

/// The `k` smallest eigenpairs of a symmetric matrix.
///
/// Every returned pair satisfies `‖Mv − λv‖₂ ≤ tol·‖M‖` where `‖M‖` is the
/// max absolute row sum (an upper bound on the spectral norm), the vectors
/// are orthonormal, and each vector's largest-magnitude entry is positive
/// (magnitudes within `1e-9` relative of the maximum count as ties, broken
/// toward the lowest index).
pub fn symmetric_eigs_smallest(
    matrix: &CsrMatrix,
    k: usize,
    opts: &EigenOptions,
) -> Result<EigenPairs> {
    let n = matrix.n_rows();
    if matrix.n_cols() != n {
        return Err(Error::InvalidArgument(format!(
            "eigensolver needs a square matrix, got {}x{}",
            n,
            matrix.n_cols()
        )));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenpairs of a {n}x{n} matrix"
        )));
    }
    if !matrix.is_symmetric(1e-12) {
        return Err(Error::InvalidArgument(
            "eigensolver needs a symmetric matrix".into(),
        ));
    }
    let norm = matrix.inf_norm().max(f64::MIN_POSITIVE);

    // (value, block order, position in block, global vector)
    let mut candidates: Vec<(f64, usize, usize, Vec<f64>)> = Vec::new();
    for (block_idx, nodes) in pattern_components(matrix).iter().enumerate() {
        let kb = k.min(nodes.len());
        if kb == 0 {
            continue;
        }
        let sub = submatrix(matrix, nodes);
        let use_dense = match opts.strategy {
            EigenStrategy::Dense => true,
            EigenStrategy::Lanczos => false,
            EigenStrategy::Auto => nodes.len() <= DENSE_LIMIT,
        };
        let (values, vectors) = if use_dense {
            dense_smallest(&sub, kb)?
        } else {
            lanczos_smallest(
                &sub,
                kb,
                opts.tol,
                norm,
                opts.seed.wrapping_add(block_idx as u64),
            )?
        };
        for (j, (value, local)) in values.into_iter().zip(vectors).enumerate() {
            let mut global = vec![0.0; n];
            for (&node, &x) in nodes.iter().zip(&local) {
                global[node] = x;
            }
            candidates.push((value, block_idx, j, global));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.truncate(k);

    let mut values = Vec::with_capacity(k);
    let mut vectors = DenseMatrix::zeros(n, k);
    for (j, (value, _, _, mut v)) in candidates.into_iter().enumerate() {
        fix_sign(&mut v);
        for (r, &x) in v.iter().enumerate() {
            vectors.set(r, j, x);
        }
        values.push(value);
    }
    let pairs = EigenPairs { values, vectors };
    verify(matrix, &pairs, opts.tol * norm)?;
    Ok(pairs)
}

/// Flips `v` so its largest-magnitude entry is positive.
pub fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-9))
        .expect("max is attained");
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn verify(matrix: &CsrMatrix, pairs: &EigenPairs, bound: f64) -> Result<()> {
    let n = matrix.n_rows();
    let k = pairs.values.len();
    let mut mv = vec![0.0; n];
    let mut worst = 0.0f64;
    for j in 0..k {
        let v = pairs.vector(j);
        matrix.spmv(&v, &mut mv);
        let res: f64 = mv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - pairs.values[j] * b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(res);
    }
    if worst > bound {
        return Err(Error::EigenNotConverged {
            residual: worst,
            iterations: 0,
        });
    }
    let gram = pairs.vectors.matmul_tn(&pairs.vectors);
    let ortho = gram.max_abs_diff(&DenseMatrix::identity(k));
    if ortho > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "eigenvectors lost orthonormality ({ortho:e})"
        )));
    }
    Ok(())
}

/// Connected blocks of the symmetric sparsity pattern, each sorted, ordered
/// by smallest member.
fn pattern_components(matrix: &CsrMatrix) -> Vec<Vec<usize>> {
    let n = matrix.n_rows();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(u) = stack.pop() {
            members.push(u);
            for (v, w) in matrix.row_iter(u) {
                if w != 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

fn submatrix(matrix: &CsrMatrix, nodes: &[usize]) -> CsrMatrix {
    let mut local = vec![usize::MAX; matrix.n_rows()];
    for (i, &g) in nodes.iter().enumerate() {
        local[g] = i;
    }
    let mut triplets = Vec::new();
    for (i, &g) in nodes.iter().enumerate() {
        for (c, v) in matrix.row_iter(g) {
            if local[c] != usize::MAX {
                triplets.push((i, local[c], v));
            }
        }
    }
    CsrMatrix::from_triplets(nodes.len(), nodes.len(), &triplets)
}

fn dense_smallest(matrix: &CsrMatrix, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = matrix.n_rows();
    let mut a = Mat::<f64>::zeros(n, n);
    for r in 0..n {
        for (c, v) in matrix.row_iter(r) {
            a[(r, c)] = v;
        }
    }
    smallest_of_dense(a, k)
}

fn smallest_of_dense(a: Mat<f64>, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.nrows();
    let eig = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| Error::EigenNotConverged {
            residual: f64::NAN,
            iterations: 0,
        })?;
    super::dense::clear_upper_vector_state();
    // eigenvalues come back in nondecreasing order
    let (u, s) = (eig.U(), eig.S().column_vector());
    Ok((0..k.min(n))
        .map(|j| (s[j], (0..n).map(|r| u[(r, j)]).collect()))
        .unzip())
}

/// Block Lanczos with full reorthogonalization. The basis grows until the
/// `k` smallest Ritz pairs meet the residual bound; at full dimension the
/// extraction is exact.
fn lanczos_smallest(
    matrix: &CsrMatrix,
    k: usize,
    tol: f64,
    norm: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = matrix.n_rows();
    let block = LANCZOS_BLOCK.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut target = n.min((2 * k + 32).max(64));
    let bound = tol * norm;
    let mut last_residual = f64::INFINITY;

    loop {
        while basis.len() < target {
            let j = basis.len();
            let mut w = if j < block {
                random_vector(n, &mut rng)
            } else {
                images[j - block].clone()
            };
            if !orthogonalize(&mut w, &basis) {
                // Krylov space exhausted; continue from a fresh direction.
                w = random_vector(n, &mut rng);
                if !orthogonalize(&mut w, &basis) {
                    break;
                }
            }
            let mut mw = vec![0.0; n];
            matrix.spmv(&w, &mut mw);
            basis.push(w);
            images.push(mw);
        }

        let p = basis.len();
        let projected = Mat::from_fn(p, p, |i, j| {
            0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i]))
        });
        let (theta, coeffs) = smallest_of_dense(projected, k.min(p))?;
        let mut vectors = Vec::with_capacity(theta.len());
        let mut worst = 0.0f64;
        for (t, y) in theta.iter().zip(&coeffs) {
            let mut x = vec![0.0; n];
            let mut mx = vec![0.0; n];
            for (i, &yi) in y.iter().enumerate() {
                for r in 0..n {
                    x[r] += yi * basis[i][r];
                    mx[r] += yi * images[i][r];
                }
            }
            let res = mx
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - t * b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(res);
            vectors.push(x);
        }
        last_residual = last_residual.min(worst);
        if theta.len() == k && worst <= bound {
            return Ok((theta, vectors));
        }
        if p >= n || p < target {
            return Err(Error::EigenNotConverged {
                residual: last_residual,
                iterations: p,
            });
        }
        target = n.min(2 * target);
    }
}

fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Two passes of classical Gram-Schmidt, then normalization. Returns `false`
/// if nothing independent of `basis` is left.
fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start = norm2(w);
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for q in basis {
            let proj = dot(w, q);
            for (x, &qv) in w.iter_mut().zip(q) {
                *x -= proj * qv;
            }
        }
    }
    let end = norm2(w);
    if end <= 1e-10 * start {
        return false;
    }
    w.iter_mut().for_each(|x| *x /= end);
    true
}
