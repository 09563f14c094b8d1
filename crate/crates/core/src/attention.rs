//! All-pairs attention in linear time through positive random features.
//!
//! With `φ(x) = exp(−‖x‖²/2)/√m · [exp(w₁ᵀx), …, exp(w_mᵀx)]` and i.i.d.
//! standard normal `w_k`, `φ(q)ᵀφ(k)` is an unbiased estimate of
//! `exp(qᵀk)`. Row `i` of the aggregation is then
//!
//! ```text
//!   φ(q_i)ᵀ Σ_j φ(k_j) v_jᵀ  /  φ(q_i)ᵀ Σ_t φ(k_t)
//! ```
//!
//! where both sums are computed once for all rows. Queries and keys are the
//! input rows multiplied by `input_scale` before the map; values are the
//! unscaled rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dense::dot;
use crate::numerics::{DenseMatrix, Tape, TapeFunction, Var};

/// Largest exponent accepted inside the feature map.
const MAX_EXPONENT: f64 = 700.0;
const MIN_DENOMINATOR: f64 = 1e-30;

/// `m` random directions in `R^d`, drawn once from a seed and never
/// resampled.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatureMap {
    directions: DenseMatrix,
    seed: u64,
}

impl RandomFeatureMap {
    pub fn new(dim: usize, features: usize, seed: u64) -> Self {
        assert!(
            features >= 1,
            "random feature map needs at least one feature"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions =
            DenseMatrix::from_fn(features, dim, |_, _| StandardNormal.sample(&mut rng));
        Self { directions, seed }
    }

    pub fn features(&self) -> usize {
        self.directions.rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn directions(&self) -> &DenseMatrix {
        &self.directions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub features: usize,
    /// Learn separate query/key/value maps instead of using the rows
    /// directly.
    pub use_projections: bool,
    /// Use the quadratic exact softmax instead of random features.
    #[serde(default)]
    pub exact: bool,
    /// Factor applied to queries and keys before the feature map;
    /// `1/√d` when unset.
    #[serde(default)]
    pub input_scale: Option<f64>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            features: 128,
            use_projections: false,
            exact: false,
            input_scale: None,
        }
    }
}

/// The default scale applied to queries and keys for embedding width `d`.
pub fn default_input_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Applies the feature map to every row of `x` (`T x d` to `T x m`).
pub fn feature_map(x: &DenseMatrix, rf: &RandomFeatureMap) -> Result<DenseMatrix> {
    let mut logits = x.matmul_nt(rf.directions());
    let inv_sqrt_m = 1.0 / (rf.features() as f64).sqrt();
    for r in 0..x.rows() {
        let half_sq = 0.5 * dot(x.row(r), x.row(r));
        for v in logits.row_mut(r) {
            let e = *v - half_sq;
            if e > MAX_EXPONENT {
                return Err(Error::FeatureOverflow { exponent: e });
            }
            *v = e.exp() * inv_sqrt_m;
        }
    }
    Ok(logits)
}

pub fn feature_map_vec(x: &[f64], rf: &RandomFeatureMap) -> Result<Vec<f64>> {
    Ok(feature_map(&DenseMatrix::from_vec(1, x.len(), x.to_vec()), rf)?.into_vec())
}

/// Quadratic-cost reference: row `i` is `Σ_j softmax_j(s² z_iᵀ z_j) z_j`
/// with `s = input_scale`.
pub fn exact_attention(z: &DenseMatrix, input_scale: f64) -> DenseMatrix {
    let t = z.rows();
    let s2 = input_scale * input_scale;
    let mut out = DenseMatrix::zeros(t, z.cols());
    for i in 0..t {
        let logits: Vec<f64> = (0..t).map(|j| s2 * dot(z.row(i), z.row(j))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let row = out.row_mut(i);
        for (j, w) in weights.iter().enumerate() {
            for (o, &v) in row.iter_mut().zip(z.row(j)) {
                *o += w / total * v;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct KernelAttention {
    pub output: DenseMatrix,
    /// Scalar multiplications performed, for cost accounting.
    pub multiplications: u64,
}

/// Linear-cost kernelized aggregation of the rows of `z`.
pub fn kernelized_attention(
    z: &DenseMatrix,
    rf: &RandomFeatureMap,
    input_scale: f64,
) -> Result<KernelAttention> {
    let (t, d) = z.shape();
    let m = rf.features();
    if rf.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "feature map expects width {}, input has {d}",
            rf.dim()
        )));
    }
    let mut mults = 0u64;

    // feature map: scaling, squared norm and m projections per row
    let q = z.scale(input_scale);
    let phi = feature_map(&q, rf)?;
    mults += (t * d + t * d + t * m * d + t * m) as u64;

    // global summaries: Σ_j φ_j v_jᵀ (m x d) and Σ_t φ_t (m)
    let mut kv = DenseMatrix::zeros(m, d);
    let mut ksum = vec![0.0; m];
    for j in 0..t {
        let v = z.row(j);
        for (k, &p) in phi.row(j).iter().enumerate() {
            ksum[k] += p;
            for (o, &x) in kv.row_mut(k).iter_mut().zip(v) {
                *o += p * x;
            }
        }
    }
    mults += (t * m * d) as u64;

    let mut output = DenseMatrix::zeros(t, d);
    for i in 0..t {
        let p = phi.row(i);
        let denom = dot(p, &ksum);
        if denom < MIN_DENOMINATOR {
            return Err(Error::AttentionUnderflow { value: denom });
        }
        let row = output.row_mut(i);
        for (k, &pk) in p.iter().enumerate() {
            for (o, &x) in row.iter_mut().zip(kv.row(k)) {
                *o += pk * x;
            }
        }
        row.iter_mut().for_each(|o| *o /= denom);
    }
    mults += (t * m + t * m * d + t * d) as u64;

    Ok(KernelAttention {
        output,
        multiplications: mults,
    })
}

/// Tape primitive for the random feature map; the directions are constant.
struct FeatureMapFn {
    directions: DenseMatrix,
}

impl TapeFunction for FeatureMapFn {
    fn name(&self) -> &'static str {
        "random_feature_map"
    }

    // ∂φ_ik/∂x_i = φ_ik (w_k − x_i)
    fn backward(
        &self,
        inputs: &[&DenseMatrix],
        output: &DenseMatrix,
        grad: &DenseMatrix,
    ) -> Vec<Option<DenseMatrix>> {
        let x = inputs[0];
        let weighted = grad.zip_map(output, |g, p| g * p);
        let mut gx = weighted.matmul(&self.directions);
        for r in 0..x.rows() {
            let s: f64 = weighted.row(r).iter().sum();
            for (o, &xv) in gx.row_mut(r).iter_mut().zip(x.row(r)) {
                *o -= s * xv;
            }
        }
        vec![Some(gx)]
    }
}

/// Optional learned query/key/value maps (`d x d` each, applied on the
/// right).
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Kernelized attention recorded on the tape.
pub fn kernelized_attention_on_tape(
    tape: &mut Tape,
    h: Var,
    rf: &RandomFeatureMap,
    input_scale: f64,
    projections: Option<AttentionProjections>,
) -> Result<Var> {
    let (queries, keys, values) = match projections {
        None => (h, h, h),
        Some(p) => (
            tape.matmul(h, p.query)?,
            tape.matmul(h, p.key)?,
            tape.matmul(h, p.value)?,
        ),
    };
    let phi_q = feature_map_on_tape(tape, queries, rf, input_scale)?;
    let phi_k = if projections.is_some() {
        feature_map_on_tape(tape, keys, rf, input_scale)?
    } else {
        phi_q
    };
    let kv = tape.matmul_tn(phi_k, values)?;
    let ksum = tape.column_sums(phi_k)?;
    let numer = tape.matmul(phi_q, kv)?;
    let denom = tape.matmul_nt(phi_q, ksum)?;
    let smallest = tape
        .value(denom)
        .data()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if smallest < MIN_DENOMINATOR {
        return Err(Error::AttentionUnderflow { value: smallest });
    }
    tape.div_rows(numer, denom)
}

/// Exact softmax attention recorded on the tape; quadratic in the number of
/// rows, meant for tiny graphs and reference runs.
pub fn exact_attention_on_tape(tape: &mut Tape, h: Var, input_scale: f64) -> Result<Var> {
    let rows = tape.value(h).rows();
    let logits = tape.matmul_nt(h, h)?;
    let logits = tape.scale(logits, input_scale * input_scale)?;
    let all: Vec<Vec<usize>> = vec![(0..rows).collect(); rows];
    let lse = tape.masked_log_sum_exp(logits, std::rc::Rc::new(all))?;
    let neg = tape.scale(lse, -1.0)?;
    let shifted = tape.add_column(logits, neg)?;
    let weights = tape.exp(shifted)?;
    tape.matmul(weights, h)
}

fn feature_map_on_tape(
    tape: &mut Tape,
    x: Var,
    rf: &RandomFeatureMap,
    input_scale: f64,
) -> Result<Var> {
    let scaled = tape.scale(x, input_scale)?;
    let phi = feature_map(tape.value(scaled), rf)?;
    tape.custom(
        Box::new(FeatureMapFn {
            directions: rf.directions().clone(),
        }),
        vec![scaled],
        phi,
    )
}
