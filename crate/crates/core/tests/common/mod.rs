//! Reference implementations and fixtures shared by the integration tests.
//! The oracles are plain dense arithmetic on `Vec`s.

#![allow(dead_code)]

use pgtr::data::{BipartiteGraph, InteractionDataset};
use pgtr::model::{PgtrConfig, PgtrModel};
use pgtr::numerics::{DenseMatrix, Tape};
use pgtr::train::{batch_loss, in_batch_negatives};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random bipartite interactions; every user gets at least one item.
pub fn random_dataset(
    n_users: usize,
    n_items: usize,
    density: f64,
    seed: u64,
) -> InteractionDataset {
    let mut r = rng(seed);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let forced = r.gen_range(0..n_items);
        for i in 0..n_items {
            if i == forced || r.gen::<f64>() < density {
                pairs.push((u, i));
            }
        }
    }
    InteractionDataset::from_pairs(n_users, n_items, &pairs).unwrap()
}

pub fn graph(ds: &InteractionDataset) -> BipartiteGraph {
    BipartiteGraph::build(ds).unwrap()
}

/// Users `u` interact with items `u` and `u+1 (mod n)`: one connected
/// cycle of length `2n`.
pub fn ring(n: usize) -> InteractionDataset {
    let pairs: Vec<_> = (0..n).flat_map(|u| [(u, u), (u, (u + 1) % n)]).collect();
    InteractionDataset::from_pairs(n, n, &pairs).unwrap()
}

pub type Dense = Vec<Vec<f64>>;

/// Joint `(N+M)²` 0/1 adjacency.
pub fn dense_adjacency(g: &BipartiteGraph) -> Dense {
    let (n, m) = (g.n_users(), g.n_items());
    let mut a = vec![vec![0.0; n + m]; n + m];
    for u in 0..n {
        for &i in g.user_neighbors(u) {
            a[u][n + i] = 1.0;
            a[n + i][u] = 1.0;
        }
    }
    a
}

/// `I − D^{-1/2} A D^{-1/2}` with zero rows for isolated nodes.
pub fn dense_laplacian(a: &Dense) -> Dense {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if deg[i] == 0.0 {
            continue;
        }
        l[i][i] = 1.0;
        for j in 0..n {
            if a[i][j] != 0.0 && i != j {
                l[i][j] = -a[i][j] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    l
}

/// `D^{-1/2} A D^{-1/2}`, isolated rows zero.
pub fn dense_normalized_adjacency(a: &Dense) -> Dense {
    let n = a.len();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != 0.0 {
                out[i][j] = a[i][j] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

/// Cyclic Jacobi rotations; returns ascending eigenvalues.
pub fn jacobi_eigenvalues(m: &Dense) -> Vec<f64> {
    let n = m.len();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    vals.sort_by(f64::total_cmp);
    vals
}

pub fn matvec(m: &Dense, x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// PageRank by dense power iteration on the column-stochastic transition
/// matrix; dangling nodes jump uniformly.
pub fn dense_pagerank(a: &Dense, damping: f64) -> Vec<f64> {
    let n = a.len();
    let out_deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut t = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            t[i][j] = if out_deg[j] > 0.0 {
                a[j][i] / out_deg[j]
            } else {
                1.0 / n as f64
            };
        }
    }
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let tx = matvec(&t, &x);
        let next: Vec<f64> = tx
            .iter()
            .map(|v| damping * v + (1.0 - damping) / n as f64)
            .collect();
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if diff < 1e-15 {
            break;
        }
    }
    x
}

/// Row `i`: `Σ_j softmax_j(s² z_iᵀ z_j) z_j`, via naive exponentials.
pub fn dense_softmax_attention(z: &Dense, s: f64) -> Dense {
    let t = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..t)
        .map(|i| {
            let w: Vec<f64> = (0..t).map(|j| (s * s * dot(&z[i], &z[j])).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut row = vec![0.0; z[0].len()];
            for j in 0..t {
                for (o, v) in row.iter_mut().zip(&z[j]) {
                    *o += w[j] / total * v;
                }
            }
            row
        })
        .collect()
}

/// Ranking by full sort on `(-score, index)` after dropping `excluded`.
pub fn brute_force_metrics(
    scores: &[f64],
    excluded: &[usize],
    relevant: &[usize],
    k: usize,
) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(i))
        .collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let top = &order[..k.min(order.len())];
    let hits: Vec<usize> = top
        .iter()
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| p)
        .collect();
    let recall = hits.len() as f64 / relevant.len() as f64;
    let dcg: f64 = hits.iter().map(|&p| 1.0 / ((p + 2) as f64).log2()).sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    (recall, dcg / idcg)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct GradientReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub failures: Vec<String>,
}

/// Central differences on every trainable scalar of a model built on the
/// 6-user ring, under the sampled-softmax loss of one full batch. An entry
/// passes when `|analytic − numeric| ≤ 1e-4·max(|analytic|, |numeric|) + 1e-8`.
pub fn full_gradient_check(cfg: &PgtrConfig) -> GradientReport {
    let ds = ring(6);
    let g = graph(&ds);
    let mut model = PgtrModel::new(&g, cfg).unwrap();
    let mut r = rng(17);
    // move every parameter off its initial value so no entry sits at a kink
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
    let batch: Vec<(usize, usize)> = (0..6).map(|u| (u, u)).collect();
    let mut train_items = ds.items_by_user();
    train_items.iter_mut().for_each(|v| v.sort_unstable());
    let negs = in_batch_negatives(&batch, &train_items).unwrap();
    assert_eq!(negs.skipped, 0);

    let loss_of = |model: &PgtrModel| {
        let mut tape = Tape::new(model.store());
        let loss = batch_loss(model, &mut tape, &batch, &negs)
            .unwrap()
            .unwrap();
        tape.value(loss).get(0, 0)
    };
    let grads = {
        let mut tape = Tape::new(model.store());
        let loss = batch_loss(&model, &mut tape, &batch, &negs)
            .unwrap()
            .unwrap();
        tape.backward(loss).unwrap()
    };
    let ids: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradientReport {
        checked: 0,
        worst_relative: 0.0,
        failures: Vec::new(),
    };
    for id in ids {
        let g = grads.get(id).unwrap_or_else(|| DenseMatrix::zeros(1, 0));
        for k in 0..model.store().get(id).numel() {
            let h = 1e-5;
            let orig = model.store().get(id).value.data()[k];
            model.store_mut().get_mut(id).value.data_mut()[k] = orig + h;
            let up = loss_of(&model);
            model.store_mut().get_mut(id).value.data_mut()[k] = orig - h;
            let down = loss_of(&model);
            model.store_mut().get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = if g.is_empty() { 0.0 } else { g.data()[k] };
            let scale = fd.abs().max(an.abs());
            if scale > 1e-6 {
                report.worst_relative = report.worst_relative.max((fd - an).abs() / scale);
            }
            if (fd - an).abs() > 1e-4 * scale + 1e-8 {
                report.failures.push(format!(
                    "{}[{k}]: analytic {an} numeric {fd}",
                    model.store().get(id).name
                ));
            }
            report.checked += 1;
        }
    }
    report
}
