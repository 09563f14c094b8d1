mod common;

use common::*;
use pgtr::backbone::{propagate_layer, readout, BackboneVariant};
use pgtr::encoding::{added_parameter_formula, EncodingConfig, EncodingFlags};
use pgtr::model::{PgtrConfig, PgtrModel};
use pgtr::numerics::{DenseMatrix, ParamStore, Tape};
use rand::Rng;

fn small_encoding() -> EncodingConfig {
    EncodingConfig {
        h_c: 2,
        h_d: 3,
        h_r: 2,
        h_y: 2,
        n_d: 2,
        n_r: 3,
        ..EncodingConfig::default()
    }
}

fn rows(m: &DenseMatrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn value(store: &ParamStore, name: &str) -> Dense {
    rows(store.value(store.find(name).unwrap()))
}

fn times_t(x: &[f64], w: &Dense) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn axpby(alpha: f64, a: &Dense, beta: f64, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| alpha * p + beta * q).collect())
        .collect()
}

/// Positions rebuilt by hand from the stored tables and fixed encodings.
fn dense_positions(model: &PgtrModel) -> Dense {
    let enc = model.encodings();
    let store = model.store();
    let (n, m) = (model.n_users(), model.n_items());
    let spectral = rows(enc.spectral.as_ref().unwrap());
    let (w_c, w_d, w_r, w_y) = (
        value(store, "enc.w_c"),
        value(store, "enc.w_d"),
        value(store, "enc.w_r"),
        value(store, "enc.w_y"),
    );
    let (w_user, w_item) = (value(store, "enc.w_user"), value(store, "enc.w_item"));
    (0..n + m)
        .map(|j| {
            let user = j < n;
            let local = if user { j } else { j - n };
            let side = |s: &str| {
                if user {
                    format!("enc.{s}_user")
                } else {
                    format!("enc.{s}_item")
                }
            };
            let groups = |a: &Option<pgtr::encoding::GroupAssignment>,
                          b: &Option<pgtr::encoding::GroupAssignment>| {
                if user {
                    a.as_ref().unwrap().group_of[local]
                } else {
                    b.as_ref().unwrap().group_of[local]
                }
            };
            let dg =
                value(store, &side("degree"))[groups(&enc.degree_user, &enc.degree_item)].clone();
            let pr = value(store, &side("pagerank"))
                [groups(&enc.pagerank_user, &enc.pagerank_item)]
            .clone();
            let ty = value(store, "enc.type")[usize::from(user)].clone();
            let mut s = times_t(&spectral[j], &w_c);
            s = add(&s, &times_t(&dg, &w_d));
            s = add(&s, &times_t(&pr, &w_r));
            s = add(&s, &times_t(&ty, &w_y));
            times_t(&s, if user { &w_user } else { &w_item })
        })
        .collect()
}

#[test]
fn forward_matches_dense_oracle_with_exact_attention() {
    let ds = ring(3);
    let g = graph(&ds);
    let mut cfg = PgtrConfig {
        dim: 4,
        lambda3: 0.5,
        encoding: small_encoding(),
        ..PgtrConfig::default()
    };
    cfg.attention.exact = true;
    let model = PgtrModel::new(&g, &cfg).unwrap();

    let a = dense_normalized_adjacency(&dense_adjacency(&g));
    let p = dense_positions(&model);
    let e = value(model.store(), "embedding");
    let s = 1.0 / (cfg.dim as f64).sqrt();
    let h0 = axpby(1.0, &e, cfg.lambda1, &p);
    let mut layers = vec![h0.clone()];
    let mut h = h0;
    for _ in 0..cfg.layers {
        let local = matmul(&a, &h);
        let hat = axpby(1.0, &local, cfg.lambda2, &p);
        let global = dense_softmax_attention(&hat, s);
        h = axpby(1.0 - cfg.lambda3, &local, cfg.lambda3, &global);
        layers.push(h.clone());
    }
    let table = model.final_table().unwrap();
    for j in 0..6 {
        for c in 0..cfg.dim {
            let want = layers.iter().map(|l| l[j][c]).sum::<f64>() / layers.len() as f64;
            assert!((table.get(j, c) - want).abs() < 1e-12, "node {j} col {c}");
        }
    }
    for j in 0..6 {
        let direct = model.encodings().node_position(model.store(), j);
        for c in 0..cfg.dim {
            assert!((direct[c] - p[j][c]).abs() < 1e-14);
        }
    }
}

#[test]
fn disabled_injections_reduce_to_the_backbone() {
    let ds = random_dataset(15, 20, 0.15, 4);
    let g = graph(&ds);
    let mut cfg = PgtrConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..PgtrConfig::default()
    };
    cfg.encoding.flags = EncodingFlags::NONE;
    let model = PgtrModel::new(&g, &cfg).unwrap();
    let a = dense_normalized_adjacency(&dense_adjacency(&g));
    let e = value(model.store(), "embedding");
    let l1 = matmul(&a, &e);
    let l2 = matmul(&a, &l1);
    let table = model.final_table().unwrap();
    for j in 0..g.n_nodes() {
        for c in 0..cfg.dim {
            let want = (e[j][c] + l1[j][c] + l2[j][c]) / 3.0;
            assert!((table.get(j, c) - want).abs() < 1e-12);
        }
    }
    assert_eq!(model.count_added_parameters(), 0);
}

#[test]
fn mixing_stays_on_the_segment_between_branches() {
    let ds = ring(4);
    let g = graph(&ds);
    let mut cfg = PgtrConfig {
        dim: 5,
        layers: 1,
        encoding: small_encoding(),
        ..PgtrConfig::default()
    };
    cfg.attention.exact = true;
    let endpoint = |l3: f64| {
        PgtrModel::new(
            &g,
            &PgtrConfig {
                lambda3: l3,
                ..cfg.clone()
            },
        )
        .unwrap()
        .final_table()
        .unwrap()
    };
    let (local, global) = (endpoint(0.0), endpoint(1.0));
    for l3 in [0.25, 0.7] {
        let mixed = endpoint(l3);
        // one layer: table = (h0 + h1) / 2 with h1 affine in lambda3
        let want = local.scale(1.0 - l3).add(&global.scale(l3));
        assert!(mixed.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn attention_on_identical_rows_is_a_fixed_point() {
    let ds = ring(3);
    let g = graph(&ds);
    let mut cfg = PgtrConfig {
        dim: 3,
        layers: 1,
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 1.0,
        ..PgtrConfig::default()
    };
    cfg.encoding.flags = EncodingFlags::NONE;
    let mut model = PgtrModel::new(&g, &cfg).unwrap();
    // a ring is regular, so constant rows stay constant under propagation
    let id = model.embedding();
    model.store_mut().get_mut(id).value = DenseMatrix::from_fn(6, 3, |_, c| 0.1 * (c + 1) as f64);
    let table = model.final_table().unwrap();
    for j in 0..6 {
        for c in 0..3 {
            assert!((table.get(j, c) - 0.1 * (c + 1) as f64).abs() < 1e-12);
        }
    }
}

fn check_full_gradient(cfg: &PgtrConfig) {
    let report = full_gradient_check(cfg);
    assert!(report.checked > 100);
    assert!(report.failures.is_empty(), "{:?}", report.failures);
}

#[test]
fn full_model_gradients_with_kernel_attention_and_projections() {
    let mut cfg = PgtrConfig {
        dim: 4,
        lambda3: 0.5,
        encoding: EncodingConfig {
            lambda_c: 0.5,
            ..small_encoding()
        },
        ..PgtrConfig::default()
    };
    cfg.attention.features = 16;
    cfg.attention.use_projections = true;
    check_full_gradient(&cfg);
}

#[test]
fn full_model_gradients_with_transform_backbone_and_exact_attention() {
    let mut cfg = PgtrConfig {
        dim: 4,
        lambda3: 0.3,
        backbone: BackboneVariant::TransformGcn,
        encoding: small_encoding(),
        ..PgtrConfig::default()
    };
    cfg.attention.exact = true;
    check_full_gradient(&cfg);
}

#[test]
fn census_matches_closed_form() {
    let g = graph(&random_dataset(40, 50, 0.1, 2));
    let mut r = rng(5);
    for _ in 0..10 {
        let encoding = EncodingConfig {
            h_c: r.gen_range(1..8),
            h_d: r.gen_range(1..6),
            h_r: r.gen_range(1..6),
            h_y: r.gen_range(1..6),
            n_d: r.gen_range(1..12),
            n_r: r.gen_range(1..12),
            ..EncodingConfig::default()
        };
        let cfg = PgtrConfig {
            dim: r.gen_range(2..20),
            encoding,
            ..PgtrConfig::default()
        };
        let model = PgtrModel::new(&g, &cfg).unwrap();
        let e = &cfg.encoding;
        let closed = 2 * (e.n_d * e.h_d + e.n_r * e.h_r + e.h_y)
            + cfg.dim * (e.h_c + e.h_d + e.h_r + e.h_y + 2 * cfg.dim);
        assert_eq!(model.count_added_parameters(), closed);
        assert_eq!(added_parameter_formula(e, cfg.dim), closed);
    }
}

#[test]
fn tape_backbone_agrees_with_model_when_everything_is_off() {
    let ds = random_dataset(10, 12, 0.2, 8);
    let g = graph(&ds);
    let mut cfg = PgtrConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        layers: 3,
        ..PgtrConfig::default()
    };
    cfg.encoding.flags = EncodingFlags::NONE;
    let model = PgtrModel::new(&g, &cfg).unwrap();
    let mut tape = Tape::new(model.store());
    let mut h = tape.param(model.embedding()).unwrap();
    let mut layers = vec![h];
    for _ in 0..3 {
        h = propagate_layer(
            &mut tape,
            model.adjacency(),
            BackboneVariant::LightGcn,
            h,
            None,
        )
        .unwrap();
        layers.push(h);
    }
    let out = readout(&mut tape, &layers).unwrap();
    assert_eq!(tape.value(out), &model.final_table().unwrap());
}
