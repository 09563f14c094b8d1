//! Sampled-softmax training with in-batch negatives, Adam and early
//! stopping on validation Recall@20.

use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, RankingMetrics, DEFAULT_K};
use crate::model::PgtrModel;
use crate::numerics::autograd::log_sum_exp;
use crate::numerics::{AdamConfig, AdamState, Tape, Var};

/// Temperatures searched per dataset.
pub const TAU_GRID: [f64; 13] = [
    0.02, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 20,
            seed: 11,
            k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    /// Defaults with the small batch used on tiny datasets.
    pub fn tiny() -> Self {
        Self {
            batch_size: 64,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.patience == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2, patience and k positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid learning rate {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Mean over pairs of `-log softmax` of the positive among itself and its
/// negatives.
pub fn ssm_loss(positives: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    if positives.len() != negatives.len() || positives.is_empty() {
        return Err(Error::InvalidArgument(
            "ssm_loss needs one negative list per positive".into(),
        ));
    }
    let mut total = 0.0;
    for (&p, negs) in positives.iter().zip(negatives) {
        if negs.is_empty() {
            return Err(Error::InvalidArgument(
                "ssm_loss needs at least one negative".into(),
            ));
        }
        if !p.is_finite() || negs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ssm_loss" });
        }
        total += log_sum_exp(std::iter::once(p).chain(negs.iter().copied())) - p;
    }
    Ok(total / positives.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNegatives {
    /// Sorted distinct negative items per pair; empty means skipped.
    pub negatives: Vec<Vec<usize>>,
    pub skipped: usize,
}

/// The other pairs' positives, minus anything the user has trained on.
/// `train_items` holds each user's training items, sorted.
pub fn in_batch_negatives(
    batch: &[(usize, usize)],
    train_items: &[Vec<usize>],
) -> Result<BatchNegatives> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "in-batch negatives need at least two pairs".into(),
        ));
    }
    let mut pool: Vec<usize> = batch.iter().map(|&(_, i)| i).collect();
    pool.sort_unstable();
    pool.dedup();
    let mut skipped = 0;
    let negatives = batch
        .iter()
        .map(|&(u, i)| {
            let seen = &train_items[u];
            let negs: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&j| j != i && seen.binary_search(&j).is_err())
                .collect();
            if negs.is_empty() {
                skipped += 1;
            }
            negs
        })
        .collect();
    Ok(BatchNegatives { negatives, skipped })
}

/// Records the batch loss on `tape`. Pairs without negatives are left out;
/// returns `None` if none remain.
pub fn batch_loss(
    model: &PgtrModel,
    tape: &mut Tape,
    batch: &[(usize, usize)],
    negatives: &BatchNegatives,
) -> Result<Option<Var>> {
    let kept: Vec<usize> = (0..batch.len())
        .filter(|&p| !negatives.negatives[p].is_empty())
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let n_users = model.n_users();
    let mut items: Vec<usize> = Vec::new();
    let mut column: HashMap<usize, usize> = HashMap::new();
    let mut col_of = |item: usize| {
        *column.entry(item).or_insert_with(|| {
            items.push(item);
            items.len() - 1
        })
    };
    let mut rows = Vec::with_capacity(kept.len());
    let mut positives = Vec::with_capacity(kept.len());
    for (r, &p) in kept.iter().enumerate() {
        let (_, i) = batch[p];
        let pos = col_of(i);
        let mut cols = vec![pos];
        cols.extend(negatives.negatives[p].iter().map(|&j| col_of(j)));
        rows.push(cols);
        positives.push((r, pos));
    }
    let users: Vec<usize> = kept.iter().map(|&p| batch[p].0).collect();
    let item_nodes: Vec<usize> = items.iter().map(|&i| n_users + i).collect();

    let table = model.forward(tape)?;
    let u = tape.gather_rows(table, Rc::new(users))?;
    let i = tape.gather_rows(table, Rc::new(item_nodes))?;
    let u = tape.row_l2_normalize(u)?;
    let i = tape.row_l2_normalize(i)?;
    let sims = tape.matmul_nt(u, i)?;
    let logits = tape.scale(sims, 1.0 / model.config().tau)?;
    let lse = tape.masked_log_sum_exp(logits, Rc::new(rows))?;
    let pos = tape.gather_entries(logits, Rc::new(positives))?;
    let diff = tape.sub(lse, pos)?;
    let total = tape.sum(diff)?;
    Ok(Some(tape.scale(total, 1.0 / kept.len() as f64)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub skipped_pairs: usize,
}

/// Trains `model` on `train`, selecting on `validation`. On return the
/// model holds the parameters of the best validation epoch. If the loss
/// turns non-finite the best parameters so far are restored and
/// [`Error::Diverged`] is returned.
pub fn train(
    model: &mut PgtrModel,
    train: &InteractionDataset,
    validation: &InteractionDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut train_items = train.items_by_user();
    train_items.iter_mut().for_each(|v| v.sort_unstable());
    let mut pairs: Vec<(usize, usize)> = train.records().iter().map(|r| (r.user, r.item)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let start = Instant::now();
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.snapshot());
    let mut since_best = 0;
    let mut skipped_pairs = 0;

    for epoch in 1..=cfg.max_epochs {
        pairs.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in pairs.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                skipped_pairs += batch.len();
                continue;
            }
            let negs = in_batch_negatives(batch, &train_items)?;
            skipped_pairs += negs.skipped;
            let step = {
                let mut tape = Tape::new(model.store());
                match batch_loss(model, &mut tape, batch, &negs) {
                    Ok(Some(loss)) => Some(tape.backward(loss)),
                    Ok(None) => None,
                    Err(e) => Some(Err(e)),
                }
            };
            let grads = match step {
                None => continue,
                Some(Ok(g)) if g.loss().is_finite() => g,
                Some(Ok(_)) | Some(Err(Error::NonFinite { .. })) => {
                    model.restore(&best.2);
                    return Err(Error::Diverged { epoch });
                }
                Some(Err(e)) => return Err(e),
            };
            loss_sum += grads.loss();
            batches += 1;
            grads.accumulate_into(model.store_mut());
            adam.step(model.store_mut());
        }

        let val = validation_metrics(model, train, validation, cfg.k)?;
        let record = EpochRecord {
            epoch,
            train_loss: if batches > 0 {
                loss_sum / batches as f64
            } else {
                f64::NAN
            },
            val_recall: val.recall,
            val_ndcg: val.ndcg,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} val recall {:.4} ndcg {:.4}",
            record.train_loss,
            record.val_recall,
            record.val_ndcg
        );
        history.push(record);
        if val.recall > best.1 {
            best = (epoch, val.recall, model.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if skipped_pairs > 0 {
        log::debug!("{skipped_pairs} pair visits had no usable negatives");
    }
    model.restore(&best.2);
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_val_recall: best.1,
        skipped_pairs,
    })
}

fn validation_metrics(
    model: &PgtrModel,
    train: &InteractionDataset,
    validation: &InteractionDataset,
    k: usize,
) -> Result<RankingMetrics> {
    match evaluate(model, &[train], validation, k) {
        Err(Error::EmptyDataset) => Ok(RankingMetrics {
            k,
            recall: 0.0,
            ndcg: 0.0,
            per_user: Vec::new(),
        }),
        other => other,
    }
}
