//! Reachability network R(x_i, x_j) = f(g(x_i), g(x_j)): a siamese per-view
//! encoder with sum or concat+FC view aggregation, a comparator MLP with a
//! sigmoid score, pair-dataset construction from random walks, and SGD
//! training with binary cross-entropy.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_observation, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{bind_dense, dense, dense_relu, DenseVars};
use crate::nn::optim::{sgd_momentum_step, SgdConfig};
use crate::nn::{Bindings, ParamStore, Real, Tape, Var};
use crate::rng::stream;
use crate::sim::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-view embeddings: rotation invariant.
    Sum,
    /// Concatenate per-view embeddings then one dense layer: order sensitive.
    ConcatFc,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "concat_fc" => Ok(Aggregation::ConcatFc),
            other => Err(Error::Config(format!("unknown aggregation {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReachArch {
    pub views: usize,
    pub channels: usize,
    pub rays: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub comparator_hidden: usize,
    pub aggregation: Aggregation,
}

impl Default for ReachArch {
    fn default() -> Self {
        ReachArch {
            views: 4,
            channels: 4,
            rays: 32,
            embed_dim: 64,
            encoder_hidden: 256,
            comparator_hidden: 128,
            aggregation: Aggregation::Sum,
        }
    }
}

impl ReachArch {
    pub fn strip_len(&self) -> usize {
        self.channels * self.rays
    }
}

pub struct ReachabilityNet<R: Real> {
    pub store: ParamStore<R>,
    pub arch: ReachArch,
}

pub struct BoundReach {
    pub enc1: DenseVars,
    pub enc2: DenseVars,
    pub agg: Option<DenseVars>,
    pub f1: DenseVars,
    pub f2: DenseVars,
    pub f_out: DenseVars,
}

impl<R: Real> ReachabilityNet<R> {
    pub fn init(arch: ReachArch, seed: u64) -> Self {
        let mut rng = stream(seed, "reach.init", 0);
        let mut store = ParamStore::new();
        store.insert_dense("g.enc1", arch.strip_len(), arch.encoder_hidden, &mut rng);
        store.insert_dense("g.enc2", arch.encoder_hidden, arch.embed_dim, &mut rng);
        if arch.aggregation == Aggregation::ConcatFc {
            store.insert_dense(
                "g.agg",
                arch.views * arch.embed_dim,
                arch.embed_dim,
                &mut rng,
            );
        }
        store.insert_dense("f.h1", 2 * arch.embed_dim, arch.comparator_hidden, &mut rng);
        store.insert_dense("f.h2", arch.comparator_hidden, arch.comparator_hidden, &mut rng);
        store.insert_dense("f.out", arch.comparator_hidden, 1, &mut rng);
        ReachabilityNet { store, arch }
    }

    pub fn bind(&self, tape: &mut Tape<R>, bindings: &mut Bindings) -> BoundReach {
        BoundReach {
            enc1: bind_dense(&self.store, tape, "g.enc1", bindings),
            enc2: bind_dense(&self.store, tape, "g.enc2", bindings),
            agg: if self.arch.aggregation == Aggregation::ConcatFc {
                Some(bind_dense(&self.store, tape, "g.agg", bindings))
            } else {
                None
            },
            f1: bind_dense(&self.store, tape, "f.h1", bindings),
            f2: bind_dense(&self.store, tape, "f.h2", bindings),
            f_out: bind_dense(&self.store, tape, "f.out", bindings),
        }
    }

    /// Flatten a batch of observations to a `(B * views) x (C * W)` matrix.
    pub fn views_matrix(&self, batch: &[&Observation]) -> Result<Array2<R>> {
        views_matrix::<R>(batch, self.arch.views, self.arch.strip_len())
    }

    /// Embedding graph: `(B * views) x (C * W)` input to `B x E` output.
    pub fn embed_graph(&self, tape: &mut Tape<R>, bound: &BoundReach, x: Var) -> Result<Var> {
        let h = dense_relu(tape, x, bound.enc1.w, bound.enc1.b)?;
        let per_view = dense(tape, h, bound.enc2.w, bound.enc2.b)?;
        let rows = tape.value(per_view).nrows();
        let batch = rows / self.arch.views;
        match self.arch.aggregation {
            Aggregation::Sum => tape.mean_row_groups(per_view, self.arch.views),
            Aggregation::ConcatFc => {
                let cat = tape.reshape(per_view, batch, self.arch.views * self.arch.embed_dim)?;
                let agg = bound.agg.as_ref().expect("concat_fc params");
                dense(tape, cat, agg.w, agg.b)
            }
        }
    }

    /// Comparator logits for row-aligned embedding matrices (`B x E` each).
    pub fn comparator_graph(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundReach,
        ea: Var,
        eb: Var,
    ) -> Result<Var> {
        let cat = tape.concat_cols(&[ea, eb])?;
        let h1 = dense_relu(tape, cat, bound.f1.w, bound.f1.b)?;
        let h2 = dense_relu(tape, h1, bound.f2.w, bound.f2.b)?;
        dense(tape, h2, bound.f_out.w, bound.f_out.b)
    }

    /// Embed a batch of observations (inference).
    pub fn embed_batch(&self, batch: &[&Observation]) -> Result<Array2<R>> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let bound = self.bind(&mut tape, &mut bindings);
        let x = tape.leaf_owned(self.views_matrix(batch)?);
        let e = self.embed_graph(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }

    /// Embed one observation (inference).
    pub fn embed(&self, obs: &Observation) -> Result<Array1<R>> {
        let m = self.embed_batch(&[obs])?;
        Ok(m.row(0).to_owned())
    }

    /// Comparator scores of one embedding against a set of stored
    /// embeddings (`M x E`), in (0, 1).
    pub fn comparator_scores(&self, e: &Array1<R>, set: &Array2<R>) -> Result<Vec<R>> {
        if set.nrows() == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let bound = self.bind(&mut tape, &mut bindings);
        let mut left = Array2::zeros((set.nrows(), e.len()));
        for mut row in left.outer_iter_mut() {
            row.assign(e);
        }
        let ea = tape.leaf_owned(left);
        let eb = tape.leaf_owned(set.clone());
        let logits = self.comparator_graph(&mut tape, &bound, ea, eb)?;
        let s = tape.sigmoid(logits);
        Ok(tape.value(s).column(0).to_vec())
    }

    /// Similarity score in (0, 1) for a pair of observations.
    pub fn score(&self, obs_a: &Observation, obs_b: &Observation) -> Result<R> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let bound = self.bind(&mut tape, &mut bindings);
        let xa = tape.leaf_owned(self.views_matrix(&[obs_a])?);
        let xb = tape.leaf_owned(self.views_matrix(&[obs_b])?);
        let ea = self.embed_graph(&mut tape, &bound, xa)?;
        let eb = self.embed_graph(&mut tape, &bound, xb)?;
        let logits = self.comparator_graph(&mut tape, &bound, ea, eb)?;
        let s = tape.sigmoid(logits);
        Ok(tape.scalar(s))
    }
}

pub fn views_matrix<R: Real>(
    batch: &[&Observation],
    views: usize,
    strip_len: usize,
) -> Result<Array2<R>> {
    let mut m = Array2::zeros((batch.len() * views, strip_len));
    for (b, obs) in batch.iter().enumerate() {
        if obs.views != views || obs.channels * obs.rays != strip_len {
            return Err(Error::ShapeMismatch {
                op: "views_matrix",
                lhs: vec![obs.views, obs.channels, obs.rays],
                rhs: vec![views, strip_len],
            });
        }
        for k in 0..views {
            let strip = obs.view_strip(k);
            let mut row = m.row_mut(b * views + k);
            for (dst, &src) in row.iter_mut().zip(strip.iter()) {
                *dst = R::of(f64::from(src));
            }
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Pair dataset
// ---------------------------------------------------------------------------

/// Reachability label: 1 iff |i - j| <= k.
pub fn label_pair(i: usize, j: usize, k: usize) -> u8 {
    u8::from(i.abs_diff(j) <= k)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub walk: usize,
    pub i: usize,
    pub j: usize,
    pub label: u8,
}

#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Sample `pos_per_walk` positive and `neg_per_walk` negative pairs from
/// each walk (without replacement where possible) and split 80/20 into
/// train/validation by pair.
pub fn build_pair_dataset(
    walks: &[(String, usize)],
    pos_per_walk: usize,
    neg_per_walk: usize,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<PairDataset> {
    let mut records = Vec::new();
    for (w, (name, len)) in walks.iter().enumerate() {
        let t = *len;
        if neg_per_walk > 0 && t <= 2 * k + 1 {
            return Err(Error::WalkTooShort {
                walk: name.clone(),
                detail: format!("length {t} admits no negatives at k={k}"),
            });
        }
        let mut rng = stream(seed, "reach.pairs", w as u64);
        let mut seen = std::collections::HashSet::new();
        for want_positive in [true, false] {
            let target = if want_positive { pos_per_walk } else { neg_per_walk };
            let mut produced = 0;
            let mut attempts = 0usize;
            let attempt_budget = target.saturating_mul(50).max(1000);
            while produced < target {
                attempts += 1;
                let exhausted = attempts > attempt_budget;
                let i = rng.gen_range(0..t);
                let j = if want_positive {
                    let lo = i.saturating_sub(k);
                    let hi = (i + k).min(t - 1);
                    rng.gen_range(lo..=hi)
                } else {
                    // uniform over indices with |i - j| > k
                    let lo_count = i.saturating_sub(k);
                    let hi_count = t.saturating_sub(i + k + 1);
                    let total = lo_count + hi_count;
                    if total == 0 {
                        continue;
                    }
                    let pick = rng.gen_range(0..total);
                    if pick < lo_count {
                        pick
                    } else {
                        i + k + 1 + (pick - lo_count)
                    }
                };
                if !exhausted && !seen.insert((i, j)) {
                    continue; // duplicate; resample while the budget lasts
                }
                let label = label_pair(i, j, k);
                debug_assert_eq!(label == 1, want_positive);
                records.push(PairRecord {
                    walk: w,
                    i,
                    j,
                    label,
                });
                produced += 1;
            }
        }
    }

    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = stream(seed, "reach.split", 0);
    idx.shuffle(&mut rng);
    let val_len = ((records.len() as f64) * val_fraction).round() as usize;
    let (val, train) = idx.split_at(val_len.min(records.len()));
    Ok(PairDataset {
        records,
        train_idx: train.to_vec(),
        val_idx: val.to_vec(),
    })
}

pub fn save_pair_index(path: &std::path::Path, ds: &PairDataset) -> Result<()> {
    let mut out = String::new();
    for r in &ds.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReachTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ReachTrainConfig {
    fn default() -> Self {
        ReachTrainConfig {
            epochs: 30,
            batch_size: 256,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_accuracy_csv(path: &std::path::Path, stats: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.train_loss, s.train_acc, s.val_loss, s.val_acc
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Forward a batch of pair records; returns (loss node, #correct).
fn pair_batch_forward(
    net: &ReachabilityNet<f32>,
    walks: &[Vec<Observation>],
    records: &[PairRecord],
    augment: Option<(&AugmentConfig, &mut rand_chacha::ChaCha8Rng)>,
) -> Result<(Tape<f32>, Bindings, Var, usize)> {
    let mut storage_a: Vec<Observation> = Vec::with_capacity(records.len());
    let mut storage_b: Vec<Observation> = Vec::with_capacity(records.len());
    match augment {
        Some((cfg, rng)) => {
            for r in records {
                storage_a.push(augment_observation(&walks[r.walk][r.i], cfg, rng));
                storage_b.push(augment_observation(&walks[r.walk][r.j], cfg, rng));
            }
        }
        None => {
            for r in records {
                storage_a.push(walks[r.walk][r.i].clone());
                storage_b.push(walks[r.walk][r.j].clone());
            }
        }
    }
    let refs_a: Vec<&Observation> = storage_a.iter().collect();
    let refs_b: Vec<&Observation> = storage_b.iter().collect();

    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let bound = net.bind(&mut tape, &mut bindings);
    let xa = tape.leaf_owned(net.views_matrix(&refs_a)?);
    let xb = tape.leaf_owned(net.views_matrix(&refs_b)?);
    let ea = net.embed_graph(&mut tape, &bound, xa)?;
    let eb = net.embed_graph(&mut tape, &bound, xb)?;
    let logits = net.comparator_graph(&mut tape, &bound, ea, eb)?;

    let targets = Array2::from_shape_fn((records.len(), 1), |(r, _)| records[r].label as f32);
    let correct = tape
        .value(logits)
        .column(0)
        .iter()
        .zip(records.iter())
        .filter(|(&z, r)| (z >= 0.0) == (r.label == 1))
        .count();
    let per_pair = tape.bce_with_logits(logits, Arc::new(targets))?;
    let loss = tape.mean_all(per_pair);
    Ok((tape, bindings, loss, correct))
}

/// SGD training with BCE loss; returns per-epoch train/validation stats.
pub fn train_reachability(
    net: &mut ReachabilityNet<f32>,
    walks: &[Vec<Observation>],
    dataset: &PairDataset,
    cfg: &ReachTrainConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty pair dataset".into()));
    }
    let sgd = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = dataset.train_idx.clone();
        order.shuffle(&mut stream(seed, "reach.shuffle", epoch as u64));
        let mut aug_rng = stream(seed, "reach.aug", epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<PairRecord> =
                chunk.iter().map(|&i| dataset.records[i]).collect();
            let aug = augment.enabled.then_some((augment, &mut aug_rng));
            let (tape, bindings, loss, batch_correct) =
                pair_batch_forward(net, walks, &records, aug)?;
            let loss_value = f64::from(tape.scalar(loss));
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "reachability loss {loss_value} at epoch {epoch}"
                )));
            }
            loss_sum += loss_value * records.len() as f64;
            correct += batch_correct;
            let grads = tape.backward(loss)?;
            net.store.zero_grads();
            net.store.accumulate(&bindings, &grads, 1.0);
            sgd_momentum_step(&mut net.store, &sgd);
        }
        let train_n = order.len().max(1);

        // validation: no augmentation
        let mut val_loss_sum = 0.0;
        let mut val_correct = 0usize;
        for chunk in dataset.val_idx.chunks(cfg.batch_size) {
            let records: Vec<PairRecord> =
                chunk.iter().map(|&i| dataset.records[i]).collect();
            let (tape, _, loss, batch_correct) = pair_batch_forward(net, walks, &records, None)?;
            val_loss_sum += f64::from(tape.scalar(loss)) * records.len() as f64;
            val_correct += batch_correct;
        }
        let val_n = dataset.val_idx.len().max(1);
        let s = EpochStats {
            epoch,
            train_loss: loss_sum / train_n as f64,
            train_acc: correct as f64 / train_n as f64,
            val_loss: val_loss_sum / val_n as f64,
            val_acc: val_correct as f64 / val_n as f64,
        };
        log::info!(
            "reach epoch {}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            s.epoch,
            s.train_loss,
            s.train_acc,
            s.val_loss,
            s.val_acc
        );
        stats.push(s);
    }
    Ok(stats)
}
