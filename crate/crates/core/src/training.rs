//! Dataset assembly, class balancing, the training loop and full-cloud inference.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{adam_step, AdamState, LrSchedule, Mode, Tape, Tensor};
use crate::cloud::PointCloud;
use crate::descriptor::{normalized_descriptors, PatchDescriptors};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, Ablation, EdgeFormerConfig, EdgeFormerParams};

/// Descriptor rows with a binary label per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPatchSet {
    pub k: usize,
    pub d1: Vec<f32>,
    pub d2: Vec<f32>,
    pub labels: Vec<bool>,
    /// `(source model id, point index)` per row.
    pub provenance: Vec<(u32, u32)>,
}

impl LabeledPatchSet {
    pub fn from_descriptors(desc: &PatchDescriptors, labels: &[bool], model_id: u32) -> Result<Self> {
        if labels.len() != desc.n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} descriptor rows",
                labels.len(),
                desc.n
            )));
        }
        Ok(LabeledPatchSet {
            k: desc.k,
            d1: desc.d1_f32(),
            d2: desc.d2_f32(),
            labels: labels.to_vec(),
            provenance: (0..desc.n as u32).map(|i| (model_id, i)).collect(),
        })
    }

    /// Normalizes a labeled cloud, computes its descriptors and pairs them with its labels.
    pub fn from_cloud(cloud: &PointCloud, k: usize, model_id: u32) -> Result<Self> {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::InvalidArgument("cloud has no labels".into()))?;
        let desc = normalized_descriptors(cloud, k)?;
        Self::from_descriptors(&desc, labels, model_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let k = self.k;
        let mut out = LabeledPatchSet {
            k,
            ..Default::default()
        };
        for &i in indices {
            out.d1.extend_from_slice(&self.d1[i * k..(i + 1) * k]);
            out.d2.extend_from_slice(&self.d2[i * k..(i + 1) * k]);
            out.labels.push(self.labels[i]);
            out.provenance.push(self.provenance[i]);
        }
        out
    }

    /// Pools several sets into one; all must share K.
    pub fn concat(sets: &[LabeledPatchSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::EmptySet)?;
        let mut out = LabeledPatchSet {
            k: first.k,
            ..Default::default()
        };
        for s in sets {
            if s.k != first.k {
                return Err(Error::ShapeMismatch(format!("patch sizes {} and {} differ", first.k, s.k)));
            }
            out.d1.extend_from_slice(&s.d1);
            out.d2.extend_from_slice(&s.d2);
            out.labels.extend_from_slice(&s.labels);
            out.provenance.extend_from_slice(&s.provenance);
        }
        Ok(out)
    }
}

/// Indices of a 1:1 class-balanced subset: every minority point plus an equal-size
/// uniform draw without replacement from the majority class.
pub fn balanced_indices(labels: &[bool], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Unbalanceable);
    }
    let (minority, majority) = if pos.len() <= neg.len() {
        (pos, neg)
    } else {
        (neg, pos)
    };
    let mut picked: Vec<usize> = majority
        .choose_multiple(rng, minority.len())
        .copied()
        .collect();
    picked.extend_from_slice(&minority);
    picked.sort_unstable();
    Ok(picked)
}

pub fn balance_samples(set: &LabeledPatchSet, seed: u64) -> Result<LabeledPatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(set.select(&balanced_indices(&set.labels, &mut rng)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub balance: bool,
    pub model: EdgeFormerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            schedule: LrSchedule::default(),
            seed: 0,
            balance: true,
            model: EdgeFormerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small network, rate 1e-3, 60 epochs, with the decay milestones moved to the
    /// same fractions (3/8 and 3/4) of the shorter run.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            schedule: LrSchedule {
                base_lr: 1e-3,
                milestones: vec![23, 45],
                ..LrSchedule::default()
            },
            model: EdgeFormerConfig::desk(),
            ..Default::default()
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.model.ablation
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        LrSchedule::new(
            self.schedule.base_lr,
            self.schedule.milestones.clone(),
            self.schedule.gamma,
        )?;
        self.model.validate()
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn parse(src: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (no, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(no + 1, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::parse(no + 1, format!("invalid {what} '{value}'"));
            let int = || value.parse::<usize>().map_err(|_| bad(key));
            let real = || value.parse::<f64>().map_err(|_| bad(key));
            let list = || -> Result<Vec<usize>> {
                let inner = value.trim_start_matches('[').trim_end_matches(']');
                inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad(key)))
                    .collect()
            };
            let flag = || match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(key)),
            };
            match key {
                "epochs" => c.epochs = int()?,
                "batch_size" => c.batch_size = int()?,
                "lr" | "base_lr" => c.schedule.base_lr = real()?,
                "milestones" => c.schedule.milestones = list()?,
                "gamma" => c.schedule.gamma = real()?,
                "seed" => c.seed = value.parse().map_err(|_| bad(key))?,
                "balance" => c.balance = flag()?,
                "ablation" => {
                    c.model.ablation = value.parse().map_err(|_| bad(key))?;
                }
                "k" => c.model.k = int()?,
                "d_model" => c.model.d_model = int()?,
                "heads" => c.model.heads = int()?,
                "encoder_layers" => c.model.encoder_layers = int()?,
                "ffn_width" => c.model.ffn_width = int()?,
                "decoder_widths" => c.model.decoder_widths = list()?,
                "dropout" => c.model.dropout_p = real()?,
                "share_encoder" => c.model.share_encoder = flag()?,
                "input_scale" => c.model.input_scale = real()?,
                _ => return Err(Error::parse(no + 1, format!("unknown key '{key}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        };
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {:e}", self.schedule.base_lr);
        let _ = writeln!(s, "milestones = [{}]", join(&self.schedule.milestones));
        let _ = writeln!(s, "gamma = {}", self.schedule.gamma);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "balance = {}", self.balance);
        let _ = writeln!(s, "ablation = {}", m.ablation);
        let _ = writeln!(s, "k = {}", m.k);
        let _ = writeln!(s, "d_model = {}", m.d_model);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "encoder_layers = {}", m.encoder_layers);
        let _ = writeln!(s, "ffn_width = {}", m.ffn_width);
        let _ = writeln!(s, "decoder_widths = [{}]", join(&m.decoder_widths));
        let _ = writeln!(s, "dropout = {}", m.dropout_p);
        let _ = writeln!(s, "share_encoder = {}", m.share_encoder);
        let _ = writeln!(s, "input_scale = {}", m.input_scale);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EdgeFormerParams,
    /// Parameters at the lowest validation loss, when validation data was given.
    pub best: Option<(usize, EdgeFormerParams)>,
    pub log: Vec<EpochLog>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn gather(set: &LabeledPatchSet, idx: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<usize>) {
    let k = set.k;
    let mut d1 = Vec::with_capacity(idx.len() * k);
    let mut d2 = Vec::with_capacity(idx.len() * k);
    let mut t = Vec::with_capacity(idx.len());
    for &i in idx {
        d1.extend_from_slice(&set.d1[i * k..(i + 1) * k]);
        d2.extend_from_slice(&set.d2[i * k..(i + 1) * k]);
        t.push(usize::from(set.labels[i]));
    }
    (d1, d2, t)
}

/// Trains a fresh network. `on_epoch` sees each log entry as it is produced.
pub fn train(
    data: &[LabeledPatchSet],
    config: &TrainConfig,
    validation: Option<&LabeledPatchSet>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let pooled = LabeledPatchSet::concat(data)?;
    if pooled.k != config.model.k {
        return Err(Error::ShapeMismatch(format!(
            "descriptors have K={} but the model expects K={}",
            pooled.k, config.model.k
        )));
    }
    if pooled.len() < 2 * config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} samples is fewer than two batches of {}",
            pooled.len(),
            config.batch_size
        )));
    }
    let mut params = init_params(&config.model, config.seed)?;
    let mut state = AdamState::new(&params.tensors);
    let mut best: Option<(usize, f64, EdgeFormerParams)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        let mut order = if config.balance {
            balanced_indices(&pooled.labels, &mut rng)?
        } else {
            (0..pooled.len()).collect()
        };
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let (d1, d2, targets) = gather(&pooled, batch);
            let mut tape = Tape::<f32>::new();
            let out = forward(&mut tape, &params, &params.tensors, &d1, &d2, Mode::Train, &mut rng)?;
            let loss = tape.softmax_cross_entropy(out.logits, &targets)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { epoch, batch: bi });
            }
            let logits = tape.value(out.logits).data();
            correct += logits
                .chunks(2)
                .zip(&targets)
                .filter(|(l, &t)| usize::from(l[1] > l[0]) == t)
                .count();
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = out
                .params
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam_step(&mut params.tensors, &grads, &mut state, lr)?;
            for (bn, stats) in params.batch_norms.iter_mut().zip(&out.batch_stats) {
                bn.update(stats);
            }
        }
        let mut entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_loss: None,
            val_acc: None,
        };
        if let Some(v) = validation {
            let (vl, va) = evaluate_set(&params, v, config.batch_size.max(256))?;
            entry.val_loss = Some(vl);
            entry.val_acc = Some(va);
            if best.as_ref().is_none_or(|b| vl < b.1) {
                best = Some((epoch, vl, params.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        best: best.map(|(e, _, p)| (e, p)),
        log,
    })
}

/// Eval-mode mean cross-entropy and accuracy over a whole set.
pub fn evaluate_set(params: &EdgeFormerParams, set: &LabeledPatchSet, batch_size: usize) -> Result<(f64, f64)> {
    let probs = probabilities_for_rows(params, &set.d1, &set.d2, set.len(), batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (&p, &l) in probs.iter().zip(&set.labels) {
        let q = if l { p } else { 1.0 - p };
        loss -= q.max(1e-300).ln();
        correct += usize::from((p >= 0.5) == l);
    }
    let n = set.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Edge probabilities for `n` descriptor rows, computed in independent batches.
pub fn probabilities_for_rows(
    params: &EdgeFormerParams,
    d1: &[f32],
    d2: &[f32],
    n: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let k = params.config.k;
    if d1.len() != n * k || d2.len() != n * k {
        return Err(Error::ShapeMismatch(format!("expected {n} rows of {k} descriptor values")));
    }
    let bs = batch_size.max(1);
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(bs))
        .into_par_iter()
        .map(|c| {
            let (a, b) = (c * bs, ((c + 1) * bs).min(n));
            params.edge_probabilities(&d1[a * k..b * k], &d2[a * k..b * k])
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub normalize_and_descriptors_s: f64,
    pub inference_s: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Edge iff probability ≥ 0.5.
    pub labels: Vec<bool>,
    pub timings: StageTimings,
}

impl Prediction {
    pub fn edge_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i]).collect()
    }
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Normalizes the cloud, computes descriptors with the checkpoint's K and
/// classifies every point in eval mode.
pub fn predict(cloud: &PointCloud, params: &EdgeFormerParams, batch_size: usize) -> Result<Prediction> {
    let t0 = Instant::now();
    let desc = normalized_descriptors(cloud, params.config.k)?;
    let t1 = Instant::now();
    let probabilities = probabilities_for_rows(params, &desc.d1_f32(), &desc.d2_f32(), desc.n, batch_size)?;
    let t2 = Instant::now();
    let labels = probabilities.iter().map(|&p| p >= DECISION_THRESHOLD).collect();
    Ok(Prediction {
        probabilities,
        labels,
        timings: StageTimings {
            normalize_and_descriptors_s: (t1 - t0).as_secs_f64(),
            inference_s: (t2 - t1).as_secs_f64(),
        },
    })
}
