//! Supervised training: objective, Adam, the epoch loop, evaluation and
//! routing statistics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::moe::MixingMode;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Mean softmax cross-entropy of `logits[B, K]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    g.value(loss).item()
}

/// Task loss plus the already weighted balance losses.
pub fn total_loss(task: f64, aux_total: f64) -> f64 {
    task + aux_total
}

/// Adam without weight decay. Moments are kept per parameter, in the
/// parameter store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        let mut names = Vec::new();
        let mut first = Vec::new();
        for (name, t) in params.iter() {
            names.push(name.to_string());
            first.push(Tensor::zeros(t.shape())?);
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names,
            second: first.clone(),
            first,
        })
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`,
/// which are zeroed afterwards.
pub fn adam_step(params: &mut ParamStore, st: &mut OptimState) -> Result<()> {
    if params.len() != st.names.len() || params.names().zip(&st.names).any(|(a, b)| a != b) {
        return Err(Error::State("optimizer moments do not match the parameters".into()));
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| t.requires_grad() && t.grad().is_none()) {
        return Err(Error::State(format!("no gradient for parameter `{name}`")));
    }
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - st.beta1.powi(t);
    let c2 = 1.0 - st.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad().expect("checked above").to_vec();
        let m = st.first[i].data_mut();
        let v = st.second[i].data_mut();
        let theta = p.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
        }
        p.zero_grad();
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        log::error!("parameter `{name}` is no longer finite");
        return Err(Error::NonFinite { op: "adam_step" });
    }
    Ok(())
}

/// Experts chosen per MoE stage, summed over an epoch or a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHistogram {
    pub name: String,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy over the epoch.
    pub task_loss: f64,
    /// Mean over batches of the weighted balance loss.
    pub aux_loss: f64,
    /// Training-mode accuracy of the batches as they were seen.
    pub accuracy: f64,
    pub histograms: Vec<StageHistogram>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn add_histograms(acc: &mut Vec<StageHistogram>, routing: &[crate::model::StageTrace]) {
    if acc.is_empty() {
        acc.extend(routing.iter().map(|t| StageHistogram {
            name: t.name.clone(),
            counts: vec![0; t.experts],
        }));
    }
    for (h, t) in acc.iter_mut().zip(routing) {
        for (c, n) in h.counts.iter_mut().zip(&t.outcome.histogram) {
            *c += n;
        }
    }
}

/// One pass over `data` in a seeded random order.
///
/// Each batch runs forward in training mode, back-propagates
/// `task + aux_weight * balance` and takes an Adam step. All randomness
/// (shuffle, then gate noise batch by batch) comes from `rng`.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    batch: usize,
    aux_weight: f64,
    st: &mut OptimState,
    rng: &mut Rng,
    report: &mut TrainReport,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let batch = if batch > data.len() {
        log::warn!("batch size {batch} exceeds the {} samples; using {}", data.len(), data.len());
        data.len()
    } else {
        batch
    };
    let order = rng.permutation(data.len());
    let (mut task_sum, mut aux_sum, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
    let mut histograms = Vec::new();
    for idx in order.chunks(batch) {
        let (images, labels) = data.batch(idx)?;
        model.params.zero_grads();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, Some(rng), aux_weight)?;
        let task = g.cross_entropy(out.logits, &labels)?;
        let total = g.add(task, out.aux_total)?;
        g.backward_into(total, &mut model.params)?;
        adam_step(&mut model.params, st)?;

        task_sum += g.value(task).item()? * idx.len() as f64;
        aux_sum += g.value(out.aux_total).item()?;
        let k = g.value(out.logits).last_dim();
        correct += g
            .value(out.logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        batches += 1;
        add_histograms(&mut histograms, &out.routing);
    }
    report.epochs.push(EpochReport {
        epoch: report.epochs.len() + 1,
        task_loss: task_sum / data.len() as f64,
        aux_loss: aux_sum / batches as f64,
        accuracy: correct as f64 / data.len() as f64,
        histograms,
    });
    Ok(())
}

/// Eval-mode accuracy and mean cross-entropy over `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for idx in all.chunks(batch.clamp(1, data.len())) {
        let (images, labels) = data.batch(idx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, None, 0.0)?;
        let logits = g.value(out.logits);
        let k = logits.last_dim();
        correct += logits.data().chunks(k).zip(&labels).filter(|(r, &y)| argmax(r) == y).count();
        loss += cross_entropy(logits, &labels)? * idx.len() as f64;
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Eval-mode routing statistics of one MoE stage over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    pub name: String,
    pub mode: MixingMode,
    /// Summed clean-logit softmax per expert.
    pub importance: Vec<f64>,
    /// Summed smooth selection probability per expert.
    pub load: Vec<f64>,
    pub importance_cv2: f64,
    pub load_cv2: f64,
    /// Routed (post-elimination) items per expert.
    pub histogram: Vec<usize>,
    /// Items the gate scored, eliminated ones included.
    pub items: usize,
}

impl StageStats {
    /// Coefficient of variation of the selection histogram.
    pub fn histogram_cv(&self) -> f64 {
        let h: Vec<f64> = self.histogram.iter().map(|&c| c as f64).collect();
        tensor::cv_squared(&h).sqrt()
    }
}

pub fn routing_stats(model: &Model, data: &Dataset, batch: usize) -> Result<Vec<StageStats>> {
    let mut stats: Vec<StageStats> = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch.clamp(1, data.len().max(1))) {
        let (images, _) = data.batch(idx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, None, 0.0)?;
        if stats.is_empty() {
            stats = out
                .routing
                .iter()
                .map(|t| StageStats {
                    name: t.name.clone(),
                    mode: t.mode,
                    importance: vec![0.0; t.experts],
                    load: vec![0.0; t.experts],
                    importance_cv2: 0.0,
                    load_cv2: 0.0,
                    histogram: vec![0; t.experts],
                    items: 0,
                })
                .collect();
        }
        for (s, t) in stats.iter_mut().zip(&out.routing) {
            let gate = &t.outcome.gate;
            let mut h = Graph::new();
            let clean = h.constant(gate.clean_logits.clone());
            let noisy = h.constant(gate.noisy_logits.clone());
            let probs = h.softmax(clean)?;
            let imp = h.sum_rows(probs)?;
            let p = h.load_probs(clean, noisy, t.k, 1.0 / t.experts as f64)?;
            let load = h.sum_rows(p)?;
            for (a, b) in s.importance.iter_mut().zip(h.value(imp).data()) {
                *a += b;
            }
            for (a, b) in s.load.iter_mut().zip(h.value(load).data()) {
                *a += b;
            }
            for (a, b) in s.histogram.iter_mut().zip(&t.outcome.histogram) {
                *a += b;
            }
            s.items += gate.clean_logits.shape()[0];
        }
    }
    for s in &mut stats {
        s.importance_cv2 = tensor::cv_squared(&s.importance);
        s.load_cv2 = tensor::cv_squared(&s.load);
    }
    Ok(stats)
}
