//! Sparse mixture-of-experts: noisy top-k gating, dispatch to MLP experts,
//! importance and load balance losses, and importance-score elimination.
//!
//! Gate: `G(x) = TopK(softmax(x W_g + eps))` with `eps ~ N(0, (1/N)^2)` drawn
//! only in training mode. The kept entries are the raw softmax values; they
//! are not renormalized. Ties in the ranking go to the lower expert index.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, MlpParams, INIT_STD};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Weight of the balance losses relative to the task loss.
pub const AUX_WEIGHT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingMode {
    /// Items are channel columns of length `S`.
    Token,
    /// Items are patch rows of length `C`.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatingParams {
    pub weight: String,
    pub experts: usize,
    pub k: usize,
}

impl GatingParams {
    pub fn new(prefix: &str, experts: usize, k: usize) -> Result<Self> {
        if experts == 0 || k == 0 || k > experts {
            return Err(Error::config(format!(
                "top-k must satisfy 1 <= k <= experts, got k={k} with {experts} experts"
            )));
        }
        Ok(Self {
            weight: format!("{prefix}.gate"),
            experts,
            k,
        })
    }

    /// Standard deviation of the exploration noise, `1/N`.
    pub fn noise_scale(&self) -> f64 {
        1.0 / self.experts as f64
    }

    pub fn layout(&self, item_dim: usize) -> Vec<ParamSpec> {
        vec![ParamSpec::new(
            &self.weight,
            &[item_dim, self.experts],
            Init::TruncatedNormal(INIT_STD),
        )]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub gating: GatingParams,
    pub experts: Vec<MlpParams>,
    pub mode: MixingMode,
    pub elimination_fraction: f64,
}

impl MoeParams {
    pub fn new(prefix: &str, mode: MixingMode, experts: usize, k: usize, elimination_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&elimination_fraction) {
            return Err(Error::config(format!(
                "elimination fraction must lie in [0, 1), got {elimination_fraction}"
            )));
        }
        Ok(Self {
            gating: GatingParams::new(prefix, experts, k)?,
            experts: (0..experts)
                .map(|i| MlpParams::new(&format!("{prefix}.experts.{i}")))
                .collect(),
            mode,
            elimination_fraction,
        })
    }

    pub fn layout(&self, item_dim: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut v = self.gating.layout(item_dim);
        for e in &self.experts {
            v.extend(e.layout(item_dim, hidden));
        }
        v
    }
}

/// Routing decision for one batch of items.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    /// `[M, N]`, the top-k softmax values of each row, zero elsewhere.
    pub weights: Tensor,
    /// `(item, expert)` pairs, item-major, best expert first within an item.
    pub selected: Vec<(usize, usize)>,
    pub clean_logits: Tensor,
    pub noisy_logits: Tensor,
    /// Full softmax of the noisy logits.
    pub probs: Tensor,
    pub importance_loss: f64,
    pub load_loss: f64,
}

impl GateOutcome {
    pub fn experts_for(&self, item: usize) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().filter(move |(m, _)| *m == item).map(|&(_, e)| e)
    }
}

/// Graph handles produced while gating.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub clean: Var,
    pub noisy: Var,
    pub probs: Var,
    pub importance: Var,
    pub load: Var,
}

/// Draws the `[M, N]` gate noise row-major from `rng`.
pub fn sample_noise(rng: &mut Rng, items: usize, gating: &GatingParams) -> Result<Tensor> {
    let scale = gating.noise_scale();
    Tensor::from_fn(&[items, gating.experts], |_| rng.normal() * scale)
}

/// Indices of the `k` largest entries, largest first, ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Gates precomputed clean logits. `noise` is added when present.
pub fn record_gate_logits(
    g: &mut Graph,
    clean: Var,
    noise: Option<&Tensor>,
    gating: &GatingParams,
) -> Result<(GateOutcome, GateVars)> {
    let shape = g.value(clean).shape().to_vec();
    if shape.len() != 2 || shape[1] != gating.experts {
        return Err(Error::shape(format!(
            "gate logits {shape:?} for {} experts",
            gating.experts
        )));
    }
    let noisy = match noise {
        Some(eps) => {
            let e = g.constant(eps.clone());
            g.add(clean, e)?
        }
        None => clean,
    };
    let probs = g.softmax(noisy)?;

    let clean_probs = g.softmax(clean)?;
    let imp = g.sum_rows(clean_probs)?;
    let importance = g.cv_squared(imp)?;
    let p_load = g.load_probs(clean, noisy, gating.k, gating.noise_scale())?;
    let load_vec = g.sum_rows(p_load)?;
    let load = g.cv_squared(load_vec)?;

    let n = gating.experts;
    let pv = g.value(probs).data();
    let mut weights = vec![0.0; pv.len()];
    let mut selected = Vec::with_capacity(shape[0] * gating.k);
    for (m, row) in pv.chunks(n).enumerate() {
        for e in top_k_indices(row, gating.k) {
            weights[m * n + e] = row[e];
            selected.push((m, e));
        }
    }
    let outcome = GateOutcome {
        weights: Tensor::new(&shape, weights)?,
        selected,
        clean_logits: g.value(clean).clone(),
        noisy_logits: g.value(noisy).clone(),
        probs: g.value(probs).clone(),
        importance_loss: g.value(importance).item()?,
        load_loss: g.value(load).item()?,
    };
    Ok((
        outcome,
        GateVars {
            clean,
            noisy,
            probs,
            importance,
            load,
        },
    ))
}

/// Computes `items W_g` and gates it.
pub fn record_gate(
    g: &mut Graph,
    store: &ParamStore,
    gating: &GatingParams,
    items: Var,
    noise: Option<&Tensor>,
) -> Result<(GateOutcome, GateVars)> {
    let w = g.param(store, &gating.weight)?;
    let clean = g.linear(items, w, None)?;
    record_gate_logits(g, clean, noise, gating)
}

/// Gates `items[M, D]`, drawing noise from `rng` when `training`.
pub fn gate(
    items: &Tensor,
    store: &ParamStore,
    gating: &GatingParams,
    rng: &mut Rng,
    training: bool,
) -> Result<GateOutcome> {
    let noise = if training {
        Some(sample_noise(rng, items.shape()[0], gating)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let x = g.constant(items.clone());
    Ok(record_gate(&mut g, store, gating, x, noise.as_ref())?.0)
}

/// Squared coefficient of variation of the per-expert summed probabilities.
pub fn importance_loss(probs: &Tensor) -> Result<f64> {
    if probs.rank() != 2 {
        return Err(Error::shape(format!("probs must be [M, N], got {:?}", probs.shape())));
    }
    let n = probs.last_dim();
    let mut imp = vec![0.0; n];
    for row in probs.data().chunks(n) {
        for (a, v) in imp.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(tensor::cv_squared(&imp))
}

/// Squared coefficient of variation of the smooth expert loads.
pub fn load_loss(clean_logits: &Tensor, noisy_logits: &Tensor, gating: &GatingParams) -> Result<f64> {
    if gating.experts < 2 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let c = g.constant(clean_logits.clone());
    let n = g.constant(noisy_logits.clone());
    let p = g.load_probs(c, n, gating.k, gating.noise_scale())?;
    let load = g.sum_rows(p)?;
    Ok(tensor::cv_squared(g.value(load).data()))
}

/// `lambda * (imp / 2 + load / 2)` with `lambda = AUX_WEIGHT`.
pub fn aux_loss(importance: f64, load: f64) -> f64 {
    AUX_WEIGHT * (0.5 * importance + 0.5 * load)
}

pub(crate) fn aux_loss_var(g: &mut Graph, importance: Var, load: Var, weight: f64) -> Result<Var> {
    let s = g.add(importance, load)?;
    g.scale(s, 0.5 * weight)
}

/// Items surviving importance-score elimination, in original order.
///
/// An item's score is its largest routing probability. The
/// `floor(fraction * M)` lowest-scoring items are dropped; among equal
/// scores the higher item index is dropped first.
pub fn importance_score_filter(probs: &Tensor, fraction: f64) -> Vec<usize> {
    let n = probs.last_dim();
    let scores: Vec<f64> = probs
        .data()
        .chunks(n)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    importance_filter_scores(&scores, fraction)
}

pub(crate) fn importance_filter_scores(scores: &[f64], fraction: f64) -> Vec<usize> {
    let m = scores.len();
    let drop = (fraction * m as f64).floor() as usize;
    if drop == 0 {
        return (0..m).collect();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut keep = vec![true; m];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    (0..m).filter(|&i| keep[i]).collect()
}

/// Result of one MoE layer invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutcome {
    pub gate: GateOutcome,
    /// Items that were routed; the rest passed through unchanged.
    pub kept: Vec<usize>,
    /// Number of `(item, expert)` evaluations performed.
    pub expert_evaluations: usize,
    /// Items routed to each expert (after elimination).
    pub histogram: Vec<usize>,
}

/// Graph handles of one MoE layer.
#[derive(Debug, Clone, Copy)]
pub struct MoeVars {
    pub output: Var,
    pub gate: GateVars,
}

/// `y_m = sum_i G(x_m)_i E_i(x_m)` over `items[M, D]`, evaluating only the
/// selected experts. With a nonzero elimination fraction the lowest-scoring
/// items skip the experts and are returned unchanged.
pub fn record_moe(
    g: &mut Graph,
    store: &ParamStore,
    p: &MoeParams,
    items: Var,
    noise: Option<&Tensor>,
) -> Result<(MoeOutcome, MoeVars)> {
    let shape = g.value(items).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("MoE items must be [M, D], got {shape:?}")));
    }
    let (m, d) = (shape[0], shape[1]);
    if let Some(first) = p.experts.first() {
        let (din, _) = first.dims(store)?;
        if din != d {
            return Err(Error::shape(format!("MoE items of width {d} for experts of width {din}")));
        }
    }
    let (outcome, gate_vars) = record_gate(g, store, &p.gating, items, noise)?;

    let kept = if p.elimination_fraction > 0.0 {
        importance_score_filter(&outcome.probs, p.elimination_fraction)
    } else {
        (0..m).collect()
    };
    let mut routed = vec![false; m];
    kept.iter().for_each(|&i| routed[i] = true);

    let n = p.gating.experts;
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(item, e) in &outcome.selected {
        if routed[item] {
            per_expert[e].push(item);
        }
    }

    let mut parts = Vec::with_capacity(n + 1);
    let passed: Vec<usize> = (0..m).filter(|&i| !routed[i]).collect();
    if !passed.is_empty() {
        parts.push((g.gather_rows(items, &passed)?, passed));
    }
    let mut evaluations = 0;
    for (e, rows) in per_expert.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        evaluations += rows.len();
        let sub = g.gather_rows(items, rows)?;
        let out = nn::mlp_forward(g, store, &p.experts[e], sub)?;
        let entries: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let w = g.gather_entries(gate_vars.probs, &entries)?;
        let scaled = g.scale_rows(out, w)?;
        parts.push((scaled, rows.clone()));
    }
    let output = g.scatter_rows(m, parts)?;

    let histogram = per_expert.iter().map(Vec::len).collect();
    Ok((
        MoeOutcome {
            gate: outcome,
            kept,
            expert_evaluations: evaluations,
            histogram,
        },
        MoeVars {
            output,
            gate: gate_vars,
        },
    ))
}

/// Tensor-level MoE forward pass; noise is drawn from `rng` when `training`.
pub fn moe_forward(
    items: &Tensor,
    store: &ParamStore,
    p: &MoeParams,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, MoeOutcome)> {
    if items.rank() != 2 {
        return Err(Error::shape(format!("MoE items must be [M, D], got {:?}", items.shape())));
    }
    let noise = if training {
        Some(sample_noise(rng, items.shape()[0], &p.gating)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let x = g.constant(items.clone());
    let (outcome, vars) = record_moe(&mut g, store, p, x, noise.as_ref())?;
    Ok((g.value(vars.output).clone(), outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::build_store;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(shape, |_| r.normal() * scale).unwrap()
    }

    fn gate_of(clean: &Tensor, experts: usize, k: usize) -> GateOutcome {
        let gating = GatingParams::new("g", experts, k).unwrap();
        let mut g = Graph::new();
        let c = g.constant(clean.clone());
        record_gate_logits(&mut g, c, None, &gating).unwrap().0
    }

    fn moe_store(d: usize, hidden: usize, experts: usize, k: usize, seed: u64, frac: f64) -> (MoeParams, ParamStore) {
        let p = MoeParams::new("moe", MixingMode::Channel, experts, k, frac).unwrap();
        let mut store = build_store(&p.layout(d, hidden), &mut Rng::new(seed)).unwrap();
        for (_, t) in store.iter_mut() {
            let mut r = Rng::new(seed + t.len() as u64);
            t.data_mut().iter_mut().for_each(|v| *v = r.normal() * 0.5);
        }
        (p, store)
    }

    #[test]
    fn k_larger_than_experts_is_config_error() {
        assert!(matches!(GatingParams::new("g", 2, 3), Err(Error::Config { .. })));
        assert!(GatingParams::new("g", 2, 0).is_err());
        assert_eq!(GatingParams::new("g", 4, 1).unwrap().noise_scale(), 0.25);
    }

    #[test]
    fn single_expert_takes_everything() {
        let out = gate_of(&random(&[5, 1], 1, 1.0), 1, 1);
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
        assert_eq!(out.importance_loss, 0.0);
        assert_eq!(out.load_loss, 0.0);
    }

    #[test]
    fn uniform_logits_pick_lowest_index() {
        let out = gate_of(&Tensor::zeros(&[3, 4]).unwrap(), 4, 1);
        for row in out.weights.data().chunks(4) {
            assert_eq!(row, &[0.25, 0.0, 0.0, 0.0]);
        }
        assert_eq!(out.selected, vec![(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn closed_form_top1_weight() {
        let clean = Tensor::new(&[1, 3], vec![0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let out = gate_of(&clean, 3, 1);
        let w = out.weights.data();
        assert!((w[2] - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(&w[..2], &[0.0, 0.0]);
    }

    #[test]
    fn importance_loss_examples() {
        assert_eq!(importance_loss(&Tensor::full(&[6, 4], 0.25).unwrap()).unwrap(), 0.0);
        let mut onehot = Tensor::zeros(&[5, 4]).unwrap();
        for r in 0..5 {
            onehot.data_mut()[r * 4] = 1.0;
        }
        assert!((importance_loss(&onehot).unwrap() - 3.0).abs() < 1e-12);

        let probs = tensor::softmax_lastdim(&random(&[7, 4], 2, 1.0)).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::from_fn(&[7, 4], |i| probs.data()[(i / 4) * 4 + perm[i % 4]]).unwrap();
        let (a, b) = (importance_loss(&probs).unwrap(), importance_loss(&permuted).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn load_loss_degenerate_cases() {
        let gating = GatingParams::new("g", 1, 1).unwrap();
        let c = random(&[3, 1], 3, 1.0);
        assert_eq!(load_loss(&c, &c, &gating).unwrap(), 0.0);

        // k = N: every expert always selected.
        let gating = GatingParams::new("g", 3, 3).unwrap();
        let c = Tensor::full(&[4, 3], 0.7).unwrap();
        assert_eq!(load_loss(&c, &c, &gating).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_examples() {
        assert_eq!(aux_loss(0.0, 0.0), 0.0);
        assert!((aux_loss(3.0, 1.0) - 0.02).abs() < 1e-12);
        assert!((aux_loss(1.0, 1.0) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn importance_filter_examples() {
        let probs = tensor::softmax_lastdim(&random(&[9, 3], 4, 1.0)).unwrap();
        assert_eq!(importance_score_filter(&probs, 0.0), (0..9).collect::<Vec<_>>());
        assert_eq!(importance_score_filter(&probs, 0.1), (0..9).collect::<Vec<_>>());

        let scores = [0.9, 0.6, 0.5, 0.8, 0.7, 0.95, 0.55, 0.65, 0.85, 0.4];
        assert_eq!(importance_filter_scores(&scores, 0.1), (0..9).collect::<Vec<_>>());
        // Ties drop the higher index first.
        assert_eq!(importance_filter_scores(&[0.5, 0.5, 0.9, 0.5], 0.5), vec![0, 2]);
    }

    #[test]
    fn zero_expert_gives_zero_output() {
        let (p, mut store) = moe_store(3, 4, 1, 1, 5, 0.0);
        for name in ["moe.experts.0.w1", "moe.experts.0.w2", "moe.experts.0.b2"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (y, _) = moe_forward(&random(&[4, 3], 6, 1.0), &store, &p, &mut Rng::new(0), false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluates_exactly_k_experts_per_item() {
        for (n, k) in [(1, 1), (4, 1), (4, 2), (3, 3)] {
            let (p, store) = moe_store(5, 6, n, k, 7, 0.0);
            let (_, out) = moe_forward(&random(&[11, 5], 8, 1.0), &store, &p, &mut Rng::new(1), true).unwrap();
            assert_eq!(out.expert_evaluations, 11 * k.min(n));
            assert_eq!(out.histogram.iter().sum::<usize>(), 11 * k);
            for m in 0..11 {
                let nz = out.gate.weights.data()[m * n..(m + 1) * n].iter().filter(|&&w| w > 0.0).count();
                assert_eq!(nz, k);
                let s: f64 = out.gate.weights.data()[m * n..(m + 1) * n].iter().sum();
                assert!(s <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn eliminated_items_pass_through() {
        let (p, store) = moe_store(4, 5, 3, 1, 9, 0.25);
        let x = random(&[8, 4], 10, 1.0);
        let (y, out) = moe_forward(&x, &store, &p, &mut Rng::new(2), false).unwrap();
        assert_eq!(out.kept.len(), 6);
        assert_eq!(out.expert_evaluations, 6);
        for m in (0..8).filter(|m| !out.kept.contains(m)) {
            assert_eq!(&y.data()[m * 4..(m + 1) * 4], &x.data()[m * 4..(m + 1) * 4]);
        }
    }

    #[test]
    fn relabeling_experts_is_a_symmetry() {
        let (p, store) = moe_store(4, 5, 3, 2, 11, 0.0);
        let perm = [2usize, 0, 1];
        let mut relabeled = ParamStore::new();
        let w = store.get("moe.gate").unwrap();
        let wp = Tensor::from_fn(&[4, 3], |i| w.data()[(i / 3) * 3 + perm[i % 3]]).unwrap();
        relabeled.insert("moe.gate", wp).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for part in ["w1", "b1", "w2", "b2"] {
                let t = store.get(&format!("moe.experts.{old}.{part}")).unwrap().clone();
                relabeled.insert(format!("moe.experts.{new}.{part}"), t).unwrap();
            }
        }
        let x = random(&[6, 4], 12, 1.0);
        let (a, _) = moe_forward(&x, &store, &p, &mut Rng::new(0), false).unwrap();
        let (b, _) = moe_forward(&x, &relabeled, &p, &mut Rng::new(0), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gate_is_shift_invariant_per_item() {
        let clean = random(&[6, 4], 13, 1.0);
        let shifts = [0.5, -3.0, 10.0, 0.0, 2.5, -0.1];
        let shifted = Tensor::from_fn(&[6, 4], |i| clean.data()[i] + shifts[i / 4]).unwrap();
        for k in [1, 2] {
            let (a, b) = (gate_of(&clean, 4, k), gate_of(&shifted, 4, k));
            assert_eq!(a.selected, b.selected);
            assert!(a.weights.max_abs_diff(&b.weights) < 1e-12);
            assert!((a.importance_loss - b.importance_loss).abs() < 1e-12);
            assert!((a.load_loss - b.load_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_on_importance_loss_improves_balance() {
        // Items share a direction the gate maps onto expert 0.
        let gating = GatingParams::new("g", 4, 1).unwrap();
        let mut r = Rng::new(14);
        let x = Tensor::from_fn(&[16, 6], |i| if i % 6 == 0 { 2.0 } else { 0.3 * r.normal() }).unwrap();
        let mut w = random(&[6, 4], 15, 0.1);
        w.data_mut()[0] += 1.5;
        let loss_at = |w: &Tensor| -> (f64, Vec<f64>) {
            let mut store = ParamStore::new();
            store.insert("g.gate", w.clone()).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (_, vars) = record_gate(&mut g, &store, &gating, xv, None).unwrap();
            g.backward_into(vars.importance, &mut store).unwrap();
            let grad = store.get("g.gate").unwrap().grad().unwrap().to_vec();
            (g.value(vars.importance).item().unwrap(), grad)
        };
        let (before, grad) = loss_at(&w);
        assert!(before > 1.0);
        for (v, gv) in w.data_mut().iter_mut().zip(&grad) {
            *v -= 0.05 * gv;
        }
        let (after, _) = loss_at(&w);
        assert!(after < before, "{after} !< {before}");
    }
}
