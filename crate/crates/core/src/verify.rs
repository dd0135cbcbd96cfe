//! Independent checks: finite-difference gradients, a dense evaluation of
//! mixture-of-experts layers, a Monte-Carlo estimate of the load
//! probabilities, and routing-stability detection for gradient checks.
//!
//! The oracles use their own loops and rankings; they do not call into the
//! graph engine or the gating code they are meant to check.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{build_model, Architecture, StageTrace};
use crate::moe::{GatingParams, MoeParams};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for paths without routing.
pub const DENSE_TOL: f64 = 1e-5;
/// Tolerance for paths through MoE layers.
pub const SPARSE_TOL: f64 = 1e-4;

/// Routing decisions of a forward pass, compared across probes, and how
/// close the pass came to changing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Per stage: noisy-logit order of every item, then the kept items.
    pub signature: Vec<Vec<usize>>,
    /// Smallest probability gap that decides any part of the signature.
    pub margin: f64,
}

impl Routing {
    pub fn none() -> Self {
        Self {
            signature: Vec::new(),
            margin: f64::INFINITY,
        }
    }

    pub fn from_traces(traces: &[StageTrace]) -> Self {
        let mut signature = Vec::new();
        let mut margin = f64::INFINITY;
        for t in traces {
            let gate = &t.outcome.gate;
            let n = t.experts;
            let mut order_sig = Vec::with_capacity(gate.probs.len());
            let mut scores = Vec::new();
            for (row, logits) in gate.probs.data().chunks(n).zip(gate.noisy_logits.data().chunks(n)) {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                for w in order.windows(2) {
                    margin = margin.min(row[w[0]] - row[w[1]]);
                }
                order_sig.extend(order);
                scores.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            signature.push(order_sig);
            if t.outcome.kept.len() < scores.len() {
                let kept: std::collections::HashSet<usize> = t.outcome.kept.iter().copied().collect();
                let lowest_kept = t.outcome.kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
                let highest_dropped = (0..scores.len())
                    .filter(|i| !kept.contains(i))
                    .map(|i| scores[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                margin = margin.min(lowest_kept - highest_dropped);
            }
            signature.push(t.outcome.kept.clone());
        }
        Self { signature, margin }
    }
}

/// One evaluation of the checked function.
#[derive(Debug, Clone)]
pub struct Probe {
    pub loss: f64,
    pub routing: Routing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
    pub max_rel: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    pub margin: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences for every
/// trainable coordinate of `params`.
///
/// `f(params, with_grad)` must be deterministic (any gate noise frozen) and,
/// when `with_grad` is set, accumulate gradients into `params`. The check
/// refuses to run when the routing margin is below ten times the step and
/// aborts if any probe changes the routing.
pub fn fd_gradcheck<F>(params: &mut ParamStore, mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<Probe>,
{
    params.clear_grads();
    params.zero_grads();
    let base = f(params, true)?;
    let margin = base.routing.margin;
    if margin <= 10.0 * step {
        return Err(Error::Unstable(format!(
            "routing margin {margin:.3e} is within 10x the step {step:.0e}"
        )));
    }
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n.to_string(), t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)))
        .collect();
    params.clear_grads();

    let mut tensors = Vec::with_capacity(analytic.len());
    for (name, grad) in &analytic {
        let mut worst = TensorError {
            name: name.clone(),
            max_rel: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let original = params.require(name)?.data()[i];
            let mut eval_at = |value: f64, params: &mut ParamStore| -> Result<f64> {
                params.get_mut(name).expect("present").data_mut()[i] = value;
                let probe = f(params, false)?;
                if probe.routing.signature != base.routing.signature {
                    return Err(Error::Unstable(format!(
                        "routing changed when probing {name}[{i}] (margin {margin:.3e})"
                    )));
                }
                Ok(probe.loss)
            };
            let plus = eval_at(original + step, params);
            let minus = plus.and_then(|p| eval_at(original - step, params).map(|m| (p, m)));
            params.get_mut(name).expect("present").data_mut()[i] = original;
            let (plus, minus) = minus?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(a, numeric);
            if rel > worst.max_rel || i == 0 {
                worst = TensorError {
                    name: name.clone(),
                    max_rel: rel,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        tensors.push(worst);
    }
    let top = tensors
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .cloned();
    Ok(GradCheckReport {
        max_rel: top.as_ref().map_or(0.0, |t| t.max_rel),
        worst: top.map_or_else(String::new, |t| t.name),
        tensors,
        margin,
        step,
        tolerance,
    })
}

/// Redraws the parameters at a well-conditioned point for gradient checks:
/// weights `N(0, 1/fan_in)`, norm scales `1 + N(0, 0.1^2)`, everything else
/// `N(0, 0.1^2)`. The small training init makes many gradients nearly zero,
/// where central differences are dominated by rounding.
pub fn gradcheck_point(params: &mut ParamStore, rng: &mut Rng) {
    for (name, t) in params.iter_mut() {
        let (scale, offset) = if t.rank() == 2 {
            ((1.0 / t.shape()[0] as f64).sqrt(), 0.0)
        } else if name.ends_with(".gamma") {
            (0.1, 1.0)
        } else {
            (0.1, 0.0)
        };
        for v in t.data_mut() {
            *v = offset + scale * rng.normal();
        }
    }
}

/// Loss of `arch` on a batch: cross-entropy plus weighted balance losses,
/// with gate noise drawn from a clone of `noise` so every call sees the same
/// realization.
pub fn model_probe(
    arch: &Architecture,
    params: &mut ParamStore,
    images: &Tensor,
    labels: &[usize],
    noise: Option<&Rng>,
    aux_weight: f64,
    with_grad: bool,
) -> Result<Probe> {
    let mut g = Graph::new();
    let mut rng = noise.cloned();
    let out = arch.forward(&mut g, params, images, rng.as_mut(), aux_weight)?;
    let task = g.cross_entropy(out.logits, labels)?;
    let total = g.add(task, out.aux_total)?;
    if with_grad {
        g.backward_into(total, params)?;
    }
    Ok(Probe {
        loss: g.value(total).item()?,
        routing: Routing::from_traces(&out.routing),
    })
}

/// Gradient check of a freshly built model at `seed`: a small synthetic
/// batch, training-mode gate noise, balance weight `aux_weight`.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    aux_weight: f64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut model = build_model(cfg, &mut rng)?;
    gradcheck_point(&mut model.params, &mut rng);
    let (h, w, c) = (cfg.image_height, cfg.image_width, cfg.channels);
    let images = Tensor::from_fn(&[batch, h, w, c], |_| rng.uniform())?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.classes as u64) as usize).collect();
    let noise = rng.fork();
    let arch = &model.arch;
    fd_gradcheck(
        &mut model.params,
        |p, grad| model_probe(arch, p, &images, &labels, Some(&noise), aux_weight, grad),
        step,
        tolerance,
    )
}

fn oracle_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn oracle_mlp(x: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Vec<f64> {
    let (d, hdim) = (w1.shape()[0], w1.shape()[1]);
    let mut hidden = vec![0.0; hdim];
    for (j, hj) in hidden.iter_mut().enumerate() {
        let mut s = b1.data()[j];
        for (i, xi) in x.iter().enumerate() {
            s += xi * w1.data()[i * hdim + j];
        }
        *hj = oracle_gelu(s);
    }
    (0..d)
        .map(|o| {
            let mut s = b2.data()[o];
            for (j, hj) in hidden.iter().enumerate() {
                s += hj * w2.data()[j * d + o];
            }
            s
        })
        .collect()
}

fn oracle_gate_probs(x: &[f64], wg: &Tensor) -> Vec<f64> {
    let n = wg.shape()[1];
    let logits: Vec<f64> = (0..n)
        .map(|e| x.iter().enumerate().map(|(i, xi)| xi * wg.data()[i * n + e]).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn oracle_experts(store: &ParamStore, p: &MoeParams) -> Result<Vec<[Tensor; 4]>> {
    p.experts
        .iter()
        .map(|e| {
            Ok([
                store.require(&e.w1)?.clone(),
                store.require(&e.b1)?.clone(),
                store.require(&e.w2)?.clone(),
                store.require(&e.b2)?.clone(),
            ])
        })
        .collect()
}

/// Eval-mode MoE evaluated densely: every expert on every item. With
/// `top_k` set, weights outside each item's `top_k` most probable experts
/// (ties to the lower index) are zeroed; otherwise the full softmax is used.
pub fn dense_moe_oracle(items: &Tensor, store: &ParamStore, p: &MoeParams, top_k: Option<usize>) -> Result<Tensor> {
    if items.rank() != 2 {
        return Err(Error::shape(format!("items must be [M, D], got {:?}", items.shape())));
    }
    let wg = store.require(&p.gating.weight)?;
    let experts = oracle_experts(store, p)?;
    let d = items.last_dim();
    let mut out = Vec::with_capacity(items.len());
    for x in items.data().chunks(d) {
        let mut probs = oracle_gate_probs(x, wg);
        if let Some(k) = top_k {
            let mut keep = vec![false; probs.len()];
            for _ in 0..k.min(probs.len()) {
                let mut best = None;
                for (e, &pe) in probs.iter().enumerate() {
                    if !keep[e] && best.is_none_or(|b: usize| pe > probs[b]) {
                        best = Some(e);
                    }
                }
                keep[best.expect("k <= N")] = true;
            }
            for (pe, k) in probs.iter_mut().zip(&keep) {
                if !k {
                    *pe = 0.0;
                }
            }
        }
        let mut y = vec![0.0; d];
        for (pe, [w1, b1, w2, b2]) in probs.iter().zip(&experts) {
            if *pe == 0.0 {
                continue;
            }
            for (yo, eo) in y.iter_mut().zip(oracle_mlp(x, w1, b1, w2, b2)) {
                *yo += pe * eo;
            }
        }
        out.extend(y);
    }
    Tensor::new(items.shape(), out)
}

/// Monte-Carlo frequency that each expert lands in its item's top `k` under
/// gate noise `N(0, (1/N)^2)`.
///
/// Without `noisy`, all experts draw fresh noise every trial. With a
/// recorded `noisy` realization, only expert `i`'s own noise is redrawn
/// while the other experts keep their recorded noisy logits; this is the
/// quantity the smooth load estimate models.
pub fn mc_load_oracle(
    clean: &Tensor,
    noisy: Option<&Tensor>,
    gating: &GatingParams,
    trials: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let n = gating.experts;
    if clean.rank() != 2 || clean.last_dim() != n {
        return Err(Error::shape(format!("clean logits {:?} for {n} experts", clean.shape())));
    }
    let sigma = gating.noise_scale();
    let k = gating.k;
    let m = clean.shape()[0];
    let mut freq = vec![0.0; m * n];
    let mut draw = vec![0.0; n];
    for r in 0..m {
        let c = &clean.data()[r * n..(r + 1) * n];
        match noisy {
            None => {
                let mut hits = vec![0usize; n];
                for _ in 0..trials {
                    for (d, ci) in draw.iter_mut().zip(c) {
                        *d = ci + sigma * rng.normal();
                    }
                    for i in 0..n {
                        // experts strictly ahead of i, ties broken toward the lower index
                        let ahead = (0..n)
                            .filter(|&j| j != i && (draw[j] > draw[i] || (draw[j] == draw[i] && j < i)))
                            .count();
                        if ahead < k {
                            hits[i] += 1;
                        }
                    }
                }
                for i in 0..n {
                    freq[r * n + i] = hits[i] as f64 / trials as f64;
                }
            }
            Some(nz) => {
                let row = &nz.data()[r * n..(r + 1) * n];
                for i in 0..n {
                    let mut hits = 0usize;
                    for _ in 0..trials {
                        let mine = c[i] + sigma * rng.normal();
                        let ahead = (0..n).filter(|&j| j != i && row[j] >= mine).count();
                        if ahead < k {
                            hits += 1;
                        }
                    }
                    freq[r * n + i] = hits as f64 / trials as f64;
                }
            }
        }
    }
    Tensor::new(&[m, n], freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{self, MixingMode};
    use crate::params::build_store;

    fn quadratic_store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn half_square_norm_is_exact() {
        let mut s = quadratic_store(&[0.3, -1.2, 2.5, 0.0]);
        let report = fd_gradcheck(
            &mut s,
            |p, grad| {
                let t = p.get_mut("theta").unwrap();
                let loss = t.data().iter().map(|v| 0.5 * v * v).sum();
                if grad {
                    let g = t.data().to_vec();
                    t.accumulate_grad(&g);
                }
                Ok(Probe { loss, routing: Routing::none() })
            },
            FD_STEP,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        // parameters are restored exactly
        assert_eq!(s.get("theta").unwrap().data(), [0.3, -1.2, 2.5, 0.0]);
        assert!(report.tolerance == 1e-10 && report.tensors.len() == 1);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let mut s = quadratic_store(&[0.7, 0.1]);
        let report = fd_gradcheck(
            &mut s,
            |p, grad| {
                let t = p.get_mut("theta").unwrap();
                let loss = t.data().iter().map(|v| v.sin()).sum();
                if grad {
                    let g: Vec<f64> = t.data().iter().map(|v| v.cos()).collect();
                    t.accumulate_grad(&g);
                }
                Ok(Probe { loss, routing: Routing::none() })
            },
            FD_STEP,
            0.0,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn routing_changes_abort_the_check() {
        let route = |x: f64| Routing {
            signature: vec![vec![usize::from(x > 0.5)]],
            margin: (x - 0.5).abs(),
        };
        let f = |p: &mut ParamStore, _: bool| {
            let x = p.get("theta").unwrap().data()[0];
            Ok(Probe { loss: x, routing: route(x) })
        };
        let mut near = quadratic_store(&[0.5 + 1e-6]);
        assert!(matches!(fd_gradcheck(&mut near, f, FD_STEP, 1e-4), Err(Error::Unstable(_))));

        // a margin that lies about its distance to the boundary is still caught
        let liar = |p: &mut ParamStore, _: bool| {
            let x = p.get("theta").unwrap().data()[0];
            Ok(Probe { loss: x, routing: Routing { margin: 1.0, ..route(x) } })
        };
        let mut near = quadratic_store(&[0.5 + 1e-6]);
        assert!(matches!(fd_gradcheck(&mut near, liar, FD_STEP, 1e-4), Err(Error::Unstable(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    fn moe_setup(n: usize, k: usize, d: usize, seed: u64) -> (MoeParams, ParamStore, Tensor) {
        let p = MoeParams::new("m", MixingMode::Channel, n, k, 0.0).unwrap();
        let mut rng = Rng::new(seed);
        let mut store = build_store(&p.layout(d, 5), &mut rng).unwrap();
        gradcheck_point(&mut store, &mut rng);
        let items = Tensor::from_fn(&[6, d], |_| rng.normal()).unwrap();
        (p, store, items)
    }

    #[test]
    fn oracle_matches_sparse_forward() {
        for (n, k) in [(3, 3), (4, 1), (5, 2)] {
            let (p, store, items) = moe_setup(n, k, 7, n as u64);
            let (y, _) = moe::moe_forward(&items, &store, &p, &mut Rng::new(0), false).unwrap();
            let oracle = dense_moe_oracle(&items, &store, &p, (k < n).then_some(k)).unwrap();
            let scale = oracle.data().iter().fold(1e-300f64, |a, v| a.max(v.abs()));
            assert!(y.max_abs_diff(&oracle) / scale <= 1e-10, "n={n} k={k}");
        }
    }

    #[test]
    fn single_expert_oracle_is_the_expert() {
        let (p, store, items) = moe_setup(1, 1, 4, 9);
        let oracle = dense_moe_oracle(&items, &store, &p, None).unwrap();
        let mut g = Graph::new();
        let x = g.constant(items);
        let e = crate::nn::mlp_forward(&mut g, &store, &p.experts[0], x).unwrap();
        assert!(oracle.max_abs_diff(g.value(e)) < 1e-12);
    }

    #[test]
    fn mc_load_degenerate_and_symmetric() {
        let one = GatingParams::new("g", 1, 1).unwrap();
        let clean = Tensor::new(&[2, 1], vec![0.3, -1.0]).unwrap();
        let p = mc_load_oracle(&clean, None, &one, 1000, &mut Rng::new(0)).unwrap();
        assert_eq!(p.data(), [1.0, 1.0]);

        let two = GatingParams::new("g", 2, 1).unwrap();
        let trials = 100_000;
        let clean = Tensor::new(&[1, 2], vec![0.2, 0.2]).unwrap();
        let p = mc_load_oracle(&clean, None, &two, trials, &mut Rng::new(1)).unwrap();
        let bound = 3.0 * (0.25 / trials as f64).sqrt();
        for &v in p.data() {
            assert!((v - 0.5).abs() <= bound, "{v}");
        }
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_load_tracks_the_smooth_estimate() {
        let gating = GatingParams::new("g", 3, 2).unwrap();
        let clean = Tensor::new(&[1, 3], vec![0.1, -0.2, 0.4]).unwrap();
        let noisy = Tensor::new(&[1, 3], vec![0.3, -0.5, 0.45]).unwrap();
        let mc = mc_load_oracle(&clean, Some(&noisy), &gating, 200_000, &mut Rng::new(2)).unwrap();
        let mut g = Graph::new();
        let c = g.constant(clean);
        let nz = g.constant(noisy);
        let lp = g.load_probs(c, nz, 2, gating.noise_scale()).unwrap();
        assert!(mc.max_abs_diff(g.value(lp)) < 5e-3);
    }

    #[test]
    fn tiny_dense_model_passes() {
        let cfg = ModelConfig::preset("tiny_dense").unwrap();
        let report = model_gradcheck(&cfg, 1, 3, 0.01, FD_STEP, DENSE_TOL).unwrap();
        assert!(report.passed(), "{} at {}", report.max_rel, report.worst);
        assert!(report.margin.is_infinite());
    }
}
