//! Dense Mixer building blocks: GELU MLPs, layer norm, the token/channel
//! mixing block, patch embedding and the classifier head.
//!
//! Parameters live in a [`ParamStore`]; the structs here only carry their
//! names, and `layout` lists the tensors a block needs.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: String,
    pub beta: String,
}

impl LayerNormParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        }
    }

    pub fn layout(&self, width: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(&self.gamma, &[width], Init::Ones),
            ParamSpec::new(&self.beta, &[width], Init::Zeros),
        ]
    }
}

/// Affine map `x W + b` along the last axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: String,
    pub bias: String,
}

impl LinearParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        }
    }

    pub fn layout(&self, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(&self.weight, &[d_in, d_out], Init::TruncatedNormal(INIT_STD)),
            ParamSpec::new(&self.bias, &[d_out], Init::Zeros),
        ]
    }
}

/// Two-layer GELU MLP mapping `R^D -> R^D` through a hidden width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpParams {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl MlpParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        }
    }

    pub fn layout(&self, dim: usize, hidden: usize) -> Vec<ParamSpec> {
        let w = Init::TruncatedNormal(INIT_STD);
        vec![
            ParamSpec::new(&self.w1, &[dim, hidden], w),
            ParamSpec::new(&self.b1, &[hidden], Init::Zeros),
            ParamSpec::new(&self.w2, &[hidden, dim], w),
            ParamSpec::new(&self.b2, &[dim], Init::Zeros),
        ]
    }

    /// `(input width, hidden width)` as stored.
    pub fn dims(&self, store: &ParamStore) -> Result<(usize, usize)> {
        let w1 = store.require(&self.w1)?;
        Ok((w1.shape()[0], w1.shape()[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseBlockParams {
    pub norm1: LayerNormParams,
    pub token_mlp: MlpParams,
    pub norm2: LayerNormParams,
    pub channel_mlp: MlpParams,
}

impl DenseBlockParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            norm1: LayerNormParams::new(&format!("{prefix}.norm1")),
            token_mlp: MlpParams::new(&format!("{prefix}.token_mlp")),
            norm2: LayerNormParams::new(&format!("{prefix}.norm2")),
            channel_mlp: MlpParams::new(&format!("{prefix}.channel_mlp")),
        }
    }

    pub fn layout(&self, patches: usize, hidden: usize, token_dim: usize, channel_dim: usize) -> Vec<ParamSpec> {
        let mut v = self.norm1.layout(hidden);
        v.extend(self.token_mlp.layout(patches, token_dim));
        v.extend(self.norm2.layout(hidden));
        v.extend(self.channel_mlp.layout(hidden, channel_dim));
        v
    }
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, p: &LayerNormParams, x: Var) -> Result<Var> {
    let gamma = g.param(store, &p.gamma)?;
    let beta = g.param(store, &p.beta)?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn linear(g: &mut Graph, store: &ParamStore, p: &LinearParams, x: Var) -> Result<Var> {
    let w = g.param(store, &p.weight)?;
    let b = g.param(store, &p.bias)?;
    g.linear(x, w, Some(b))
}

/// `W2 gelu(W1 x + b1) + b2` along the last axis.
pub fn mlp_forward(g: &mut Graph, store: &ParamStore, p: &MlpParams, x: Var) -> Result<Var> {
    let w1 = g.param(store, &p.w1)?;
    let b1 = g.param(store, &p.b1)?;
    let w2 = g.param(store, &p.w2)?;
    let b2 = g.param(store, &p.b2)?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h)?;
    g.linear(h, w2, Some(b2))
}

/// Applies `f` to the columns of `x[B, S, C]` (items of length `S`) and
/// transposes back.
pub fn along_tokens(
    g: &mut Graph,
    x: Var,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let t = g.transpose(x)?;
    let y = f(g, t)?;
    g.transpose(y)
}

/// Mixer layer on `x[B, S, C]`:
/// `y1 = x + t(MLP_S(t(norm(x))))`, `y = y1 + MLP_C(norm(y1))`.
pub fn dense_block_forward(g: &mut Graph, store: &ParamStore, p: &DenseBlockParams, x: Var) -> Result<Var> {
    expect_rank3(g.value(x), "dense block input")?;
    let n1 = layer_norm(g, store, &p.norm1, x)?;
    let mixed = along_tokens(g, n1, |g, t| mlp_forward(g, store, &p.token_mlp, t))?;
    let y1 = g.add(x, mixed)?;
    let n2 = layer_norm(g, store, &p.norm2, y1)?;
    let mixed = mlp_forward(g, store, &p.channel_mlp, n2)?;
    g.add(y1, mixed)
}

pub(crate) fn expect_rank3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(format!("{what} must be [B,S,C], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Splits `[B, H, W, Ch]` images into non-overlapping `P x P` patches,
/// each flattened in (row, column, channel) order: `[B, HW/P^2, P*P*Ch]`.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::shape(format!("images must be [B,H,W,Ch], got {:?}", images.shape())));
    }
    let (b, h, w, ch) = (images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("image {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let feat = patch * patch * ch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((bi * h + y) * w + px * patch) * ch;
                    out.extend_from_slice(&src[start..start + patch * ch]);
                }
            }
        }
    }
    Tensor::new(&[b, ph * pw, feat], out)
}

/// Per-patch linear embedding `[B, H, W, Ch] -> [B, S, C]`.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &LinearParams,
    images: &Tensor,
    patch: usize,
) -> Result<Var> {
    let patches = g.constant(patchify(images, patch)?);
    linear(g, store, p, patches)
}

/// Global average over patches followed by an affine map to class logits.
pub fn classifier_head(g: &mut Graph, store: &ParamStore, p: &LinearParams, x: Var) -> Result<Var> {
    let pooled = g.mean_tokens(x)?;
    linear(g, store, p, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::build_store;
    use crate::rng::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(shape, |_| r.normal()).unwrap()
    }

    fn zero_all(store: &mut ParamStore) {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = build_store(&LayerNormParams::new("ln").layout(2), &mut Rng::new(0)).unwrap();
        let p = LayerNormParams::new("ln");
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![4.0, 4.0, 1.0, 3.0]).unwrap());
        let y = layer_norm(&mut g, &store, &p, x).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-5 && (d[3] - 1.0).abs() < 1e-5);

        // Width mismatch.
        let x = g.constant(Tensor::zeros(&[1, 1, 3]).unwrap());
        assert!(matches!(layer_norm(&mut g, &store, &p, x), Err(Error::Shape(_))));

        // Random slices: zero mean, unit variance up to eps.
        store = build_store(&LayerNormParams::new("ln").layout(16), &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let mut xs = random(&[2, 5, 16], 3);
        xs.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let x = g.constant(xs);
        let y = layer_norm(&mut g, &store, &p, x).unwrap();
        for row in g.value(y).data().chunks(16) {
            let (m, s) = crate::tensor::moments_population(row);
            assert!(m.abs() < 1e-10);
            assert!((s * s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_with_zero_weights_outputs_bias() {
        let p = MlpParams::new("mlp");
        let mut store = build_store(&p.layout(3, 5), &mut Rng::new(1)).unwrap();
        zero_all(&mut store);
        store.get_mut("mlp.b2").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 3], 2));
        let y = mlp_forward(&mut g, &store, &p, x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn unit_mlp_reduces_to_gelu() {
        let p = MlpParams::new("mlp");
        let mut store = build_store(&p.layout(1, 1), &mut Rng::new(1)).unwrap();
        store.get_mut("mlp.w1").unwrap().data_mut()[0] = 1.0;
        store.get_mut("mlp.w2").unwrap().data_mut()[0] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 1], vec![-1.0, 0.0, 1.0]).unwrap());
        let y = mlp_forward(&mut g, &store, &p, x).unwrap();
        let want: Vec<f64> = [-1.0, 0.0, 1.0].iter().map(|&v| crate::graph::gelu(v)).collect();
        assert_eq!(g.value(y).data(), &want[..]);
    }

    #[test]
    fn mlp_dim_mismatch_is_shape_error() {
        let p = MlpParams::new("mlp");
        let store = build_store(&p.layout(3, 5), &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(matches!(mlp_forward(&mut g, &store, &p, x), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_dense_block_is_identity() {
        let p = DenseBlockParams::new("b");
        let mut store = build_store(&p.layout(4, 6, 3, 5), &mut Rng::new(1)).unwrap();
        zero_all(&mut store);
        let x = random(&[2, 4, 6], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = dense_block_forward(&mut g, &store, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn token_mixing_matches_explicit_transpose_round_trip() {
        let p = MlpParams::new("t");
        let store = build_store(&p.layout(4, 7), &mut Rng::new(4)).unwrap();
        let x = random(&[2, 4, 3], 5);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let direct = along_tokens(&mut g, xv, |g, t| mlp_forward(g, &store, &p, t)).unwrap();

        let xt = crate::tensor::transpose_last_two(&x).unwrap();
        let mut g2 = Graph::new();
        let tv = g2.constant(xt);
        let y = mlp_forward(&mut g2, &store, &p, tv).unwrap();
        let back = crate::tensor::transpose_last_two(g2.value(y)).unwrap();
        assert_eq!(g.value(direct), &back);
    }

    #[test]
    fn dense_block_keeps_shape_at_base_scale() {
        let p = DenseBlockParams::new("b");
        let store = build_store(&p.layout(196, 768, 384, 3072), &mut Rng::new(6)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 196, 768], 7));
        let y = dense_block_forward(&mut g, &store, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 196, 768]);
    }

    #[test]
    fn patch_counts_and_layout() {
        let img = Tensor::zeros(&[1, 224, 224, 3]).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[1, 196, 768]);
        let img = Tensor::zeros(&[1, 6, 6, 1]).unwrap();
        assert_eq!(patchify(&img, 6).unwrap().shape(), &[1, 1, 36]);
        assert!(matches!(patchify(&Tensor::zeros(&[1, 6, 5, 1]).unwrap(), 2), Err(Error::Shape(_))));

        // 4x4 single-channel image, 2x2 patches, identity projection.
        let img = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64).unwrap();
        let p = LinearParams::new("embed");
        let mut store = build_store(&p.layout(4, 4), &mut Rng::new(0)).unwrap();
        let w = store.get_mut("embed.weight").unwrap().data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let mut g = Graph::new();
        let y = patch_embed(&mut g, &store, &p, &img, 2).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[
                0., 1., 4., 5., //
                2., 3., 6., 7., //
                8., 9., 12., 13., //
                10., 11., 14., 15.
            ]
        );
    }

    #[test]
    fn head_pools_then_projects() {
        let p = LinearParams::new("head");
        let mut store = build_store(&p.layout(3, 2), &mut Rng::new(0)).unwrap();
        store.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("head.bias").unwrap().data_mut().copy_from_slice(&[0.25, -0.75]);
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 5, 3], 1));
        let y = classifier_head(&mut g, &store, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -0.75, 0.25, -0.75]);

        let x = random(&[1, 5, 3], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pooled = g.mean_tokens(xv).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|s| x.at(&[0, s, c])).sum::<f64>() / 5.0;
            assert!((g.value(pooled).data()[c] - mean).abs() < 1e-12);
        }
    }
}
