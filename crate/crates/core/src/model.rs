//! Full Sparse-MLP and Mixer models: re-represent layers, sparse blocks,
//! the block stack, and analytic parameter counting.
//!
//! Parameter names are dotted paths (`embed.weight`, `blocks.3.moe_s.gate`,
//! `head.bias`, ...). [`Architecture`] derives them from a [`ModelConfig`]
//! without allocating any tensors, so large presets can be inspected and
//! counted cheaply.

use crate::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{self, MixingMode, MoeOutcome, MoeParams};
use crate::nn::{self, DenseBlockParams, LayerNormParams, LinearParams, MlpParams};
use crate::params::{build_store, ParamSpec, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `(S, C) -> (S1, C1)`
    In,
    /// `(S1, C1) -> (S, C)`
    Out,
}

/// One re-represent layer. Both directions hold two layer norms, a
/// projection along the patch axis and one along the channel axis; they
/// differ in the order these are applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RescaleParams {
    pub direction: Direction,
    pub norm_a: LayerNormParams,
    pub proj_tokens: LinearParams,
    pub norm_b: LayerNormParams,
    pub proj_channels: LinearParams,
    pub patches: usize,
    pub hidden: usize,
    pub new_patches: usize,
    pub new_hidden: usize,
}

impl RescaleParams {
    pub fn new(prefix: &str, direction: Direction, patches: usize, hidden: usize, new_patches: usize, new_hidden: usize) -> Self {
        Self {
            direction,
            norm_a: LayerNormParams::new(&format!("{prefix}.norm_a")),
            proj_tokens: LinearParams::new(&format!("{prefix}.tokens")),
            norm_b: LayerNormParams::new(&format!("{prefix}.norm_b")),
            proj_channels: LinearParams::new(&format!("{prefix}.channels")),
            patches,
            hidden,
            new_patches,
            new_hidden,
        }
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let (s, c, s1, c1) = (self.patches, self.hidden, self.new_patches, self.new_hidden);
        let mut v = Vec::new();
        match self.direction {
            Direction::In => {
                v.extend(self.norm_a.layout(c));
                v.extend(self.proj_tokens.layout(s, s1));
                v.extend(self.norm_b.layout(c));
                v.extend(self.proj_channels.layout(c, c1));
            }
            Direction::Out => {
                v.extend(self.norm_a.layout(c1));
                v.extend(self.proj_channels.layout(c1, c));
                v.extend(self.norm_b.layout(c));
                v.extend(self.proj_tokens.layout(s1, s));
            }
        }
        v
    }
}

fn expect_dims(g: &Graph, x: Var, s: usize, c: usize, what: &str) -> Result<()> {
    let (_, xs, xc) = nn::expect_rank3(g.value(x), what)?;
    if (xs, xc) != (s, c) {
        return Err(Error::shape(format!("{what}: expected [B,{s},{c}], got {:?}", g.value(x).shape())));
    }
    Ok(())
}

/// `[B, S, C] -> [B, S1, C1]`: norm, patch projection with gelu, norm,
/// channel projection with gelu.
pub fn re_represent_1(g: &mut Graph, store: &ParamStore, p: &RescaleParams, x: Var) -> Result<Var> {
    if p.direction != Direction::In {
        return Err(Error::config("re_represent_1 needs an inbound rescale layer"));
    }
    expect_dims(g, x, p.patches, p.hidden, "re_represent_1 input")?;
    let x = nn::layer_norm(g, store, &p.norm_a, x)?;
    let x = g.transpose(x)?;
    let x = nn::linear(g, store, &p.proj_tokens, x)?;
    let x = g.gelu(x)?;
    let x = g.transpose(x)?;
    let x = nn::layer_norm(g, store, &p.norm_b, x)?;
    let x = nn::linear(g, store, &p.proj_channels, x)?;
    g.gelu(x)
}

/// `[B, S1, C1] -> [B, S, C]`: the channel projection comes first here.
pub fn re_represent_2(g: &mut Graph, store: &ParamStore, p: &RescaleParams, x: Var) -> Result<Var> {
    if p.direction != Direction::Out {
        return Err(Error::config("re_represent_2 needs an outbound rescale layer"));
    }
    expect_dims(g, x, p.new_patches, p.new_hidden, "re_represent_2 input")?;
    let x = nn::layer_norm(g, store, &p.norm_a, x)?;
    let x = nn::linear(g, store, &p.proj_channels, x)?;
    let x = g.gelu(x)?;
    let x = nn::layer_norm(g, store, &p.norm_b, x)?;
    let x = g.transpose(x)?;
    let x = nn::linear(g, store, &p.proj_tokens, x)?;
    let x = g.gelu(x)?;
    g.transpose(x)
}

/// Second stage of a sparse block: routed experts, or a plain MLP when the
/// config has no channel experts.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelStage {
    Moe(MoeParams),
    Dense(MlpParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlockParams {
    pub rescale_in: Option<RescaleParams>,
    pub norm1: LayerNormParams,
    pub moe_s: MoeParams,
    pub norm2: LayerNormParams,
    pub channel: ChannelStage,
    pub rescale_out: Option<RescaleParams>,
    /// `S'` and `C'`.
    pub patches: usize,
    pub hidden: usize,
    pub moe_s_dim: usize,
    pub moe_c_dim: usize,
}

impl SparseBlockParams {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (s, c, s1, c1) = (cfg.patches(), cfg.hidden, cfg.sparse_patches, cfg.sparse_hidden);
        let (rescale_in, rescale_out) = if cfg.rescale {
            (
                Some(RescaleParams::new(&format!("{prefix}.rescale_in"), Direction::In, s, c, s1, c1)),
                Some(RescaleParams::new(&format!("{prefix}.rescale_out"), Direction::Out, s, c, s1, c1)),
            )
        } else {
            (None, None)
        };
        let channel = if cfg.experts_c == 0 {
            ChannelStage::Dense(MlpParams::new(&format!("{prefix}.channel_mlp")))
        } else {
            ChannelStage::Moe(MoeParams::new(
                &format!("{prefix}.moe_c"),
                MixingMode::Channel,
                cfg.experts_c,
                cfg.top_k_c,
                0.0,
            )?)
        };
        Ok(Self {
            rescale_in,
            norm1: LayerNormParams::new(&format!("{prefix}.norm1")),
            moe_s: MoeParams::new(
                &format!("{prefix}.moe_s"),
                MixingMode::Token,
                cfg.experts_s,
                cfg.top_k_s,
                cfg.elimination_fraction,
            )?,
            norm2: LayerNormParams::new(&format!("{prefix}.norm2")),
            channel,
            rescale_out,
            patches: s1,
            hidden: c1,
            moe_s_dim: cfg.moe_s_dim,
            moe_c_dim: cfg.moe_c_dim,
        })
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        if let Some(r) = &self.rescale_in {
            v.extend(r.layout());
        }
        v.extend(self.norm1.layout(self.hidden));
        v.extend(self.moe_s.layout(self.patches, self.moe_s_dim));
        v.extend(self.norm2.layout(self.hidden));
        match &self.channel {
            ChannelStage::Moe(p) => v.extend(p.layout(self.hidden, self.moe_c_dim)),
            ChannelStage::Dense(p) => v.extend(p.layout(self.hidden, self.moe_c_dim)),
        }
        if let Some(r) = &self.rescale_out {
            v.extend(r.layout());
        }
        v
    }
}

/// Routing record of one MoE stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    /// Parameter prefix of the stage, e.g. `blocks.10.moe_s`.
    pub name: String,
    pub block: usize,
    pub mode: MixingMode,
    pub experts: usize,
    pub k: usize,
    pub outcome: MoeOutcome,
}

/// Graph outputs of one sparse block.
#[derive(Debug, Clone)]
pub struct SparseBlockOutput {
    pub output: Var,
    /// One weighted balance loss per MoE stage present, singletons included.
    pub aux_losses: Vec<Var>,
    pub traces: Vec<StageTrace>,
}

fn run_moe(
    g: &mut Graph,
    store: &ParamStore,
    p: &MoeParams,
    items: Var,
    rng: Option<&mut Rng>,
    aux_weight: f64,
    out: &mut SparseBlockOutput,
) -> Result<Var> {
    let m = g.value(items).shape()[0];
    let noise = match rng {
        Some(r) => Some(moe::sample_noise(r, m, &p.gating)?),
        None => None,
    };
    let (outcome, vars) = moe::record_moe(g, store, p, items, noise.as_ref())?;
    out.aux_losses
        .push(moe::aux_loss_var(g, vars.gate.importance, vars.gate.load, aux_weight)?);
    let name = p.gating.weight.trim_end_matches(".gate").to_string();
    out.traces.push(StageTrace {
        name,
        block: 0,
        mode: p.mode,
        experts: p.gating.experts,
        k: p.gating.k,
        outcome,
    });
    Ok(vars.output)
}

/// Sparse block on `x[B, S, C]`:
/// `x = Rescale1(x)`, `y1 = x + t(MoE_S(t(norm(x))))`,
/// `y = y1 + MoE_C(norm(y1))`, `y = Rescale2(y)`.
///
/// The token-mixing MoE routes the `B*C'` channel columns (length `S'`),
/// the channel-mixing MoE the `B*S'` patch rows (length `C'`). Gate noise
/// is drawn from `rng` when it is given (training mode), token stage first.
pub fn sparse_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &SparseBlockParams,
    x: Var,
    mut rng: Option<&mut Rng>,
    aux_weight: f64,
    block: usize,
) -> Result<SparseBlockOutput> {
    let mut out = SparseBlockOutput {
        output: x,
        aux_losses: Vec::new(),
        traces: Vec::new(),
    };
    let x = match &p.rescale_in {
        Some(r) => re_represent_1(g, store, r, x)?,
        None => x,
    };
    expect_dims(g, x, p.patches, p.hidden, "sparse block input")?;
    let (b, s1, c1) = (g.value(x).shape()[0], p.patches, p.hidden);

    let n1 = nn::layer_norm(g, store, &p.norm1, x)?;
    let cols = g.transpose(n1)?;
    let items = g.reshape(cols, &[b * c1, s1])?;
    let mixed = run_moe(g, store, &p.moe_s, items, rng.as_deref_mut(), aux_weight, &mut out)?;
    let mixed = g.reshape(mixed, &[b, c1, s1])?;
    let mixed = g.transpose(mixed)?;
    let y1 = g.add(x, mixed)?;

    let n2 = nn::layer_norm(g, store, &p.norm2, y1)?;
    let mixed = match &p.channel {
        ChannelStage::Moe(mp) => {
            let items = g.reshape(n2, &[b * s1, c1])?;
            let m = run_moe(g, store, mp, items, rng, aux_weight, &mut out)?;
            g.reshape(m, &[b, s1, c1])?
        }
        ChannelStage::Dense(mlp) => nn::mlp_forward(g, store, mlp, n2)?,
    };
    let y = g.add(y1, mixed)?;

    for t in &mut out.traces {
        t.block = block;
    }
    out.output = match &p.rescale_out {
        Some(r) => re_represent_2(g, store, r, y)?,
        None => y,
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(Box<DenseBlockParams>),
    Sparse(Box<SparseBlockParams>),
}

/// Parameter names and shapes implied by a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub embed: LinearParams,
    pub blocks: Vec<Block>,
    pub head: LinearParams,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .block_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let prefix = format!("blocks.{i}");
                Ok(match kind {
                    BlockKind::Dense => Block::Dense(Box::new(DenseBlockParams::new(&prefix))),
                    BlockKind::Sparse => Block::Sparse(Box::new(SparseBlockParams::new(&prefix, cfg)?)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            embed: LinearParams::new("embed"),
            blocks,
            head: LinearParams::new("head"),
        })
    }

    /// Every parameter tensor, in canonical order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let mut v = self.embed.layout(cfg.patch_features(), cfg.hidden);
        for block in &self.blocks {
            match block {
                Block::Dense(p) => v.extend(p.layout(cfg.patches(), cfg.hidden, cfg.token_mlp_dim, cfg.channel_mlp_dim)),
                Block::Sparse(p) => v.extend(p.layout()),
            }
        }
        v.extend(self.head.layout(cfg.hidden, cfg.classes));
        v
    }

    /// MoE stages with at least two experts, the ones whose balance losses
    /// can be nonzero.
    pub fn balanced_stages(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Dense(_) => 0,
                Block::Sparse(p) => {
                    let c = match &p.channel {
                        ChannelStage::Moe(m) => usize::from(m.gating.experts >= 2),
                        ChannelStage::Dense(_) => 0,
                    };
                    usize::from(p.moe_s.gating.experts >= 2) + c
                }
            })
            .sum()
    }

    pub fn moe_stages(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Dense(_) => 0,
                Block::Sparse(p) => 1 + usize::from(matches!(p.channel, ChannelStage::Moe(_))),
            })
            .sum()
    }
}

pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(Architecture::new(cfg)?.layout())
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

/// Graph outputs of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, classes]`
    pub logits: Var,
    /// Scalar sum of the weighted balance losses; a constant 0 without MoE.
    pub aux_total: Var,
    /// One term per MoE stage with at least two experts.
    pub aux_terms: Vec<Var>,
    pub routing: Vec<StageTrace>,
}

pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    let arch = Architecture::new(cfg)?;
    let params = build_store(&arch.layout(), rng)?;
    Ok(Model { arch, params })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Records the forward pass on `images[B, H, W, Ch]`. Passing `rng`
    /// selects training mode: gate noise is drawn from it.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, rng: Option<&mut Rng>, aux_weight: f64) -> Result<ForwardOutput> {
        self.arch.forward(g, &self.params, images, rng, aux_weight)
    }
}

impl Architecture {
    /// [`Model::forward`] with parameters taken from `store`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &Tensor,
        mut rng: Option<&mut Rng>,
        aux_weight: f64,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if images.rank() != 4 || images.shape()[1..] != [cfg.image_height, cfg.image_width, cfg.channels] {
            return Err(Error::shape(format!(
                "images must be [B,{},{},{}], got {:?}",
                cfg.image_height,
                cfg.image_width,
                cfg.channels,
                images.shape()
            )));
        }
        let mut x = nn::patch_embed(g, store, &self.embed, images, cfg.patch)?;
        let mut aux_terms = Vec::new();
        let mut routing = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = match block {
                Block::Dense(p) => nn::dense_block_forward(g, store, p, x)?,
                Block::Sparse(p) => {
                    let out = sparse_block_forward(g, store, p, x, rng.as_deref_mut(), aux_weight, i)?;
                    for (term, trace) in out.aux_losses.into_iter().zip(&out.traces) {
                        if trace.experts >= 2 {
                            aux_terms.push(term);
                        }
                    }
                    routing.extend(out.traces);
                    out.output
                }
            };
        }
        let logits = nn::classifier_head(g, store, &self.head, x)?;
        let mut aux_total = g.constant(Tensor::scalar(0.0));
        for &t in &aux_terms {
            aux_total = g.add(aux_total, t)?;
        }
        Ok(ForwardOutput {
            logits,
            aux_total,
            aux_terms,
            routing,
        })
    }
}

/// Tensor-level forward pass: `(logits, aux_total)`.
pub fn model_forward(model: &Model, images: &Tensor, rng: &mut Rng, training: bool) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images, training.then_some(rng), crate::moe::AUX_WEIGHT)?;
    Ok((g.value(out.logits).clone(), g.value(out.aux_total).item()?))
}

fn mlp_count(dim: usize, hidden: usize) -> usize {
    2 * dim * hidden + dim + hidden
}

/// Trainable scalars implied by `cfg`, from closed-form per-block counts.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (s, c) = (cfg.patches(), cfg.hidden);
    let embed = cfg.patch_features() * c + c;
    let head = c * cfg.classes + cfg.classes;
    let dense = 4 * c + mlp_count(s, cfg.token_mlp_dim) + mlp_count(c, cfg.channel_mlp_dim);

    let (s1, c1) = (cfg.sparse_patches, cfg.sparse_hidden);
    let rescale = if cfg.rescale {
        let inbound = 2 * c + (s * s1 + s1) + 2 * c + (c * c1 + c1);
        let outbound = 2 * c1 + (c1 * c + c) + 2 * c + (s1 * s + s);
        inbound + outbound
    } else {
        0
    };
    let token_moe = s1 * cfg.experts_s + cfg.experts_s * mlp_count(s1, cfg.moe_s_dim);
    let channel_moe = if cfg.experts_c == 0 {
        mlp_count(c1, cfg.moe_c_dim)
    } else {
        c1 * cfg.experts_c + cfg.experts_c * mlp_count(c1, cfg.moe_c_dim)
    };
    let sparse = rescale + 4 * c1 + token_moe + channel_moe;

    Ok(embed + cfg.dense_blocks * dense + cfg.sparse_blocks * sparse + head)
}
