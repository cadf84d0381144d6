//! Attention, feed-forward and residual blocks shared by the encoders,
//! aligner experts, capacity-restoring cross block and modality memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.glorot(&format!("{name}.weight"), fan_in, fan_out))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.affine(ctx.p(self.weight), ctx.p(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Widths for building blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub width: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Model(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            width,
            query: Linear::init(store, init, &format!("{name}.q"), width, width)?,
            key: Linear::init(store, init, &format!("{name}.k"), width, width)?,
            value: Linear::init(store, init, &format!("{name}.v"), width, width)?,
            output: Linear::init(store, init, &format!("{name}.o"), width, width)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub inner: usize,
    pub activation: Activation,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, width: usize, inner: usize, activation: Activation) -> Result<Self> {
        Ok(Self {
            inner,
            activation,
            up: Linear::init(store, init, &format!("{name}.up"), width, inner)?,
            down: Linear::init(store, init, &format!("{name}.down"), inner, width)?,
        })
    }
}

/// Per-feature scale and shift of a normalization layer.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[1, width], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, width]))?,
        })
    }
}

/// One attention sublayer and one feed-forward sublayer, each pre-normalized with a residual.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norm_attention: NormParams,
    pub norm_ffn: NormParams,
}

impl BlockParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, shape: BlockShape) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(store, init, &format!("{name}.attn"), shape.width, shape.heads)?,
            ffn: FeedForwardParams::init(store, init, &format!("{name}.ffn"), shape.width, shape.ffn_inner, shape.activation)?,
            norm_attention: NormParams::init(store, &format!("{name}.norm1"), shape.width)?,
            norm_ffn: NormParams::init(store, &format!("{name}.norm2"), shape.width)?,
        })
    }

    /// Zeroes both residual branches so the block becomes the identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
        self.ffn.down.zero(store);
    }
}

/// Multi-head scaled dot-product attention of `query` rows over `source` rows.
///
/// `mask[i][j] == false` hides source row `j` from query row `i`.
pub fn attention<'t>(
    ctx: &Ctx<'t>,
    query: Var<'t>,
    source: Var<'t>,
    params: &AttentionParams,
    mask: Option<&[Vec<bool>]>,
) -> Result<Var<'t>> {
    let (qs, ks) = (query.shape(), source.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != params.width || ks[1] != params.width {
        return Err(Error::Dimension { op: "attention", lhs: qs, rhs: ks });
    }
    let mask = match mask {
        Some(m) => {
            if m.len() != qs[0] || m.iter().any(|row| row.len() != ks[0]) {
                return Err(Error::Dimension { op: "attention mask", lhs: vec![qs[0], ks[0]], rhs: vec![m.len()] });
            }
            let data = m.iter().flatten().map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY }).collect();
            Some(ctx.constant(Tensor::new(vec![qs[0], ks[0]], data)?))
        }
        None => None,
    };
    let q = params.query.forward(ctx, query)?;
    let k = params.key.forward(ctx, source)?;
    let v = params.value.forward(ctx, source)?;
    let head_width = params.width / params.heads;
    let scale = 1.0 / (head_width as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let start = h * head_width;
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (q.slice(1, start, head_width)?, k.slice(1, start, head_width)?, v.slice(1, start, head_width)?)
        };
        let mut scores = qh.matmul(kh.transpose()?)?.scale(scale)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        heads.push(scores.softmax(1)?.matmul(vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { ctx.tape().concat(&heads, 1)? };
    params.output.forward(ctx, merged)
}

pub fn feed_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, params: &FeedForwardParams) -> Result<Var<'t>> {
    let hidden = params.activation.apply(params.up.forward(ctx, x)?)?;
    params.down.forward(ctx, hidden)
}

/// Normalizes each row over the feature axis, then applies per-feature scale and shift.
pub fn layer_norm<'t>(ctx: &Ctx<'t>, x: Var<'t>, params: &NormParams) -> Result<Var<'t>> {
    let centered = x.sub(x.mean(1)?)?;
    let var = centered.mul(centered)?.mean(1)?;
    let normed = centered.div(var.add_scalar(NORM_EPS)?.sqrt()?)?;
    normed.mul(ctx.p(params.scale))?.add(ctx.p(params.shift))
}

/// `x + SelfAttn(norm(x))`, then `+ FFN(norm(·))`.
pub fn encoder_block<'t>(ctx: &Ctx<'t>, x: Var<'t>, params: &BlockParams) -> Result<Var<'t>> {
    let normed = layer_norm(ctx, x, &params.norm_attention)?;
    let x = x.add(attention(ctx, normed, normed, &params.attention, None)?)?;
    x.add(feed_forward(ctx, layer_norm(ctx, x, &params.norm_ffn)?, &params.ffn)?)
}

/// `target + CrossAttn(norm(target), source)`, then `+ FFN(norm(·))`.
pub fn cross_block<'t>(ctx: &Ctx<'t>, target: Var<'t>, source: Var<'t>, params: &BlockParams) -> Result<Var<'t>> {
    let normed = layer_norm(ctx, target, &params.norm_attention)?;
    let x = target.add(attention(ctx, normed, source, &params.attention, None)?)?;
    x.add(feed_forward(ctx, layer_norm(ctx, x, &params.norm_ffn)?, &params.ffn)?)
}
