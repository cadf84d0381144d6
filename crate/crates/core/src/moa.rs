//! Mixture-of-Aligners.
//!
//! For every ordered modality pair `target ← source` a bank of aligner experts
//! (one cross-attention layer plus a small feed-forward each) is evaluated on
//! the whole target sequence. A router looks at each target utterance together
//! with the mean-pooled source sequence and produces expert logits; all but the
//! top `K` are masked to `-inf` before the softmax, so unselected experts get
//! exactly zero weight and zero gradient. The per-row mixture is refined by a
//! cross block against the source, and for each target the aligned views from
//! every source are concatenated and self-attended into a modality memory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, cross_block, encoder_block, feed_forward, AttentionParams, BlockParams, BlockShape, FeedForwardParams, Linear};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::Modality;

/// Ordered modality pair `target ← source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub target: Modality,
    pub source: Modality,
}

impl PairKey {
    pub fn label(self) -> String {
        format!("{}<-{}", self.target, self.source)
    }

    /// All ordered pairs with distinct modalities, target-major in canonical order.
    pub fn all(modalities: &[Modality]) -> Vec<PairKey> {
        modalities
            .iter()
            .flat_map(|&target| modalities.iter().filter(move |&&s| s != target).map(move |&source| PairKey { target, source }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    /// Retained experts in ascending index order.
    pub kept: Vec<usize>,
}

/// Indices of the `min(k, E)` largest logits; ties keep the lower index.
pub fn kept_set(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    order.sort_unstable();
    order
}

pub fn topk_mask_softmax(logits: &[f64], k: usize) -> Result<RoutingDecision> {
    if logits.is_empty() || k == 0 {
        return Err(Error::Routing(format!("need at least one expert and K ≥ 1 (E={}, K={k})", logits.len())));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Routing("non-finite router logits".into()));
    }
    let kept = kept_set(logits, k);
    let mut masked = vec![f64::NEG_INFINITY; logits.len()];
    for &e in &kept {
        masked[e] = logits[e];
    }
    let weights = crate::tensor::softmax_slice(&masked)?;
    Ok(RoutingDecision { logits: logits.to_vec(), weights, kept })
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub attention: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct PairAligner {
    pub key: PairKey,
    pub experts: Vec<Expert>,
    /// `2h → E`
    pub router: Linear,
    pub restore: BlockParams,
}

#[derive(Clone, Copy, Debug)]
pub struct MoaShape {
    pub block: BlockShape,
    pub experts: usize,
    pub top_k: usize,
}

#[derive(Clone, Debug)]
pub struct MoaParams {
    pub experts: usize,
    pub top_k: usize,
    pub modalities: Vec<Modality>,
    pub pairs: Vec<PairAligner>,
    /// One self-attention block of width `(|M|−1)·h` per target modality.
    pub memory: Vec<BlockParams>,
}

impl MoaParams {
    pub fn init(store: &mut ParamStore, init: &Init, shape: MoaShape, modalities: &[Modality]) -> Result<Self> {
        if shape.experts == 0 || shape.top_k == 0 {
            return Err(Error::Model("expert count and K must be positive".into()));
        }
        if modalities.len() < 2 {
            return Err(Error::Model("alignment needs at least two modalities".into()));
        }
        let h = shape.block.width;
        let mut pairs = Vec::new();
        for key in PairKey::all(modalities) {
            let name = format!("moa.{}{}", key.target, key.source);
            let experts = (0..shape.experts)
                .map(|e| {
                    Ok(Expert {
                        attention: AttentionParams::init(store, init, &format!("{name}.e{e}.attn"), h, shape.block.heads)?,
                        ffn: FeedForwardParams::init(store, init, &format!("{name}.e{e}.ffn"), h, shape.block.ffn_inner, shape.block.activation)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            pairs.push(PairAligner {
                key,
                experts,
                router: Linear::init(store, init, &format!("{name}.router"), 2 * h, shape.experts)?,
                restore: BlockParams::init(store, init, &format!("{name}.restore"), shape.block)?,
            });
        }
        let mem_shape = BlockShape { width: (modalities.len() - 1) * h, ffn_inner: (modalities.len() - 1) * shape.block.ffn_inner, ..shape.block };
        let memory = modalities
            .iter()
            .map(|m| BlockParams::init(store, init, &format!("moa.mem.{m}"), mem_shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { experts: shape.experts, top_k: shape.top_k, modalities: modalities.to_vec(), pairs, memory })
    }

    pub fn pair(&self, key: PairKey) -> Option<&PairAligner> {
        self.pairs.iter().find(|p| p.key == key)
    }
}

/// Expert `f(X_j, X_k)`: residual cross-attention followed by a residual feed-forward.
pub fn expert_forward<'t>(ctx: &Ctx<'t>, target: Var<'t>, source: Var<'t>, expert: &Expert) -> Result<Var<'t>> {
    let a = target.add(attention(ctx, target, source, &expert.attention, None)?)?;
    a.add(feed_forward(ctx, a, &expert.ffn)?)
}

/// Routing weights for every target row: returns `π` (`L×E`) and the per-row decisions.
pub fn route<'t>(ctx: &Ctx<'t>, target: Var<'t>, source: Var<'t>, router: &Linear, k: usize) -> Result<(Var<'t>, Vec<RoutingDecision>)> {
    let ts = target.shape();
    if source.shape()[0] == 0 {
        return Err(Error::Routing("empty source sequence".into()));
    }
    let pooled = source.mean(0)?.expand(&[ts[0], source.shape()[1]])?;
    let logits = router.forward(ctx, ctx.tape().concat(&[target, pooled], 1)?)?;
    let lv = logits.value();
    let e = lv.cols();
    let mut mask = Vec::with_capacity(lv.len());
    let mut decisions = Vec::with_capacity(ts[0]);
    for t in 0..ts[0] {
        let d = topk_mask_softmax(lv.row(t), k)?;
        let mut row = vec![f64::NEG_INFINITY; e];
        for &i in &d.kept {
            row[i] = 0.0;
        }
        mask.extend(row);
        decisions.push(d);
    }
    let pi = logits.add(ctx.constant(Tensor::new(vec![ts[0], e], mask)?))?.softmax(1)?;
    Ok((pi, decisions))
}

/// Routing decision for the single target utterance `t`.
pub fn route_utterance<'t>(ctx: &Ctx<'t>, target: Var<'t>, source: Var<'t>, t: usize, router: &Linear, k: usize) -> Result<RoutingDecision> {
    let len = target.shape()[0];
    if t >= len {
        return Err(Error::Routing(format!("utterance {t} out of range for length {len}")));
    }
    let row = target.slice(0, t, 1)?;
    let (_, mut d) = route(ctx, row, source, router, k)?;
    Ok(d.remove(0))
}

pub struct Alignment<'t> {
    /// `L×h`
    pub aligned: Var<'t>,
    /// `L×E`
    pub weights: Var<'t>,
    pub decisions: Vec<RoutingDecision>,
}

/// Densely evaluates all experts, mixes them row-wise by the routing weights,
/// and restores capacity with a cross block against the source.
pub fn align_pair<'t>(ctx: &Ctx<'t>, target: Var<'t>, source: Var<'t>, pair: &PairAligner, k: usize) -> Result<Alignment<'t>> {
    let (pi, decisions) = route(ctx, target, source, &pair.router, k)?;
    let mut mixture: Option<Var<'t>> = None;
    for (e, expert) in pair.experts.iter().enumerate() {
        let out = expert_forward(ctx, target, source, expert)?;
        let weighted = if pair.experts.len() == 1 { out } else { pi.slice(1, e, 1)?.mul(out)? };
        mixture = Some(match mixture {
            Some(acc) => acc.add(weighted)?,
            None => weighted,
        });
    }
    let mixture = mixture.ok_or_else(|| Error::Routing("pair has no experts".into()))?;
    let aligned = cross_block(ctx, mixture, source, &pair.restore)?;
    Ok(Alignment { aligned, weights: pi, decisions })
}

pub struct Memory<'t> {
    /// Per target in canonical order, each `L×(|M|−1)·h`.
    pub per_target: Vec<(Modality, Var<'t>)>,
    /// `L×|M|·(|M|−1)·h`
    pub combined: Var<'t>,
}

pub fn build_memory<'t>(ctx: &Ctx<'t>, aligned: &BTreeMap<PairKey, Var<'t>>, params: &MoaParams) -> Result<Memory<'t>> {
    let mut per_target = Vec::with_capacity(params.modalities.len());
    let mut len = None;
    for (target, block) in params.modalities.iter().zip(&params.memory) {
        let mut views = Vec::new();
        for &source in params.modalities.iter().filter(|&&s| s != *target) {
            let key = PairKey { target: *target, source };
            let v = *aligned.get(&key).ok_or_else(|| Error::Model(format!("missing aligned pair {}", key.label())))?;
            let l = v.shape()[0];
            if *len.get_or_insert(l) != l {
                return Err(Error::Dimension { op: "build_memory", lhs: vec![len.unwrap()], rhs: vec![l] });
            }
            views.push(v);
        }
        let joined = ctx.tape().concat(&views, 1)?;
        per_target.push((*target, encoder_block(ctx, joined, block)?));
    }
    let parts: Vec<Var<'t>> = per_target.iter().map(|(_, v)| *v).collect();
    let combined = ctx.tape().concat(&parts, 1)?;
    Ok(Memory { per_target, combined })
}

pub struct MoaOutput<'t> {
    pub alignments: BTreeMap<PairKey, Alignment<'t>>,
    pub memory: Memory<'t>,
}

impl<'t> MoaOutput<'t> {
    pub fn combined(&self) -> Var<'t> {
        self.memory.combined
    }
}

/// Full pathway over encoded modalities given in `params.modalities` order.
pub fn moa_forward<'t>(ctx: &Ctx<'t>, encoded: &[Var<'t>], params: &MoaParams) -> Result<MoaOutput<'t>> {
    if encoded.len() != params.modalities.len() {
        return Err(Error::Model(format!("expected {} encoded modalities, got {}", params.modalities.len(), encoded.len())));
    }
    let x = |m: Modality| encoded[params.modalities.iter().position(|&p| p == m).unwrap()];
    let mut alignments = BTreeMap::new();
    for pair in &params.pairs {
        let a = align_pair(ctx, x(pair.key.target), x(pair.key.source), pair, params.top_k)?;
        alignments.insert(pair.key, a);
    }
    let aligned = alignments.iter().map(|(k, a)| (*k, a.aligned)).collect();
    let memory = build_memory(ctx, &aligned, params)?;
    Ok(MoaOutput { alignments, memory })
}

/// `Σ_e u_e ln u_e + ln E` with `0 ln 0 = 0`.
pub fn load_balance_value(usage: &[f64]) -> f64 {
    let e = usage.len() as f64;
    usage.iter().map(|&u| if u > 0.0 { u * u.ln() } else { 0.0 }).sum::<f64>() + e.ln()
}

/// Load-balancing loss averaged over routers.
pub fn load_balance_loss(accs: &[&UsageAccumulator]) -> Result<f64> {
    if accs.is_empty() || accs.iter().any(|a| a.count == 0) {
        return Err(Error::Routing("load balance needs at least one routed utterance per router".into()));
    }
    Ok(accs.iter().map(|a| load_balance_value(&a.usage())).sum::<f64>() / accs.len() as f64)
}

/// Differentiable load-balancing term; each entry of `weights` is one router's `π` rows.
pub fn load_balance_term<'t>(weights: &[Var<'t>]) -> Result<Var<'t>> {
    if weights.is_empty() {
        return Err(Error::Routing("no routers".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for pi in weights {
        let e = pi.shape()[1] as f64;
        let usage = pi.mean(0)?;
        let term = usage.xlogx()?.sum_all()?.add_scalar(e.ln())?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / weights.len() as f64)
}

/// Running per-expert usage of one router.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageAccumulator {
    pub sums: Vec<f64>,
    /// How often each expert was in the kept set.
    pub kept_counts: Vec<u64>,
    pub count: u64,
}

impl UsageAccumulator {
    pub fn new(experts: usize) -> Self {
        Self { sums: vec![0.0; experts], kept_counts: vec![0; experts], count: 0 }
    }

    pub fn record(&mut self, d: &RoutingDecision) {
        for (s, w) in self.sums.iter_mut().zip(&d.weights) {
            *s += w;
        }
        for &k in &d.kept {
            self.kept_counts[k] += 1;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &UsageAccumulator) {
        if self.sums.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.kept_counts.iter_mut().zip(&other.kept_counts) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn usage(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    /// `max_e |u_e − 1/E|`
    pub fn max_imbalance(&self) -> f64 {
        let uniform = 1.0 / self.sums.len() as f64;
        self.usage().iter().map(|u| (u - uniform).abs()).fold(0.0, f64::max)
    }
}

/// Usage per router keyed by pair label (`"T<-A"`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub pairs: BTreeMap<String, UsageAccumulator>,
}

impl RouteStats {
    pub fn record(&mut self, key: PairKey, decisions: &[RoutingDecision]) {
        let experts = decisions.first().map_or(0, |d| d.weights.len());
        let acc = self.pairs.entry(key.label()).or_insert_with(|| UsageAccumulator::new(experts));
        for d in decisions {
            acc.record(d);
        }
    }

    pub fn merge(&mut self, other: &RouteStats) {
        for (k, v) in &other.pairs {
            self.pairs.entry(k.clone()).or_default().merge(v);
        }
    }

    pub fn load_balance(&self) -> Result<f64> {
        load_balance_loss(&self.pairs.values().collect::<Vec<_>>())
    }

    pub fn max_imbalance(&self) -> f64 {
        self.pairs.values().map(UsageAccumulator::max_imbalance).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pairs = self
            .pairs
            .iter()
            .map(|(k, acc)| {
                (
                    k.clone(),
                    serde_json::json!({
                        "usage": acc.usage(),
                        "kept_histogram": acc.kept_counts,
                        "utterances": acc.count,
                    }),
                )
            })
            .collect::<serde_json::Map<_, _>>();
        serde_json::Value::Object(pairs)
    }
}
