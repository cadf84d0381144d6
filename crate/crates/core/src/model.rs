//! End-to-end classifier: gated fusion, per-modality encoders, the aligner
//! mixture and the graph pathway, a linear head, and the training losses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, graph_forward, relation_types, GraphConfig, RgnnParams};
use crate::hgf::{ablation_bypass, encode_modality, hgf_gate, EncoderParams, GateParams};
use crate::metrics::argmax;
use crate::moa::{moa_forward, MoaOutput, MoaParams, MoaShape, PairKey, RouteStats};
use crate::nn::{Activation, BlockShape, Linear};
use crate::params::{Ctx, Init, ParamStore};
use crate::synth::Dialogue;
use crate::tensor::{Tape, Tensor, Var};
use crate::Modality;

/// Rung of the ablation ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "hgf")]
    Hgf,
    #[default]
    #[serde(rename = "hgf+moa")]
    HgfMoa,
}

impl AblationMode {
    pub const LADDER: [AblationMode; 3] = [AblationMode::Baseline, AblationMode::Hgf, AblationMode::HgfMoa];

    pub fn uses_gate(self) -> bool {
        self != AblationMode::Baseline
    }

    pub fn uses_moa(self) -> bool {
        self == AblationMode::HgfMoa
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Hgf => "hgf",
            AblationMode::HgfMoa => "hgf+moa",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::LADDER.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim_t: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub activation: Activation,
    pub experts: usize,
    pub top_k: usize,
    pub lambda: f64,
    pub classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    pub ablation: AblationMode,
    #[serde(flatten)]
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim_t: 16,
            dim_a: 16,
            dim_v: 16,
            hidden: 32,
            heads: 4,
            ffn_inner: 64,
            activation: Activation::Gelu,
            experts: 4,
            top_k: 2,
            lambda: 0.01,
            classes: 6,
            class_weights: None,
            ablation: AblationMode::HgfMoa,
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.dim_t,
            Modality::Audio => self.dim_a,
            Modality::Video => self.dim_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if Modality::ALL.iter().any(|&m| self.dim(m) == 0) || self.hidden == 0 || self.ffn_inner == 0 || self.classes == 0 {
            return bad("dims, hidden, ffn_inner and classes must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.experts == 0 || self.top_k == 0 {
            return bad("experts and top_k must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.graph.layers == 0 {
            return bad("graph layers must be at least 1".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("class_weights must hold one finite non-negative weight per class".into());
            }
        }
        Ok(())
    }

    fn block(&self) -> BlockShape {
        BlockShape { width: self.hidden, heads: self.heads, ffn_inner: self.ffn_inner, activation: self.activation }
    }

    /// Width of the classifier input.
    pub fn representation_width(&self) -> usize {
        let m = Modality::ALL.len();
        let graph = m * self.hidden;
        if self.ablation.uses_moa() {
            m * (m - 1) * self.hidden + graph
        } else {
            graph
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub gates: Option<Vec<GateParams>>,
    pub encoders: Vec<EncoderParams>,
    pub moa: Option<MoaParams>,
    pub gnn: RgnnParams,
    pub classifier: Linear,
}

/// Configuration, parameter values and the handles that index them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let gates = if config.ablation.uses_gate() {
            Some(Modality::ALL.iter().map(|&m| GateParams::init(&mut store, &init, &format!("gate.{m}"), config.dim(m))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let encoders = Modality::ALL
            .iter()
            .map(|&m| EncoderParams::init(&mut store, &init, &format!("enc.{m}"), config.dim(m), config.block()))
            .collect::<Result<Vec<_>>>()?;
        let moa = if config.ablation.uses_moa() {
            let shape = MoaShape { block: config.block(), experts: config.experts, top_k: config.top_k };
            Some(MoaParams::init(&mut store, &init, shape, &Modality::ALL)?)
        } else {
            None
        };
        let gnn = RgnnParams::init(&mut store, &init, "gnn", config.hidden, config.graph.layers, &relation_types(&Modality::ALL, &config.graph))?;
        let classifier = Linear::init(&mut store, &init, "head", config.representation_width(), config.classes)?;
        Ok(Self { config, store, params: ModelParams { gates, encoders, moa, gnn, classifier } })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, dialogue: &Dialogue) -> Result<ForwardOutput<'t>> {
        forward(ctx, &self.params, &self.config, dialogue)
    }

    /// Inference: class probabilities per utterance plus routing decisions.
    pub fn infer(&self, dialogue: &Dialogue) -> Result<Inference> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let out = self.forward(&ctx, dialogue)?;
        let logits = (*out.logits.value()).clone();
        let probs = out.logits.softmax(1)?.value();
        let predictions = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        let mut routes = RouteStats::default();
        if let Some(moa) = &out.moa {
            for (key, a) in &moa.alignments {
                routes.record(*key, &a.decisions);
            }
        }
        let probabilities = (*probs).clone();
        Ok(Inference { logits, probabilities, predictions, routes })
    }
}

pub struct Inference {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub predictions: Vec<usize>,
    pub routes: RouteStats,
}

pub struct ForwardOutput<'t> {
    /// `L×C`
    pub logits: Var<'t>,
    /// Gate values `α_m` (`L×1`) in hgf modes.
    pub gates: Vec<(Modality, Var<'t>)>,
    pub moa: Option<MoaOutput<'t>>,
}

impl<'t> ForwardOutput<'t> {
    /// Routing weights `π` per ordered pair.
    pub fn routing_weights(&self) -> BTreeMap<PairKey, Var<'t>> {
        self.moa.iter().flat_map(|m| m.alignments.iter().map(|(k, a)| (*k, a.weights))).collect()
    }
}

pub fn check_dialogue(dialogue: &Dialogue, config: &ModelConfig) -> Result<()> {
    let len = dialogue.labels.len();
    if len == 0 {
        return Err(Error::Model(format!("dialogue {} is empty", dialogue.id)));
    }
    for (i, &m) in Modality::ALL.iter().enumerate() {
        let pair = dialogue.modalities.get(i).filter(|p| p.modality == m).ok_or_else(|| Error::Model(format!("dialogue {} lacks modality {m}", dialogue.id)))?;
        if pair.len() != len {
            return Err(Error::Model(format!("dialogue {}: modality {m} has {} rows for {len} labels", dialogue.id, pair.len())));
        }
        if pair.dim() != config.dim(m) {
            return Err(Error::Model(format!("dialogue {}: modality {m} width {} but model expects {}", dialogue.id, pair.dim(), config.dim(m))));
        }
    }
    if let Some(&y) = dialogue.labels.iter().find(|&&y| y >= config.classes) {
        return Err(Error::Model(format!("dialogue {}: label {y} outside {} classes", dialogue.id, config.classes)));
    }
    Ok(())
}

/// Inverted dropout for training passes, drawing masks from its own stream.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64, stream: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self { rate, rng })
    }

    pub fn apply<'t>(&mut self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = x.shape();
        let n = shape.iter().product();
        let mask = (0..n).map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep }).collect();
        x.mul(ctx.constant(Tensor::new(shape, mask)?))
    }
}

/// Inference-mode forward pass.
pub fn forward<'t>(ctx: &Ctx<'t>, params: &ModelParams, config: &ModelConfig, dialogue: &Dialogue) -> Result<ForwardOutput<'t>> {
    forward_with(ctx, params, config, dialogue, None)
}

/// Forward pass; `dropout` (training only) masks the fused inputs and the joint representation.
pub fn forward_with<'t>(
    ctx: &Ctx<'t>,
    params: &ModelParams,
    config: &ModelConfig,
    dialogue: &Dialogue,
    mut dropout: Option<&mut Dropout>,
) -> Result<ForwardOutput<'t>> {
    check_dialogue(dialogue, config)?;
    let mut gates = Vec::new();
    let mut encoded = Vec::with_capacity(3);
    for (i, pair) in dialogue.modalities.iter().enumerate() {
        let fused = match &params.gates {
            Some(g) => {
                let (z, alpha) = hgf_gate(ctx, ctx.constant(pair.content.clone()), ctx.constant(pair.hotspot.clone()), &g[i])?;
                gates.push((pair.modality, alpha));
                z
            }
            None => ctx.constant(ablation_bypass(pair).clone()),
        };
        let fused = match dropout.as_deref_mut() {
            Some(d) => d.apply(ctx, fused)?,
            None => fused,
        };
        encoded.push(encode_modality(ctx, pair.modality, fused, &params.encoders[i])?.x);
    }
    let graph = build_graph(dialogue.labels.len(), &Modality::ALL, &config.graph);
    let h_gnn = graph_forward(ctx, &encoded, &graph, &params.gnn)?;
    let (repr, moa) = match &params.moa {
        Some(p) => {
            let out = moa_forward(ctx, &encoded, p)?;
            (ctx.tape().concat(&[out.combined(), h_gnn], 1)?, Some(out))
        }
        None => (h_gnn, None),
    };
    let repr = match dropout {
        Some(d) => d.apply(ctx, repr)?,
        None => repr,
    };
    let logits = params.classifier.forward(ctx, repr)?;
    Ok(ForwardOutput { logits, gates, moa })
}

/// Sum of `−w_y log p(y)` over rows and the matching weight total `Σ w_y`.
pub fn task_loss_terms<'t>(logits: Var<'t>, labels: &[usize], class_weights: Option<&[f64]>) -> Result<(Var<'t>, f64)> {
    let c = logits.shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Model(format!("label {y} outside {c} classes")));
    }
    let picked = logits.log_softmax(1)?.pick_cols(labels)?;
    match class_weights {
        None => Ok((picked.sum_all()?.neg()?, labels.len() as f64)),
        Some(w) => {
            let col: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
            let total = col.iter().sum();
            let weights = logits.tape().constant(Tensor::new(vec![labels.len(), 1], col)?);
            Ok((picked.mul(weights)?.sum_all()?.neg()?, total))
        }
    }
}

/// Weighted mean negative log-likelihood over utterances.
pub fn task_loss<'t>(logits: Var<'t>, labels: &[usize], class_weights: Option<&[f64]>) -> Result<Var<'t>> {
    let (sum, total) = task_loss_terms(logits, labels, class_weights)?;
    if total <= 0.0 {
        return Err(Error::Model("class weights of the batch sum to zero".into()));
    }
    sum.scale(1.0 / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub load_balance: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(task: f64, load_balance: f64, lambda: f64, moa_enabled: bool) -> LossBreakdown {
    let load_balance = if moa_enabled { load_balance } else { 0.0 };
    LossBreakdown { task, load_balance, lambda, total: task + lambda * load_balance }
}

/// Inverse-frequency weights `N / (C·n_c)`; absent classes get weight 0.
pub fn inverse_frequency_weights(dialogues: &[Dialogue], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for y in dialogues.iter().flat_map(|d| &d.labels) {
        counts[*y] += 1;
    }
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| if c == 0 { 0.0 } else { n as f64 / (classes * c) as f64 }).collect()
}
