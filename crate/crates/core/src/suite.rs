//! Seeded finite-difference gradient suites over primitives and composed modules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{build_graph, graph_forward, relation_types, GraphConfig, RgnnParams};
use crate::hgf::{encode_modality, hgf_gate, EncoderParams, GateParams, ModalPair};
use crate::model::{forward, task_loss, AblationMode, ModelConfig, Model};
use crate::moa::{align_pair, load_balance_term, MoaParams, MoaShape};
use crate::nn::{Activation, BlockShape};
use crate::par::Parallelism;
use crate::params::{grad_check_store, Init, ParamStore};
use crate::synth::Dialogue;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::Modality;

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const MODULE_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteModule {
    Primitives,
    Hgf,
    Moa,
    Graph,
    Model,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 5] = [SuiteModule::Primitives, SuiteModule::Hgf, SuiteModule::Moa, SuiteModule::Graph, SuiteModule::Model];

    pub fn name(self) -> &'static str {
        match self {
            SuiteModule::Primitives => "primitives",
            SuiteModule::Hgf => "hgf",
            SuiteModule::Moa => "moa",
            SuiteModule::Graph => "graph",
            SuiteModule::Model => "model",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            SuiteModule::Primitives => PRIMITIVE_TOL,
            _ => MODULE_TOL,
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteModule::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown gradient suite `{s}`")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub module: SuiteModule,
    pub case: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CaseResult {
    fn new(module: SuiteModule, case: &str, seed: u64, r: GradCheckReport) -> Self {
        Self { module, case: case.into(), seed, max_rel_error: r.max_rel_error, checked: r.checked, passed: r.passed }
    }
}

/// Summary of one module over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteSummary {
    pub module: SuiteModule,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn summarize(module: SuiteModule, results: &[CaseResult]) -> SuiteSummary {
    let mine: Vec<&CaseResult> = results.iter().filter(|r| r.module == module).collect();
    SuiteSummary {
        module,
        cases: mine.len(),
        failures: mine.iter().filter(|r| !r.passed).count(),
        max_rel_error: mine.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        tol: module.tolerance(),
    }
}

/// Runs `module` once per seed; seeds run in parallel under `par`.
pub fn run_suite(module: SuiteModule, seeds: &[u64], par: Parallelism) -> Result<Vec<CaseResult>> {
    let per_seed = par.map(seeds, |&seed| match module {
        SuiteModule::Primitives => primitives(seed),
        SuiteModule::Hgf => hgf_case(seed).map(|r| vec![r]),
        SuiteModule::Moa => moa_case(seed).map(|r| vec![r]),
        SuiteModule::Graph => graph_case(seed).map(|r| vec![r]),
        SuiteModule::Model => model_case(seed).map(|r| vec![r]),
    });
    Ok(per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

type Check = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

fn primitives(seed: u64) -> Result<Vec<CaseResult>> {
    let opts = GradCheckOptions::module(PRIMITIVE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, k, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6));
    let a = random(&mut rng, &[r, k]);
    let b = random(&mut rng, &[k, c]);
    let same = random(&mut rng, &[r, k]);
    let col = random(&mut rng, &[r, 1]);
    let bias = random(&mut rng, &[1, c]);
    let positive = random(&mut rng, &[r, k]).map(|v| v.abs() + 0.2);
    let weights = random(&mut rng, &[r, c]);
    let wk = random(&mut rng, &[r, k]);
    let away_from_kink = same.map(|x| if x.abs() < 0.05 { 0.3 } else { x });

    let checks: Vec<(&str, Vec<Tensor>, Check)> = vec![
        ("matmul", vec![a.clone(), b.clone(), weights], Box::new(|_, v| v[0].matmul(v[1])?.mul(v[2])?.sum_all())),
        ("affine", vec![a.clone(), b, bias.clone()], Box::new(|_, v| v[0].affine(v[1], v[2])?.tanh()?.sum_all())),
        ("add", vec![same.clone(), col.clone(), wk.clone()], Box::new(|_, v| v[0].add(v[1])?.mul(v[2])?.sum_all())),
        ("sub", vec![same.clone(), a.clone(), wk.clone()], Box::new(|_, v| v[0].sub(v[1])?.mul(v[2])?.sum_all())),
        ("mul", vec![col.clone(), same.clone()], Box::new(|_, v| v[0].mul(v[1])?.tanh()?.sum_all())),
        ("div", vec![same.clone(), positive.clone()], Box::new(|_, v| v[0].div(v[1])?.sum_all())),
        ("sigmoid", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].sigmoid()?.mul(v[1])?.sum_all())),
        ("tanh", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].tanh()?.mul(v[1])?.sum_all())),
        ("gelu", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].gelu()?.mul(v[1])?.sum_all())),
        ("relu", vec![away_from_kink], Box::new(|_, v| v[0].relu()?.mul(v[0])?.sum_all())),
        ("log", vec![positive.clone()], Box::new(|_, v| v[0].log()?.sum_all())),
        ("exp", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].exp()?.mul(v[1])?.sum_all())),
        ("sqrt", vec![positive.clone()], Box::new(|_, v| v[0].sqrt()?.sum_all())),
        ("xlogx", vec![positive], Box::new(|_, v| v[0].xlogx()?.sum_all())),
        ("softmax", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].softmax(1)?.mul(v[1])?.sum_all())),
        ("log_softmax", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].log_softmax(1)?.mul(v[1])?.sum_all())),
        ("mean", vec![same.clone()], Box::new(|_, v| v[0].mean(0)?.tanh()?.sum_all())),
        ("transpose", vec![a.clone(), a.clone()], Box::new(|_, v| v[0].transpose()?.matmul(v[1])?.sum_all())),
        ("concat", vec![a.clone(), same.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 0)?.tanh()?.sum_all())),
        ("expand", vec![bias], Box::new(|_, v| v[0].expand(&[3, v[0].shape()[1]])?.tanh()?.sum_all())),
        ("gather", vec![a.clone()], Box::new(|_, v| v[0].gather_rows(&[0, 0, v[0].shape()[0] - 1])?.tanh()?.sum_all())),
        (
            "segment_mean",
            vec![a],
            Box::new(|_, v| {
                let n = v[0].shape()[0];
                v[0].segment_mean(&[vec![0, n - 1], vec![], (0..n).collect()])?.tanh()?.sum_all()
            }),
        ),
        ("lerp", vec![same, wk, col.map(|x| 0.5 + 0.3 * x.tanh())], Box::new(|_, v| v[0].lerp(v[1], v[2])?.tanh()?.sum_all())),
    ];
    checks
        .into_iter()
        .map(|(name, inputs, f)| grad_check(|t, v| f(t, v), &inputs, &opts).map(|r| CaseResult::new(SuiteModule::Primitives, name, seed, r)))
        .collect()
}

fn block(width: usize) -> BlockShape {
    BlockShape { width, heads: 2, ffn_inner: 2 * width, activation: Activation::Gelu }
}

fn hgf_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (len, dim) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
    let init = Init::new(seed);
    let mut store = ParamStore::new();
    let gate = GateParams::init(&mut store, &init, "gate", dim)?;
    store.set(gate.bias, random(&mut rng, &[1, 1]))?;
    let enc = EncoderParams::init(&mut store, &init, "enc", dim, block(4))?;
    let c = store.add("c", random(&mut rng, &[len, dim]))?;
    let h = store.add("h", random(&mut rng, &[len, dim]))?;
    let w = random(&mut rng, &[len, 4]);
    let r = grad_check_store(
        &store,
        |ctx| {
            let (z, _) = hgf_gate(ctx, ctx.p(c), ctx.p(h), &gate)?;
            encode_modality(ctx, Modality::Text, z, &enc)?.x.mul(ctx.constant(w.clone()))?.sum_all()
        },
        &GradCheckOptions::module(MODULE_TOL).sampled(12, seed),
    )?;
    Ok(CaseResult::new(SuiteModule::Hgf, "gate+encoder", seed, r))
}

fn moa_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lj, lk) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let experts = rng.gen_range(1..=3);
    let top_k = rng.gen_range(1..=experts);
    let mut store = ParamStore::new();
    let shape = MoaShape { block: block(8), experts, top_k };
    let p = MoaParams::init(&mut store, &Init::new(seed), shape, &[Modality::Text, Modality::Audio])?;
    let xj = store.add("xj", random(&mut rng, &[lj, 8]))?;
    let xk = store.add("xk", random(&mut rng, &[lk, 8]))?;
    let w = random(&mut rng, &[lj, 8]);
    let pair = p.pairs[0].clone();
    let r = grad_check_store(
        &store,
        |ctx| {
            let a = align_pair(ctx, ctx.p(xj), ctx.p(xk), &pair, top_k)?;
            a.aligned.mul(ctx.constant(w.clone()))?.sum_all()?.add(load_balance_term(&[a.weights])?)
        },
        &GradCheckOptions::module(MODULE_TOL).sampled(8, seed),
    )?;
    Ok(CaseResult::new(SuiteModule::Moa, "route+mix+restore", seed, r))
}

fn graph_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..=4);
    let config = GraphConfig { window_past: rng.gen_range(0..=2), window_future: rng.gen_range(0..=2), cross_modal: rng.gen_bool(0.5), layers: 2 };
    let graph = build_graph(len, &Modality::ALL, &config);
    let mut store = ParamStore::new();
    let p = RgnnParams::init(&mut store, &Init::new(seed), "gnn", 4, config.layers, &relation_types(&Modality::ALL, &config))?;
    let xs: Vec<_> = Modality::ALL.iter().map(|m| store.add(format!("x.{m}"), random(&mut rng, &[len, 4]))).collect::<Result<_>>()?;
    let w = random(&mut rng, &[len, 12]);
    let r = grad_check_store(
        &store,
        |ctx| {
            let per: Vec<Var> = xs.iter().map(|&id| ctx.p(id)).collect();
            graph_forward(ctx, &per, &graph, &p)?.mul(ctx.constant(w.clone()))?.sum_all()
        },
        &GradCheckOptions::module(MODULE_TOL).sampled(12, seed),
    )?;
    Ok(CaseResult::new(SuiteModule::Graph, "build+rgnn+concat", seed, r))
}

fn model_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..=3);
    let config = ModelConfig {
        dim_t: 3,
        dim_a: 4,
        dim_v: 2,
        hidden: 8,
        heads: 2,
        ffn_inner: 8,
        experts: 2,
        top_k: 1,
        lambda: 0.3,
        classes: 3,
        class_weights: Some(vec![1.0, 2.0, 0.5]),
        ablation: AblationMode::HgfMoa,
        activation: Activation::Gelu,
        graph: GraphConfig { window_past: 1, window_future: 1, cross_modal: true, layers: 2 },
    };
    let model = Model::new(config.clone(), seed)?;
    let modalities = Modality::ALL
        .iter()
        .map(|&m| {
            let d = config.dim(m);
            ModalPair::new(m, random(&mut rng, &[len, d]), random(&mut rng, &[len, d]))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..len).map(|_| rng.gen_range(0..3)).collect();
    let d = Dialogue { id: "g".into(), labels, modalities };
    let r = grad_check_store(
        &model.store,
        |ctx| {
            let out = forward(ctx, &model.params, &config, &d)?;
            let task = task_loss(out.logits, &d.labels, config.class_weights.as_deref())?;
            let pis: Vec<Var> = out.routing_weights().into_values().collect();
            task.add(load_balance_term(&pis)?.scale(config.lambda)?)
        },
        &GradCheckOptions::module(MODULE_TOL).sampled(4, seed),
    )?;
    Ok(CaseResult::new(SuiteModule::Model, "total loss", seed, r))
}
