//! Utterance-level multi-relational graph and relational message passing.
//!
//! Nodes are `(modality, utterance)` pairs stored modality-major
//! (`id = position(m)·L + t`). Edges carry a relation made of the temporal
//! direction `s = sign(t_dst − t_src)` and the ordered modality pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Var;
use crate::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub window_past: usize,
    pub window_future: usize,
    pub cross_modal: bool,
    pub layers: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { window_past: 4, window_future: 4, cross_modal: true, layers: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    /// `+1` from past to present, `−1` from future to present, `0` same utterance.
    pub s: i8,
    pub src: Modality,
    pub dst: Modality,
}

impl Relation {
    pub fn label(self) -> String {
        format!("{}{}{:+}", self.src, self.dst, self.s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Graph {
    pub len: usize,
    pub modalities: Vec<Modality>,
    pub edges: Vec<Edge>,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.len * self.modalities.len()
    }

    pub fn node(&self, modality: Modality, t: usize) -> Option<usize> {
        let m = self.modalities.iter().position(|&x| x == modality)?;
        (t < self.len).then_some(m * self.len + t)
    }

    /// `(modality, utterance)` of every node in storage order.
    pub fn nodes(&self) -> Vec<(Modality, usize)> {
        self.modalities.iter().flat_map(|&m| (0..self.len).map(move |t| (m, t))).collect()
    }

    /// Node list and typed edge list for debugging.
    pub fn dump(&self) -> serde_json::Value {
        let nodes: Vec<_> =
            self.nodes().iter().enumerate().map(|(id, (m, t))| serde_json::json!({ "id": id, "modality": m, "t": t })).collect();
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|e| serde_json::json!({ "src": e.src, "dst": e.dst, "s": e.relation.s, "src_modality": e.relation.src, "dst_modality": e.relation.dst }))
            .collect();
        serde_json::json!({ "length": self.len, "nodes": nodes, "edges": edges })
    }
}

/// Relation types that `build_graph` can realize under `config`.
pub fn relation_types(modalities: &[Modality], config: &GraphConfig) -> Vec<Relation> {
    let mut out = Vec::new();
    for &m in modalities {
        if config.window_past > 0 {
            out.push(Relation { s: 1, src: m, dst: m });
        }
        if config.window_future > 0 {
            out.push(Relation { s: -1, src: m, dst: m });
        }
    }
    if config.cross_modal {
        for &dst in modalities {
            for &src in modalities.iter().filter(|&&k| k != dst) {
                out.push(Relation { s: 0, src, dst });
            }
        }
    }
    out
}

pub fn build_graph(len: usize, modalities: &[Modality], config: &GraphConfig) -> Graph {
    let mut edges = Vec::new();
    for (mi, &m) in modalities.iter().enumerate() {
        let id = |t: usize| mi * len + t;
        for t in 0..len {
            for tp in t.saturating_sub(config.window_past)..t {
                edges.push(Edge { src: id(tp), dst: id(t), relation: Relation { s: 1, src: m, dst: m } });
            }
            for tp in t + 1..=(t + config.window_future).min(len.saturating_sub(1)) {
                edges.push(Edge { src: id(tp), dst: id(t), relation: Relation { s: -1, src: m, dst: m } });
            }
            if config.cross_modal {
                for (ki, &k) in modalities.iter().enumerate().filter(|&(_, &k)| k != m) {
                    edges.push(Edge { src: ki * len + t, dst: id(t), relation: Relation { s: 0, src: k, dst: m } });
                }
            }
        }
    }
    Graph { len, modalities: modalities.to_vec(), edges }
}

#[derive(Clone, Debug)]
pub struct RgnnLayer {
    pub self_weight: ParamId,
    pub relations: Vec<(Relation, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct RgnnParams {
    pub layers: Vec<RgnnLayer>,
}

impl RgnnParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, width: usize, layers: usize, relations: &[Relation]) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Graph("message passing needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|l| {
                let w0 = format!("{name}.l{l}.self");
                let self_weight = store.add(w0.clone(), init.glorot(&w0, width, width))?;
                let relations = relations
                    .iter()
                    .map(|r| {
                        let n = format!("{name}.l{l}.{}", r.label());
                        Ok((*r, store.add(n.clone(), init.glorot(&n, width, width))?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(RgnnLayer { self_weight, relations })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Stacks per-modality sequences (each `L×g`, given in `graph.modalities` order) into node features.
pub fn node_features<'t>(ctx: &Ctx<'t>, per_modality: &[Var<'t>]) -> Result<Var<'t>> {
    ctx.tape().concat(per_modality, 0)
}

/// `h′_v = act(W_0 h_v + Σ_r mean_{u∈N_r(v)} W_r h_u)`; ReLU between layers, none after the last.
pub fn rgnn_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, graph: &Graph, params: &RgnnParams) -> Result<Var<'t>> {
    let n = graph.node_count();
    if x.shape()[0] != n {
        return Err(Error::Graph(format!("{} feature rows for {n} nodes", x.shape()[0])));
    }
    let mut relations: Vec<(Relation, Vec<Vec<usize>>)> = Vec::new();
    for e in &graph.edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::Graph(format!("edge {}→{} leaves the {n}-node graph", e.src, e.dst)));
        }
        let idx = match relations.iter().position(|(r, _)| *r == e.relation) {
            Some(i) => i,
            None => {
                relations.push((e.relation, vec![Vec::new(); n]));
                relations.len() - 1
            }
        };
        relations[idx].1[e.dst].push(e.src);
    }
    let mut h = x;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut out = h.matmul(ctx.p(layer.self_weight))?;
        for (rel, groups) in &relations {
            let w = layer
                .relations
                .iter()
                .find(|(r, _)| r == rel)
                .ok_or_else(|| Error::Graph(format!("no weight for relation {}", rel.label())))?
                .1;
            out = out.add(h.segment_mean(groups)?.matmul(ctx.p(w))?)?;
        }
        h = if l + 1 < params.layers.len() { out.relu()? } else { out };
    }
    Ok(h)
}

/// Restores utterance rows: row `t` is the concatenation over `modalities` of node `(m, t)`.
///
/// `storage[i]` names the node held in row `i` of `nodes`.
pub fn multi_concat<'t>(ctx: &Ctx<'t>, nodes: Var<'t>, storage: &[(Modality, usize)], len: usize, modalities: &[Modality]) -> Result<Var<'t>> {
    if storage.len() != nodes.shape()[0] || storage.len() != len * modalities.len() {
        return Err(Error::Graph(format!("{} nodes for {len} utterances × {} modalities", storage.len(), modalities.len())));
    }
    let mut parts = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let rows = (0..len)
            .map(|t| storage.iter().position(|&(sm, st)| sm == m && st == t).ok_or_else(|| Error::Graph(format!("node ({m},{t}) missing"))))
            .collect::<Result<Vec<_>>>()?;
        parts.push(nodes.gather_rows(&rows)?);
    }
    ctx.tape().concat(&parts, 1)
}

/// Full graph pathway for one dialogue: `L×(|M|·g)`.
pub fn graph_forward<'t>(ctx: &Ctx<'t>, per_modality: &[Var<'t>], graph: &Graph, params: &RgnnParams) -> Result<Var<'t>> {
    let x = node_features(ctx, per_modality)?;
    let h = rgnn_forward(ctx, x, graph, params)?;
    multi_concat(ctx, h, &graph.nodes(), graph.len, &graph.modalities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check_store;
    use crate::tensor::{GradCheckOptions, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TA: [Modality; 2] = [Modality::Text, Modality::Audio];

    fn cfg(wp: usize, wf: usize, cross: bool) -> GraphConfig {
        GraphConfig { window_past: wp, window_future: wf, cross_modal: cross, layers: 2 }
    }

    #[test]
    fn small_graph_counts() {
        let g = build_graph(3, &TA, &cfg(1, 1, true));
        assert_eq!(g.edges.iter().filter(|e| e.relation.s != 0).count(), 8);
        assert_eq!(g.edges.iter().filter(|e| e.relation.s == 0).count(), 6);
        assert!(build_graph(5, &Modality::ALL, &cfg(0, 0, false)).edges.is_empty());
        let single = build_graph(1, &Modality::ALL, &cfg(4, 4, true));
        assert!(single.edges.iter().all(|e| e.relation.s == 0));
        assert_eq!(single.edges.len(), 6);
    }

    #[test]
    fn edge_signs_follow_direction() {
        let g = build_graph(6, &Modality::ALL, &cfg(2, 3, true));
        let nodes = g.nodes();
        for e in &g.edges {
            let (ts, td) = (nodes[e.src].1 as i64, nodes[e.dst].1 as i64);
            assert_eq!(e.relation.s as i64, (td - ts).signum());
            assert_eq!(nodes[e.src].0, e.relation.src);
            assert_eq!(nodes[e.dst].0, e.relation.dst);
            if e.relation.s != 0 {
                assert!(td - ts <= 2 && ts - td <= 3);
            }
        }
    }

    fn identity_params(store: &mut ParamStore, relations: &[Relation], width: usize) -> RgnnParams {
        let p = RgnnParams::init(store, &Init::new(0), "g", width, 1, relations).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.set(id, Tensor::zeros(&[width, width])).unwrap();
        }
        p
    }

    #[test]
    fn empty_graph_is_a_self_transform() {
        let graph = build_graph(3, &TA, &cfg(0, 0, false));
        let mut store = ParamStore::new();
        let p = RgnnParams::init(&mut store, &Init::new(1), "g", 4, 1, &[]).unwrap();
        let x = Tensor::new(vec![6, 4], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = rgnn_forward(&ctx, ctx.constant(x.clone()), &graph, &p).unwrap();
        let direct = ctx.constant(x).matmul(ctx.p(p.layers[0].self_weight)).unwrap();
        assert_eq!(*out.value(), *direct.value());
    }

    #[test]
    fn single_edge_moves_one_message() {
        let rel = Relation { s: 0, src: Modality::Text, dst: Modality::Audio };
        let graph = Graph { len: 2, modalities: TA.to_vec(), edges: vec![Edge { src: 1, dst: 3, relation: rel }] };
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, &[rel], 2);
        store.set(p.layers[0].relations[0].1, Tensor::identity(2)).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = rgnn_forward(&ctx, ctx.constant(x), &graph, &p).unwrap().value();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0, -4.0]);

        let bad = Graph { edges: vec![Edge { src: 9, dst: 0, relation: rel }], ..graph };
        assert!(rgnn_forward(&ctx, ctx.constant(Tensor::zeros(&[4, 2])), &bad, &p).is_err());
    }

    #[test]
    fn multi_concat_is_keyed_by_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let len = 4;
        let x = Tensor::new(vec![12, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let nodes: Vec<(Modality, usize)> = Modality::ALL.iter().flat_map(|&m| (0..len).map(move |t| (m, t))).collect();
        let tape = Tape::new();
        let store = ParamStore::new();
        let ctx = Ctx::new(&tape, &store);
        let base = multi_concat(&ctx, ctx.constant(x.clone()), &nodes, len, &Modality::ALL).unwrap().value();
        assert_eq!(base.shape(), &[4, 9]);

        let mut order: Vec<usize> = (0..12).collect();
        for i in (1..12).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Tensor::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let shuffled_nodes: Vec<_> = order.iter().map(|&i| nodes[i]).collect();
        let again = multi_concat(&ctx, ctx.constant(shuffled), &shuffled_nodes, len, &Modality::ALL).unwrap().value();
        assert_eq!(*base, *again);
        assert!(multi_concat(&ctx, ctx.constant(x), &nodes[..11], len, &Modality::ALL).is_err());
    }

    #[test]
    fn window_shift_equivariance() {
        for (len, c) in [(3, 2), (5, 4), (1, 3)] {
            let config = cfg(2, 1, true);
            let small = build_graph(len, &Modality::ALL, &config);
            let big = build_graph(len + 2 * c, &Modality::ALL, &config);
            let key = |g: &Graph, e: &Edge, shift: usize| {
                let nodes = g.nodes();
                let (s, d) = (nodes[e.src], nodes[e.dst]);
                ((s.0, s.1 + shift), (d.0, d.1 + shift), e.relation)
            };
            let mut shifted: Vec<_> = small.edges.iter().map(|e| key(&small, e, c)).collect();
            let inside = |t: usize| t >= c && t < c + len;
            let mut restricted: Vec<_> = big.edges.iter().map(|e| key(&big, e, 0)).filter(|(s, d, _)| inside(s.1) && inside(d.1)).collect();
            shifted.sort();
            restricted.sort();
            assert_eq!(shifted, restricted);
        }
    }

    #[test]
    fn build_rgnn_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = cfg(1, 1, true);
        let graph = build_graph(2, &Modality::ALL, &config);
        let mut store = ParamStore::new();
        let p = RgnnParams::init(&mut store, &Init::new(5), "g", 4, 2, &relation_types(&Modality::ALL, &config)).unwrap();
        let xs: Vec<ParamId> = Modality::ALL
            .iter()
            .map(|m| store.add(format!("x{m}"), Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap())
            .collect();
        let w = Tensor::new(vec![2, 12], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = grad_check_store(
            &store,
            |ctx| {
                let per: Vec<Var> = xs.iter().map(|&id| ctx.p(id)).collect();
                graph_forward(ctx, &per, &graph, &p)?.mul(ctx.constant(w.clone()))?.sum_all()
            },
            &GradCheckOptions::module(1e-5),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
