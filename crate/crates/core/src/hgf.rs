//! Hotspot-gated fusion and per-modality encoding.
//!
//! Each utterance row gets one scalar gate `α = σ([C ∥ H]·W + b)` and the fused
//! row is `Z = C + α ⊙ (H − C)`, a convex combination of the global content
//! row and the hotspot row. `Z` is then projected to the shared width and
//! passed through one encoder block.

use crate::error::{Error, Result};
use crate::nn::{encoder_block, BlockParams, BlockShape, Linear};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::Modality;

/// Global content and hotspot sequences of one modality, one row per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalPair {
    pub modality: Modality,
    pub content: Tensor,
    pub hotspot: Tensor,
}

impl ModalPair {
    pub fn new(modality: Modality, content: Tensor, hotspot: Tensor) -> Result<Self> {
        if content.rank() != 2 || content.shape() != hotspot.shape() {
            return Err(Error::Dimension { op: "modal pair", lhs: content.shape().to_vec(), rhs: hotspot.shape().to_vec() });
        }
        Ok(Self { modality, content, hotspot })
    }

    pub fn len(&self) -> usize {
        self.content.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.content.cols()
    }
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `2·d × 1`
    pub weight: ParamId,
    /// `1 × 1`
    pub bias: ParamId,
}

impl GateParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.glorot(&format!("{name}.weight"), 2 * dim, 1))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, 1]))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub projection: Linear,
    pub block: BlockParams,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, init: &Init, name: &str, dim: usize, shape: BlockShape) -> Result<Self> {
        Ok(Self {
            projection: Linear::init(store, init, &format!("{name}.proj"), dim, shape.width)?,
            block: BlockParams::init(store, init, &format!("{name}.block"), shape)?,
        })
    }
}

#[derive(Clone, Copy)]
pub struct EncodedModality<'t> {
    pub modality: Modality,
    pub x: Var<'t>,
}

/// Returns `(Z, α)` with `α` of shape `L×1`.
pub fn hgf_gate<'t>(ctx: &Ctx<'t>, content: Var<'t>, hotspot: Var<'t>, gate: &GateParams) -> Result<(Var<'t>, Var<'t>)> {
    let (cs, hs) = (content.shape(), hotspot.shape());
    if cs != hs || cs.len() != 2 {
        return Err(Error::Dimension { op: "hgf_gate", lhs: cs, rhs: hs });
    }
    let joined = ctx.tape().concat(&[content, hotspot], 1)?;
    let alpha = joined.affine(ctx.p(gate.weight), ctx.p(gate.bias))?.sigmoid()?;
    let fused = content.lerp(hotspot, alpha)?;
    Ok((fused, alpha))
}

pub fn encode_modality<'t>(ctx: &Ctx<'t>, modality: Modality, fused: Var<'t>, enc: &EncoderParams) -> Result<EncodedModality<'t>> {
    let projected = enc.projection.forward(ctx, fused)?;
    Ok(EncodedModality { modality, x: encoder_block(ctx, projected, &enc.block)? })
}

/// No-fusion input for the baseline rung: hotspots are ignored.
pub fn ablation_bypass(pair: &ModalPair) -> &Tensor {
    &pair.content
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::params::grad_check_store;
    use crate::tensor::{GradCheckOptions, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn gate_store(dim: usize, weight: Vec<f64>, bias: f64) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let gate = GateParams::init(&mut store, &Init::new(0), "g", dim).unwrap();
        store.set(gate.weight, Tensor::new(vec![2 * dim, 1], weight).unwrap()).unwrap();
        store.set(gate.bias, Tensor::new(vec![1, 1], vec![bias]).unwrap()).unwrap();
        (store, gate)
    }

    fn run_gate(store: &ParamStore, gate: &GateParams, c: &Tensor, h: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let (z, a) = hgf_gate(&ctx, ctx.constant(c.clone()), ctx.constant(h.clone()), gate).unwrap();
        ((*z.value()).clone(), (*a.value()).clone())
    }

    #[test]
    fn zero_gate_averages() {
        let (store, gate) = gate_store(2, vec![0.0; 4], 0.0);
        let (z, a) = run_gate(&store, &gate, &rows(&[&[2.0, 0.0]]), &rows(&[&[4.0, 2.0]]));
        assert_eq!(a.data(), &[0.5]);
        assert_eq!(z.data(), &[3.0, 1.0]);
    }

    #[test]
    fn saturated_gate_keeps_content() {
        let (store, gate) = gate_store(2, vec![0.0; 4], -20.0);
        let c = rows(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let (z, _) = run_gate(&store, &gate, &c, &rows(&[&[3.0, 5.0], &[-2.0, 0.0]]));
        assert!(z.max_abs_diff(&c) < 1e-7);
    }

    #[test]
    fn unit_pre_activation_fixture() {
        // C=[1,0], H=[3,2]; weight picks C[0] so the pre-activation is exactly 1.
        let (store, gate) = gate_store(2, vec![1.0, 0.0, 0.0, 0.0], 0.0);
        let (z, a) = run_gate(&store, &gate, &rows(&[&[1.0, 0.0]]), &rows(&[&[3.0, 2.0]]));
        assert!((a.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((z.data()[0] - 2.462_117_157_260_009_6).abs() < 1e-12);
        assert!((z.data()[1] - 1.462_117_157_260_009_8).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(ModalPair::new(Modality::Text, Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 3])).is_err());
        let (store, gate) = gate_store(2, vec![0.0; 4], 0.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let r = hgf_gate(&ctx, ctx.constant(Tensor::zeros(&[2, 2])), ctx.constant(Tensor::zeros(&[3, 2])), &gate);
        assert!(r.is_err());
    }

    #[test]
    fn bypass_returns_content() {
        let pair = ModalPair::new(Modality::Audio, rows(&[&[1.0, 2.0]]), rows(&[&[9.0, 9.0]])).unwrap();
        assert_eq!(ablation_bypass(&pair), &pair.content);
        let other = ModalPair { hotspot: rows(&[&[-3.0, 0.0]]), ..pair.clone() };
        assert_eq!(ablation_bypass(&other), ablation_bypass(&pair));
    }

    fn shape() -> BlockShape {
        BlockShape { width: 8, heads: 2, ffn_inner: 16, activation: Activation::Gelu }
    }

    #[test]
    fn encoder_shapes_and_residual_identity() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&mut store, &Init::new(3), "enc", 5, shape()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let z = ctx.constant(Tensor::full(&[1, 5], 0.3));
        assert_eq!(encode_modality(&ctx, Modality::Text, z, &enc).unwrap().x.shape(), vec![1, 8]);

        enc.block.zero_residual_branches(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let z = ctx.constant(Tensor::full(&[3, 5], -0.7));
        let x = encode_modality(&ctx, Modality::Text, z, &enc).unwrap().x.value();
        let proj = enc.projection.forward(&ctx, z).unwrap().value();
        assert_eq!(*x, *proj);
    }

    #[test]
    fn gate_and_encoder_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let init = Init::new(4);
        let gate = GateParams::init(&mut store, &init, "g", 5).unwrap();
        let enc = EncoderParams::init(&mut store, &init, "enc", 5, shape()).unwrap();
        let mut rand = |r, c| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = store.add("c", rand(3, 5)).unwrap();
        let h = store.add("h", rand(3, 5)).unwrap();
        let w = rand(3, 8);
        let report = grad_check_store(
            &store,
            |ctx| {
                let (z, _) = hgf_gate(ctx, ctx.p(c), ctx.p(h), &gate)?;
                let x = encode_modality(ctx, Modality::Video, z, &enc)?.x;
                x.mul(ctx.constant(w.clone()))?.sum_all()
            },
            &GradCheckOptions::module(1e-5),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..6, 1usize..5).prop_flat_map(|(l, d)| {
            (Just(l), Just(d), prop::collection::vec(-5.0f64..5.0, 2 * l * d + 2 * d + 1))
        })
    }

    proptest! {
        #[test]
        fn fused_rows_are_convex_and_row_proportional((l, d, v) in arb_case()) {
            let c = Tensor::new(vec![l, d], v[..l * d].to_vec()).unwrap();
            let h = Tensor::new(vec![l, d], v[l * d..2 * l * d].to_vec()).unwrap();
            let (store, gate) = gate_store(d, v[2 * l * d..2 * l * d + 2 * d].to_vec(), v[2 * l * d + 2 * d]);
            let (z, a) = run_gate(&store, &gate, &c, &h);
            for r in 0..l {
                let alpha = a.data()[r];
                prop_assert!((0.0..=1.0).contains(&alpha));
                for j in 0..d {
                    let (cv, hv, zv) = (c.at(r, j), h.at(r, j), z.at(r, j));
                    prop_assert!(zv >= cv.min(hv) && zv <= cv.max(hv));
                    prop_assert!((zv - cv - alpha * (hv - cv)).abs() < 1e-12);
                }
            }
            let (same, _) = run_gate(&store, &gate, &c, &c);
            prop_assert_eq!(same, c.clone());

            // row permutation commutes with the gate
            let perm: Vec<usize> = (0..l).rev().collect();
            let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let (zp, ap) = run_gate(&store, &gate, &permute(&c), &permute(&h));
            prop_assert_eq!(zp, permute(&z));
            prop_assert_eq!(ap, permute(&a));
        }
    }
}
