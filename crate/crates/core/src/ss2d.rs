//! 2D selective scan and the vision Mamba block.
//!
//! A `[C, H, W]` map is unfolded into four token sequences (row-major and
//! column-major, each forward and reversed), every sequence runs through its
//! own S6 layer, and the results are folded back and summed.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::ops::Conv2dOptions;
use crate::ssm::SelectiveScan;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionOrder {
    RowForward,
    RowReverse,
    ColumnForward,
    ColumnReverse,
}

impl DirectionOrder {
    pub const ALL: [DirectionOrder; 4] = [
        DirectionOrder::RowForward,
        DirectionOrder::RowReverse,
        DirectionOrder::ColumnForward,
        DirectionOrder::ColumnReverse,
    ];

    /// `order[p]` is the row-major pixel index visited at sequence position `p`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let column = |p: usize| (p % h) * w + p / h;
        match self {
            DirectionOrder::RowForward => (0..n).collect(),
            DirectionOrder::RowReverse => (0..n).rev().collect(),
            DirectionOrder::ColumnForward => (0..n).map(column).collect(),
            DirectionOrder::ColumnReverse => (0..n).rev().map(column).collect(),
        }
    }

    /// `inverse[pixel]` is the sequence position of that pixel.
    pub fn inverse(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (p, &pix) in order.iter().enumerate() {
            inv[pix] = p;
        }
        inv
    }
}

/// `expand[k·HW·C + p·C + c]` reads `x[c, order_k[p]]`.
fn expand_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(4 * hw * c);
    for dir in DirectionOrder::ALL {
        for pix in dir.order(h, w) {
            for ch in 0..c {
                idx.push(ch * hw + pix);
            }
        }
    }
    idx
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("expected [C,H,W], got {shape:?}"))),
    }
}

/// `[C, H, W] -> [4, H·W, C]`, one sequence per [`DirectionOrder`].
pub fn scan_expand_tensor(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x.shape())?;
    let data = expand_index(c, h, w).iter().map(|&i| x.data()[i]).collect();
    Tensor::new([4, h * w, c], data)
}

/// `[4, H·W, C] -> [C, H, W]`: undo each direction's order, then sum.
pub fn scan_merge_tensor(y: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[4, hw, c] = y.shape() else {
        return Err(Error::dim(format!("scan_merge expects [4, H·W, C], got {:?}", y.shape())));
    };
    if hw != h * w {
        return Err(Error::dim(format!("scan_merge: {hw} tokens for a {h}x{w} grid")));
    }
    let mut out = vec![0.0; c * hw];
    for (&src, &v) in expand_index(c, h, w).iter().zip(y.data()) {
        out[src] += v;
    }
    Tensor::new([c, h, w], out)
}

impl<'t> Var<'t> {
    pub fn scan_expand(self) -> Result<Var<'t>> {
        let (c, h, w) = chw(&self.shape())?;
        self.gather(Rc::new(expand_index(c, h, w)), vec![4, h * w, c])
    }

    pub fn scan_merge(self, h: usize, w: usize) -> Result<Var<'t>> {
        let out = scan_merge_tensor(&self.value(), h, w)?;
        self.tape().record("scan_merge", out, &[self], move |g| {
            vec![scan_expand_tensor(g).unwrap()]
        })
    }
}

/// Four-direction selective scan over a `[D, H, W]` map.
#[derive(Debug, Clone)]
pub struct Ss2d {
    /// One S6 layer per direction, or a single shared layer.
    pub scans: Vec<SelectiveScan>,
}

impl Ss2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, state_dim: usize, shared: bool) -> Self {
        let mut pb = pb.child(name);
        let count = if shared { 1 } else { 4 };
        let scans = (0..count)
            .map(|k| SelectiveScan::new(&mut pb, &format!("dir{k}"), channels, state_dim))
            .collect();
        Ss2d { scans }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (c, h, w) = chw(&x.shape())?;
        let seqs = x.scan_expand()?;
        let mut outs = Vec::with_capacity(4);
        for k in 0..4 {
            let seq = seqs.narrow(k, 1)?.reshape([h * w, c])?;
            let scan = &self.scans[k % self.scans.len()];
            outs.push(scan.forward(p, seq)?.reshape([1, h * w, c])?);
        }
        Var::concat(&outs)?.scan_merge(h, w)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.scans.iter().flat_map(SelectiveScan::params).collect()
    }
}

pub const CHANNEL_ATTENTION_REDUCTION: usize = 4;

/// `x ⊙ sigmoid(W₂ relu(W₁ avgpool(x)))`, with the gate broadcast over space.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: ParamId,
    pub excite: ParamId,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let mut pb = pb.child(name);
        Ok(ChannelAttention {
            squeeze: pb.uniform("squeeze", &[hidden, channels], channels),
            excite: pb.uniform("excite", &[channels, hidden], hidden),
        })
    }

    /// The per-channel gate `s`.
    pub fn gate<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.shape()[0];
        let pooled = x.mean_per_channel()?.reshape([c, 1])?;
        let hidden = p.get(self.squeeze).matmul(pooled)?.relu()?;
        p.get(self.excite).matmul(hidden)?.sigmoid()?.reshape([c])
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = self.gate(p, x)?;
        x.scale_channels(s)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.squeeze, self.excite]
    }
}

pub const EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct VisionMambaOptions {
    pub state_dim: usize,
    pub shared_directions: bool,
    pub reduction: usize,
}

impl Default for VisionMambaOptions {
    fn default() -> Self {
        VisionMambaOptions {
            state_dim: crate::ssm::DEFAULT_STATE_DIM,
            shared_directions: false,
            reduction: CHANNEL_ATTENTION_REDUCTION,
        }
    }
}

/// Residual vision Mamba block on `[C, H, W]` maps:
///
/// ```text
/// u     = LN(x)
/// gate  = silu(Linear(u))
/// ssm   = LN(SS2D(silu(DWConv3x3(Linear(u)))))
/// out   = x + CA(Linear(gate ⊙ ssm))
/// ```
///
/// The inner width is `EXPANSION · C`. The three linear maps have no bias,
/// so zeroing their weights turns the block into the identity.
#[derive(Debug, Clone)]
pub struct VisionMambaBlock {
    pub norm: LayerNorm,
    pub gate_proj: Linear,
    pub ssm_proj: Linear,
    pub dwconv: Conv2d,
    pub ss2d: Ss2d,
    pub ssm_norm: LayerNorm,
    pub out_proj: Linear,
    pub attention: ChannelAttention,
}

impl VisionMambaBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, opts: VisionMambaOptions) -> Result<Self> {
        let inner = EXPANSION * channels;
        let mut pb = pb.child(name);
        Ok(VisionMambaBlock {
            norm: LayerNorm::new(&mut pb, "norm", channels),
            gate_proj: Linear::new(&mut pb, "gate_proj", channels, inner, false),
            ssm_proj: Linear::new(&mut pb, "ssm_proj", channels, inner, false),
            dwconv: Conv2d::new(
                &mut pb,
                "dwconv",
                inner,
                inner,
                3,
                Conv2dOptions::padded(1).with_groups(inner),
                true,
            ),
            ss2d: Ss2d::new(&mut pb, "ss2d", inner, opts.state_dim, opts.shared_directions),
            ssm_norm: LayerNorm::new(&mut pb, "ssm_norm", inner),
            out_proj: Linear::new(&mut pb, "out_proj", inner, channels, false),
            attention: ChannelAttention::new(&mut pb, "attention", channels, opts.reduction)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, h, w) = chw(&x.shape())?;
        let u = self.norm.forward(p, x.to_tokens()?)?;
        let gate = self.gate_proj.forward(p, u)?.silu()?;
        let local = self.ssm_proj.forward(p, u)?.from_tokens(h, w)?;
        let local = self.dwconv.forward(p, local)?.silu()?;
        let global = self.ss2d.forward(p, local)?.to_tokens()?;
        let global = self.ssm_norm.forward(p, global)?;
        let fused = gate.mul(global)?;
        let out = self.out_proj.forward(p, fused)?.from_tokens(h, w)?;
        x.add(self.attention.forward(p, out)?)
    }

    /// Weights of the linear maps; zeroing them collapses the block to identity.
    pub fn branch_weights(&self) -> Vec<ParamId> {
        vec![self.gate_proj.weight, self.ssm_proj.weight, self.out_proj.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, random_input, random_projection, FdOptions};
    use crate::nn::{seeded_rng, ParamStore};
    use crate::tape::Tape;
    use proptest::prelude::*;

    fn grid() -> Tensor {
        Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn direction_orders_on_2x2() {
        let seqs = scan_expand_tensor(&grid()).unwrap();
        assert_eq!(seqs.shape(), &[4, 4, 1]);
        assert_eq!(&seqs.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&seqs.data()[4..8], &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(&seqs.data()[8..12], &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(&seqs.data()[12..16], &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn merge_of_expand_is_four_x() {
        let x = random_input(&[3, 4, 5], 1);
        let merged = scan_merge_tensor(&scan_expand_tensor(&x).unwrap(), 4, 5).unwrap();
        assert_eq!(merged, x.map(|v| 4.0 * v));
    }

    #[test]
    fn merge_of_single_direction_is_identity() {
        let x = random_input(&[2, 3, 3], 2);
        let seqs = scan_expand_tensor(&x).unwrap();
        for k in 0..4 {
            let mut only = Tensor::zeros(seqs.shape().to_vec());
            let span = k * 18..(k + 1) * 18;
            only.data_mut()[span.clone()].copy_from_slice(&seqs.data()[span]);
            assert_eq!(scan_merge_tensor(&only, 3, 3).unwrap(), x);
        }
    }

    proptest! {
        #[test]
        fn orders_are_bijections(h in 1usize..7, w in 1usize..7) {
            for dir in DirectionOrder::ALL {
                let order = dir.order(h, w);
                let inv = dir.inverse(h, w);
                for (p, &pix) in order.iter().enumerate() {
                    prop_assert_eq!(inv[pix], p);
                }
            }
        }

        #[test]
        fn merge_is_linear(seed in 0u64..1000) {
            let a = random_input(&[4, 6, 2], seed);
            let b = random_input(&[4, 6, 2], seed + 1);
            let sum = a.zip_map(&b, |x, y| x + y).unwrap();
            let lhs = scan_merge_tensor(&sum, 2, 3).unwrap();
            let rhs = scan_merge_tensor(&a, 2, 3).unwrap()
                .zip_map(&scan_merge_tensor(&b, 2, 3).unwrap(), |x, y| x + y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-15);
        }
    }

    fn build<T>(f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(17);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, 1.0);
        let out = f(&mut pb);
        (store, out)
    }

    fn zero(store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            *store.get_mut(id) = Tensor::zeros(store.get(id).shape().to_vec());
        }
    }

    fn params_as_inputs(store: &ParamStore, extra: Tensor) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
        v.push(extra);
        v
    }

    #[test]
    fn ss2d_skip_collapse_is_four_x() {
        let (mut store, ss2d) = build(|pb| Ss2d::new(pb, "ss2d", 3, 4, false));
        for s in &ss2d.scans {
            zero(&mut store, [s.delta_proj.weight, s.delta_proj.bias.unwrap(), s.b_proj.weight, s.c_proj.weight]);
        }
        let x = random_input(&[3, 3, 4], 5);
        let tape = Tape::new();
        let y = ss2d.forward(&store.bind(&tape), tape.constant(x.clone())).unwrap().value();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x.map(|v| 4.0 * v)) < 1e-15);
    }

    #[test]
    fn ss2d_preserves_shape() {
        let (store, ss2d) = build(|pb| Ss2d::new(pb, "ss2d", 2, 3, true));
        for (h, w) in [(1, 1), (1, 5), (4, 1), (3, 6)] {
            let tape = Tape::new();
            let y = ss2d
                .forward(&store.bind(&tape), tape.constant(random_input(&[2, h, w], 0)))
                .unwrap();
            assert_eq!(y.shape(), vec![2, h, w]);
        }
    }

    #[test]
    fn ss2d_gradients_match_finite_differences() {
        let (store, ss2d) = build(|pb| Ss2d::new(pb, "ss2d", 4, 3, false));
        let inputs = params_as_inputs(&store, random_input(&[4, 4, 4], 3));
        let errs = gradcheck::check(
            &inputs,
            |_, v| {
                let p = Bound::from_vars(v[..v.len() - 1].to_vec());
                random_projection(ss2d.forward(&p, v[v.len() - 1])?, 4)
            },
            FdOptions { max_entries: 12, ..Default::default() },
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
    }

    #[test]
    fn ss2d_has_a_global_receptive_field() {
        let (store, ss2d) = build(|pb| Ss2d::new(pb, "ss2d", 2, 3, false));
        let x = random_input(&[2, 4, 4], 8);
        let run = |x: &Tensor| {
            let tape = Tape::new();
            (*ss2d.forward(&store.bind(&tape), tape.constant(x.clone())).unwrap().value()).clone()
        };
        let base = run(&x);
        for q in 0..16 {
            let mut bumped = x.clone();
            bumped.data_mut()[q] += 0.1;
            let y = run(&bumped);
            for p in 0..16 {
                let changed = (0..2).any(|c| (y.data()[c * 16 + p] - base.data()[c * 16 + p]).abs() > 1e-12);
                assert!(changed, "output pixel {p} ignores input pixel {q}");
            }
        }
    }

    #[test]
    fn attention_with_zero_weights_halves() {
        let (mut store, ca) = build(|pb| ChannelAttention::new(pb, "ca", 8, 4).unwrap());
        zero(&mut store, ca.params());
        let x = random_input(&[8, 3, 3], 2);
        let tape = Tape::new();
        let y = ca.forward(&store.bind(&tape), tape.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x.map(|v| v / 2.0));
    }

    #[test]
    fn attention_gate_lies_in_unit_interval() {
        let (store, ca) = build(|pb| ChannelAttention::new(pb, "ca", 8, 4).unwrap());
        for seed in 0..10 {
            let x = random_input(&[8, 2, 2], seed).map(|v| 50.0 * v);
            let tape = Tape::new();
            let s = ca.gate(&store.bind(&tape), tape.constant(x)).unwrap().value();
            assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pooled_vector_scales_with_input() {
        let x = random_input(&[4, 3, 3], 6);
        let pool = |x: Tensor| {
            let tape = Tape::new();
            (*tape.constant(x).mean_per_channel().unwrap().value()).clone()
        };
        let a = pool(x.clone());
        let b = pool(x.map(|v| 3.0 * v));
        assert!(a.map(|v| 3.0 * v).max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn attention_rejects_indivisible_channels() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, 1.0);
        assert!(matches!(ChannelAttention::new(&mut pb, "ca", 6, 4), Err(Error::Config(_))));
    }

    fn block(channels: usize) -> (ParamStore, VisionMambaBlock) {
        build(|pb| {
            VisionMambaBlock::new(
                pb,
                "vmb",
                channels,
                VisionMambaOptions { state_dim: 4, ..Default::default() },
            )
            .unwrap()
        })
    }

    #[test]
    fn zeroed_branch_is_exact_identity() {
        let (mut store, vmb) = block(8);
        zero(&mut store, vmb.branch_weights());
        let x = random_input(&[8, 4, 4], 12);
        let tape = Tape::new();
        let y = vmb.forward(&store.bind(&tape), tape.constant(x.clone())).unwrap().value();
        assert_eq!(*y, x);
    }

    #[test]
    fn block_preserves_shape() {
        let (store, vmb) = block(4);
        let tape = Tape::new();
        let y = vmb.forward(&store.bind(&tape), tape.constant(random_input(&[4, 3, 5], 1))).unwrap();
        assert_eq!(y.shape(), vec![4, 3, 5]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (store, vmb) = block(8);
        let inputs = params_as_inputs(&store, random_input(&[8, 4, 4], 13));
        let errs = gradcheck::check(
            &inputs,
            |_, v| {
                let p = Bound::from_vars(v[..v.len() - 1].to_vec());
                random_projection(vmb.forward(&p, v[v.len() - 1])?, 6)
            },
            FdOptions { max_entries: 8, ..Default::default() },
        )
        .unwrap();
        for ((_, name, _), e) in store.iter().zip(&errs) {
            assert!(*e < 1e-4, "{name}: {e}");
        }
        assert!(errs[errs.len() - 1] < 1e-4, "input: {}", errs[errs.len() - 1]);
    }
}
