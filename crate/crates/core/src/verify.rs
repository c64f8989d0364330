//! Registry of finite-difference gradient checks, grouped by module.
//!
//! Every check projects the op output onto fixed random weights and compares
//! the analytic gradient of every input (parameters included) against
//! central differences. Large inputs are checked on a random subset of
//! coordinates.

use std::fmt;

use crate::deform::{ModulatedDeformBlock, TAPS};
use crate::error::{Error, Result};
use crate::gradcheck::{self, random_input, random_input_away_from_zero, random_projection, FdOptions, FD_TOLERANCE};
use crate::loss::{celoss, l1_loss, total_loss, EdgeKernelSet};
use crate::model::{
    DeformMambaModule, DeformMambaNet, ModelConfig, MultiViewContext, PatchEmbed, PatchExpanding, PatchMerging,
    PixelShuffleUpsample,
};
use crate::nn::{seeded_rng, Bound, ParamBuilder, ParamStore};
use crate::ops::Conv2dOptions;
use crate::ss2d::{ChannelAttention, Ss2d, VisionMambaBlock, VisionMambaOptions};
use crate::ssm::{selective_scan, SelectiveScan};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Modules checked by `check-grad all`.
pub const MODULES: [&str; 6] = [
    "tensor-autodiff-core",
    "ssm-scan",
    "ss2d-vmamba",
    "deform-block",
    "network-assembly",
    "loss-metrics",
];

/// Registered but not part of [`MODULES`]: one op whose backward rule is
/// deliberately wrong, to show the harness notices.
pub const CORRUPTED_FIXTURE: &str = "corrupted-fixture";

type CheckFn = fn() -> Result<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    /// Worst relative error over all inputs of the op.
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub module: String,
    pub ops: Vec<OpReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.ops.iter().map(|o| o.op.len()).max().unwrap_or(0);
        writeln!(f, "{}", self.module)?;
        for o in &self.ops {
            let mark = if o.passed() { "ok" } else { "FAIL" };
            writeln!(f, "  {:<width$}  {:.3e}  {mark}", o.op, o.max_rel_error)?;
        }
        Ok(())
    }
}

fn checks(module: &str) -> Option<Vec<(&'static str, CheckFn)>> {
    let list: Vec<(&'static str, CheckFn)> = match module {
        "tensor-autodiff-core" => vec![
            ("add", core_add),
            ("sub", core_sub),
            ("mul", core_mul),
            ("scale", core_scale),
            ("add_scalar", core_add_scalar),
            ("neg", core_neg),
            ("exp", core_exp),
            ("log", core_log),
            ("sigmoid", core_sigmoid),
            ("silu", core_silu),
            ("softplus", core_softplus),
            ("relu", core_relu),
            ("abs", core_abs),
            ("square", core_square),
            ("clamp", core_clamp),
            ("sum", core_sum),
            ("mean", core_mean),
            ("mean_per_channel", core_mean_per_channel),
            ("add_bias_last", core_add_bias_last),
            ("scale_channels", core_scale_channels),
            ("matmul", core_matmul),
            ("transpose", core_transpose),
            ("layer_norm", core_layer_norm),
            ("reshape", core_reshape),
            ("narrow", core_narrow),
            ("concat", core_concat),
            ("pixel_shuffle", core_pixel_shuffle),
            ("pixel_unshuffle", core_pixel_unshuffle),
            ("pad_replicate", core_pad_replicate),
            ("to_tokens", core_to_tokens),
            ("from_tokens", core_from_tokens),
            ("conv2d", core_conv2d),
            ("conv2d strided", core_conv2d_strided),
            ("conv2d dilated", core_conv2d_dilated),
            ("conv2d grouped", core_conv2d_grouped),
            ("conv2d batched", core_conv2d_batched),
        ],
        "ssm-scan" => vec![
            ("selective_scan", ssm_selective_scan),
            ("selective_scan tiny timescale", ssm_selective_scan_small_delta),
            ("s6 layer", ssm_layer),
        ],
        "ss2d-vmamba" => vec![
            ("scan_expand", ss2d_expand),
            ("scan_merge", ss2d_merge),
            ("ss2d", ss2d_full),
            ("ss2d shared directions", ss2d_shared),
            ("channel_attention", ss2d_attention),
            ("vision_mamba_block", ss2d_block),
        ],
        "deform-block" => vec![
            ("modulated_deform_conv", deform_op),
            ("modulated_deform_conv large offsets", deform_op_large),
            ("deform block", deform_block),
        ],
        "network-assembly" => vec![
            ("pixel_shuffle_upsample", net_upsample),
            ("patch_embed", net_patch_embed),
            ("patch_merging", net_patch_merging),
            ("patch_expanding", net_patch_expanding),
            ("multi_view_context", net_mvc),
            ("deform_mamba_module", net_dm_module),
            ("deform_mamba_net", net_full),
        ],
        "loss-metrics" => vec![
            ("l1_loss", loss_l1),
            ("celoss", loss_ce),
            ("celoss unnormalized", loss_ce_raw),
            ("total_loss", loss_total),
        ],
        CORRUPTED_FIXTURE => vec![("square with wrong backward", corrupted_square)],
        _ => return None,
    };
    Some(list)
}

/// Runs every check of `module`. Unknown names are a config error.
pub fn check_module(module: &str) -> Result<GradReport> {
    let list = checks(module).ok_or_else(|| {
        Error::Config(format!(
            "unknown module {module:?}; expected one of {}",
            MODULES.join(", ")
        ))
    })?;
    let mut ops = Vec::with_capacity(list.len());
    for (op, run) in list {
        let errs = run()?;
        // NaN must not slip through as a pass
        let max_rel_error = errs
            .iter()
            .fold(0.0, |m: f64, e| if e.is_nan() { f64::INFINITY } else { m.max(*e) });
        ops.push(OpReport { op, max_rel_error });
    }
    Ok(GradReport {
        module: module.to_string(),
        ops,
    })
}

pub fn check_all() -> Result<Vec<GradReport>> {
    MODULES.iter().map(|m| check_module(m)).collect()
}

const FULL: FdOptions = FdOptions {
    step: gradcheck::FD_STEP,
    max_entries: usize::MAX,
    seed: 0,
};

fn sampled(max_entries: usize) -> FdOptions {
    FdOptions { max_entries, ..FULL }
}

fn unary(x: Tensor, f: for<'t> fn(Var<'t>) -> Result<Var<'t>>) -> Result<Vec<f64>> {
    gradcheck::check(&[x], |_, v| random_projection(f(v[0])?, 1), FULL)
}

fn binary(a: Tensor, b: Tensor, f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<Vec<f64>> {
    gradcheck::check(&[a, b], |_, v| random_projection(f(v[0], v[1])?, 2), FULL)
}

fn x(shape: &[usize]) -> Tensor {
    random_input(shape, 11)
}

fn y(shape: &[usize]) -> Tensor {
    random_input(shape, 12)
}

fn core_add() -> Result<Vec<f64>> {
    binary(x(&[3, 4]), y(&[3, 4]), |a, b| a.add(b))
}
fn core_sub() -> Result<Vec<f64>> {
    binary(x(&[3, 4]), y(&[3, 4]), |a, b| a.sub(b))
}
fn core_mul() -> Result<Vec<f64>> {
    binary(x(&[3, 4]), y(&[3, 4]), |a, b| a.mul(b))
}
fn core_scale() -> Result<Vec<f64>> {
    unary(x(&[5]), |a| a.scale(-2.5))
}
fn core_add_scalar() -> Result<Vec<f64>> {
    unary(x(&[5]), |a| a.add_scalar(0.7))
}
fn core_neg() -> Result<Vec<f64>> {
    unary(x(&[5]), |a| a.neg())
}
fn core_exp() -> Result<Vec<f64>> {
    unary(x(&[2, 3]), |a| a.exp())
}
fn core_log() -> Result<Vec<f64>> {
    unary(x(&[2, 3]).map(|v| v.abs() + 0.2), |a| a.log())
}
fn core_sigmoid() -> Result<Vec<f64>> {
    unary(x(&[2, 3]).map(|v| 4.0 * v), |a| a.sigmoid())
}
fn core_silu() -> Result<Vec<f64>> {
    unary(x(&[2, 3]).map(|v| 4.0 * v), |a| a.silu())
}
fn core_softplus() -> Result<Vec<f64>> {
    unary(x(&[2, 3]).map(|v| 4.0 * v), |a| a.softplus())
}
fn core_relu() -> Result<Vec<f64>> {
    unary(random_input_away_from_zero(&[2, 3], 11, 0.05), |a| a.relu())
}
fn core_abs() -> Result<Vec<f64>> {
    unary(random_input_away_from_zero(&[2, 3], 11, 0.05), |a| a.abs())
}
fn core_square() -> Result<Vec<f64>> {
    unary(x(&[2, 3]), |a| a.square())
}
fn core_clamp() -> Result<Vec<f64>> {
    // keep clear of the bounds at ±0.5
    let t = x(&[4, 4]).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v });
    unary(t, |a| a.clamp(-0.5, 0.5))
}
fn core_sum() -> Result<Vec<f64>> {
    gradcheck::check(&[x(&[3, 2])], |_, v| v[0].square()?.sum(), FULL)
}
fn core_mean() -> Result<Vec<f64>> {
    gradcheck::check(&[x(&[3, 2])], |_, v| v[0].square()?.mean(), FULL)
}
fn core_mean_per_channel() -> Result<Vec<f64>> {
    unary(x(&[3, 2, 4]), |a| a.mean_per_channel())
}
fn core_add_bias_last() -> Result<Vec<f64>> {
    binary(x(&[4, 3]), y(&[3]), |a, b| a.add_bias_last(b))
}
fn core_scale_channels() -> Result<Vec<f64>> {
    binary(x(&[3, 2, 2]), y(&[3]), |a, b| a.scale_channels(b))
}
fn core_matmul() -> Result<Vec<f64>> {
    binary(x(&[3, 4]), y(&[4, 2]), |a, b| a.matmul(b))
}
fn core_transpose() -> Result<Vec<f64>> {
    unary(x(&[3, 4]), |a| a.transpose())
}
fn core_layer_norm() -> Result<Vec<f64>> {
    gradcheck::check(
        &[x(&[4, 5]), y(&[5]), random_input(&[5], 13)],
        |_, v| random_projection(v[0].layer_norm(v[1], v[2], 1e-5)?, 3),
        FULL,
    )
}
fn core_reshape() -> Result<Vec<f64>> {
    unary(x(&[2, 6]), |a| a.reshape([3, 4]))
}
fn core_narrow() -> Result<Vec<f64>> {
    unary(x(&[5, 2]), |a| a.narrow(1, 3))
}
fn core_concat() -> Result<Vec<f64>> {
    binary(x(&[2, 3, 2]), y(&[1, 3, 2]), |a, b| Var::concat(&[a, b]))
}
fn core_pixel_shuffle() -> Result<Vec<f64>> {
    unary(x(&[8, 2, 3]), |a| a.pixel_shuffle(2))
}
fn core_pixel_unshuffle() -> Result<Vec<f64>> {
    unary(x(&[2, 4, 6]), |a| a.pixel_unshuffle(2))
}
fn core_pad_replicate() -> Result<Vec<f64>> {
    unary(x(&[2, 3, 4]), |a| a.pad_replicate(2))
}
fn core_to_tokens() -> Result<Vec<f64>> {
    unary(x(&[3, 2, 4]), |a| a.to_tokens())
}
fn core_from_tokens() -> Result<Vec<f64>> {
    unary(x(&[8, 3]), |a| a.from_tokens(2, 4))
}

fn conv_check(xs: &[usize], ws: &[usize], opts: Conv2dOptions) -> Result<Vec<f64>> {
    let bias = random_input(&[ws[0]], 14);
    gradcheck::check(
        &[x(xs), y(ws), bias],
        move |_, v| random_projection(v[0].conv2d(v[1], Some(v[2]), opts)?, 4),
        FULL,
    )
}
fn core_conv2d() -> Result<Vec<f64>> {
    conv_check(&[2, 5, 4], &[3, 2, 3, 3], Conv2dOptions::padded(1))
}
fn core_conv2d_strided() -> Result<Vec<f64>> {
    conv_check(&[2, 6, 5], &[2, 2, 3, 3], Conv2dOptions::padded(1).with_stride(2))
}
fn core_conv2d_dilated() -> Result<Vec<f64>> {
    conv_check(&[2, 6, 6], &[2, 2, 3, 3], Conv2dOptions::padded(2).with_dilation(2))
}
fn core_conv2d_grouped() -> Result<Vec<f64>> {
    conv_check(&[4, 4, 4], &[4, 1, 3, 3], Conv2dOptions::padded(1).with_groups(4))
}
fn core_conv2d_batched() -> Result<Vec<f64>> {
    conv_check(&[2, 2, 4, 3], &[3, 2, 1, 1], Conv2dOptions::default())
}

fn scan_inputs(l: usize, d: usize, n: usize, delta_scale: f64) -> Vec<Tensor> {
    vec![
        x(&[l, d]),
        random_input(&[l, d], 21).map(|v| delta_scale * (v.abs() + 0.1)),
        random_input(&[d, n], 22).map(|v| -(v.abs() + 0.2)),
        random_input(&[l, n], 23),
        random_input(&[l, n], 24),
        random_input(&[d], 25),
    ]
}
fn ssm_selective_scan() -> Result<Vec<f64>> {
    gradcheck::check(
        &scan_inputs(6, 3, 4, 1.0),
        |_, v| random_projection(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?, 5),
        FULL,
    )
}
fn ssm_selective_scan_small_delta() -> Result<Vec<f64>> {
    // ΔA around 1e-3 keeps the series branch of B̄ out of reach of the
    // ±h probe while exercising the near-zero regime
    gradcheck::check(
        &scan_inputs(5, 2, 3, 1e-3),
        |_, v| random_projection(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?, 5),
        FULL,
    )
}

/// A module under test with every parameter drawn uniformly from `[-1, 1]`.
///
/// Checking at the initial values instead would be badly conditioned: the
/// timescale starts near 1e-3, where the loss barely depends on `A` and the
/// central difference drowns in rounding noise. Random values also move the
/// deformable offsets off the integer grid, where bilinear sampling has kinks.
fn build<T>(f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(31);
    let module = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, 1.0);
        f(&mut pb)?
    };
    randomize(&mut store);
    Ok((store, module))
}

fn randomize(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let t = store.get_mut(id);
        *t = random_input(t.shape(), 100 + k as u64);
    }
}

/// Checks gradients of the module input and every parameter. The input is
/// the last entry of the error vector.
fn module_check<M>(
    store: &ParamStore,
    module: &M,
    input: Tensor,
    opts: FdOptions,
    forward: for<'t> fn(&M, &Bound<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<Vec<f64>> {
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.push(input);
    gradcheck::check(
        &inputs,
        |_, v| {
            let p = Bound::from_vars(v[..v.len() - 1].to_vec());
            random_projection(forward(module, &p, v[v.len() - 1])?, 6)
        },
        opts,
    )
}

fn ssm_layer() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(SelectiveScan::new(pb, "s6", 3, 4)))?;
    module_check(&store, &m, x(&[7, 3]), FULL, |m, p, v| m.forward(p, v))
}

fn ss2d_expand() -> Result<Vec<f64>> {
    unary(x(&[2, 3, 4]), |a| a.scan_expand())
}
fn ss2d_merge() -> Result<Vec<f64>> {
    gradcheck::check(&[x(&[4, 12, 2])], |_, v| random_projection(v[0].scan_merge(3, 4)?, 7), FULL)
}
fn ss2d_full() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(Ss2d::new(pb, "ss2d", 2, 3, false)))?;
    module_check(&store, &m, x(&[2, 3, 3]), sampled(16), |m, p, v| m.forward(p, v))
}
fn ss2d_shared() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(Ss2d::new(pb, "ss2d", 2, 3, true)))?;
    module_check(&store, &m, x(&[2, 3, 3]), sampled(16), |m, p, v| m.forward(p, v))
}
fn ss2d_attention() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| ChannelAttention::new(pb, "ca", 8, 4))?;
    module_check(&store, &m, x(&[8, 3, 3]), FULL, |m, p, v| m.forward(p, v))
}
fn ss2d_block() -> Result<Vec<f64>> {
    let opts = VisionMambaOptions {
        state_dim: 3,
        ..Default::default()
    };
    let (store, m) = build(|pb| VisionMambaBlock::new(pb, "vmb", 8, opts))?;
    module_check(&store, &m, x(&[8, 4, 4]), sampled(8), |m, p, v| m.forward(p, v))
}

fn deform_inputs(offset_scale: f64) -> Vec<Tensor> {
    vec![
        x(&[2, 5, 5]),
        y(&[3, 2, 3, 3]),
        random_input(&[2 * TAPS, 5, 5], 41).map(|v| offset_scale * v),
        random_input(&[TAPS, 5, 5], 42).map(|v| 0.5 + 0.5 * v),
    ]
}
fn deform_op() -> Result<Vec<f64>> {
    gradcheck::check(
        &deform_inputs(0.9),
        |_, v| random_projection(v[0].modulated_deform_conv(v[1], v[2], v[3])?, 8),
        FULL,
    )
}
fn deform_op_large() -> Result<Vec<f64>> {
    // many taps land partly or wholly outside the zero border
    gradcheck::check(
        &deform_inputs(3.7),
        |_, v| random_projection(v[0].modulated_deform_conv(v[1], v[2], v[3])?, 8),
        FULL,
    )
}
fn deform_block() -> Result<Vec<f64>> {
    // offset and mask conv parameters are part of the checked inputs
    let (store, m) = build(|pb| Ok(ModulatedDeformBlock::new(pb, "deform", 3, 8.0)))?;
    module_check(&store, &m, x(&[3, 5, 5]), sampled(24), |m, p, v| m.forward(p, v))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: vec![6, 6, 6, 6],
        state_dim: 2,
        ..ModelConfig::tiny()
    }
}
fn net_upsample() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(PixelShuffleUpsample::new(pb, "up", 1, 2)))?;
    module_check(&store, &m, x(&[1, 3, 4]), FULL, |m, p, v| m.forward(p, v))
}
fn net_patch_embed() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(PatchEmbed::new(pb, "embed", 1, 3, 2)))?;
    module_check(&store, &m, x(&[1, 4, 6]), FULL, |m, p, v| m.forward(p, v))
}
fn net_patch_merging() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(PatchMerging::new(pb, "merge", 2, 3)))?;
    module_check(&store, &m, x(&[2, 4, 4]), FULL, |m, p, v| m.forward(p, v))
}
fn net_patch_expanding() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| Ok(PatchExpanding::new(pb, "expand", 3, 2)))?;
    module_check(&store, &m, x(&[3, 2, 3]), FULL, |m, p, v| m.forward(p, v))
}
fn net_mvc() -> Result<Vec<f64>> {
    let (store, m) = build(|pb| MultiViewContext::new(pb, "mvc", 6, &[1, 2, 4]))?;
    module_check(&store, &m, x(&[6, 5, 5]), sampled(24), |m, p, v| m.forward(p, v))
}
fn net_dm_module() -> Result<Vec<f64>> {
    let cfg = ModelConfig {
        channels: vec![8, 8, 8, 8],
        ..tiny_config()
    };
    let (store, m) = build(|pb| DeformMambaModule::new(pb, "dm", 8, &cfg))?;
    module_check(&store, &m, x(&[8, 4, 4]), sampled(6), |m, p, v| m.forward(p, v))
}
fn net_full() -> Result<Vec<f64>> {
    let cfg = ModelConfig {
        channels: vec![4, 4, 4, 12],
        ..tiny_config()
    };
    let (net, mut store) = DeformMambaNet::new(&cfg, 5)?;
    randomize(&mut store);
    let lr = random_input(&[1, 8, 8], 51).map(|v| 0.5 + 0.4 * v);
    module_check(&store, &net, lr, sampled(3), |m, p, v| m.forward(p, v))
}

fn hr() -> Tensor {
    random_input(&[1, 6, 6], 61).map(|v| 0.5 + 0.5 * v)
}
fn sr() -> Tensor {
    // kept well away from hr so the L1 kink is never crossed
    let h = hr();
    let d = random_input_away_from_zero(&[1, 6, 6], 62, 0.05);
    h.zip_map(&d, |a, b| a + 0.3 * b).expect("same shape")
}
fn loss_l1() -> Result<Vec<f64>> {
    let h = hr();
    gradcheck::check(&[sr()], move |_, v| l1_loss(v[0], &h), FULL)
}
fn loss_ce() -> Result<Vec<f64>> {
    let (h, k) = (hr(), EdgeKernelSet::default());
    gradcheck::check(&[sr()], move |_, v| celoss(v[0], &h, &k, true), FULL)
}
fn loss_ce_raw() -> Result<Vec<f64>> {
    let (h, k) = (hr(), EdgeKernelSet::default());
    gradcheck::check(&[sr()], move |_, v| celoss(v[0], &h, &k, false), FULL)
}
fn loss_total() -> Result<Vec<f64>> {
    let h = hr();
    gradcheck::check(&[sr()], move |_, v| Ok(total_loss(v[0], &h, 0.1, true)?.total), FULL)
}

/// `x²` recorded with the backward rule `g·x` instead of `2g·x`.
fn corrupted_square() -> Result<Vec<f64>> {
    fn bad_square<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        let out = xv.map(|v| v * v);
        tape.record("bad_square", out, &[x], move |g| vec![g.zip_map(&xv, |g, x| g * x).expect("same shape")])
    }
    gradcheck::check(&[x(&[3, 3])], |t, v| random_projection(bad_square(t, v[0])?, 9), FULL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_a_config_error() {
        let err = check_module("no-such-module").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("ssm-scan")), "{err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = check_module(CORRUPTED_FIXTURE).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.1, "{report}");
    }

    #[test]
    fn fixture_is_not_part_of_the_full_sweep() {
        assert!(!MODULES.contains(&CORRUPTED_FIXTURE));
    }

    #[test]
    fn ssm_scan_passes() {
        let report = check_module("ssm-scan").unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn deform_check_covers_offsets_and_mask() {
        // x, weight, offsets, mask
        let errs = deform_op().unwrap();
        assert_eq!(errs.len(), 4);
        assert!(errs.iter().all(|e| *e < FD_TOLERANCE), "{errs:?}");
        assert!(check_module("deform-block").unwrap().passed());
    }

    #[test]
    fn report_lists_every_op() {
        let report = check_module("loss-metrics").unwrap();
        let text = report.to_string();
        for op in ["l1_loss", "celoss", "total_loss"] {
            assert!(text.contains(op), "{text}");
        }
    }
}
