//! Training losses (L1, contrastive edge loss) and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Conv2dOptions;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DEFAULT_CELOSS_WEIGHT: f64 = 0.1;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(format!("shape mismatch: {a:?} vs {b:?}")))
    }
}

/// Mean absolute difference against a fixed target.
pub fn l1_loss<'t>(sr: Var<'t>, hr: &Tensor) -> Result<Var<'t>> {
    same_shape(&sr.shape(), hr.shape())?;
    sr.sub(sr.tape().constant(hr.clone()))?.abs()?.mean()
}

/// Three fixed zero-sum 3×3 edge kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeKernelSet {
    pub kernels: [[f64; 9]; 3],
}

impl Default for EdgeKernelSet {
    fn default() -> Self {
        EdgeKernelSet {
            kernels: [
                // 4-neighbour Laplacian
                [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0],
                // diagonal Laplacian
                [-1.0, 0.0, -1.0, 0.0, 4.0, 0.0, -1.0, 0.0, -1.0],
                // 8-neighbour Laplacian
                [1.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0, 1.0],
            ],
        }
    }
}

impl EdgeKernelSet {
    pub fn as_weight(&self) -> Tensor {
        Tensor::new([3, 1, 3, 3], self.kernels.concat()).expect("3 kernels of 9 taps")
    }

    /// `Σᵢ ‖Eᵢ‖²_F`.
    pub fn energy(&self) -> f64 {
        self.kernels.iter().flatten().map(|v| v * v).sum()
    }
}

/// `Σᵢ ‖Eᵢ ⊛ SR − Eᵢ ⊛ HR‖²`, optionally divided by the pixel count. Borders
/// are edge-replicated so every response of a constant image is zero.
pub fn celoss<'t>(sr: Var<'t>, hr: &Tensor, kernels: &EdgeKernelSet, normalized: bool) -> Result<Var<'t>> {
    same_shape(&sr.shape(), hr.shape())?;
    if sr.shape().len() != 3 || sr.shape()[0] != 1 {
        return Err(Error::dim(format!("celoss expects a [1,H,W] image, got {:?}", sr.shape())));
    }
    let tape = sr.tape();
    let diff = sr.sub(tape.constant(hr.clone()))?;
    let responses = diff
        .pad_replicate(1)?
        .conv2d(tape.constant(kernels.as_weight()), None, Conv2dOptions::default())?;
    let energy = responses.square()?.sum()?;
    if normalized {
        energy.scale(1.0 / hr.numel() as f64)
    } else {
        Ok(energy)
    }
}

pub struct LossTerms<'t> {
    pub l1: Var<'t>,
    pub celoss: Var<'t>,
    pub total: Var<'t>,
}

/// `L1 + β·CELoss`. CELoss is always evaluated so it can be logged.
pub fn total_loss<'t>(sr: Var<'t>, hr: &Tensor, beta: f64, normalized: bool) -> Result<LossTerms<'t>> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("β must be non-negative, got {beta}")));
    }
    let l1 = l1_loss(sr, hr)?;
    let ce = celoss(sr, hr, &EdgeKernelSet::default(), normalized)?;
    let total = if beta == 0.0 { l1 } else { l1.add(ce.scale(beta)?)? };
    Ok(LossTerms { l1, celoss: ce, total })
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// PSNR in dB; identical images give `+∞`.
pub fn psnr(sr: &Tensor, hr: &Tensor, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    Ok(psnr_from_mse(mse(sr, hr)?, data_range))
}

/// PSNR with `+∞` replaced by [`PSNR_CAP_DB`], for tables.
pub fn psnr_capped(sr: &Tensor, hr: &Tensor, data_range: f64) -> Result<f64> {
    Ok(psnr(sr, hr, data_range)?.min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

fn plane(x: &Tensor) -> Result<(usize, usize, &[f64])> {
    match *x.shape() {
        [h, w] | [1, h, w] => Ok((h, w, x.data())),
        _ => Err(Error::dim(format!("expected a single-channel image, got {:?}", x.shape()))),
    }
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5).
pub fn ssim(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let (h, w, xa) = plane(a)?;
    let xb = b.data();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, gu) in g.iter().enumerate() {
                for (v, gv) in g.iter().enumerate() {
                    let wt = gu * gv;
                    let k = (i + u) * w + j + v;
                    let (p, q) = (xa[k], xb[k]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `|sr − hr|` scaled so the largest difference is 1. Zero means no
/// difference and is exported as black.
pub fn error_map(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    let diff = sr.zip_map(hr, |a, b| (a - b).abs())?;
    let peak = diff.max_abs();
    Ok(if peak > 0.0 { diff.map(|v| v / peak) } else { diff })
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}
