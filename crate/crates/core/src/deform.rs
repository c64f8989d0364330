//! Modulated deformable 3×3 convolution and the deform block built on it.
//!
//! Offsets are shared across input channels: `2K = 18` offset channels and
//! `K = 9` mask channels per output position. Offset channel `2k` shifts tap
//! `k` horizontally (x) and `2k + 1` shifts it vertically (y). Taps are
//! numbered row-major over `{-1, 0, 1}²`, matching the weight layout
//! `w[f, c, ky, kx]`.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamBuilder, ParamId};
use crate::ops::{matmul_raw, transpose_raw, Conv2dOptions};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const TAPS: usize = 9;
pub const DEFAULT_MAX_OFFSET: f64 = 8.0;

/// Bilinear interpolation of every channel at fractional `(y, x)`.
/// Neighbours outside the image contribute zero.
pub fn bilinear_sample(x: &Tensor, y: f64, xq: f64) -> Result<Vec<f64>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim(format!("bilinear_sample expects [C,H,W], got {:?}", x.shape())));
    };
    let tap = Bilinear::new(y, xq, h, w);
    Ok((0..c)
        .map(|ch| tap.sample(&x.data()[ch * h * w..(ch + 1) * h * w]))
        .collect())
}

/// The four neighbours of a fractional position, their weights, and the
/// weights' derivatives with respect to `y` and `x`.
#[derive(Debug, Clone, Copy)]
struct Bilinear {
    idx: [usize; 4],
    valid: [bool; 4],
    wt: [f64; 4],
    dy: [f64; 4],
    dx: [f64; 4],
}

impl Bilinear {
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let corners = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
        let mut idx = [0; 4];
        let mut valid = [false; 4];
        for (n, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64 {
                valid[n] = true;
                idx[n] = cy as usize * w + cx as usize;
            }
        }
        Bilinear {
            idx,
            valid,
            wt: [hy * hx, hy * lx, ly * hx, ly * lx],
            dy: [-hx, -lx, hx, lx],
            dx: [-hy, hy, -ly, ly],
        }
    }

    fn combine(&self, plane: &[f64], coef: &[f64; 4]) -> f64 {
        (0..4)
            .filter(|&n| self.valid[n])
            .map(|n| coef[n] * plane[self.idx[n]])
            .sum()
    }

    fn sample(&self, plane: &[f64]) -> f64 {
        self.combine(plane, &self.wt)
    }
}

fn check_shapes(x: &[usize], w: &[usize], offsets: &[usize], mask: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let &[c, h, wd] = x else {
        return Err(Error::dim(format!("deform conv input must be [C,H,W], got {x:?}")));
    };
    let &[f, wc, 3, 3] = w else {
        return Err(Error::dim(format!("deform conv weight must be [F,C,3,3], got {w:?}")));
    };
    if wc != c {
        return Err(Error::dim(format!("deform conv weight has {wc} input channels, input has {c}")));
    }
    if offsets != [2 * TAPS, h, wd] {
        return Err(Error::dim(format!("offsets must be [18,{h},{wd}], got {offsets:?}")));
    }
    if mask != [TAPS, h, wd] {
        return Err(Error::dim(format!("mask must be [9,{h},{wd}], got {mask:?}")));
    }
    Ok((c, h, wd, f))
}

/// Per-(tap, pixel) bilinear stencils for a given offset field.
fn stencils(offsets: &Tensor, h: usize, w: usize) -> Vec<Bilinear> {
    let hw = h * w;
    let off = offsets.data();
    let mut out = Vec::with_capacity(TAPS * hw);
    for k in 0..TAPS {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                let dx = off[(2 * k) * hw + pix];
                let dy = off[(2 * k + 1) * hw + pix];
                out.push(Bilinear::new(i as f64 + ky + dy, j as f64 + kx + dx, h, w));
            }
        }
    }
    out
}

/// Unmodulated samples `S[c·K + k, pix]`.
fn sample_columns(x: &Tensor, taps: &[Bilinear], c: usize, hw: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * TAPS * hw];
    for ch in 0..c {
        let plane = &x.data()[ch * hw..(ch + 1) * hw];
        for (t, tap) in taps.iter().enumerate() {
            cols[ch * TAPS * hw + t] = tap.sample(plane);
        }
    }
    cols
}

/// Plain-tensor forward, `Y(p) = Σ_k w_k · X(p + p_k + Δp_k) · Δm_k`.
pub fn modulated_deform_conv_tensor(x: &Tensor, w: &Tensor, offsets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, wd, f) = check_shapes(x.shape(), w.shape(), offsets.shape(), mask.shape())?;
    let hw = h * wd;
    let taps = stencils(offsets, h, wd);
    let mut cols = sample_columns(x, &taps, c, hw);
    modulate(&mut cols, mask.data(), c, hw);
    Tensor::new([f, h, wd], matmul_raw(w.data(), &cols, f, c * TAPS, hw))
}

fn modulate(cols: &mut [f64], mask: &[f64], c: usize, hw: usize) {
    for ch in 0..c {
        let block = &mut cols[ch * TAPS * hw..(ch + 1) * TAPS * hw];
        for (v, m) in block.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

impl<'t> Var<'t> {
    /// Modulated deformable 3×3 convolution, stride 1, no bias.
    /// `offsets` is `[18, H, W]`, `mask` is `[9, H, W]`.
    pub fn modulated_deform_conv(self, w: Var<'t>, offsets: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
        let (xv, wv, ov, mv) = (self.value(), w.value(), offsets.value(), mask.value());
        let (c, h, wd, f) = check_shapes(xv.shape(), wv.shape(), ov.shape(), mv.shape())?;
        let hw = h * wd;
        let ck = c * TAPS;
        let taps = stencils(&ov, h, wd);
        let samples = sample_columns(&xv, &taps, c, hw);
        let mut cols = samples.clone();
        modulate(&mut cols, mv.data(), c, hw);
        let out = Tensor::new([f, h, wd], matmul_raw(wv.data(), &cols, f, ck, hw))?;

        self.tape().record("modulated_deform_conv", out, &[self, w, offsets, mask], move |g| {
            let g = g.data();
            let dw = matmul_raw(g, &transpose_raw(&cols, ck, hw), f, hw, ck);
            let dcols = matmul_raw(&transpose_raw(wv.data(), f, ck), g, ck, f, hw);
            let m = mv.data();
            let mut dx = vec![0.0; c * hw];
            let mut doff = vec![0.0; 2 * TAPS * hw];
            let mut dmask = vec![0.0; TAPS * hw];
            for ch in 0..c {
                let plane = &xv.data()[ch * hw..(ch + 1) * hw];
                let dplane = &mut dx[ch * hw..(ch + 1) * hw];
                for (t, tap) in taps.iter().enumerate() {
                    let dc = dcols[ch * TAPS * hw + t];
                    if dc == 0.0 {
                        continue;
                    }
                    dmask[t] += dc * samples[ch * TAPS * hw + t];
                    let ds = dc * m[t];
                    for n in 0..4 {
                        if tap.valid[n] {
                            dplane[tap.idx[n]] += ds * tap.wt[n];
                        }
                    }
                    let (k, pix) = (t / hw, t % hw);
                    doff[(2 * k) * hw + pix] += ds * tap.combine(plane, &tap.dx);
                    doff[(2 * k + 1) * hw + pix] += ds * tap.combine(plane, &tap.dy);
                }
            }
            vec![
                Tensor::new([c, h, wd], dx).unwrap(),
                Tensor::new([f, c, 3, 3], dw).unwrap(),
                Tensor::new([2 * TAPS, h, wd], doff).unwrap(),
                Tensor::new([TAPS, h, wd], dmask).unwrap(),
            ]
        })
    }
}

/// Offsets `[18, H, W]` (clamped) and mask `[9, H, W]` in `(0, 1)`.
#[derive(Clone, Copy)]
pub struct DeformField<'t> {
    pub offsets: Var<'t>,
    pub mask: Var<'t>,
}

/// `x + silu(mdconv(x, w, predict(x)))`, channel-preserving.
#[derive(Debug, Clone)]
pub struct ModulatedDeformBlock {
    pub offset_conv: Conv2d,
    pub mask_conv: Conv2d,
    pub weight: ParamId,
    pub max_offset: f64,
}

impl ModulatedDeformBlock {
    /// Offset and mask convolutions start at zero, so the block initially
    /// samples the regular grid with mask 0.5.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, max_offset: f64) -> Self {
        let mut pb = pb.child(name);
        let opts = Conv2dOptions::padded(1);
        let offset_conv = Conv2d {
            weight: pb.zeros("offset_conv.weight", &[2 * TAPS, channels, 3, 3]),
            bias: Some(pb.zeros("offset_conv.bias", &[2 * TAPS])),
            opts,
        };
        let mask_conv = Conv2d {
            weight: pb.zeros("mask_conv.weight", &[TAPS, channels, 3, 3]),
            bias: Some(pb.zeros("mask_conv.bias", &[TAPS])),
            opts,
        };
        let weight = pb.uniform("weight", &[channels, channels, 3, 3], channels * TAPS);
        ModulatedDeformBlock { offset_conv, mask_conv, weight, max_offset }
    }

    pub fn predict_deform<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<DeformField<'t>> {
        let offsets = self
            .offset_conv
            .forward(p, x)?
            .clamp(-self.max_offset, self.max_offset)?;
        let mask = self.mask_conv.forward(p, x)?.sigmoid()?;
        Ok(DeformField { offsets, mask })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let field = self.predict_deform(p, x)?;
        let y = x.modulated_deform_conv(p.get(self.weight), field.offsets, field.mask)?;
        x.add(y.silu()?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.offset_conv.params();
        v.extend(self.mask_conv.params());
        v.push(self.weight);
        v
    }
}
