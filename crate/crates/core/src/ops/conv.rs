//! Direct 2D cross-correlation (no kernel flip) with zero padding.

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn padded(padding: usize) -> Self {
        Conv2dOptions {
            padding,
            ..Default::default()
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: Conv2dOptions,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], opts: Conv2dOptions) -> Result<Self> {
        let (c, h, w) = match *x {
            [c, h, w] | [_, c, h, w] => (c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be [C,H,W] or [N,C,H,W], got {x:?}"))),
        };
        let &[f, cg, kh, kw] = wt else {
            return Err(Error::dim(format!("conv2d weight must be [F,C/g,kh,kw], got {wt:?}")));
        };
        if opts.stride == 0 || opts.dilation == 0 || opts.groups == 0 {
            return Err(Error::dim("conv2d stride, dilation and groups must be >= 1"));
        }
        if c % opts.groups != 0 || f % opts.groups != 0 || cg != c / opts.groups {
            return Err(Error::dim(format!(
                "conv2d: {c} input channels, {f} filters of depth {cg}, groups {}",
                opts.groups
            )));
        }
        let extent = |n: usize, k: usize| -> Result<usize> {
            let span = opts.dilation * (k - 1) + 1;
            let padded = n + 2 * opts.padding;
            if k == 0 || padded < span {
                return Err(Error::dim(format!(
                    "conv2d: non-positive output extent (input {n}, kernel {k}, padding {}, dilation {})",
                    opts.padding, opts.dilation
                )));
            }
            Ok((padded - span) / opts.stride + 1)
        };
        Ok(Geometry {
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh: extent(h, kh)?,
            ow: extent(w, kw)?,
            opts,
        })
    }

    /// Output positions `o` along one axis for which `o·stride + k·dil − pad`
    /// lands inside `0..n`.
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let Conv2dOptions {
            stride,
            padding,
            dilation,
            ..
        } = self.opts;
        let shift = k * dilation;
        // o·stride + shift >= padding
        let lo = if shift >= padding {
            0
        } else {
            (padding - shift).div_ceil(stride)
        };
        // o·stride + shift - padding <= n - 1
        let hi = if n + padding < shift + 1 {
            0
        } else {
            ((n + padding - shift - 1) / stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }

    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        // visit(filter, input_channel, weight_offset, ky, kx, group_channel)
        let cg = self.c / self.opts.groups;
        let fg = self.f / self.opts.groups;
        for f in 0..self.f {
            let g = f / fg;
            for ci in 0..cg {
                let c = g * cg + ci;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let woff = ((f * cg + ci) * self.kh + ky) * self.kw + kx;
                        visit(f, c, woff, ky, kx, ci);
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (oh, ow, h, w) = (self.oh, self.ow, self.h, self.w);
        let Conv2dOptions {
            stride,
            padding,
            dilation,
            ..
        } = self.opts;
        let mut out = vec![0.0; self.f * oh * ow];
        if let Some(b) = bias {
            for (plane, bf) in out.chunks_mut(oh * ow).zip(b) {
                plane.iter_mut().for_each(|v| *v = *bf);
            }
        }
        self.for_each_tap(|f, c, woff, ky, kx, _| {
            let wv = wt[woff];
            if wv == 0.0 {
                return;
            }
            let (y0, y1) = self.valid(ky, h, oh);
            let (x0, x1) = self.valid(kx, w, ow);
            for oy in y0..y1 {
                let iy = oy * stride + ky * dilation - padding;
                let orow = &mut out[(f * oh + oy) * ow..(f * oh + oy + 1) * ow];
                let irow = &x[(c * h + iy) * w..(c * h + iy + 1) * w];
                for ox in x0..x1 {
                    orow[ox] += wv * irow[ox * stride + kx * dilation - padding];
                }
            }
        });
        out
    }

    /// Returns (dx, dw, db).
    fn backward(&self, x: &[f64], wt: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (oh, ow, h, w) = (self.oh, self.ow, self.h, self.w);
        let Conv2dOptions {
            stride,
            padding,
            dilation,
            ..
        } = self.opts;
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; wt.len()];
        let db = g.chunks(oh * ow).map(|p| p.iter().sum()).collect();
        self.for_each_tap(|f, c, woff, ky, kx, _| {
            let wv = wt[woff];
            let (y0, y1) = self.valid(ky, h, oh);
            let (x0, x1) = self.valid(kx, w, ow);
            let mut acc = 0.0;
            for oy in y0..y1 {
                let iy = oy * stride + ky * dilation - padding;
                let grow = &g[(f * oh + oy) * ow..(f * oh + oy + 1) * ow];
                let base = (c * h + iy) * w;
                for ox in x0..x1 {
                    let ix = base + ox * stride + kx * dilation - padding;
                    acc += grow[ox] * x[ix];
                    dx[ix] += grow[ox] * wv;
                }
            }
            dw[woff] += acc;
        });
        (dx, dw, db)
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[C,H,W]` (or `[N,C,H,W]`) with `[F, C/groups, kh, kw]`.
    /// Output extent: `(H + 2p − dilation·(kh−1) − 1)/stride + 1`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        opts: Conv2dOptions,
    ) -> Result<Var<'t>> {
        let (x, wt) = (self.value(), weight.value());
        let geo = Geometry::new(x.shape(), wt.shape(), opts)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [geo.f] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} for {} filters",
                    b.shape(),
                    geo.f
                )));
            }
        }
        let batch = if x.rank() == 4 { x.shape()[0] } else { 1 };
        let in_sz = geo.c * geo.h * geo.w;
        let mut out = Vec::with_capacity(batch * geo.f * geo.oh * geo.ow);
        for n in 0..batch {
            out.extend(geo.forward(
                &x.data()[n * in_sz..(n + 1) * in_sz],
                wt.data(),
                b.as_ref().map(|b| b.data()),
            ));
        }
        let mut shape = vec![geo.f, geo.oh, geo.ow];
        if x.rank() == 4 {
            shape.insert(0, batch);
        }
        let out = Tensor::new(shape, out)?;

        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().record("conv2d", out, &parents, move |g| {
            let out_sz = geo.f * geo.oh * geo.ow;
            let mut dx = Vec::with_capacity(x.numel());
            let mut dw = vec![0.0; wt.numel()];
            let mut db = vec![0.0; geo.f];
            for n in 0..batch {
                let (dxn, dwn, dbn) = geo.backward(
                    &x.data()[n * in_sz..(n + 1) * in_sz],
                    wt.data(),
                    &g.data()[n * out_sz..(n + 1) * out_sz],
                );
                dx.extend(dxn);
                dw.iter_mut().zip(dwn).for_each(|(a, b)| *a += b);
                db.iter_mut().zip(dbn).for_each(|(a, b)| *a += b);
            }
            let mut grads = vec![
                Tensor::new(x.shape().to_vec(), dx).unwrap(),
                Tensor::new(wt.shape().to_vec(), dw).unwrap(),
            ];
            if has_bias {
                grads.push(Tensor::new([geo.f], db).unwrap());
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn conv(x: Tensor, w: Tensor, opts: Conv2dOptions) -> Result<Tensor> {
        let tape = Tape::new();
        let y = tape.constant(x).conv2d(tape.constant(w), None, opts)?;
        Ok((*y.value()).clone())
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let x = Tensor::from_fn([1, 4, 5], |i| (i as f64).sin());
        let y = conv(x.clone(), Tensor::ones([1, 1, 1, 1]), Conv2dOptions::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_center_counts_nine() {
        let y = conv(
            Tensor::ones([1, 3, 3]),
            Tensor::ones([1, 1, 3, 3]),
            Conv2dOptions::padded(1),
        )
        .unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn dilated_output_extent() {
        let y = conv(
            Tensor::ones([1, 5, 5]),
            Tensor::ones([1, 1, 3, 3]),
            Conv2dOptions::padded(2).with_dilation(2),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
    }

    #[test]
    fn strided_extent_follows_formula() {
        // (7 + 2 - 3)/2 + 1 = 4
        let y = conv(
            Tensor::ones([2, 7, 7]),
            Tensor::ones([3, 2, 3, 3]),
            Conv2dOptions::padded(1).with_stride(2),
        )
        .unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn kernel_is_not_flipped() {
        // A kernel with a single 1 at the top-left tap reads x[y-1, x-1].
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[0] = 1.0;
        let x = Tensor::from_fn([1, 3, 3], |i| i as f64);
        let y = conv(x, k, Conv2dOptions::padded(1)).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 0.0);
        assert_eq!(y.at(&[0, 2, 2]), 4.0);
    }

    #[test]
    fn depthwise_groups_keep_channels_separate() {
        let x = Tensor::from_fn([2, 3, 3], |i| if i < 9 { 1.0 } else { 2.0 });
        let y = conv(x, Tensor::ones([2, 1, 1, 1]), Conv2dOptions::default().with_groups(2)).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 1.0);
        assert_eq!(y.at(&[1, 1, 1]), 2.0);
    }

    #[test]
    fn batched_input_matches_per_sample() {
        let x = Tensor::from_fn([2, 1, 4, 4], |i| (i as f64 * 0.37).cos());
        let w = Tensor::from_fn([2, 1, 3, 3], |i| (i as f64 * 0.11).sin());
        let y = conv(x.clone(), w.clone(), Conv2dOptions::padded(1)).unwrap();
        let second = Tensor::new([1, 4, 4], x.data()[16..].to_vec()).unwrap();
        let y1 = conv(second, w, Conv2dOptions::padded(1)).unwrap();
        assert_eq!(&y.data()[32..], y1.data());
    }

    #[test]
    fn non_positive_extent_is_an_error() {
        let err = conv(Tensor::ones([1, 2, 2]), Tensor::ones([1, 1, 3, 3]), Conv2dOptions::default());
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }
}
