//! Pure data-movement ops. All of them are gathers: every output element is
//! copied from exactly one input element, and the backward rule scatter-adds.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn gather_tensor(x: &Tensor, index: &[usize], shape: Vec<usize>) -> Tensor {
    let src = x.data();
    Tensor::new(shape, index.iter().map(|&i| src[i]).collect()).unwrap()
}

/// Source indices for pixel shuffle: `[c·r², h, w] -> [c, h·r, w·r]` with
/// `out[c, h·r + i, w·r + j] = in[c·r² + i·r + j, h, w]`.
fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let &[cin, h, w] = shape else {
        return Err(Error::dim(format!("pixel_shuffle expects [C,H,W], got {shape:?}")));
    };
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::dim(format!(
            "pixel_shuffle: {cin} channels not divisible by r²={}",
            r * r
        )));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(cin * h * w);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let src_c = ch * r * r + (y % r) * r + (x % r);
                idx.push((src_c * h + y / r) * w + x / r);
            }
        }
    }
    Ok((idx, vec![c, oh, ow]))
}

/// Source indices for the inverse rearrangement `[c, h·r, w·r] -> [c·r², h, w]`.
fn pixel_unshuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let &[c, h, w] = shape else {
        return Err(Error::dim(format!("pixel_unshuffle expects [C,H,W], got {shape:?}")));
    };
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim(format!(
            "pixel_unshuffle: extents {h}x{w} not divisible by {r}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(c * h * w);
    for oc in 0..c * r * r {
        let (ch, sub) = (oc / (r * r), oc % (r * r));
        let (i, j) = (sub / r, sub % r);
        for y in 0..oh {
            for x in 0..ow {
                idx.push((ch * h + y * r + i) * w + x * r + j);
            }
        }
    }
    Ok((idx, vec![c * r * r, oh, ow]))
}

pub fn pixel_shuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let (idx, shape) = pixel_shuffle_index(x.shape(), r)?;
    Ok(gather_tensor(x, &idx, shape))
}

pub fn pixel_unshuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let (idx, shape) = pixel_unshuffle_index(x.shape(), r)?;
    Ok(gather_tensor(x, &idx, shape))
}

impl<'t> Var<'t> {
    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::dim(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::dim(format!(
                "gather: index {bad} out of range for {} elements",
                x.numel()
            )));
        }
        let out = gather_tensor(&x, &index, shape);
        let in_shape = x.shape().to_vec();
        self.tape().record("gather", out, &[self], move |g| {
            let mut gx = Tensor::zeros(in_shape.clone());
            let buf = gx.data_mut();
            for (&i, gi) in index.iter().zip(g.data()) {
                buf[i] += gi;
            }
            vec![gx]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.tape().record("reshape", out, &[self], move |g| {
            vec![g.reshape(in_shape.clone()).unwrap()]
        })
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some(&lead) = shape.first() else {
            return Err(Error::dim("narrow on a scalar"));
        };
        if start + len > lead {
            return Err(Error::dim(format!(
                "narrow: {start}..{} exceeds leading extent {lead}",
                start + len
            )));
        }
        let inner = x.numel() / lead.max(1);
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            out_shape,
            x.data()[start * inner..(start + len) * inner].to_vec(),
        )?;
        self.tape().record("narrow", out, &[self], move |g| {
            let mut gx = Tensor::zeros(shape.clone());
            gx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![gx]
        })
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape().get(1..).unwrap_or(&[]).to_vec();
        if values[0].rank() == 0 {
            return Err(Error::dim("concat of scalars"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: trailing extents {:?} vs {:?}",
                    &v.shape()[1..],
                    tail
                )));
            }
            lead += v.shape()[0];
            sizes.push((v.shape().to_vec(), v.numel()));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let out = Tensor::new(shape, data)?;
        first.tape().record("concat", out, parts, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|(shape, n)| {
                    let part = Tensor::new(shape.clone(), g.data()[off..off + n].to_vec()).unwrap();
                    off += n;
                    part
                })
                .collect()
        })
    }

    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t>> {
        let (idx, shape) = pixel_shuffle_index(&self.shape(), r)?;
        self.gather(Rc::new(idx), shape)
    }

    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t>> {
        let (idx, shape) = pixel_unshuffle_index(&self.shape(), r)?;
        self.gather(Rc::new(idx), shape)
    }

    /// Edge-replicating spatial padding of a `[C, H, W]` map.
    pub fn pad_replicate(self, pad: usize) -> Result<Var<'t>> {
        let &[c, h, w] = &self.shape()[..] else {
            return Err(Error::dim("pad_replicate expects [C,H,W]"));
        };
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut idx = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for x in 0..pw {
                    let sx = x.saturating_sub(pad).min(w - 1);
                    idx.push((ch * h + sy) * w + sx);
                }
            }
        }
        self.gather(Rc::new(idx), vec![c, ph, pw])
    }

    /// `[C, H, W] -> [H·W, C]` token layout.
    pub fn to_tokens(self) -> Result<Var<'t>> {
        let &[c, h, w] = &self.shape()[..] else {
            return Err(Error::dim("to_tokens expects [C,H,W]"));
        };
        self.reshape([c, h * w])?.transpose()
    }

    /// `[H·W, C] -> [C, H, W]`.
    pub fn from_tokens(self, h: usize, w: usize) -> Result<Var<'t>> {
        let &[l, c] = &self.shape()[..] else {
            return Err(Error::dim("from_tokens expects [L,C]"));
        };
        if l != h * w {
            return Err(Error::dim(format!("from_tokens: {l} tokens for a {h}x{w} grid")));
        }
        self.transpose()?.reshape([c, h, w])
    }
}
