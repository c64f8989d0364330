use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Layer normalization over the last axis, followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if c == 0 {
            return Err(Error::dim("layer_norm over an empty axis"));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(format!(
                "layer_norm affine shapes {:?}/{:?} for {c} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        self.tape()
            .record("layer_norm", out, &[self, gamma, beta], move |g| {
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv.data()[j];
                        dx[r * c + j] = inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                vec![
                    Tensor::new(shape.clone(), dx).unwrap(),
                    Tensor::new([c], dgamma).unwrap(),
                    Tensor::new([c], dbeta).unwrap(),
                ]
            })
    }
}
