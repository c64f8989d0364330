use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Plain `[m, k] x [k, n]` product on raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(format!("{op}: expected a matrix, got {:?}", t.shape()))),
    }
}

impl<'t> Var<'t> {
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner extents differ ({m}x{k} by {k2}x{n})"
            )));
        }
        let out = Tensor::new([m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        self.tape().record("matmul", out, &[self, other], move |g| {
            // dA = G Bᵀ, dB = Aᵀ G
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![
                Tensor::new([m, k], matmul_raw(g.data(), &bt, m, n, k)).unwrap(),
                Tensor::new([k, n], matmul_raw(&at, g.data(), k, m, n)).unwrap(),
            ]
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = dims2("transpose", &a)?;
        let out = Tensor::new([c, r], transpose_raw(a.data(), r, c))?;
        self.tape().record("transpose", out, &[self], move |g| {
            vec![Tensor::new([r, c], transpose_raw(g.data(), c, r)).unwrap()]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn identity_times_column() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        assert_eq!(i.matmul(v).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let y = a.matmul(b).unwrap();
        assert_eq!(y.value().data(), &[11.0]);
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn inner_extent_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones([2, 3]));
        let b = tape.leaf(Tensor::ones([2, 3]));
        assert!(matches!(a.matmul(b), Err(crate::Error::Dimension(_))));
    }
}
