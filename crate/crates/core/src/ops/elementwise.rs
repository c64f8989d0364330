use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initializing biases to a target positive value.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

fn unary<'t>(
    x: Var<'t>,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var<'t>> {
    let input = x.value();
    let out = Rc::new(input.map(f));
    let saved = Rc::clone(&out);
    x.tape().record(op, (*out).clone(), &[x], move |g| {
        let data = input
            .data()
            .iter()
            .zip(saved.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
            .collect();
        vec![Tensor::new(g.shape().to_vec(), data).unwrap()]
    })
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.tape()
            .record("add", out, &[self, other], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.tape().record("sub", out, &[self, other], |g| {
            vec![g.clone(), g.map(|v| -v)]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.tape().record("mul", out, &[self, other], move |g| {
            vec![
                g.zip_map(&b, |gi, bi| gi * bi).unwrap(),
                g.zip_map(&a, |gi, ai| gi * ai).unwrap(),
            ]
        })
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * factor);
        self.tape()
            .record("scale", out, &[self], move |g| vec![g.map(|v| v * factor)])
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.tape()
            .record("add_scalar", out, &[self], |g| vec![g.clone()])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        unary(self, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        unary(self, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        unary(self, "silu", silu_scalar, |x, _| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        unary(self, "softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(self) -> Result<Var<'t>> {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Result<Var<'t>> {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Hard clamp; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        unary(
            self,
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .record("sum", Tensor::scalar(x.sum()), &[self], move |g| {
                vec![Tensor::full(shape.clone(), g.item())]
            })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.numel() as f64;
        let shape = x.shape().to_vec();
        self.tape()
            .record("mean", Tensor::scalar(x.sum() / n), &[self], move |g| {
                vec![Tensor::full(shape.clone(), g.item() / n)]
            })
    }

    /// Mean over every axis but the first: `[C, ...] -> [C]`.
    pub fn mean_per_channel(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some(&c) = shape.first() else {
            return Err(Error::dim("mean_per_channel needs rank >= 1"));
        };
        let inner = x.numel() / c.max(1);
        let out: Vec<f64> = x
            .data()
            .chunks(inner.max(1))
            .map(|row| row.iter().sum::<f64>() / inner as f64)
            .collect();
        self.tape().record(
            "mean_per_channel",
            Tensor::new([c], out)?,
            &[self],
            move |g| {
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / inner as f64, inner))
                    .collect();
                vec![Tensor::new(shape.clone(), data).unwrap()]
            },
        )
    }

    /// `x[..., n] + bias[n]`, broadcasting over all leading axes.
    pub fn add_bias_last(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap_or(&1);
        if b.shape() != [n] {
            return Err(Error::dim(format!(
                "add_bias_last: bias {:?} vs input {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bi) in row.iter_mut().zip(b.data()) {
                *v += bi;
            }
        }
        self.tape().record("add_bias_last", out, &[self, bias], move |g| {
            let mut gb = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (acc, gi) in gb.iter_mut().zip(row) {
                    *acc += gi;
                }
            }
            vec![g.clone(), Tensor::new([n], gb).unwrap()]
        })
    }

    /// `x[c, ...] * s[c]`, broadcasting over all trailing axes.
    pub fn scale_channels(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.value(), s.value());
        let c = *x.shape().first().unwrap_or(&0);
        if sv.shape() != [c] {
            return Err(Error::dim(format!(
                "scale_channels: scale {:?} vs input {:?}",
                sv.shape(),
                x.shape()
            )));
        }
        let inner = x.numel() / c.max(1);
        let mut out = (*x).clone();
        for (row, si) in out.data_mut().chunks_mut(inner.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= si);
        }
        self.tape().record("scale_channels", out, &[self, s], move |g| {
            let mut gx = g.clone();
            let mut gs = vec![0.0; c];
            for (ch, ((grow, xrow), si)) in gx
                .data_mut()
                .chunks_mut(inner.max(1))
                .zip(x.data().chunks(inner.max(1)))
                .zip(sv.data())
                .enumerate()
            {
                gs[ch] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                grow.iter_mut().for_each(|v| *v *= si);
            }
            vec![gx, Tensor::new([c], gs).unwrap()]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn eval(f: impl for<'t> Fn(crate::tape::Var<'t>) -> crate::Result<crate::tape::Var<'t>>, x: f64) -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new([1], vec![x]).unwrap());
        f(v).unwrap().value().item()
    }

    #[test]
    fn activation_reference_values() {
        assert_eq!(eval(|v| v.sigmoid(), 0.0), 0.5);
        assert!((eval(|v| v.softplus(), 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((eval(|v| v.softplus(), 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(eval(|v| v.silu(), 0.0), 0.0);
        assert_eq!(eval(|v| v.relu(), -2.0), 0.0);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(eval(|v| v.softplus(), 800.0), 800.0);
        assert!(eval(|v| v.softplus(), -800.0) >= 0.0);
        assert_eq!(eval(|v| v.sigmoid(), -800.0), 0.0);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 0.05, 0.1, 1.0, 7.5] {
            let x = super::softplus_inverse(y);
            assert!((super::softplus_scalar(x) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(v.log(), Err(crate::Error::Numeric { .. })));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64 - 2.0));
        let grads = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let loss = x.square().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mismatched_shapes_are_dimension_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones([2]));
        let b = tape.leaf(Tensor::ones([3]));
        assert!(matches!(a.add(b), Err(crate::Error::Dimension(_))));
    }
}
