//! Elementwise arithmetic, activations and reductions.

use crate::error::{invalid, Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Default negative slope of [`Var::leaky_relu_default`].
pub const LEAKY_RELU_SLOPE: f64 = 0.1;

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (grad, a, b) -> (da, db)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        let out = a.zip_map(&b, f)?;
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(
            out,
            ga || gb,
            Some(Box::new(move |g, sink| {
                let shape = a.shape();
                let mut da = if ga { Some(vec![0.0; g.numel()]) } else { None };
                let mut db = if gb { Some(vec![0.0; g.numel()]) } else { None };
                for i in 0..g.numel() {
                    let (x, y) = df(g.data()[i], a.data()[i], b.data()[i]);
                    if let Some(d) = da.as_mut() {
                        d[i] = x;
                    }
                    if let Some(d) = db.as_mut() {
                        d[i] = y;
                    }
                }
                if let Some(d) = da {
                    sink.accumulate(ia, Tensor::new(shape, d).expect("shape"));
                }
                if let Some(d) = db {
                    sink.accumulate(ib, Tensor::new(shape, d).expect("shape"));
                }
            })),
        ))
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        // (grad, x) -> dx
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let out = a.map(f);
        let ia = self.id;
        self.tape.push(
            out,
            self.requires_grad(),
            Some(Box::new(move |g, sink| {
                let d = Tensor::new(
                    a.shape(),
                    g.data().iter().zip(a.data()).map(|(&g, &x)| df(g, x)).collect(),
                )
                .expect("shape");
                sink.accumulate(ia, d);
            })),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn scalar_mul(self, s: f64) -> Var<'t> {
        self.unary(move |x| s * x, move |g, _| s * g)
    }

    pub fn neg(self) -> Var<'t> {
        self.scalar_mul(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, |g, x| if x > 0.0 { g } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |g, x| if x > 0.0 { g } else { slope * g },
        )
    }

    pub fn leaky_relu_default(self) -> Var<'t> {
        self.leaky_relu(LEAKY_RELU_SLOPE)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |g, x| {
            let t = x.tanh();
            g * (1.0 - t * t)
        })
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |g, x| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        Ok(self.unary(
            move |x| x.clamp(lo, hi),
            move |g, x| if x > lo && x < hi { g } else { 0.0 },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let ia = self.id;
        self.tape.push(
            Tensor::scalar(a.sum()),
            self.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scalar_mul(1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = a.shape().to_vec();
        out_shape.remove(axis);
        let in_shape = a.shape().to_vec();
        let ia = self.id;
        Ok(self.tape.push(
            Tensor::new(&out_shape, out)?,
            self.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.accumulate_with(ia, &in_shape, |d| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut d[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (x, &gv) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                                *x += gv;
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).fold(f64::NEG_INFINITY, |m, k| m.max(x[at(k)]));
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(a.shape(), y)?;
        let saved = out.clone();
        let ia = self.id;
        Ok(self.tape.push(
            out,
            self.requires_grad(),
            Some(Box::new(move |g, sink| {
                let y = saved.data();
                sink.accumulate_with(ia, saved.shape(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g.data()[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                d[at(k)] += y[at(k)] * (g.data()[at(k)] - dot);
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.reshape(shape)?;
        let in_shape = a.shape().to_vec();
        let ia = self.id;
        Ok(self.tape.push(
            out,
            self.requires_grad(),
            Some(Box::new(move |g, sink| {
                sink.accumulate(ia, g.reshape(&in_shape).expect("reshape"));
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::Tape;
    use crate::Tensor;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[-2.0, 3.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[7], 4.2));
        let y = x.softmax(0).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(x.softmax(2).is_err());
        assert!(x.sum_axis(5).is_err());
    }

    #[test]
    fn mean_abs_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, -2.0]));
        let loss = x.abs().mean();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn kinks_have_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[0.0, 1.0, -1.0]));
        let loss = x
            .relu()
            .add(x.clamp(-1.0, 1.0).unwrap())
            .unwrap()
            .add(x.abs())
            .unwrap()
            .sum();
        tape.backward(loss).unwrap();
        // relu' = [0,1,0], clamp' = [1,0,0], abs' = [0,1,-1]
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = a.add(b).unwrap_err();
        assert!(err.to_string().contains("[2]"));
        assert!(err.to_string().contains("[3]"));
    }

    #[test]
    fn sum_axis_middle() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.value().data(), &[6.0, 9.0, 24.0, 27.0]);
    }
}
