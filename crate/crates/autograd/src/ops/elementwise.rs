//! Pointwise arithmetic and activations.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn assert_same(op: &str, a: &[usize], b: &[usize]) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

// `add` / `sub` / `mul` / `neg` back the operator impls below.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let y_saved = y.clone();
        let out = Tensor::clone(&y);
        self.graph().push(
            out,
            &[self],
            Box::new(move |gy, _| {
                let data =
                    gy.data().iter().zip(x.data()).zip(y_saved.data()).map(|((&g, &xv), &yv)| g * df(xv, yv)).collect();
                vec![Some(Tensor::from_vec(x.shape(), data).expect("same shape"))]
            }),
        )
    }

    fn kinked(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        self.graph().record_kinks(&self.value());
        self.unary(f, df)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(T::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(T::ln, |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(T::sqrt, |_, y| T::lit(0.5) / y)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.kinked(T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.kinked(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::lit(slope);
        self.kinked(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(T::tanh, |_, y| T::one() - y * y)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_same(op, a.shape(), b.shape());
        let out = a.zip_map(&b, f);
        self.graph().push(
            out,
            &[self, other],
            Box::new(move |gy, needs| {
                let grad = |d: &dyn Fn(T, T) -> T| {
                    let data =
                        gy.data().iter().zip(a.data().iter().zip(b.data())).map(|(&g, (&x, &y))| g * d(x, y)).collect();
                    Tensor::from_vec(a.shape(), data).expect("same shape")
                };
                vec![needs[0].then(|| grad(&da)), needs[1].then(|| grad(&db))]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "div", |a, b| a / b, |_, b| T::one() / b, |a, b| -a / (b * b))
    }

    /// Broadcast `v` (length `shape[axis]`) along every other axis and add.
    pub fn add_along(self, v: Var<'g, T>, axis: usize) -> Var<'g, T> {
        self.along(v, axis, false)
    }

    /// Broadcast `v` (length `shape[axis]`) along every other axis and multiply.
    pub fn mul_along(self, v: Var<'g, T>, axis: usize) -> Var<'g, T> {
        self.along(v, axis, true)
    }

    fn along(self, v: Var<'g, T>, axis: usize, multiply: bool) -> Var<'g, T> {
        let x = self.value();
        let w = v.value();
        let shape = x.shape().to_vec();
        assert!(axis < shape.len(), "broadcast axis {axis} out of range for {shape:?}");
        assert_eq!(w.len(), shape[axis], "broadcast vector length vs {shape:?} axis {axis}");
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let chan = move |i: usize| (i / inner) % dim;
        let out = Tensor::from_vec(
            &shape,
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &xv)| if multiply { xv * w.data()[chan(i)] } else { xv + w.data()[chan(i)] })
                .collect(),
        )
        .expect("same shape");
        let w_shape = w.shape().to_vec();
        self.graph().push(
            out,
            &[self, v],
            Box::new(move |gy, needs| {
                let gx = needs[0].then(|| {
                    if multiply {
                        Tensor::from_vec(
                            &shape,
                            gy.data().iter().enumerate().map(|(i, &g)| g * w.data()[chan(i)]).collect(),
                        )
                        .expect("same shape")
                    } else {
                        gy.clone()
                    }
                });
                let gv = needs[1].then(|| {
                    let mut acc = vec![T::zero(); dim];
                    for (i, &g) in gy.data().iter().enumerate() {
                        acc[chan(i)] += if multiply { g * x.data()[i] } else { g };
                    }
                    Tensor::from_vec(&w_shape, acc).expect("vector shape")
                });
                vec![gx, gv]
            }),
        )
    }
}

impl<'g, T: Scalar> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
