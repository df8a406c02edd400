//! Elementwise arithmetic, activations and reductions.

use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::{Real, Tensor};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast<T: Real>(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

impl<'g, T: Real> Tensor<'g, T> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<'g, T> {
        let x = self.value();
        let y = x.mapv(f);
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let mut dx = ctx.grad.clone();
                Zip::from(&mut dx)
                    .and(&*ctx.inputs[0])
                    .and(ctx.output)
                    .for_each(|g, &x, &y| *g *= df(x, y));
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(self) -> Tensor<'g, T> {
        self.map(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Tensor<'g, T> {
        self.map(|x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(self) -> Tensor<'g, T> {
        self.map(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn abs(self) -> Tensor<'g, T> {
        self.map(|x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(self) -> Tensor<'g, T> {
        self.map(|x| x * x, |x, _| x + x)
    }

    pub fn powf(self, p: f64) -> Tensor<'g, T> {
        let pt = T::of(p);
        self.map(move |x| x.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
    }

    pub fn recip(self) -> Tensor<'g, T> {
        self.map(|x| x.recip(), |_, y| -(y * y))
    }

    pub fn scale(self, s: f64) -> Tensor<'g, T> {
        let st = T::of(s);
        self.map(move |x| x * st, move |_, _| st)
    }

    pub fn add_scalar(self, s: f64) -> Tensor<'g, T> {
        let st = T::of(s);
        self.map(move |x| x + st, |_, _| T::one())
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'g, T> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.map(
            move |x| x.max(l).min(h),
            move |x, _| if x >= l && x <= h { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Tensor<'g, T> {
        self.map(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(self) -> Tensor<'g, T> {
        self.map(softplus, |x, _| sigmoid(x))
    }

    /// `ln(sigmoid(x))`.
    pub fn log_sigmoid(self) -> Tensor<'g, T> {
        self.map(|x| -softplus(-x), |x, _| sigmoid(-x))
    }

    pub fn relu(self) -> Tensor<'g, T> {
        self.map(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Gaussian error linear unit, logistic approximation `x * sigmoid(1.702 x)`.
    pub fn gelu(self) -> Tensor<'g, T> {
        let k = T::of(1.702);
        self.map(
            move |x| x * sigmoid(k * x),
            move |x, _| {
                let s = sigmoid(k * x);
                s + k * x * s * (T::one() - s)
            },
        )
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`.
    pub fn inverse_sigmoid(self, eps: f64) -> Tensor<'g, T> {
        let lo = T::of(eps);
        let hi = T::one() - lo;
        self.map(
            move |x| {
                let c = x.max(lo).min(hi);
                (c / (T::one() - c)).ln()
            },
            move |x, _| {
                if x >= lo && x <= hi {
                    (x * (T::one() - x)).recip()
                } else {
                    T::zero()
                }
            },
        )
    }

    fn binary(
        self,
        rhs: Tensor<'g, T>,
        f: fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
        back: fn(&ArrayD<T>, &ArrayD<T>, &ArrayD<T>) -> (Option<ArrayD<T>>, Option<ArrayD<T>>),
    ) -> Tensor<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let y = f(&a, &b);
        self.g.op(
            y,
            &[self, rhs],
            Box::new(move |ctx| {
                let (a, b) = (&*ctx.inputs[0], &*ctx.inputs[1]);
                let (da, db) = back(a, b, ctx.grad);
                vec![
                    da.map(|g| unbroadcast(&g, a.shape())),
                    db.map(|g| unbroadcast(&g, b.shape())),
                ]
            }),
        )
    }

    pub fn add(self, rhs: Tensor<'g, T>) -> Tensor<'g, T> {
        self.binary(rhs, |a, b| a + b, |_, _, g| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(self, rhs: Tensor<'g, T>) -> Tensor<'g, T> {
        self.binary(rhs, |a, b| a - b, |_, _, g| (Some(g.clone()), Some(g.mapv(|v| -v))))
    }

    pub fn mul(self, rhs: Tensor<'g, T>) -> Tensor<'g, T> {
        self.binary(rhs, |a, b| a * b, |a, b, g| (Some(g * b), Some(g * a)))
    }

    pub fn div(self, rhs: Tensor<'g, T>) -> Tensor<'g, T> {
        self.binary(
            rhs,
            |a, b| a / b,
            |a, b, g| {
                let da = g / b;
                let db = (&da * a).mapv(|v| -v) / b;
                (Some(da), Some(db))
            },
        )
    }

    pub fn sum_all(self) -> Tensor<'g, T> {
        let s = self.value().sum();
        self.g.op(
            ArrayD::from_elem(IxDyn(&[]), s),
            &[self],
            Box::new(|ctx| {
                let g = *ctx.grad.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), g))]
            }),
        )
    }

    pub fn mean_all(self) -> Tensor<'g, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over one axis.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Tensor<'g, T> {
        let x = self.value();
        let mut y = x.sum_axis(Axis(axis));
        if keepdim {
            y = y.insert_axis(Axis(axis));
        }
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let shape = ctx.inputs[0].raw_dim();
                let g = if keepdim {
                    ctx.grad.view()
                } else {
                    ctx.grad.view().insert_axis(Axis(axis))
                };
                let dx = g
                    .broadcast(shape.clone())
                    .expect("broadcast back over reduced axis")
                    .to_owned();
                vec![Some(dx)]
            }),
        )
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Tensor<'g, T> {
        let n = self.dim(axis).max(1);
        self.sum_axis(axis, keepdim).scale(1.0 / n as f64)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, T: Real> Add for Tensor<'g, T> {
    type Output = Tensor<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Tensor::add(self, rhs)
    }
}

impl<'g, T: Real> Sub for Tensor<'g, T> {
    type Output = Tensor<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Tensor::sub(self, rhs)
    }
}

impl<'g, T: Real> Mul for Tensor<'g, T> {
    type Output = Tensor<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Tensor::mul(self, rhs)
    }
}

impl<'g, T: Real> Div for Tensor<'g, T> {
    type Output = Tensor<'g, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Tensor::div(self, rhs)
    }
}

impl<'g, T: Real> Neg for Tensor<'g, T> {
    type Output = Tensor<'g, T>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
