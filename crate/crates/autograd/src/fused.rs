//! Row-wise fused kernels over the last axis.

use ndarray::{ArrayD, IxDyn};

use crate::{Real, Tensor};

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("at least 1-D");
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn softmax_rows<T: Real>(x: &[T], y: &mut [T], cols: usize) {
    for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            yr.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut s = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        let inv = s.recip();
        yr.iter_mut().for_each(|v| *v *= inv);
    }
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T], cols: usize) {
    let src = x.to_vec();
    softmax_rows(&src, x, cols);
}

impl<'g, T: Real> Tensor<'g, T> {
    /// Softmax over the last axis. Entries equal to `-inf` get zero weight.
    pub fn softmax(self) -> Tensor<'g, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let xs = x.as_standard_layout();
        let mut y = ArrayD::<T>::zeros(x.raw_dim());
        softmax_rows(xs.as_slice().unwrap(), y.as_slice_mut().unwrap(), cols);
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let y = ctx.output.as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let g = g.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(ctx.output.raw_dim());
                for ((yr, gr), dr) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Tensor<'g, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let xs = x.as_standard_layout();
        let mut y = ArrayD::<T>::zeros(x.raw_dim());
        for (xr, yr) in xs
            .as_slice()
            .unwrap()
            .chunks(cols)
            .zip(y.as_slice_mut().unwrap().chunks_mut(cols))
        {
            let lse = logsumexp(xr);
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let y = ctx.output.as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let g = g.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(ctx.output.raw_dim());
                for ((yr, gr), dr) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(cols))
                {
                    let gs: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `ln sum exp` over the last axis, which is removed.
    pub fn logsumexp(self) -> Tensor<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (rows, cols) = rows_cols(&shape);
        let xs = x.as_standard_layout();
        let vals: Vec<T> = xs.as_slice().unwrap().chunks(cols).map(logsumexp).collect();
        debug_assert_eq!(vals.len(), rows);
        let y = ArrayD::from_shape_vec(IxDyn(&shape[..shape.len() - 1]), vals).unwrap();
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].as_standard_layout();
                let lse = ctx.output.as_standard_layout();
                let g = ctx.grad.as_standard_layout();
                let mut dx = ArrayD::<T>::zeros(ctx.inputs[0].raw_dim());
                for (((xr, dr), &l), &gv) in x
                    .as_slice()
                    .unwrap()
                    .chunks(cols)
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(cols))
                    .zip(lse.iter())
                    .zip(g.iter())
                {
                    for (d, &v) in dr.iter_mut().zip(xr) {
                        *d = gv * (v - l).exp();
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[cols]`.
    pub fn layer_norm(self, gamma: Tensor<'g, T>, beta: Tensor<'g, T>, eps: f64) -> Tensor<'g, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let eps_t = T::of(eps);
        let gam = gamma.value();
        let bet = beta.value();
        let gs = gam.as_slice().unwrap();
        let bs = bet.as_slice().unwrap();
        assert_eq!(gs.len(), cols, "layer_norm gamma");
        let xs = x.as_standard_layout();
        let mut y = ArrayD::<T>::zeros(x.raw_dim());
        let n = T::of(cols as f64);
        for (xr, yr) in xs
            .as_slice()
            .unwrap()
            .chunks(cols)
            .zip(y.as_slice_mut().unwrap().chunks_mut(cols))
        {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps_t).sqrt().recip();
            for (i, (o, &v)) in yr.iter_mut().zip(xr).enumerate() {
                *o = (v - mean) * inv * gs[i] + bs[i];
            }
        }
        self.g.op(
            y,
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].as_standard_layout();
                let gam = ctx.inputs[1].as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let mut dx = ArrayD::<T>::zeros(ctx.inputs[0].raw_dim());
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for ((xr, gr), dr) in x
                    .as_slice()
                    .unwrap()
                    .chunks(cols)
                    .zip(g.as_slice().unwrap().chunks(cols))
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(cols))
                {
                    let mean = xr.iter().copied().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = (var + eps_t).sqrt().recip();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..cols {
                        xhat[i] = (xr[i] - mean) * inv;
                        dxhat[i] = gr[i] * gam[i];
                        dg[i] += gr[i] * xhat[i];
                        db[i] += gr[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for i in 0..cols {
                        dr[i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(dx),
                    Some(ArrayD::from_shape_vec(ctx.inputs[1].raw_dim(), dg).unwrap()),
                    Some(ArrayD::from_shape_vec(ctx.inputs[2].raw_dim(), db).unwrap()),
                ]
            }),
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm; norms below `eps`
    /// are replaced by `eps`.
    pub fn l2_normalize(self, eps: f64) -> Tensor<'g, T> {
        let x = self.value();
        let (_, cols) = rows_cols(x.shape());
        let eps_t = T::of(eps);
        let xs = x.as_standard_layout();
        let mut y = ArrayD::<T>::zeros(x.raw_dim());
        for (xr, yr) in xs
            .as_slice()
            .unwrap()
            .chunks(cols)
            .zip(y.as_slice_mut().unwrap().chunks_mut(cols))
        {
            let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps_t);
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = v / norm;
            }
        }
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].as_standard_layout();
                let y = ctx.output.as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let mut dx = ArrayD::<T>::zeros(ctx.inputs[0].raw_dim());
                for (((xr, yr), gr), dr) in x
                    .as_slice()
                    .unwrap()
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .zip(g.as_slice().unwrap().chunks(cols))
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(cols))
                {
                    let raw = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw < eps_t {
                        for (d, &gv) in dr.iter_mut().zip(gr) {
                            *d = gv / eps_t;
                        }
                        continue;
                    }
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / raw;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}
