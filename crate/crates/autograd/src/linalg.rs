use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, Axis, Ix2, Ix3};

use crate::{Real, Tensor};

fn view2<T: Real>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2-D operand")
}

fn orient<T: Real>(a: ArrayView2<'_, T>, transposed: bool) -> ArrayView2<'_, T> {
    if transposed {
        a.reversed_axes()
    } else {
        a
    }
}

impl<'g, T: Real> Tensor<'g, T> {
    /// `[m, k] x [k, n]`.
    pub fn matmul(self, rhs: Tensor<'g, T>) -> Tensor<'g, T> {
        self.matmul_t(false, rhs, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(self, ta: bool, rhs: Tensor<'g, T>, tb: bool) -> Tensor<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let av = orient(view2(&a), ta);
        let bv = orient(view2(&b), tb);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims {:?} {:?}", a.shape(), b.shape());
        let y = av.dot(&bv).into_dyn();
        self.g.op(
            y,
            &[self, rhs],
            Box::new(move |ctx| {
                let a = view2(&ctx.inputs[0]);
                let b = view2(&ctx.inputs[1]);
                let g = view2(ctx.grad);
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G
                let da = ctx.needs[0].then(|| {
                    if ta {
                        orient(b, tb).dot(&g.t())
                    } else {
                        g.dot(&orient(b, tb).t())
                    }
                    .into_dyn()
                });
                let db = ctx.needs[1].then(|| {
                    if tb {
                        g.t().dot(&orient(a, ta))
                    } else {
                        orient(a, ta).t().dot(&g)
                    }
                    .into_dyn()
                });
                vec![da, db]
            }),
        )
    }

    /// Batched `[b, m, k] x [b, k, n]` with optional transposes of the matrix axes.
    pub fn bmm_t(self, ta: bool, rhs: Tensor<'g, T>, tb: bool) -> Tensor<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let a3 = a.view().into_dimensionality::<Ix3>().expect("3-D lhs");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("3-D rhs");
        let batch = a3.shape()[0];
        assert_eq!(batch, b3.shape()[0], "bmm batch");
        let m = if ta { a3.shape()[2] } else { a3.shape()[1] };
        let n = if tb { b3.shape()[1] } else { b3.shape()[2] };
        let mut y = ndarray::Array3::<T>::zeros((batch, m, n));
        for i in 0..batch {
            let ai = orient(a3.index_axis(Axis(0), i), ta);
            let bi = orient(b3.index_axis(Axis(0), i), tb);
            general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut y.index_axis_mut(Axis(0), i));
        }
        self.g.op(
            y.into_dyn(),
            &[self, rhs],
            Box::new(move |ctx| {
                let a3 = ctx.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = ctx.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let g3 = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<T>::zeros(a3.raw_dim());
                let mut db = ndarray::Array3::<T>::zeros(b3.raw_dim());
                for i in 0..a3.shape()[0] {
                    let ai = orient(a3.index_axis(Axis(0), i), ta);
                    let bi = orient(b3.index_axis(Axis(0), i), tb);
                    let gi = g3.index_axis(Axis(0), i);
                    let mut dai = da.index_axis_mut(Axis(0), i);
                    if ta {
                        general_mat_mul(T::one(), &bi, &gi.t(), T::zero(), &mut dai);
                    } else {
                        general_mat_mul(T::one(), &gi, &bi.t(), T::zero(), &mut dai);
                    }
                    let mut dbi = db.index_axis_mut(Axis(0), i);
                    if tb {
                        general_mat_mul(T::one(), &gi.t(), &ai, T::zero(), &mut dbi);
                    } else {
                        general_mat_mul(T::one(), &ai.t(), &gi, T::zero(), &mut dbi);
                    }
                }
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Affine map of rows: `x [n, in] . w [in, out] + b [out]`.
    pub fn linear(self, w: Tensor<'g, T>, b: Option<Tensor<'g, T>>) -> Tensor<'g, T> {
        let x = self.value();
        let wv = w.value();
        let xv = view2(&x);
        let w2 = view2(&wv);
        assert_eq!(xv.ncols(), w2.nrows(), "linear: input {:?} weight {:?}", x.shape(), wv.shape());
        let mut y = ndarray::Array2::<T>::zeros((xv.nrows(), w2.ncols()));
        if let Some(b) = b {
            let bv = b.value();
            let b1 = bv.view().into_shape_with_order(w2.ncols()).expect("bias [out]");
            y.rows_mut().into_iter().for_each(|mut r| r.assign(&b1));
        }
        general_mat_mul(T::one(), &xv, &w2, T::one(), &mut y);
        let mut inputs = vec![self, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_bias = b.is_some();
        self.g.op(
            y.into_dyn(),
            &inputs,
            Box::new(move |ctx| {
                let x = view2(&ctx.inputs[0]);
                let w = view2(&ctx.inputs[1]);
                let g = view2(ctx.grad);
                let dx = ctx.needs[0].then(|| g.dot(&w.t()).into_dyn());
                let dw = ctx.needs[1].then(|| x.t().dot(&g).into_dyn());
                let mut out = vec![dx, dw];
                if has_bias {
                    let db = g.sum_axis(Axis(0));
                    let shape = ctx.inputs[2].raw_dim();
                    out.push(Some(db.into_dyn().into_shape_with_order(shape).unwrap()));
                }
                out
            }),
        )
    }
}
