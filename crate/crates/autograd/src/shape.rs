//! Layout operations: reshape, permute, slicing, concatenation and row gathers.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::{Real, Tensor};

/// Sparse linear map between row sets: output row `r` is
/// `sum_j weight[r, j] * input[index[r, j]]` over `per_row` slots.
///
/// Row permutations, cyclic shifts, window partitions, zero padding, 3x3
/// neighbourhood gathers and bilinear resampling are all expressed with it.
#[derive(Clone, Debug)]
pub struct RowMap {
    pub in_rows: usize,
    pub out_rows: usize,
    pub per_row: usize,
    /// `out_rows * per_row` source indices; [`RowMap::SKIP`] contributes zero.
    pub index: Vec<u32>,
    /// Optional `out_rows * per_row` weights; all ones when absent.
    pub weight: Option<Vec<f64>>,
}

impl RowMap {
    pub const SKIP: u32 = u32::MAX;

    /// One source row per output row, `None` produces a zero row.
    pub fn select(in_rows: usize, rows: impl IntoIterator<Item = Option<usize>>) -> Self {
        let index: Vec<u32> = rows
            .into_iter()
            .map(|r| r.map_or(Self::SKIP, |r| r as u32))
            .collect();
        Self {
            in_rows,
            out_rows: index.len(),
            per_row: 1,
            index,
            weight: None,
        }
    }

    /// Inverse of a permutation-like selection: output row `index[i]` takes input row `i`.
    /// Rows never referenced stay zero.
    pub fn scatter_inverse(&self) -> Self {
        assert_eq!(self.per_row, 1);
        let mut index = vec![Self::SKIP; self.in_rows];
        for (i, &src) in self.index.iter().enumerate() {
            if src != Self::SKIP {
                index[src as usize] = i as u32;
            }
        }
        Self {
            in_rows: self.out_rows,
            out_rows: self.in_rows,
            per_row: 1,
            index,
            weight: None,
        }
    }

    fn apply<T: Real>(&self, x: &ndarray::ArrayView2<'_, T>) -> ArrayD<T> {
        let cols = x.shape()[1];
        let mut out = ArrayD::<T>::zeros(IxDyn(&[self.out_rows, cols]));
        {
            let out_s = out.as_slice_mut().expect("fresh array is contiguous");
            let src = x.as_standard_layout();
            let src_s = src.as_slice().expect("standard layout");
            for r in 0..self.out_rows {
                let dst = &mut out_s[r * cols..(r + 1) * cols];
                for j in 0..self.per_row {
                    let k = r * self.per_row + j;
                    let idx = self.index[k];
                    if idx == Self::SKIP {
                        continue;
                    }
                    let row = &src_s[idx as usize * cols..(idx as usize + 1) * cols];
                    match &self.weight {
                        None => dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s),
                        Some(w) => {
                            let w = T::of(w[k]);
                            if w != T::zero() {
                                dst.iter_mut().zip(row).for_each(|(d, &s)| *d += w * s);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply_transpose<T: Real>(&self, g: &ArrayD<T>) -> ArrayD<T> {
        let cols = g.shape()[1];
        let mut out = ArrayD::<T>::zeros(IxDyn(&[self.in_rows, cols]));
        let out_s = out.as_slice_mut().expect("fresh array is contiguous");
        let g = g.as_standard_layout();
        let g_s = g.as_slice().expect("standard layout");
        for r in 0..self.out_rows {
            let src = &g_s[r * cols..(r + 1) * cols];
            for j in 0..self.per_row {
                let k = r * self.per_row + j;
                let idx = self.index[k];
                if idx == Self::SKIP {
                    continue;
                }
                let dst = &mut out_s[idx as usize * cols..(idx as usize + 1) * cols];
                match &self.weight {
                    None => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                    Some(w) => {
                        let w = T::of(w[k]);
                        if w != T::zero() {
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
                        }
                    }
                }
            }
        }
        out
    }
}

impl<'g, T: Real> Tensor<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Tensor<'g, T> {
        let x = self.value();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            x.shape(),
            shape
        );
        let data: Vec<T> = x.as_standard_layout().iter().copied().collect();
        let y = ArrayD::from_shape_vec(IxDyn(shape), data).expect("size checked");
        self.g.op(
            y,
            &[self],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(ctx.inputs[0].raw_dim())
                    .expect("same element count");
                vec![Some(g)]
            }),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Tensor<'g, T> {
        let x = self.value();
        let y = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                vec![Some(g)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Tensor<'g, T> {
        let n = self.ndim();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Tensor<'g, T> {
        let x = self.value();
        let y = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let mut dx = ArrayD::zeros(ctx.inputs[0].raw_dim());
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(ctx.grad);
                vec![Some(dx)]
            }),
        )
    }

    pub fn concat(parts: &[Tensor<'g, T>], axis: usize) -> Tensor<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let g = parts[0].g;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        g.op(
            y,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                lens.iter()
                    .map(|&len| {
                        let part = ctx
                            .grad
                            .slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned();
                        start += len;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    /// Applies a [`RowMap`] to a 2-D tensor.
    pub fn gather_rows(self, map: &Arc<RowMap>) -> Tensor<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "gather_rows expects [rows, cols]");
        assert_eq!(x.shape()[0], map.in_rows, "row map input size");
        let view = x.view().into_dimensionality::<Ix2>().expect("2-D");
        let y = map.apply(&view);
        let map = map.clone();
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| vec![Some(map.apply_transpose(ctx.grad))]),
        )
    }

    /// Rows by index (duplicates allowed).
    pub fn index_rows(self, rows: &[usize]) -> Tensor<'g, T> {
        let n = self.dim(0);
        let map = RowMap::select(n, rows.iter().map(|&r| Some(r)));
        self.gather_rows(&Arc::new(map))
    }

    /// One entry per row of a `[rows, cols]` tensor: `out[r] = x[r, cols[r]]`.
    pub fn pick(self, cols: &[usize]) -> Tensor<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        assert_eq!(x.shape()[0], cols.len());
        let y = ArrayD::from_shape_fn(IxDyn(&[cols.len()]), |i| x[[i[0], cols[i[0]]]]);
        let cols = cols.to_vec();
        self.g.op(
            y,
            &[self],
            Box::new(move |ctx| {
                let mut dx = ArrayD::zeros(ctx.inputs[0].raw_dim());
                for (r, &c) in cols.iter().enumerate() {
                    dx[[r, c]] += ctx.grad[[r]];
                }
                vec![Some(dx)]
            }),
        )
    }
}
