//! Multi-scale deformable sampling: bilinear reads of value maps at
//! arbitrary normalized points, mixed by attention weights.

use ndarray::{ArrayD, IxDyn};

use crate::{Real, Tensor};

/// Placement of one feature level inside the concatenated value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    /// First row of the level in the value tensor.
    pub start: usize,
    pub height: usize,
    pub width: usize,
}

struct Corner<T> {
    row: Option<usize>,
    weight: T,
}

/// Bilinear corners with zero padding. `(x, y)` are normalized so that
/// pixel `(i, j)` has its centre at `((j + 0.5) / w, (i + 0.5) / h)`.
fn corners<T: Real>(x: T, y: T, lvl: &LevelLayout) -> ([Corner<T>; 4], T, T) {
    let px = x * T::of(lvl.width as f64) - T::of(0.5);
    let py = y * T::of(lvl.height as f64) - T::of(0.5);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let at = |cx: T, cy: T| -> Option<usize> {
        if cx < T::zero() || cy < T::zero() {
            return None;
        }
        let (ix, iy) = (cx.to_usize()?, cy.to_usize()?);
        (ix < lvl.width && iy < lvl.height).then(|| lvl.start + iy * lvl.width + ix)
    };
    let one = T::one();
    (
        [
            Corner { row: at(x0, y0), weight: (one - fx) * (one - fy) },
            Corner { row: at(x0 + one, y0), weight: fx * (one - fy) },
            Corner { row: at(x0, y0 + one), weight: (one - fx) * fy },
            Corner { row: at(x0 + one, y0 + one), weight: fx * fy },
        ],
        fx,
        fy,
    )
}

impl<'g, T: Real> Tensor<'g, T> {
    /// `self`: values `[rows, channels]` holding all levels back to back.
    /// `loc`: sampling points `[q, heads, levels, points, 2]` as normalized `(x, y)`.
    /// `attn`: mixing weights `[q, heads, levels, points]`.
    ///
    /// Head `h` reads channel block `h`; level slot `l` reads `levels[l]`.
    /// Returns `[q, channels]`. Points outside the map read zeros.
    pub fn deform_sample(
        self,
        loc: Tensor<'g, T>,
        attn: Tensor<'g, T>,
        levels: &[LevelLayout],
        heads: usize,
    ) -> Tensor<'g, T> {
        let value = self.value();
        let locv = loc.value();
        let attv = attn.value();
        let c = value.shape()[1];
        assert!(heads > 0 && c.is_multiple_of(heads), "heads must divide channels");
        let hd = c / heads;
        let ls = locv.shape().to_vec();
        assert_eq!(ls.len(), 5, "loc [q, heads, levels, points, 2]");
        let (nq, nh, nl, np) = (ls[0], ls[1], ls[2], ls[3]);
        assert_eq!(nh, heads);
        assert_eq!(nl, levels.len(), "level count");
        assert_eq!(ls[4], 2);
        assert_eq!(attv.shape(), &[nq, nh, nl, np]);
        let levels = levels.to_vec();
        for l in &levels {
            assert!(l.start + l.height * l.width <= value.shape()[0], "level rows");
        }

        let vs = value.as_standard_layout();
        let vs = vs.as_slice().unwrap();
        let lsl = locv.as_standard_layout();
        let lsl = lsl.as_slice().unwrap();
        let asl = attv.as_standard_layout();
        let asl = asl.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[nq, c]));
        {
            let os = out.as_slice_mut().unwrap();
            for q in 0..nq {
                for h in 0..nh {
                    let dst = &mut os[q * c + h * hd..q * c + (h + 1) * hd];
                    for (l, lvl) in levels.iter().enumerate() {
                        for p in 0..np {
                            let s = ((q * nh + h) * nl + l) * np + p;
                            let a = asl[s];
                            let (cs, _, _) = corners(lsl[2 * s], lsl[2 * s + 1], lvl);
                            for cr in &cs {
                                let Some(row) = cr.row else { continue };
                                let w = a * cr.weight;
                                let src = &vs[row * c + h * hd..row * c + (h + 1) * hd];
                                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v);
                            }
                        }
                    }
                }
            }
        }

        self.g.op(
            out,
            &[self, loc, attn],
            Box::new(move |ctx| {
                let vs = ctx.inputs[0].as_standard_layout();
                let vs = vs.as_slice().unwrap();
                let lsl = ctx.inputs[1].as_standard_layout();
                let lsl = lsl.as_slice().unwrap();
                let asl = ctx.inputs[2].as_standard_layout();
                let asl = asl.as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dval = ArrayD::<T>::zeros(ctx.inputs[0].raw_dim());
                let mut dloc = ArrayD::<T>::zeros(ctx.inputs[1].raw_dim());
                let mut datt = ArrayD::<T>::zeros(ctx.inputs[2].raw_dim());
                let dvs = dval.as_slice_mut().unwrap();
                let dls = dloc.as_slice_mut().unwrap();
                let das = datt.as_slice_mut().unwrap();
                for q in 0..nq {
                    for h in 0..nh {
                        let go = &gs[q * c + h * hd..q * c + (h + 1) * hd];
                        for (l, lvl) in levels.iter().enumerate() {
                            for p in 0..np {
                                let s = ((q * nh + h) * nl + l) * np + p;
                                let a = asl[s];
                                let (cs, fx, fy) = corners(lsl[2 * s], lsl[2 * s + 1], lvl);
                                // dot(value_corner, grad_out) per corner
                                let mut dots = [T::zero(); 4];
                                for (ci, cr) in cs.iter().enumerate() {
                                    let Some(row) = cr.row else { continue };
                                    let src = &vs[row * c + h * hd..row * c + (h + 1) * hd];
                                    dots[ci] = src.iter().zip(go).map(|(&v, &gv)| v * gv).sum();
                                    let w = a * cr.weight;
                                    let dst = &mut dvs[row * c + h * hd..row * c + (h + 1) * hd];
                                    dst.iter_mut().zip(go).for_each(|(d, &gv)| *d += w * gv);
                                }
                                das[s] = cs.iter().zip(&dots).map(|(cr, &d)| cr.weight * d).sum();
                                let one = T::one();
                                let dfx = (one - fy) * (dots[1] - dots[0]) + fy * (dots[3] - dots[2]);
                                let dfy = (one - fx) * (dots[2] - dots[0]) + fx * (dots[3] - dots[1]);
                                dls[2 * s] = a * dfx * T::of(lvl.width as f64);
                                dls[2 * s + 1] = a * dfy * T::of(lvl.height as f64);
                            }
                        }
                    }
                }
                vec![Some(dval), Some(dloc), Some(datt)]
            }),
        )
    }
}
