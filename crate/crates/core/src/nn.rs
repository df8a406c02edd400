//! Parameter initialization and the small layers shared by every module.
//!
//! Feature maps are token matrices `[h * w, channels]` in row-major pixel
//! order; convolutions and resampling are expressed as row gathers.

use std::sync::Arc;

use docseg_autograd::{Graph, ParamStore, Real, RowMap, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a named parameter set from a seeded generator.
pub struct Init {
    ps: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            ps: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let rng = &mut self.rng;
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..=bound));
        self.ps.insert(name, v);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.ps.insert(name, ArrayD::from_elem(IxDyn(shape), value));
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        self.ps.insert(name, value);
    }

    /// Weight `[fan_in, fan_out]` (Xavier uniform) and zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound);
        self.constant(&format!("{name}.b"), &[fan_out], 0.0);
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.constant(&format!("{name}.g"), &[dim], 1.0);
        self.constant(&format!("{name}.b"), &[dim], 0.0);
    }

    /// Layers `name.0 .. name.{n-2}` mapping `dims[i] -> dims[i + 1]`.
    pub fn mlp(&mut self, name: &str, dims: &[usize]) {
        for (i, pair) in dims.windows(2).enumerate() {
            self.linear(&format!("{name}.{i}"), pair[0], pair[1]);
        }
    }

    /// `k x k` convolution stored as a `[k * k * cin, cout]` matrix.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        let fan_in = k * k * cin;
        let bound = (6.0 / (fan_in + cout) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[fan_in, cout], bound);
        self.constant(&format!("{name}.b"), &[cout], 0.0);
    }

    pub fn finish<T: Real>(self) -> ParamStore<T> {
        self.ps.cast()
    }
}

pub fn linear<'g, T: Real>(g: &'g Graph<T>, name: &str, x: Tensor<'g, T>) -> Tensor<'g, T> {
    let b = g.try_param(&format!("{name}.b"));
    x.linear(g.param(&format!("{name}.w")), b)
}

pub fn layer_norm<'g, T: Real>(g: &'g Graph<T>, name: &str, x: Tensor<'g, T>) -> Tensor<'g, T> {
    x.layer_norm(
        g.param(&format!("{name}.g")),
        g.param(&format!("{name}.b")),
        1e-5,
    )
}

/// `layers` linear maps with GELU between them.
pub fn mlp<'g, T: Real>(g: &'g Graph<T>, name: &str, x: Tensor<'g, T>, layers: usize) -> Tensor<'g, T> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, &format!("{name}.{i}"), h);
        if i + 1 < layers {
            h = h.gelu();
        }
    }
    h
}

/// Rows `y * w + x` shifted by `(dy, dx)` with zero padding.
fn shift_map(h: usize, w: usize, dy: isize, dx: isize) -> RowMap {
    RowMap::select(
        h * w,
        (0..h).flat_map(move |y| {
            (0..w).map(move |x| {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                    .then(|| sy as usize * w + sx as usize)
            })
        }),
    )
}

/// Same-padded convolution of a `[h * w, cin]` map with kernel `k` in {1, 3}.
pub fn conv2d<'g, T: Real>(
    g: &'g Graph<T>,
    name: &str,
    x: Tensor<'g, T>,
    h: usize,
    w: usize,
    k: usize,
) -> Tensor<'g, T> {
    assert_eq!(x.dim(0), h * w, "conv input rows");
    match k {
        1 => linear(g, name, x),
        3 => {
            let taps: Vec<Tensor<'g, T>> = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| {
                    if dy == 0 && dx == 0 {
                        x
                    } else {
                        x.gather_rows(&Arc::new(shift_map(h, w, dy, dx)))
                    }
                })
                .collect();
            linear(g, name, Tensor::concat(&taps, 1))
        }
        _ => panic!("unsupported kernel size {k}"),
    }
}

/// Bilinear 2x upsampling with half-pixel centres and edge clamping.
pub fn upsample2x_map(h: usize, w: usize) -> RowMap {
    let taps = |i: usize, n: usize| -> (usize, usize, f64) {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(oh * ow * 4);
    let mut weight = Vec::with_capacity(oh * ow * 4);
    for y in 0..oh {
        let (y0, y1, fy) = taps(y, h);
        for x in 0..ow {
            let (x0, x1, fx) = taps(x, w);
            for (r, c, wt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                index.push((r * w + c) as u32);
                weight.push(wt);
            }
        }
    }
    RowMap {
        in_rows: h * w,
        out_rows: oh * ow,
        per_row: 4,
        index,
        weight: Some(weight),
    }
}

pub fn upsample2x<'g, T: Real>(x: Tensor<'g, T>, h: usize, w: usize) -> Tensor<'g, T> {
    x.gather_rows(&Arc::new(upsample2x_map(h, w)))
}
