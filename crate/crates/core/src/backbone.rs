//! Hierarchical windowed-attention feature extractor producing a four-level
//! pyramid at strides 4, 8, 16 and 32.

use std::sync::Arc;

use docseg_autograd::{Graph, Real, RowMap, Tensor};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, mlp, Init};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per stage; odd-indexed blocks use shifted windows.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            depths: vec![1, 1, 2, 1],
            heads: vec![2, 4, 8, 8],
            window_size: 8,
            mlp_ratio: 4,
            rel_pos_bias: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != 4 {
            return Err(Error::Config("backbone.patch_size must be 4".into()));
        }
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return Err(Error::Config("backbone needs four stages of depths and heads".into()));
        }
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        for (s, (&c, &h)) in self.dims().iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "backbone stage {s}: {h} heads do not divide {c} channels"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 4] {
        [1, 2, 4, 8].map(|m| m * self.embed_dim)
    }

    pub fn init(&self, init: &mut Init) {
        let patch = self.patch_size * self.patch_size * 3;
        init.linear("backbone.patch", patch, self.embed_dim);
        init.layer_norm("backbone.patch_norm", self.embed_dim);
        let dims = self.dims();
        let table = (2 * self.window_size - 1).pow(2);
        for s in 0..4 {
            let c = dims[s];
            if s > 0 {
                init.layer_norm(&format!("backbone.merge{s}.norm"), 4 * dims[s - 1]);
                init.linear_no_bias(&format!("backbone.merge{s}.lin"), 4 * dims[s - 1], c);
            }
            for b in 0..self.depths[s] {
                let p = format!("backbone.s{s}.b{b}");
                init.layer_norm(&format!("{p}.norm1"), c);
                init.linear(&format!("{p}.qkv"), c, 3 * c);
                init.linear(&format!("{p}.proj"), c, c);
                init.layer_norm(&format!("{p}.norm2"), c);
                init.mlp(&format!("{p}.mlp"), &[c, self.mlp_ratio * c, c]);
                if self.rel_pos_bias {
                    init.uniform(&format!("{p}.rel_bias"), &[table, self.heads[s]], 0.02);
                }
            }
            init.layer_norm(&format!("backbone.norm{s}"), c);
        }
    }
}

/// Feature map stored as tokens `[h * w, channels]`, row-major over pixels.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'g, T: Real> {
    pub tokens: Tensor<'g, T>,
    pub h: usize,
    pub w: usize,
}

impl<'g, T: Real> FeatureMap<'g, T> {
    pub fn channels(&self) -> usize {
        self.tokens.dim(1)
    }

    /// Channel-first copy `[c, h, w]`.
    pub fn to_chw(&self) -> Array3<T> {
        let v = self.tokens.value();
        let c = self.channels();
        Array3::from_shape_fn((c, self.h, self.w), |(k, y, x)| v[[y * self.w + x, k]])
    }
}

/// Levels at strides 4, 8, 16, 32.
pub struct FeaturePyramid<'g, T: Real> {
    pub levels: Vec<FeatureMap<'g, T>>,
}

impl<'g, T: Real> FeaturePyramid<'g, T> {
    pub fn level(&self, stride: usize) -> Option<&FeatureMap<'g, T>> {
        STRIDES
            .iter()
            .position(|&s| s == stride)
            .and_then(|i| self.levels.get(i))
    }
}

/// Non-overlapping 4x4 patches flattened as `[patches, 3 * 16]`.
pub fn patchify<T: Real>(image: &Array3<f32>, patch: usize) -> Result<(ArrayD<T>, usize, usize)> {
    let shape = image.shape();
    if shape[0] != 3 {
        return Err(Error::Shape(format!("image has {} channels, expected 3", shape[0])));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not a multiple of {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let k = 3 * patch * patch;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[ph * pw, k]));
    let o = out.as_slice_mut().unwrap();
    for py in 0..ph {
        for px in 0..pw {
            let row = &mut o[(py * pw + px) * k..(py * pw + px + 1) * k];
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[(c * patch + dy) * patch + dx] =
                            T::of(image[[c, py * patch + dy, px * patch + dx]] as f64);
                    }
                }
            }
        }
    }
    Ok((out, ph, pw))
}

/// Linear patch stem: `[3, H, W] -> [H/4 * W/4, embed_dim]`.
pub fn patch_embed<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &BackboneConfig,
    image: &Array3<f32>,
) -> Result<FeatureMap<'g, T>> {
    let (patches, h, w) = patchify::<T>(image, cfg.patch_size)?;
    let tokens = linear(g, "backbone.patch", g.constant(patches));
    Ok(FeatureMap { tokens, h, w })
}

/// Row gathers and mask for one windowing of an `h x w` map.
pub struct WindowLayout<T: Real> {
    pub window: usize,
    pub shift: usize,
    pub windows: usize,
    /// Map rows -> `[windows * window^2]` window tokens (zeros for padding).
    pub gather: Arc<RowMap>,
    /// Window tokens back to map rows.
    pub scatter: Arc<RowMap>,
    /// Additive `[windows, t, t]` mask, present with shifts or padding.
    pub mask: Option<Arc<Array3<T>>>,
    /// For each window token, its `(row, col)` inside the window.
    pub coords: Vec<(usize, usize)>,
}

pub fn window_layout<T: Real>(h: usize, w: usize, window: usize, shifted: bool) -> WindowLayout<T> {
    let mut ws = window;
    let mut shift = if shifted { window / 2 } else { 0 };
    if h.min(w) <= window {
        ws = h.min(w);
        shift = 0;
    }
    let hp = h.div_ceil(ws) * ws;
    let wp = w.div_ceil(ws) * ws;
    let (ny, nx) = (hp / ws, wp / ws);
    let t = ws * ws;
    let mut rows = Vec::with_capacity(ny * nx * t);
    let mut labels = Vec::with_capacity(ny * nx * t);
    let band = |p: usize, n: usize| -> usize {
        if shift == 0 || p < n - ws {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let mut coords = Vec::with_capacity(t);
    for iy in 0..ws {
        for ix in 0..ws {
            coords.push((iy, ix));
        }
    }
    for wy in 0..ny {
        for wx in 0..nx {
            for &(iy, ix) in &coords {
                let (py, px) = (wy * ws + iy, wx * ws + ix);
                let (sy, sx) = ((py + shift) % hp, (px + shift) % wp);
                rows.push((sy < h && sx < w).then(|| sy * w + sx));
                labels.push(band(py, hp) * 3 + band(px, wp));
            }
        }
    }
    let needs_mask = shift > 0 || rows.iter().any(Option::is_none);
    let mask = needs_mask.then(|| {
        let mut m = Array3::<T>::zeros((ny * nx, t, t));
        for win in 0..ny * nx {
            for a in 0..t {
                for b in 0..t {
                    let (ia, ib) = (win * t + a, win * t + b);
                    if labels[ia] != labels[ib] || rows[ib].is_none() {
                        m[[win, a, b]] = T::neg_infinity();
                    }
                }
            }
        }
        Arc::new(m)
    });
    let gather = RowMap::select(h * w, rows);
    let scatter = gather.scatter_inverse();
    WindowLayout {
        window: ws,
        shift,
        windows: ny * nx,
        gather: Arc::new(gather),
        scatter: Arc::new(scatter),
        mask,
        coords,
    }
}

/// Multi-head self-attention inside (optionally shifted) windows, including
/// the qkv and output projections under `name`. Returns the updated map and
/// the attention weights `[windows, heads, t, t]`.
pub fn window_attention<'g, T: Real>(
    g: &'g Graph<T>,
    name: &str,
    x: &FeatureMap<'g, T>,
    heads: usize,
    window: usize,
    shifted: bool,
) -> Result<(FeatureMap<'g, T>, Arc<Array4<T>>)> {
    let c = x.channels();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let layout = window_layout::<T>(x.h, x.w, window, shifted);
    let t = layout.window * layout.window;
    let qkv = linear(g, &format!("{name}.qkv"), x.tokens)
        .gather_rows(&layout.gather)
        .reshape(&[layout.windows, t, 3 * c]);
    let (q, k, v) = (qkv.narrow(2, 0, c), qkv.narrow(2, c, c), qkv.narrow(2, 2 * c, c));
    let bias = g.try_param(&format!("{name}.rel_bias")).map(|table| {
        let span = ((table.dim(0) as f64).sqrt() as usize).div_ceil(2);
        let side = 2 * span - 1;
        let idx: Vec<usize> = layout
            .coords
            .iter()
            .flat_map(|&(ay, ax)| {
                layout.coords.iter().map(move |&(by, bx)| {
                    (ay + span - 1 - by) * side + (ax + span - 1 - bx)
                })
            })
            .collect();
        table.index_rows(&idx).t().reshape(&[heads, t, t])
    });
    let att = q.attention(k, v, heads, layout.mask.clone(), bias);
    let out = att
        .out
        .reshape(&[layout.windows * t, c])
        .gather_rows(&layout.scatter);
    let tokens = linear(g, &format!("{name}.proj"), out);
    Ok((FeatureMap { tokens, h: x.h, w: x.w }, att.probs))
}

fn swin_block<'g, T: Real>(
    g: &'g Graph<T>,
    name: &str,
    x: FeatureMap<'g, T>,
    heads: usize,
    window: usize,
    shifted: bool,
) -> Result<FeatureMap<'g, T>> {
    let normed = FeatureMap {
        tokens: layer_norm(g, &format!("{name}.norm1"), x.tokens),
        ..x
    };
    let (att, _) = window_attention(g, name, &normed, heads, window, shifted)?;
    let y = x.tokens + att.tokens;
    let z = y + mlp(g, &format!("{name}.mlp"), layer_norm(g, &format!("{name}.norm2"), y), 2);
    Ok(FeatureMap { tokens: z, ..x })
}

/// 2x2 neighbourhood concatenation followed by norm and projection.
fn patch_merge<'g, T: Real>(g: &'g Graph<T>, name: &str, x: FeatureMap<'g, T>) -> Result<FeatureMap<'g, T>> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot merge an odd {}x{} map", x.h, x.w)));
    }
    let (h, w) = (x.h / 2, x.w / 2);
    let parts: Vec<_> = [(0, 0), (1, 0), (0, 1), (1, 1)]
        .iter()
        .map(|&(dy, dx)| {
            let map = RowMap::select(
                x.h * x.w,
                (0..h).flat_map(|y| (0..w).map(move |xx| Some((2 * y + dy) * x.w + 2 * xx + dx))),
            );
            x.tokens.gather_rows(&Arc::new(map))
        })
        .collect();
    let cat = Tensor::concat(&parts, 1);
    let tokens = linear(g, &format!("{name}.lin"), layer_norm(g, &format!("{name}.norm"), cat));
    Ok(FeatureMap { tokens, h, w })
}

/// The first `stages` pyramid levels.
pub fn forward_stages<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &BackboneConfig,
    image: &Array3<f32>,
    stages: usize,
) -> Result<Vec<FeatureMap<'g, T>>> {
    let stem = patch_embed(g, cfg, image)?;
    let mut x = FeatureMap {
        tokens: layer_norm(g, "backbone.patch_norm", stem.tokens),
        ..stem
    };
    let mut levels = Vec::with_capacity(stages);
    for s in 0..stages.min(4) {
        if s > 0 {
            x = patch_merge(g, &format!("backbone.merge{s}"), x)?;
        }
        for b in 0..cfg.depths[s] {
            x = swin_block(g, &format!("backbone.s{s}.b{b}"), x, cfg.heads[s], cfg.window_size, b % 2 == 1)?;
        }
        levels.push(FeatureMap {
            tokens: layer_norm(g, &format!("backbone.norm{s}"), x.tokens),
            ..x
        });
    }
    Ok(levels)
}

pub fn forward_pyramid<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &BackboneConfig,
    image: &Array3<f32>,
) -> Result<FeaturePyramid<'g, T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not a multiple of 32")));
    }
    Ok(FeaturePyramid {
        levels: forward_stages(g, cfg, image, 4)?,
    })
}
