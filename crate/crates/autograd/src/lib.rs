//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] records every operation applied to [`Tensor`] handles. Named
//! parameters come from a [`ParamStore`]; after the forward pass,
//! [`Graph::backward`] walks the tape once and returns [`Gradients`].
//!
//! Besides the usual arithmetic the tape has fused nodes for the hot spots of
//! detection transformers: multi-head attention, multi-scale deformable
//! sampling and sparse row maps (window partitions, shifts, padding,
//! neighbourhood gathers, bilinear resampling).
//!
//! ```
//! use docseg_autograd::{Graph, ParamStore};
//! use ndarray::arr2;
//!
//! let mut ps = ParamStore::<f64>::new();
//! ps.insert("w", arr2(&[[2.0], [3.0]]).into_dyn());
//! let g = Graph::new(&ps);
//! let x = g.constant(arr2(&[[1.0, 1.0]]).into_dyn());
//! let loss = x.matmul(g.param("w")).square().sum_all();
//! let grads = g.backward(loss);
//! assert_eq!(grads.param("w").unwrap().as_slice().unwrap(), &[10.0, 10.0]);
//! ```

mod attention;
mod deform;
mod elementwise;
mod fused;
pub mod gradcheck;
mod graph;
mod linalg;
mod params;
mod real;
mod shape;

pub use attention::{additive_mask, Attention};
pub use deform::LevelLayout;
pub use graph::{BackFn, BackwardCtx, Gradients, Graph, Tensor};
pub use params::ParamStore;
pub use real::Real;
pub use shape::RowMap;
