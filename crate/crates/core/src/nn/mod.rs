//! Minimal dense tensors with reverse-mode differentiation, sized for the
//! small convolutional networks in [`crate::model`].

mod graph;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var, PROB_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{conv_out_len, softmax_in_place, spec_elem};
