//! Minimal differentiable tensor layer: tensors, a reverse-mode tape, layers,
//! an optimiser and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spatial;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Grads, Graph, Mode, Var};
pub use layers::{BatchNorm, BiLstm, Conv1d, Conv2d, LayerNorm, Linear, Lstm};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use spatial::{pixel_shuffle, pixel_unshuffle};
pub use tensor::{Real, Tensor};

/// Tensor-level attention `softmax(q kᵀ / sqrt(d)) v` for `[n, d]` inputs.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> crate::Result<Tensor<T>> {
    let g = Graph::<T>::detached(false);
    let out = Var::attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()))?;
    Ok((*out.value()).clone())
}
