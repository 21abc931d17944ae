//! Minimal dense tensor and recurrent network engine.

pub mod adam;
pub mod cell;
pub mod loss;
pub mod network;
pub mod real;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use cell::{gru_step, lstm_step, GruCellParams, LstmCellParams};
pub use loss::{masked_bce, sigmoid_head};
pub use network::{bidi_layer, Architecture, BatchInput, CellKind, Network, ParamSet};
pub use real::{gemm, Real, View};
pub use tensor::Tensor;
