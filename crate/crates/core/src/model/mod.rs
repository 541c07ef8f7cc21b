//! The recurrent function: a single-layer GRU with a linear head, its
//! exact backward pass, MSE loss and the Adam optimizer.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod gru;
mod params;

pub use adam::{adam_step, adam_update, AdamState};
pub use gradcheck::{central_difference, finite_diff_grad, sequence_loss};
pub use gru::{forward_batch, gru_backward, gru_forward, mse_loss, Feedback, ForwardTrace};
pub use params::{init_gru, Block, GruDims, GruParams, Gradients};
