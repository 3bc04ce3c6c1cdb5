//! Numerically stable primitives and small layers with explicit backward passes.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod lstm;
pub mod math;

pub use attention::{AttentionCache, AttentionKeys, LocationAttention};
pub use conv::{maxpool2d_backward, maxpool2d_forward, pooled_len, Conv2d};
pub use gradcheck::{check_param_store, finite_diff_check, relative_error};
pub use linear::{Embedding, Linear};
pub use lstm::{Blstm, LstmCell};
pub use math::{log_add, log_softmax, log_sum_exp, sigmoid, softmax};
