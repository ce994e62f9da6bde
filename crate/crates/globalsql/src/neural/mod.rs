//! Tensor arithmetic with reverse-mode differentiation and the network
//! blocks used by the parser.

pub mod blocks;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use blocks::{
    additive_attention, bilstm_encode, ff, ff_rows, init_attention, init_bilstm, init_ff, init_gnn,
    init_lstm, lstm_step, prepare_keys, AttentionKeys, GnnLayer, LstmState,
};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Gradients, ParameterStore, Tensor};
pub use tape::{sigmoid, softmax_masked, Tape, Var};
