//! Recurrent cell, prediction head, gradient checking and the checkpoint
//! container.

pub mod checkpoint;
pub mod gradcheck;
mod head;
mod lstm;

pub use head::{
    head_backward, head_backward_into, head_forward, head_forward_with, init_head, Dense, Dropout,
    HeadParams, HeadTape,
};
pub use lstm::{
    init_lstm, init_lstm_with, lstm_step, lstm_step_backward, lstm_step_backward_into, LstmParams,
    LstmState, LstmTape, StateGrad, GATE_CANDIDATE, GATE_FORGET, GATE_INPUT, GATE_OUTPUT,
};
