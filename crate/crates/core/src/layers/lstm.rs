use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{affine, param_rng, sigmoid, Matrix, Vector};

/// Weights of one LSTM cell.
///
/// `w` has `4h` rows and `d_in + h` columns and multiplies `[x; h_prev]`.
/// Rows are laid out in gate blocks of `h` in the order input, forget,
/// output, candidate (i, f, o, g). The same layout applies to `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub d_in: usize,
    pub hidden: usize,
    pub w: Matrix,
    pub b: Vector,
}

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

impl LstmParams {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        LstmParams {
            d_in,
            hidden,
            w: Matrix::zeros(4 * hidden, d_in + hidden),
            b: Vector::zeros(4 * hidden),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }

    /// Closed form `4h(d_in + h + 1)`.
    pub fn expected_count(d_in: usize, hidden: usize) -> usize {
        4 * hidden * (d_in + hidden + 1)
    }

    pub fn gate_bias(&self, gate: usize) -> &[f64] {
        &self.b.as_slice()[gate * self.hidden..(gate + 1) * self.hidden]
    }

    pub fn gate_bias_mut(&mut self, gate: usize) -> &mut [f64] {
        let h = self.hidden;
        &mut self.b.as_mut_slice()[gate * h..(gate + 1) * h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden),
            c: Vector::zeros(hidden),
        }
    }
}

/// Everything `lstm_step_backward` needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmTape {
    /// `[x; h_prev]`
    pub input: Vector,
    pub c_prev: Vector,
    /// Post-activation gates, `4h` entries in (i, f, o, g) order.
    pub gates: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
}

impl LstmTape {
    pub fn x(&self, d_in: usize) -> &[f64] {
        &self.input.as_slice()[..d_in]
    }

    pub fn h_prev(&self, d_in: usize) -> &[f64] {
        &self.input.as_slice()[d_in..]
    }
}

/// Uniform `[-1/√h, 1/√h]` weights; forget-gate bias set to `forget_bias`,
/// other biases zero.
pub fn init_lstm_with(
    d_in: usize,
    hidden: usize,
    seed: u64,
    stream: u64,
    forget_bias: f64,
) -> LstmParams {
    let mut p = LstmParams::zeros(d_in, hidden);
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut rng = param_rng(seed, stream);
    for w in p.w.as_mut_slice() {
        *w = rng.gen_range(-bound..=bound);
    }
    p.gate_bias_mut(GATE_FORGET).fill(forget_bias);
    p
}

pub fn init_lstm(d_in: usize, hidden: usize, seed: u64) -> LstmParams {
    init_lstm_with(d_in, hidden, seed, 0, 1.0)
}

pub fn lstm_step(p: &LstmParams, x: &Vector, s: &LstmState) -> Result<(LstmState, LstmTape)> {
    if x.len() != p.d_in {
        return Err(Error::shape(
            "lstm_step",
            format!("cell expects {} inputs, got {}", p.d_in, x.len()),
        ));
    }
    if s.h.len() != p.hidden || s.c.len() != p.hidden {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "cell hidden size {} but state has h={}, c={}",
                p.hidden,
                s.h.len(),
                s.c.len()
            ),
        ));
    }
    let h = p.hidden;
    let input = Vector::concat([x, &s.h]);
    let pre = affine(&p.w, &input, &p.b)?;
    let mut gates = pre;
    {
        let g = gates.as_mut_slice();
        for v in &mut g[..3 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut g[3 * h..] {
            *v = v.tanh();
        }
    }
    let g = gates.as_slice();
    let mut c = Vec::with_capacity(h);
    let mut tanh_c = Vec::with_capacity(h);
    let mut hn = Vec::with_capacity(h);
    for j in 0..h {
        let cj = g[h + j] * s.c[j] + g[j] * g[3 * h + j];
        let tc = cj.tanh();
        c.push(cj);
        tanh_c.push(tc);
        hn.push(g[2 * h + j] * tc);
    }
    let (c, tanh_c) = (Vector(c), Vector(tanh_c));
    let state = LstmState {
        h: Vector(hn),
        c: c.clone(),
    };
    let tape = LstmTape {
        input,
        c_prev: s.c.clone(),
        gates,
        c,
        tanh_c,
    };
    Ok((state, tape))
}

/// Gradient with respect to the previous state of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub h: Vector,
    pub c: Vector,
}

/// Backward pass of one step, accumulating parameter gradients into `grads`.
/// Returns the gradients for the step input `x` and the previous state.
pub fn lstm_step_backward_into(
    p: &LstmParams,
    tape: &LstmTape,
    grad_h: &[f64],
    grad_c: &[f64],
    grads: &mut LstmParams,
) -> Result<(Vector, StateGrad)> {
    let h = p.hidden;
    if grad_h.len() != h || grad_c.len() != h {
        return Err(Error::shape(
            "lstm_step_backward",
            "state gradient size differs from hidden size",
        ));
    }
    if tape.input.len() != p.d_in + h || tape.gates.len() != 4 * h {
        return Err(Error::shape(
            "lstm_step_backward",
            "tape does not match cell shape",
        ));
    }
    if grads.d_in != p.d_in || grads.hidden != h {
        return Err(Error::shape(
            "lstm_step_backward",
            "gradient buffer does not match cell shape",
        ));
    }
    let g = tape.gates.as_slice();
    let mut d_pre = vec![0.0; 4 * h];
    let mut dc_prev = Vec::with_capacity(h);
    for j in 0..h {
        let (i, f, o, cand) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let tc = tape.tanh_c[j];
        let d_o = grad_h[j] * tc;
        let dc = grad_c[j] + grad_h[j] * o * (1.0 - tc * tc);
        let d_i = dc * cand;
        let d_f = dc * tape.c_prev[j];
        let d_g = dc * i;
        dc_prev.push(dc * f);
        d_pre[j] = d_i * i * (1.0 - i);
        d_pre[h + j] = d_f * f * (1.0 - f);
        d_pre[2 * h + j] = d_o * o * (1.0 - o);
        d_pre[3 * h + j] = d_g * (1.0 - cand * cand);
    }
    grads.w.add_outer(&d_pre, tape.input.as_slice());
    for (gb, d) in grads.b.as_mut_slice().iter_mut().zip(&d_pre) {
        *gb += d;
    }
    let d_input = p.w.transpose_mul(&d_pre)?.into_vec();
    let (dx, dh_prev) = d_input.split_at(p.d_in);
    Ok((
        Vector(dx.to_vec()),
        StateGrad {
            h: Vector(dh_prev.to_vec()),
            c: Vector(dc_prev),
        },
    ))
}

pub fn lstm_step_backward(
    p: &LstmParams,
    tape: &LstmTape,
    grad_h: &Vector,
    grad_c: &Vector,
) -> Result<(LstmParams, Vector, StateGrad)> {
    let mut grads = LstmParams::zeros(p.d_in, p.hidden);
    let (dx, ds) =
        lstm_step_backward_into(p, tape, grad_h.as_slice(), grad_c.as_slice(), &mut grads)?;
    Ok((grads, dx, ds))
}
