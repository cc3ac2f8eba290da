use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{affine, leaky_relu, leaky_relu_grad, param_rng, Matrix, Vector};

/// Fully-connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vector,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Matrix::zeros(d_out, d_in),
            b: Vector::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }

    fn init(d_in: usize, d_out: usize, seed: u64, stream: u64) -> Self {
        let mut d = Dense::zeros(d_in, d_out);
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut rng = param_rng(seed, stream);
        for w in d.w.as_mut_slice() {
            *w = rng.gen_range(-bound..=bound);
        }
        d
    }
}

/// Prediction head: two leaky-ReLU hidden layers and a linear projection
/// back to velocity space.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layer1: Dense,
    pub layer2: Dense,
    pub out: Dense,
}

impl HeadParams {
    /// `d_in` is the velocity dim plus one hidden state per level.
    pub fn zeros(d_in: usize, h1: usize, h2: usize, d_out: usize) -> Self {
        HeadParams {
            layer1: Dense::zeros(d_in, h1),
            layer2: Dense::zeros(h1, h2),
            out: Dense::zeros(h2, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.layer1.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.out.d_out()
    }

    pub fn param_count(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count() + self.out.param_count()
    }

    /// Closed form `(d_v + M h + 1) h1 + (h1 + 1) h2 + (h2 + 1) d_v`.
    pub fn expected_count(d_v: usize, levels: usize, hidden: usize, h1: usize, h2: usize) -> usize {
        (d_v + levels * hidden + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * d_v
    }
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` weights, zero biases. Each layer draws
/// from its own stream starting at `stream`.
pub fn init_head(
    d_in: usize,
    h1: usize,
    h2: usize,
    d_out: usize,
    seed: u64,
    stream: u64,
) -> HeadParams {
    HeadParams {
        layer1: Dense::init(d_in, h1, seed, stream),
        layer2: Dense::init(h1, h2, seed, stream + 1),
        out: Dense::init(h2, d_out, seed, stream + 2),
    }
}

#[derive(Debug, Clone)]
pub struct HeadTape {
    pub input: Vector,
    pub pre1: Vector,
    /// Layer-1 activation after dropout; input to layer 2.
    pub act1: Vector,
    pub pre2: Vector,
    pub act2: Vector,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)); `None` when inactive.
    pub mask1: Option<Vec<f64>>,
    pub mask2: Option<Vec<f64>>,
    pub hidden_sizes: Vec<usize>,
}

/// Dropout applied to the two hidden activations during training.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout_mask<R: Rng>(n: usize, d: &mut Option<Dropout<'_, R>>) -> Option<Vec<f64>> {
    let d = d.as_mut()?;
    if d.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - d.rate);
    Some(
        (0..n)
            .map(|_| {
                if d.rng.gen::<f64>() < d.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn activate(pre: &Vector, slope: f64, mask: Option<&[f64]>) -> Vector {
    let mut a: Vec<f64> = pre
        .as_slice()
        .iter()
        .map(|&x| leaky_relu(x, slope))
        .collect();
    if let Some(m) = mask {
        for (x, k) in a.iter_mut().zip(m) {
            *x *= k;
        }
    }
    Vector(a)
}

pub fn head_forward(
    hp: &HeadParams,
    v_t: &Vector,
    hiddens: &[&Vector],
    slope: f64,
) -> Result<(Vector, HeadTape)> {
    head_forward_with::<rand_chacha::ChaCha8Rng>(hp, v_t, hiddens, slope, None)
}

pub fn head_forward_with<R: Rng>(
    hp: &HeadParams,
    v_t: &Vector,
    hiddens: &[&Vector],
    slope: f64,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<(Vector, HeadTape)> {
    let width = v_t.len() + hiddens.iter().map(|h| h.len()).sum::<usize>();
    if width != hp.d_in() {
        return Err(Error::config(
            "levels",
            format!(
                "head expects {} inputs but received velocity of {} and {} hidden states totalling {}",
                hp.d_in(),
                v_t.len(),
                hiddens.len(),
                width
            ),
        ));
    }
    let input = Vector::concat(std::iter::once(v_t).chain(hiddens.iter().copied()));
    let pre1 = affine(&hp.layer1.w, &input, &hp.layer1.b)?;
    let mask1 = dropout_mask(pre1.len(), &mut dropout);
    let act1 = activate(&pre1, slope, mask1.as_deref());
    let pre2 = affine(&hp.layer2.w, &act1, &hp.layer2.b)?;
    let mask2 = dropout_mask(pre2.len(), &mut dropout);
    let act2 = activate(&pre2, slope, mask2.as_deref());
    let out = affine(&hp.out.w, &act2, &hp.out.b)?;
    let tape = HeadTape {
        input,
        pre1,
        act1,
        pre2,
        act2,
        mask1,
        mask2,
        hidden_sizes: hiddens.iter().map(|h| h.len()).collect(),
    };
    Ok((out, tape))
}

fn dense_backward(
    layer: &Dense,
    grad: &mut Dense,
    input: &Vector,
    d_out: &[f64],
) -> Result<Vector> {
    grad.w.add_outer(d_out, input.as_slice());
    for (b, d) in grad.b.as_mut_slice().iter_mut().zip(d_out) {
        *b += d;
    }
    layer.w.transpose_mul(d_out)
}

fn activation_backward(d_act: Vector, pre: &Vector, slope: f64, mask: Option<&[f64]>) -> Vec<f64> {
    let mut d = d_act.into_vec();
    for (j, x) in d.iter_mut().enumerate() {
        *x *= leaky_relu_grad(pre[j], slope);
        if let Some(m) = mask {
            *x *= m[j];
        }
    }
    d
}

/// Accumulates parameter gradients into `grads`; returns the gradient for
/// the velocity input and for each hidden input.
pub fn head_backward_into(
    hp: &HeadParams,
    tape: &HeadTape,
    grad_out: &[f64],
    slope: f64,
    grads: &mut HeadParams,
) -> Result<(Vector, Vec<Vector>)> {
    if grad_out.len() != hp.d_out() {
        return Err(Error::shape(
            "head_backward",
            format!(
                "head outputs {} values, gradient has {}",
                hp.d_out(),
                grad_out.len()
            ),
        ));
    }
    if tape.input.len() != hp.d_in() {
        return Err(Error::shape(
            "head_backward",
            "tape does not match head shape",
        ));
    }
    let d_act2 = dense_backward(&hp.out, &mut grads.out, &tape.act2, grad_out)?;
    let d_pre2 = activation_backward(d_act2, &tape.pre2, slope, tape.mask2.as_deref());
    let d_act1 = dense_backward(&hp.layer2, &mut grads.layer2, &tape.act1, &d_pre2)?;
    let d_pre1 = activation_backward(d_act1, &tape.pre1, slope, tape.mask1.as_deref());
    let d_input = dense_backward(&hp.layer1, &mut grads.layer1, &tape.input, &d_pre1)?.into_vec();

    let d_v = hp.d_in() - tape.hidden_sizes.iter().sum::<usize>();
    let grad_v = Vector(d_input[..d_v].to_vec());
    let mut offset = d_v;
    let grad_hiddens = tape
        .hidden_sizes
        .iter()
        .map(|&n| {
            let g = Vector(d_input[offset..offset + n].to_vec());
            offset += n;
            g
        })
        .collect();
    Ok((grad_v, grad_hiddens))
}

pub fn head_backward(
    hp: &HeadParams,
    tape: &HeadTape,
    grad_out: &Vector,
    slope: f64,
) -> Result<(HeadParams, Vector, Vec<Vector>)> {
    let mut grads = HeadParams::zeros(hp.d_in(), hp.layer1.d_out(), hp.layer2.d_out(), hp.d_out());
    let (gv, gh) = head_backward_into(hp, tape, grad_out.as_slice(), slope, &mut grads)?;
    Ok((grads, gv, gh))
}
