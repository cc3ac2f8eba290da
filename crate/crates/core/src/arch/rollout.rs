//! Forward stepping, autoregressive rollout, and backpropagation through
//! time over a recorded rollout.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    head_backward_into, head_forward_with, lstm_step, lstm_step_backward_into, Dropout, HeadTape,
    LstmState, LstmTape,
};
use crate::numcore::Vector;
use crate::posedata::VelocitySequence;

use super::model::{Model, Params};
use super::schedule::{LevelInput, LevelSpec};

/// Recurrent state of every phase at every level, plus the step counter and
/// the recent inputs needed for strided-velocity levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStateBank {
    pub levels: Vec<Vec<LstmState>>,
    pub t: usize,
    /// Most recent inputs, newest last; at most `K` are kept.
    recent: VecDeque<Vector>,
    window: usize,
}

impl PhaseStateBank {
    /// Zero state for every phase of `model`.
    pub fn new(model: &Model) -> Self {
        let cfg = &model.config;
        let levels = cfg
            .level_specs()
            .iter()
            .map(|s| vec![LstmState::zeros(cfg.hidden); s.phases])
            .collect();
        PhaseStateBank {
            levels,
            t: 0,
            recent: VecDeque::new(),
            window: cfg.k,
        }
    }

    pub fn last_input(&self) -> Option<&Vector> {
        self.recent.back()
    }

    fn check(&self, model: &Model) -> Result<()> {
        let cfg = &model.config;
        let specs = cfg.level_specs();
        let shape_ok =
            self.levels.len() == specs.len()
                && self.window == cfg.k
                && self.levels.iter().zip(&specs).all(|(l, s)| {
                    l.len() == s.phases && l.iter().all(|st| st.h.len() == cfg.hidden)
                });
        if shape_ok {
            Ok(())
        } else {
            Err(Error::config(
                "levels",
                "state bank was created for a different model configuration",
            ))
        }
    }
}

/// Training mode draws head-dropout masks from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct LevelTape {
    pub phase: usize,
    pub cell: LstmTape,
    /// Number of past inputs summed into a strided input (1..=K).
    pub strided_terms: usize,
}

/// Everything recorded by one [`model_step`].
#[derive(Debug, Clone)]
pub struct StepTape {
    pub t: usize,
    pub input: Vector,
    /// `None` for levels that did not run at this step.
    pub levels: Vec<Option<LevelTape>>,
    /// Phase each level exposed to the head.
    pub reads: Vec<usize>,
    pub head: HeadTape,
}

impl StepTape {
    /// `(level, phase)` pairs updated at this step, levels 1-based.
    pub fn updated(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .enumerate()
            .filter_map(|(l, lt)| lt.as_ref().map(|lt| (l + 1, lt.phase)))
            .collect()
    }
}

/// Advances the bank by one step on input `x_t` and predicts the next
/// velocity.
pub fn model_step(
    model: &Model,
    bank: &mut PhaseStateBank,
    x_t: &Vector,
    mode: Mode<'_>,
) -> Result<(Vector, StepTape)> {
    bank.check(model)?;
    let cfg = &model.config;
    if x_t.len() != cfg.dim {
        return Err(Error::shape(
            "model_step",
            format!("model dim is {}, input has {} entries", cfg.dim, x_t.len()),
        ));
    }
    let t = bank.t;
    bank.recent.push_back(x_t.clone());
    while bank.recent.len() > bank.window {
        bank.recent.pop_front();
    }

    let specs = cfg.level_specs();
    let mut level_tapes = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        let Some(phase) = spec.updates_at(t) else {
            level_tapes.push(None);
            continue;
        };
        let (input, strided_terms) = match spec.input {
            LevelInput::Raw => (x_t.clone(), 1),
            LevelInput::Below => {
                let below = specs[l - 1].read_at(t);
                (bank.levels[l - 1][below].h.clone(), 1)
            }
            LevelInput::Strided => {
                let mut sum = Vector::zeros(cfg.dim);
                for v in &bank.recent {
                    for (s, x) in sum.as_mut_slice().iter_mut().zip(v.as_slice()) {
                        *s += x;
                    }
                }
                (sum, bank.recent.len())
            }
        };
        let (next, cell) = lstm_step(&model.params.cells[l], &input, &bank.levels[l][phase])?;
        bank.levels[l][phase] = next;
        level_tapes.push(Some(LevelTape {
            phase,
            cell,
            strided_terms,
        }));
    }

    let reads: Vec<usize> = specs.iter().map(|s| s.read_at(t)).collect();
    let hiddens: Vec<&Vector> = reads
        .iter()
        .enumerate()
        .map(|(l, &q)| &bank.levels[l][q].h)
        .collect();
    let dropout = match mode {
        Mode::Train(rng) if cfg.dropout_active() => Some(Dropout {
            rate: cfg.dropout_rate,
            rng,
        }),
        _ => None,
    };
    let (pred, head) =
        head_forward_with(&model.params.head, x_t, &hiddens, cfg.leaky_slope, dropout)?;
    if !pred.is_finite() {
        return Err(Error::numeric(format!("prediction at step {t}")));
    }
    bank.t += 1;
    Ok((
        pred,
        StepTape {
            t,
            input: x_t.clone(),
            levels: level_tapes,
            reads,
            head,
        },
    ))
}

/// Model inputs for a seed: its velocities, or the poses they lead to for
/// pose-input variants.
fn seed_inputs(model: &Model, seed: &VelocitySequence) -> Vec<Vector> {
    if model.config.variant.consumes_pose() {
        let poses = seed.integrate();
        poses.frames[1..].to_vec()
    } else {
        seed.steps.clone()
    }
}

/// The next model input derived from the latest prediction.
fn feedback(model: &Model, last_input: &Vector, pred: &Vector) -> Vector {
    if model.config.variant.consumes_pose() {
        Vector(
            last_input
                .as_slice()
                .iter()
                .zip(pred.as_slice())
                .map(|(p, v)| p + v)
                .collect(),
        )
    } else {
        pred.clone()
    }
}

/// Runs the model over every seed velocity from a zero bank. Returns the
/// bank positioned at the forecast start and the first predicted velocity.
pub fn observe(
    model: &Model,
    seed: &VelocitySequence,
) -> Result<(PhaseStateBank, Vec<StepTape>, Vector)> {
    if seed.steps.is_empty() {
        return Err(Error::Input(
            "seed must contain at least one velocity".into(),
        ));
    }
    let mut bank = PhaseStateBank::new(model);
    let mut tapes = Vec::with_capacity(seed.steps.len());
    let mut pred = None;
    for x in seed_inputs(model, seed) {
        let (p, tape) = model_step(model, &mut bank, &x, Mode::Eval)?;
        tapes.push(tape);
        pred = Some(p);
    }
    Ok((bank, tapes, pred.expect("non-empty seed")))
}

/// Autoregressive rollout of `n_steps` velocities; `first` is the prediction
/// returned by [`observe`] and is the first element of the result.
pub fn forecast(
    model: &Model,
    bank: &mut PhaseStateBank,
    first: &Vector,
    n_steps: usize,
) -> Result<Vec<Vector>> {
    if n_steps == 0 {
        return Err(Error::Input("forecast needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(n_steps);
    out.push(first.clone());
    while out.len() < n_steps {
        let last = bank
            .last_input()
            .ok_or_else(|| Error::Input("forecast from an unobserved bank".into()))?
            .clone();
        let x = feedback(model, &last, out.last().unwrap());
        let (p, _) = model_step(model, bank, &x, Mode::Eval).map_err(|e| match e {
            Error::Numeric { .. } => Error::numeric(format!("forecast step {}", out.len())),
            other => other,
        })?;
        out.push(p);
    }
    Ok(out)
}

/// A recorded observe-then-forecast pass, ready for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub steps: Vec<StepTape>,
    /// Prediction made at every step.
    pub preds: Vec<Vector>,
    pub n_seed: usize,
}

impl Trace {
    /// The `n_forecast` velocities predicted for the future window.
    pub fn forecast(&self) -> &[Vector] {
        &self.preds[self.n_seed - 1..]
    }
}

/// Observe `seed` and forecast `n_forecast` velocities, recording tapes for
/// every step. In training mode the dropout generator is consumed in step
/// order.
pub fn run(
    model: &Model,
    seed: &VelocitySequence,
    n_forecast: usize,
    mut mode: Mode<'_>,
) -> Result<Trace> {
    if seed.steps.is_empty() {
        return Err(Error::Input(
            "seed must contain at least one velocity".into(),
        ));
    }
    if n_forecast == 0 {
        return Err(Error::Input("forecast needs at least one step".into()));
    }
    let inputs = seed_inputs(model, seed);
    let n_seed = inputs.len();
    let total = n_seed + n_forecast - 1;
    let mut bank = PhaseStateBank::new(model);
    let mut steps = Vec::with_capacity(total);
    let mut preds: Vec<Vector> = Vec::with_capacity(total);
    for t in 0..total {
        let x = if t < n_seed {
            inputs[t].clone()
        } else {
            feedback(
                model,
                &steps.last().map(|s: &StepTape| s.input.clone()).unwrap(),
                &preds[t - 1],
            )
        };
        let step_mode = match &mut mode {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        };
        let (p, tape) = model_step(model, &mut bank, &x, step_mode)?;
        steps.push(tape);
        preds.push(p);
    }
    Ok(Trace {
        steps,
        preds,
        n_seed,
    })
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient for each forecast velocity (`grad_forecast.len()` must
/// equal the forecast length of `trace`).
pub fn backward(model: &Model, trace: &Trace, grad_forecast: &[Vector]) -> Result<Params> {
    let cfg = &model.config;
    let total = trace.steps.len();
    if grad_forecast.len() != total + 1 - trace.n_seed {
        return Err(Error::shape(
            "backward",
            format!(
                "{} forecast gradients for a {}-step forecast",
                grad_forecast.len(),
                total + 1 - trace.n_seed
            ),
        ));
    }
    let specs: Vec<LevelSpec> = cfg.level_specs();
    let h = cfg.hidden;
    let mut grads = Params::zeros_like(&model.params);
    let mut d_state: Vec<Vec<(Vec<f64>, Vec<f64>)>> = specs
        .iter()
        .map(|s| vec![(vec![0.0; h], vec![0.0; h]); s.phases])
        .collect();
    let mut d_input: Vec<Vec<f64>> = vec![vec![0.0; cfg.dim]; total];
    let pose_input = cfg.variant.consumes_pose();

    for t in (0..total).rev() {
        let step = &trace.steps[t];
        let mut d_pred = if t + 1 >= trace.n_seed {
            grad_forecast[t + 1 - trace.n_seed].as_slice().to_vec()
        } else {
            vec![0.0; cfg.dim]
        };
        // Input t+1 was generated from this step's prediction.
        if t + 1 < total && t + 1 >= trace.n_seed {
            let (head, tail) = d_input.split_at_mut(t + 1);
            let next = &tail[0];
            for (d, n) in d_pred.iter_mut().zip(next) {
                *d += n;
            }
            if pose_input {
                for (d, n) in head[t].iter_mut().zip(next) {
                    *d += n;
                }
            }
        }

        let (d_x, d_hiddens) = head_backward_into(
            &model.params.head,
            &step.head,
            &d_pred,
            cfg.leaky_slope,
            &mut grads.head,
        )?;
        add(&mut d_input[t], d_x.as_slice());
        for (l, dh) in d_hiddens.iter().enumerate() {
            add(&mut d_state[l][step.reads[l]].0, dh.as_slice());
        }

        for l in (0..specs.len()).rev() {
            let Some(lt) = &step.levels[l] else { continue };
            let (dh, dc) = std::mem::take(&mut d_state[l][lt.phase]);
            let (d_in, d_prev) = lstm_step_backward_into(
                &model.params.cells[l],
                &lt.cell,
                &dh,
                &dc,
                &mut grads.cells[l],
            )?;
            d_state[l][lt.phase] = (d_prev.h.into_vec(), d_prev.c.into_vec());
            match specs[l].input {
                LevelInput::Raw => add(&mut d_input[t], d_in.as_slice()),
                LevelInput::Below => {
                    let below = specs[l - 1].read_at(t);
                    add(&mut d_state[l - 1][below].0, d_in.as_slice());
                }
                LevelInput::Strided => {
                    for j in 0..lt.strided_terms {
                        add(&mut d_input[t - j], d_in.as_slice());
                    }
                }
            }
        }
    }
    Ok(grads)
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
