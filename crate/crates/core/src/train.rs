//! Rollout loss, optimizers, learning-rate schedule and the training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{backward, run, Mode, Model, Params};
use crate::error::{Error, Result};
use crate::kvconfig::KvFile;
use crate::layers::checkpoint::CheckpointFile;
use crate::numcore::{clip_global_norm, Vector};
use crate::parallel::{self, Execution};
use crate::posedata::{TrainingSet, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    /// Mean Euclidean error of the integrated forecast poses.
    Pose,
    /// Mean Euclidean error of the forecast velocities.
    Velocity,
}

impl FromStr for LossSpace {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pose" => Ok(LossSpace::Pose),
            "velocity" => Ok(LossSpace::Velocity),
            _ => Err(s.to_string()),
        }
    }
}

impl fmt::Display for LossSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSpace::Pose => "pose",
            LossSpace::Velocity => "velocity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(s.to_string()),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_space: LossSpace,
    pub seed: u64,
    /// Observed frames per training window.
    pub seed_len: usize,
    /// Forecast frames per training window.
    pub target_len: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            clip_norm: 5.0,
            lr0: 0.01,
            decay_factor: 0.95,
            decay_every: 2000,
            iterations: 100_000,
            optimizer: OptimizerKind::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_space: LossSpace::Pose,
            seed: 0,
            seed_len: 50,
            target_len: 25,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::config("decay_factor", "must be positive"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every", "must be at least 1"));
        }
        if self.seed_len < 2 {
            return Err(Error::config(
                "seed_len",
                "needs at least 2 frames for a velocity",
            ));
        }
        if self.target_len == 0 {
            return Err(Error::config("target_len", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            clip_norm: kv.take_or("clip_norm", d.clip_norm)?,
            lr0: kv.take_or("lr0", d.lr0)?,
            decay_factor: kv.take_or("decay_factor", d.decay_factor)?,
            decay_every: kv.take_or("decay_every", d.decay_every)?,
            iterations: kv.take_or("iterations", d.iterations)?,
            optimizer: kv.take_or("optimizer", d.optimizer)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            adam_eps: kv.take_or("adam_eps", d.adam_eps)?,
            loss_space: kv.take_or("loss_space", d.loss_space)?,
            seed: kv.take_or("seed", d.seed)?,
            seed_len: kv.take_or("seed_len", d.seed_len)?,
            target_len: kv.take_or("target_len", d.target_len)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::load(path)?)
    }
}

/// `lr0 · decay_factor^⌊iteration / decay_every⌋`.
pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((iteration / cfg.decay_every) as i32)
}

/// Loss on one window and its gradient with respect to every parameter,
/// backpropagated through the whole observe-and-forecast rollout.
pub fn rollout_loss(
    model: &Model,
    window: &Window,
    loss_space: LossSpace,
) -> Result<(f64, Params)> {
    rollout_loss_with(model, window, loss_space, Mode::Eval)
}

pub fn rollout_loss_with(
    model: &Model,
    window: &Window,
    loss_space: LossSpace,
    mode: Mode<'_>,
) -> Result<(f64, Params)> {
    if window.target.is_empty() {
        return Err(Error::Input("window has no target frames".into()));
    }
    let seed = window.seed_velocities()?;
    let n = window.target.len();
    let trace = run(model, &seed, n, mode)?;
    let preds = trace.forecast();
    let (loss, grad_preds) =
        forecast_loss(window.last_seed_frame(), preds, &window.target, loss_space);
    if !loss.is_finite() {
        return Err(Error::numeric("rollout loss"));
    }
    let grads = backward(model, &trace, &grad_preds)?;
    Ok((loss, grads))
}

/// Mean per-frame Euclidean error and its gradient with respect to each
/// predicted velocity.
pub fn forecast_loss(
    last_pose: &Vector,
    preds: &[Vector],
    target: &[Vector],
    space: LossSpace,
) -> (f64, Vec<Vector>) {
    let n = target.len();
    let dim = last_pose.len();
    let mut loss = 0.0;
    let mut frame_grads: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pose = last_pose.as_slice().to_vec();
    let mut prev_truth = last_pose.as_slice();
    for (p, t) in preds.iter().zip(target) {
        let err: Vec<f64> = match space {
            LossSpace::Pose => {
                for (x, v) in pose.iter_mut().zip(p.as_slice()) {
                    *x += v;
                }
                pose.iter().zip(t.as_slice()).map(|(a, b)| a - b).collect()
            }
            LossSpace::Velocity => p
                .as_slice()
                .iter()
                .zip(t.as_slice().iter().zip(prev_truth))
                .map(|(v, (b, a))| v - (b - a))
                .collect(),
        };
        prev_truth = t.as_slice();
        let norm = err.iter().map(|e| e * e).sum::<f64>().sqrt();
        loss += norm / n as f64;
        frame_grads.push(if norm > 0.0 {
            err.iter().map(|e| e / (norm * n as f64)).collect()
        } else {
            vec![0.0; dim]
        });
    }
    let grads = match space {
        // Pose j depends on every velocity up to j.
        LossSpace::Pose => {
            let mut acc = vec![0.0; dim];
            let mut out = vec![Vector::zeros(dim); n];
            for j in (0..n).rev() {
                for (a, g) in acc.iter_mut().zip(&frame_grads[j]) {
                    *a += g;
                }
                out[j] = Vector(acc.clone());
            }
            out
        }
        LossSpace::Velocity => frame_grads.into_iter().map(Vector).collect(),
    };
    (loss, grads)
}

pub fn sgd_step(params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
    check_same_shape(params, grads)?;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        AdamState {
            m: Params::zeros_like(like),
            v: Params::zeros_like(like),
            t: 0,
        }
    }
}

pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    check_same_shape(params, grads)?;
    check_same_shape(params, &state.m)?;
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn check_same_shape(a: &Params, b: &Params) -> Result<()> {
    let same = a.tensors().len() == b.tensors().len()
        && a.tensors()
            .iter()
            .zip(b.tensors())
            .all(|(x, y)| x.len() == y.len());
    if same {
        Ok(())
    } else {
        Err(Error::shape(
            "optimizer",
            "gradient shapes differ from parameter shapes",
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

/// Mean loss and mean gradient over a batch of windows. Window `i` uses
/// dropout generator `dropout_seeds[i]`. Per-window results are reduced in
/// index order, so the result does not depend on `exec`.
pub fn batch_gradient(
    model: &Model,
    windows: &[Window],
    dropout_seeds: &[u64],
    loss_space: LossSpace,
    exec: Execution,
) -> Result<(f64, Params)> {
    assert_eq!(windows.len(), dropout_seeds.len());
    if windows.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_window = parallel::map_indexed_with(exec, windows.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seeds[i]);
        rollout_loss_with(model, &windows[i], loss_space, Mode::Train(&mut rng))
    });
    let mut total_loss = 0.0;
    let mut total = Params::zeros_like(&model.params);
    for r in per_window {
        let (loss, grads) = r?;
        total_loss += loss;
        total.add_assign(&grads);
    }
    let k = 1.0 / windows.len() as f64;
    total.scale(k);
    Ok((total_loss * k, total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.lr));
    }
    s
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCheckpoint {
    pub model: Model,
    /// Completed iterations.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: OptimizerState,
}

impl TrainCheckpoint {
    pub fn to_file(&self) -> CheckpointFile {
        let mut file = self.model.to_checkpoint();
        let seed_hex: String = self
            .rng
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        file.config
            .push(("iteration".into(), self.iteration.to_string()));
        file.config.push(("rng_seed".into(), seed_hex));
        file.config
            .push(("rng_stream".into(), self.rng.get_stream().to_string()));
        file.config
            .push(("rng_word_pos".into(), self.rng.get_word_pos().to_string()));
        match &self.optimizer {
            OptimizerState::Sgd => file.config.push(("optimizer".into(), "sgd".into())),
            OptimizerState::Adam(a) => {
                file.config.push(("optimizer".into(), "adam".into()));
                file.config.push(("adam_t".into(), a.t.to_string()));
                file.tensors.extend(a.m.named_tensors("adam.m."));
                file.tensors.extend(a.v.named_tensors("adam.v."));
            }
        }
        file
    }

    pub fn from_file(file: &CheckpointFile) -> Result<Self> {
        let model = Model::from_checkpoint(file)?;
        let bad = |k: &str| Error::Format(format!("bad value for `{k}`"));
        let iteration = file
            .require("iteration")?
            .parse()
            .map_err(|_| bad("iteration"))?;
        let hex = file.require("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(
            file.require("rng_stream")?
                .parse()
                .map_err(|_| bad("rng_stream"))?,
        );
        rng.set_word_pos(
            file.require("rng_word_pos")?
                .parse()
                .map_err(|_| bad("rng_word_pos"))?,
        );
        let optimizer = match file.require("optimizer")? {
            "sgd" => OptimizerState::Sgd,
            "adam" => {
                let mut a = AdamState::new(&model.params);
                a.t = file.require("adam_t")?.parse().map_err(|_| bad("adam_t"))?;
                a.m.read_tensors(file, "adam.m.")?;
                a.v.read_tensors(file, "adam.v.")?;
                OptimizerState::Adam(a)
            }
            _ => return Err(bad("optimizer")),
        };
        Ok(TrainCheckpoint {
            model,
            iteration,
            rng,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&CheckpointFile::load(path)?)
    }
}

/// Stateful training run over a label-free [`TrainingSet`].
pub struct Trainer<'a> {
    state: TrainCheckpoint,
    set: &'a TrainingSet,
    cfg: TrainConfig,
    pub exec: Execution,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, set: &'a TrainingSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if set.dim() != model.config.dim {
            return Err(Error::config(
                "dim",
                format!(
                    "model dim {} but training data has dim {}",
                    model.config.dim,
                    set.dim()
                ),
            ));
        }
        if set.window_count(cfg.seed_len, cfg.target_len) == 0 {
            return Err(Error::Input(format!(
                "no training sequence is long enough for {} + {} frames",
                cfg.seed_len, cfg.target_len
            )));
        }
        let optimizer = match cfg.optimizer {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(&model.params)),
        };
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            state: TrainCheckpoint {
                model,
                iteration: 0,
                rng,
                optimizer,
            },
            set,
            cfg,
            exec: Execution::Auto,
        })
    }

    pub fn resume(
        checkpoint: TrainCheckpoint,
        set: &'a TrainingSet,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let mut t = Trainer::new(checkpoint.model.clone(), set, cfg)?;
        let kind_matches = matches!(
            (&checkpoint.optimizer, t.cfg.optimizer),
            (OptimizerState::Sgd, OptimizerKind::Sgd)
                | (OptimizerState::Adam(_), OptimizerKind::Adam)
        );
        if !kind_matches {
            return Err(Error::config(
                "optimizer",
                "differs from the checkpointed run",
            ));
        }
        t.state = checkpoint;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn checkpoint(&self) -> &TrainCheckpoint {
        &self.state
    }

    pub fn into_model(self) -> Model {
        self.state.model
    }

    /// One optimizer update. On a non-finite loss or gradient the state is
    /// left at the last finite iterate and an error is returned.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.state.iteration;
        let mut rng = self.state.rng.clone();
        let mut windows = Vec::with_capacity(self.cfg.batch_size);
        let mut dropout_seeds = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            windows.push(self.set.sample_window(
                &mut rng,
                self.cfg.seed_len,
                self.cfg.target_len,
            )?);
            dropout_seeds.push(rng.gen::<u64>());
        }
        let (loss, mut grads) = batch_gradient(
            &self.state.model,
            &windows,
            &dropout_seeds,
            self.cfg.loss_space,
            self.exec,
        )
        .map_err(|e| match e {
            Error::Numeric { context } => Error::numeric(format!("{context} at iteration {it}")),
            other => other,
        })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::numeric(format!(
                "loss or gradient at iteration {it}"
            )));
        }
        clip_global_norm(&mut grads.tensors_mut(), self.cfg.clip_norm);
        let lr = lr_at(&self.cfg, it);
        let mut params = self.state.model.params.clone();
        let mut optimizer = self.state.optimizer.clone();
        match &mut optimizer {
            OptimizerState::Sgd => sgd_step(&mut params, &grads, lr)?,
            OptimizerState::Adam(a) => adam_step(&mut params, &grads, a, lr, &self.cfg)?,
        }
        if !params.is_finite() {
            return Err(Error::numeric(format!("parameters after iteration {it}")));
        }
        self.state.model.params = params;
        self.state.optimizer = optimizer;
        self.state.rng = rng;
        self.state.iteration += 1;
        Ok(LossRecord {
            iteration: it,
            loss,
            lr,
        })
    }

    /// Runs until `cfg.iterations` updates have been applied, calling
    /// `on_checkpoint` every `checkpoint_every` iterations.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&LossRecord),
        mut on_checkpoint: impl FnMut(&TrainCheckpoint) -> Result<()>,
    ) -> Result<()> {
        while self.state.iteration < self.cfg.iterations {
            let rec = self.step()?;
            on_record(&rec);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.iteration.is_multiple_of(every) {
                on_checkpoint(&self.state)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<TrainCheckpoint>,
}

/// Trains `model` for `cfg.iterations` updates, keeping every periodic
/// checkpoint in memory.
pub fn train_loop(model: Model, set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, set, cfg.clone())?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    trainer.run(
        |r| losses.push(*r),
        |c| {
            checkpoints.push(c.clone());
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        losses,
        checkpoints,
    })
}
