use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kvconfig::KvFile;
use crate::layers::checkpoint::{CheckpointFile, NamedTensor};
use crate::layers::{init_head, init_lstm_with, HeadParams, LstmParams};

use super::schedule::{level_specs, LevelInput, LevelSpec};

/// Architecture family, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One LSTM fed poses, predicting velocities.
    SingleLayerPose,
    /// One LSTM fed velocities.
    SingleLayerVel,
    /// Two stacked LSTMs, both updating every step.
    Stacked2Vel,
    /// Two independent LSTMs; the upper one runs every `K` steps on the
    /// `K`-stride velocity.
    DoubleScaleVel,
    /// Upper LSTM runs every `K` steps on the lower LSTM's output.
    DoubleScaleHierVel,
    /// `K` weight-shared upper phases on the `K`-stride velocity.
    DoubleScalePhaseVel,
    /// Triangular-prism hierarchy: `K^(m-1)` weight-shared phases at level
    /// `m`, each fed by the level below.
    TpRnn,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SingleLayerPose,
        Variant::SingleLayerVel,
        Variant::Stacked2Vel,
        Variant::DoubleScaleVel,
        Variant::DoubleScaleHierVel,
        Variant::DoubleScalePhaseVel,
        Variant::TpRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleLayerPose => "single_layer_pose",
            Variant::SingleLayerVel => "single_layer_vel",
            Variant::Stacked2Vel => "stacked2_vel",
            Variant::DoubleScaleVel => "double_scale_vel",
            Variant::DoubleScaleHierVel => "double_scale_hier_vel",
            Variant::DoubleScalePhaseVel => "double_scale_phase_vel",
            Variant::TpRnn => "tprnn",
        }
    }

    /// `true` when the network input is the pose rather than its velocity.
    pub fn consumes_pose(self) -> bool {
        self == Variant::SingleLayerPose
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Granularity: stride between updates of consecutive levels.
    pub k: usize,
    pub levels: usize,
    /// Pose / velocity dimension.
    pub dim: usize,
    pub hidden: usize,
    pub head1: usize,
    pub head2: usize,
    pub leaky_slope: f64,
    /// Head dropout rate; only used in training mode and when `levels >= 3`.
    pub dropout_rate: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

/// Largest number of phases any level may hold.
const MAX_PHASES: usize = 1 << 16;

impl ModelConfig {
    pub fn new(variant: Variant, dim: usize) -> Self {
        let levels = match variant {
            Variant::SingleLayerPose | Variant::SingleLayerVel => 1,
            _ => 2,
        };
        ModelConfig {
            variant,
            k: 2,
            levels,
            dim,
            hidden: 1024,
            head1: 256,
            head2: 128,
            leaky_slope: 0.01,
            dropout_rate: 0.2,
            forget_bias: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        match self.variant {
            Variant::TpRnn if self.levels < 2 => {
                Err(Error::config("levels", "tprnn needs at least 2 levels"))
            }
            Variant::SingleLayerPose | Variant::SingleLayerVel if self.levels != 1 => Err(
                Error::config("levels", format!("{} has exactly 1 level", self.variant)),
            ),
            Variant::Stacked2Vel if self.levels != 2 => {
                Err(Error::config("levels", "stacked2_vel has exactly 2 levels"))
            }
            Variant::DoubleScaleVel
            | Variant::DoubleScaleHierVel
            | Variant::DoubleScalePhaseVel
                if self.levels != 2 =>
            {
                Err(Error::config(
                    "levels",
                    format!("{} has exactly 2 levels", self.variant),
                ))
            }
            Variant::DoubleScaleVel
            | Variant::DoubleScaleHierVel
            | Variant::DoubleScalePhaseVel
                if self.k != 2 =>
            {
                Err(Error::config(
                    "k",
                    format!("{} uses a fixed scale of 2", self.variant),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Dimension and range checks shared by every variant.
    pub(crate) fn validate_shapes(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("head1", self.head1),
            ("head2", self.head2),
            ("levels", self.levels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.k < 2 {
            return Err(Error::config("k", "granularity must be at least 2"));
        }
        let top = (self.k as u128).checked_pow(self.levels as u32 - 1);
        if top.is_none_or(|p| p > MAX_PHASES as u128) {
            return Err(Error::config(
                "levels",
                format!("k^(levels-1) exceeds {MAX_PHASES} phases"),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::config("leaky_slope", "must be a positive number"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::config("forget_bias", "must be finite"));
        }
        Ok(())
    }

    pub fn level_specs(&self) -> Vec<LevelSpec> {
        level_specs(self.variant, self.k, self.levels)
    }

    /// Input width of each level's cell.
    pub fn cell_inputs(&self) -> Vec<usize> {
        self.level_specs()
            .iter()
            .map(|s| match s.input {
                LevelInput::Raw | LevelInput::Strided => self.dim,
                LevelInput::Below => self.hidden,
            })
            .collect()
    }

    pub fn head_input(&self) -> usize {
        self.dim + self.levels * self.hidden
    }

    pub fn dropout_active(&self) -> bool {
        self.levels >= 3 && self.dropout_rate > 0.0
    }

    /// Closed-form stored parameter count.
    pub fn expected_param_count(&self) -> usize {
        let cells: usize = self
            .cell_inputs()
            .iter()
            .map(|&d| LstmParams::expected_count(d, self.hidden))
            .sum();
        cells
            + HeadParams::expected_count(self.dim, self.levels, self.hidden, self.head1, self.head2)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pairs: [(&str, String); 11] = [
            ("variant", self.variant.to_string()),
            ("k", self.k.to_string()),
            ("levels", self.levels.to_string()),
            ("dim", self.dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("head1", self.head1.to_string()),
            ("head2", self.head2.to_string()),
            ("leaky_slope", format!("{:?}", self.leaky_slope)),
            ("dropout", format!("{:?}", self.dropout_rate)),
            ("forget_bias", format!("{:?}", self.forget_bias)),
            ("seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Reads the keys of [`ModelConfig::to_pairs`]; `dim` is required, the
    /// rest default to [`ModelConfig::new`].
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let variant: Variant = kv.take_or("variant", Variant::TpRnn)?;
        let dim = kv.take_required("dim")?;
        let d = ModelConfig::new(variant, dim);
        let cfg = ModelConfig {
            variant,
            k: kv.take_or("k", d.k)?,
            levels: kv.take_or("levels", d.levels)?,
            dim,
            hidden: kv.take_or("hidden", d.hidden)?,
            head1: kv.take_or("head1", d.head1)?,
            head2: kv.take_or("head2", d.head2)?,
            leaky_slope: kv.take_or("leaky_slope", d.leaky_slope)?,
            dropout_rate: kv.take_or("dropout", d.dropout_rate)?,
            forget_bias: kv.take_or("forget_bias", d.forget_bias)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::load(path)?)
    }
}

/// All learnable tensors: one cell per level plus the head. Also used as the
/// gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cells: Vec<LstmParams>,
    pub head: HeadParams,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            cells: other
                .cells
                .iter()
                .map(|c| LstmParams::zeros(c.d_in, c.hidden))
                .collect(),
            head: HeadParams::zeros(
                other.head.d_in(),
                other.head.layer1.d_out(),
                other.head.layer2.d_out(),
                other.head.d_out(),
            ),
        }
    }

    /// Tensor views in storage order: `cell{i}.w`, `cell{i}.b`, then the
    /// head's `l1.w, l1.b, l2.w, l2.b, out.w, out.b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.cells.len() + 6);
        for c in &self.cells {
            out.push(c.w.as_slice());
            out.push(c.b.as_slice());
        }
        let h = &self.head;
        for d in [&h.layer1, &h.layer2, &h.out] {
            out.push(d.w.as_slice());
            out.push(d.b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.cells.len() + 6);
        for c in &mut self.cells {
            out.push(c.w.as_mut_slice());
            out.push(c.b.as_mut_slice());
        }
        let h = &mut self.head;
        for d in [&mut h.layer1, &mut h.layer2, &mut h.out] {
            out.push(d.w.as_mut_slice());
            out.push(d.b.as_mut_slice());
        }
        out
    }

    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, c) in self.cells.iter().enumerate() {
            out.push((format!("cell{i}.w"), vec![c.w.rows(), c.w.cols()]));
            out.push((format!("cell{i}.b"), vec![c.b.len()]));
        }
        for (name, d) in [
            ("l1", &self.head.layer1),
            ("l2", &self.head.layer2),
            ("out", &self.head.out),
        ] {
            out.push((format!("head.{name}.w"), vec![d.w.rows(), d.w.cols()]));
            out.push((format!("head.{name}.b"), vec![d.b.len()]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.tensor_shapes()
            .into_iter()
            .zip(self.tensors())
            .map(|((name, dims), data)| {
                NamedTensor::new(format!("{prefix}{name}"), dims, data.to_vec())
            })
            .collect()
    }

    /// Fills this (correctly shaped) set from `prefix`-named tensors.
    pub fn read_tensors(&mut self, file: &CheckpointFile, prefix: &str) -> Result<()> {
        let shapes = self.tensor_shapes();
        for ((name, dims), dst) in shapes.into_iter().zip(self.tensors_mut()) {
            let t = file.tensor(&format!("{prefix}{name}"))?;
            if t.dims != dims {
                return Err(Error::Format(format!(
                    "tensor `{prefix}{name}` has shape {:?}, model expects {:?}",
                    t.dims, dims
                )));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!(
                    "checkpoint tensor `{prefix}{name}`"
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Allocates and initializes one cell per level and the head.
///
/// Cell `m` draws weights from stream `m` of the config seed, the head's
/// three layers from streams `levels..levels+3`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    Ok(build_unchecked(cfg))
}

pub(crate) fn build_unchecked(cfg: &ModelConfig) -> Model {
    let cells = cfg
        .cell_inputs()
        .into_iter()
        .enumerate()
        .map(|(m, d_in)| init_lstm_with(d_in, cfg.hidden, cfg.seed, m as u64, cfg.forget_bias))
        .collect();
    let head = init_head(
        cfg.head_input(),
        cfg.head1,
        cfg.head2,
        cfg.dim,
        cfg.seed,
        cfg.levels as u64,
    );
    Model {
        config: cfg.clone(),
        params: Params { cells, head },
    }
}

impl Model {
    /// Same shapes as `cfg` describes, every parameter zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Model> {
        let mut m = build_model(cfg)?;
        m.params = Params::zeros_like(&m.params);
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Number of physically stored recurrent cells.
    pub fn cell_count(&self) -> usize {
        self.params.cells.len()
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            config: self.config.to_pairs(),
            tensors: self.params.named_tensors(""),
        }
    }

    /// Rebuilds a model from a checkpoint; extra (run-state) keys and
    /// tensors in the file are ignored.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Model> {
        let pairs = file
            .config
            .iter()
            .filter(|(k, _)| MODEL_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()));
        let cfg = ModelConfig::from_kv(KvFile::from_pairs(pairs))?;
        let mut model = Model::zeros(&cfg)?;
        model.params.read_tensors(file, "")?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&CheckpointFile::load(path)?)
    }
}

pub const MODEL_KEYS: [&str; 11] = [
    "variant",
    "k",
    "levels",
    "dim",
    "hidden",
    "head1",
    "head2",
    "leaky_slope",
    "dropout",
    "forget_bias",
    "seed",
];
