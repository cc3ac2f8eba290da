//! Pose and velocity sequences, dataset ingestion, windowing, and a
//! synthetic two-band motion generator.
//!
//! Sequence files are headerless UTF-8 CSV, one frame per line with `D`
//! decimal values. A manifest lists one sequence per line as
//! `path,split,action,dim,interval_ms` (paths relative to the manifest) and
//! may end with footer lines `mask=<kept dims>` and `space=<angle_expmap|planar_2d>`.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{param_rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Space {
    /// Exponential-map joint angles.
    #[default]
    AngleExpmap,
    /// 2D joint coordinates, `(x, y)` pairs.
    Planar2d,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::AngleExpmap => "angle_expmap",
            Space::Planar2d => "planar_2d",
        })
    }
}

impl FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle_expmap" => Ok(Space::AngleExpmap),
            "planar_2d" => Ok(Space::Planar2d),
            _ => Err(Error::config("space", format!("unknown pose space `{s}`"))),
        }
    }
}

/// Provenance of a sequence. The action label is for reporting only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceMeta {
    pub source: String,
    pub action: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<Vector>,
    pub frame_interval_ms: f64,
    pub space: Space,
    pub meta: SequenceMeta,
}

impl PoseSequence {
    pub fn new(frames: Vec<Vector>, frame_interval_ms: f64) -> Result<Self> {
        let seq = PoseSequence {
            frames,
            frame_interval_ms,
            space: Space::AngleExpmap,
            meta: SequenceMeta::default(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_interval_ms > 0.0) {
            return Err(Error::Input("frame interval must be positive".into()));
        }
        if let Some(first) = self.frames.first() {
            if self.frames.iter().any(|f| f.len() != first.len()) {
                return Err(Error::Input("frames differ in dimension".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySequence {
    pub steps: Vec<Vector>,
    pub origin_pose: Vector,
    pub frame_interval_ms: f64,
}

impl VelocitySequence {
    /// `frames[0] = origin`, `frames[t+1] = frames[t] + steps[t]`.
    pub fn integrate(&self) -> PoseSequence {
        integrate(self)
    }
}

/// `steps[t] = frames[t+1] - frames[t]`.
pub fn to_velocity(p: &PoseSequence) -> Result<VelocitySequence> {
    if p.frames.len() < 2 {
        return Err(Error::Input(format!(
            "velocity needs at least 2 frames, sequence has {}",
            p.frames.len()
        )));
    }
    let steps = p
        .frames
        .windows(2)
        .map(|w| w[1].sub(&w[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(VelocitySequence {
        steps,
        origin_pose: p.frames[0].clone(),
        frame_interval_ms: p.frame_interval_ms,
    })
}

pub fn integrate(v: &VelocitySequence) -> PoseSequence {
    let mut frames = Vec::with_capacity(v.steps.len() + 1);
    frames.push(v.origin_pose.clone());
    for s in &v.steps {
        let last = frames.last().unwrap();
        frames.push(last.add(s).expect("velocity and origin share a dimension"));
    }
    PoseSequence {
        frames,
        frame_interval_ms: v.frame_interval_ms,
        space: Space::default(),
        meta: SequenceMeta::default(),
    }
}

/// Keeps frames `0, factor, 2·factor, …`.
pub fn downsample(p: &PoseSequence, factor: usize) -> Result<PoseSequence> {
    if factor < 1 {
        return Err(Error::Input(
            "downsampling factor must be at least 1".into(),
        ));
    }
    Ok(PoseSequence {
        frames: p.frames.iter().step_by(factor).cloned().collect(),
        frame_interval_ms: p.frame_interval_ms * factor as f64,
        space: p.space,
        meta: p.meta.clone(),
    })
}

/// A contiguous observed/future split of one sequence. Carries no label.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub seed: Vec<Vector>,
    pub target: Vec<Vector>,
    pub frame_interval_ms: f64,
}

impl Window {
    fn from_frames(
        frames: &[Vector],
        start: usize,
        seed_len: usize,
        target_len: usize,
        interval: f64,
    ) -> Self {
        Window {
            start,
            seed: frames[start..start + seed_len].to_vec(),
            target: frames[start + seed_len..start + seed_len + target_len].to_vec(),
            frame_interval_ms: interval,
        }
    }

    /// Velocities of the observed frames.
    pub fn seed_velocities(&self) -> Result<VelocitySequence> {
        to_velocity(&PoseSequence::new(
            self.seed.clone(),
            self.frame_interval_ms,
        )?)
    }

    /// A single zero velocity anchored at the last observed frame, for
    /// forecasting from one pose without a velocity estimate.
    pub fn zero_init_velocity(&self) -> VelocitySequence {
        let last = self.seed.last().expect("window seed is non-empty").clone();
        VelocitySequence {
            steps: vec![Vector::zeros(last.len())],
            origin_pose: last,
            frame_interval_ms: self.frame_interval_ms,
        }
    }

    pub fn last_seed_frame(&self) -> &Vector {
        self.seed.last().expect("window seed is non-empty")
    }
}

/// All windows starting at `0, stride, 2·stride, …` that fit completely.
pub fn make_windows(
    p: &PoseSequence,
    seed_len: usize,
    target_len: usize,
    stride: usize,
) -> Vec<Window> {
    assert!(
        seed_len >= 2 && target_len >= 1 && stride >= 1,
        "window lengths"
    );
    let span = seed_len + target_len;
    if p.frames.len() < span {
        return Vec::new();
    }
    (0..=p.frames.len() - span)
        .step_by(stride)
        .map(|s| Window::from_frames(&p.frames, s, seed_len, target_len, p.frame_interval_ms))
        .collect()
}

/// Frames of the training sequences with all metadata dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    sequences: Vec<Vec<Vector>>,
    frame_interval_ms: f64,
    dim: usize,
}

impl TrainingSet {
    pub fn new(sequences: &[PoseSequence]) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Input("training set is empty".into()))?;
        let dim = first.dim();
        if sequences.iter().any(|s| s.dim() != dim) {
            return Err(Error::Input(
                "training sequences differ in dimension".into(),
            ));
        }
        Ok(TrainingSet {
            sequences: sequences.iter().map(|s| s.frames.clone()).collect(),
            frame_interval_ms: first.frame_interval_ms,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of distinct windows of the given span over all sequences.
    pub fn window_count(&self, seed_len: usize, target_len: usize) -> usize {
        let span = seed_len + target_len;
        self.sequences
            .iter()
            .filter(|s| s.len() >= span)
            .map(|s| s.len() - span + 1)
            .sum()
    }

    /// Uniformly picks a long-enough sequence, then a uniform start offset.
    pub fn sample_window(
        &self,
        rng: &mut ChaCha8Rng,
        seed_len: usize,
        target_len: usize,
    ) -> Result<Window> {
        let span = seed_len + target_len;
        let eligible: Vec<&Vec<Vector>> =
            self.sequences.iter().filter(|s| s.len() >= span).collect();
        if eligible.is_empty() {
            return Err(Error::Input(format!(
                "no training sequence has {span} frames"
            )));
        }
        let seq = eligible[rng.gen_range(0..eligible.len())];
        let start = rng.gen_range(0..=seq.len() - span);
        Ok(Window::from_frames(
            seq,
            start,
            seed_len,
            target_len,
            self.frame_interval_ms,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("split must be train or test, got `{s}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub action: String,
    pub dim: usize,
    pub interval_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Dimensions kept after loading, in order.
    pub mask: Option<Vec<usize>>,
    pub space: Space,
}

impl DatasetManifest {
    /// Dimension of loaded frames after masking.
    pub fn effective_dim(&self) -> Option<usize> {
        match &self.mask {
            Some(m) => Some(m.len()),
            None => self.entries.first().map(|e| e.dim),
        }
    }

    pub fn to_text(&self, base: &Path) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                rel.display(),
                e.split,
                e.action,
                e.dim,
                e.interval_ms
            ));
        }
        if self.space != Space::AngleExpmap {
            s.push_str(&format!("space={}\n", self.space));
        }
        if let Some(m) = &self.mask {
            let dims: Vec<String> = m.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("mask={}\n", dims.join(",")));
        }
        s
    }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

pub fn parse_frames(text: &str, path: &Path, expected_dim: Option<usize>) -> Result<Vec<Vector>> {
    let mut frames = Vec::new();
    let mut dim = expected_dim;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|f| {
                let x: f64 = f.trim().parse().map_err(|_| {
                    parse_err(path, line_no, format!("not a number: `{}`", f.trim()))
                })?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(parse_err(path, line_no, "non-finite value"))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {d} columns, found {}", values.len()),
                ))
            }
            None => dim = Some(values.len()),
            _ => {}
        }
        frames.push(Vector(values));
    }
    Ok(frames)
}

/// Reads one sequence file; the dimension is taken from the first row.
pub fn load_sequence(path: &Path, frame_interval_ms: f64) -> Result<PoseSequence> {
    load_sequence_dim(path, frame_interval_ms, None)
}

fn load_sequence_dim(
    path: &Path,
    frame_interval_ms: f64,
    dim: Option<usize>,
) -> Result<PoseSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let frames = parse_frames(&text, path, dim)?;
    let mut seq = PoseSequence::new(frames, frame_interval_ms)?;
    seq.meta.source = path.display().to_string();
    Ok(seq)
}

pub fn write_sequence(path: &Path, p: &PoseSequence) -> Result<()> {
    let mut s = String::new();
    for f in &p.frames {
        let row: Vec<String> = f.as_slice().iter().map(|x| x.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    crate::layers::checkpoint::write_atomic(path, s.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut mask = None;
    let mut space = Space::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(dims) = line.strip_prefix("mask=") {
            let kept = dims
                .split(',')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err(path, line_no, "mask must list dimension indices"))?;
            mask = Some(kept);
            continue;
        }
        if let Some(s) = line.strip_prefix("space=") {
            space = s
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line_no, "unknown space"))?;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                line_no,
                "expected path,split,action,dim,interval_ms",
            ));
        }
        let split = fields[1]
            .parse()
            .map_err(|e: String| parse_err(path, line_no, e))?;
        let dim: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(path, line_no, "dim must be a positive integer"))?;
        let interval_ms: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(path, line_no, "interval must be a number"))?;
        if dim == 0 || !(interval_ms > 0.0) {
            return Err(parse_err(
                path,
                line_no,
                "dim and interval must be positive",
            ));
        }
        let entry_path = base.join(fields[0]);
        if !entry_path.is_file() {
            return Err(parse_err(
                path,
                line_no,
                format!("sequence file {} does not exist", entry_path.display()),
            ));
        }
        entries.push(ManifestEntry {
            path: entry_path,
            split,
            action: fields[2].to_string(),
            dim,
            interval_ms,
        });
    }
    if let (Some(m), Some(first)) = (&mask, entries.first()) {
        if m.is_empty() || m.iter().any(|&d| d >= first.dim) {
            return Err(Error::config(
                "mask",
                "mask indices must lie inside the declared dimension",
            ));
        }
    }
    if let Some(first) = entries.first() {
        if entries.iter().any(|e| e.dim != first.dim) {
            return Err(Error::config(
                "dim",
                "manifest entries declare different dimensions",
            ));
        }
    }
    Ok(DatasetManifest {
        entries,
        mask,
        space,
    })
}

/// Sequences of a manifest, loaded, masked and partitioned by split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PoseSequence>,
    pub test: Vec<PoseSequence>,
    pub space: Space,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in &manifest.entries {
            let mut seq = load_sequence_dim(&e.path, e.interval_ms, Some(e.dim))?;
            seq.space = manifest.space;
            seq.meta.action = Some(e.action.clone());
            if let Some(mask) = &manifest.mask {
                for f in &mut seq.frames {
                    *f = Vector(mask.iter().map(|&d| f[d]).collect());
                }
            }
            match e.split {
                Split::Train => train.push(seq),
                Split::Test => test.push(seq),
            }
        }
        Ok(Dataset {
            train,
            test,
            space: manifest.space,
        })
    }

    pub fn training_set(&self) -> Result<TrainingSet> {
        TrainingSet::new(&self.train)
    }
}

/// Period bands of the synthetic generator, in frames.
pub const FAST_BAND: (f64, f64) = (4.0, 8.0);
pub const SLOW_BAND: (f64, f64) = (32.0, 64.0);
/// Frame interval assigned to synthetic sequences.
pub const SYNTH_INTERVAL_MS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub amplitude: (f64, f64),
    pub drift: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            amplitude: (0.5, 1.0),
            drift: (-0.01, 0.01),
        }
    }
}

/// Parameters of one generated dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimParams {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub drift: f64,
}

impl DimParams {
    pub fn value(&self, t: usize) -> f64 {
        let t = t as f64;
        self.amplitude * (2.0 * PI * t / self.period + self.phase).sin() + self.drift * t
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draws per-dimension parameters. Even dimensions get a fast period, odd
/// dimensions a slow one, so every sequence mixes both scales.
pub fn draw_dim_params(rng: &mut ChaCha8Rng, d: usize, cfg: &SynthConfig) -> Vec<DimParams> {
    (0..d)
        .map(|j| {
            let band = if j % 2 == 0 { FAST_BAND } else { SLOW_BAND };
            DimParams {
                amplitude: uniform(rng, cfg.amplitude),
                period: uniform(rng, band),
                phase: rng.gen_range(0.0..2.0 * PI),
                drift: uniform(rng, cfg.drift),
            }
        })
        .collect()
}

pub fn synth_multiscale(
    n_seq: usize,
    length: usize,
    d: usize,
    seed: u64,
) -> Result<Vec<PoseSequence>> {
    synth_multiscale_with(n_seq, length, d, seed, &SynthConfig::default())
}

pub fn synth_multiscale_with(
    n_seq: usize,
    length: usize,
    d: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<PoseSequence>> {
    if d < 2 {
        return Err(Error::Input(format!(
            "synthetic motion needs at least 2 dimensions (one per band), got {d}"
        )));
    }
    (0..n_seq)
        .map(|i| {
            let mut rng = param_rng(seed, i as u64);
            let dims = draw_dim_params(&mut rng, d, cfg);
            let frames = (0..length)
                .map(|t| Vector(dims.iter().map(|p| p.value(t)).collect()))
                .collect();
            let mut seq = PoseSequence::new(frames, SYNTH_INTERVAL_MS)?;
            seq.meta.source = format!("synth-{seed}-{i}");
            Ok(seq)
        })
        .collect()
}
