//! Forecast error metrics and the zero-velocity baseline.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::posedata::{PoseSequence, Space};

/// Horizons reported for motion-capture forecasts, in milliseconds.
pub const DEFAULT_HORIZONS_MS: [u32; 6] = [80, 160, 320, 400, 560, 1000];

/// 0-based index of the forecast frame that lies `horizon_ms` after the last
/// observed frame.
pub fn horizon_frame(horizon_ms: u32, frame_interval_ms: f64) -> Result<usize> {
    let frames = horizon_ms as f64 / frame_interval_ms;
    let rounded = frames.round();
    if rounded < 1.0 || (frames - rounded).abs() > 1e-9 {
        return Err(Error::config(
            "horizons",
            format!("{horizon_ms} ms is not a whole number of {frame_interval_ms} ms frames"),
        ));
    }
    Ok(rounded as usize - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub horizons_ms: Vec<u32>,
    /// Mean error per horizon, aligned with `horizons_ms`.
    pub errors: Vec<f64>,
    /// Same layout per action label, reporting only.
    pub per_action: BTreeMap<String, Vec<f64>>,
    pub per_action_count: BTreeMap<String, usize>,
    pub count: usize,
}

fn check_pair(pred: &PoseSequence, truth: &PoseSequence) -> Result<()> {
    if pred.len() != truth.len() || pred.dim() != truth.dim() {
        return Err(Error::shape(
            "metric",
            format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.len(),
                pred.dim(),
                truth.len(),
                truth.dim()
            ),
        ));
    }
    if pred.frame_interval_ms != truth.frame_interval_ms {
        return Err(Error::Input(
            "prediction and ground truth have different frame intervals".into(),
        ));
    }
    Ok(())
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between full pose vectors at each horizon, for one
/// forecast.
pub fn angle_mae(
    pred: &PoseSequence,
    truth: &PoseSequence,
    horizons_ms: &[u32],
) -> Result<HorizonReport> {
    let mut acc = MaeAccumulator::new(horizons_ms.to_vec());
    acc.add(pred, truth, None)?;
    Ok(acc.finish())
}

/// Running average of [`angle_mae`] over many windows.
#[derive(Debug, Clone)]
pub struct MaeAccumulator {
    horizons_ms: Vec<u32>,
    sums: Vec<f64>,
    count: usize,
    per_action: BTreeMap<String, (Vec<f64>, usize)>,
}

impl MaeAccumulator {
    pub fn new(horizons_ms: Vec<u32>) -> Self {
        let n = horizons_ms.len();
        MaeAccumulator {
            horizons_ms,
            sums: vec![0.0; n],
            count: 0,
            per_action: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        pred: &PoseSequence,
        truth: &PoseSequence,
        action: Option<&str>,
    ) -> Result<()> {
        check_pair(pred, truth)?;
        let mut errs = Vec::with_capacity(self.horizons_ms.len());
        for &h in &self.horizons_ms {
            let idx = horizon_frame(h, truth.frame_interval_ms)?;
            if idx >= truth.len() {
                return Err(Error::config(
                    "horizons",
                    format!("{h} ms lies beyond the {}-frame forecast", truth.len()),
                ));
            }
            errs.push(l2_distance(
                pred.frames[idx].as_slice(),
                truth.frames[idx].as_slice(),
            ));
        }
        for (s, e) in self.sums.iter_mut().zip(&errs) {
            *s += e;
        }
        self.count += 1;
        if let Some(a) = action {
            let entry = self
                .per_action
                .entry(a.to_string())
                .or_insert_with(|| (vec![0.0; errs.len()], 0));
            for (s, e) in entry.0.iter_mut().zip(&errs) {
                *s += e;
            }
            entry.1 += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> HorizonReport {
        let mean =
            |sums: &[f64], n: usize| sums.iter().map(|s| s / n.max(1) as f64).collect::<Vec<_>>();
        HorizonReport {
            horizons_ms: self.horizons_ms.clone(),
            errors: mean(&self.sums, self.count),
            per_action: self
                .per_action
                .iter()
                .map(|(k, (s, n))| (k.clone(), mean(s, *n)))
                .collect(),
            per_action_count: self
                .per_action
                .iter()
                .map(|(k, (_, n))| (k.clone(), *n))
                .collect(),
            count: self.count,
        }
    }
}

/// Repeats the last observed pose `n_steps` times.
pub fn zero_velocity_forecast(seed: &PoseSequence, n_steps: usize) -> Result<PoseSequence> {
    let last = seed.frames.last().ok_or_else(|| {
        Error::Input("zero-velocity forecast needs at least one seed frame".into())
    })?;
    Ok(PoseSequence {
        frames: vec![last.clone(); n_steps],
        frame_interval_ms: seed.frame_interval_ms,
        space: seed.space,
        meta: seed.meta.clone(),
    })
}

pub const PCK_THRESHOLD: f64 = 0.05;

/// Percentage of joints per frame whose distance to the ground truth,
/// divided by the larger side of the ground-truth bounding box, is below
/// `threshold`. Frames whose joints all coincide have no scale and yield
/// `None`.
pub fn pck(pred: &PoseSequence, truth: &PoseSequence, threshold: f64) -> Result<Vec<Option<f64>>> {
    check_pair(pred, truth)?;
    if truth.space != Space::Planar2d {
        return Err(Error::Input(
            "PCK is defined for planar 2D joint coordinates".into(),
        ));
    }
    if !truth.dim().is_multiple_of(2) {
        return Err(Error::Input(format!(
            "2D poses need an even dimension, got {}",
            truth.dim()
        )));
    }
    Ok(pred
        .frames
        .iter()
        .zip(&truth.frames)
        .map(|(p, t)| {
            let (p, t) = (p.as_slice(), t.as_slice());
            let scale = extent(t.iter().step_by(2)).max(extent(t.iter().skip(1).step_by(2)));
            if !(scale > 0.0) {
                return None;
            }
            let joints = t.len() / 2;
            let hits = (0..joints)
                .filter(|&j| {
                    l2_distance(&p[2 * j..2 * j + 2], &t[2 * j..2 * j + 2]) / scale < threshold
                })
                .count();
            Some(100.0 * hits as f64 / joints as f64)
        })
        .collect())
}

fn extent<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

/// Per-frame PCK averaged over windows, skipping degenerate frames.
#[derive(Debug, Clone)]
pub struct PckAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
    pub skipped: usize,
}

impl PckAccumulator {
    pub fn new(frames: usize) -> Self {
        PckAccumulator {
            sums: vec![0.0; frames],
            counts: vec![0; frames],
            skipped: 0,
        }
    }

    pub fn add(&mut self, per_frame: &[Option<f64>]) {
        for (i, v) in per_frame.iter().enumerate().take(self.sums.len()) {
            match v {
                Some(x) => {
                    self.sums[i] += x;
                    self.counts[i] += 1;
                }
                None => self.skipped += 1,
            }
        }
    }

    /// `(mean pck, windows counted)` per frame.
    pub fn finish(&self) -> Vec<(f64, usize)> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| (if n > 0 { s / n as f64 } else { f64::NAN }, n))
            .collect()
    }
}

/// CSV with one row per (model, action|ALL, horizon).
pub fn horizon_csv(rows: &[(&str, &HorizonReport)]) -> String {
    let mut s = String::from("model,action,horizon_ms,mae,count\n");
    for (model, r) in rows {
        for (h, e) in r.horizons_ms.iter().zip(&r.errors) {
            s.push_str(&format!("{model},ALL,{h},{e},{}\n", r.count));
        }
        for (action, errs) in &r.per_action {
            let n = r.per_action_count.get(action).copied().unwrap_or(0);
            for (h, e) in r.horizons_ms.iter().zip(errs) {
                s.push_str(&format!("{model},{action},{h},{e},{n}\n"));
            }
        }
    }
    s
}

/// CSV with one row per (model, future frame index starting at 1).
pub fn pck_csv(rows: &[(&str, Vec<(f64, usize)>)]) -> String {
    let mut s = String::from("model,frame,pck,count\n");
    for (model, frames) in rows {
        for (i, (v, n)) in frames.iter().enumerate() {
            s.push_str(&format!("{model},{},{v},{n}\n", i + 1));
        }
    }
    s
}
