//! Held-out evaluation: window selection, forecasting and report assembly.

use crate::arch::{forecast, observe, Model};
use crate::error::{Error, Result};
use crate::metrics::{pck, zero_velocity_forecast, HorizonReport, MaeAccumulator, PckAccumulator};
use crate::numcore::Vector;
use crate::parallel;
use crate::posedata::{make_windows, PoseSequence, SequenceMeta, Space, VelocitySequence, Window};

/// A test window together with its sequence's reporting metadata.
#[derive(Debug, Clone)]
pub struct EvalWindow {
    pub window: Window,
    pub space: Space,
    pub action: Option<String>,
}

impl EvalWindow {
    pub fn truth(&self) -> PoseSequence {
        PoseSequence {
            frames: self.window.target.clone(),
            frame_interval_ms: self.window.frame_interval_ms,
            space: self.space,
            meta: SequenceMeta::default(),
        }
    }
}

/// Non-overlapping future windows: consecutive windows start
/// `target_len` frames apart.
pub fn eval_windows(test: &[PoseSequence], seed_len: usize, target_len: usize) -> Vec<EvalWindow> {
    test.iter()
        .flat_map(|s| {
            make_windows(s, seed_len, target_len, target_len)
                .into_iter()
                .map(move |window| EvalWindow {
                    window,
                    space: s.space,
                    action: s.meta.action.clone(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'a> {
    ZeroVelocity,
    Model(&'a Model),
}

/// Predicted velocities integrated from `last_pose`.
pub fn integrate_from(last_pose: &Vector, velocities: &[Vector]) -> Vec<Vector> {
    let mut pose = last_pose.clone();
    velocities
        .iter()
        .map(|v| {
            for (p, d) in pose.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *p += d;
            }
            pose.clone()
        })
        .collect()
}

/// Forecast `n_steps` poses after `seed`, integrating from the observed
/// `last_pose` rather than the re-integrated seed, which may differ by
/// rounding.
pub fn forecast_poses(
    model: &Model,
    seed: &VelocitySequence,
    last_pose: &Vector,
    n_steps: usize,
) -> Result<Vec<Vector>> {
    if seed.origin_pose.len() != model.config.dim || last_pose.len() != model.config.dim {
        return Err(Error::config(
            "dim",
            format!(
                "model dim {} but poses have dim {}",
                model.config.dim,
                seed.origin_pose.len()
            ),
        ));
    }
    let (mut bank, _, first) = observe(model, seed)?;
    let velocities = forecast(model, &mut bank, &first, n_steps)?;
    Ok(integrate_from(last_pose, &velocities))
}

pub fn predict(f: Forecaster<'_>, w: &EvalWindow) -> Result<PoseSequence> {
    let n = w.window.target.len();
    let frames = match f {
        Forecaster::ZeroVelocity => {
            let seed = PoseSequence::new(w.window.seed.clone(), w.window.frame_interval_ms)?;
            zero_velocity_forecast(&seed, n)?.frames
        }
        Forecaster::Model(model) => {
            let seed = w.window.seed_velocities()?;
            forecast_poses(model, &seed, w.window.last_seed_frame(), n)?
        }
    };
    Ok(PoseSequence {
        frames,
        frame_interval_ms: w.window.frame_interval_ms,
        space: w.space,
        meta: SequenceMeta::default(),
    })
}

fn predict_all(f: Forecaster<'_>, windows: &[EvalWindow]) -> Result<Vec<PoseSequence>> {
    if let (Forecaster::Model(m), Some(w)) = (f, windows.first()) {
        let dim = w.window.target[0].len();
        if m.config.dim != dim {
            return Err(Error::config(
                "dim",
                format!(
                    "model dim {} but evaluation data has dim {dim}",
                    m.config.dim
                ),
            ));
        }
    }
    parallel::map_indexed(windows.len(), |i| predict(f, &windows[i]))
        .into_iter()
        .collect()
}

pub fn mae_report(
    f: Forecaster<'_>,
    windows: &[EvalWindow],
    horizons_ms: &[u32],
) -> Result<HorizonReport> {
    if windows.is_empty() {
        return Err(Error::Input("no evaluation windows".into()));
    }
    let preds = predict_all(f, windows)?;
    let mut acc = MaeAccumulator::new(horizons_ms.to_vec());
    for (p, w) in preds.iter().zip(windows) {
        acc.add(p, &w.truth(), w.action.as_deref())?;
    }
    Ok(acc.finish())
}

/// Mean PCK and window count per future frame, plus the number of skipped
/// degenerate frames.
pub fn pck_report(
    f: Forecaster<'_>,
    windows: &[EvalWindow],
    threshold: f64,
) -> Result<(Vec<(f64, usize)>, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Input("no evaluation windows".into()))?;
    let preds = predict_all(f, windows)?;
    let mut acc = PckAccumulator::new(first.window.target.len());
    for (p, w) in preds.iter().zip(windows) {
        acc.add(&pck(p, &w.truth(), threshold)?);
    }
    Ok((acc.finish(), acc.skipped))
}
