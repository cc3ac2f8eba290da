//! Which recurrent sequence runs at which step.
//!
//! Level `m` (1-based) of a triangular-prism hierarchy holds `K^(m-1)`
//! weight-shared sequences ("phases"). At step `t` exactly one of them
//! advances: the one whose residue class `t mod K^(m-1)` contains `t`.

use super::model::Variant;

/// `K^(m-1)` for 1-based level `m`.
pub fn level_period(level: usize, k: usize) -> usize {
    assert!(level >= 1, "levels are 1-based");
    k.pow((level - 1) as u32)
}

/// Phase of level `level` (1-based) that updates at step `t`.
pub fn active_phase(level: usize, t: usize, k: usize) -> usize {
    t % level_period(level, k)
}

/// `K^(M-1) + … + K + 1`: sequences in the unrolled hierarchy, of which only
/// `M` are physically stored.
pub fn logical_sequence_count(k: usize, levels: usize) -> usize {
    (0..levels).map(|m| k.pow(m as u32)).sum()
}

/// Phase reached by the recursive spawning construction: each level-`m`
/// sequence splits into `K` children at level `m+1` that take every `K`-th
/// update of their parent, child `j` starting with the parent's `j`-th
/// update. The child's index is `parent + K^(m-1)·j`. Used only to show
/// that this mixed-radix numbering coincides with [`active_phase`].
pub fn spawned_phase(level: usize, t: usize, k: usize) -> usize {
    let mut phase = 0;
    let mut stride = 1;
    // Number of updates the current-level sequence has seen before `t`.
    let mut updates_before = t;
    for _ in 1..level {
        let child = updates_before % k;
        phase += stride * child;
        stride *= k;
        updates_before /= k;
    }
    phase
}

/// What a level consumes when it updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelInput {
    /// The model input at this step (velocity, or pose for the pose variant).
    Raw,
    /// Hidden output of the level directly below.
    Below,
    /// Sum of the last `K` velocity inputs, i.e. the velocity over a stride
    /// of `K` frames.
    Strided,
}

/// Static per-level wiring for a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub phases: usize,
    pub period: usize,
    pub input: LevelInput,
    /// `true` when phases rotate every step; `false` for a single sequence
    /// that runs once per `period` steps and is read stale in between.
    pub phased: bool,
}

impl LevelSpec {
    /// Phase updated at step `t`, if any.
    pub fn updates_at(&self, t: usize) -> Option<usize> {
        if self.phased {
            Some(t % self.period)
        } else if (t + 1).is_multiple_of(self.period) {
            Some(0)
        } else {
            None
        }
    }

    /// Phase whose hidden state is visible at step `t` (after updates).
    pub fn read_at(&self, t: usize) -> usize {
        if self.phased {
            t % self.period
        } else {
            0
        }
    }
}

pub fn level_specs(variant: Variant, k: usize, levels: usize) -> Vec<LevelSpec> {
    let base = LevelSpec {
        phases: 1,
        period: 1,
        input: LevelInput::Raw,
        phased: true,
    };
    let mut specs = vec![base];
    match variant {
        Variant::SingleLayerPose | Variant::SingleLayerVel => {}
        Variant::Stacked2Vel => specs.push(LevelSpec {
            input: LevelInput::Below,
            ..base
        }),
        Variant::DoubleScaleVel => specs.push(LevelSpec {
            phases: 1,
            period: k,
            input: LevelInput::Strided,
            phased: false,
        }),
        Variant::DoubleScaleHierVel => specs.push(LevelSpec {
            phases: 1,
            period: k,
            input: LevelInput::Below,
            phased: false,
        }),
        Variant::DoubleScalePhaseVel => specs.push(LevelSpec {
            phases: k,
            period: k,
            input: LevelInput::Strided,
            phased: true,
        }),
        Variant::TpRnn => {
            for m in 2..=levels {
                let period = level_period(m, k);
                specs.push(LevelSpec {
                    phases: period,
                    period,
                    input: LevelInput::Below,
                    phased: true,
                });
            }
        }
    }
    specs
}
