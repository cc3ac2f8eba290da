//! The triangular-prism network and its ablation variants.

mod model;
mod rollout;
mod schedule;

pub use model::{build_model, Model, ModelConfig, Params, Variant, MODEL_KEYS};
pub use rollout::{
    backward, forecast, model_step, observe, run, LevelTape, Mode, PhaseStateBank, StepTape, Trace,
};
pub use schedule::{
    active_phase, level_period, level_specs, logical_sequence_count, spawned_phase, LevelInput,
    LevelSpec,
};

#[cfg(test)]
pub(crate) use model::build_unchecked;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{param_rng, Vector};
    use crate::oracle::{self, central_differences, compare, dd_vec, DD};
    use crate::posedata::{to_velocity, PoseSequence, VelocitySequence};
    use rand::Rng;

    fn toy(variant: Variant, k: usize, levels: usize) -> ModelConfig {
        ModelConfig {
            k,
            levels,
            hidden: 4,
            head1: 5,
            head2: 4,
            seed: 3,
            ..ModelConfig::new(variant, 3)
        }
    }

    fn random_velocities(n: usize, dim: usize, seed: u64) -> VelocitySequence {
        let mut rng = param_rng(seed, 1000);
        VelocitySequence {
            steps: (0..n)
                .map(|_| {
                    Vector::from_vec((0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
                })
                .collect(),
            origin_pose: Vector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
            frame_interval_ms: 40.0,
        }
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        let m = build_model(&toy(Variant::TpRnn, 2, 2)).unwrap();
        assert_eq!(m.param_count(), 371);
        assert_eq!(m.config.expected_param_count(), 128 + 144 + 99);
        let m3 = build_model(&toy(Variant::TpRnn, 3, 2)).unwrap();
        assert_eq!(m3.param_count(), 371);
        assert_eq!(m.cell_count(), 2);

        let single = build_model(&toy(Variant::SingleLayerVel, 2, 1)).unwrap();
        assert_eq!(single.params.cells.len(), 1);
        assert_eq!(single.params.cells[0].d_in, 3);
        assert_eq!(single.params.head.d_in(), 3 + 4);

        for v in Variant::ALL {
            let levels = if matches!(v, Variant::SingleLayerPose | Variant::SingleLayerVel) {
                1
            } else {
                2
            };
            let m = build_model(&toy(v, 2, levels)).unwrap();
            assert_eq!(m.param_count(), m.config.expected_param_count(), "{v}");
        }
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad = [
            (toy(Variant::TpRnn, 2, 1), "levels"),
            (toy(Variant::SingleLayerVel, 2, 2), "levels"),
            (toy(Variant::DoubleScaleVel, 3, 2), "k"),
            (toy(Variant::Stacked2Vel, 2, 3), "levels"),
            (toy(Variant::TpRnn, 1, 2), "k"),
            (
                ModelConfig {
                    hidden: 0,
                    ..toy(Variant::TpRnn, 2, 2)
                },
                "hidden",
            ),
            (
                ModelConfig {
                    dropout_rate: 1.0,
                    ..toy(Variant::TpRnn, 2, 2)
                },
                "dropout",
            ),
        ];
        for (cfg, field) in bad {
            match build_model(&cfg) {
                Err(crate::Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{cfg:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn zero_network_predicts_zero() {
        let model = Model::zeros(&toy(Variant::TpRnn, 2, 3)).unwrap();
        let seed = random_velocities(7, 3, 1);
        let (bank, _, first) = observe(&model, &seed).unwrap();
        assert!(first.as_slice().iter().all(|&x| x == 0.0));
        let mut bank = bank;
        let out = forecast(&model, &mut bank, &first, 25).unwrap();
        assert_eq!(out.len(), 25);
        assert!(out
            .iter()
            .all(|v| v.len() == 3 && v.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn schedule_trace_for_three_levels() {
        let model = build_model(&toy(Variant::TpRnn, 2, 3)).unwrap();
        let mut bank = PhaseStateBank::new(&model);
        for t in 0..8 {
            let before = bank.clone();
            let (_, tape) = model_step(&model, &mut bank, &Vector::zeros(3), Mode::Eval).unwrap();
            let expected: Vec<(usize, usize)> =
                (1..=3).map(|m| (m, active_phase(m, t, 2))).collect();
            assert_eq!(tape.updated(), expected);
            assert_eq!(expected, vec![(1, 0), (2, t % 2), (3, t % 4)]);
            // Only the scheduled phase changed at each level.
            for (l, states) in bank.levels.iter().enumerate() {
                for (q, s) in states.iter().enumerate() {
                    if q != active_phase(l + 1, t, 2) {
                        assert_eq!(s, &before.levels[l][q]);
                    }
                }
            }
        }
        assert_eq!(bank.t, 8);
    }

    #[test]
    fn identical_models_agree_bit_exactly() {
        let cfg = toy(Variant::TpRnn, 3, 3);
        let (a, b) = (build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        let seed = random_velocities(12, 3, 2);
        let (mut ba, _, fa) = observe(&a, &seed).unwrap();
        let (mut bb, _, fb) = observe(&b, &seed).unwrap();
        let ra = forecast(&a, &mut ba, &fa, 10).unwrap();
        let rb = forecast(&b, &mut bb, &fb, 10).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn observe_positions_bank_at_forecast_start() {
        let model = build_model(&toy(Variant::TpRnn, 2, 2)).unwrap();
        let seed = random_velocities(50, 3, 4);
        let (bank, tapes, _) = observe(&model, &seed).unwrap();
        assert_eq!(bank.t, 50);
        for q in 0..2 {
            let n = tapes
                .iter()
                .filter(|t| t.updated().contains(&(2, q)))
                .count();
            assert_eq!(n, 25);
        }

        let single = VelocitySequence {
            steps: vec![Vector::zeros(3)],
            origin_pose: Vector::from_vec(vec![0.1, 0.2, 0.3]).unwrap(),
            frame_interval_ms: 40.0,
        };
        let (bank, _, first) = observe(&model, &single).unwrap();
        assert_eq!(bank.t, 1);
        assert_eq!(first.len(), 3);

        let empty = VelocitySequence {
            steps: vec![],
            ..single
        };
        assert!(matches!(
            observe(&model, &empty),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn phase_update_counts_follow_ceiling_formula() {
        for k in [2usize, 3] {
            let model = build_model(&ModelConfig {
                hidden: 2,
                head1: 2,
                head2: 2,
                ..toy(Variant::TpRnn, k, 3)
            })
            .unwrap();
            let t_total = 40;
            let trace = run(&model, &random_velocities(t_total, 3, 0), 1, Mode::Eval).unwrap();
            for m in 1..=3 {
                let period = level_period(m, k);
                for q in 0..period {
                    let n = trace
                        .steps
                        .iter()
                        .filter(|s| s.updated().contains(&(m, q)))
                        .count();
                    assert_eq!(n, (t_total - q).div_ceil(period), "k={k} m={m} q={q}");
                }
            }
        }
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let a = build_model(&toy(Variant::TpRnn, 2, 3)).unwrap();
        let b = build_model(&toy(Variant::TpRnn, 2, 2)).unwrap();
        let mut bank = PhaseStateBank::new(&a);
        let err = model_step(&b, &mut bank, &Vector::zeros(3), Mode::Eval).unwrap_err();
        assert!(matches!(err, crate::Error::Config { .. }));
    }

    #[test]
    fn shared_cell_drives_every_phase() {
        let model = build_model(&toy(Variant::TpRnn, 2, 2)).unwrap();
        let seed = random_velocities(6, 3, 5);
        let (bank, _, _) = observe(&model, &seed).unwrap();
        let mut tweaked = model.clone();
        for w in tweaked.params.cells[1].w.as_mut_slice() {
            *w += 0.05;
        }
        let (bank2, _, _) = observe(&tweaked, &seed).unwrap();
        for q in 0..2 {
            assert_ne!(bank.levels[1][q], bank2.levels[1][q], "phase {q}");
        }
        assert_eq!(bank.levels[0], bank2.levels[0]);
    }

    #[test]
    fn tprnn_with_one_level_is_single_layer() {
        let single_cfg = toy(Variant::SingleLayerVel, 2, 1);
        let single = build_model(&single_cfg).unwrap();
        let tp_cfg = ModelConfig {
            variant: Variant::TpRnn,
            ..single_cfg
        };
        let mut tp = build_unchecked(&tp_cfg);
        tp.params = single.params.clone();
        let seed = random_velocities(9, 3, 6);
        let a = run(&single, &seed, 5, Mode::Eval).unwrap();
        let b = run(&tp, &seed, 5, Mode::Eval).unwrap();
        assert_eq!(a.preds, b.preds);
    }

    #[test]
    fn pose_variant_feeds_poses() {
        let cfg = toy(Variant::SingleLayerPose, 2, 1);
        let model = build_model(&cfg).unwrap();
        let poses = PoseSequence::new(
            (0..5)
                .map(|i| Vector::from_vec(vec![i as f64, 1.0, -1.0]).unwrap())
                .collect(),
            40.0,
        )
        .unwrap();
        let seed = to_velocity(&poses).unwrap();
        let trace = run(&model, &seed, 3, Mode::Eval).unwrap();
        assert_eq!(trace.steps[0].input, poses.frames[1]);
        assert_eq!(trace.steps[3].input, poses.frames[4]);
        // First forecast input is the last pose advanced by the first prediction.
        let expected = poses.frames[4].add(&trace.preds[3]).unwrap();
        assert_eq!(trace.steps[4].input, expected);
    }

    /// Weighted sum of all forecast velocities; its gradient with respect to
    /// each prediction is the weight vector.
    fn check_variant_gradients(cfg: &ModelConfig, seed: u64) {
        let model = build_model(cfg).unwrap();
        let mut rng = param_rng(seed, 7);
        let velocities = random_velocities(5, cfg.dim, seed);
        let n_forecast = 4;
        let weights: Vec<Vector> = (0..n_forecast)
            .map(|_| {
                Vector::from_vec((0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let trace = run(&model, &velocities, n_forecast, Mode::Eval).unwrap();
        let grads = backward(&model, &trace, &weights).unwrap();

        let net = oracle::RefNet {
            variant: cfg.variant.name().to_string(),
            k: cfg.k,
            levels: cfg.levels,
            dim: cfg.dim,
            hidden: cfg.hidden,
            head1: cfg.head1,
            head2: cfg.head2,
            slope: cfg.leaky_slope,
        };
        assert_eq!(net.param_count(), model.param_count());
        let steps: Vec<Vec<f64>> = velocities
            .steps
            .iter()
            .map(|v| v.as_slice().to_vec())
            .collect();
        let origin = velocities.origin_pose.as_slice().to_vec();
        let objective = |t: &[DD]| {
            let (preds, kinks) = net.rollout(t, &steps, &origin, n_forecast);
            let mut obj = DD::ZERO;
            for (p, w) in preds.iter().zip(&weights) {
                for (a, b) in p.iter().zip(w.as_slice()) {
                    obj = obj + *a * DD::new(*b);
                }
            }
            (obj, kinks)
        };
        let theta = model.params.flatten();
        let (reference, _) = net.rollout(&dd_vec(&theta), &steps, &origin, n_forecast);
        for (r, p) in reference.iter().zip(trace.forecast()) {
            for (a, b) in r.iter().zip(p.as_slice()) {
                assert!(
                    (a.to_f64() - b).abs() < 1e-13,
                    "{}: forward differs",
                    cfg.variant
                );
            }
        }
        let numeric = central_differences(objective, &theta, 1e-5);
        let (worst, at, skipped) = compare(&grads.flatten(), &numeric);
        assert!(worst < 1e-5, "{}: {worst:e} at {at}", cfg.variant);
        assert!(
            skipped < 3,
            "{}: {skipped} coordinates at a kink",
            cfg.variant
        );
    }

    #[test]
    fn every_variant_backpropagates_correctly() {
        for v in Variant::ALL {
            let levels = if matches!(v, Variant::SingleLayerPose | Variant::SingleLayerVel) {
                1
            } else {
                2
            };
            check_variant_gradients(&toy(v, 2, levels), 11);
        }
        check_variant_gradients(&toy(Variant::TpRnn, 3, 3), 12);
    }
}
