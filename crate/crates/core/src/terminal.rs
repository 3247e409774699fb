//! Terminal cost from the learned value function, evaluated on a lidar scan
//! forward-projected to the end of a candidate trajectory.

use std::f64::consts::PI;

use crate::dynamics::{wrap_angle, VehicleState};
use crate::td3::value::MaskPair;
use crate::td3::{evaluate_value, ValueFunction};
use crate::world::{LidarConfig, LidarScan, ObstaclePoint};

/// Beam whose bearing is closest to `bearing` (wrapped, with the `±π` seam
/// treated circularly).
pub fn nearest_beam(bearing: f64, config: &LidarConfig) -> usize {
    let n = config.beams;
    let b = wrap_angle(bearing);
    let k = ((b + PI) / config.beam_spacing()).round() as usize;
    k % n
}

/// Estimated scan seen from `pose`, built from world-frame obstacle points.
///
/// Each point is assigned to the beam nearest its bearing; a beam hit by
/// several points keeps the smallest range and a beam with none reports
/// `range_max`. No occlusion test is made.
pub fn project_scan(points: &[ObstaclePoint], pose: (f64, f64, f64), config: &LidarConfig) -> LidarScan {
    let (x, y, theta) = pose;
    let mut ranges = vec![config.range_max; config.beams];
    for p in points {
        let (dx, dy) = (p.x - x, p.y - y);
        let r = dx.hypot(dy).clamp(config.range_min, config.range_max);
        let k = nearest_beam(dy.atan2(dx) - theta, config);
        if r < ranges[k] {
            ranges[k] = r;
        }
    }
    LidarScan { ranges }
}

/// `q_f = −V(x_T, ℓ̂_T)`.
pub fn terminal_cost(
    vf: &ValueFunction,
    terminal: &VehicleState,
    projected: &LidarScan,
    goal: &VehicleState,
    masks: Option<MaskPair<'_>>,
) -> f64 {
    -evaluate_value(vf, terminal, projected, goal, masks)
}

/// `true` when the value at the terminal state is strictly below the value
/// at the current state. Both evaluations share `masks`.
pub fn value_improvement_violated(
    vf: &ValueFunction,
    current: &VehicleState,
    current_scan: &LidarScan,
    terminal: &VehicleState,
    projected: &LidarScan,
    goal: &VehicleState,
    masks: Option<MaskPair<'_>>,
) -> bool {
    let v_now = evaluate_value(vf, current, current_scan, goal, masks);
    let v_end = evaluate_value(vf, terminal, projected, goal, masks);
    v_end < v_now
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Mlp};
    use crate::td3::MdpConfig;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LidarConfig {
        LidarConfig::default()
    }

    #[test]
    fn collinear_point() {
        let scan = project_scan(&[ObstaclePoint { x: 5.0, y: 0.0 }], (4.0, 0.0, 0.0), &cfg());
        assert_eq!(scan.ranges[32], 1.0);
        assert_eq!(scan.ranges.iter().filter(|&&r| r == 10.0).count(), 63);
    }

    #[test]
    fn empty_points_give_max_range() {
        let scan = project_scan(&[], (1.0, 2.0, 0.3), &cfg());
        assert_eq!(scan, LidarScan::all_max(&cfg()));
    }

    #[test]
    fn nearest_beam_wraps_seam() {
        let c = cfg();
        assert_eq!(nearest_beam(PI, &c), 0);
        assert_eq!(nearest_beam(-PI, &c), 0);
        assert_eq!(nearest_beam(PI - 0.01, &c), 0);
        assert_eq!(nearest_beam(3.0 * PI, &c), 0);
        assert_eq!(nearest_beam(0.0, &c), 32);
        let half = c.beam_spacing() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let b: f64 = rng.gen_range(-4.0 * PI..4.0 * PI);
            let k = nearest_beam(b, &c);
            assert!(wrap_angle(b - c.bearing(k)).abs() <= half + 1e-12);
        }
    }

    #[test]
    fn minimum_range_wins_and_clamps() {
        let pts = [
            ObstaclePoint { x: 3.0, y: 0.0 },
            ObstaclePoint { x: 2.0, y: 0.001 },
            ObstaclePoint { x: 0.01, y: 0.0 },
            ObstaclePoint { x: -40.0, y: 0.0 },
        ];
        let scan = project_scan(&pts, (0.0, 0.0, 0.0), &cfg());
        assert_eq!(scan.ranges[32], 0.1);
        assert_eq!(scan.ranges[0], 10.0);
        let scan = project_scan(&pts[..2], (0.0, 0.0, 0.0), &cfg());
        assert!((scan.ranges[32] - 2.0).abs() < 1e-6);
        assert!(scan.ranges.iter().all(|&r| (0.1..=10.0).contains(&r)));
    }

    #[test]
    fn translation_is_exact() {
        // Dyadic coordinates and integer shifts keep every subtraction exact.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let pts: Vec<ObstaclePoint> = (0..30)
                .map(|_| ObstaclePoint { x: rng.gen_range(-64..64) as f64 / 8.0, y: rng.gen_range(-64..64) as f64 / 8.0 })
                .collect();
            let pose = (rng.gen_range(-16..16) as f64 / 8.0, rng.gen_range(-16..16) as f64 / 8.0, rng.gen_range(-3.0..3.0));
            let (tx, ty) = (rng.gen_range(-100..100) as f64, rng.gen_range(-100..100) as f64);
            let moved: Vec<ObstaclePoint> = pts.iter().map(|p| ObstaclePoint { x: p.x + tx, y: p.y + ty }).collect();
            assert_eq!(project_scan(&pts, pose, &cfg()), project_scan(&moved, (pose.0 + tx, pose.1 + ty, pose.2), &cfg()));
        }
    }

    #[test]
    fn rotation_by_beam_spacing_permutes() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = (rng.gen_range(0.0..25.0), rng.gen_range(0.0..25.0), rng.gen_range(-PI..PI));
            // Points centred on beams so rounding cannot flip the assignment.
            let beams: Vec<(usize, f64)> = (0..10).map(|_| (rng.gen_range(0..64), rng.gen_range(0.5..9.0))).collect();
            let place = |pose: (f64, f64, f64)| -> Vec<ObstaclePoint> {
                beams
                    .iter()
                    .map(|&(k, r)| {
                        let (s, co) = (pose.2 + c.bearing(k)).sin_cos();
                        ObstaclePoint { x: pose.0 + r * co, y: pose.1 + r * s }
                    })
                    .collect()
            };
            let base = project_scan(&place(pose), pose, &c);
            let m = rng.gen_range(1..64);
            let rotated_pose = (pose.0, pose.1, pose.2 + m as f64 * c.beam_spacing());
            // Rotating points and heading together leaves body-frame bearings fixed.
            let rotated_world: Vec<ObstaclePoint> = {
                let (s, co) = (m as f64 * c.beam_spacing()).sin_cos();
                place(pose)
                    .iter()
                    .map(|p| {
                        let (dx, dy) = (p.x - pose.0, p.y - pose.1);
                        ObstaclePoint { x: pose.0 + co * dx - s * dy, y: pose.1 + s * dx + co * dy }
                    })
                    .collect()
            };
            let same = project_scan(&rotated_world, rotated_pose, &c);
            for k in 0..64 {
                assert!((same.ranges[k] - base.ranges[k]).abs() < 1e-9);
            }
            // Rotating the heading alone shifts every return by m beams.
            let shifted = project_scan(&place(pose), rotated_pose, &c);
            for k in 0..64 {
                assert!((shifted.ranges[(k + 64 - m) % 64] - base.ranges[k]).abs() < 1e-9);
            }
        }
    }

    fn constant_vf(c: f64) -> ValueFunction {
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        let actor = Mlp::zeros(&[d, 4, 2], 0.1);
        let critic = Mlp::from_layers(
            vec![
                Layer { weight: DMatrix::zeros(4, d + 2), bias: DVector::zeros(4) },
                Layer { weight: DMatrix::zeros(1, 4), bias: DVector::from_element(1, c) },
            ],
            0.1,
        )
        .unwrap();
        ValueFunction::new(actor, critic, mdp)
    }

    #[test]
    fn terminal_cost_negates_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        let vf = ValueFunction::new(Mlp::new(&[d, 16, 2], 0.1, &mut rng), Mlp::new(&[d + 2, 16, 1], 0.1, &mut rng), mdp);
        let x = VehicleState::new(3.0, 4.0, 0.5, 1.0, 0.1);
        let goal = VehicleState::new(20.0, 1.0, 0.0, 0.0, 0.0);
        let scan = LidarScan::all_max(&cfg());
        let (ma, mc) = vf.sample_masks(&mut rng);
        let masks = Some((&ma, &mc));
        assert_eq!(terminal_cost(&vf, &x, &scan, &goal, masks), -evaluate_value(&vf, &x, &scan, &goal, masks));
        assert_eq!(terminal_cost(&constant_vf(0.0), &x, &scan, &goal, None), 0.0);
    }

    #[test]
    fn improvement_constraint_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let goal = VehicleState::new(20.0, 20.0, 0.0, 0.0, 0.0);
        let scan = LidarScan { ranges: (0..64).map(|_| rng.gen_range(0.1..10.0)).collect() };
        let a = VehicleState::new(1.0, 2.0, 0.3, 0.5, 0.0);
        let b = VehicleState::new(15.0, 9.0, -2.0, 2.0, 0.2);
        let vf = constant_vf(-3.0);
        assert!(!value_improvement_violated(&vf, &a, &scan, &b, &LidarScan::all_max(&cfg()), &goal, None));
        let mdp = MdpConfig::default();
        let d = mdp.state_dim();
        let vf = ValueFunction::new(Mlp::new(&[d, 16, 2], 0.1, &mut rng), Mlp::new(&[d + 2, 16, 1], 0.1, &mut rng), mdp);
        let (ma, mc) = vf.sample_masks(&mut rng);
        assert!(!value_improvement_violated(&vf, &a, &scan, &a, &scan, &goal, Some((&ma, &mc))));
        let forward = value_improvement_violated(&vf, &a, &scan, &b, &scan, &goal, None);
        let backward = value_improvement_violated(&vf, &b, &scan, &a, &scan, &goal, None);
        assert_ne!(forward, backward);
    }
}
