//! Mapping from (vehicle state, lidar scan) to the normalised MDP observation,
//! and the reward that mirrors the planner's running cost and constraint.

use serde::{Deserialize, Serialize};

use crate::dynamics::{VehicleState, STEER_LIMIT};
use crate::world::{LidarConfig, LidarScan, Workspace};

/// Number of non-lidar observation components.
pub const STATE_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub steer_limit: f64,
    pub lidar: LidarConfig,
    pub workspace: Workspace,
    /// Diagonal of the running-cost weight on `x - x_goal`.
    pub q_diag: [f64; 5],
    /// Penalty applied to a transition that ends in a violated constraint.
    pub violation_penalty: f64,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            v_min: -1.0,
            v_max: 3.0,
            steer_limit: STEER_LIMIT,
            lidar: LidarConfig::default(),
            workspace: Workspace::default(),
            q_diag: [0.01, 0.01, 0.0, 0.0, 0.0],
            violation_penalty: 1500.0,
        }
    }
}

impl MdpConfig {
    pub fn state_dim(&self) -> usize {
        STATE_FEATURES + self.lidar.beams
    }
}

/// Normalised observation `[v, tan(steer), goal range, cos, sin, lidar...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState(pub Vec<f64>);

impl MdpState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Writes the observation for `(x, scan)` into `out` (length `state_dim`).
pub fn write_mdp_state(x: &VehicleState, scan: &LidarScan, goal: &VehicleState, cfg: &MdpConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.state_dim());
    debug_assert_eq!(scan.ranges.len(), cfg.lidar.beams);
    let tan_lim = cfg.steer_limit.tan();
    let dx = goal.x - x.x;
    let dy = goal.y - x.y;
    let bearing = dy.atan2(dx) - x.theta;
    out[0] = ((x.v - cfg.v_min) / (cfg.v_max - cfg.v_min)).clamp(0.0, 1.0);
    out[1] = ((x.steer.tan() + tan_lim) / (2.0 * tan_lim)).clamp(0.0, 1.0);
    out[2] = (dx.hypot(dy) / cfg.workspace.diagonal()).clamp(0.0, 1.0);
    out[3] = bearing.cos();
    out[4] = bearing.sin();
    let (lo, hi) = (cfg.lidar.range_min, cfg.lidar.range_max);
    for (o, r) in out[STATE_FEATURES..].iter_mut().zip(&scan.ranges) {
        *o = ((r - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
}

pub fn mdp_state(x: &VehicleState, scan: &LidarScan, goal: &VehicleState, cfg: &MdpConfig) -> MdpState {
    let mut v = vec![0.0; cfg.state_dim()];
    write_mdp_state(x, scan, goal, cfg, &mut v);
    MdpState(v)
}

/// Quadratic running cost `(x − x_G)ᵀ Q (x − x_G)`.
pub fn running_cost(x: &VehicleState, goal: &VehicleState, q_diag: &[f64; 5]) -> f64 {
    let d = x.to_vector() - goal.to_vector();
    d.iter().zip(q_diag).map(|(e, q)| q * e * e).sum()
}

/// `r = −q(x) − γ_r·[violated]`
pub fn reward(x: &VehicleState, goal: &VehicleState, violated: bool, cfg: &MdpConfig) -> f64 {
    let penalty = if violated { cfg.violation_penalty } else { 0.0 };
    -running_cost(x, goal, &cfg.q_diag) - penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn midpoint_example() {
        let cfg = MdpConfig::default();
        let x = VehicleState::new(12.5, 12.5, PI / 4.0, 1.0, 0.0);
        let goal = VehicleState::new(25.0, 25.0, 0.0, 0.0, 0.0);
        let scan = LidarScan::all_max(&cfg.lidar);
        let s = mdp_state(&x, &scan, &goal, &cfg);
        let expect = [0.5, 0.5, 0.5, 1.0, 0.0];
        for (a, b) in s.0[..5].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(s.0.len(), 69);
        assert!(s.0[5..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn components_in_range() {
        let cfg = MdpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = vec![0.0; cfg.state_dim()];
        for _ in 0..100_000 {
            let x = VehicleState::new(
                rng.gen_range(0.0..25.0),
                rng.gen_range(0.0..25.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(-1.0..=3.0),
                rng.gen_range(-0.4..=0.4),
            );
            let goal = VehicleState::new(rng.gen_range(0.0..25.0), rng.gen_range(0.0..25.0), 0.0, 0.0, 0.0);
            let scan = LidarScan { ranges: (0..64).map(|_| rng.gen_range(0.1..=10.0)).collect() };
            write_mdp_state(&x, &scan, &goal, &cfg, &mut buf);
            assert!(buf[..3].iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(buf[3..5].iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(buf[5..].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = MdpConfig { violation_penalty: 100.0, ..Default::default() };
        let goal = VehicleState::new(5.0, 5.0, 0.0, 0.0, 0.0);
        assert_eq!(reward(&goal, &goal, false, &cfg), 0.0);
        let x = VehicleState::new(15.0, 5.0, 1.0, 2.0, 0.1);
        assert!((reward(&x, &goal, false, &cfg) + 1.0).abs() < 1e-12);
        assert!((reward(&x, &goal, true, &cfg) + 101.0).abs() < 1e-12);
    }
}
