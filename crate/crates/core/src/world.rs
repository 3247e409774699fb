//! Circular-obstacle worlds, an ideal planar lidar, and the collision /
//! constraint predicates used by the planner and the simulator.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{VehicleState, STEER_LIMIT};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("no valid environment after {0} attempts")]
    ResampleBudgetExhausted(usize),
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Self {
        debug_assert!(radius > 0.0);
        Self { cx, cy, radius }
    }

    fn center_dist(&self, x: f64, y: f64) -> f64 {
        (x - self.cx).hypot(y - self.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Workspace {
    pub fn diagonal(&self) -> f64 {
        (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }
}

impl Default for Workspace {
    fn default() -> Self {
        Self { min: [0.0, 0.0], max: [25.0, 25.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub obstacles: Vec<Obstacle>,
    pub start: VehicleState,
    pub goal: VehicleState,
    pub workspace: Workspace,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Environment {
    pub fn empty(start: VehicleState, goal: VehicleState) -> Self {
        Self { obstacles: Vec::new(), start, goal, workspace: Workspace::default(), seed: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("environment serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// SHA-256 of the JSON document, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Rotates the start heading so it points straight at the goal, at rest.
    pub fn face_goal(&mut self) {
        let dx = self.goal.x - self.start.x;
        let dy = self.goal.y - self.start.y;
        self.start.theta = dy.atan2(dx);
        self.start.v = 0.0;
        self.start.steer = 0.0;
    }
}

/// Parameters of the random environment distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    pub workspace: Workspace,
    /// Inclusive range of the obstacle count.
    pub obstacle_count: [usize; 2],
    pub radius_range: [f64; 2],
    pub robot_radius: f64,
    /// Reject environments whose obstacles overlap.
    #[serde(default)]
    pub no_overlap: bool,
    pub max_attempts: usize,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            workspace: Workspace::default(),
            obstacle_count: [0, 50],
            radius_range: [0.25, 1.5],
            robot_radius: 0.2,
            no_overlap: false,
            max_attempts: 1000,
        }
    }
}

impl EnvironmentConfig {
    fn validate(&self) -> Result<(), WorldError> {
        let ws = &self.workspace;
        if !(ws.max[0] > ws.min[0] && ws.max[1] > ws.min[1]) {
            return Err(WorldError::Config("empty workspace".into()));
        }
        if self.obstacle_count[0] > self.obstacle_count[1] {
            return Err(WorldError::Config("obstacle_count min > max".into()));
        }
        if !(self.radius_range[0] > 0.0 && self.radius_range[0] <= self.radius_range[1]) {
            return Err(WorldError::Config("radius range must be positive and ordered".into()));
        }
        if self.robot_radius < 0.0 {
            return Err(WorldError::Config("negative robot radius".into()));
        }
        Ok(())
    }
}

fn sample_state<R: Rng + ?Sized>(rng: &mut R, ws: &Workspace) -> VehicleState {
    VehicleState::new(
        rng.gen_range(ws.min[0]..=ws.max[0]),
        rng.gen_range(ws.min[1]..=ws.max[1]),
        rng.gen_range(-PI..PI),
        0.0,
        rng.gen_range(-STEER_LIMIT..=STEER_LIMIT),
    )
}

/// Draws a random environment, discarding draws where the start or goal
/// collides with an obstacle (or obstacles overlap, if requested).
pub fn sample_environment<R: Rng + ?Sized>(rng: &mut R, config: &EnvironmentConfig) -> Result<Environment, WorldError> {
    config.validate()?;
    let ws = config.workspace;
    for _ in 0..config.max_attempts {
        let start = sample_state(rng, &ws);
        let goal = sample_state(rng, &ws);
        let n = rng.gen_range(config.obstacle_count[0]..=config.obstacle_count[1]);
        let obstacles: Vec<Obstacle> = (0..n)
            .map(|_| {
                Obstacle::new(
                    rng.gen_range(ws.min[0]..=ws.max[0]),
                    rng.gen_range(ws.min[1]..=ws.max[1]),
                    rng.gen_range(config.radius_range[0]..=config.radius_range[1]),
                )
            })
            .collect();
        let env = Environment { obstacles, start, goal, workspace: ws, seed: None };
        if check_true_collision(&start, &env, config.robot_radius) || check_true_collision(&goal, &env, config.robot_radius) {
            continue;
        }
        if config.no_overlap && has_overlap(&env.obstacles) {
            continue;
        }
        return Ok(env);
    }
    Err(WorldError::ResampleBudgetExhausted(config.max_attempts))
}

fn has_overlap(obstacles: &[Obstacle]) -> bool {
    obstacles.iter().enumerate().any(|(i, a)| {
        obstacles[i + 1..].iter().any(|b| a.center_dist(b.cx, b.cy) <= a.radius + b.radius)
    })
}

/// Distance from `(px, py)` to the segment `a`–`b`.
pub fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (px - (a.0 + t * dx)).hypot(py - (a.1 + t * dy))
}

/// Whether the straight start→goal segment passes through an obstacle
/// inflated by the robot radius.
pub fn is_blocked(env: &Environment, robot_radius: f64) -> bool {
    let a = env.start.position();
    let b = env.goal.position();
    env.obstacles
        .iter()
        .any(|o| point_segment_distance(o.cx, o.cy, a, b) <= o.radius + robot_radius)
}

/// Ground-truth collision test against the obstacle circles.
pub fn check_true_collision(state: &VehicleState, env: &Environment, robot_radius: f64) -> bool {
    env.obstacles
        .iter()
        .any(|o| o.center_dist(state.x, state.y) <= robot_radius + o.radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub beams: usize,
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { beams: 64, range_min: 0.1, range_max: 10.0 }
    }
}

impl LidarConfig {
    pub fn beam_spacing(&self) -> f64 {
        2.0 * PI / self.beams as f64
    }

    /// Body-frame bearing of beam `k`.
    pub fn bearing(&self, k: usize) -> f64 {
        -PI + self.beam_spacing() * k as f64
    }
}

/// Range scan with implicit bearings `-π + 2πk/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
}

impl LidarScan {
    pub fn all_max(config: &LidarConfig) -> Self {
        Self { ranges: vec![config.range_max; config.beams] }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Distance along the unit ray `(ox, oy) + t (dx, dy)` to the first circle
/// crossing. A ray starting inside a circle hits it at `t = 0`.
fn ray_circle(ox: f64, oy: f64, dx: f64, dy: f64, c: &Obstacle) -> Option<f64> {
    let (mx, my) = (ox - c.cx, oy - c.cy);
    let b = mx * dx + my * dy;
    let cc = mx * mx + my * my - c.radius * c.radius;
    if cc <= 0.0 {
        return Some(0.0);
    }
    if b > 0.0 {
        return None;
    }
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

/// Ideal lidar: nearest ray/circle intersection per beam, clamped to the
/// sensor range; beams without a return report `range_max`.
pub fn raycast_scan(env: &Environment, pose: (f64, f64, f64), config: &LidarConfig) -> LidarScan {
    let (x, y, theta) = pose;
    let ranges = (0..config.beams)
        .map(|k| {
            let (dy, dx) = (theta + config.bearing(k)).sin_cos();
            let hit = env
                .obstacles
                .iter()
                .filter_map(|o| ray_circle(x, y, dx, dy, o))
                .fold(f64::INFINITY, f64::min);
            if hit.is_finite() {
                hit.clamp(config.range_min, config.range_max)
            } else {
                config.range_max
            }
        })
        .collect();
    LidarScan { ranges }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePoint {
    pub x: f64,
    pub y: f64,
}

/// Projects every return strictly below `range_max` into the world frame.
pub fn extract_obstacle_points(scan: &LidarScan, pose: (f64, f64, f64), config: &LidarConfig) -> Vec<ObstaclePoint> {
    let n = scan.ranges.len();
    let spacing = 2.0 * PI / n as f64;
    let (x, y, theta) = pose;
    scan.ranges
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < config.range_max)
        .map(|(k, &r)| {
            let (s, c) = (theta + (-PI + spacing * k as f64)).sin_cos();
            ObstaclePoint { x: x + c * r, y: y + s * r }
        })
        .collect()
}

/// Velocity bounds and robot radius for the state constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    pub robot_radius: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self { robot_radius: 0.2, v_min: -1.0, v_max: 3.0 }
    }
}

impl ConstraintConfig {
    pub fn velocity_violated(&self, state: &VehicleState) -> bool {
        !(self.v_min..=self.v_max).contains(&state.v)
    }
}

/// Perceived-state constraint: `true` when within `robot_radius` of an
/// observed obstacle point or outside the velocity bounds.
pub fn check_constraint(state: &VehicleState, points: &[ObstaclePoint], c: &ConstraintConfig) -> bool {
    if c.velocity_violated(state) {
        return true;
    }
    let r2 = c.robot_radius * c.robot_radius;
    points.iter().any(|p| {
        let (dx, dy) = (p.x - state.x, p.y - state.y);
        dx * dx + dy * dy <= r2
    })
}

/// Whether `state` lies within `radius` of the goal position.
pub fn goal_reached(state: &VehicleState, goal: &VehicleState, radius: f64) -> bool {
    (state.x - goal.x).hypot(state.y - goal.y) <= radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_obstacle(cx: f64, cy: f64, r: f64) -> Environment {
        let mut env = Environment::empty(VehicleState::default(), VehicleState::new(20.0, 0.0, 0.0, 0.0, 0.0));
        env.obstacles.push(Obstacle::new(cx, cy, r));
        env
    }

    #[test]
    fn zero_obstacle_config() {
        let cfg = EnvironmentConfig { obstacle_count: [0, 0], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let env = sample_environment(&mut rng, &cfg).unwrap();
            assert!(env.obstacles.is_empty());
        }
    }

    #[test]
    fn sampled_environments_are_valid() {
        let cfg = EnvironmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let env = sample_environment(&mut rng, &cfg).unwrap();
            assert!(!check_true_collision(&env.start, &env, cfg.robot_radius));
            assert!(!check_true_collision(&env.goal, &env, cfg.robot_radius));
            assert!(env.obstacles.len() <= 50);
            for o in &env.obstacles {
                assert!((0.25..=1.5).contains(&o.radius));
            }
            for s in [&env.start, &env.goal] {
                assert_eq!(s.v, 0.0);
                assert!(s.steer.abs() <= STEER_LIMIT);
                assert!((-PI..PI).contains(&s.theta));
            }
        }
    }

    #[test]
    fn impossible_config_exhausts_budget() {
        // A single huge obstacle covering the workspace.
        let cfg = EnvironmentConfig {
            obstacle_count: [1, 1],
            radius_range: [100.0, 100.0],
            max_attempts: 20,
            ..Default::default()
        };
        let err = sample_environment(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
        assert!(matches!(err, Err(WorldError::ResampleBudgetExhausted(20))));
    }

    #[test]
    fn no_overlap_flag() {
        let cfg = EnvironmentConfig { obstacle_count: [5, 8], no_overlap: true, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let env = sample_environment(&mut rng, &cfg).unwrap();
            assert!(!has_overlap(&env.obstacles));
        }
    }

    #[test]
    fn blocked_examples() {
        let env = Environment::empty(VehicleState::default(), VehicleState::new(10.0, 0.0, 0.0, 0.0, 0.0));
        assert!(!is_blocked(&env, 0.2));
        let env = one_obstacle(10.0, 0.0, 0.3);
        assert!(is_blocked(&env, 0.2));
        let env = one_obstacle(10.0, 3.0, 0.3);
        assert!(!is_blocked(&env, 0.2));
    }

    #[test]
    fn raycast_collinear_hit() {
        let env = one_obstacle(5.0, 0.0, 1.0);
        let cfg = LidarConfig::default();
        let scan = raycast_scan(&env, (0.0, 0.0, 0.0), &cfg);
        // bearing 0 is beam 32
        assert!((cfg.bearing(32)).abs() < 1e-15);
        assert!((scan.ranges[32] - 4.0).abs() < 1e-12);
        assert_eq!(scan.ranges[0], 10.0);
    }

    #[test]
    fn raycast_empty_and_inside() {
        let cfg = LidarConfig::default();
        let env = Environment::empty(VehicleState::default(), VehicleState::default());
        let scan = raycast_scan(&env, (1.0, 2.0, 0.3), &cfg);
        assert!(scan.ranges.iter().all(|&r| r == 10.0));
        let env = one_obstacle(0.0, 0.0, 1.0);
        let scan = raycast_scan(&env, (0.0, 0.0, 0.0), &cfg);
        assert!(scan.ranges.iter().all(|&r| r == 0.1));
    }

    #[test]
    fn extract_examples() {
        let cfg = LidarConfig::default();
        let mut scan = LidarScan::all_max(&cfg);
        assert!(extract_obstacle_points(&scan, (0.0, 0.0, 0.0), &cfg).is_empty());
        scan.ranges[32] = 5.0;
        let pts = extract_obstacle_points(&scan, (0.0, 0.0, 0.0), &cfg);
        assert_eq!(pts.len(), 1);
        assert!((pts[0].x - 5.0).abs() < 1e-12 && pts[0].y.abs() < 1e-12);
    }

    #[test]
    fn constraint_examples() {
        let c = ConstraintConfig { robot_radius: 0.2, v_min: -1.0, v_max: 3.0 };
        assert!(!check_constraint(&VehicleState::default(), &[], &c));
        let pts = [ObstaclePoint { x: 1.0, y: 0.0 }];
        assert!(check_constraint(&VehicleState::new(0.9, 0.0, 0.0, 0.0, 0.0), &pts, &c));
        assert!(check_constraint(&VehicleState::new(0.0, 0.0, 0.0, 3.5, 0.0), &[], &c));
        assert!(check_constraint(&VehicleState::new(0.0, 0.0, 0.0, -1.5, 0.0), &[], &c));
    }

    #[test]
    fn true_collision_examples() {
        let env = Environment::empty(VehicleState::default(), VehicleState::default());
        assert!(!check_true_collision(&VehicleState::default(), &env, 0.2));
        let env = one_obstacle(3.0, 4.0, 0.5);
        assert!(check_true_collision(&VehicleState::new(3.0, 4.0, 0.0, 0.0, 0.0), &env, 0.2));
        assert!(check_true_collision(&VehicleState::new(3.0, 4.69, 0.0, 0.0, 0.0), &env, 0.2));
        assert!(!check_true_collision(&VehicleState::new(3.0, 4.71, 0.0, 0.0, 0.0), &env, 0.2));
    }

    #[test]
    fn environment_json_round_trip() {
        let cfg = EnvironmentConfig::default();
        let mut env = sample_environment(&mut ChaCha8Rng::seed_from_u64(11), &cfg).unwrap();
        env.seed = Some(11);
        let s = env.to_json();
        let back = Environment::from_json(&s).unwrap();
        assert_eq!(back, env);
        assert_eq!(back.to_json(), s);
    }

    #[test]
    fn face_goal_orients_start() {
        let mut env = Environment::empty(VehicleState::new(1.0, 1.0, 2.0, 0.5, 0.3), VehicleState::new(2.0, 2.0, 0.0, 0.0, 0.0));
        env.face_goal();
        assert!((env.start.theta - PI / 4.0).abs() < 1e-15);
        assert_eq!((env.start.v, env.start.steer), (0.0, 0.0));
    }
}
