//! Environment distributions, exteroceptive observations, and the two cost
//! functions: the certified funnel-sequence cost and the disturbed rollout
//! cost.
//!
//! Every environment freezes its full realization at sampling time (traffic
//! speed profiles included), so a cost is a pure function of the policy and
//! the environment.

pub mod geometry;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DisturbanceSignal, SystemState};
use crate::error::{Error, Result};
use crate::interval::IntervalBox;
use crate::policy::{run_episode, EpisodeContext, EpisodeMode, PolicyParams};
use crate::reachability::{Funnel, FunnelLibrary};
use crate::seed;
use geometry::{footprint_half_extents, ray_disc_distance, Aabb, OrientedRect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    Highway,
    ObstacleField,
}

impl FromStr for EnvironmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(EnvironmentKind::Highway),
            "obstacle_field" | "obstacle-field" | "surrogate" => Ok(EnvironmentKind::ObstacleField),
            other => Err(Error::invalid(format!("unknown environment kind {other:?}"))),
        }
    }
}

impl fmt::Display for EnvironmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvironmentKind::Highway => "highway",
            EnvironmentKind::ObstacleField => "obstacle_field",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayConfig {
    pub lane_count: usize,
    pub lane_width: f64,
    pub horizon: usize,
    /// Duration of one primitive, which is also the traffic speed interval.
    pub interval: f64,
    pub vehicle_count: usize,
    /// Initial longitudinal offsets ahead of the ego.
    pub offset_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Minimum initial bumper gap between vehicles sharing a lane.
    pub min_gap: f64,
    pub ego_lane: usize,
    pub observed_vehicles: usize,
    pub observation_scale: [f64; 2],
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            lane_count: 5,
            lane_width: 4.0,
            horizon: 10,
            interval: 1.0,
            vehicle_count: 10,
            offset_range: [15.0, 110.0],
            speed_range: [0.0, 9.0],
            vehicle_length: 4.5,
            vehicle_width: 2.0,
            min_gap: 2.0,
            ego_lane: 2,
            observed_vehicles: 5,
            observation_scale: [50.0, 20.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObstacleFieldConfig {
    pub obstacle_count: usize,
    pub radius_range: [f64; 2],
    pub forward_range: [f64; 2],
    pub lateral_half_width: f64,
    pub horizon: usize,
    pub interval: f64,
    pub robot_radius: f64,
    pub start_speed: f64,
    pub rays: usize,
    pub ray_range: f64,
}

impl Default for ObstacleFieldConfig {
    fn default() -> Self {
        Self {
            obstacle_count: 50,
            radius_range: [0.05, 0.30],
            forward_range: [0.0, 14.0],
            lateral_half_width: 5.0,
            horizon: 14,
            interval: 1.0,
            robot_radius: 0.1,
            start_speed: 1.0,
            rays: 16,
            ray_range: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub lane: usize,
    pub x0: f64,
    /// Constant speed per primitive interval; the last value holds beyond.
    pub speeds: Vec<f64>,
    pub length: f64,
    pub width: f64,
}

impl Vehicle {
    pub fn x_at(&self, t: f64, interval: f64) -> f64 {
        let mut x = self.x0;
        let mut remaining = t.max(0.0);
        for (i, &s) in self.speeds.iter().enumerate() {
            let last = i + 1 == self.speeds.len();
            let span = if last { remaining } else { remaining.min(interval) };
            x += s * span;
            remaining -= span;
            if remaining <= 0.0 {
                break;
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighwayEnvironment {
    pub seed: u64,
    pub lane_count: usize,
    pub lane_width: f64,
    pub horizon: usize,
    pub interval: f64,
    pub ego_lane: usize,
    pub ego_length: f64,
    pub ego_width: f64,
    /// Upper bound on traffic speed, used to inflate vehicles between grid
    /// times.
    pub max_vehicle_speed: f64,
    pub observed_vehicles: usize,
    pub observation_scale: [f64; 2],
    pub vehicles: Vec<Vehicle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleFieldEnvironment {
    pub seed: u64,
    pub horizon: usize,
    pub interval: f64,
    pub lateral_half_width: f64,
    pub robot_radius: f64,
    pub start_speed: f64,
    pub rays: usize,
    pub ray_range: f64,
    pub obstacles: Vec<Disc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Environment {
    Highway(HighwayEnvironment),
    ObstacleField(ObstacleFieldEnvironment),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    None,
    Collision,
    Boundary,
    /// No primitive was allowed to follow the previous one.
    NoComposable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub k: usize,
    pub horizon: usize,
    pub cost: f64,
    pub failure_kind: FailureKind,
}

impl CostRecord {
    pub fn new(k: usize, horizon: usize, failure_kind: FailureKind) -> Self {
        let k = k.min(horizon);
        CostRecord {
            k,
            horizon,
            cost: 1.0 - k as f64 / horizon as f64,
            failure_kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Highway(HighwayConfig),
    ObstacleField(ObstacleFieldConfig),
}

impl EnvironmentConfig {
    pub fn default_for(kind: EnvironmentKind) -> Self {
        match kind {
            EnvironmentKind::Highway => EnvironmentConfig::Highway(HighwayConfig::default()),
            EnvironmentKind::ObstacleField => EnvironmentConfig::ObstacleField(ObstacleFieldConfig::default()),
        }
    }

    pub fn kind(&self) -> EnvironmentKind {
        match self {
            EnvironmentConfig::Highway(_) => EnvironmentKind::Highway,
            EnvironmentConfig::ObstacleField(_) => EnvironmentKind::ObstacleField,
        }
    }
}

/// Environment drawn from the default distribution of `kind`.
pub fn sample_environment(kind: EnvironmentKind, seed: u64) -> Result<Environment> {
    sample_environment_with(&EnvironmentConfig::default_for(kind), seed)
}

pub fn sample_environment_with(cfg: &EnvironmentConfig, seed: u64) -> Result<Environment> {
    match cfg {
        EnvironmentConfig::Highway(c) => sample_highway(c, seed).map(Environment::Highway),
        EnvironmentConfig::ObstacleField(c) => sample_obstacle_field(c, seed).map(Environment::ObstacleField),
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::invalid(format!(
            "{name} must be a finite [lo, hi] range, got {r:?}"
        )));
    }
    Ok(())
}

fn uniform(rng: &mut seed::Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn sample_highway(c: &HighwayConfig, seed: u64) -> Result<HighwayEnvironment> {
    check_range("offset_range", c.offset_range)?;
    check_range("speed_range", c.speed_range)?;
    if c.lane_count == 0 || c.horizon == 0 || c.ego_lane >= c.lane_count {
        return Err(Error::invalid(
            "highway needs lanes, a horizon, and an ego lane on the road",
        ));
    }
    let mut rng = seed::rng(seed);
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(c.vehicle_count);
    for _ in 0..c.vehicle_count {
        let lane = rng.random_range(0..c.lane_count);
        let mut placed = None;
        for _ in 0..100 {
            let x0 = uniform(&mut rng, c.offset_range);
            let clear = vehicles
                .iter()
                .filter(|v| v.lane == lane)
                .all(|v| (v.x0 - x0).abs() >= c.vehicle_length + c.min_gap);
            if clear {
                placed = Some(x0);
                break;
            }
        }
        let speeds: Vec<f64> = (0..c.horizon).map(|_| uniform(&mut rng, c.speed_range)).collect();
        if let Some(x0) = placed {
            vehicles.push(Vehicle {
                lane,
                x0,
                speeds,
                length: c.vehicle_length,
                width: c.vehicle_width,
            });
        }
    }
    Ok(HighwayEnvironment {
        seed,
        lane_count: c.lane_count,
        lane_width: c.lane_width,
        horizon: c.horizon,
        interval: c.interval,
        ego_lane: c.ego_lane,
        ego_length: c.vehicle_length,
        ego_width: c.vehicle_width,
        max_vehicle_speed: c.speed_range[1].max(c.speed_range[0].abs()),
        observed_vehicles: c.observed_vehicles,
        observation_scale: c.observation_scale,
        vehicles,
    })
}

fn sample_obstacle_field(c: &ObstacleFieldConfig, seed: u64) -> Result<ObstacleFieldEnvironment> {
    check_range("radius_range", c.radius_range)?;
    check_range("forward_range", c.forward_range)?;
    if c.horizon == 0 || c.rays == 0 {
        return Err(Error::invalid("obstacle field needs a horizon and at least one ray"));
    }
    let mut rng = seed::rng(seed);
    let lateral = [-c.lateral_half_width, c.lateral_half_width];
    let obstacles = (0..c.obstacle_count)
        .map(|_| Disc {
            x: uniform(&mut rng, c.forward_range),
            y: uniform(&mut rng, lateral),
            r: uniform(&mut rng, c.radius_range),
        })
        .collect();
    Ok(ObstacleFieldEnvironment {
        seed,
        horizon: c.horizon,
        interval: c.interval,
        lateral_half_width: c.lateral_half_width,
        robot_radius: c.robot_radius,
        start_speed: c.start_speed,
        rays: c.rays,
        ray_range: c.ray_range,
        obstacles,
    })
}

impl HighwayEnvironment {
    pub fn road_width(&self) -> f64 {
        self.lane_count as f64 * self.lane_width
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    pub fn vehicle_rect(&self, v: &Vehicle, t: f64) -> Aabb {
        Aabb::centered(
            v.x_at(t, self.interval),
            self.lane_center(v.lane),
            0.5 * v.length,
            0.5 * v.width,
        )
    }

    fn observe(&self, state: &[f64], t: f64) -> Observation {
        let (ex, ey) = (state[0], state[1]);
        let mut rel: Vec<(f64, usize, f64, f64)> = self
            .vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dx = v.x_at(t, self.interval) - ex;
                let dy = self.lane_center(v.lane) - ey;
                (dx.hypot(dy), i, dx, dy)
            })
            .collect();
        rel.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = vec![1.0; 2 * self.observed_vehicles];
        for (slot, &(_, _, dx, dy)) in rel.iter().take(self.observed_vehicles).enumerate() {
            out[2 * slot] = (dx / self.observation_scale[0]).clamp(-1.0, 1.0);
            out[2 * slot + 1] = (dy / self.observation_scale[1]).clamp(-1.0, 1.0);
        }
        Observation(out)
    }

    fn box_failure(&self, b: &IntervalBox, t: f64, dt: f64) -> FailureKind {
        let (hx, hy) = footprint_half_extents(0.5 * self.ego_length, 0.5 * self.ego_width, b[2].lo(), b[2].hi());
        let hull = Aabb {
            x_lo: b[0].lo() - hx,
            x_hi: b[0].hi() + hx,
            y_lo: b[1].lo() - hy,
            y_hi: b[1].hi() + hy,
        };
        let sweep = self.max_vehicle_speed * dt;
        if self
            .vehicles
            .iter()
            .any(|v| hull.overlaps(&self.vehicle_rect(v, t).inflate(sweep, 0.0)))
        {
            return FailureKind::Collision;
        }
        if b[1].lo() < 0.0 || b[1].hi() > self.road_width() {
            return FailureKind::Boundary;
        }
        FailureKind::None
    }

    fn state_failure(&self, s: &[f64], t: f64) -> FailureKind {
        let ego = OrientedRect {
            cx: s[0],
            cy: s[1],
            heading: s[2],
            half_length: 0.5 * self.ego_length,
            half_width: 0.5 * self.ego_width,
        };
        if self.vehicles.iter().any(|v| ego.overlaps(&self.vehicle_rect(v, t))) {
            return FailureKind::Collision;
        }
        if s[1] < 0.0 || s[1] > self.road_width() {
            return FailureKind::Boundary;
        }
        FailureKind::None
    }
}

impl ObstacleFieldEnvironment {
    /// Ray bearings relative to the forward axis, spanning −90°..=90°.
    pub fn ray_angles(&self) -> Vec<f64> {
        use std::f64::consts::{FRAC_PI_2, PI};
        if self.rays == 1 {
            return vec![0.0];
        }
        (0..self.rays)
            .map(|i| -FRAC_PI_2 + PI * i as f64 / (self.rays - 1) as f64)
            .collect()
    }

    fn observe(&self, state: &[f64]) -> Observation {
        let (x, y) = (state[0], state[1]);
        Observation(
            self.ray_angles()
                .into_iter()
                .map(|a| {
                    let hit = self
                        .obstacles
                        .iter()
                        .filter_map(|o| ray_disc_distance(x, y, a, o.x, o.y, o.r))
                        .fold(self.ray_range, f64::min);
                    hit.min(self.ray_range) / self.ray_range
                })
                .collect(),
        )
    }

    fn box_failure(&self, b: &IntervalBox) -> FailureKind {
        let proj = Aabb {
            x_lo: b[0].lo(),
            x_hi: b[0].hi(),
            y_lo: b[1].lo(),
            y_hi: b[1].hi(),
        };
        if self
            .obstacles
            .iter()
            .any(|o| proj.touches_disc(o.x, o.y, o.r + self.robot_radius))
        {
            return FailureKind::Collision;
        }
        if b[1].lo() < -self.lateral_half_width || b[1].hi() > self.lateral_half_width {
            return FailureKind::Boundary;
        }
        FailureKind::None
    }

    fn state_failure(&self, s: &[f64]) -> FailureKind {
        let hit = self.obstacles.iter().any(|o| {
            let r = o.r + self.robot_radius;
            let (dx, dy) = (s[0] - o.x, s[1] - o.y);
            dx * dx + dy * dy <= r * r
        });
        if hit {
            return FailureKind::Collision;
        }
        if s[1].abs() > self.lateral_half_width {
            return FailureKind::Boundary;
        }
        FailureKind::None
    }
}

impl Environment {
    pub fn kind(&self) -> EnvironmentKind {
        match self {
            Environment::Highway(_) => EnvironmentKind::Highway,
            Environment::ObstacleField(_) => EnvironmentKind::ObstacleField,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Environment::Highway(e) => e.seed,
            Environment::ObstacleField(e) => e.seed,
        }
    }

    /// Number of primitive executions `K` in an episode.
    pub fn horizon(&self) -> usize {
        match self {
            Environment::Highway(e) => e.horizon,
            Environment::ObstacleField(e) => e.horizon,
        }
    }

    pub fn interval(&self) -> f64 {
        match self {
            Environment::Highway(e) => e.interval,
            Environment::ObstacleField(e) => e.interval,
        }
    }

    /// Nominal initial state: highway mid-lane at zero heading, obstacle
    /// field at the origin moving forward.
    pub fn start_state(&self) -> SystemState {
        match self {
            Environment::Highway(e) => SystemState(vec![0.0, e.lane_center(e.ego_lane), 0.0]),
            Environment::ObstacleField(e) => SystemState(vec![0.0, 0.0, e.start_speed, 0.0]),
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            Environment::Highway(e) => 2 * e.observed_vehicles,
            Environment::ObstacleField(e) => e.rays,
        }
    }

    pub fn observe(&self, state: &SystemState, t: f64) -> Result<Observation> {
        let need = match self {
            Environment::Highway(_) => 3,
            Environment::ObstacleField(_) => 4,
        };
        if state.dim() != need {
            return Err(Error::DimensionMismatch {
                expected: need,
                got: state.dim(),
            });
        }
        Ok(match self {
            Environment::Highway(e) => e.observe(&state.0, t),
            Environment::ObstacleField(e) => e.observe(&state.0),
        })
    }

    /// Conservative check of one funnel box at global time `t`; `dt` is the
    /// funnel grid step, used to cover obstacle motion between grid times.
    pub fn box_failure(&self, b: &IntervalBox, t: f64, dt: f64) -> FailureKind {
        match self {
            Environment::Highway(e) => e.box_failure(b, t, dt),
            Environment::ObstacleField(e) => e.box_failure(b),
        }
    }

    /// Exact check of one rollout state at global time `t`.
    pub fn state_failure(&self, s: &[f64], t: f64) -> FailureKind {
        match self {
            Environment::Highway(e) => e.state_failure(s, t),
            Environment::ObstacleField(e) => e.state_failure(s),
        }
    }
}

/// Funnel already translated into the global frame, entered at `start_time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedFunnel {
    pub primitive_id: usize,
    pub start_time: f64,
    pub funnel: Funnel,
}

/// Funnel-sequence cost `C(π, E)`: `k` counts the leading primitives whose
/// whole funnels are clear of obstacles and boundaries.
pub fn funnel_collision_cost(
    env: &Environment,
    sequence: &[PlacedFunnel],
    library: &FunnelLibrary,
) -> Result<CostRecord> {
    for pair in sequence.windows(2) {
        let (j, k) = (pair[0].primitive_id, pair[1].primitive_id);
        let certified = library
            .composability
            .get(j)
            .and_then(|row| row.get(k))
            .copied()
            .unwrap_or(false);
        if !certified {
            return Err(Error::ContractViolation(format!(
                "primitive {k} is not certified to follow primitive {j}"
            )));
        }
    }
    let horizon = env.horizon();
    for (k, placed) in sequence.iter().enumerate().take(horizon) {
        let f = &placed.funnel;
        for (t, b) in f.times.iter().zip(&f.boxes) {
            let kind = env.box_failure(b, placed.start_time + t, f.dt);
            if kind != FailureKind::None {
                return Ok(CostRecord::new(k, horizon, kind));
            }
        }
    }
    Ok(CostRecord::new(sequence.len(), horizon, FailureKind::None))
}

/// Disturbed rollout cost `c(π, E, w)` of the deterministic policy `theta`
/// started from `x0` (the environment's start state when `None`).
pub fn rollout_cost(
    env: &Environment,
    ctx: &EpisodeContext,
    theta: &PolicyParams,
    w: &DisturbanceSignal,
    x0: Option<&SystemState>,
) -> Result<CostRecord> {
    let mode = EpisodeMode::Rollout { w, x0: x0.cloned() };
    Ok(run_episode(env, ctx, theta, &mode)?.cost)
}

#[cfg(test)]
mod tests;
