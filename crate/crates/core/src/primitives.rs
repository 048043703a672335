//! Motion-primitive library: sigmoidal nominal trajectories, flat-output
//! state recovery, and the tracking controllers that make each primitive a
//! closed-loop system.
//!
//! Every primitive starts at the origin of its own frame with zero heading
//! and ends (to within the sigmoid's tail) heading-aligned, so primitives are
//! chained by translation alone.
//!
//! Both trackers are written in coordinates where the error dynamics are
//! triangular, which keeps interval boxes from wrapping outward while the
//! true error contracts: the bicycle uses `(e_long, e_lat, η)` with
//! `η = tan e_θ − ψ*(e_long, e_lat)` and the planar surrogate uses
//! `(e_p, σ = e_v + c·e_p)` per axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate_rollout, step_count, BicyclePlant, ControlInput, DisturbanceSet, PlanarPlant, SystemState, Trajectory,
};
use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use crate::reachability::ClosedLoopField;
use crate::scalar::Scalar;

/// Logistic steepness at which the endpoint slope `≈ 2a·e^{-a}` drops
/// below 1e-3.
pub const DEFAULT_STEEPNESS: f64 = 10.0;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Flat outputs and their first three time derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatSample<S> {
    pub t: S,
    pub x: S,
    pub y: S,
    pub dx: S,
    pub dy: S,
    pub ddx: S,
    pub ddy: S,
    pub dddx: S,
    pub dddy: S,
}

/// Normalized sigmoid `s: [0, 1] → [0, 1]` with `s(0) = 0`, `s(1) = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmoidShape {
    /// Logistic `σ(a(2τ − 1))`, affinely rescaled onto `[0, 1]`. Endpoint
    /// slopes are `≈ 2a·e^{-a}`, not exactly zero.
    Logistic { steepness: f64 },
    /// Quintic smoothstep `10τ³ − 15τ⁴ + 6τ⁵`: zero slope and curvature at
    /// both ends.
    #[default]
    Smoothstep,
}

impl SigmoidShape {
    /// `(s, s', s'', s''')` at normalized time `tau`.
    fn eval<S: Scalar>(&self, tau: S) -> (S, S, S, S) {
        match *self {
            SigmoidShape::Logistic { steepness: a } => {
                let z = tau.scale(2.0 * a) - S::cst(a);
                let one = S::cst(1.0);
                let sp = one / (one + (-z).exp());
                let sm = one / (one + z.exp());
                let lo = logistic(-a);
                let span = logistic(a) - lo;
                let d1 = sp * sm;
                let skew = sm - sp;
                (
                    (sp - S::cst(lo)).scale(1.0 / span),
                    d1.scale(2.0 * a / span),
                    (d1 * skew).scale(4.0 * a * a / span),
                    (d1 * (skew.sqr() - d1.scale(2.0))).scale(8.0 * a * a * a / span),
                )
            }
            SigmoidShape::Smoothstep => {
                let t2 = tau.sqr();
                let u = S::cst(1.0) - tau;
                (
                    t2 * tau * (S::cst(10.0) - tau.scale(15.0) + t2.scale(6.0)),
                    (t2 * u.sqr()).scale(30.0),
                    (tau * u * (S::cst(1.0) - tau.scale(2.0))).scale(60.0),
                    (S::cst(1.0) - tau.scale(6.0) + t2.scale(6.0)).scale(60.0),
                )
            }
        }
    }
}

/// `x(t) = Δx·t/T`, `y(t) = Δy·s(t/T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidProfile {
    pub delta_x: f64,
    pub delta_y: f64,
    pub duration: f64,
    pub shape: SigmoidShape,
}

impl SigmoidProfile {
    pub fn new(delta_x: f64, delta_y: f64, duration: f64, shape: SigmoidShape) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::invalid(format!("duration must be positive, got {duration}")));
        }
        if !(delta_x > 0.0) {
            return Err(Error::invalid(format!("delta_x must be positive, got {delta_x}")));
        }
        if let SigmoidShape::Logistic { steepness } = shape {
            if !(steepness > 0.0) {
                return Err(Error::invalid("logistic steepness must be positive"));
            }
        }
        if !delta_y.is_finite() {
            return Err(Error::invalid("delta_y must be finite"));
        }
        Ok(Self {
            delta_x,
            delta_y,
            duration,
            shape,
        })
    }

    pub fn sample<S: Scalar>(&self, t: S) -> FlatSample<S> {
        let (s, ds, dds, ddds) = self.shape.eval(t.scale(1.0 / self.duration));
        let big_t = self.duration;
        let vx = self.delta_x / self.duration;
        FlatSample {
            t,
            x: t.scale(vx),
            y: s.scale(self.delta_y),
            dx: S::cst(vx),
            dy: ds.scale(self.delta_y / self.duration),
            ddx: S::cst(0.0),
            ddy: dds.scale(self.delta_y / (big_t * big_t)),
            dddx: S::cst(0.0),
            dddy: ddds.scale(self.delta_y / (big_t * big_t * big_t)),
        }
    }
}

/// Samples the sigmoid path on `0, dt, …, duration`.
pub fn generate_sigmoid_trajectory(
    delta_x: f64,
    delta_y: f64,
    duration: f64,
    dt: f64,
    shape: SigmoidShape,
) -> Result<Vec<FlatSample<f64>>> {
    let profile = SigmoidProfile::new(delta_x, delta_y, duration, shape)?;
    let n = step_count(duration, dt)?;
    Ok((0..=n).map(|k| profile.sample(k as f64 * dt)).collect())
}

/// Desired bicycle quantities recovered from a flat sample.
#[derive(Clone, Copy, Debug)]
pub struct BicycleReference<S> {
    pub x: S,
    pub y: S,
    pub theta: S,
    pub speed: S,
    pub speed_rate: S,
    pub steer: S,
    /// `tan ζ_d`, kept separately so that no `atan`/`tan` round trip enters
    /// interval evaluation.
    pub steer_tan: S,
    pub theta_rate: S,
    pub theta_accel: S,
}

/// Generic flatness map; assumes `ẋ > 0`, which holds for every primitive.
pub fn bicycle_reference<S: Scalar>(f: &FlatSample<S>, length: f64) -> BicycleReference<S> {
    let v2 = f.dx.sqr() + f.dy.sqr();
    let speed = v2.sqrt();
    let cross = f.dx * f.ddy - f.dy * f.ddx;
    let theta_rate = cross / v2;
    let speed_rate = (f.dx * f.ddx + f.dy * f.ddy) / speed;
    let cross_rate = f.dx * f.dddy - f.dy * f.dddx;
    let theta_accel = (cross_rate - (theta_rate * speed * speed_rate).scale(2.0)) / v2;
    let steer_tan = theta_rate.scale(length) / speed;
    BicycleReference {
        x: f.x,
        y: f.y,
        theta: (f.dy / f.dx).atan(),
        speed,
        speed_rate,
        steer: steer_tan.atan(),
        steer_tan,
        theta_rate,
        theta_accel,
    }
}

/// Desired bicycle state `[x, y, θ]` and feedforward `[v, ζ]`.
pub fn flat_to_state(sample: &FlatSample<f64>, length: f64) -> Result<(SystemState, ControlInput)> {
    let v = sample.dx.hypot(sample.dy);
    if !(v >= 1e-6) {
        return Err(Error::DegenerateFlatness { speed: v });
    }
    let theta = sample.dy.atan2(sample.dx);
    let curvature_num = sample.dx * sample.ddy - sample.dy * sample.ddx;
    let steer = (length * curvature_num / (v * v * v)).atan();
    Ok((
        SystemState(vec![sample.x, sample.y, theta]),
        ControlInput(vec![v, steer]),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Wheelbase [m].
    pub length: f64,
    pub steer_limit: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            length: 5.0,
            steer_limit: 1.5,
            speed_min: 0.0,
            speed_max: 40.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarParams {
    pub accel_limit: f64,
}

impl Default for PlanarParams {
    fn default() -> Self {
        Self { accel_limit: 50.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemModel {
    Bicycle(BicycleParams),
    Planar(PlanarParams),
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemModel::Bicycle(_) => 3,
            SystemModel::Planar(_) => 4,
        }
    }

    pub fn disturbance_dim(&self) -> usize {
        match self {
            SystemModel::Bicycle(_) => 3,
            SystemModel::Planar(_) => 2,
        }
    }

    /// Coordinates that translate when primitives are chained.
    pub fn position_offset(&self, dx: f64, dy: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.state_dim()];
        v[0] = dx;
        v[1] = dy;
        v
    }
}

/// Bicycle tracker gains. In path-frame errors the loop is
/// `ė_long = −k_long·e_long`, `ė_lat = −k_lat·e_lat + p·η` and
/// `η̇ = −k_heading·η`, where `η = tan e_θ − ψ*` measures the heading error
/// against the heading that would steer `e_lat` down at rate `k_lat`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleGains {
    pub k_long: f64,
    pub k_lat: f64,
    pub k_heading: f64,
}

impl Default for BicycleGains {
    fn default() -> Self {
        Self {
            k_long: 5.0,
            k_lat: 4.0,
            k_heading: 12.0,
        }
    }
}

/// Planar PD tracker per axis. Must be overdamped (`k_vel² ≥ 4·k_pos`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarGains {
    pub k_pos: f64,
    pub k_vel: f64,
}

impl Default for PlanarGains {
    fn default() -> Self {
        Self {
            k_pos: 18.0,
            k_vel: 9.0,
        }
    }
}

impl PlanarGains {
    /// Slow closed-loop pole `c`, used for the sliding coordinate
    /// `σ = e_v + c·e_p` in which the error dynamics are triangular.
    pub fn slow_pole(&self) -> Result<f64> {
        let disc = self.k_vel * self.k_vel - 4.0 * self.k_pos;
        if disc < 0.0 || self.k_pos <= 0.0 || self.k_vel <= 0.0 {
            return Err(Error::invalid("planar gains must be positive and overdamped"));
        }
        Ok(0.5 * (self.k_vel - disc.sqrt()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackingGains {
    Bicycle(BicycleGains),
    Planar(PlanarGains),
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a == -PI {
        a = PI;
    }
    a
}

/// Target `ψ* = tan e_θ*` and along-path speed `p` commanded by the
/// bicycle tracker at path-frame errors `(e_long, e_lat)`.
pub fn bicycle_manifold<S: Scalar>(
    e_long: S,
    e_lat: S,
    reference: &BicycleReference<S>,
    gains: &BicycleGains,
) -> (S, S) {
    let p = reference.speed - e_long.scale(gains.k_long) - reference.theta_rate * e_lat;
    let psi_star = (reference.theta_rate * e_long - e_lat.scale(gains.k_lat)) / p;
    (psi_star, p)
}

/// Bicycle command and the closed-loop error rates it produces without
/// disturbance.
#[derive(Clone, Copy, Debug)]
pub struct BicycleLaw<S> {
    pub speed: S,
    pub steer_tan: S,
    pub d_long: S,
    pub d_lat: S,
    pub d_eta: S,
}

/// Feedback-linearizing bicycle tracker. `psi = tan e_θ` and
/// `eta = psi − psi_star`; both are passed so that callers holding either
/// one avoid recomputing the other. Saturation enters the rates only
/// through the clamp excess, which vanishes inside the actuator limits.
#[allow(clippy::too_many_arguments)]
pub fn bicycle_law<S: Scalar>(
    e_long: S,
    e_lat: S,
    psi: S,
    eta: S,
    manifold: (S, S),
    r: &BicycleReference<S>,
    gains: &BicycleGains,
    params: &BicycleParams,
) -> BicycleLaw<S> {
    let (k, k1, k2) = (gains.k_long, gains.k_lat, gains.k_heading);
    let (psi_star, p) = manifold;
    let sec2 = S::cst(1.0) + psi.sqr();
    let sec = sec2.sqrt();
    let (cos_e, sin_e) = (S::cst(1.0) / sec, psi / sec);

    let speed_cmd = p * sec;
    let speed_excess = speed_cmd.excess(params.speed_min, params.speed_max);
    let speed = speed_cmd + speed_excess;
    let d_long = -e_long.scale(k) + speed_excess * cos_e;
    let d_lat = -e_lat.scale(k1) + p * eta + speed_excess * sin_e;

    let num_rate = r.theta_accel * e_long + r.theta_rate * d_long - d_lat.scale(k1);
    let p_rate = r.speed_rate - d_long.scale(k) - r.theta_accel * e_lat - r.theta_rate * d_lat;
    let psi_star_rate = (num_rate - psi_star * p_rate) / p;
    let heading_rate = (psi_star_rate - eta.scale(k2)) / sec2;

    let tan_max = params.steer_limit.tan();
    let tan_cmd = (r.theta_rate + heading_rate).scale(params.length) / speed;
    let steer_excess = tan_cmd.excess(-tan_max, tan_max);
    let d_eta = -eta.scale(k2) + (sec2 * speed * steer_excess).scale(1.0 / params.length);
    BicycleLaw {
        speed,
        steer_tan: tan_cmd + steer_excess,
        d_long,
        d_lat,
        d_eta,
    }
}

/// Largest heading error the bicycle tracker acts on; beyond it `tan e_θ`
/// is replaced by its value at the limit.
const HEADING_ERROR_LIMIT: f64 = 1.5;

/// Bicycle `[v, ζ]` command for `state` against a full reference.
pub fn bicycle_command(
    state: &[f64],
    r: &BicycleReference<f64>,
    gains: &BicycleGains,
    params: &BicycleParams,
) -> ControlInput {
    let (ex, ey) = (state[0] - r.x, state[1] - r.y);
    let (sin_d, cos_d) = r.theta.sin_cos();
    let e_long = cos_d * ex + sin_d * ey;
    let e_lat = -sin_d * ex + cos_d * ey;
    let e_theta = wrap_angle(state[2] - r.theta).clamp(-HEADING_ERROR_LIMIT, HEADING_ERROR_LIMIT);
    let psi = e_theta.tan();
    let manifold = bicycle_manifold(e_long, e_lat, r, gains);
    let law = bicycle_law(e_long, e_lat, psi, psi - manifold.0, manifold, r, gains, params);
    ControlInput(vec![law.speed, law.steer_tan.atan()])
}

/// Planar feedback `δa` (actual − desired errors) on one axis.
pub fn planar_feedback<S: Scalar>(e_pos: S, e_vel: S, accel_ff: S, gains: &PlanarGains, params: &PlanarParams) -> S {
    (e_pos.scale(-gains.k_pos) - e_vel.scale(gains.k_vel)).clamp_offset(
        accel_ff,
        -params.accel_limit,
        params.accel_limit,
    )
}

/// Tracking command for the actual `state` given the desired state and
/// feedforward. Bicycle commands are `[v, ζ]`, planar ones `[ax, ay]`.
/// `desired` carries no reference derivatives, so the bicycle law treats the
/// reference as locally steady; primitives themselves use
/// [`bicycle_command`] with the full reference.
pub fn tracking_control(
    model: &SystemModel,
    state: &SystemState,
    desired: (&SystemState, &ControlInput),
    gains: &TrackingGains,
) -> Result<ControlInput> {
    let (xd, ff) = desired;
    if state.dim() != model.state_dim() || xd.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.state_dim(),
            got: state.dim(),
        });
    }
    if !state.is_finite() || !xd.is_finite() || ff.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite tracking input".into()));
    }
    match (model, gains) {
        (SystemModel::Bicycle(p), TrackingGains::Bicycle(g)) => {
            let d = &xd.0;
            let steer_tan = ff.0[1].tan();
            let reference = BicycleReference {
                x: d[0],
                y: d[1],
                theta: d[2],
                speed: ff.0[0],
                speed_rate: 0.0,
                steer: ff.0[1],
                steer_tan,
                theta_rate: ff.0[0] * steer_tan / p.length,
                theta_accel: 0.0,
            };
            Ok(bicycle_command(&state.0, &reference, g, p))
        }
        (SystemModel::Planar(p), TrackingGains::Planar(g)) => {
            let (s, d) = (&state.0, &xd.0);
            let ax = planar_feedback(s[0] - d[0], s[2] - d[2], ff.0[0], g, p);
            let ay = planar_feedback(s[1] - d[1], s[3] - d[3], ff.0[1], g, p);
            Ok(ControlInput(vec![ff.0[0] + ax, ff.0[1] + ay]))
        }
        _ => Err(Error::invalid("gain set does not match the system model")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub id: usize,
    pub duration: f64,
    pub delta_x: f64,
    pub delta_y: f64,
    pub shape: SigmoidShape,
    pub dt: f64,
    pub gains: TrackingGains,
    /// Desired states on the `dt` grid, with feedforward per interval.
    pub nominal: Trajectory,
}

impl PrimitiveSpec {
    pub fn new(id: usize, model: &SystemModel, profile: SigmoidProfile, dt: f64, gains: TrackingGains) -> Result<Self> {
        let n = step_count(profile.duration, dt)?;
        let mut spec = PrimitiveSpec {
            id,
            duration: profile.duration,
            delta_x: profile.delta_x,
            delta_y: profile.delta_y,
            shape: profile.shape,
            dt,
            gains,
            nominal: Trajectory {
                times: Vec::new(),
                states: Vec::new(),
                controls: Vec::new(),
            },
        };
        for k in 0..=n {
            let t = k as f64 * dt;
            let (x, u) = spec.reference(model, t)?;
            spec.nominal.times.push(t);
            spec.nominal.states.push(x);
            if k < n {
                spec.nominal.controls.push(u);
            }
        }
        Ok(spec)
    }

    pub fn profile(&self) -> SigmoidProfile {
        SigmoidProfile {
            delta_x: self.delta_x,
            delta_y: self.delta_y,
            duration: self.duration,
            shape: self.shape,
        }
    }

    /// Desired state and feedforward at primitive-local time `t`.
    pub fn reference(&self, model: &SystemModel, t: f64) -> Result<(SystemState, ControlInput)> {
        let f = self.profile().sample(t);
        match model {
            SystemModel::Bicycle(p) => flat_to_state(&f, p.length),
            SystemModel::Planar(_) => Ok((
                SystemState(vec![f.x, f.y, f.dx, f.dy]),
                ControlInput(vec![f.ddx, f.ddy]),
            )),
        }
    }

    pub fn start_state(&self) -> &SystemState {
        &self.nominal.states[0]
    }

    /// Nominal displacement over the primitive, in position coordinates only.
    pub fn displacement(&self, model: &SystemModel) -> Vec<f64> {
        model.position_offset(self.delta_x, self.delta_y)
    }

    /// Closed-loop tracking-error field consumed by the funnel engine.
    pub fn closed_loop_field(&self, model: &SystemModel) -> Result<PrimitiveField> {
        match (model, &self.gains) {
            (SystemModel::Bicycle(p), TrackingGains::Bicycle(g)) => Ok(PrimitiveField::Bicycle(BicycleTrackingField {
                profile: self.profile(),
                params: *p,
                gains: *g,
            })),
            (SystemModel::Planar(p), TrackingGains::Planar(g)) => Ok(PrimitiveField::Planar(PlanarTrackingField {
                profile: self.profile(),
                params: *p,
                gains: *g,
                slow_pole: g.slow_pole()?,
            })),
            _ => Err(Error::invalid("gain set does not match the system model")),
        }
    }

    /// Runs the primitive from `x0` (global frame) with its nominal shifted by
    /// `offset`, under disturbance `w(t0 + t)`.
    pub fn simulate<W>(
        &self,
        model: &SystemModel,
        x0: &SystemState,
        offset: &[f64],
        w: &W,
        t0: f64,
        dt: f64,
    ) -> Result<Trajectory>
    where
        W: crate::dynamics::DisturbanceSource + ?Sized,
    {
        let shifted = crate::dynamics::Shifted { inner: w, t0 };
        let controller = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
            if let (SystemModel::Bicycle(p), TrackingGains::Bicycle(g)) = (model, &self.gains) {
                let mut r = bicycle_reference(&self.profile().sample(t), p.length);
                r.x += offset[0];
                r.y += offset[1];
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidState("non-finite tracking input".into()));
                }
                return Ok(bicycle_command(x, &r, g, p).0);
            }
            let (mut xd, ff) = self.reference(model, t)?;
            for (v, o) in xd.0.iter_mut().zip(offset) {
                *v += o;
            }
            Ok(tracking_control(model, &SystemState(x.to_vec()), (&xd, &ff), &self.gains)?.0)
        };
        match model {
            SystemModel::Bicycle(p) => integrate_rollout(
                &BicyclePlant { length: p.length },
                controller,
                x0,
                &shifted,
                self.duration,
                dt,
            ),
            SystemModel::Planar(_) => integrate_rollout(&PlanarPlant, controller, x0, &shifted, self.duration, dt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveLibrary {
    pub model: SystemModel,
    pub dt: f64,
    pub primitives: Vec<PrimitiveSpec>,
}

impl PrimitiveLibrary {
    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn get(&self, id: usize) -> &PrimitiveSpec {
        &self.primitives[id]
    }
}

/// Highway library parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayPrimitiveConfig {
    pub forward_speed: f64,
    pub lane_width: f64,
    pub duration: f64,
    pub shape: SigmoidShape,
    pub vehicle: BicycleParams,
    pub gains: BicycleGains,
}

impl Default for HighwayPrimitiveConfig {
    fn default() -> Self {
        Self {
            forward_speed: 10.0,
            lane_width: 4.0,
            duration: 1.0,
            shape: SigmoidShape::default(),
            vehicle: BicycleParams::default(),
            gains: BicycleGains::default(),
        }
    }
}

/// Surrogate library parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogatePrimitiveConfig {
    pub forward_step: f64,
    pub lateral_unit: f64,
    pub duration: f64,
    pub shape: SigmoidShape,
    pub vehicle: PlanarParams,
    pub gains: PlanarGains,
}

impl Default for SurrogatePrimitiveConfig {
    fn default() -> Self {
        Self {
            forward_step: 1.0,
            lateral_unit: 0.25,
            duration: 1.0,
            shape: SigmoidShape::default(),
            vehicle: PlanarParams::default(),
            gains: PlanarGains::default(),
        }
    }
}

/// Left lane change, lane keep, right lane change (ids 0, 1, 2).
pub fn build_highway_library(dt: f64) -> Result<PrimitiveLibrary> {
    build_highway_library_with(&HighwayPrimitiveConfig::default(), dt)
}

pub fn build_highway_library_with(cfg: &HighwayPrimitiveConfig, dt: f64) -> Result<PrimitiveLibrary> {
    let model = SystemModel::Bicycle(cfg.vehicle);
    let dx = cfg.forward_speed * cfg.duration;
    let primitives = [cfg.lane_width, 0.0, -cfg.lane_width]
        .iter()
        .enumerate()
        .map(|(id, &dy)| {
            let profile = SigmoidProfile::new(dx, dy, cfg.duration, cfg.shape)?;
            PrimitiveSpec::new(id, &model, profile, dt, TrackingGains::Bicycle(cfg.gains))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrimitiveLibrary { model, dt, primitives })
}

/// Seven forward primitives with lateral offsets `-3..=3` units, ascending.
pub fn build_surrogate_library(dt: f64) -> Result<PrimitiveLibrary> {
    build_surrogate_library_with(&SurrogatePrimitiveConfig::default(), dt)
}

pub fn build_surrogate_library_with(cfg: &SurrogatePrimitiveConfig, dt: f64) -> Result<PrimitiveLibrary> {
    let model = SystemModel::Planar(cfg.vehicle);
    let primitives = (-3i32..=3)
        .enumerate()
        .map(|(id, k)| {
            let profile = SigmoidProfile::new(cfg.forward_step, k as f64 * cfg.lateral_unit, cfg.duration, cfg.shape)?;
            PrimitiveSpec::new(id, &model, profile, dt, TrackingGains::Planar(cfg.gains))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrimitiveLibrary { model, dt, primitives })
}

fn rotate<S: Scalar>(c: S, s: S, a: S, b: S) -> (S, S) {
    (c * a - s * b, s * a + c * b)
}

/// Bicycle tracking error in `(e_long, e_lat, η)` coordinates.
#[derive(Clone, Copy, Debug)]
pub struct BicycleTrackingField {
    pub profile: SigmoidProfile,
    pub params: BicycleParams,
    pub gains: BicycleGains,
}

impl BicycleTrackingField {
    fn reference<S: Scalar>(&self, t: S) -> BicycleReference<S> {
        bicycle_reference(&self.profile.sample(t), self.params.length)
    }
}

impl ClosedLoopField for BicycleTrackingField {
    fn dim(&self) -> usize {
        3
    }

    fn drift<S: Scalar>(&self, t: S, z: &[S]) -> Vec<S> {
        let r = self.reference(t);
        let (e_long, e_lat, eta) = (z[0], z[1], z[2]);
        let manifold = bicycle_manifold(e_long, e_lat, &r, &self.gains);
        let psi = manifold.0 + eta;
        let law = bicycle_law(e_long, e_lat, psi, eta, manifold, &r, &self.gains, &self.params);
        vec![law.d_long, law.d_lat, law.d_eta]
    }

    fn disturbance_enclosure(&self, t: Interval, z: &IntervalBox, ws: &DisturbanceSet) -> Vec<Interval> {
        let r = self.reference(t);
        let (k, k1) = (self.gains.k_long, self.gains.k_lat);
        let (psi_star, p) = bicycle_manifold(z[0], z[1], &r, &self.gains);
        let psi = psi_star + z[2];
        let (c, s) = (r.theta.cos(), r.theta.sin());
        let wx = Interval::new(ws.lower()[0], ws.upper()[0]);
        let wy = Interval::new(ws.lower()[1], ws.upper()[1]);
        let wt = Interval::new(ws.lower()[2], ws.upper()[2]);
        // ψ* moves with the disturbed errors: ∂ψ*/∂e_long, ∂ψ*/∂e_lat.
        let a = (r.theta_rate + psi_star.scale(k)) / p;
        let b = (r.theta_rate * psi_star - Interval::point(k1)) / p;
        let w_eta = (Interval::point(1.0) + psi.sqr()) * wt - (a * c - b * s) * wx - (a * s + b * c) * wy;
        vec![c * wx + s * wy, c * wy - s * wx, w_eta]
    }

    fn to_state_box(&self, t: f64, z: &IntervalBox) -> IntervalBox {
        let r = self.reference(Interval::point(t));
        let (psi_star, _) = bicycle_manifold(z[0], z[1], &r, &self.gains);
        let e_theta = (psi_star + z[2]).atan();
        let (c, s) = (r.theta.cos(), r.theta.sin());
        let (dx, dy) = rotate(c, s, z[0], z[1]);
        IntervalBox(vec![r.x + dx, r.y + dy, r.theta + e_theta])
    }

    fn from_state_box(&self, t: f64, x: &IntervalBox) -> IntervalBox {
        let r = self.reference(Interval::point(t));
        let (c, s) = (r.theta.cos(), r.theta.sin());
        let (e_long, e_lat) = rotate(c, -s, x[0] - r.x, x[1] - r.y);
        let (psi_star, _) = bicycle_manifold(e_long, e_lat, &r, &self.gains);
        IntervalBox(vec![e_long, e_lat, (x[2] - r.theta).tan() - psi_star])
    }
}

/// Planar tracking error in `(e_px, e_py, σx, σy)` coordinates.
#[derive(Clone, Copy, Debug)]
pub struct PlanarTrackingField {
    pub profile: SigmoidProfile,
    pub params: PlanarParams,
    pub gains: PlanarGains,
    pub slow_pole: f64,
}

impl ClosedLoopField for PlanarTrackingField {
    fn dim(&self) -> usize {
        4
    }

    fn drift<S: Scalar>(&self, t: S, z: &[S]) -> Vec<S> {
        let f = self.profile.sample(t);
        let c = self.slow_pole;
        let ev = [z[2] - z[0].scale(c), z[3] - z[1].scale(c)];
        let ff = [f.ddx, f.ddy];
        let mut out = vec![ev[0], ev[1], S::cst(0.0), S::cst(0.0)];
        for axis in 0..2 {
            let da = planar_feedback(z[axis], ev[axis], ff[axis], &self.gains, &self.params);
            out[2 + axis] = da + ev[axis].scale(c);
        }
        out
    }

    fn disturbance_enclosure(&self, _t: Interval, _z: &IntervalBox, ws: &DisturbanceSet) -> Vec<Interval> {
        vec![
            Interval::ZERO,
            Interval::ZERO,
            Interval::new(ws.lower()[0], ws.upper()[0]),
            Interval::new(ws.lower()[1], ws.upper()[1]),
        ]
    }

    fn to_state_box(&self, t: f64, z: &IntervalBox) -> IntervalBox {
        let f = self.profile.sample(Interval::point(t));
        let c = self.slow_pole;
        IntervalBox(vec![
            f.x + z[0],
            f.y + z[1],
            f.dx + z[2] - z[0].scale(c),
            f.dy + z[3] - z[1].scale(c),
        ])
    }

    fn from_state_box(&self, t: f64, x: &IntervalBox) -> IntervalBox {
        let f = self.profile.sample(Interval::point(t));
        let c = self.slow_pole;
        let (ex, ey) = (x[0] - f.x, x[1] - f.y);
        IntervalBox(vec![ex, ey, x[2] - f.dx + ex.scale(c), x[3] - f.dy + ey.scale(c)])
    }
}

/// Dispatch over the two tracker families.
#[derive(Clone, Copy, Debug)]
pub enum PrimitiveField {
    Bicycle(BicycleTrackingField),
    Planar(PlanarTrackingField),
}

impl ClosedLoopField for PrimitiveField {
    fn dim(&self) -> usize {
        match self {
            PrimitiveField::Bicycle(f) => f.dim(),
            PrimitiveField::Planar(f) => f.dim(),
        }
    }

    fn drift<S: Scalar>(&self, t: S, z: &[S]) -> Vec<S> {
        match self {
            PrimitiveField::Bicycle(f) => f.drift(t, z),
            PrimitiveField::Planar(f) => f.drift(t, z),
        }
    }

    fn disturbance_enclosure(&self, t: Interval, z: &IntervalBox, ws: &DisturbanceSet) -> Vec<Interval> {
        match self {
            PrimitiveField::Bicycle(f) => f.disturbance_enclosure(t, z, ws),
            PrimitiveField::Planar(f) => f.disturbance_enclosure(t, z, ws),
        }
    }

    fn to_state_box(&self, t: f64, z: &IntervalBox) -> IntervalBox {
        match self {
            PrimitiveField::Bicycle(f) => f.to_state_box(t, z),
            PrimitiveField::Planar(f) => f.to_state_box(t, z),
        }
    }

    fn from_state_box(&self, t: f64, x: &IntervalBox) -> IntervalBox {
        match self {
            PrimitiveField::Bicycle(f) => f.from_state_box(t, x),
            PrimitiveField::Planar(f) => f.from_state_box(t, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_disturbance, DisturbanceSignal};
    use approx::assert_abs_diff_eq;

    #[test]
    fn lane_keep_is_straight() {
        for shape in shapes() {
            let path = generate_sigmoid_trajectory(10.0, 0.0, 1.0, 0.01, shape).unwrap();
            assert_eq!(path.len(), 101);
            assert!(path.iter().all(|f| f.y == 0.0 && f.dy == 0.0 && f.ddy == 0.0));
        }
    }

    fn shapes() -> [SigmoidShape; 2] {
        [
            SigmoidShape::Smoothstep,
            SigmoidShape::Logistic {
                steepness: DEFAULT_STEEPNESS,
            },
        ]
    }

    #[test]
    fn sigmoid_midpoint_and_endpoints() {
        for shape in shapes() {
            let p = SigmoidProfile::new(10.0, 4.0, 1.0, shape).unwrap();
            assert_abs_diff_eq!(p.sample(0.5).y, 2.0, epsilon = 1e-6);
            assert_abs_diff_eq!(p.sample(0.0).y, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.sample(1.0).y, 4.0, epsilon = 1e-12);
            for t in [0.0, 1.0] {
                let f = p.sample(t);
                assert!(f.dy.abs() <= 1e-3 * 4.0, "dy({t}) = {}", f.dy);
            }
        }
    }

    #[test]
    fn logistic_endpoint_heading() {
        // Oracle: central differences on the closed-form rescaled logistic.
        let a = DEFAULT_STEEPNESS;
        let s = |tau: f64| (logistic(a * (2.0 * tau - 1.0)) - logistic(-a)) / (logistic(a) - logistic(-a));
        let h = 1e-6;
        let slope = (s(1.0 + h) - s(1.0 - h)) / (2.0 * h);
        let heading = (4.0 * slope).atan2(10.0);
        let p = SigmoidProfile::new(10.0, 4.0, 1.0, SigmoidShape::Logistic { steepness: a }).unwrap();
        let f = p.sample(1.0);
        assert_abs_diff_eq!(f.dy.atan2(f.dx), heading, epsilon = 1e-8);
        assert!(heading.abs() < 1e-3);
    }

    #[test]
    fn smoothstep_ends_exactly_flat() {
        let p = SigmoidProfile::new(10.0, 4.0, 1.0, SigmoidShape::Smoothstep).unwrap();
        for t in [0.0, 1.0] {
            let f = p.sample(t);
            assert_eq!(f.dy, 0.0);
            assert_eq!(f.ddy, 0.0);
        }
    }

    #[test]
    fn sigmoid_derivatives_match_finite_differences() {
        for shape in shapes() {
            let p = SigmoidProfile::new(10.0, -4.0, 1.0, shape).unwrap();
            let h = 1e-5;
            for k in 1..20 {
                let t = k as f64 / 20.0;
                let f = p.sample(t);
                let dy = (p.sample(t + h).y - p.sample(t - h).y) / (2.0 * h);
                let ddy = (p.sample(t + h).dy - p.sample(t - h).dy) / (2.0 * h);
                assert_abs_diff_eq!(f.dy, dy, epsilon = 1e-5);
                assert_abs_diff_eq!(f.ddy, ddy, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn sigmoid_rejects_bad_duration() {
        let shape = SigmoidShape::Smoothstep;
        assert!(generate_sigmoid_trajectory(10.0, 4.0, 0.0, 0.01, shape).is_err());
        assert!(generate_sigmoid_trajectory(10.0, 4.0, -1.0, 0.01, shape).is_err());
        assert!(generate_sigmoid_trajectory(10.0, 4.0, 1.0, 0.3, shape).is_err());
    }

    #[test]
    fn flatness_examples() {
        let straight = FlatSample {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            dx: 10.0,
            dy: 0.0,
            ddx: 0.0,
            ddy: 0.0,
            dddx: 0.0,
            dddy: 0.0,
        };
        let (x, u) = flat_to_state(&straight, 5.0).unwrap();
        assert_eq!(x.0[2], 0.0);
        assert_eq!(u.0[1], 0.0);
        assert_eq!(u.0[0], 10.0);

        let t = 0.7f64;
        let circle = FlatSample {
            t,
            x: t.sin(),
            y: -t.cos(),
            dx: t.cos(),
            dy: t.sin(),
            ddx: -t.sin(),
            ddy: t.cos(),
            dddx: -t.cos(),
            dddy: -t.sin(),
        };
        let (_, u) = flat_to_state(&circle, 1.0).unwrap();
        assert_abs_diff_eq!(u.0[1], PI / 4.0, epsilon = 1e-12);

        let curve = FlatSample {
            t: 0.0,
            x: 0.0,
            y: 0.3,
            dx: 9.0,
            dy: 2.0,
            ddx: 0.5,
            ddy: 3.0,
            dddx: 0.0,
            dddy: 0.0,
        };
        let mirrored = FlatSample {
            y: -0.3,
            dy: -2.0,
            ddy: -3.0,
            ..curve
        };
        let (xa, ua) = flat_to_state(&curve, 5.0).unwrap();
        let (xb, ub) = flat_to_state(&mirrored, 5.0).unwrap();
        assert_abs_diff_eq!(xa.0[2], -xb.0[2], epsilon = 1e-15);
        assert_abs_diff_eq!(ua.0[1], -ub.0[1], epsilon = 1e-15);

        let stopped = FlatSample {
            dx: 0.0,
            dy: 1e-8,
            ..straight
        };
        assert!(matches!(
            flat_to_state(&stopped, 5.0),
            Err(Error::DegenerateFlatness { .. })
        ));
    }

    #[test]
    fn generic_reference_agrees_with_flat_to_state() {
        let p = SigmoidProfile::new(10.0, 4.0, 1.0, SigmoidShape::Smoothstep).unwrap();
        for k in 0..=10 {
            let f = p.sample(k as f64 / 10.0);
            let r = bicycle_reference(&f, 5.0);
            let (x, u) = flat_to_state(&f, 5.0).unwrap();
            assert_abs_diff_eq!(r.theta, x.0[2], epsilon = 1e-12);
            assert_abs_diff_eq!(r.steer, u.0[1], epsilon = 1e-12);
            // Flatness identity: v·tan(ζ)/L equals the heading rate.
            assert_abs_diff_eq!(r.speed * r.steer.tan() / 5.0, r.theta_rate, epsilon = 1e-9);
        }
    }

    fn bicycle_setup() -> (SystemModel, TrackingGains) {
        (
            SystemModel::Bicycle(BicycleParams::default()),
            TrackingGains::Bicycle(BicycleGains::default()),
        )
    }

    #[test]
    fn zero_error_is_pure_feedforward() {
        let (model, gains) = bicycle_setup();
        let xd = SystemState(vec![1.0, 2.0, 0.1]);
        let ff = ControlInput(vec![10.5, 0.2]);
        let u = tracking_control(&model, &xd, (&xd, &ff), &gains).unwrap();
        assert_eq!(u, ff);

        let model = SystemModel::Planar(PlanarParams::default());
        let gains = TrackingGains::Planar(PlanarGains::default());
        let xd = SystemState(vec![1.0, 2.0, 1.0, 0.0]);
        let ff = ControlInput(vec![0.0, 3.0]);
        assert_eq!(tracking_control(&model, &xd, (&xd, &ff), &gains).unwrap(), ff);
    }

    #[test]
    fn lateral_offset_steers_back() {
        let (model, gains) = bicycle_setup();
        let xd = SystemState(vec![0.0, 0.0, 0.0]);
        let ff = ControlInput(vec![10.0, 0.0]);
        let left = SystemState(vec![0.0, 0.5, 0.0]);
        let u = tracking_control(&model, &left, (&xd, &ff), &gains).unwrap();
        assert!(u.0[1] < 0.0);
        let right = SystemState(vec![0.0, -0.5, 0.0]);
        let u = tracking_control(&model, &right, (&xd, &ff), &gains).unwrap();
        assert!(u.0[1] > 0.0);
    }

    #[test]
    fn huge_error_saturates() {
        let (model, gains) = bicycle_setup();
        let xd = SystemState(vec![0.0, 0.0, 0.0]);
        let ff = ControlInput(vec![10.0, 0.0]);
        let far = SystemState(vec![0.0, 300.0, 0.0]);
        let u = tracking_control(&model, &far, (&xd, &ff), &gains).unwrap();
        assert_abs_diff_eq!(u.0[1], -BicycleParams::default().steer_limit, epsilon = 1e-12);
        let behind = SystemState(vec![-500.0, 0.0, 0.0]);
        let u = tracking_control(&model, &behind, (&xd, &ff), &gains).unwrap();
        assert_eq!(u.0[0], BicycleParams::default().speed_max);

        let model = SystemModel::Planar(PlanarParams::default());
        let gains = TrackingGains::Planar(PlanarGains::default());
        let xd = SystemState(vec![0.0; 4]);
        let far = SystemState(vec![100.0, -100.0, 0.0, 0.0]);
        let u = tracking_control(&model, &far, (&xd, &ControlInput(vec![0.0, 0.0])), &gains).unwrap();
        assert_eq!(u.0, vec![-50.0, 50.0]);
    }

    #[test]
    fn highway_library_shape() {
        let lib = build_highway_library(0.01).unwrap();
        assert_eq!(lib.len(), 3);
        let keep = lib.get(1);
        assert_eq!(keep.delta_y, 0.0);
        assert!(keep.nominal.states.iter().all(|s| s.0[1] == 0.0));
        let (left, right) = (lib.get(0), lib.get(2));
        assert_eq!(left.delta_x, 10.0);
        for (a, b) in left.nominal.states.iter().zip(&right.nominal.states) {
            assert_abs_diff_eq!(a.0[1], -b.0[1], epsilon = 1e-12);
        }
        assert_eq!(keep.nominal.states.len(), 101);
        assert_eq!(keep.start_state().0, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn surrogate_library_shape() {
        let lib = build_surrogate_library(0.01).unwrap();
        assert_eq!(lib.len(), 7);
        assert_eq!(lib.get(3).delta_y, 0.0);
        let dys: Vec<f64> = lib.primitives.iter().map(|p| p.delta_y).collect();
        assert!(dys.windows(2).all(|w| w[0] < w[1]));
        for p in &lib.primitives {
            let end = p.nominal.final_state();
            assert!(end.0[3].abs() < 1e-3 * p.delta_y.abs().max(1e-9) + 1e-12);
            assert_eq!(p.delta_x, lib.get(0).delta_x);
        }
    }

    #[test]
    fn undisturbed_rollouts_track_nominal() {
        for lib in [
            build_highway_library(0.01).unwrap(),
            build_surrogate_library(0.01).unwrap(),
        ] {
            for p in &lib.primitives {
                let x0 = p.start_state().clone();
                let offset = vec![0.0; lib.model.state_dim()];
                let w = DisturbanceSignal::zero(lib.model.disturbance_dim());
                let tr = p.simulate(&lib.model, &x0, &offset, &w, 0.0, 0.01).unwrap();
                for (s, d) in tr.states.iter().zip(&p.nominal.states) {
                    let err = (s.0[0] - d.0[0]).hypot(s.0[1] - d.0[1]);
                    assert!(err < 1e-3, "primitive {} error {err}", p.id);
                }
                if let SystemModel::Bicycle(_) = lib.model {
                    assert!(tr.final_state().0[2].abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn left_and_right_are_mirror_images_under_mirrored_disturbance() {
        let lib = build_highway_library(0.01).unwrap();
        let ws = DisturbanceSet::new(vec![-0.5, -1.0, -0.25], vec![0.5, 1.0, 0.25]).unwrap();
        let w = sample_disturbance(&ws, 1.0, 0.1, 11).unwrap();
        let wm = w.negate_channels(&[1, 2]);
        let x0 = SystemState(vec![0.1, 0.2, 0.01]);
        let x0m = SystemState(vec![0.1, -0.2, -0.01]);
        let off = [0.0; 3];
        let a = lib.get(0).simulate(&lib.model, &x0, &off, &w, 0.0, 0.01).unwrap();
        let b = lib.get(2).simulate(&lib.model, &x0m, &off, &wm, 0.0, 0.01).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_abs_diff_eq!(sa.0[0], sb.0[0], epsilon = 1e-9);
            assert_abs_diff_eq!(sa.0[1], -sb.0[1], epsilon = 1e-9);
            assert_abs_diff_eq!(sa.0[2], -sb.0[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn error_field_matches_state_space_simulation() {
        // The funnel engine integrates the error field; the simulator
        // integrates the plant. Both must describe the same closed loop.
        let lib = build_highway_library(0.01).unwrap();
        let p = lib.get(0);
        let field = p.closed_loop_field(&lib.model).unwrap();
        let x0 = SystemState(vec![0.05, -0.1, 0.02]);
        let w = DisturbanceSignal::zero(3);
        let tr = p.simulate(&lib.model, &x0, &[0.0; 3], &w, 0.0, 0.001).unwrap();
        let mut z = field.from_state_box(0.0, &IntervalBox::point(&x0.0)).mid();
        let h = 0.001;
        for k in 0..1000 {
            let t = k as f64 * h;
            let k1 = field.drift(t, &z);
            let zm: Vec<f64> = z.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
            let k2 = field.drift(t + 0.5 * h, &zm);
            let zm: Vec<f64> = z.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
            let k3 = field.drift(t + 0.5 * h, &zm);
            let ze: Vec<f64> = z.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
            let k4 = field.drift(t + h, &ze);
            for i in 0..3 {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let back = field.to_state_box(1.0, &IntervalBox::point(&z)).mid();
        let end = &tr.final_state().0;
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], end[i], epsilon = 1e-7);
        }
    }
}
