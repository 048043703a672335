//! Disturbed continuous-time plants, disturbance signals and RK4 rollouts.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vec<f64>);

impl SystemState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Box of admissible disturbance values. Signals drawn from it satisfy
/// `‖w‖∞ ≤ gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DisturbanceSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !l.is_finite() || !u.is_finite() || l > u)
        {
            return Err(Error::invalid("disturbance box needs finite lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    /// Box `[-b_i, b_i]` per channel.
    pub fn symmetric(bounds: &[f64]) -> Result<Self> {
        Self::new(bounds.iter().map(|b| -b).collect(), bounds.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Sup-norm bound of the set.
    pub fn gamma(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.len() == self.dim()
            && w.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceSignal {
    Zero {
        dim: usize,
    },
    PiecewiseConstant {
        segment_duration: f64,
        values: Vec<Vec<f64>>,
    },
}

impl DisturbanceSignal {
    pub fn zero(dim: usize) -> Self {
        DisturbanceSignal::Zero { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            DisturbanceSignal::Zero { dim } => *dim,
            DisturbanceSignal::PiecewiseConstant { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    /// Value at time `t`. Segments are left-closed; times past the last
    /// segment hold its value.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        match self {
            DisturbanceSignal::Zero { dim } => vec![0.0; *dim],
            DisturbanceSignal::PiecewiseConstant {
                segment_duration,
                values,
            } => {
                let idx = (t.max(0.0) / segment_duration).floor() as usize;
                values[idx.min(values.len() - 1)].clone()
            }
        }
    }

    /// Sup norm over the realized segments.
    pub fn sup_norm(&self) -> f64 {
        match self {
            DisturbanceSignal::Zero { .. } => 0.0,
            DisturbanceSignal::PiecewiseConstant { values, .. } => {
                values.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
            }
        }
    }

    /// Mirror the given channels (`w_i -> -w_i`).
    pub fn negate_channels(&self, channels: &[usize]) -> Self {
        match self {
            DisturbanceSignal::Zero { .. } => self.clone(),
            DisturbanceSignal::PiecewiseConstant {
                segment_duration,
                values,
            } => DisturbanceSignal::PiecewiseConstant {
                segment_duration: *segment_duration,
                values: values
                    .iter()
                    .map(|v| {
                        let mut v = v.clone();
                        for &c in channels {
                            v[c] = -v[c];
                        }
                        v
                    })
                    .collect(),
            },
        }
    }
}

/// Anything that yields a disturbance value at a given time.
pub trait DisturbanceSource {
    fn value_at(&self, t: f64) -> Vec<f64>;
}

impl DisturbanceSource for DisturbanceSignal {
    fn value_at(&self, t: f64) -> Vec<f64> {
        DisturbanceSignal::value_at(self, t)
    }
}

/// View of a signal starting at `t0`, for primitives executed mid-episode.
pub struct Shifted<'a, W: ?Sized> {
    pub inner: &'a W,
    pub t0: f64,
}

impl<W: DisturbanceSource + ?Sized> DisturbanceSource for Shifted<'_, W> {
    fn value_at(&self, t: f64) -> Vec<f64> {
        self.inner.value_at(self.t0 + t)
    }
}

/// Draws a piecewise-constant signal whose segments are uniform in the box.
pub fn sample_disturbance(
    ws: &DisturbanceSet,
    horizon: f64,
    segment_duration: f64,
    seed: u64,
) -> Result<DisturbanceSignal> {
    if !(horizon > 0.0) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !(segment_duration > 0.0) {
        return Err(Error::invalid("segment duration must be positive"));
    }
    let segments = (horizon / segment_duration).ceil() as usize + 1;
    let mut rng = seed::rng(seed);
    let values = (0..segments)
        .map(|_| {
            ws.lower
                .iter()
                .zip(&ws.upper)
                .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..=u) })
                .collect()
        })
        .collect();
    Ok(DisturbanceSignal::PiecewiseConstant {
        segment_duration,
        values,
    })
}

/// Time-stamped rollout. `controls[k]` is the command applied at the start
/// of the interval `[times[k], times[k+1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Open-loop plant `ẋ = f(x, u, w)`.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;
    fn derivative(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>>;
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite {what}: {values:?}")))
    }
}

/// Kinematic bicycle with additive disturbances on all three rates.
pub fn bicycle_derivative(state: &[f64], speed: f64, steer: f64, length: f64, w: &[f64]) -> Result<[f64; 3]> {
    if state.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: state.len(),
        });
    }
    check_finite(state, "state")?;
    check_finite(w, "disturbance")?;
    if !speed.is_finite() || !steer.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite input: speed {speed}, steer {steer}"
        )));
    }
    if steer.abs() >= std::f64::consts::FRAC_PI_2 || !(length > 0.0) {
        return Err(Error::InvalidState(format!(
            "steer {steer} must lie in (-pi/2, pi/2) and length {length} be positive"
        )));
    }
    let theta = state[2];
    Ok([
        speed * theta.cos() + w[0],
        speed * theta.sin() + w[1],
        speed * steer.tan() / length + w[2],
    ])
}

/// Planar double integrator `[x, y, vx, vy]` with force-like disturbance.
pub fn surrogate_derivative(state: &[f64], accel: &[f64], w: &[f64]) -> Result<[f64; 4]> {
    if state.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: state.len(),
        });
    }
    check_finite(state, "state")?;
    check_finite(accel, "acceleration")?;
    check_finite(w, "disturbance")?;
    Ok([state[2], state[3], accel[0] + w[0], accel[1] + w[1]])
}

/// Bicycle plant; control vector is `[speed, steer]`.
#[derive(Clone, Copy, Debug)]
pub struct BicyclePlant {
    pub length: f64,
}

impl Plant for BicyclePlant {
    fn state_dim(&self) -> usize {
        3
    }
    fn disturbance_dim(&self) -> usize {
        3
    }
    fn derivative(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(bicycle_derivative(x, u[0], u[1], self.length, w)?.to_vec())
    }
}

/// Planar surrogate plant; control vector is `[ax, ay]`.
#[derive(Clone, Copy, Debug)]
pub struct PlanarPlant;

impl Plant for PlanarPlant {
    fn state_dim(&self) -> usize {
        4
    }
    fn disturbance_dim(&self) -> usize {
        2
    }
    fn derivative(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(surrogate_derivative(x, u, w)?.to_vec())
    }
}

/// Number of whole `dt` steps in `horizon`, rejecting non-multiples.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::invalid(format!(
            "horizon {horizon} and dt {dt} must be positive"
        )));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::invalid(format!(
            "horizon {horizon} is not a multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

/// Fixed-step RK4 rollout of the closed loop `ẋ = f(x, κ(t, x), w(t))`.
///
/// The controller is re-evaluated at every stage. The disturbance is held at
/// its mid-step value across each step, which is exact whenever step
/// boundaries align with the signal's segment boundaries.
pub fn integrate_rollout<P, C, W>(
    plant: &P,
    mut controller: C,
    x0: &SystemState,
    w: &W,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory>
where
    P: Plant + ?Sized,
    C: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    W: DisturbanceSource + ?Sized,
{
    let steps = step_count(horizon, dt)?;
    if x0.dim() != plant.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: plant.state_dim(),
            got: x0.dim(),
        });
    }
    check_finite(&x0.0, "initial state")?;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut x = x0.0.clone();
    times.push(0.0);
    states.push(x0.clone());

    let mut eval = |t: f64, x: &[f64], wv: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let u = controller(t, x)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteControl {
                t,
                detail: format!("{u:?}"),
            });
        }
        let dx = plant.derivative(x, &u, wv)?;
        Ok((dx, u))
    };

    let n = x.len();
    let mut tmp = vec![0.0; n];
    for k in 0..steps {
        let t = k as f64 * dt;
        let wv = w.value_at(t + 0.5 * dt);
        let (k1, u) = eval(t, &x, &wv)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        let (k2, _) = eval(t + 0.5 * dt, &tmp, &wv)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        let (k3, _) = eval(t + 0.5 * dt, &tmp, &wv)?;
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        let (k4, _) = eval(t + dt, &tmp, &wv)?;
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&x, "state")?;
        controls.push(ControlInput(u));
        times.push((k + 1) as f64 * dt);
        states.push(SystemState(x.clone()));
    }
    Ok(Trajectory {
        times,
        states,
        controls,
    })
}
