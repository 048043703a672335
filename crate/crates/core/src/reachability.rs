//! Validated funnels for closed-loop primitives.
//!
//! Each step encloses the flow of `ż = g(t, z) + b(t, w)` over `[t, t + h]`:
//!
//! 1. an a-priori enclosure `Ẑ ⊇ z([t, t+h])` by Picard iteration
//!    (`Z + [0, h]·(g(T, Ẑ) + D) ⊆ int Ẑ`), inflating on failure;
//! 2. the Euler map `z + h·g(t, z)` in mean-value form over the current box;
//! 3. the Taylor remainder `½h²·(∂ₜg + ∂_z g·(g + D))` evaluated on `Ẑ`, plus
//!    `h·D` for the disturbance integral.
//!
//! Fields are integrated in their own (error) coordinates and mapped to
//! state-space boxes only for output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sample_disturbance, DisturbanceSet, DisturbanceSignal, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::interval::{Interval, IntervalBox};
use crate::primitives::PrimitiveLibrary;
use crate::scalar::{Dual, Scalar, DUAL_VARS};
use crate::seed;

/// Closed-loop vector field with additive disturbance, in its own
/// coordinates `z`.
pub trait ClosedLoopField: Sync {
    fn dim(&self) -> usize;

    /// Disturbance-free drift `g(t, z)`.
    fn drift<S: Scalar>(&self, t: S, z: &[S]) -> Vec<S>;

    /// Box containing the disturbance contribution `b(s, ζ, w)` for all
    /// `s ∈ t`, `ζ ∈ z` and admissible `w`.
    fn disturbance_enclosure(&self, t: Interval, z: &IntervalBox, ws: &DisturbanceSet) -> Vec<Interval>;

    fn to_state_box(&self, _t: f64, z: &IntervalBox) -> IntervalBox {
        z.clone()
    }

    #[allow(clippy::wrong_self_convention)]
    fn from_state_box(&self, _t: f64, x: &IntervalBox) -> IntervalBox {
        x.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunnelOptions {
    pub dt: f64,
    /// Allowed excursion beyond the inlet, per coordinate.
    pub working_margin: f64,
    pub max_retries: usize,
    /// Relative inflation for the first Picard attempt.
    pub picard_inflation: f64,
    /// Pieces per coordinate the inlet is split into; the funnel is the
    /// hull of the pieces' funnels.
    pub inlet_splits: usize,
}

impl Default for FunnelOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            working_margin: 40.0,
            max_retries: 10,
            picard_inflation: 0.01,
            inlet_splits: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Funnel {
    pub primitive_id: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub boxes: Vec<IntervalBox>,
}

impl Funnel {
    pub fn inlet(&self) -> &IntervalBox {
        &self.boxes[0]
    }

    pub fn outlet(&self) -> &IntervalBox {
        self.boxes.last().expect("funnel has at least one box")
    }

    pub fn dim(&self) -> usize {
        self.inlet().dim()
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().expect("funnel has at least one time")
    }
}

fn eval_dual<F: ClosedLoopField>(field: &F, t: Interval, z: &IntervalBox) -> Vec<Dual> {
    let n = field.dim();
    let td = Dual::variable(t, n);
    let zd: Vec<Dual> = (0..n).map(|i| Dual::variable(z[i], i)).collect();
    field.drift(td, &zd)
}

fn sweep(z: &IntervalBox, h: f64, rate: &[Interval]) -> IntervalBox {
    let hh = Interval::new(0.0, h);
    IntervalBox(z.0.iter().zip(rate).map(|(&zi, &ri)| zi + hh * ri).collect())
}

fn inflate_box(z: &IntervalBox, rel: f64, abs: f64) -> IntervalBox {
    IntervalBox(z.0.iter().map(|zi| zi.inflate(rel * zi.width() + abs)).collect())
}

/// One validated step from box `z` at time `t`.
fn validated_step<F: ClosedLoopField>(
    field: &F,
    z: &IntervalBox,
    t: f64,
    ws: &DisturbanceSet,
    opts: &FunnelOptions,
    step: usize,
) -> Result<IntervalBox> {
    let n = field.dim();
    let h = opts.dt;
    let span = Interval::point(t).hull(&(Interval::point(t) + Interval::point(h)));
    // A-priori enclosure.
    let dist0 = field.disturbance_enclosure(span, z, ws);
    let g0: Vec<Interval> = field
        .drift(span, &z.0)
        .iter()
        .zip(&dist0)
        .map(|(&g, &d)| g + d)
        .collect();
    let mut inflation = opts.picard_inflation;
    let mut guess = inflate_box(&sweep(z, h, &g0), inflation, 1e-12);
    let mut accepted = None;
    for _ in 0..=opts.max_retries {
        let duals = eval_dual(field, span, &guess);
        let dist = field.disturbance_enclosure(span, &guess, ws);
        let rate: Vec<Interval> = duals.iter().zip(&dist).map(|(g, &d)| g.v + d).collect();
        let image = sweep(z, h, &rate);
        if image.is_finite() && image.is_interior_of(&guess) {
            accepted = Some((image, duals, rate, dist));
            break;
        }
        if !image.is_finite() {
            break;
        }
        inflation *= 2.0;
        guess = inflate_box(&image.hull(z), inflation, 1e-12 * inflation);
    }
    let Some((enclosure, duals, rate, dist)) = accepted else {
        return Err(Error::Soundness {
            step,
            t,
            detail: "no self-mapping a-priori enclosure".into(),
        });
    };

    // Remainder bound over the a-priori enclosure.
    let remainder: Vec<Interval> = (0..n)
        .map(|i| {
            let b = duals[i].d[..n]
                .iter()
                .zip(&rate)
                .fold(duals[i].d[n], |acc, (dj, rj)| acc + *dj * *rj);
            b.scale(0.5 * h * h)
        })
        .collect();

    // Mean-value form of the Euler map.
    let center = z.mid();
    let t_pt = Interval::point(t);
    let cz: Vec<Interval> = center.iter().map(|&c| Interval::point(c)).collect();
    let g_c = field.drift(t_pt, &cz);
    let jac = eval_dual(field, t_pt, z);
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = cz[i] + g_c[i].scale(h);
        for j in 0..n {
            let dz = z[j] - cz[j];
            let mut coeff = jac[i].d[j].scale(h);
            if i == j {
                coeff = coeff + Interval::point(1.0);
            }
            v = v + coeff * dz;
        }
        v = v + dist[i].scale(h) + remainder[i];
        let tight = v.intersect(&enclosure[i]).unwrap_or(v);
        next.push(tight);
    }
    let next = IntervalBox(next);
    if !next.is_finite() {
        return Err(Error::Soundness {
            step,
            t,
            detail: "non-finite enclosure".into(),
        });
    }
    Ok(next)
}

/// Grid of sub-boxes covering `b`, `splits` per non-degenerate coordinate.
fn split_box(b: &IntervalBox, splits: usize) -> Vec<IntervalBox> {
    let mut out = vec![Vec::new()];
    for iv in &b.0 {
        let splits = if iv.width() > 0.0 { splits } else { 1 };
        let w = iv.width() / splits as f64;
        let parts: Vec<Interval> = (0..splits)
            .map(|k| {
                let lo = if k == 0 { iv.lo() } else { iv.lo() + k as f64 * w };
                let hi = if k + 1 == splits {
                    iv.hi()
                } else {
                    iv.lo() + (k + 1) as f64 * w
                };
                Interval::new(lo, hi.max(lo))
            })
            .collect();
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<Interval>| {
                parts.iter().map(move |&p| {
                    let mut v = prefix.clone();
                    v.push(p);
                    v
                })
            })
            .collect();
    }
    out.into_iter().map(IntervalBox).collect()
}

/// State-space boxes on the step grid from one inlet piece.
fn propagate<F: ClosedLoopField>(
    field: &F,
    inlet: &IntervalBox,
    ws: &DisturbanceSet,
    steps: usize,
    opts: &FunnelOptions,
) -> Result<Vec<IntervalBox>> {
    let mut z = field.from_state_box(0.0, inlet);
    let working = IntervalBox(z.0.iter().map(|zi| zi.inflate(opts.working_margin)).collect());
    let mut boxes = vec![inlet.clone()];
    for k in 0..steps {
        let t = k as f64 * opts.dt;
        z = validated_step(field, &z, t, ws, opts, k)?;
        let t_next = (k + 1) as f64 * opts.dt;
        if !z.is_subset_of(&working) {
            return Err(Error::Divergence { step: k + 1, t: t_next });
        }
        boxes.push(field.to_state_box(t_next, &z));
    }
    Ok(boxes)
}

/// Funnel of `field` from a state-space `inlet` over `[0, duration]`.
///
/// Returned boxes are in state coordinates; `boxes[0]` is the inlet itself.
pub fn compute_funnel<F: ClosedLoopField>(
    field: &F,
    primitive_id: usize,
    inlet: &IntervalBox,
    ws: &DisturbanceSet,
    duration: f64,
    opts: &FunnelOptions,
) -> Result<Funnel> {
    if inlet.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: inlet.dim(),
        });
    }
    if !inlet.is_finite() {
        return Err(Error::invalid("inlet must be a finite box"));
    }
    if opts.inlet_splits == 0 {
        return Err(Error::invalid("inlet_splits must be at least 1"));
    }
    let steps = crate::dynamics::step_count(duration, opts.dt)?;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * opts.dt).collect();
    let pieces = split_box(inlet, opts.inlet_splits);
    let tubes = pieces
        .par_iter()
        .map(|piece| propagate(field, piece, ws, steps, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut boxes = tubes[0].clone();
    for tube in &tubes[1..] {
        for (b, t) in boxes.iter_mut().zip(tube) {
            *b = b.hull(t);
        }
    }
    boxes[0] = inlet.clone();
    Ok(Funnel {
        primitive_id,
        dt: opts.dt,
        times,
        boxes,
    })
}

/// Shifts every box by `offset` (position coordinates only in practice).
pub fn translate_funnel(f: &Funnel, offset: &[f64]) -> Funnel {
    Funnel {
        primitive_id: f.primitive_id,
        dt: f.dt,
        times: f.times.clone(),
        boxes: f.boxes.iter().map(|b| b.translate(offset)).collect(),
    }
}

/// Whether `fj`'s outlet, moved back by `fj`'s nominal displacement, lies in
/// `fk`'s inlet.
pub fn check_composable(fj: &Funnel, fk: &Funnel, displacement_j: &[f64]) -> Result<bool> {
    if fj.dim() != fk.dim() || displacement_j.len() != fj.dim() {
        return Err(Error::DimensionMismatch {
            expected: fj.dim(),
            got: fk.dim(),
        });
    }
    let back: Vec<f64> = displacement_j.iter().map(|d| -d).collect();
    Ok(fj.outlet().translate(&back).is_subset_of(fk.inlet()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Certified funnels.
    Funnel,
    /// Ablation: nominal trajectories as degenerate point funnels.
    Nominal,
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "funnel" => Ok(Arm::Funnel),
            "nominal" => Ok(Arm::Nominal),
            other => Err(Error::invalid(format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelLibrary {
    pub arm: Arm,
    pub funnels: Vec<Funnel>,
    /// Nominal displacement of each primitive.
    pub displacements: Vec<Vec<f64>>,
    /// `composability[j][k]`: `j` may be followed by `k`.
    pub composability: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InletSearch {
    /// Growth factor applied when a translated outlet overhangs the inlet.
    pub growth: f64,
    pub max_iterations: usize,
    /// Starting half-width for every coordinate.
    pub initial_half_width: f64,
}

impl Default for InletSearch {
    fn default() -> Self {
        Self {
            growth: 1.05,
            max_iterations: 40,
            initial_half_width: 1e-3,
        }
    }
}

impl FunnelLibrary {
    pub fn len(&self) -> usize {
        self.funnels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funnels.is_empty()
    }

    pub fn inlet(&self, id: usize) -> &IntervalBox {
        self.funnels[id].inlet()
    }

    /// Builds certified funnels sharing a common inlet, grown until every
    /// translated outlet fits inside it.
    pub fn build(
        lib: &PrimitiveLibrary,
        ws: &DisturbanceSet,
        opts: &FunnelOptions,
        search: &InletSearch,
    ) -> Result<Self> {
        let displacements: Vec<Vec<f64>> = lib.primitives.iter().map(|p| p.displacement(&lib.model)).collect();
        let fields = lib
            .primitives
            .iter()
            .map(|p| p.closed_loop_field(&lib.model))
            .collect::<Result<Vec<_>>>()?;
        let first = lib
            .primitives
            .first()
            .ok_or_else(|| Error::invalid("empty primitive library"))?;
        let starts = lib
            .primitives
            .iter()
            .fold(IntervalBox::point(&first.start_state().0), |acc, p| {
                acc.hull(&IntervalBox::point(&p.start_state().0))
            });
        let half: Vec<f64> = starts
            .widths()
            .iter()
            .map(|w| 0.5 * w + search.initial_half_width)
            .collect();
        let mut inlet = IntervalBox::centered(&starts.mid(), &half);
        for _ in 0..search.max_iterations {
            let funnels = fields
                .par_iter()
                .zip(&lib.primitives)
                .map(|(f, p)| compute_funnel(f, p.id, &inlet, ws, p.duration, opts))
                .collect::<Result<Vec<_>>>()?;
            let mut needed = inlet.clone();
            let mut fits = true;
            for (f, d) in funnels.iter().zip(&displacements) {
                let back: Vec<f64> = d.iter().map(|v| -v).collect();
                let moved = f.outlet().translate(&back);
                if !moved.is_subset_of(&inlet) {
                    fits = false;
                }
                needed = needed.hull(&moved);
            }
            if fits {
                let composability = funnels
                    .iter()
                    .zip(&displacements)
                    .map(|(fj, d)| {
                        funnels
                            .iter()
                            .map(|fk| check_composable(fj, fk, d))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(FunnelLibrary {
                    arm: Arm::Funnel,
                    funnels,
                    displacements,
                    composability,
                });
            }
            let mid = needed.mid();
            let half: Vec<f64> = needed
                .0
                .iter()
                .zip(&mid)
                .map(|(b, m)| (b.hi() - m).max(m - b.lo()) * search.growth)
                .collect();
            inlet = IntervalBox::centered(&mid, &half);
        }
        Err(Error::Soundness {
            step: 0,
            t: 0.0,
            detail: format!("no self-composable inlet after {} iterations", search.max_iterations),
        })
    }

    /// Ablation library: each funnel is the nominal trajectory as point
    /// boxes and every pair is declared composable.
    pub fn nominal(lib: &PrimitiveLibrary, dt: f64) -> Result<Self> {
        let funnels = lib
            .primitives
            .iter()
            .map(|p| {
                let steps = crate::dynamics::step_count(p.duration, dt)?;
                let mut times = Vec::with_capacity(steps + 1);
                let mut boxes = Vec::with_capacity(steps + 1);
                for k in 0..=steps {
                    let t = k as f64 * dt;
                    let (x, _) = p.reference(&lib.model, t)?;
                    times.push(t);
                    boxes.push(IntervalBox::point(&x.0));
                }
                Ok(Funnel {
                    primitive_id: p.id,
                    dt,
                    times,
                    boxes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = funnels.len();
        Ok(FunnelLibrary {
            arm: Arm::Nominal,
            funnels,
            displacements: lib.primitives.iter().map(|p| p.displacement(&lib.model)).collect(),
            composability: vec![vec![true; m]; m],
        })
    }

    /// Primitives whose inlet contains the initial uncertainty box.
    pub fn initial_mask(&self, initial: &IntervalBox) -> Vec<bool> {
        self.funnels
            .iter()
            .map(|f| match self.arm {
                Arm::Funnel => initial.is_subset_of(f.inlet()),
                Arm::Nominal => true,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub primitive_id: usize,
    pub samples: usize,
    pub violations: usize,
    /// Smallest signed distance of any sampled state to its box boundary
    /// (negative when outside).
    pub worst_margin: f64,
}

fn box_margin(b: &IntervalBox, x: &[f64]) -> f64 {
    b.0.iter()
        .zip(x)
        .map(|(bi, &xi)| (xi - bi.lo()).min(bi.hi() - xi))
        .fold(f64::INFINITY, f64::min)
}

/// Falsification: random inlet states and disturbance signals, compared to
/// the funnel at grid times.
///
/// `simulate(x0, w, dt)` must return a trajectory sampled every `dt`, where
/// `dt = funnel.dt / 10`.
pub fn verify_funnel_monte_carlo<Sim>(
    funnel: &Funnel,
    simulate: Sim,
    ws: &DisturbanceSet,
    segment_duration: f64,
    n_samples: usize,
    seed_base: u64,
) -> Result<ViolationReport>
where
    Sim: Fn(&SystemState, &DisturbanceSignal, f64) -> Result<Trajectory> + Sync,
{
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    use rand::Rng as _;
    let sub = 10;
    let dt = funnel.dt / sub as f64;
    let horizon = funnel.duration();
    let per_sample = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(
                seed_base,
                &[seed::tag::MONTE_CARLO, funnel.primitive_id as u64, i as u64],
            );
            let mut rng = seed::rng(s);
            let x0: Vec<f64> = funnel
                .inlet()
                .0
                .iter()
                .map(|b| {
                    if b.width() > 0.0 {
                        rng.random_range(b.lo()..=b.hi())
                    } else {
                        b.lo()
                    }
                })
                .collect();
            let w = sample_disturbance(ws, horizon, segment_duration, rng.random())?;
            let tr = simulate(&SystemState(x0), &w, dt)?;
            let mut worst = f64::INFINITY;
            let mut bad = false;
            for (k, b) in funnel.boxes.iter().enumerate() {
                let m = box_margin(b, &tr.states[k * sub].0);
                worst = worst.min(m);
                bad |= m < 0.0;
            }
            Ok((bad, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViolationReport {
        primitive_id: funnel.primitive_id,
        samples: n_samples,
        violations: per_sample.iter().filter(|(b, _)| *b).count(),
        worst_margin: per_sample.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min),
    })
}

const _: () = assert!(DUAL_VARS >= 5, "fields need state dim + 1 dual slots");
