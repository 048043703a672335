//! Score-network policies and receding-horizon episodes.
//!
//! A policy maps an observation to one score per primitive and executes the
//! best-scoring primitive that may legally follow the previous one. The same
//! episode loop drives both cost functions: in funnel mode it chains
//! translated funnels from the undisturbed nominal chain, in rollout mode it
//! integrates the disturbed plant.

use serde::{Deserialize, Serialize};

use crate::dynamics::{DisturbanceSignal, SystemState};
use crate::environments::{funnel_collision_cost, CostRecord, Environment, FailureKind, Observation, PlacedFunnel};
use crate::error::{Error, Result};
use crate::interval::IntervalBox;
use crate::primitives::PrimitiveLibrary;
use crate::reachability::{translate_funnel, FunnelLibrary};

/// Layer widths from input to output; hidden layers use tanh, the output is
/// linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "architecture needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(Architecture { widths })
    }

    /// 10 → 16 → 16 → 16 → 3.
    pub fn highway() -> Self {
        Architecture {
            widths: vec![10, 16, 16, 16, 3],
        }
    }

    /// 16 → 24 → 16 → 7.
    pub fn surrogate() -> Self {
        Architecture {
            widths: vec![16, 24, 16, 7],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated architecture")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector. Each layer stores its weights row-major
/// (`out × in`) followed by its biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub architecture: Architecture,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(architecture: Architecture, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != architecture.param_count() {
            return Err(Error::DimensionMismatch {
                expected: architecture.param_count(),
                got: theta.len(),
            });
        }
        Ok(PolicyParams { architecture, theta })
    }

    pub fn zeros(architecture: Architecture) -> Self {
        let q = architecture.param_count();
        PolicyParams {
            architecture,
            theta: vec![0.0; q],
        }
    }
}

pub fn forward(params: &PolicyParams, obs: &Observation) -> Result<Vec<f64>> {
    let arch = &params.architecture;
    if obs.0.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: obs.0.len(),
        });
    }
    if params.theta.len() != arch.param_count() {
        return Err(Error::DimensionMismatch {
            expected: arch.param_count(),
            got: params.theta.len(),
        });
    }
    let layers = arch.widths.len() - 1;
    let mut h = obs.0.clone();
    let mut at = 0;
    for (l, w) in arch.widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &params.theta[at..at + n_in * n_out];
        let bias = &params.theta[at + n_in * n_out..at + n_in * n_out + n_out];
        at += n_in * n_out + n_out;
        h = (0..n_out)
            .map(|o| {
                let z = bias[o]
                    + weights[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(&h)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                if l + 1 < layers {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("policy produced non-finite scores"));
    }
    Ok(h)
}

/// Highest score among allowed primitives, ties to the lowest id.
pub fn select_primitive(scores: &[f64], mask: &[bool], step: usize) -> Result<usize> {
    if scores.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            got: scores.len(),
        });
    }
    let mut best: Option<usize> = None;
    for (i, (&s, &ok)) in scores.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::NoComposablePrimitive { step })
}

/// Everything an episode needs besides the environment and the policy.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    pub primitives: PrimitiveLibrary,
    pub funnels: FunnelLibrary,
    /// Half-widths of the initial state-uncertainty box around the
    /// environment's start state.
    pub initial_uncertainty: Vec<f64>,
}

impl EpisodeContext {
    pub fn new(primitives: PrimitiveLibrary, funnels: FunnelLibrary) -> Result<Self> {
        if primitives.len() != funnels.len() || primitives.is_empty() {
            return Err(Error::invalid(
                "primitive and funnel libraries must be non-empty and the same size",
            ));
        }
        let n = primitives.model.state_dim();
        Ok(EpisodeContext {
            primitives,
            funnels,
            initial_uncertainty: vec![0.0; n],
        })
    }

    /// Position offset that places the primitives' common start state on
    /// the environment's start state.
    pub fn start_offset(&self, env: &Environment) -> Vec<f64> {
        let start = env.start_state();
        let local = self.primitives.get(0).start_state();
        self.primitives
            .model
            .position_offset(start.0[0] - local.0[0], start.0[1] - local.0[1])
    }

    /// Initial uncertainty box in the primitives' local frame.
    pub fn initial_box(&self, env: &Environment) -> IntervalBox {
        let start = env.start_state();
        let back: Vec<f64> = self.start_offset(env).iter().map(|v| -v).collect();
        IntervalBox::centered(&start.0, &self.initial_uncertainty).translate(&back)
    }
}

pub enum EpisodeMode<'a> {
    /// Undisturbed nominal chain with certified funnels.
    Funnel,
    /// Disturbed closed-loop integration, optionally from a perturbed start.
    Rollout {
        w: &'a DisturbanceSignal,
        x0: Option<SystemState>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub decision_times: Vec<f64>,
    pub observations: Vec<Observation>,
    pub scores: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
    /// Position offset applied to each selected primitive.
    pub offsets: Vec<Vec<f64>>,
    pub cost: CostRecord,
}

impl EpisodeTrace {
    /// Funnels of the selected sequence placed in the global frame.
    pub fn placed_funnels(&self, funnels: &FunnelLibrary) -> Vec<PlacedFunnel> {
        self.selected
            .iter()
            .zip(&self.offsets)
            .zip(&self.decision_times)
            .map(|((&id, off), &t)| PlacedFunnel {
                primitive_id: id,
                start_time: t,
                funnel: translate_funnel(&funnels.funnels[id], off),
            })
            .collect()
    }
}

/// Runs `K` receding-horizon decisions of `theta` in `env`.
pub fn run_episode(
    env: &Environment,
    ctx: &EpisodeContext,
    theta: &PolicyParams,
    mode: &EpisodeMode<'_>,
) -> Result<EpisodeTrace> {
    let horizon = env.horizon();
    let model = &ctx.primitives.model;
    let mut trace = EpisodeTrace {
        decision_times: Vec::with_capacity(horizon),
        observations: Vec::with_capacity(horizon),
        scores: Vec::with_capacity(horizon),
        selected: Vec::with_capacity(horizon),
        offsets: Vec::with_capacity(horizon),
        cost: CostRecord::new(0, horizon, FailureKind::None),
    };
    let mut offset = ctx.start_offset(env);
    let mut state = match mode {
        EpisodeMode::Rollout { x0: Some(x0), .. } => x0.clone(),
        _ => env.start_state(),
    };
    let mut t = 0.0;
    let mut mask = ctx.funnels.initial_mask(&ctx.initial_box(env));
    for k in 0..horizon {
        let obs = env.observe(&state, t)?;
        let scores = forward(theta, &obs)?;
        let id = match select_primitive(&scores, &mask, k) {
            Ok(id) => id,
            Err(Error::NoComposablePrimitive { .. }) => {
                trace.cost = CostRecord::new(k, horizon, FailureKind::NoComposable);
                return Ok(trace);
            }
            Err(e) => return Err(e),
        };
        trace.decision_times.push(t);
        trace.observations.push(obs);
        trace.scores.push(scores);
        trace.selected.push(id);
        trace.offsets.push(offset.clone());

        let prim = ctx.primitives.get(id);
        match mode {
            EpisodeMode::Funnel => {
                state = SystemState(
                    prim.nominal
                        .final_state()
                        .0
                        .iter()
                        .zip(&offset)
                        .map(|(x, o)| x + o)
                        .collect(),
                );
            }
            EpisodeMode::Rollout { w, .. } => {
                let traj = prim.simulate(model, &state, &offset, *w, t, ctx.primitives.dt)?;
                for (tl, s) in traj.times.iter().zip(&traj.states) {
                    let kind = env.state_failure(&s.0, t + tl);
                    if kind != FailureKind::None {
                        trace.cost = CostRecord::new(k, horizon, kind);
                        return Ok(trace);
                    }
                }
                state = traj.final_state().clone();
            }
        }
        for (o, d) in offset.iter_mut().zip(&ctx.funnels.displacements[id]) {
            *o += d;
        }
        t += prim.duration;
        mask = ctx.funnels.composability[id].clone();
    }
    trace.cost = match mode {
        EpisodeMode::Funnel => funnel_collision_cost(env, &trace.placed_funnels(&ctx.funnels), &ctx.funnels)?,
        EpisodeMode::Rollout { .. } => CostRecord::new(horizon, horizon, FailureKind::None),
    };
    Ok(trace)
}

/// Funnel-sequence cost `C(π_θ, E)`.
pub fn funnel_cost(env: &Environment, ctx: &EpisodeContext, theta: &PolicyParams) -> Result<CostRecord> {
    Ok(run_episode(env, ctx, theta, &EpisodeMode::Funnel)?.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(
            Architecture::highway().param_count(),
            10 * 16 + 16 + 2 * (16 * 16 + 16) + 16 * 3 + 3
        );
        assert_eq!(
            Architecture::surrogate().param_count(),
            16 * 24 + 24 + 24 * 16 + 16 + 16 * 7 + 7
        );
        assert!(Architecture::new(vec![3]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let p = PolicyParams::zeros(Architecture::highway());
        let s = forward(&p, &Observation(vec![0.3; 10])).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 2 → 2 → 1: h = tanh(W1 x + b1), y = W2 h + b2.
        let arch = Architecture::new(vec![2, 2, 1]).unwrap();
        let theta = vec![0.5, -1.0, 2.0, 0.25, 0.1, -0.2, 1.5, -0.5, 0.3];
        let p = PolicyParams::new(arch, theta).unwrap();
        let x = [0.4, -0.8];
        let h0 = (0.5 * x[0] - 1.0 * x[1] + 0.1_f64).tanh();
        let h1 = (2.0 * x[0] + 0.25 * x[1] - 0.2_f64).tanh();
        let y = 1.5 * h0 - 0.5 * h1 + 0.3;
        let s = forward(&p, &Observation(x.to_vec())).unwrap();
        assert!((s[0] - y).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = PolicyParams::zeros(Architecture::highway());
        assert!(matches!(
            forward(&p, &Observation(vec![0.0; 9])),
            Err(Error::DimensionMismatch { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn selection_examples() {
        let s = [0.2, 0.9, 0.1];
        assert_eq!(select_primitive(&s, &[true; 3], 0).unwrap(), 1);
        assert_eq!(select_primitive(&s, &[true, false, true], 0).unwrap(), 0);
        assert_eq!(select_primitive(&[0.5, 0.5, 0.1], &[true; 3], 0).unwrap(), 0);
        assert!(matches!(
            select_primitive(&s, &[false; 3], 4),
            Err(Error::NoComposablePrimitive { step: 4 })
        ));
    }

    proptest! {
        #[test]
        fn selection_is_invariant_to_affine_score_changes(
            scores in prop::collection::vec(-10.0f64..10.0, 1..8),
            shift in -100.0f64..100.0,
            scale in 0.01f64..100.0,
            mask_bits in any::<u8>(),
        ) {
            let mut mask: Vec<bool> = (0..scores.len()).map(|i| mask_bits >> i & 1 == 1).collect();
            mask[0] = true;
            let base = select_primitive(&scores, &mask, 0).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            // Exact ties can be broken by rounding after an affine map, so
            // only compare when the winner is strictly separated.
            let gap = scores.iter().zip(&mask).enumerate()
                .filter(|(i, (_, &m))| m && *i != base)
                .map(|(_, (s, _))| scores[base] - s)
                .fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(select_primitive(&shifted, &mask, 0).unwrap(), base);
            prop_assert_eq!(select_primitive(&scaled, &mask, 0).unwrap(), base);
        }
    }
}
