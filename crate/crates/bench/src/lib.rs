//! Shared fixtures for the criterion benches.

use funnelpac::pipeline::ExperimentConfig;
use funnelpac::policy::{Architecture, EpisodeContext, PolicyParams};
use funnelpac::reachability::FunnelLibrary;
use funnelpac::EnvironmentKind;

/// Default experiment configuration for `kind`.
pub fn config(kind: EnvironmentKind) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        ..ExperimentConfig::default()
    }
    .resolved()
}

/// Primitive and funnel libraries for `kind` with default settings.
pub fn context(kind: EnvironmentKind) -> EpisodeContext {
    let cfg = config(kind);
    let lib = cfg.primitive_library().expect("primitive library");
    let ws = cfg.disturbance_set().expect("disturbance set");
    let funnels = FunnelLibrary::build(&lib, &ws, &cfg.funnel, &cfg.inlet_search).expect("funnel library");
    EpisodeContext::new(lib, funnels).expect("episode context")
}

/// A lane-keeping highway policy: zero weights with a positive "keep" bias.
pub fn lane_keeper() -> PolicyParams {
    let mut p = PolicyParams::zeros(Architecture::highway());
    let q = p.theta.len();
    p.theta[q - 2] = 1.0;
    p
}
