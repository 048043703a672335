use funnelpac::environments::{sample_environment_with, EnvironmentConfig, HighwayConfig};
use funnelpac::policy::funnel_cost;
use funnelpac::EnvironmentKind;
use funnelpac_bench::{context, lane_keeper};

#[test]
fn lane_keeper_clears_an_empty_road() {
    let ctx = context(EnvironmentKind::Highway);
    assert_eq!(ctx.funnels.len(), 3);
    let cfg = EnvironmentConfig::Highway(HighwayConfig {
        vehicle_count: 0,
        ..HighwayConfig::default()
    });
    let env = sample_environment_with(&cfg, 1).unwrap();
    let c = funnel_cost(&env, &ctx, &lane_keeper()).unwrap();
    assert_eq!((c.k, c.cost), (10, 0.0));
}
