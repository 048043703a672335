use super::*;
use crate::interval::Interval;
use crate::policy::Architecture;
use crate::primitives::build_highway_library;
use crate::reachability::Arm;
use rand::seq::SliceRandom;

fn empty_highway() -> HighwayEnvironment {
    let cfg = HighwayConfig {
        vehicle_count: 0,
        ..HighwayConfig::default()
    };
    sample_highway(&cfg, 0).unwrap()
}

fn parked(lane: usize, x0: f64, horizon: usize) -> Vehicle {
    Vehicle {
        lane,
        x0,
        speeds: vec![0.0; horizon],
        length: 4.5,
        width: 2.0,
    }
}

/// Lane-keep funnel at `y ∈ [y_lo, y_hi]` moving 10 m per second, on a
/// 0.1 s grid.
fn straight_funnel(y_lo: f64, y_hi: f64) -> Funnel {
    let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
    let boxes = times
        .iter()
        .map(|&t| {
            IntervalBox(vec![
                Interval::new(10.0 * t - 0.1, 10.0 * t + 0.1),
                Interval::new(y_lo, y_hi),
                Interval::new(-0.05, 0.05),
            ])
        })
        .collect();
    Funnel {
        primitive_id: 0,
        dt: 0.1,
        times,
        boxes,
    }
}

fn single_library(f: Funnel, composable: bool) -> FunnelLibrary {
    FunnelLibrary {
        arm: Arm::Funnel,
        funnels: vec![f],
        displacements: vec![vec![10.0, 0.0, 0.0]],
        composability: vec![vec![composable]],
    }
}

fn chain(f: &Funnel, n: usize) -> Vec<PlacedFunnel> {
    (0..n)
        .map(|k| PlacedFunnel {
            primitive_id: 0,
            start_time: k as f64,
            funnel: crate::reachability::translate_funnel(f, &[10.0 * k as f64, 0.0, 0.0]),
        })
        .collect()
}

#[test]
fn same_seed_same_environment() {
    for kind in [EnvironmentKind::Highway, EnvironmentKind::ObstacleField] {
        let a = sample_environment(kind, 42).unwrap();
        let b = sample_environment(kind, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_environment(kind, 43).unwrap());
    }
}

#[test]
fn kind_parses() {
    assert_eq!("highway".parse::<EnvironmentKind>().unwrap(), EnvironmentKind::Highway);
    assert_eq!(
        "obstacle_field".parse::<EnvironmentKind>().unwrap(),
        EnvironmentKind::ObstacleField
    );
    assert!("city".parse::<EnvironmentKind>().is_err());
}

#[test]
fn traffic_speeds_are_uniform_on_the_declared_range() {
    let n = 10_000;
    let speeds: Vec<f64> = (0..n)
        .map(
            |i| match sample_environment(EnvironmentKind::Highway, seed::derive(1, &[i])).unwrap() {
                Environment::Highway(e) => e.vehicles[0].speeds[0],
                _ => unreachable!(),
            },
        )
        .collect();
    assert!(speeds.iter().all(|s| (0.0..=9.0).contains(s)));
    let mean = speeds.iter().sum::<f64>() / n as f64;
    let se = 9.0 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 4.5).abs() < 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn obstacle_radii_stay_in_range() {
    for i in 0..10_000 {
        let Environment::ObstacleField(e) = sample_environment(EnvironmentKind::ObstacleField, i).unwrap() else {
            unreachable!()
        };
        assert_eq!(e.obstacles.len(), 50);
        assert!(e.obstacles.iter().all(|o| (0.05..=0.30).contains(&o.r)));
    }
}

#[test]
fn same_lane_vehicles_do_not_overlap_initially() {
    for s in 0..200 {
        let Environment::Highway(e) = sample_environment(EnvironmentKind::Highway, s).unwrap() else {
            unreachable!()
        };
        for (i, a) in e.vehicles.iter().enumerate() {
            for b in &e.vehicles[i + 1..] {
                if a.lane == b.lane {
                    assert!((a.x0 - b.x0).abs() >= a.length);
                }
            }
        }
    }
}

#[test]
fn vehicle_positions_integrate_the_frozen_profile() {
    let v = Vehicle {
        lane: 0,
        x0: 20.0,
        speeds: vec![2.0, 4.0],
        length: 4.5,
        width: 2.0,
    };
    assert_eq!(v.x_at(0.0, 1.0), 20.0);
    assert_eq!(v.x_at(0.5, 1.0), 21.0);
    assert_eq!(v.x_at(1.5, 1.0), 24.0);
    assert_eq!(v.x_at(3.0, 1.0), 30.0);
}

#[test]
fn empty_road_observes_padding() {
    let env = Environment::Highway(empty_highway());
    let obs = env.observe(&env.start_state(), 0.0).unwrap();
    assert_eq!(obs.0, vec![1.0; 10]);
}

#[test]
fn dead_ahead_vehicle_is_first_pair() {
    let mut h = empty_highway();
    h.vehicles.push(parked(2, 8.0, 10));
    let env = Environment::Highway(h);
    let obs = env.observe(&env.start_state(), 0.0).unwrap();
    assert_eq!(&obs.0[..2], &[8.0 / 50.0, 0.0]);
    assert!(obs.0[2..].iter().all(|&v| v == 1.0));
}

#[test]
fn observation_ignores_vehicle_labels() {
    let Environment::Highway(mut h) = sample_environment(EnvironmentKind::Highway, 9).unwrap() else {
        unreachable!()
    };
    let state = SystemState(vec![30.0, 9.0, 0.1]);
    let base = Environment::Highway(h.clone()).observe(&state, 2.5).unwrap();
    let mut rng = seed::rng(3);
    for _ in 0..20 {
        h.vehicles.shuffle(&mut rng);
        assert_eq!(Environment::Highway(h.clone()).observe(&state, 2.5).unwrap(), base);
    }
}

#[test]
fn rays_measure_distance_to_the_nearest_disc() {
    let cfg = ObstacleFieldConfig {
        obstacle_count: 0,
        ..ObstacleFieldConfig::default()
    };
    let mut e = sample_obstacle_field(&cfg, 0).unwrap();
    e.obstacles.push(Disc { x: 4.0, y: 0.0, r: 0.5 });
    let env = Environment::ObstacleField(e);
    let obs = env.observe(&env.start_state(), 0.0).unwrap();
    assert_eq!(obs.0.len(), 16);
    // Rays 7 and 8 straddle the forward axis at ±6° and hit the disc; the
    // ±18° rays already pass wide of it.
    let a = 6f64.to_radians();
    let expected = (4.0 * a.cos() - (0.25 - (4.0 * a.sin()).powi(2)).sqrt()) / 10.0;
    for (i, v) in obs.0.iter().enumerate() {
        if i == 7 || i == 8 {
            assert!((v - expected).abs() < 1e-12, "ray {i}: {v}");
        } else {
            assert_eq!(*v, 1.0, "ray {i}");
        }
    }
}

#[test]
fn cost_record_shape() {
    let r = CostRecord::new(3, 10, FailureKind::Collision);
    assert!((r.cost - 0.7).abs() < 1e-15);
    assert_eq!(CostRecord::new(10, 10, FailureKind::None).cost, 0.0);
}

#[test]
fn empty_road_funnel_chain_costs_nothing() {
    let env = Environment::Highway(empty_highway());
    let lib = single_library(straight_funnel(9.5, 10.5), true);
    let r = funnel_collision_cost(&env, &chain(&lib.funnels[0], 10), &lib).unwrap();
    assert_eq!((r.k, r.cost, r.failure_kind), (10, 0.0, FailureKind::None));
}

#[test]
fn wall_of_vehicles_fails_immediately() {
    let mut h = empty_highway();
    for lane in 0..5 {
        h.vehicles.push(parked(lane, 4.0, 10));
    }
    let env = Environment::Highway(h);
    let lib = single_library(straight_funnel(9.5, 10.5), true);
    let r = funnel_collision_cost(&env, &chain(&lib.funnels[0], 10), &lib).unwrap();
    assert_eq!((r.k, r.cost, r.failure_kind), (0, 1.0, FailureKind::Collision));
}

#[test]
fn one_millimetre_overlap_fails_the_primitive() {
    // Lane 3 vehicle spans y ∈ [13, 15]; at zero heading the ego footprint
    // adds its 1 m half-width, so a box reaching 12.001 overlaps by 1 mm.
    let mut h = empty_highway();
    h.max_vehicle_speed = 0.0;
    h.vehicles.push(parked(3, 25.0, 10));
    let env = Environment::Highway(h);
    let grazing = |y_hi: f64| {
        let mut f = straight_funnel(9.5, 10.5);
        f.boxes[5].0[1] = Interval::new(9.5, y_hi);
        f.boxes[5].0[2] = Interval::point(0.0);
        single_library(f, true)
    };
    let lib = grazing(12.001);
    let r = funnel_collision_cost(&env, &chain(&lib.funnels[0], 10), &lib).unwrap();
    assert_eq!((r.k, r.failure_kind), (2, FailureKind::Collision));
    let lib = grazing(11.999);
    let r = funnel_collision_cost(&env, &chain(&lib.funnels[0], 10), &lib).unwrap();
    assert_eq!(r.k, 10);
}

#[test]
fn leaving_the_road_is_a_boundary_failure() {
    let env = Environment::Highway(empty_highway());
    let lib = single_library(straight_funnel(19.0, 20.5), true);
    let r = funnel_collision_cost(&env, &chain(&lib.funnels[0], 10), &lib).unwrap();
    assert_eq!((r.k, r.failure_kind), (0, FailureKind::Boundary));
}

#[test]
fn uncertified_composition_is_rejected() {
    let env = Environment::Highway(empty_highway());
    let lib = single_library(straight_funnel(9.5, 10.5), false);
    assert!(matches!(
        funnel_collision_cost(&env, &chain(&lib.funnels[0], 2), &lib),
        Err(Error::ContractViolation(_))
    ));
    assert!(funnel_collision_cost(&env, &chain(&lib.funnels[0], 1), &lib).is_ok());
}

fn lane_keeper() -> PolicyParams {
    let mut p = PolicyParams::zeros(Architecture::highway());
    let q = p.theta.len();
    p.theta[q - 2] = 1.0;
    p
}

fn nominal_context() -> EpisodeContext {
    let prims = build_highway_library(0.01).unwrap();
    let funnels = FunnelLibrary::nominal(&prims, 0.01).unwrap();
    EpisodeContext::new(prims, funnels).unwrap()
}

#[test]
fn undisturbed_lane_keeping_on_empty_road_succeeds() {
    let env = Environment::Highway(empty_highway());
    let ctx = nominal_context();
    let w = DisturbanceSignal::zero(3);
    let r = rollout_cost(&env, &ctx, &lane_keeper(), &w, None).unwrap();
    assert_eq!((r.k, r.cost), (10, 0.0));
    let trace = run_episode(&env, &ctx, &lane_keeper(), &EpisodeMode::Funnel).unwrap();
    assert_eq!(trace.selected, vec![1; 10]);
    assert_eq!(trace.cost.cost, 0.0);
}

#[test]
fn repeated_left_changes_leave_the_road() {
    // Zero scores tie and resolve to the left lane change every time.
    let env = Environment::Highway(empty_highway());
    let ctx = nominal_context();
    let zero = PolicyParams::zeros(Architecture::highway());
    let r = rollout_cost(&env, &ctx, &zero, &DisturbanceSignal::zero(3), None).unwrap();
    assert_eq!(r.failure_kind, FailureKind::Boundary);
    assert_eq!(r.k, 2);
    let f = run_episode(&env, &ctx, &zero, &EpisodeMode::Funnel).unwrap().cost;
    assert_eq!((f.k, f.failure_kind), (2, FailureKind::Boundary));
}

#[test]
fn rollout_is_deterministic() {
    let env = sample_environment(EnvironmentKind::Highway, 5).unwrap();
    let ctx = nominal_context();
    let ws = crate::dynamics::DisturbanceSet::symmetric(&[0.5, 1.0, 0.25]).unwrap();
    let w = crate::dynamics::sample_disturbance(&ws, 10.0, 0.1, 11).unwrap();
    let a = rollout_cost(&env, &ctx, &lane_keeper(), &w, None).unwrap();
    let b = rollout_cost(&env, &ctx, &lane_keeper(), &w, None).unwrap();
    assert_eq!(a, b);
}
