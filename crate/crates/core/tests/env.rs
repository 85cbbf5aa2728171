use usdc_core::dynamics::{ControlCommand, VehicleState};
use usdc_core::env::traffic::{idm_accel, pursuit_steer, yield_decision, Agent};
use usdc_core::env::{Env, EnvConfig, IdmParams, Outcome, Task};
use usdc_core::nn::encoder::{EGO_DIM, SV_DIM};

fn desk() -> EnvConfig {
    EnvConfig {
        n_sv: 3,
        n_obs_sv: 3,
        ..EnvConfig::default()
    }
}

fn tracking_driver(env: &Env) -> ControlCommand {
    let route = &env.map.routes[env.ego_routes[0]];
    let s = route.project(env.ego.position()).s;
    let delta = pursuit_steer(&env.ego, route, s, 0.4);
    ControlCommand::new(idm_accel(&IdmParams::default(), env.ego.v, None), delta)
}

fn run(env: &mut Env, seed: u64, task: Option<Task>) -> (Outcome, usize) {
    env.reset(seed, task).unwrap();
    loop {
        let u = tracking_driver(env);
        let out = env.step(u).unwrap();
        if let Some(o) = out.outcome() {
            return (o, out.info.step);
        }
    }
}

#[test]
fn same_seed_same_world() {
    let mut a = Env::new(desk()).unwrap();
    let mut b = Env::new(desk()).unwrap();
    assert_eq!(a.reset(11, None).unwrap(), b.reset(11, None).unwrap());
    for _ in 0..30 {
        let u = tracking_driver(&a);
        let (oa, ob) = (a.step(u).unwrap(), b.step(u).unwrap());
        assert_eq!(oa, ob);
        if oa.terminated || oa.truncated {
            break;
        }
    }
}

#[test]
fn task_one_hot_is_last() {
    let mut env = Env::new(desk()).unwrap();
    let obs = env.reset(3, Some(Task::Lt)).unwrap();
    assert_eq!(&obs[obs.len() - 3..], &[1.0, 0.0, 0.0]);
    assert_eq!(obs.len(), env.config.layout().dim());
}

#[test]
fn sv_initial_speeds_in_range() {
    let mut env = Env::new(EnvConfig::default()).unwrap();
    for seed in 0..1000 {
        env.reset(seed, None).unwrap();
        assert_eq!(env.svs.len(), 10);
        assert!(env.svs.iter().all(|s| (6.0..=10.0).contains(&s.state.v)));
    }
}

#[test]
fn tracking_driver_reaches_goal_without_traffic() {
    let mut env = Env::new(EnvConfig {
        n_sv: 0,
        n_obs_sv: 3,
        ..EnvConfig::default()
    })
    .unwrap();
    for task in Task::ALL {
        for seed in 0..10 {
            let (o, _) = run(&mut env, seed, Some(task));
            assert_eq!(o, Outcome::Success, "{task:?} seed {seed}");
        }
    }
}

#[test]
fn step_after_termination_is_rejected() {
    let mut env = Env::new(desk()).unwrap();
    run(&mut env, 5, None);
    assert!(env.step(ControlCommand::default()).is_err());
}

#[test]
fn idling_ego_is_frozen_at_horizon() {
    let mut env = Env::new(EnvConfig {
        n_sv: 0,
        ..desk()
    })
    .unwrap();
    env.reset(2, Some(Task::Gs)).unwrap();
    let mut last = None;
    for k in 0..200 {
        let a = if env.ego.v > 0.0 { -5.0 } else { 0.0 };
        let out = env.step(ControlCommand::new(a, 0.0)).unwrap();
        assert_eq!(out.truncated, k == 199);
        last = Some(out);
    }
    let last = last.unwrap();
    assert_eq!(last.outcome(), Some(Outcome::Frozen));
    assert!(env.is_done());
}

#[test]
fn sv_blocks_sorted_and_zero_padded() {
    let mut env = Env::new(EnvConfig {
        n_sv: 4,
        n_obs_sv: 6,
        ..EnvConfig::default()
    })
    .unwrap();
    let obs = env.reset(9, None).unwrap();
    let block = |k: usize| &obs[EGO_DIM + k * SV_DIM..EGO_DIM + (k + 1) * SV_DIM];
    let mut prev = 0.0;
    for k in 0..4 {
        let b = block(k);
        assert_eq!(b[0], 1.0);
        let d = b[1].hypot(b[2]);
        assert!(d >= prev);
        prev = d;
    }
    assert!(block(4).iter().chain(block(5)).all(|&v| v == 0.0));
}

#[test]
fn sv_speeds_stay_bounded() {
    let mut env = Env::new(EnvConfig::default()).unwrap();
    for seed in 0..200 {
        env.reset(seed, None).unwrap();
        for _ in 0..60 {
            let out = env.step(ControlCommand::new(-5.0, 0.0)).unwrap();
            assert!(env.svs.iter().all(|s| (0.0..=12.0).contains(&s.state.v)));
            if out.terminated || out.truncated {
                break;
            }
        }
    }
}

#[test]
fn left_turner_yields_to_oncoming_straight() {
    let env = Env::new(EnvConfig::default()).unwrap();
    let map = &env.map;
    let lt = map.routes_for(0, Task::Lt, 0)[0];
    let gs = map.routes_for(2, Task::Gs, 0)[0];
    let (rl, rg) = (&map.routes[lt], &map.routes[gs]);
    let pl = rl.entry_end_s - 4.0;
    let pg = rg.entry_end_s - 6.0;
    let wl = rl.sample(pl);
    let wg = rg.sample(pg);
    let a = Agent {
        id: 1,
        state: VehicleState::new(wl.x, wl.y, 7.0, wl.phi),
        route: rl,
        s: pl,
    };
    let b = Agent {
        id: 2,
        state: VehicleState::new(wg.x, wg.y, 7.0, wg.phi),
        route: rg,
        s: pg,
    };
    let p = IdmParams::default();
    let all = [a.clone(), b.clone()];
    assert!(yield_decision(&a, &all, &p));
    assert!(!yield_decision(&b, &all, &p));
}
