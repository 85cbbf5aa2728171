use usdc_core::arbitration::{select, vote_fraction, Choice};
use usdc_core::distrl::Agent;
use usdc_core::dynamics::ControlCommand;
use usdc_core::env::Env;
use usdc_core::nn::EncoderKind;
use usdc_core::oracle::{check_agent_config, check_env_config};
use usdc_core::pipeline::{Counters, DecisionLoop, Variant};
use usdc_core::safety::SafetyConfig;

fn drive(variant: Variant, steps: usize) -> (Counters, Vec<usdc_core::pipeline::Decision>) {
    let mut env = Env::new(check_env_config()).unwrap();
    let mut cfg = check_agent_config(EncoderKind::Attention);
    cfg.ensemble_size = 3;
    variant.adjust(&mut cfg);
    let mut agent = Agent::new(cfg, env.config.layout(), 5, 10).unwrap();
    let mut dl = DecisionLoop::new(variant, SafetyConfig::default(), &env, 1000);
    let mut obs = env.reset(17, None).unwrap();
    dl.attach(&env);
    let mut out = Vec::new();
    for _ in 0..steps {
        let d = dl.decide(&mut agent, &env, &obs, false).unwrap();
        let r = env.step(d.u).unwrap();
        out.push(d);
        if r.terminated || r.truncated {
            obs = env.reset(out.len() as u64, None).unwrap();
            dl.attach(&env);
        } else {
            obs = r.observation;
        }
    }
    (dl.counters, out)
}

#[test]
fn no_cbf_never_filters() {
    let (c, ds) = drive(Variant::NoCbf, 30);
    assert_eq!(c.decisions, 30);
    assert_eq!(c.filter, 0);
    assert_eq!(c.arbitration, 0);
    assert_eq!(c.uncertainty, 30);
    assert!(ds.iter().all(|d| d.u == d.u_rl && d.chosen == Choice::Rl));
}

#[test]
fn dir_cbf_always_executes_the_filter_output() {
    let (c, ds) = drive(Variant::DirCbf, 30);
    assert_eq!(c.filter, 30);
    assert_eq!(c.arbitration, 0);
    for d in ds {
        assert_eq!(d.chosen, Choice::Cbf);
        assert_eq!(d.u, d.filter.as_ref().unwrap().u);
    }
}

#[test]
fn usdc_arbitrates_every_filtered_step() {
    let (c, ds) = drive(Variant::Usdc, 30);
    assert_eq!(c.filter, 30);
    assert_eq!(c.arbitration, 30);
    for d in ds {
        let rec = d.arbitration.unwrap();
        let expect = if rec.vote_fraction > rec.percentile { d.u_rl } else { rec.u_cbf };
        assert_eq!(d.u, expect);
    }
}

#[test]
fn single_critic_variants_skip_uncertainty() {
    for v in [Variant::Dsac, Variant::PureDsac] {
        let (c, ds) = drive(v, 10);
        assert_eq!(c.uncertainty, 0);
        assert_eq!(c.filter, 0);
        assert!(ds.iter().all(|d| d.uncertainty.is_none()));
    }
}

#[test]
fn vote_counts_members_preferring_the_policy() {
    assert_eq!(vote_fraction(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 0.0]]), 0.5);
    assert_eq!(vote_fraction(&[]), 0.0);
}

#[test]
fn selection_threshold_is_strict() {
    let u_rl = ControlCommand::new(1.0, 0.0);
    let u_cbf = ControlCommand::new(-1.0, 0.0);
    let hi = [1.0, 1.0];
    let lo = [0.0, 0.0];
    let w = [0.5, 0.5];
    // Two of four members prefer the policy command.
    let rl: [&[f64]; 4] = [&hi, &hi, &lo, &lo];
    let cbf: [&[f64]; 4] = [&lo, &lo, &hi, &hi];
    let (u, rec) = select(u_rl, u_cbf, &rl, &cbf, &w, 0.5);
    assert_eq!(rec.vote_fraction, 0.5);
    assert_eq!(u, u_cbf);
    let (u, _) = select(u_rl, u_cbf, &rl, &cbf, &w, 0.49);
    assert_eq!(u, u_rl);
}

#[test]
fn dir_cbf_uses_the_same_tightened_filter_as_usdc() {
    let (_, usdc) = drive(Variant::Usdc, 1);
    let (_, dir) = drive(Variant::DirCbf, 1);
    let (a, b) = (usdc[0].filter.as_ref().unwrap(), dir[0].filter.as_ref().unwrap());
    assert!(usdc[0].uncertainty.unwrap().u_ju > 0.0);
    assert_eq!(a.u, b.u);
    assert_eq!(a.status, b.status);
}
