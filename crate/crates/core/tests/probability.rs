//! Exhaustive-enumeration and Monte-Carlo checks of trajectory
//! probabilities and the start-state reduction.

use cftraj::divergence::{kl, mc_trajectory_kl, trajectory_log_ratio, Categorical};
use cftraj::gridworld::{Action, AgentState, Cell, EnvConfig, GridSpec, StartDistribution};
use cftraj::policy::{Policy, TabularPolicy};
use cftraj::rng::seeded;
use cftraj::trajectory::{rollout, trajectory_log_prob, Outcome, Segment, SegmentTag, Step, Trajectory, TrajectoryMeta};
use rand::Rng;

fn random_policy(spec: &GridSpec, seed: u64) -> TabularPolicy {
    let mut rng = seeded(seed);
    let mut p = TabularPolicy::uniform(spec);
    for s in spec.all_states() {
        let z = p.logits_at_mut(&s).unwrap();
        for v in z.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    p
}

fn random_start(states: &[AgentState], seed: u64) -> StartDistribution {
    let mut rng = seeded(seed);
    let w: Vec<f64> = states.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    StartDistribution::new(states.iter().copied().zip(w.iter().map(|x| x / total)).collect()).unwrap()
}

fn make(steps: Vec<Step>, final_state: AgentState, spec: &GridSpec) -> Trajectory {
    let n = steps.len();
    Trajectory {
        meta: TrajectoryMeta::default(),
        steps,
        final_state,
        segments: vec![Segment { tag: SegmentTag::Behavior, start: 0, end: n }],
        outcome: if final_state.cell() == spec.goal() { Outcome::Success } else { Outcome::Timeout },
    }
}

/// Every trajectory of at most `horizon` steps that a rollout can produce:
/// those that hit the goal early end there, the rest run the full horizon.
fn enumerate(env: &EnvConfig, start: AgentState) -> Vec<Trajectory> {
    let spec = &env.spec;
    let mut out = Vec::new();
    let mut stack = vec![(start, Vec::<Step>::new())];
    while let Some((s, steps)) = stack.pop() {
        if s.cell() == spec.goal() || steps.len() == env.horizon {
            out.push(make(steps, s, spec));
            continue;
        }
        for a in Action::ALL {
            let (next, reward, _) = env.step(&s, a);
            let mut st = steps.clone();
            st.push(Step { state: s, action: a, reward });
            stack.push((next, st));
        }
    }
    out
}

#[test]
fn enumerated_probabilities_sum_to_one() {
    // (width, height, goal): 8, 12 and 16 states
    for (w, h, goal) in [(4, 3, Cell::new(2, 1)), (5, 3, Cell::new(3, 1)), (4, 4, Cell::new(2, 2))] {
        let spec = GridSpec::open(w, h, goal).unwrap();
        let states = spec.all_states();
        assert!(states.len() <= 20);
        for horizon in 1..=4 {
            let start = random_start(&states, (w * 10 + horizon) as u64);
            let env = EnvConfig::with_start(spec.clone(), "enum", start.clone()).unwrap().with_horizon(horizon);
            let policy = random_policy(&spec, horizon as u64);
            let mut total = 0.0;
            for s0 in start.support() {
                for t in enumerate(&env, *s0) {
                    total += trajectory_log_prob(&t, &policy, &start, &spec).unwrap().value.exp();
                }
            }
            assert!((total - 1.0).abs() <= 1e-9, "{w}x{h} horizon {horizon}: {total}");
        }
    }
}

#[test]
fn kl_is_non_negative_on_random_pairs() {
    let mut rng = seeded(2024);
    for _ in 0..10_000 {
        let k = rng.random_range(1..12);
        let mut draw = |zero_ok: bool| {
            let v: Vec<f64> = (0..k).map(|_| if zero_ok && rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.001..1.0) }).collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                let mut u = vec![0.0; k];
                u[0] = 1.0;
                return u;
            }
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = draw(true);
        let q = draw(false);
        let support: Vec<usize> = (0..k).collect();
        let (Ok(pc), Ok(qc)) = (Categorical::new(support.clone(), p), Categorical::new(support, q)) else {
            continue;
        };
        let v = kl(&pc, &qc).unwrap();
        assert!(v >= 0.0, "{v}");
    }
}

#[test]
fn log_ratio_equals_start_ratio_for_1000_trajectories() {
    let spec = cftraj::gridworld::default_four_rooms();
    let env = EnvConfig::new(spec.clone(), "bottom-right").unwrap();
    let policy = random_policy(&spec, 9);
    let all = spec.all_states();
    let p = random_start(&all, 1);
    let q = random_start(&all, 2);
    let mut rng = seeded(5);
    for _ in 0..1000 {
        let s0 = p.sample(&mut rng);
        let t = rollout(&policy, "r", &env, s0, &mut rng).unwrap();
        let r = trajectory_log_ratio(&t, &p, &q, &policy, &spec).unwrap();
        let expect = (p.prob(&s0) / q.prob(&s0)).ln();
        assert!((r - expect).abs() <= 1e-9);
    }
}

/// 3x3 open interior, horizon 3: exact trajectory KL by enumeration agrees
/// with the start-state KL, and the Monte-Carlo estimate lands within three
/// standard errors.
#[test]
fn monte_carlo_matches_enumeration_on_small_grid() {
    let spec = GridSpec::open(5, 5, Cell::new(3, 3)).unwrap();
    let states: Vec<AgentState> = spec.all_states().into_iter().filter(|s| s.cell() != spec.goal()).collect();
    let test_start = random_start(&states[..10], 11);
    let expl_start = random_start(&states, 12);
    let env = EnvConfig::with_start(spec.clone(), "small", test_start.clone()).unwrap().with_horizon(3);
    let policy = random_policy(&spec, 13);

    let mut exact_traj = 0.0;
    for s0 in test_start.support() {
        for t in enumerate(&env, *s0) {
            let lp = trajectory_log_prob(&t, &policy, &test_start, &spec).unwrap().value;
            let lq = trajectory_log_prob(&t, &policy, &expl_start, &spec).unwrap().value;
            exact_traj += lp.exp() * (lp - lq);
        }
    }
    let support = expl_start.support().to_vec();
    let padded: Vec<f64> = support.iter().map(|s| test_start.prob(s)).collect();
    let exact_start = kl(&Categorical::new(support.clone(), padded).unwrap(), &Categorical::from(&expl_start)).unwrap();
    assert!((exact_traj - exact_start).abs() < 1e-9);

    let sample = |seed: u64, n: usize| {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let s0 = test_start.sample(&mut rng);
                rollout(&policy, "r", &env, s0, &mut rng).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let r = mc_trajectory_kl(&sample(1, 2000), &test_start, &expl_start, &policy, &spec).unwrap();
    let se = r.standard_error.unwrap();
    assert!((r.value - exact_start).abs() <= 3.0 * se, "{} vs {exact_start} (se {se})", r.value);

    // unbiasedness: the mean of 50 resamples is within 3 sigma of the truth
    let means: Vec<f64> =
        (0..50).map(|i| mc_trajectory_kl(&sample(100 + i, 200), &test_start, &expl_start, &policy, &spec).unwrap().value).collect();
    let m = means.iter().sum::<f64>() / 50.0;
    let sd = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 49.0).sqrt();
    assert!((m - exact_start).abs() <= 3.0 * sd / 50f64.sqrt(), "{m} vs {exact_start}");
}

#[test]
fn point_mass_against_uniform_sixteen() {
    let spec = GridSpec::open(6, 6, Cell::new(4, 4)).unwrap();
    let cells: Vec<AgentState> = spec.all_states().into_iter().filter(|s| s.dir == cftraj::gridworld::Dir::N).collect();
    assert_eq!(cells.len(), 16);
    let star = cells[0];
    let point = StartDistribution::point(star);
    let uniform = StartDistribution::uniform(cells.clone()).unwrap();
    let env = EnvConfig::with_start(spec.clone(), "pm", point.clone()).unwrap();
    let policy = TabularPolicy::uniform(&spec);
    let mut rng = seeded(3);
    let trajs: Vec<_> = (0..500).map(|_| rollout(&policy, "u", &env, star, &mut rng).unwrap()).collect();
    let r = mc_trajectory_kl(&trajs, &point, &uniform, &policy, &spec).unwrap();
    let se = r.standard_error.unwrap();
    assert!((r.value - 16f64.ln()).abs() <= 3.0 * se.max(1e-12));
    let same = mc_trajectory_kl(&trajs, &point, &point, &policy, &spec).unwrap();
    assert_eq!(same.value, 0.0);
}

#[test]
fn action_distributions_are_normalized() {
    let spec = cftraj::gridworld::default_four_rooms();
    let p = random_policy(&spec, 77);
    for s in spec.all_states() {
        let d = p.action_distribution(&s).unwrap();
        assert!(d.iter().all(|x| *x > 0.0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
