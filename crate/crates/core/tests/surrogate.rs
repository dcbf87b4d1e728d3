use std::sync::OnceLock;

use cftraj::gridworld::BOTTOM_RIGHT;
use cftraj::pipeline::{Pipeline, PipelineConfig};
use cftraj::policy::Policy;
use cftraj::selection::Condition;
use cftraj::surrogate::{clone_policy, compare_explanation_sets, compare_on, explanation_sets, visible_counts, SurrogateReport};

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| Pipeline::build(&PipelineConfig::default()).unwrap())
}

#[test]
fn identical_sets_give_identical_metrics_and_null_p_values() {
    let p = pipeline();
    let seeds = [3u64, 4, 5, 6];
    let sets: Vec<_> = seeds
        .iter()
        .map(|s| {
            let cf = explanation_sets(p, *s).unwrap().into_iter().find(|(c, _)| *c == Condition::CounterfactualStates).unwrap().1;
            Condition::ALL.iter().map(|c| (*c, cf.clone())).collect::<Vec<_>>()
        })
        .collect();
    let r = compare_explanation_sets(p, &seeds, &sets).unwrap();
    let cf = r.condition(Condition::CounterfactualStates).unwrap();
    for c in [Condition::RandomStates, Condition::CriticalStates] {
        assert_eq!(r.condition(c).unwrap().per_seed, cf.per_seed);
        for m in ["agreement", "nll", "prediction_accuracy"] {
            assert_eq!(r.p_value(m, c), Some(0.5), "{m} vs {c}");
        }
    }
}

#[test]
fn report_round_trips() {
    let r = compare_on(pipeline(), &[1, 2]).unwrap();
    let back: SurrogateReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_json(), r.to_json());
    assert_eq!(r.tests.len(), 6);
    assert!(r.tests.iter().all(|t| t.p_value > 0.0 && t.p_value <= 1.0));
}

#[test]
fn baseline_cloners_are_uniform_on_unseen_far_room_states() {
    let p = pipeline();
    let far = p.train_env.spec.room(BOTTOM_RIGHT).unwrap();
    let alpha = p.config.cloner.alpha;
    let mut unseen = 0;
    for seed in 0..5 {
        for (c, set) in explanation_sets(p, seed).unwrap() {
            if c == Condition::CounterfactualStates {
                continue;
            }
            let seen = visible_counts(&set);
            if c == Condition::CriticalStates {
                assert!(seen.keys().all(|s| !far.contains(s.cell())), "seed {seed}");
            }
            let cloner = clone_policy(&set, &p.train_env.spec, alpha).unwrap();
            for s in p.train_env.spec.all_states().into_iter().filter(|s| far.contains(s.cell()) && !seen.contains_key(s)) {
                unseen += 1;
                for q in cloner.action_distribution(&s).unwrap() {
                    assert!((q - 1.0 / 3.0).abs() < 1e-12, "{c} at {s}");
                }
            }
        }
    }
    assert!(unseen > 0);
}

/// The hypothesis run at full scale. The behavioral policy is uniform in the
/// far room (tabular training never reaches it), so the uniform prior of the
/// baseline cloners is already optimal there and this does not hold; kept
/// for reference runs.
#[test]
#[ignore = "the far-room behavioral policy is uniform; see the surrogate chapter of the guide"]
fn counterfactual_nll_lower_on_most_seeds() {
    let p = pipeline();
    let seeds: Vec<u64> = (0..20).collect();
    let r = compare_on(p, &seeds).unwrap();
    let cf = &r.condition(Condition::CounterfactualStates).unwrap().per_seed;
    let rnd = &r.condition(Condition::RandomStates).unwrap().per_seed;
    let wins = cf.iter().zip(rnd).filter(|(a, b)| a.nll < b.nll).count();
    assert!(wins >= 18, "{wins}/20");
}
