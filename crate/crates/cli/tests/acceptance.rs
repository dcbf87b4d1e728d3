//! Acceptance run: one PASS/FAIL line per primary criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are expected to fail under the
//! tabular design; the target succeeds when exactly those fail.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use cftraj::divergence::{coverage_kl, kl, mc_trajectory_kl, trajectory_log_ratio, Categorical, DEFAULT_EPSILON};
use cftraj::gridworld::{default_four_rooms, Action, AgentState, Cell, Dir, EnvConfig, GridSpec, StartDistribution, TOP_LEFT};
use cftraj::pipeline::{Pipeline, PipelineConfig};
use cftraj::policy::{PolicyFile, PolicyMeta, TabularPolicy};
use cftraj::rng::{self, seeded};
use cftraj::selection::Condition;
use cftraj::study::{
    build_task1_session, build_task2_session, label_from_frequency, score, success_frequency, ttest_onesided, Question, Response,
    ResponseLog, StudyContext, LABEL_ROLLOUTS,
};
use cftraj::surrogate::compare_on;
use cftraj::training::{train_a2c, TrainConfig};
use cftraj::trajectory::{rollout, trajectory_log_prob, Outcome, Segment, SegmentTag, Step, Trajectory, TrajectoryMeta};
use rand::Rng;
use serde_json::{json, Value};

const KNOWN_FAILURES: &[u32] = &[4];

type Outcome_ = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome_);

fn check(ok: bool, detail: String) -> Outcome_ {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [Criterion; 7] = [
        (1, "training", training),
        (2, "oracle coverage", coverage),
        (3, "reduction identity", reduction),
        (4, "surrogate hypothesis", surrogate),
        (5, "study integrity", study),
        (6, "probability soundness", probability),
        (7, "determinism and durability", durability),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS criterion {n} ({name}): {d} [{secs:.1}s]"),
            Err(d) => {
                let known = if KNOWN_FAILURES.contains(&n) { " (known)" } else { "" };
                println!("FAIL criterion {n} ({name}){known}: {d} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if failed != KNOWN_FAILURES {
        println!("unexpected result set: failed {failed:?}, known {KNOWN_FAILURES:?}");
        std::process::exit(1);
    }
}

fn training() -> Outcome_ {
    let p = PipelineConfig::default();
    let env = cftraj::pipeline::environments(&p).unwrap().0;
    let cfg = TrainConfig::default();
    let t = Instant::now();
    let a = train_a2c(&env, &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let b = train_a2c(&env, &cfg).unwrap();
    let rate = a.log.final_success_rate.unwrap_or(0.0);
    let bits = |p: &TabularPolicy| p.logits().iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same = bits(&a.policy) == bits(&b.policy);
    check(
        rate >= 0.9 && a.log.episodes_run <= 20_000 && secs < 60.0 && same,
        format!("success {rate:.3} after {} episodes in {secs:.2}s, rerun identical: {same}", a.log.episodes_run),
    )
}

fn coverage() -> Outcome_ {
    let p = Pipeline::build(&PipelineConfig::default()).unwrap();
    let support = p.oracle.support().to_vec();
    let kl = |c| coverage_kl(&p.displayed_starts(c, 5000, 11).unwrap(), &support, DEFAULT_EPSILON).unwrap().value;
    let cf = kl(Condition::CounterfactualStates);
    let random = kl(Condition::RandomStates);
    let critical = kl(Condition::CriticalStates);
    check(
        cf <= 0.05 && random >= 10.0 * cf && critical >= 10.0 * cf,
        format!("counterfactual {cf:.4} nats (<= 0.05); random {random:.3}, critical {critical:.3} (>= 10x)"),
    )
}

fn random_policy(spec: &GridSpec, seed: u64) -> TabularPolicy {
    let mut rng = seeded(seed);
    let mut p = TabularPolicy::uniform(spec);
    for s in spec.all_states() {
        for v in p.logits_at_mut(&s).unwrap().iter_mut() {
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

/// Every trajectory a rollout from `start` can produce.
fn enumerate(env: &EnvConfig, start: AgentState) -> Vec<Trajectory> {
    let spec = &env.spec;
    let mut out = Vec::new();
    let mut stack = vec![(start, Vec::<Step>::new())];
    while let Some((s, steps)) = stack.pop() {
        if s.cell() == spec.goal() || steps.len() == env.horizon {
            let n = steps.len();
            out.push(Trajectory {
                meta: TrajectoryMeta::default(),
                steps,
                final_state: s,
                segments: vec![Segment { tag: SegmentTag::Behavior, start: 0, end: n }],
                outcome: if s.cell() == spec.goal() { Outcome::Success } else { Outcome::Timeout },
            });
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

fn reduction() -> Outcome_ {
    // per-trajectory identity on the default layout
    let spec = default_four_rooms();
    let env = EnvConfig::new(spec.clone(), "bottom-right").unwrap();
    let policy = random_policy(&spec, 9);
    let all = spec.all_states();
    let (p, q) = (random_start(&all, 1), random_start(&all, 2));
    let mut rng = seeded(5);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let s0 = p.sample(&mut rng);
        let t = rollout(&policy, "r", &env, s0, &mut rng).unwrap();
        let r = trajectory_log_ratio(&t, &p, &q, &policy, &spec).unwrap();
        worst = worst.max((r - (p.prob(&s0) / q.prob(&s0)).ln()).abs());
    }

    // 3x3 interior, horizon 3: Monte-Carlo against the exact start-state KL
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
    let exact = kl(&Categorical::new(support, padded).unwrap(), &Categorical::from(&expl_start)).unwrap();
    let mut rng = seeded(1);
    let trajs: Vec<_> = (0..2000)
        .map(|_| {
            let s0 = test_start.sample(&mut rng);
            rollout(&policy, "r", &env, s0, &mut rng).unwrap()
        })
        .collect();
    let mc = mc_trajectory_kl(&trajs, &test_start, &expl_start, &policy, &spec).unwrap();
    let se = mc.standard_error.unwrap();

    // point mass against uniform over 16 states
    let spec = GridSpec::open(6, 6, Cell::new(4, 4)).unwrap();
    let cells: Vec<AgentState> = spec.all_states().into_iter().filter(|s| s.dir == Dir::N).collect();
    let point = StartDistribution::point(cells[0]);
    let uniform = StartDistribution::uniform(cells.clone()).unwrap();
    let env = EnvConfig::with_start(spec.clone(), "pm", point.clone()).unwrap();
    let up = TabularPolicy::uniform(&spec);
    let mut rng = seeded(3);
    let pm: Vec<_> = (0..500).map(|_| rollout(&up, "u", &env, cells[0], &mut rng).unwrap()).collect();
    let r16 = mc_trajectory_kl(&pm, &point, &uniform, &up, &spec).unwrap();
    let se16 = r16.standard_error.unwrap();

    check(
        cells.len() == 16
            && worst <= 1e-9
            && (exact_traj - exact).abs() <= 1e-9
            && (mc.value - exact).abs() <= 3.0 * se
            && (r16.value - 16f64.ln()).abs() <= 3.0 * se16.max(1e-12),
        format!(
            "max |log-ratio gap| {worst:.1e} over 1000; 3x3 mc {:.4} vs exact {exact:.4} (3se {:.4}); point mass {:.6} vs ln 16 {:.6}",
            mc.value,
            3.0 * se,
            r16.value,
            16f64.ln()
        ),
    )
}

fn surrogate() -> Outcome_ {
    // the Welch test itself, against a scipy reference
    let fixture = ttest_onesided(&[2.1, 2.5, 2.3, 2.0], &[1.1, 1.4, 1.2, 1.3]).unwrap();
    if (fixture - 0.0003666745545255339).abs() >= 1e-6 {
        return Err(format!("welch fixture off: {fixture}"));
    }
    let p = Pipeline::build(&PipelineConfig::default()).unwrap();
    let seeds: Vec<u64> = (0..20).collect();
    let r = compare_on(&p, &seeds).unwrap();
    let mean = |c| r.condition(c).unwrap().mean_agreement;
    let (cf, ra, cr) = (mean(Condition::CounterfactualStates), mean(Condition::RandomStates), mean(Condition::CriticalStates));
    let pr = r.p_value("agreement", Condition::RandomStates).unwrap();
    let pc = r.p_value("agreement", Condition::CriticalStates).unwrap();
    check(
        cf > ra && cf > cr && pr < 0.05 && pc < 0.05,
        format!("agreement counterfactual {cf:.4}, random {ra:.4} (p {pr:.3}), critical {cr:.4} (p {pc:.3}) over 20 seeds"),
    )
}

fn study() -> Outcome_ {
    let p = Pipeline::build(&PipelineConfig::default()).unwrap();
    let ctx = StudyContext {
        policy: &p.policy,
        policy_id: &p.policy_id,
        policy_label: TOP_LEFT,
        train_env: &p.train_env,
        test_env: &p.test_env,
        oracle: &p.oracle,
        dataset_episodes: 100,
        explanations: 10,
        questions: 10,
    };
    let replay = |key: &[usize], id: &str| {
        let mut log = ResponseLog::new(id, "replay");
        log.responses = key.iter().enumerate().map(|(question, c)| Response { question, choice: *c, timestamp_ms: None }).collect();
        log
    };
    let builds = 3000u64;
    let mut positions = [0usize; 3];
    for seed in 0..builds {
        let s = build_task1_session(&ctx, Condition::CounterfactualStates, seed).unwrap();
        for (q, key) in s.questions.iter().zip(&s.answer_key) {
            let Question::BehaviorUnderstanding { context, choices } = q else { return Err("task 1 question of the wrong kind".into()) };
            if choices.iter().filter(|t| t.meta.policy_id == p.policy_id).count() != 1 || choices[*key].meta.policy_id != p.policy_id {
                return Err(format!("seed {seed}: not exactly one policy continuation"));
            }
            for ch in choices {
                if ch.start_state() != context.final_state || ch.validate(&p.test_env.spec).is_err() {
                    return Err(format!("seed {seed}: continuation not dynamics-consistent"));
                }
            }
        }
        positions[s.answer_key[0]] += 1;
        if score(&s, &replay(&s.answer_key, &s.session_id)).unwrap().accuracy != 1.0 {
            return Err(format!("seed {seed}: answer-key replay below 1.0"));
        }
    }
    let n = builds as f64;
    let sd = (n / 3.0 * 2.0 / 3.0).sqrt();
    let worst = positions.iter().map(|k| (*k as f64 - n / 3.0).abs() / sd).fold(0.0, f64::max);

    let mut labels = 0;
    for seed in 0..30 {
        let s = build_task2_session(&ctx, Condition::RandomStates, seed).unwrap();
        for (qi, (q, key)) in s.questions.iter().zip(&s.answer_key).enumerate() {
            let Question::PerformanceEvaluation { context, choices, .. } = q else {
                return Err("task 2 question of the wrong kind".into());
            };
            for relabel in 0..10u64 {
                let mut r = rng::stream(0xfeed ^ seed, 100 * qi as u64 + relabel);
                let f = success_frequency(&p.policy, &p.test_env, *context, LABEL_ROLLOUTS, &mut r).unwrap();
                if label_from_frequency(f) != choices[*key] {
                    return Err(format!("task 2 seed {seed} question {qi}: label flips on relabel {relabel}"));
                }
                labels += 1;
            }
        }
        if score(&s, &replay(&s.answer_key, &s.session_id)).unwrap().accuracy != 1.0 {
            return Err(format!("task 2 seed {seed}: answer-key replay below 1.0"));
        }
    }
    check(
        worst <= 3.0,
        format!("{builds} task 1 builds, answer positions {positions:?} (max {worst:.2} sd); {labels} task 2 relabels stable; replays score 1.0"),
    )
}

fn probability() -> Outcome_ {
    let mut worst_sum = 0f64;
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
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }

    let mut rng = seeded(2024);
    let (mut pairs, mut min_kl) = (0, f64::INFINITY);
    while pairs < 10_000 {
        let k = rng.random_range(1..12);
        let mut draw = |zero_ok: bool| -> Vec<f64> {
            let v: Vec<f64> = (0..k).map(|_| if zero_ok && rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.001..1.0) }).collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                return (0..k).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            }
            v.iter().map(|x| x / s).collect()
        };
        let (p, q) = (draw(true), draw(false));
        let support: Vec<usize> = (0..k).collect();
        let (Ok(pc), Ok(qc)) = (Categorical::new(support.clone(), p), Categorical::new(support, q)) else { continue };
        min_kl = min_kl.min(kl(&pc, &qc).unwrap());
        pairs += 1;
    }

    let env = cftraj::pipeline::environments(&PipelineConfig::default()).unwrap().0;
    let mut states = 0;
    let mut bounds_ok = true;
    for seed in 0..3 {
        let out = train_a2c(&env, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        for s in env.spec.all_states() {
            let h = out.policy.entropy(&s).unwrap();
            bounds_ok &= (0.0..=3f64.ln() + 1e-12).contains(&h);
            states += 1;
        }
    }
    check(
        worst_sum <= 1e-9 && min_kl >= 0.0 && bounds_ok,
        format!("max |sum - 1| {worst_sum:.1e}; min KL {min_kl:.2e} over {pairs} pairs; entropy in [0, ln 3] at {states} states"),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_cftraj");

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(data: &Path) -> Server {
        let mut child = Command::new(BIN)
            .args(["serve", "--addr", "127.0.0.1:0", "--data-dir"])
            .arg(data)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner `{line}`")).to_string();
        Server { child, addr }
    }

    fn call(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
        let mut s = TcpStream::connect(&self.addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nhost: {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = String::new();
        s.read_to_string(&mut raw).unwrap();
        let status: u16 = raw.split(' ').nth(1).unwrap().parse().unwrap();
        let payload = raw.split_once("\r\n\r\n").map(|x| x.1).unwrap_or("");
        (status, if payload.is_empty() { Value::Null } else { serde_json::from_str(payload).unwrap() })
    }

    /// SIGKILL: no graceful shutdown.
    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn contains_key(v: &Value, key: &str) -> bool {
    match v {
        Value::Object(m) => m.iter().any(|(k, x)| k == key || contains_key(x, key)),
        Value::Array(a) => a.iter().any(|x| contains_key(x, key)),
        _ => false,
    }
}

fn durability() -> Outcome_ {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // pipeline reruns
    std::fs::write(dir.join("run.toml"), "").unwrap();
    for out in ["a", "b"] {
        let st = Command::new(BIN).args(["pipeline", "--config", "run.toml", "--out", out, "-q"]).current_dir(dir).status().unwrap();
        if !st.success() {
            return Err(format!("pipeline run `{out}` failed"));
        }
    }
    let a = tree(&dir.join("a"));
    let identical = a == tree(&dir.join("b"));
    let mut leaked = false;
    for (name, bytes) in a.iter().filter(|(n, _)| n.starts_with("sessions/")) {
        let s: cftraj::study::StudySession = serde_json::from_slice(bytes).map_err(|e| format!("{name}: {e}"))?;
        leaked |= contains_key(&serde_json::to_value(s.participant_payload()).unwrap(), "answer_key");
    }

    // service kill and restart between acknowledged posts
    let data = dir.join("data");
    let p = Pipeline::build(&PipelineConfig::default()).unwrap();
    let meta = PolicyMeta { seed: Some(0), training_config: None, train_env: Some(p.train_env.id.clone()) };
    std::fs::create_dir_all(data.join("policies")).unwrap();
    std::fs::write(data.join("policies/behavior.json"), PolicyFile::new(&p.policy, &p.train_env.spec, meta).to_json()).unwrap();

    let mut server = Server::start(&data);
    let mut sessions = Vec::new();
    for (task, condition) in [(1, "counterfactual"), (2, "random")] {
        let body = json!({ "task": task, "condition": condition, "seed": 3, "env_id": p.test_env.id, "policy_id": p.policy_id });
        let (code, payload) = server.call("POST", "/v1/sessions", Some(&body));
        if code != 201 {
            return Err(format!("session create returned {code}: {payload}"));
        }
        leaked |= contains_key(&payload, "answer_key");
        let id = payload["session_id"].as_str().unwrap().to_string();
        let (_, fetched) = server.call("GET", &format!("/v1/sessions/{id}"), None);
        leaked |= contains_key(&fetched, "answer_key");
        let stored: cftraj::study::StudySession =
            serde_json::from_str(&std::fs::read_to_string(data.join(format!("sessions/{id}.json"))).unwrap()).unwrap();
        sessions.push((id, stored.answer_key));
    }
    let mut acked = 0;
    for (id, key) in &sessions {
        for (q, choice) in key.iter().enumerate() {
            for participant in ["p1", "p2"] {
                let body = json!({ "participant_id": participant, "responses": [{ "question": q, "choice": choice }] });
                let (code, ack) = server.call("POST", &format!("/v1/sessions/{id}/responses"), Some(&body));
                if code != 200 || ack["stored"] != json!(q + 1) {
                    return Err(format!("post {id} q{q} {participant}: {code} {ack}"));
                }
                acked += 1;
            }
            // restart after every third question
            if q % 3 == 2 {
                server.kill();
                server = Server::start(&data);
            }
        }
    }
    server.kill();
    let server = Server::start(&data);
    let mut complete = 0;
    for (id, key) in &sessions {
        let (code, report) = server.call("GET", &format!("/v1/sessions/{id}/score"), None);
        if code != 200 {
            return Err(format!("score {id}: {code} {report}"));
        }
        for part in report["participants"].as_array().unwrap() {
            if part["answered"] == json!(key.len()) && part["accuracy"] == json!(1.0) {
                complete += 1;
            }
        }
    }
    drop(server);
    check(
        identical && complete == 4 && !leaked,
        format!(
            "pipeline rerun identical over {} files: {identical}; {acked} acknowledged posts across restarts, {complete}/4 participant logs complete; answer key leaked: {leaked}",
            a.len()
        ),
    )
}
