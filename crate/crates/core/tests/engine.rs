mod common;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use preftree::client::{ChatMessage, ClientError, ModelClient, ScriptedBackend};
use preftree::engine::{render_observation, sample_schema, Draft, Engine, EngineError, EngineSettings, VerdictDetail};
use preftree::sampling::{ElicitFailure, LadderBudget};
use preftree::sandbox::{ExecResponse, StubSandbox};
use preftree::testkit::{echo_critic, MockActor, MockStyle, ToySandbox};
use preftree::tree::{
    save_trees, validate_tree, ContextTurn, Critique, GroundTruth, Instruction, Observation, ReasoningSchema, Task,
    TestCase, TestCategory,
};

use common::{correct_at, engine, instruction, sampler, shape};

const COT: ReasoningSchema = ReasoningSchema::ChainOfThought;

fn coding(id: &str, cases: &[(&str, &str)]) -> Instruction {
    Instruction {
        id: id.into(),
        dataset: "CodeFeedback".into(),
        task: Task::Coding,
        tool_mode: true,
        prompt: format!("Task {id}: echo the input."),
        ground_truth: GroundTruth {
            solutions: vec!["print(input())".into()],
            test_cases: cases
                .iter()
                .map(|(i, o)| TestCase { input: i.to_string(), expected_output: o.to_string(), category: TestCategory::Given })
                .collect(),
            ..Default::default()
        },
        metadata: Default::default(),
    }
}

fn code_draft(code: &str) -> Draft {
    Draft::new(1, format!("Step 1: run it\n```python\n{code}\n```"), COT, "m")
}

// ---------------------------------------------------------------- tree shapes

#[test]
fn always_correct_gives_a_single_turn() {
    let e = engine(1);
    let s = sampler(vec![MockActor::always(true)], vec![MockActor::always(true)], MockActor::always(true));
    let out = e.build_tree(&instruction("p1", "5"), &s).unwrap();
    assert_eq!(out.tree.depth(), 1);
    assert_eq!(shape(&out.tree), vec![(1, 1, 0)]);
    assert_eq!(out.reports.len(), 1);
}

#[test]
fn late_success_gives_a_three_turn_chain() {
    let e = engine(1);
    let s = sampler(vec![correct_at(&[3])], vec![correct_at(&[3])], correct_at(&[3]));
    let out = e.build_tree(&instruction("p1", "5"), &s).unwrap();
    assert_eq!(shape(&out.tree), vec![(1, 0, 1), (2, 0, 1), (3, 1, 0)]);
    assert!(validate_tree(&out.tree).is_empty());
    // expanded incorrect nodes carry critiques
    for n in out.tree.nodes.values().filter(|n| !n.correct) {
        assert!(n.critique.is_some() && n.observation.is_some());
    }
}

#[test]
fn never_correct_stops_at_five() {
    let e = engine(1);
    let s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false));
    let out = e.build_tree(&instruction("p1", "5"), &s).unwrap();
    assert_eq!(out.tree.depth(), 5);
    assert_eq!(shape(&out.tree), (1..=5).map(|t| (t, 0, 1)).collect::<Vec<_>>());
    let last = out.tree.nodes.values().find(|n| n.turn == 5).unwrap();
    assert!(last.critique.is_none());
    assert!(out.reports.iter().all(|r| r.elicited && !r.correct_found));
}

#[test]
fn mixed_actors_give_a_full_binary_chain() {
    let e = engine(2);
    let s = sampler(vec![MockActor::with_probability(0.5)], vec![MockActor::with_probability(0.5)], MockActor::always(true));
    let out = e.build_tree(&instruction("p1", "5"), &s).unwrap();
    assert_eq!(shape(&out.tree), (1..=5).map(|t| (t, 1, 1)).collect::<Vec<_>>());
}

#[test]
fn max_depth_setting_is_respected() {
    let settings = EngineSettings { max_depth: 2, ..EngineSettings::default() };
    let e = Engine::new(Arc::new(preftree::testkit::fixed_critic("c")), Arc::new(ToySandbox), settings).unwrap();
    let s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false));
    assert_eq!(e.build_tree(&instruction("p1", "5"), &s).unwrap().tree.depth(), 2);
    let bad = EngineSettings { max_depth: 6, ..EngineSettings::default() };
    assert!(matches!(Engine::new(Arc::new(preftree::testkit::fixed_critic("c")), Arc::new(ToySandbox), bad), Err(EngineError::Config(_))));
}

#[test]
fn node_verdicts_survive_a_second_evaluation() {
    let e = engine(3);
    let s = sampler(vec![MockActor::with_probability(0.3)], vec![MockActor::with_probability(0.6)], MockActor::always(true));
    let inst = instruction("p9", "17");
    let out = e.build_tree(&inst, &s).unwrap();
    for node in out.tree.nodes.values() {
        let draft = Draft::new(node.turn, node.body.clone(), node.schema, &node.producer);
        assert_eq!(e.evaluate(&draft, &inst).unwrap().correct, node.correct, "{}", node.body);
    }
}

fn build_all(seed: u64, jobs: usize) -> Vec<u8> {
    let e = engine(seed);
    let s = sampler(vec![MockActor::with_probability(0.2), MockActor::with_probability(0.6)], vec![MockActor::with_probability(0.5), MockActor::always(false)], MockActor::with_probability(0.5));
    let insts: Vec<Instruction> = (0..12).map(|i| instruction(&format!("q{i}"), &format!("{}", i * 7))).collect();
    let trees: Vec<_> = e.build_batch(&insts, &s, jobs).into_iter().map(|r| r.unwrap().tree).collect();
    let mut buf = Vec::new();
    save_trees(&trees, &mut buf).unwrap();
    buf
}

#[test]
fn builds_are_byte_identical_at_a_fixed_seed() {
    let a = build_all(7, 1);
    assert_eq!(a, build_all(7, 1));
    assert_eq!(a, build_all(7, 4));
    assert_ne!(a, build_all(8, 1));
}

#[test]
fn a_failing_instruction_does_not_sink_the_batch() {
    let e = engine(1);
    let flaky = Arc::new(ModelClient::scripted("flaky", |req, _| {
        if req.messages.iter().any(|m| m.content.contains("Problem bad")) {
            Err(ClientError::Malformed("garbage".into()))
        } else {
            Ok(vec!["Step 1: sum.\nStep 2: The answer is 5".to_string(); req.n as usize])
        }
    }));
    let mut s = sampler(vec![MockActor::always(true)], vec![MockActor::always(false)], MockActor::always(true));
    s.tiers = preftree::sampling::ModelTierList::new(vec![flaky]).unwrap();
    let out = e.build_batch(&[instruction("ok", "5"), instruction("bad", "5")], &s, 2);
    assert!(out[0].is_ok());
    assert!(matches!(out[1], Err(EngineError::Client { .. })));
}

// ---------------------------------------------------------------- prompts

#[test]
fn history_is_replayed_verbatim() {
    let e = engine(0);
    let obs = Observation { exec_output: Some("41".into()), traceback: Some("Traceback: ValueError: bad".into()), binary_feedback: false, timed_out: false };
    let critique = Critique { text: "Step 2 forgets the carry.".into(), author: "critic".into() };
    let history = vec![ContextTurn { body: "Step 1: add\nThe answer is 41".into(), observation: Some(obs.clone()), critique: Some(critique.clone()) }];
    let inst = instruction("p1", "42");
    let msgs = e.actor_messages(&inst, &history, COT, None).unwrap();
    assert_eq!(msgs.len(), 4);
    assert_eq!(msgs[1].content, inst.prompt);
    assert_eq!(msgs[2], ChatMessage::assistant(history[0].body.clone()));
    assert!(msgs[3].content.contains(&render_observation(&obs)));
    assert!(msgs[3].content.contains("Traceback: ValueError: bad"));
    assert!(msgs[3].content.contains(&critique.text));
}

#[test]
fn modular_schema_uses_the_tool_template() {
    let e = engine(0);
    let inst = instruction("p1", "1");
    let modular = e.actor_messages(&inst, &[], ReasoningSchema::ModularProgramming, None).unwrap();
    let cot = e.actor_messages(&inst, &[], COT, None).unwrap();
    assert!(modular[0].content.contains("modular programming"));
    assert!(modular[0].content.contains("tool"));
    assert_ne!(modular[0].content, cot[0].content);
}

#[test]
fn run_action_records_turn_and_code() {
    let e = engine(0);
    let client = ModelClient::scripted("fixed", |_, _| Ok(vec!["Step 1: go\n```python\nprint(3)\n```".into()]));
    let history = vec![ContextTurn { body: "earlier".into(), observation: None, critique: None }];
    let d = e.run_action(&instruction("p1", "3"), &history, &client, COT).unwrap();
    assert_eq!(d.turn, 2);
    assert_eq!(d.code.iter().map(|c| c.trim()).collect::<Vec<_>>(), vec!["print(3)"]);
    let empty = ModelClient::scripted("empty", |_, _| Ok(vec!["  ".into()]));
    assert!(matches!(e.run_action(&instruction("p1", "3"), &[], &empty, COT), Err(EngineError::Client { source: ClientError::EmptyCompletion, .. })));
}

#[test]
fn critique_prompt_carries_the_reference() {
    let mut e = engine(0);
    e.critic = Arc::new(echo_critic("echo"));
    let inst = instruction("p1", "1234");
    let obs = Observation { exec_output: None, traceback: None, binary_feedback: false, timed_out: false };
    let c = e.critique(&inst, &[], "Step 1: guess\nThe answer is 7", &obs).unwrap();
    assert!(c.text.contains("Answer: 1234"));
    assert!(c.text.contains(&inst.prompt));
    assert!(c.text.contains("The answer is 7"));
    assert!(c.text.contains("Your answer is wrong."));
    assert_eq!(c.author, "echo");
}

#[test]
fn critic_is_retried_on_transport_errors() {
    let mut e = engine(0);
    let critic = ModelClient::scripted("critic", |_, call| {
        if call < 2 { Err(ClientError::Transport("reset".into())) } else { Ok(vec!["fix step 1".into()]) }
    });
    e.critic = Arc::new(critic);
    let obs = Observation { exec_output: None, traceback: None, binary_feedback: false, timed_out: false };
    let c = e.critique(&instruction("p", "1"), &[], "x", &obs).unwrap();
    assert_eq!(c.text, "fix step 1");
    assert_eq!(e.critic.retry_count(), 2);
}

#[test]
fn correct_actions_are_never_critiqued() {
    let backend = Arc::new(ScriptedBackend::new(|req, _| Ok(vec!["feedback".into(); req.n as usize])));
    let mut e = engine(0);
    e.critic = Arc::new(ModelClient::new("critic", backend.clone()));
    let s = sampler(vec![MockActor::always(true)], vec![MockActor::always(true)], MockActor::always(true));
    e.build_tree(&instruction("p", "5"), &s).unwrap();
    assert_eq!(backend.calls(), 0);
    let s = sampler(vec![correct_at(&[2])], vec![correct_at(&[2])], correct_at(&[2]));
    e.build_tree(&instruction("p", "5"), &s).unwrap();
    assert_eq!(backend.calls(), 1);
}

// ---------------------------------------------------------------- observe / evaluate

#[test]
fn observe_examples() {
    let e = engine(0);
    let mut inst = instruction("p", "42");
    inst.tool_mode = true;
    let obs = e.observe(&code_draft("print(42)"), &inst).unwrap();
    assert_eq!(obs.exec_output.as_deref().map(str::trim), Some("42"));
    assert!(obs.binary_feedback && obs.traceback.is_none());

    let obs = e.observe(&code_draft("x = 1/0\nprint(x)"), &inst).unwrap();
    assert!(obs.traceback.unwrap().contains("ZeroDivisionError"));
    assert!(!obs.binary_feedback);

    let obs = e.observe(&code_draft("while True: pass"), &inst).unwrap();
    assert!(obs.timed_out && obs.traceback.unwrap().contains("TimeoutError"));

    let text = Draft::new(1, "Step 1: halve seven.\nStep 2: The answer is 7/2".into(), COT, "m");
    let obs = e.observe(&text, &instruction("p", "3.5")).unwrap();
    assert!(obs.binary_feedback);
    assert!(obs.exec_output.is_none() && obs.traceback.is_none());
}

#[test]
fn evaluate_examples() {
    let e = engine(0);
    let echo = code_draft("print(input())");
    let all = coding("c", &[("a", "a"), ("b", "b"), ("c", "c")]);
    assert!(e.evaluate(&echo, &all).unwrap().correct);
    let two_of_three = coding("c", &[("a", "a"), ("b", "b"), ("c", "x")]);
    let v = e.evaluate(&echo, &two_of_three).unwrap();
    assert!(!v.correct && v.rigorous);
    assert_eq!(v.failing_cases(), vec![2]);
    let prose = Draft::new(1, "Step 1: no code here".into(), COT, "m");
    assert_eq!(e.evaluate(&prose, &all).unwrap().detail, VerdictDetail::NoCode);

    let near = Draft::new(1, "Step 1: The answer is 5.0000001".into(), COT, "m");
    assert!(e.evaluate(&near, &instruction("p", "5")).unwrap().correct);
    let far = Draft::new(1, "Step 1: The answer is 5.01".into(), COT, "m");
    assert!(!e.evaluate(&far, &instruction("p", "5")).unwrap().correct);
}

#[test]
fn judge_is_used_only_without_ground_truth() {
    let mut open = instruction("open", "x");
    open.ground_truth = GroundTruth::default();
    let d = Draft::new(1, "Step 1: a poem".into(), COT, "m");
    assert!(matches!(engine(0).evaluate(&d, &open), Err(EngineError::Config(_))));
    let judge = ModelClient::scripted("judge", |_, _| Ok(vec!["Looks fine.\nVERDICT: CORRECT".into()]));
    let e = engine(0).with_judge(Arc::new(judge));
    let v = e.evaluate(&d, &open).unwrap();
    assert!(v.correct && !v.rigorous);
    let judge = ModelClient::scripted("judge", |_, _| Ok(vec!["VERDICT: INCORRECT".into()]));
    assert!(!engine(0).with_judge(Arc::new(judge)).evaluate(&d, &open).unwrap().correct);
}

#[test]
fn sandbox_outage_is_an_error_not_a_verdict() {
    let e = Engine::new(Arc::new(preftree::testkit::fixed_critic("c")), Arc::new(StubSandbox::unavailable()), EngineSettings::default()).unwrap();
    assert!(matches!(e.evaluate(&code_draft("print(1)"), &coding("c", &[("1", "1")])), Err(EngineError::Sandbox(_))));
}

// ---------------------------------------------------------------- test generation

fn testgen_client(reply: &'static str) -> ModelClient {
    ModelClient::scripted("gen", move |_, _| Ok(vec![reply.to_string()]))
}

const TWELVE: &str = r#"Here you go: {"basic": ["1","2","3","4"], "edge": ["5","6","7","8"], "large": ["9","10","11",12]}"#;

#[test]
fn generated_cases_are_labelled_by_the_gold_program() {
    let e = engine(0);
    let cases = e.generate_test_cases(&coding("c", &[]), "print(input())", &testgen_client(TWELVE)).unwrap();
    assert_eq!(cases.len(), 12);
    for (k, c) in cases.iter().enumerate() {
        assert_eq!(c.input, (k + 1).to_string());
        assert_eq!(c.expected_output.trim(), c.input);
    }
    let count = |cat| cases.iter().filter(|c| c.category == cat).count();
    assert_eq!((count(TestCategory::Basic), count(TestCategory::Edge), count(TestCategory::Large)), (4, 4, 4));
}

#[test]
fn crashing_inputs_are_dropped() {
    let sandbox = StubSandbox::new(|req| {
        let mut r = ExecResponse { id: req.id.clone(), stdout: req.stdin.clone(), syntax_ok: Some(true), ..Default::default() };
        if req.stdin == "7" {
            r.traceback = Some("Traceback: IndexError".into());
            r.exit_status = 1;
        }
        if req.stdin == "all" {
            r.timed_out = true;
        }
        Ok(r)
    });
    let e = Engine::new(Arc::new(preftree::testkit::fixed_critic("c")), Arc::new(sandbox), EngineSettings::default()).unwrap();
    assert_eq!(e.generate_test_cases(&coding("c", &[]), "gold", &testgen_client(TWELVE)).unwrap().len(), 11);
    let dead = r#"{"basic": ["all"], "edge": ["all"], "large": ["all"]}"#;
    assert!(e.generate_test_cases(&coding("c", &[]), "gold", &testgen_client(dead)).unwrap().is_empty());
    assert!(matches!(e.generate_test_cases(&coding("c", &[]), "gold", &testgen_client("no json")), Err(EngineError::Parse(_))));
    assert!(matches!(e.generate_test_cases(&coding("c", &[]), "gold", &testgen_client(r#"{"basic": []}"#)), Err(EngineError::Parse(_))));
}

// ---------------------------------------------------------------- sampling

#[test]
fn schema_draws_are_balanced_and_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<ReasoningSchema> = (0..10_000).map(|_| sample_schema(&mut rng)).collect();
    let cot = draws.iter().filter(|s| **s == COT).count() as f64 / 1e4;
    assert!((0.47..=0.53).contains(&cot), "{cot}");
    let mut again = ChaCha8Rng::seed_from_u64(0);
    assert!(draws.iter().take(100).all(|s| *s == sample_schema(&mut again)));
}

fn ladder(tiers: Vec<MockActor>, elicitor: MockActor, inst: &Instruction) -> (bool, preftree::sampling::LadderReport) {
    let e = engine(0);
    let s = sampler(tiers, vec![MockActor::always(false)], elicitor);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (found, report) = s.sample_correct(&e, inst, &[], &mut rng).unwrap();
    if let Some(a) = &found {
        assert!(a.verdict.correct);
    }
    (found.is_some(), report)
}

fn annotated(id: &str) -> Instruction {
    let mut inst = instruction(id, "5");
    inst.ground_truth.rationale = Some("2+3=5 so the answer is 5".into());
    inst
}

#[test]
fn ladder_rounds_and_tiers() {
    let inst = annotated("p");
    let (found, r) = ladder(vec![MockActor::with_probability(1.0)], MockActor::always(false), &inst);
    assert!(found && !r.elicited);
    assert_eq!(r.rounds.len(), 1);
    assert_eq!((r.rounds[0].tier, r.rounds[0].samples, r.rounds[0].n_correct), (0, 20, 20));

    let tiers = vec![MockActor::with_probability(0.0), MockActor::with_probability(0.0), MockActor::with_probability(1.0)];
    let (found, r) = ladder(tiers, MockActor::always(false), &inst);
    assert!(found && !r.elicited);
    assert_eq!(r.rounds.iter().map(|x| (x.tier, x.samples)).collect::<Vec<_>>(), vec![(0, 20), (1, 20), (2, 20)]);

    let tiers = vec![MockActor::with_probability(0.0), MockActor::with_probability(0.0)];
    let (found, r) = ladder(tiers, MockActor::always(false), &inst);
    assert!(!found && r.elicited);
    assert_eq!(r.rounds.iter().map(|x| x.tier).collect::<Vec<_>>(), vec![0, 1, 1]);
    assert_eq!(r.elicit_attempts, 2);
    assert_eq!(r.samples_used(), 62);
}

#[test]
fn elicitation_rescues_hopeless_tiers() {
    let (found, r) = ladder(vec![MockActor::always(false)], MockActor::always(true), &annotated("p"));
    assert!(found && r.elicited && r.correct_found);
    assert_eq!(r.elicit_attempts, 1);
    assert_eq!(r.rounds.len(), 3);
}

#[test]
fn ladder_budget_holds_under_random_mocks() {
    let e = engine(0);
    for p in [0.02, 0.05, 0.1, 0.3] {
        let s = sampler(
            vec![MockActor::with_probability(p), MockActor::with_probability(p * 2.0)],
            vec![MockActor::with_probability(0.5)],
            MockActor::with_probability(0.5),
        );
        for i in 0..10 {
            let inst = instruction(&format!("r{i}"), &format!("{i}"));
            let out = e.build_tree(&inst, &s).unwrap();
            for r in &out.reports {
                assert!(!r.rounds.is_empty() && r.rounds.len() <= 3);
                assert!(r.rounds.iter().all(|x| x.samples == 20));
                assert!(r.rounds.windows(2).all(|w| w[0].tier <= w[1].tier));
                assert!(r.samples_used() <= 20 * 3 + 2);
                // only the final round may hold a success
                assert!(r.rounds[..r.rounds.len() - 1].iter().all(|x| x.n_correct == 0));
            }
        }
    }
}

#[test]
fn budget_is_configurable() {
    let e = engine(0);
    let s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false))
        .with_budget(LadderBudget { samples_per_round: 4, max_rounds: 2 });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, r) = s.sample_correct(&e, &instruction("p", "5"), &[], &mut rng).unwrap();
    assert_eq!(r.rounds.iter().map(|x| x.samples).collect::<Vec<_>>(), vec![4, 4]);
}

#[test]
fn copying_a_masked_rationale_fails_and_is_retried() {
    let e = engine(0);
    let mut inst = instruction("p", "5");
    inst.ground_truth.rationale = Some("2+3=5 so the answer is 5".into());
    let mut s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false));
    s.elicitor = Arc::new(ModelClient::scripted("copier", |req, _| Ok(vec![req.messages.last().unwrap().content.clone()])));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = s.elicit_with_ground_truth(&e, &inst, &[], &mut rng).unwrap();
    assert_eq!(out.err(), Some(ElicitFailure::NotCorrect { attempts: 2 }));
}

#[test]
fn elicitation_prompt_masks_the_answer() {
    let e = engine(0);
    let mut inst = instruction("p", "5");
    inst.ground_truth.rationale = Some("2+3=5 so the answer is 5".into());
    let captured = Arc::new(std::sync::Mutex::new(String::new()));
    let sink = captured.clone();
    let mut s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false));
    s.elicitor = Arc::new(ModelClient::scripted("spy", move |req, _| {
        *sink.lock().unwrap() = req.messages.last().unwrap().content.clone();
        Ok(vec!["Step 1: 2+3.\nStep 2: The answer is 5".into()])
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (assessed, attempts) = s.elicit_with_ground_truth(&e, &inst, &[], &mut rng).unwrap().unwrap();
    assert!(assessed.verdict.correct);
    assert_eq!(attempts, 1);
    let prompt = captured.lock().unwrap().clone();
    assert!(prompt.contains("2+3=<mask> so the answer is <mask>"));
}

#[test]
fn elicitation_needs_annotations() {
    let e = engine(0);
    let s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(true));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bare = instruction("p", "5");
    assert!(matches!(s.elicit_with_ground_truth(&e, &bare, &[], &mut rng).unwrap(), Err(ElicitFailure::NoAnnotation(_))));
    let mut code = coding("c", &[("hi", "hi")]);
    code.ground_truth.solutions.clear();
    assert!(matches!(s.elicit_with_ground_truth(&e, &code, &[], &mut rng).unwrap(), Err(ElicitFailure::NoAnnotation(_))));
}

fn annotating_elicitor() -> Arc<ModelClient> {
    Arc::new(ModelClient::scripted("annotator", |req, _| {
        let prompt = &req.messages.last().unwrap().content;
        let code = preftree::tree::code_blocks(prompt).into_iter().next().unwrap_or_default();
        Ok(vec![format!("Step 1: Read the input and print it.\n```python\n{code}\n```")])
    }))
}

#[test]
fn coding_elicitation_is_grounded_in_the_solution() {
    let e = engine(0);
    let mut s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false)], MockActor::always(false));
    s.elicitor = annotating_elicitor();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, _) = s.elicit_with_ground_truth(&e, &coding("c", &[("hi", "hi")]), &[], &mut rng).unwrap().unwrap();
    assert!(a.verdict.correct && a.draft.body.contains("print(input())"));
}

#[test]
fn incorrect_sampling_filters_syntax() {
    let e = engine(0);
    let inst = coding("c", &[("hi", "hi")]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wrong = sampler(vec![MockActor::always(true)], vec![MockActor::always(false).style(MockStyle::EchoCode)], MockActor::always(true));
    let got = wrong.sample_incorrect(&e, &inst, &[], &mut rng).unwrap().unwrap();
    assert!(!got.verdict.correct && e.passes_syntax(&got.draft).unwrap());

    let broken = sampler(vec![MockActor::always(true)], vec![MockActor::always(false).style(MockStyle::EchoCode).broken_syntax(true)], MockActor::always(true));
    assert!(broken.sample_incorrect(&e, &inst, &[], &mut rng).unwrap().is_none());

    let right = sampler(vec![MockActor::always(true)], vec![MockActor::always(true).style(MockStyle::EchoCode)], MockActor::always(true));
    assert!(right.sample_incorrect(&e, &inst, &[], &mut rng).unwrap().is_none());

    let half = sampler(vec![MockActor::always(true)], vec![MockActor::with_probability(0.3).style(MockStyle::EchoCode).broken_syntax(true)], MockActor::always(true));
    let out = e.build_tree(&inst, &half).unwrap();
    for n in out.tree.nodes.values() {
        assert!(e.passes_syntax(&Draft::new(n.turn, n.body.clone(), n.schema, &n.producer)).unwrap());
    }
}

#[test]
fn extra_pairs_cover_each_reference() {
    let e = engine(0);
    let mut inst = coding("c", &[("hi", "hi")]);
    inst.ground_truth.solutions = vec!["print(input())".into(), "print(input())\n# second".into()];
    let mut s = sampler(vec![MockActor::always(false)], vec![MockActor::always(false).style(MockStyle::EchoCode)], MockActor::always(false));
    s.elicitor = annotating_elicitor();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs = s.extra_pairs_for_hard(&e, &inst, &mut rng).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.chosen.correct && !p.rejected.correct && p.check().is_ok()));

    let once = MockActor::new(|c| c.repeat > 0).style(MockStyle::EchoCode);
    let mut s = sampler(vec![MockActor::always(false)], vec![once], MockActor::always(false));
    s.elicitor = annotating_elicitor();
    assert_eq!(s.extra_pairs_for_hard(&e, &inst, &mut rng).unwrap().len(), 1);

    inst.ground_truth.solutions.truncate(1);
    assert!(s.extra_pairs_for_hard(&e, &inst, &mut rng).unwrap().is_empty());
}

#[test]
fn hard_problems_gain_additional_pairs_in_the_tree() {
    let e = engine(0);
    let mut inst = coding("c", &[("hi", "hi")]);
    inst.ground_truth.solutions = vec!["print(input())".into(), "print(input())\n# second".into()];
    let mut s = sampler(vec![MockActor::always(false).style(MockStyle::EchoCode)], vec![MockActor::always(false).style(MockStyle::EchoCode)], MockActor::always(false));
    s.elicitor = annotating_elicitor();
    let out = e.build_tree(&inst, &s).unwrap();
    assert!(out.reports[0].elicited);
    assert_eq!(out.tree.additional_pairs.len(), 2);
    assert!(validate_tree(&out.tree).is_empty());
}
