//! Acceptance suite: ten end-to-end criteria, one pass/fail line each.
//! Runs without the libtest harness so the lines always print.

use std::collections::HashSet;
use std::fs;
use std::time::{Duration, Instant};

use grounded_rl::cli::{
    cmd_distill, cmd_generate, cmd_search, cmd_train, metrics_path, Context as RunContext, DistillArgs, GenerateArgs,
    ModeArg, RunConfig, SearchArgs, TrainArgs,
};
use grounded_rl::distill::{deduplicate, linearize, CropConfig, DatasetRecord};
use grounded_rl::grammar::{validate_dialog, FailureKind};
use grounded_rl::num::softmax;
use grounded_rl::optim::grpo::{
    compute_advantages, finite_diff_check, grpo_loss, masked_only_contexts, old_log_probs, randomize,
    reference_log_dists, GroupBatch, LossConfig,
};
use grounded_rl::optim::policy::{
    Context, DifferentiablePolicy, Mode, NeverAnswerPolicy, Policy, PolicyInput, TabularSoftmaxPolicy,
};
use grounded_rl::optim::rollout::{run_episode, Episode, RolloutConfig};
use grounded_rl::optim::train::{
    demonstrations, evaluate, likelihood_fit, summarize, train, GrpoConfig, WarmStartConfig,
};
use grounded_rl::optim::vocab::POLICY_VOCAB;
use grounded_rl::rewards::{diversity_bonus_for, format_reward_single, task_reward};
use grounded_rl::scene::{crop_header, generate_task, AnswerKey, Difficulty, TaskInstance, TaskKind};
use grounded_rl::search::{
    backpropagate, linear_rollout, oracle_verifier, run_search, search_answer, ucb_score, Proposal, ScriptedTeacher,
    SearchConfig, SearchTree, ROOT,
};
use grounded_rl::seed::{self, Rng};
use grounded_rl::trace::{render_dialog, Coordinate, Dialog, Segment, SOFT_PROMPT_TEXT};
use rand::Rng as _;
use rayon::prelude::*;

const ROOT_SEED: u64 = 20_251_018;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String, ok: bool) -> Outcome {
    let ok = ok && elapsed <= limit;
    check(ok, format!("{detail}; {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn tasks(range: std::ops::Range<u64>) -> Vec<TaskInstance> {
    range
        .into_par_iter()
        .map(|s| generate_task(s, TaskKind::ALL[(s % 3) as usize], Difficulty::default()).expect("task"))
        .collect()
}

// 1. Grammar automaton.

fn random_coordinate(rng: &mut Rng, task: &TaskInstance) -> Coordinate {
    Coordinate::new(rng.gen_range(0..i64::from(task.raster.width)), rng.gen_range(0..i64::from(task.raster.height)))
}

fn random_think(rng: &mut Rng, task: &TaskInstance) -> String {
    let words =
        ["I see the red cross", "Now I will check the panel", "I can confirm the circle", "Scanning the corner"];
    (0..rng.gen_range(1..3))
        .map(|_| {
            let c = random_coordinate(rng, task);
            format!("{} ({}, {}).", words[rng.gen_range(0..words.len())], c.x, c.y)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn random_dialog(rng: &mut Rng, task: &TaskInstance) -> (String, Vec<Coordinate>) {
    let mut segments = Vec::new();
    let mut calls = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        segments.push(Segment::Think(random_think(rng, task)));
        let c = random_coordinate(rng, task);
        calls.push(c);
        segments.push(Segment::ToolCall(c));
        segments.push(Segment::Observation(crop_header(&task.raster, c, 100, 384).expect("in bounds")));
    }
    segments.push(Segment::Think(random_think(rng, task)));
    segments.push(Segment::Answer(format!("option {}", rng.gen_range(0..9))));
    (render_dialog(&Dialog::from_segments(segments)).expect("well-formed dialog"), calls)
}

/// A single edit with the failure kind it must produce.
fn mutate(rng: &mut Rng, text: &str, calls: &[Coordinate], task: &TaskInstance) -> (String, FailureKind) {
    let tags = ["<think>", "</think>", "<answer>", "</answer>"];
    match rng.gen_range(0..6) {
        0 => {
            // Truncate one tag by its closing bracket.
            let tag = tags[rng.gen_range(0..tags.len())];
            let hits: Vec<usize> = text.match_indices(tag).map(|(i, _)| i).collect();
            let at = hits[rng.gen_range(0..hits.len())];
            let mut out = text.to_string();
            out.remove(at + tag.len() - 1);
            (out, FailureKind::MalformedTag)
        }
        1 => {
            let cut = text.rfind("<answer>").expect("answer");
            (text[..cut].trim_end().to_string(), FailureKind::MissingAnswer)
        }
        2 => {
            let tail = ["\nextra words", "\n<think> again (1, 1). </think>", " trailing"][rng.gen_range(0..3)];
            (format!("{text}{tail}"), FailureKind::TrailingContent)
        }
        3 => {
            let far = Coordinate::new(i64::from(task.raster.width) + rng.gen_range(0..50), rng.gen_range(-40..0));
            if let Some(c) = calls.first().filter(|_| rng.gen_bool(0.5)) {
                let from = format!("[{}, {}]", c.x, c.y);
                (text.replacen(&from, &format!("[{}, {}]", far.x, far.y), 1), FailureKind::InvalidCoordinate)
            } else {
                let at = text.find(" </think>").expect("think");
                let mut out = text.to_string();
                out.insert_str(at, &format!(" The far edge ({}, {}).", far.x, far.y));
                (out, FailureKind::InvalidCoordinate)
            }
        }
        4 => {
            let at = text.find("</think>").expect("think") + "</think>".len();
            let mut out = text.to_string();
            out.insert_str(at, "\n<observation>image 384x384</observation>");
            (out, FailureKind::PrematureObservation)
        }
        _ => {
            let edit = rng.gen_range(0..3);
            let out = match edit {
                0 => format!("<answer> early </answer>\n{text}"),
                1 => text.replacen("<think>", "", 1),
                _ => {
                    let at = text.find("</think>").expect("think") + "</think>".len();
                    let mut out = text.to_string();
                    out.insert_str(at, "\n<think> twice (2, 2). </think>");
                    out
                }
            };
            (out, FailureKind::OutOfOrder)
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let scenes = tasks(0..20);
    let mut rng = seed::rng(ROOT_SEED, &[1]);
    let (mut accepted, mut judged, mut correct) = (0, 0, 0);
    let mut wrong_kinds = Vec::new();
    for i in 0..1000 {
        let task = &scenes[i % scenes.len()];
        let (text, calls) = random_dialog(&mut rng, task);
        accepted += usize::from(validate_dialog(&text, &task.raster).valid);
        let (mutant, expected) = mutate(&mut rng, &text, &calls, task);
        let report = validate_dialog(&mutant, &task.raster);
        if report.valid {
            continue;
        }
        judged += 1;
        if report.failure == Some(expected) {
            correct += 1;
        } else if wrong_kinds.len() < 3 {
            wrong_kinds.push(format!("{expected:?}->{:?}", report.failure));
        }
    }
    let rate = correct as f64 / judged.max(1) as f64;
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!(
            "valid accepted {accepted}/1000; mutants with expected failure {correct}/{judged} ({:.2}%) {wrong_kinds:?}",
            rate * 100.0
        ),
        accepted == 1000 && rate >= 0.99 && judged >= 950,
    )
}

// 2. Reward arithmetic.

fn criterion_2() -> Outcome {
    let c = Coordinate::new;
    let three = diversity_bonus_for::<f64>(&[c(10, 10), c(50, 50), c(12, 10)]);
    let six = diversity_bonus_for::<f64>(&[c(0, 0), c(100, 0), c(200, 0), c(300, 0), c(400, 0), c(500, 0)]);
    let task = generate_task(2, TaskKind::MultipleChoice, Difficulty::default()).expect("task");
    let (w, h) = (task.raster.width, task.raster.height);
    let inside = format!("<think> I see it ({}, {}). </think>\n<answer> red </answer>", w / 2, h / 2);
    let outside = format!("<think> I see it ({}, {}). </think>\n<answer> red </answer>", w + 5, h / 2);
    let fmt_in = format_reward_single::<f64>(&inside, &task.raster);
    let fmt_out = format_reward_single::<f64>(&outside, &task.raster);
    let action = generate_task(5, TaskKind::ActionPrediction, Difficulty::default()).expect("task");
    let AnswerKey::Action { action_type, argument } = &action.answer_key else {
        return Err("action task without an action key".into());
    };
    let partial = task_reward::<f64>(&action, &format!("{action_type} id_99999"));
    let full = task_reward::<f64>(&action, &format!("{} {argument}", action_type.to_uppercase()));
    let ok = three == 0.4 && six == 0.8 && fmt_in == 1.0 && fmt_out == 0.0 && partial == 0.5 && full == 1.0;
    check(
        ok,
        format!(
            "bonus {three} and {six}; r_fmt in/out-of-bounds {fmt_in}/{fmt_out}; action partial {partial}, full {full}"
        ),
    )
}

// 3. GRPO gradient fidelity.

/// Adds a fixed offset to the logits at the given contexts only.
#[derive(Clone)]
struct Perturbed {
    inner: TabularSoftmaxPolicy<f64>,
    at: HashSet<Context>,
    offset: Vec<f64>,
}

impl Policy<f64> for Perturbed {
    fn distribution(&self, input: &PolicyInput<'_>) -> Vec<f64> {
        softmax(&self.logits(input.ctx))
    }
}

impl DifferentiablePolicy<f64> for Perturbed {
    fn logits(&self, ctx: &Context) -> Vec<f64> {
        let mut z = self.inner.logits(ctx);
        if self.at.contains(ctx) {
            z.iter_mut().zip(&self.offset).for_each(|(a, b)| *a += b);
        }
        z
    }
    fn backprop(&self, ctx: &Context, dlogits: &[f64], grad: &mut [f64]) {
        self.inner.backprop(ctx, dlogits, grad);
    }
    fn parameters(&self) -> &[f64] {
        self.inner.parameters()
    }
    fn parameters_mut(&mut self) -> &mut [f64] {
        self.inner.parameters_mut()
    }
    fn active_parameters(&self, ctx: &Context) -> Vec<usize> {
        self.inner.active_parameters(ctx)
    }
}

fn random_policy(s: u64, path: u64, sd: f64) -> TabularSoftmaxPolicy<f64> {
    let mut p = TabularSoftmaxPolicy::new(256);
    randomize(&mut p, sd, &mut seed::rng(s, &[path]));
    p
}

/// A group of multi-turn episodes from a sharpened random policy, so that
/// most end with end-of-sequence and carry observation tokens.
fn sampled_batch(s: u64, task: &TaskInstance) -> GroupBatch<f64> {
    let behaviour = grounded_rl::optim::policy::OraclePolicy;
    let noisy = random_policy(s, 9, 1.0);
    let cfg = RolloutConfig { keep_observations: false, ..RolloutConfig::default() };
    let episodes: Vec<Episode<f64>> = (0..8u64)
        .map(|g| {
            let mut rng = seed::rng(s, &[3, g]);
            if g % 2 == 0 {
                run_episode(&behaviour, task, Mode::Multi, &cfg, &mut rng)
            } else {
                run_episode(&noisy, task, Mode::Multi, &cfg, &mut rng)
            }
        })
        .collect();
    let trajectories = episodes.iter().map(|e| e.trajectory.clone()).collect();
    let mut rng = seed::rng(s, &[4]);
    let rewards = episodes.iter().map(|e| e.reward.total + rng.gen_range(-0.3..0.3)).collect();
    GroupBatch::new(task.clone(), Mode::Multi, trajectories, rewards).expect("batch")
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let scenes = tasks(100..120);
    let cfg = LossConfig { clip_ratio: 0.2, kl_coeff: 0.05 };
    let mut worst_fd = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_mask = 0.0f64;
    let mut perturbed_contexts = 0;
    for s in 0..20u64 {
        let batch = sampled_batch(ROOT_SEED + s, &scenes[s as usize]);
        let p = random_policy(s, 1, 0.3);
        let old = old_log_probs(&random_policy(s, 2, 0.3), &batch);
        let reference = reference_log_dists(&random_policy(s, 3, 0.3), &batch);
        let err = finite_diff_check(&p, &batch, &old, &reference, &cfg, 1e-5, 100, &mut seed::rng(s, &[5]))
            .map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(err);
        let adv = compute_advantages(&batch.rewards, batch.group_size()).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max(adv.iter().sum::<f64>().abs());
        let base = grpo_loss(&batch, &p, &old, &reference, &cfg).map_err(|e| e.to_string())?.loss;
        let mut rng = seed::rng(s, &[6]);
        let offset: Vec<f64> = (0..POLICY_VOCAB).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let at = masked_only_contexts(&batch);
        perturbed_contexts += at.len();
        let q = Perturbed { inner: p.clone(), at, offset };
        let moved = grpo_loss(&batch, &q, &old, &reference, &cfg).map_err(|e| e.to_string())?.loss;
        worst_mask = worst_mask.max((moved - base).abs());
    }
    within(
        start.elapsed(),
        Duration::from_secs(30),
        format!(
            "max FD relative error {worst_fd:.2e} over 20 seeds; max |Σ A| {worst_sum:.1e}; masked perturbation |ΔL| {worst_mask:.1e} over {perturbed_contexts} contexts"
        ),
        worst_fd <= 1e-4 && worst_sum <= 1e-9 && worst_mask <= 1e-12 && perturbed_contexts > 0,
    )
}

// 4. Search arithmetic.

fn criterion_4() -> Outcome {
    let a: f64 = ucb_score(0.5, 2, 10, 2.0);
    let b: f64 = ucb_score(0.2, 1, 10, 2.0);
    let ucb_ok = (a - 2.6460).abs() < 1e-4 && (b - 3.2348).abs() < 1e-4 && b > a;
    // Random backpropagation over a random tree, checked against plain sums.
    let mut rng = seed::rng(ROOT_SEED, &[4]);
    let mut tree: SearchTree<f64> = SearchTree::new("c4");
    for _ in 0..60 {
        let parent = rng.gen_range(0..tree.nodes.len());
        tree.add_child(parent, Proposal::Answer("x".into()), None);
    }
    let mut sums = vec![0.0f64; tree.nodes.len()];
    for _ in 0..2000 {
        let leaf = rng.gen_range(0..tree.nodes.len());
        let path = tree.path_to(leaf);
        let r: f64 = rng.gen_range(0.0..1.0);
        for &id in &path {
            sums[id] += r;
        }
        backpropagate(&mut tree, &path, r);
    }
    let worst =
        tree.nodes.iter().map(|n| (n.q * n.n as f64 - sums[n.id]).abs() / sums[n.id].max(1.0)).fold(0.0, f64::max);
    let d = SearchConfig::default();
    let table = (d.simulations, d.max_depth, d.rollouts_per_node, d.children_per_expansion, d.c_puct);
    let round: SearchConfig = serde_json::from_str(&serde_json::to_string(&d).expect("json")).expect("json");
    let ok = ucb_ok && worst <= 1e-12 && table == (20, 10, 2, 3, 2.0) && round == d && tree.nodes[ROOT].n == 2000;
    check(ok, format!("UCB {a:.5} vs {b:.5}; max |Q·n − Σr| (relative) {worst:.1e}; defaults {table:?}"))
}

// 5. Search uplift.

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let scenes = tasks(5000..5200);
    let cfg = SearchConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for (pi, p) in [0.3, 0.5, 0.7].into_iter().enumerate() {
        let teacher = ScriptedTeacher::new(p);
        let hits: Vec<(bool, bool)> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let (pi, i) = (pi as u64, i as u64);
                let mut rng = seed::rng(ROOT_SEED, &[5, pi, i, 0]);
                let (_, answer) =
                    linear_rollout(t, &teacher, cfg.rollout_depth_limit, cfg.temperature, &mut rng).expect("rollout");
                let top1 = answer.is_some_and(|a| oracle_verifier::<f64>(t, &a) >= 1.0);
                let tree: SearchTree<f64> =
                    run_search(t, &teacher, &oracle_verifier, &cfg, &mut seed::rng(ROOT_SEED, &[5, pi, i, 1]))
                        .expect("search");
                let mcts = search_answer(&tree).is_ok_and(|a| oracle_verifier::<f64>(t, &a) >= 1.0);
                (top1, mcts)
            })
            .collect();
        let top1 = hits.iter().filter(|h| h.0).count() as f64 / hits.len() as f64;
        let mcts = hits.iter().filter(|h| h.1).count() as f64 / hits.len() as f64;
        ok &= mcts >= top1;
        if p == 0.5 {
            ok &= mcts >= top1 + 0.15;
        }
        lines.push(format!("p={p}: top-1 {:.1}% vs search {:.1}%", top1 * 100.0, mcts * 100.0));
    }
    within(start.elapsed(), Duration::from_secs(120), lines.join(", "), ok)
}

// Shared warm-start plumbing for 6-8.

fn distill_records(scenes: &[TaskInstance], p: f64, mode: Mode, salt: u64) -> Vec<DatasetRecord> {
    let teacher = ScriptedTeacher::new(p);
    let cfg = SearchConfig::default();
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let tree: SearchTree<f64> =
                run_search(t, &teacher, &oracle_verifier, &cfg, &mut seed::rng(ROOT_SEED, &[salt, i as u64]))
                    .expect("search");
            deduplicate(linearize(&tree).expect("linearize"))
                .iter()
                .map(|c| match mode {
                    Mode::Single => DatasetRecord::single(t, c).expect("record"),
                    Mode::Multi => DatasetRecord::dialog(t, c, CropConfig::default()).expect("record"),
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

fn warm_policy(scenes: &[TaskInstance], p: f64, mode: Mode, salt: u64) -> TabularSoftmaxPolicy<f64> {
    let records = distill_records(scenes, p, mode, salt);
    let (demos, _) = demonstrations(&records, scenes, mode, CropConfig::default().resize);
    let mut policy = TabularSoftmaxPolicy::new(grounded_rl::optim::policy::DEFAULT_BUCKETS);
    likelihood_fit(&mut policy, &demos, &WarmStartConfig::default(), seed::derive(ROOT_SEED, &[salt]));
    policy
}

// 6. Warm start versus cold start.

fn criterion_6() -> Outcome {
    let train_set = tasks(0..200);
    let held = tasks(10_000..10_200);
    let rollout = GrpoConfig::single().rollout();
    let cold = TabularSoftmaxPolicy::<f64>::new(grounded_rl::optim::policy::DEFAULT_BUCKETS);
    let cold_fmt = summarize(&evaluate::<f64, _>(&cold, &held, Mode::Single, &rollout, ROOT_SEED)).fmt_rate;
    let warm = warm_policy(&train_set, 0.5, Mode::Single, 6);
    let warm_fmt = summarize(&evaluate::<f64, _>(&warm, &held, Mode::Single, &rollout, ROOT_SEED)).fmt_rate;
    check(
        cold_fmt <= 0.2 && warm_fmt >= 0.9,
        format!("format validity at iteration 0: cold {cold_fmt:.3}, warm {warm_fmt:.3}"),
    )
}

// 7. Toy training convergence.

fn criterion_7() -> Outcome {
    let start = Instant::now();
    // A deliberately weak warm start: few demonstrations from a noisy teacher.
    let demo_set = tasks(0..40);
    let train_set = tasks(0..400);
    let held = tasks(10_000..10_200);
    let mut policy = warm_policy(&demo_set, 0.3, Mode::Single, 7);
    let reference = policy.clone();
    let cfg = GrpoConfig { iterations: 200, ..GrpoConfig::single() };
    let rollout = cfg.rollout();
    let before = summarize(&evaluate::<f64, _>(&policy, &held, Mode::Single, &rollout, ROOT_SEED)).mean_reward;
    train(&mut policy, &reference, &train_set, Mode::Single, &cfg, ROOT_SEED, |_| {}).map_err(|e| e.to_string())?;
    let after = summarize(&evaluate::<f64, _>(&policy, &held, Mode::Single, &rollout, ROOT_SEED)).mean_reward;
    let gain = after / before - 1.0;
    within(
        start.elapsed(),
        Duration::from_secs(300),
        format!("held-out mean reward {before:.3} -> {after:.3} ({:+.1}%) in 200 iterations", gain * 100.0),
        gain >= 0.2,
    )
}

// 8. Diversity-bonus ablation.

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let demo_set = tasks(0..200);
    let train_set = tasks(0..400);
    let held = tasks(10_000..10_200);
    let warm = warm_policy(&demo_set, 0.9, Mode::Multi, 8);
    let run = |bonus: bool| -> Result<(f64, f64), String> {
        let mut policy = warm.clone();
        let cfg = GrpoConfig { iterations: 1000, diversity_bonus: bonus, ..GrpoConfig::multiturn() };
        let log =
            train(&mut policy, &warm, &train_set, Mode::Multi, &cfg, ROOT_SEED, |_| {}).map_err(|e| e.to_string())?;
        let tail = &log[log.len() - 100..];
        let train_calls = tail.iter().map(|m| m.mean_tool_calls).sum::<f64>() / tail.len() as f64;
        let held_calls =
            summarize(&evaluate::<f64, _>(&policy, &held, Mode::Multi, &cfg.rollout(), ROOT_SEED)).mean_tool_calls;
        Ok((train_calls, held_calls))
    };
    let initial =
        summarize(&evaluate::<f64, _>(&warm, &held, Mode::Multi, &GrpoConfig::multiturn().rollout(), ROOT_SEED))
            .mean_tool_calls;
    let (with_train, with_held) = run(true)?;
    let (without_train, without_held) = run(false)?;
    within(
        start.elapsed(),
        Duration::from_secs(300),
        format!(
            "mean tool calls from {initial:.2}: with bonus {with_held:.3} (last-100 train {with_train:.3}), without {without_held:.3} (last-100 train {without_train:.3})"
        ),
        with_held > 1.0 && with_train > 1.0 && without_held <= 1.1 && without_train <= 1.1,
    )
}

// 9. Multi-turn termination.

fn criterion_9() -> Outcome {
    let scenes = tasks(200..300);
    let cfg = RolloutConfig { keep_observations: false, ..RolloutConfig::default() };
    let outcomes: Vec<(bool, bool, bool)> = (0..1000usize)
        .into_par_iter()
        .map(|i| {
            let ep: Episode<f64> = run_episode(
                &NeverAnswerPolicy,
                &scenes[i % scenes.len()],
                Mode::Multi,
                &cfg,
                &mut seed::rng(ROOT_SEED, &[9, i as u64]),
            );
            let t = &ep.trajectory;
            let prompt = t.text.matches(SOFT_PROMPT_TEXT).count() == 1;
            (t.soft_prompt_turn == Some(5) && prompt, t.turns <= cfg.max_turns + 1, t.turns == cfg.max_turns + 1)
        })
        .collect();
    let prompted = outcomes.iter().filter(|o| o.0).count();
    let bounded = outcomes.iter().filter(|o| o.1).count();
    let final_turn = outcomes.iter().filter(|o| o.2).count();
    check(
        prompted == 1000 && bounded == 1000,
        format!("soft prompt at turn 5 in {prompted}/1000; within T_max + 1 turns {bounded}/1000 ({final_turn} used the final turn)"),
    )
}

// 10. Pipeline determinism.

fn pipeline(dir: &std::path::Path, workers: usize) -> Result<Vec<Vec<u8>>, String> {
    let ctx = RunContext { config: RunConfig::default(), seed: ROOT_SEED, workers: Some(workers), no_clobber: false };
    let tasks_path = dir.join("tasks.jsonl");
    let e = |e: grounded_rl::cli::CliError| e.to_string();
    cmd_generate(&ctx, &GenerateArgs { start: 0, count: 30, kind: None, num_glyphs: None, out: tasks_path.clone() })
        .map_err(e)?;
    cmd_search(
        &ctx,
        &SearchArgs { tasks: tasks_path.clone(), simulations: None, teacher_p: None, out: dir.join("trees") },
    )
    .map_err(e)?;
    let data = dir.join("data.jsonl");
    cmd_distill(
        &ctx,
        &DistillArgs {
            trees: dir.join("trees"),
            tasks: tasks_path.clone(),
            mode: ModeArg::Multiturn,
            out: data.clone(),
        },
    )
    .map_err(e)?;
    let train_args = TrainArgs {
        tasks: tasks_path.clone(),
        warm_start: Some(data.clone()),
        mode: ModeArg::Multiturn,
        lr: None,
        iterations: Some(25),
        group_size: None,
        no_diversity_bonus: false,
        out: dir.join("policy.json"),
        metrics: None,
    };
    cmd_train(&ctx, &train_args).map_err(e)?;
    let read = |p: std::path::PathBuf| fs::read(&p).map_err(|err| format!("{}: {err}", p.display()));
    Ok(vec![
        read(tasks_path)?,
        read(dir.join("trees").join("summary.json"))?,
        read(data)?,
        read(metrics_path(&train_args))?,
        read(dir.join("policy.json"))?,
    ])
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), 1)?;
    let second = pipeline(b.path(), 4)?;
    let names = ["tasks", "search summary", "dataset", "metrics log", "checkpoint"];
    let differing: Vec<&str> =
        names.iter().zip(first.iter().zip(&second)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    let nonempty = first.iter().all(|f| !f.is_empty());
    check(
        differing.is_empty() && nonempty,
        format!("two seeded runs (1 and 4 workers): {} artifacts compared, differing {differing:?}", names.len()),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("grammar automaton", criterion_1),
        ("reward arithmetic", criterion_2),
        ("GRPO gradient fidelity", criterion_3),
        ("search arithmetic", criterion_4),
        ("search uplift", criterion_5),
        ("warm-start effect", criterion_6),
        ("toy training convergence", criterion_7),
        ("diversity-bonus ablation", criterion_8),
        ("multi-turn termination", criterion_9),
        ("pipeline determinism", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
