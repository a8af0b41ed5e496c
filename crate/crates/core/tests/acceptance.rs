//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use stratplan_core::agent::TemplateVoice;
use stratplan_core::archive::to_jsonl;
use stratplan_core::catalog::{enumerate_personas, Catalog, TaskKind, TemplateRenderer};
use stratplan_core::dialogue::{sale_to_list_ratio, sale_to_list_ratio_exact, Money, Outcome, Scenario};
use stratplan_core::eval::{
    evaluate, strategy_sequence_distances, EvalConfig, HistogramEncoder, SequenceEncoder,
};
use stratplan_core::gateway::{CompletionRequest, FnBackend, GatewayError, LlmBackend, Role};
use stratplan_core::planner::sft::{corpus_examples, train_sft, SftConfig};
use stratplan_core::planner::{argmax, softmax, FeatureLayout, FeatureVector, PolicyParameters, SelectionMode};
use stratplan_core::reward::{discounted_returns, DiscountConvention, JudgeOptions, RewardConfig, TranscriptJudge};
use stratplan_core::simulator::{
    build_population, sample_simulator, scripted_population, ScriptedProfile, SimulatorBackend, SimulatorSpec,
    EVAL_INSTANCE_BASE,
};
use stratplan_core::synthetic::SyntheticEnvironment;
use stratplan_core::tom::TomMode;
use stratplan_core::trainer::{
    reinforce_gradient, reinforce_loss, run_episode, train, EpisodeContext, EpisodeRecord, Step, TrainConfig, TrainHooks,
};

type Outcomes = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcomes {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn context<'a>(task: TaskKind, judge: &'a TranscriptJudge, tom: TomMode<'a>) -> EpisodeContext<'a> {
    EpisodeContext {
        catalog: Catalog::bundled(),
        layout: FeatureLayout::for_task(task, Catalog::bundled()),
        voice: &TemplateVoice,
        tom,
        judge,
        judge_options: JudgeOptions::default(),
        reward: RewardConfig::default(),
        gamma: 0.999,
        max_turns: 10,
        selection: SelectionMode::Greedy,
    }
}

fn sl_oracle() -> Outcomes {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let seller = rng.random_range(100..1_000_000i64);
        let buyer = loop {
            let b = rng.random_range(100..1_000_000i64);
            if b != seller {
                break b;
            }
        };
        let deal = rng.random_range(0..1_200_000i64);
        let got: f64 = sale_to_list_ratio(Money::from_cents(deal), Money::from_cents(seller), Money::from_cents(buyer))
            .map_err(|e| e.to_string())?;
        let expected = (deal - seller) as f64 / (buyer - seller) as f64;
        worst = worst.max((got - expected).abs());
    }
    let exact = sale_to_list_ratio_exact(Money::from_dollars(200), Money::from_dollars(285), Money::from_dollars(142))
        .map_err(|e| e.to_string())?;
    let value: f64 = sale_to_list_ratio(Money::from_dollars(200), Money::from_dollars(285), Money::from_dollars(142))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        worst < 1e-12 && exact == Ratio::new(85, 143) && value == 85.0 / 143.0 && elapsed < Duration::from_secs(1),
        format!("max |err| {worst:.2e}, (200, 285, 142) -> {exact} = {value:.6}, {elapsed:.2?}"),
    )
}

fn naive_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let last = rewards.len() - 1;
    (0..rewards.len())
        .map(|t| (t..rewards.len()).map(|u| gamma.powi((last - u) as i32) * rewards[u]).sum())
        .collect()
}

fn returns_oracle() -> Outcomes {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut suffix_ok = true;
    for i in 0..1000 {
        let gamma = [1.0, 0.999, 0.9][i % 3];
        let len = rng.random_range(1..=10);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got: Vec<f64> = discounted_returns(&rewards, gamma, DiscountConvention::FinalTurnExponent);
        for (g, e) in got.iter().zip(naive_returns(&rewards, gamma)) {
            worst = worst.max((g - e).abs());
        }
        if gamma == 1.0 {
            for (t, g) in got.iter().enumerate() {
                suffix_ok &= (g - rewards[t..].iter().sum::<f64>()).abs() < 1e-12;
            }
        }
    }
    let example: Vec<f64> = discounted_returns(&[-0.1, -0.1, 1.0], 0.999, DiscountConvention::FinalTurnExponent);
    let example_ok = (example[2] - 1.0).abs() < 1e-12 && (example[1] - 0.9001).abs() < 1e-12 && (example[0] - 0.8002999).abs() < 1e-12;
    let elapsed = start.elapsed();
    check(
        worst < 1e-12 && suffix_ok && example_ok && elapsed < Duration::from_secs(1),
        format!("max |err| {worst:.2e}, suffix sums {suffix_ok}, [-0.1,-0.1,1.0] -> {example:?}, {elapsed:.2?}"),
    )
}

fn gradient_check() -> Outcomes {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_features = rng.random_range(2..12);
        let n_strategies = rng.random_range(2..11);
        let mut params = PolicyParameters::<f64>::zeros_raw(TaskKind::CharityPersuasion, n_features, n_strategies, "gc".into());
        params.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        params.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let n_steps = rng.random_range(1..4);
        let steps: Vec<Step<f64>> = (0..n_steps)
            .map(|_| Step {
                features: FeatureVector { values: (0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect() },
                action: rng.random_range(0..n_strategies),
            })
            .collect();
        let returns: Vec<f64> = (0..n_steps).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad = reinforce_gradient(&params, &steps, &returns, 0.0).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grad.weights.iter().chain(&grad.bias).copied().collect();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let nw = params.weights.len();
            if i < nw {
                plus.weights[i] += h;
                minus.weights[i] -= h;
            } else {
                plus.bias[i - nw] += h;
                minus.bias[i - nw] -= h;
            }
            let lp = reinforce_loss(&plus, &steps, &returns, 0.0).map_err(|e| e.to_string())?;
            let lm = reinforce_loss(&minus, &steps, &returns, 0.0).map_err(|e| e.to_string())?;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    let elapsed = start.elapsed();
    check(worst < 1e-4 && elapsed < Duration::from_secs(10), format!("max relative error {worst:.2e} over 100 instances, {elapsed:.2?}"))
}

fn softmax_contract() -> Outcomes {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut worst_sum, mut worst_shift) = (0.0f64, 0.0f64);
    let mut argmax_ok = true;
    for _ in 0..1000 {
        let k = rng.random_range(1..16);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shift = rng.random_range(-500.0..500.0);
        let p = softmax(&logits);
        let q = softmax(&logits.iter().map(|l| l + shift).collect::<Vec<_>>());
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        worst_shift = worst_shift.max(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        argmax_ok &= argmax(&p) == argmax(&q) && argmax(&p) == argmax(&logits);
    }
    check(
        worst_sum < 1e-9 && worst_shift < 1e-9 && argmax_ok,
        format!("max |sum-1| {worst_sum:.2e}, max shift drift {worst_shift:.2e}, argmax stable {argmax_ok}"),
    )
}

fn population_sampler() -> Outcomes {
    let population = build_population(TaskKind::PriceNegotiation, 40, &enumerate_personas(), &TemplateRenderer)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let draws = 10_000;
    let mut counts = vec![0usize; population.len()];
    for _ in 0..draws {
        counts[population.sample_index(&mut rng)] += 1;
    }
    let expected = draws as f64 / population.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((population.len() - 1) as f64).unwrap().inverse_cdf(0.95);
    let one_hot = population.one_hot(17).map_err(|e| e.to_string())?;
    let target = &population.members()[17].id;
    let one_hot_ok = (0..1000).all(|_| &sample_simulator(&one_hot, &mut rng).id == target);
    check(
        chi2 < critical && one_hot_ok,
        format!("chi2 {chi2:.2} < {critical:.2} (df 39), one-hot always member 17: {one_hot_ok}"),
    )
}

/// Training setup shared by the tailoring and distance criteria.
fn synthetic_training_config() -> TrainConfig {
    TrainConfig { episodes: 2000, lr: 0.02, seed: 0, checkpoint_every: 250, tom_enabled: true, ..TrainConfig::default() }
}

struct TailoringRun {
    population_params: PolicyParameters<f64>,
    report: String,
    ok: bool,
}

fn tailoring_convergence() -> (Outcomes, Option<PolicyParameters<f64>>) {
    let start = Instant::now();
    let env = SyntheticEnvironment::new(TaskKind::CharityPersuasion);
    let judge = TranscriptJudge::default();
    let ctx = context(env.task, &judge, TomMode::Scripted);
    let layout = ctx.layout;
    let scenarios = [env.scenario()];
    let eval_config = EvalConfig { seed: 2024, repeats: 200, selection: SelectionMode::Greedy };
    let config = synthetic_training_config();

    let run = || -> Result<TailoringRun, String> {
        let pop = train(PolicyParameters::<f64>::zeros(&layout), &env.population(), &scenarios, &ctx, &config, TrainHooks::default())
            .map_err(|e| e.to_string())?;
        let single = train(PolicyParameters::<f64>::zeros(&layout), &env.single(0), &scenarios, &ctx, &config, TrainHooks::default())
            .map_err(|e| e.to_string())?;
        let pop_eval = evaluate(&pop.params, &env.population(), &scenarios, &ctx, &eval_config).map_err(|e| e.to_string())?;
        let single_eval =
            evaluate(&single.params, &env.population(), &scenarios, &ctx, &eval_config).map_err(|e| e.to_string())?;
        let uniform_eval = evaluate(
            &PolicyParameters::<f64>::zeros(&layout),
            &env.population(),
            &scenarios,
            &ctx,
            &EvalConfig { selection: SelectionMode::Sample, ..eval_config.clone() },
        )
        .map_err(|e| e.to_string())?;
        let optimum = env.optimum();
        let uniform_exact = env.uniform_success_rate();
        let row = |r: &stratplan_core::eval::MetricsReport, i: usize| r.per_persona[i].success_rate;
        let gaps: Vec<f64> = (1..3).map(|i| row(&pop_eval.report, i) - row(&single_eval.report, i)).collect();
        let elapsed = start.elapsed();
        let ok = pop_eval.report.success_rate >= 0.75
            && uniform_exact <= 0.5
            && uniform_eval.report.success_rate <= 0.5
            && gaps.iter().all(|g| *g >= 0.15)
            && elapsed < Duration::from_secs(300);
        Ok(TailoringRun {
            population_params: pop.params,
            report: format!(
                "population-trained greedy SR {:.3} (optimum {:.3}), uniform SR {:.3} (exact {:.3}), single-simulator gap on B/C {:.3}/{:.3}, {elapsed:.1?}",
                pop_eval.report.success_rate, optimum.success_rate, uniform_eval.report.success_rate, uniform_exact, gaps[0], gaps[1]
            ),
            ok,
        })
    };
    match run() {
        Ok(r) => (check(r.ok, r.report), Some(r.population_params)),
        Err(e) => (Err(e), None),
    }
}

fn sft_criterion() -> Outcomes {
    let env = SyntheticEnvironment::new(TaskKind::CharityPersuasion);
    let corpus = env.expert_corpus(200, 16);
    let layout = FeatureLayout::for_task(env.task, env.catalog());
    let examples = corpus_examples::<f64>(&corpus, &layout, env.catalog(), &TomMode::Scripted).map_err(|e| e.to_string())?;
    let k = layout.n_strategies;
    let config = SftConfig { epochs: 50, batch_size: 16, lr: 6e-3, weight_decay: 0.01, validation_fraction: 0.1, seed: 3 };
    let report = train_sft(PolicyParameters::zeros(&layout), &examples, &config).map_err(|e| e.to_string())?;
    let initial = report.step_losses[0];
    let ln_k = (k as f64).ln();
    let below = report.epoch_train_loss.iter().position(|l| *l < ln_k / 2.0);
    check(
        k == 10 && (initial - ln_k).abs() < 1e-6 && below.is_some(),
        format!(
            "K={k}, {} examples, initial loss {initial:.9} (ln 10 = {ln_k:.9}), first epoch below ln(10)/2: {:?}, final train loss {:.4}",
            examples.len(),
            below.map(|e| e + 1),
            report.epoch_train_loss.last().unwrap()
        ),
    )
}

/// Encoder mapping each sequence's first strategy to a fixed 2-D point.
struct FixtureEncoder;

impl SequenceEncoder for FixtureEncoder {
    fn id(&self) -> String {
        "fixture".into()
    }

    fn encode(&self, sequence: &[String]) -> Vec<f64> {
        match sequence[0].as_str() {
            "Logical Appeal" => vec![0.0, 0.0],
            "Emotion Appeal" => vec![3.0, 4.0],
            "Credibility Appeal" => vec![6.0, 8.0],
            _ => vec![9.0, 12.0],
        }
    }
}

fn distance_analysis(tailored: Option<&PolicyParameters<f64>>) -> Outcomes {
    let env = SyntheticEnvironment::new(TaskKind::CharityPersuasion);
    let fixture: Vec<EpisodeRecord<f64>> = [
        (0, "Logical Appeal"),
        (0, "Emotion Appeal"),
        (1, "Credibility Appeal"),
        (1, "Foot in the Door"),
    ]
    .iter()
    .map(|(p, s)| {
        let mut r = EpisodeRecord::open("f".into(), &env.scenario(), 10);
        r.persona = Some(env.personas[*p]);
        r.strategy_sequence = vec![s.to_string()];
        r
    })
    .collect();
    let fx = strategy_sequence_distances(&fixture, &FixtureEncoder).map_err(|e| e.to_string())?;
    // intra: |(0,0)-(3,4)| = 5, |(6,8)-(9,12)| = 5; inter: 10, 15, 5, 10
    let fixture_ok = fx.intra_persona == 5.0 && fx.inter_persona == 10.0;

    let Some(tailored) = tailored else {
        return Err("no tailored policy (training failed)".into());
    };
    let judge = TranscriptJudge::default();
    let ctx = context(env.task, &judge, TomMode::Scripted);
    let scenarios = [env.scenario()];
    let encoder = HistogramEncoder::new(env.task, env.catalog());
    let greedy = EvalConfig { seed: 7, repeats: 30, selection: SelectionMode::Greedy };
    let tailored_eval = evaluate(tailored, &env.population(), &scenarios, &ctx, &greedy).map_err(|e| e.to_string())?;
    let t = strategy_sequence_distances(&tailored_eval.records, &encoder).map_err(|e| e.to_string())?;
    let uniform_eval = evaluate(
        &PolicyParameters::<f64>::zeros(&ctx.layout),
        &env.population(),
        &scenarios,
        &ctx,
        &EvalConfig { selection: SelectionMode::Sample, ..greedy },
    )
    .map_err(|e| e.to_string())?;
    let u = strategy_sequence_distances(&uniform_eval.records, &encoder).map_err(|e| e.to_string())?;
    let margin = 0.1;
    check(
        fixture_ok && t.intra_persona < t.inter_persona && t.separates(margin) && !u.separates(margin),
        format!(
            "fixture intra/inter {}/{}; tailored {:.3}/{:.3}; uniform {:.3}/{:.3} (margin {margin})",
            fx.intra_persona, fx.inter_persona, t.intra_persona, t.inter_persona, u.intra_persona, u.inter_persona
        ),
    )
}

fn end_to_end_determinism() -> Outcomes {
    let population = scripted_population(TaskKind::PriceNegotiation, 20, EVAL_INSTANCE_BASE).map_err(|e| e.to_string())?;
    let judge = TranscriptJudge::default();
    let ctx = context(TaskKind::PriceNegotiation, &judge, TomMode::Scripted);
    let mut params = PolicyParameters::<f64>::zeros(&ctx.layout);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    params.weights.iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
    let config = EvalConfig { seed: 31, repeats: 2, selection: SelectionMode::Sample };
    let run = || -> Result<(String, String), String> {
        let out = evaluate(&params, &population, &[Scenario::road_bike()], &ctx, &config).map_err(|e| e.to_string())?;
        Ok((serde_json::to_string(&out.report).unwrap(), to_jsonl(&out.records)))
    };
    let (a_report, a_archive) = run()?;
    let (b_report, b_archive) = run()?;
    check(
        a_report == b_report && a_archive == b_archive,
        format!("20 simulators x 2 repeats, report {} bytes, archive {} bytes, identical", a_report.len(), a_archive.len()),
    )
}

fn reward_assembly() -> Outcomes {
    let catalog = Catalog::bundled();
    let judge = TranscriptJudge::default();
    let mut notes = Vec::new();
    let mut ok = true;

    // persuasion: immovable user, then a user who donates after two matched turns
    let ctx = context(TaskKind::CharityPersuasion, &judge, TomMode::Off);
    let mut profile = ScriptedProfile::generate(TaskKind::CharityPersuasion, enumerate_personas()[0], 0, catalog);
    profile.susceptibility.values_mut().for_each(|v| *v = 0.0);
    profile.response_table.iter_mut().for_each(|e| e.delta = 0.5);
    let mut params = PolicyParameters::<f64>::zeros(&ctx.layout);
    params.bias[catalog.strategy_index(TaskKind::CharityPersuasion, "Emotion Appeal").unwrap()] = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fail = run_episode(&params, &SimulatorSpec::scripted(profile.clone(), catalog), &Scenario::save_the_children(), &ctx, &mut rng, "p4g-fail".into())
        .map_err(|e| e.to_string())?;
    let mut expected = vec![-0.1; 9];
    expected.push(-1.0);
    ok &= fail.record.per_turn_rewards == expected && fail.record.outcome.outcome == Outcome::FailureMaxTurns;
    profile.susceptibility.insert("Emotion Appeal".into(), 1.0);
    let win = run_episode(&params, &SimulatorSpec::scripted(profile, catalog), &Scenario::save_the_children(), &ctx, &mut rng, "p4g-win".into())
        .map_err(|e| e.to_string())?;
    ok &= win.record.per_turn_rewards == vec![-0.1, 1.0] && win.record.outcome.outcome == Outcome::SuccessDonation;
    notes.push(format!("P4G failure {:?} / donation {:?}", fail.record.per_turn_rewards.last(), win.record.per_turn_rewards));

    // negotiation: a seller who accepts $200 on the second turn, and one who never does
    let ctx = context(TaskKind::PriceNegotiation, &judge, TomMode::Off);
    let params = PolicyParameters::<f64>::zeros(&ctx.layout);
    let seller = |accept: bool| -> Arc<dyn LlmBackend> {
        Arc::new(FnBackend::new("seller", move |req: &CompletionRequest, _| -> Result<String, GatewayError> {
            let agent_turns = req.messages.iter().filter(|(r, _)| *r == Role::User).count();
            Ok(if accept && agent_turns >= 2 { "Fine, I accept $200.".into() } else { "I need $285.".into() })
        }))
    };
    let spec = |accept: bool| {
        let persona = stratplan_core::catalog::render_persona_description(enumerate_personas()[0]);
        SimulatorSpec::new("seller".into(), persona, TaskKind::PriceNegotiation, SimulatorBackend::LlmBacked(seller(accept)), catalog)
    };
    let deal = run_episode(&params, &spec(true), &Scenario::road_bike(), &ctx, &mut rng, "cb-deal".into()).map_err(|e| e.to_string())?;
    let sl = 85.0 / 143.0;
    ok &= deal.record.per_turn_rewards == vec![-0.1, sl] && deal.record.deal_price == Some(Money::from_dollars(200));
    let nodeal = run_episode(&params, &spec(false), &Scenario::road_bike(), &ctx, &mut rng, "cb-fail".into()).map_err(|e| e.to_string())?;
    ok &= nodeal.record.per_turn_rewards.len() == 10
        && nodeal.record.per_turn_rewards[..9].iter().all(|r| *r == -0.1)
        && nodeal.record.per_turn_rewards[9] == -1.0;
    notes.push(format!("CB deal {:?} / failure {:?}", deal.record.per_turn_rewards, nodeal.record.per_turn_rewards.last()));
    check(ok, notes.join("; "))
}

fn main() {
    let overall = Instant::now();
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcomes| {
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    };
    report("sale-to-list ratio oracle", sl_oracle());
    report("discounted returns oracle", returns_oracle());
    report("policy gradient check", gradient_check());
    report("softmax contract", softmax_contract());
    report("population sampler", population_sampler());
    let (tailoring, tailored) = tailoring_convergence();
    report("tailoring convergence", tailoring);
    report("supervised initialization", sft_criterion());
    report("strategy-sequence distances", distance_analysis(tailored.as_ref()));
    report("end-to-end determinism", end_to_end_determinism());
    report("reward assembly", reward_assembly());
    println!("acceptance: {} criteria failed, {:.1?} total", failures, overall.elapsed());
    if failures > 0 {
        std::process::exit(1);
    }
}
