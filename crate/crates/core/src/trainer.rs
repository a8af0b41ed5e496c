//! Episode rollouts and population-based REINFORCE.
//!
//! The update minimizes `L = −Σ_t log π(a_t | x_t)·(R_t − b)` by gradient
//! descent, which is gradient ascent on expected return. `b` is an optional
//! constant baseline, zero by default.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentVoice;
use crate::catalog::{Catalog, CatalogError, PersonaCategory, TaskKind};
use crate::dialogue::{
    is_terminal, sale_to_list_ratio, DialogueError, DialogueState, Money, Outcome, Scenario, Speaker, TerminationStatus, Utterance,
    DEFAULT_MAX_TURNS,
};
use crate::eval::MetricsReport;
use crate::gateway::{self, GatewayError, LlmBackend};
use crate::planner::{
    accumulate_log_prob_gradient, encode_features, policy_distribution, select_strategy, FeatureLayout, FeatureVector,
    Gradient, PlannerError, PolicyParameters, SelectionMode,
};
use crate::reward::{
    detect_goal, discounted_returns, turn_reward, DiscountConvention, GoalQuery, JudgeOptions, RewardConfig, RewardError,
};
use crate::scalar::Scalar;
use crate::simulator::{build_simulator_prompt, Population, ScriptedUser, SimulatorBackend, SimulatorSpec};
use crate::tom::TomMode;
use crate::util::derive_seed;

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSource {
    #[default]
    Simulated,
    Human,
}

/// One finished (or abandoned) dialogue with its rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct EpisodeRecord<T> {
    pub schema_version: u32,
    pub episode_id: String,
    pub source: EpisodeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<PersonaCategory>,
    pub scenario_id: String,
    pub task: TaskKind,
    pub transcript: Vec<Utterance>,
    pub strategy_sequence: Vec<String>,
    pub resisting_sequence: Vec<String>,
    pub per_turn_rewards: Vec<T>,
    pub returns: Vec<T>,
    pub outcome: TerminationStatus,
    pub turns: u32,
    pub max_turns: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deal_price: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sl_ratio: Option<T>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    /// Utterances dropped from inference prompts to fit the context budget.
    #[serde(default)]
    pub tom_truncations: usize,
    /// False for sessions that expired or were abandoned before ending.
    pub complete: bool,
}

impl<T: Scalar> EpisodeRecord<T> {
    /// Record for a dialogue that has not produced any reward yet.
    pub fn open(episode_id: String, scenario: &Scenario, max_turns: u32) -> Self {
        EpisodeRecord {
            schema_version: EPISODE_SCHEMA_VERSION,
            episode_id,
            source: EpisodeSource::Simulated,
            simulator_id: None,
            persona: None,
            scenario_id: scenario.id.clone(),
            task: scenario.task(),
            transcript: Vec::new(),
            strategy_sequence: Vec::new(),
            resisting_sequence: Vec::new(),
            per_turn_rewards: Vec::new(),
            returns: Vec::new(),
            outcome: Outcome::Ongoing.into(),
            turns: 0,
            max_turns,
            deal_price: None,
            sl_ratio: None,
            valid: true,
            invalid_reason: None,
            tom_truncations: 0,
            complete: false,
        }
    }

    /// Copies transcript-derived fields from `state`.
    pub fn sync_with(&mut self, state: &DialogueState) {
        self.transcript = state.history.clone();
        self.strategy_sequence = state.agent_strategies().map(str::to_string).collect();
        self.resisting_sequence = state
            .history
            .iter()
            .filter(|u| u.speaker == Speaker::User)
            .filter_map(|u| u.resisting_strategy.clone())
            .collect();
        self.turns = state.turn_count;
        self.outcome = state.status.into();
        self.deal_price = match state.status {
            Outcome::SuccessDeal { deal_price } => Some(deal_price),
            _ => None,
        };
    }

    pub fn mark_invalid(&mut self, reason: impl Into<String>) {
        self.valid = false;
        self.invalid_reason = Some(reason.into());
    }

    pub fn is_success(&self) -> bool {
        self.outcome.outcome.is_success()
    }
}

/// Planner input and chosen action of one agent turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Step<T> {
    pub features: FeatureVector<T>,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<T> {
    pub record: EpisodeRecord<T>,
    pub steps: Vec<Step<T>>,
}

/// Everything an episode needs besides the policy, simulator and scenario.
#[derive(Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub catalog: &'a Catalog,
    pub layout: FeatureLayout,
    pub voice: &'a dyn AgentVoice,
    pub tom: TomMode<'a>,
    /// Deal judge, and donation judge for scripted simulators.
    pub judge: &'a dyn LlmBackend,
    pub judge_options: JudgeOptions,
    pub reward: RewardConfig,
    pub gamma: f64,
    pub max_turns: u32,
    pub selection: SelectionMode,
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("simulator is for {simulator}, scenario for {scenario}, policy for {policy}")]
    TaskMismatch { simulator: TaskKind, scenario: TaskKind, policy: TaskKind },
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// Goal query and simulator reply for one user turn.
fn simulator_turn(
    spec: &SimulatorSpec,
    user: &mut Option<ScriptedUser<'_>>,
    state: &DialogueState,
    strategy: &str,
    catalog: &Catalog,
    rng: &mut impl Rng,
) -> Result<(Utterance, Option<String>), String> {
    match (&spec.backend, user) {
        (SimulatorBackend::Scripted(_), Some(user)) => Ok((user.respond(state, strategy, rng), None)),
        (SimulatorBackend::LlmBacked(backend), _) => {
            let request = build_simulator_prompt(spec, &state.scenario, &state.history, catalog).map_err(|e| e.to_string())?;
            let reply = gateway::complete(&request, backend.as_ref()).map_err(|e| e.to_string())?;
            let text = reply.samples.into_iter().next().unwrap_or_default().trim().to_string();
            if text.is_empty() {
                return Err("simulator returned an empty reply".into());
            }
            Ok((Utterance::user(text, None), Some(request.system_prompt)))
        }
        (SimulatorBackend::Scripted(_), None) => Err("scripted simulator without state".into()),
    }
}

/// Failure inside one turn of a dialogue.
#[derive(Debug, thiserror::Error)]
pub enum TurnError {
    #[error("user-state inference: {0}")]
    Inference(GatewayError),
    #[error("agent voice: {0}")]
    Voice(GatewayError),
    #[error("goal detection: {0}")]
    Goal(RewardError),
    #[error(transparent)]
    Reward(RewardError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// The agent's utterance for one turn and the planner step behind it.
#[derive(Clone, Debug)]
pub struct AgentMove<T> {
    pub state: DialogueState,
    pub step: Step<T>,
    /// Utterances dropped from the inference prompt.
    pub truncated: usize,
}

/// Infers the user state, picks a strategy and voices it.
pub fn plan_agent_move<T: Scalar>(
    params: &PolicyParameters<T>,
    state: &DialogueState,
    ctx: &EpisodeContext<'_>,
    rng: &mut impl Rng,
) -> Result<AgentMove<T>, TurnError> {
    let task = state.task();
    let (mental, truncated) = ctx.tom.infer(&state.history, task).map_err(TurnError::Inference)?;
    let features = encode_features(&state.history, &mental, &ctx.layout, ctx.catalog);
    let distribution = policy_distribution(params, &features)?;
    let action = select_strategy(&distribution, ctx.selection, rng);
    let strategy = &ctx.catalog.agent_strategies(task)[action].name;
    let text = ctx.voice.utter(state, strategy, ctx.catalog).map_err(TurnError::Voice)?;
    let state = state.advance_with(Utterance::agent(text, strategy.clone()), ctx.catalog)?;
    Ok(AgentMove { state, step: Step { features, action }, truncated })
}

/// Verdict and reward after the user's reply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TurnAssessment<T> {
    pub status: TerminationStatus,
    pub sl_ratio: Option<T>,
    pub reward: T,
}

/// Runs goal detection on `state` and assembles the turn reward.
pub fn assess_turn<T: Scalar>(
    state: &DialogueState,
    query: GoalQuery<'_>,
    ctx: &EpisodeContext<'_>,
) -> Result<TurnAssessment<T>, TurnError> {
    let goal = detect_goal(state, query, ctx.catalog, ctx.judge_options).map_err(TurnError::Goal)?;
    let status = is_terminal(state, &goal);
    let sl_ratio = match (status.outcome, state.scenario.targets()) {
        (Outcome::SuccessDeal { deal_price }, Some((seller, buyer))) => Some(sale_to_list_ratio::<T>(deal_price, seller, buyer)?),
        _ => None,
    };
    let reward = turn_reward(state.task(), &status, sl_ratio, &ctx.reward).map_err(TurnError::Reward)?;
    Ok(TurnAssessment { status, sl_ratio, reward })
}

/// Plays one dialogue. Backend failures end the episode early and mark it
/// invalid; they are not returned as errors.
pub fn run_episode<T: Scalar>(
    params: &PolicyParameters<T>,
    simulator: &SimulatorSpec,
    scenario: &Scenario,
    ctx: &EpisodeContext<'_>,
    rng: &mut impl Rng,
    episode_id: String,
) -> Result<Rollout<T>, EpisodeError> {
    let task = scenario.task();
    if simulator.task != task || params.task != task {
        return Err(EpisodeError::TaskMismatch { simulator: simulator.task, scenario: task, policy: params.task });
    }
    let mut record = EpisodeRecord::open(episode_id, scenario, ctx.max_turns);
    record.simulator_id = Some(simulator.id.clone());
    record.persona = Some(simulator.category());
    let mut steps = Vec::new();
    let mut state = DialogueState::new(scenario.clone(), ctx.max_turns);
    let mut user = simulator.scripted_profile().map(ScriptedUser::new);

    while !state.status.is_terminal() {
        let strategy = match plan_agent_move(params, &state, ctx, rng) {
            Ok(m) => {
                record.tom_truncations += m.truncated;
                state = m.state;
                steps.push(m.step);
                state.history.last().and_then(|u| u.agent_strategy.clone()).unwrap_or_default()
            }
            Err(TurnError::Planner(e)) => return Err(e.into()),
            Err(e) => {
                record.mark_invalid(e.to_string());
                break;
            }
        };

        let (reply, sim_prompt) = match simulator_turn(simulator, &mut user, &state, &strategy, ctx.catalog, rng) {
            Ok(r) => r,
            Err(e) => {
                record.mark_invalid(format!("simulator: {e}"));
                break;
            }
        };
        state = match state.advance_with(reply, ctx.catalog) {
            Ok(s) => s,
            Err(e) => {
                record.mark_invalid(e.to_string());
                break;
            }
        };

        let query = match (task, &simulator.backend) {
            (TaskKind::PriceNegotiation, _) => GoalQuery::DealJudge { judge: ctx.judge },
            (TaskKind::CharityPersuasion, SimulatorBackend::LlmBacked(b)) => {
                GoalQuery::AskSimulator { simulator: b.as_ref(), system_prompt: sim_prompt.as_deref() }
            }
            (TaskKind::CharityPersuasion, SimulatorBackend::Scripted(_)) => {
                GoalQuery::AskSimulator { simulator: ctx.judge, system_prompt: None }
            }
        };
        let turn = match assess_turn::<T>(&state, query, ctx) {
            Ok(t) => t,
            Err(TurnError::Planner(e)) => return Err(e.into()),
            Err(e) => {
                record.mark_invalid(e.to_string());
                break;
            }
        };
        record.per_turn_rewards.push(turn.reward);
        if turn.status.terminal {
            record.sl_ratio = turn.sl_ratio;
            state = state.conclude(turn.status);
        }
    }

    // a rollout cut short has an unfinished last step with no reward
    steps.truncate(record.per_turn_rewards.len());
    record.returns = discounted_returns(&record.per_turn_rewards, T::of(ctx.gamma), ctx.reward.discount);
    record.sync_with(&state);
    record.complete = record.valid && state.status.is_terminal();
    Ok(Rollout { record, steps })
}

/// `L = −Σ_t log π(a_t | x_t)·(R_t − baseline)`.
pub fn reinforce_loss<T: Scalar>(
    params: &PolicyParameters<T>,
    steps: &[Step<T>],
    returns: &[T],
    baseline: T,
) -> Result<T, PlannerError> {
    let mut loss = T::zero();
    for (step, ret) in steps.iter().zip(returns) {
        let probs = policy_distribution(params, &step.features)?;
        loss = loss - probs[step.action].ln() * (*ret - baseline);
    }
    Ok(loss)
}

/// Gradient of [`reinforce_loss`].
pub fn reinforce_gradient<T: Scalar>(
    params: &PolicyParameters<T>,
    steps: &[Step<T>],
    returns: &[T],
    baseline: T,
) -> Result<Gradient<T>, PlannerError> {
    let mut grad = Gradient::zeros_like(params);
    for (step, ret) in steps.iter().zip(returns) {
        accumulate_log_prob_gradient(params, &step.features, step.action, -(*ret - baseline), &mut grad)?;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    SkippedInvalid,
    SkippedNonFinite,
}

/// One descent step `θ ← θ − lr·∇L`. Invalid episodes and non-finite
/// gradients leave `params` untouched.
pub fn reinforce_update<T: Scalar>(
    params: &mut PolicyParameters<T>,
    rollout: &Rollout<T>,
    lr: T,
    baseline: T,
) -> Result<UpdateOutcome, PlannerError> {
    if !rollout.record.valid {
        return Ok(UpdateOutcome::SkippedInvalid);
    }
    let grad = reinforce_gradient(params, &rollout.steps, &rollout.record.returns, baseline)?;
    if !grad.is_finite() {
        return Ok(UpdateOutcome::SkippedNonFinite);
    }
    let next_w: Vec<T> = params.weights.iter().zip(&grad.weights).map(|(w, g)| *w - lr * *g).collect();
    let next_b: Vec<T> = params.bias.iter().zip(&grad.bias).map(|(b, g)| *b - lr * *g).collect();
    if next_w.iter().chain(&next_b).any(|v| !v.is_finite()) {
        return Ok(UpdateOutcome::SkippedNonFinite);
    }
    params.weights = next_w;
    params.bias = next_b;
    params.version += 1;
    Ok(UpdateOutcome::Applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub gamma: f64,
    pub max_turns: u32,
    pub tom_enabled: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Constant baseline subtracted from returns; `None` is plain REINFORCE.
    pub baseline: Option<f64>,
    pub discount: DiscountConvention,
    pub stack_turn_penalty: bool,
    /// Start from a supervised checkpoint when one is supplied.
    pub sft_init: bool,
    /// Abort when more than this share of episodes is invalid...
    pub max_invalid_rate: f64,
    /// ...once at least this many episodes have run.
    pub min_episodes_before_abort: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            lr: 1e-6,
            gamma: 0.999,
            max_turns: DEFAULT_MAX_TURNS,
            tom_enabled: true,
            seed: 0,
            checkpoint_every: 100,
            baseline: None,
            discount: DiscountConvention::FinalTurnExponent,
            stack_turn_penalty: false,
            sft_init: true,
            max_invalid_rate: 0.5,
            min_episodes_before_abort: 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("aborted after {episodes} episodes: {invalid} invalid (last: {last_error})")]
    Aborted { episodes: usize, invalid: usize, last_error: String },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.episodes == 0 {
            return Err(TrainError::Config("episodes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.max_turns == 0 {
            return Err(TrainError::Config("max_turns must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::catalog::sha256_hex(serde_json::to_string(self).unwrap().as_bytes())
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig { stack_turn_penalty: self.stack_turn_penalty, discount: self.discount }
    }
}

/// Aggregate metrics of one window of training episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Episodes completed when the point was taken.
    pub episode: usize,
    pub success_rate: f64,
    pub average_turns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_sl_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub params: PolicyParameters<T>,
    pub curve: Vec<CurvePoint>,
    pub records: Vec<EpisodeRecord<T>>,
    pub invalid_episodes: usize,
    pub skipped_updates: usize,
    pub interrupted: bool,
}

/// Optional training callbacks.
pub struct TrainHooks<'a, T> {
    /// Called every `checkpoint_every` episodes and at the end.
    pub on_checkpoint: Option<&'a mut dyn FnMut(usize, &PolicyParameters<T>)>,
    /// Checked between episodes; when set, training stops early.
    pub stop: Option<&'a AtomicBool>,
}

impl<T> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        TrainHooks { on_checkpoint: None, stop: None }
    }
}

/// Seed of the simulator-sampling stream.
pub fn sampling_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0x5a3b])
}

/// Seed of episode `i`'s own stream.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[0xe915, i as u64])
}

/// Samples a simulator from the population's fixed distribution, rolls out
/// an episode with sampled strategies and applies one update per valid
/// episode. Simulator draws and episodes use separate RNG streams, so a
/// one-hot population and a single-member population yield identical
/// episodes under the same seed.
pub fn train<T: Scalar>(
    mut params: PolicyParameters<T>,
    population: &Population,
    scenarios: &[Scenario],
    ctx: &EpisodeContext<'_>,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_, T>,
) -> Result<TrainReport<T>, TrainError> {
    config.validate()?;
    if scenarios.is_empty() {
        return Err(TrainError::Config("no scenarios".into()));
    }
    let mut ctx = *ctx;
    ctx.gamma = config.gamma;
    ctx.max_turns = config.max_turns;
    ctx.reward = config.reward_config();
    ctx.selection = SelectionMode::Sample;
    if !config.tom_enabled {
        ctx.tom = TomMode::Off;
    }
    let lr = T::of(config.lr);
    let baseline = T::of(config.baseline.unwrap_or(0.0));
    let mut sampler = ChaCha8Rng::seed_from_u64(sampling_seed(config.seed));
    let mut report = TrainReport {
        params: params.clone(),
        curve: Vec::new(),
        records: Vec::with_capacity(config.episodes),
        invalid_episodes: 0,
        skipped_updates: 0,
        interrupted: false,
    };
    let every = config.checkpoint_every.max(1);
    let mut window_start = 0;
    let mut last_error = String::new();

    for i in 0..config.episodes {
        if hooks.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            report.interrupted = true;
            break;
        }
        let member = population.sample_index(&mut sampler);
        let scenario = &scenarios[sampler.random_range(0..scenarios.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(config.seed, i));
        let rollout = run_episode(&params, &population.members()[member], scenario, &ctx, &mut rng, format!("train-{i}"))?;
        match reinforce_update(&mut params, &rollout, lr, baseline)? {
            UpdateOutcome::Applied => {}
            UpdateOutcome::SkippedInvalid => {
                report.invalid_episodes += 1;
                last_error = rollout.record.invalid_reason.clone().unwrap_or_default();
            }
            UpdateOutcome::SkippedNonFinite => report.skipped_updates += 1,
        }
        report.records.push(rollout.record);
        let done = i + 1;
        if done >= config.min_episodes_before_abort
            && report.invalid_episodes as f64 > config.max_invalid_rate * done as f64
        {
            return Err(TrainError::Aborted { episodes: done, invalid: report.invalid_episodes, last_error });
        }
        if done % every == 0 {
            report.curve.push(curve_point(done, &report.records[window_start..]));
            window_start = done;
            if let Some(cb) = hooks.on_checkpoint.as_mut() {
                cb(done, &params);
            }
        }
    }
    let done = report.records.len();
    if window_start < done {
        report.curve.push(curve_point(done, &report.records[window_start..]));
        if let Some(cb) = hooks.on_checkpoint.as_mut() {
            cb(done, &params);
        }
    }
    report.params = params;
    Ok(report)
}

fn curve_point<T: Scalar>(episode: usize, window: &[EpisodeRecord<T>]) -> CurvePoint {
    let m = MetricsReport::from_records(window);
    CurvePoint { episode, success_rate: m.success_rate, average_turns: m.average_turns, mean_sl_ratio: m.mean_sl_ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TemplateVoice;
    use crate::catalog::{BigFive, DecisionStyle};
    use crate::reward::TranscriptJudge;
    use crate::simulator::{AcceptanceRule, ScriptedProfile};

    fn profile(susceptibility: f64) -> ScriptedProfile {
        let mut p = ScriptedProfile::generate(
            TaskKind::CharityPersuasion,
            PersonaCategory::new(BigFive::Openness, DecisionStyle::Analytical),
            0,
            Catalog::bundled(),
        );
        for v in p.susceptibility.values_mut() {
            *v = 0.0;
        }
        p.susceptibility.insert("Emotion Appeal".into(), susceptibility);
        for e in &mut p.response_table {
            e.delta = 0.5;
        }
        p.acceptance = AcceptanceRule::Threshold { threshold: 1.0 };
        p
    }

    fn ctx<'a>(layout: FeatureLayout, judge: &'a TranscriptJudge) -> EpisodeContext<'a> {
        EpisodeContext {
            catalog: Catalog::bundled(),
            layout,
            voice: &TemplateVoice,
            tom: TomMode::Off,
            judge,
            judge_options: JudgeOptions::default(),
            reward: RewardConfig::default(),
            gamma: 0.999,
            max_turns: 10,
            selection: SelectionMode::Greedy,
        }
    }

    /// Policy that always picks `strategy`.
    fn fixed_policy(layout: &FeatureLayout, strategy: &str) -> PolicyParameters<f64> {
        let mut p = PolicyParameters::zeros(layout);
        let k = Catalog::bundled().strategy_index(layout.task, strategy).unwrap();
        p.bias[k] = 10.0;
        p
    }

    #[test]
    fn immovable_simulator_fails_after_ten_turns() {
        let layout = FeatureLayout::for_task(TaskKind::CharityPersuasion, Catalog::bundled());
        let judge = TranscriptJudge::default();
        let spec = SimulatorSpec::scripted(profile(0.0), Catalog::bundled());
        let params = fixed_policy(&layout, "Emotion Appeal");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = run_episode(&params, &spec, &Scenario::save_the_children(), &ctx(layout, &judge), &mut rng, "e".into()).unwrap();
        assert_eq!(r.record.outcome.outcome, Outcome::FailureMaxTurns);
        assert_eq!(r.record.turns, 10);
        let mut expected = vec![-0.1; 9];
        expected.push(-1.0);
        assert_eq!(r.record.per_turn_rewards, expected);
        assert_eq!(r.steps.len(), 10);
        assert_eq!(r.record.strategy_sequence.len(), 10);
    }

    #[test]
    fn matched_policy_gets_donation_on_turn_two() {
        let layout = FeatureLayout::for_task(TaskKind::CharityPersuasion, Catalog::bundled());
        let judge = TranscriptJudge::default();
        let spec = SimulatorSpec::scripted(profile(1.0), Catalog::bundled());
        let params = fixed_policy(&layout, "Emotion Appeal");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = run_episode(&params, &spec, &Scenario::save_the_children(), &ctx(layout, &judge), &mut rng, "e".into()).unwrap();
        assert_eq!(r.record.outcome.outcome, Outcome::SuccessDonation);
        assert_eq!(r.record.turns, 2);
        assert_eq!(r.record.per_turn_rewards, vec![-0.1, 1.0]);
        assert!(r.record.complete && r.record.valid);
    }

    #[test]
    fn episodes_are_reproducible() {
        let layout = FeatureLayout::for_task(TaskKind::PriceNegotiation, Catalog::bundled());
        let judge = TranscriptJudge::default();
        let spec = SimulatorSpec::scripted(
            ScriptedProfile::generate(TaskKind::PriceNegotiation, PersonaCategory::from_index(3).unwrap(), 0, Catalog::bundled()),
            Catalog::bundled(),
        );
        let params = PolicyParameters::<f64>::zeros(&layout);
        let mut c = ctx(layout, &judge);
        c.selection = SelectionMode::Sample;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            run_episode(&params, &spec, &Scenario::road_bike(), &c, &mut rng, "e".into()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_returns_leave_params_unchanged() {
        let layout = FeatureLayout::for_task(TaskKind::CharityPersuasion, Catalog::bundled());
        let mut params = PolicyParameters::<f64>::zeros(&layout);
        params.weights[3] = 0.25;
        let before = params.clone();
        let mut record = EpisodeRecord::open("e".into(), &Scenario::save_the_children(), 10);
        record.returns = vec![0.0, 0.0];
        let x = FeatureVector::from_f64(&vec![0.5; layout.dim()]);
        let rollout = Rollout { record, steps: vec![Step { features: x.clone(), action: 1 }, Step { features: x, action: 2 }] };
        reinforce_update(&mut params, &rollout, 0.1, 0.0).unwrap();
        assert_eq!(params.weights, before.weights);
        assert_eq!(params.bias, before.bias);
    }

    #[test]
    fn positive_return_raises_chosen_probability() {
        let mut params = PolicyParameters::<f64>::zeros_raw(TaskKind::CharityPersuasion, 2, 2, "toy".into());
        let x = FeatureVector::from_f64(&[1.0, -0.5]);
        let before = policy_distribution(&params, &x).unwrap()[0];
        let mut record = EpisodeRecord::open("e".into(), &Scenario::save_the_children(), 10);
        record.returns = vec![1.0];
        let rollout = Rollout { record, steps: vec![Step { features: x.clone(), action: 0 }] };
        assert_eq!(reinforce_update(&mut params, &rollout, 0.1, 0.0).unwrap(), UpdateOutcome::Applied);
        assert!(policy_distribution(&params, &x).unwrap()[0] > before);
    }

    #[test]
    fn invalid_episode_is_not_applied() {
        let mut params = PolicyParameters::<f64>::zeros_raw(TaskKind::CharityPersuasion, 2, 2, "toy".into());
        let before = params.clone();
        let mut record = EpisodeRecord::open("e".into(), &Scenario::save_the_children(), 10);
        record.returns = vec![1.0];
        record.mark_invalid("judge");
        let rollout = Rollout { record, steps: vec![Step { features: FeatureVector::from_f64(&[1.0, 1.0]), action: 0 }] };
        assert_eq!(reinforce_update(&mut params, &rollout, 0.1, 0.0).unwrap(), UpdateOutcome::SkippedInvalid);
        assert_eq!(params, before);
    }

    #[test]
    fn config_parsing_and_validation() {
        let c = TrainConfig::from_toml("episodes = 50\nlr = 0.01\n").unwrap();
        assert_eq!(c.episodes, 50);
        assert_eq!(c.gamma, 0.999);
        assert!(TrainConfig::from_toml("gamma = 1.5").is_err());
        assert!(TrainConfig::from_toml("episodes = 0").is_err());
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
