//! Goal detection, per-turn rewards and discounted returns.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, TaskKind};
use crate::dialogue::{render_transcript, DialogueState, Money, Outcome, Speaker, TerminationStatus};
use crate::gateway::{self, classify_yes_no, tally, Completion, CompletionRequest, GatewayError, LlmBackend, Role};
use crate::scalar::Scalar;

/// Per-turn penalty for dialogues that have not ended yet.
pub const TURN_PENALTY: f64 = -0.1;
/// Reward for running out of turns.
pub const FAILURE_REWARD: f64 = -1.0;
/// Reward for a donation.
pub const DONATION_REWARD: f64 = 1.0;
/// Default number of judge samples per verdict.
pub const JUDGE_SAMPLES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("judge said yes but no agreed price could be extracted from {reply:?}")]
    JudgeInconsistency { reply: String },
    #[error("negotiation success needs a sale-to-list ratio")]
    MissingSaleRatio,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalStatus {
    pub achieved: bool,
    pub deal_price: Option<Money>,
    /// `(yes, no)` sample counts behind the verdict.
    pub judge_votes: (usize, usize),
}

impl GoalStatus {
    pub fn not_achieved() -> Self {
        GoalStatus { achieved: false, deal_price: None, judge_votes: (0, 0) }
    }
}

/// How a goal verdict is obtained for one dialogue.
#[derive(Clone, Copy)]
pub enum GoalQuery<'a> {
    /// Negotiation: a separate judge reads the transcript.
    DealJudge { judge: &'a dyn LlmBackend },
    /// Persuasion: the simulator itself is asked whether it would donate.
    /// `system_prompt` is the simulator's own prompt when it is LLM-backed.
    AskSimulator { simulator: &'a dyn LlmBackend, system_prompt: Option<&'a str> },
}

#[derive(Clone, Copy, Debug)]
pub struct JudgeOptions {
    pub samples: usize,
    pub temperature: f64,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        JudgeOptions { samples: JUDGE_SAMPLES, temperature: CompletionRequest::JUDGE_TEMPERATURE }
    }
}

/// Prompt sent to the deal judge: transcript followed by the pinned question.
pub fn deal_judge_request(state: &DialogueState, catalog: &Catalog, options: JudgeOptions) -> CompletionRequest {
    let body = format!(
        "The following is a conversation between a buyer and a seller.\n{}\n\nQuestion: {}",
        render_transcript(&state.history, state.task()),
        catalog.judge_prompts().deal_question
    );
    CompletionRequest::new(String::new(), vec![(Role::User, body)])
        .expect("single message")
        .with_temperature(options.temperature)
        .with_max_tokens(16)
        .with_samples(options.samples)
}

pub fn price_judge_request(state: &DialogueState, catalog: &Catalog) -> CompletionRequest {
    let prompts = catalog.judge_prompts();
    let body = format!(
        "The following is a conversation between a buyer and a seller.\n{}\n\nQuestion: {} They have. {}",
        render_transcript(&state.history, state.task()),
        prompts.deal_question,
        prompts.price_question
    );
    CompletionRequest::new(String::new(), vec![(Role::User, body)])
        .expect("single message")
        .with_temperature(CompletionRequest::JUDGE_TEMPERATURE)
        .with_max_tokens(16)
}

/// The donation question appended to the simulator's own view of the dialogue.
pub fn donation_request(
    state: &DialogueState,
    catalog: &Catalog,
    system_prompt: Option<&str>,
    options: JudgeOptions,
) -> Result<CompletionRequest, GatewayError> {
    let mut messages: Vec<(Role, String)> = state
        .history
        .iter()
        .map(|u| (if u.speaker == Speaker::Agent { Role::User } else { Role::Assistant }, u.text.clone()))
        .collect();
    messages.push((Role::User, catalog.judge_prompts().donation_question.clone()));
    Ok(CompletionRequest::new(system_prompt.unwrap_or_default().to_string(), messages)?
        .with_temperature(options.temperature)
        .with_max_tokens(16)
        .with_samples(options.samples))
}

fn price_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$?\s*(\d{1,3}(?:,\d{3})+|\d+)(\.\d{1,2})?").unwrap())
}

/// First price-like number in `text`.
pub fn extract_price(text: &str) -> Option<Money> {
    let caps = price_pattern().captures(text)?;
    let whole = caps.get(1)?.as_str();
    let frac = caps.get(2).map(|m| m.as_str()).unwrap_or("");
    format!("{whole}{frac}").parse().ok()
}

/// Asks whether the dialogue goal has been reached after the latest turn.
pub fn detect_goal(
    state: &DialogueState,
    query: GoalQuery<'_>,
    catalog: &Catalog,
    options: JudgeOptions,
) -> Result<GoalStatus, RewardError> {
    match query {
        GoalQuery::DealJudge { judge } => {
            let verdict = gateway::complete(&deal_judge_request(state, catalog, options), judge)?;
            let votes = tally(&verdict.samples, classify_yes_no);
            if votes.0 <= votes.1 {
                return Ok(GoalStatus { achieved: false, deal_price: None, judge_votes: votes });
            }
            let Completion { samples, .. } = gateway::complete(&price_judge_request(state, catalog), judge)?;
            let reply = samples.into_iter().next().unwrap_or_default();
            let price = extract_price(&reply).ok_or(RewardError::JudgeInconsistency { reply })?;
            Ok(GoalStatus { achieved: true, deal_price: Some(price), judge_votes: votes })
        }
        GoalQuery::AskSimulator { simulator, system_prompt } => {
            let request = donation_request(state, catalog, system_prompt, options)?;
            let verdict = gateway::complete(&request, simulator)?;
            let votes = tally(&verdict.samples, classify_yes_no);
            Ok(GoalStatus { achieved: votes.0 > votes.1, deal_price: None, judge_votes: votes })
        }
    }
}

/// Rule-based judge for scripted simulators and live sessions.
///
/// Reads the last user-side line of the dialogue: an explicit acceptance
/// ("deal at $X", "I accept $X", "I would like to donate") is a yes. Answers
/// the deal question, the price follow-up and the donation question.
#[derive(Clone, Debug)]
pub struct TranscriptJudge {
    catalog: &'static Catalog,
}

impl Default for TranscriptJudge {
    fn default() -> Self {
        TranscriptJudge { catalog: Catalog::bundled() }
    }
}

fn deal_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(you have a deal|it'?s a deal|\bdeal at\b|\bi accept\b|\bi'?ll accept\b|\bsold\b|\bwe have a deal\b)")
            .unwrap()
    })
}

fn donation_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(\bi('d| would| will|'ll)? (like to |love to |be happy to )?donate\b|\bcount me in\b|\bi'?m convinced\b)")
            .unwrap()
    })
}

impl TranscriptJudge {
    pub fn is_acceptance(task: TaskKind, text: &str) -> bool {
        match task {
            TaskKind::PriceNegotiation => deal_pattern().is_match(text),
            TaskKind::CharityPersuasion => donation_pattern().is_match(text),
        }
    }

    fn answer(&self, request: &CompletionRequest) -> String {
        let prompts = self.catalog.judge_prompts();
        let last = request.messages.last().map(|(_, m)| m.as_str()).unwrap_or_default();
        if last.contains(&prompts.donation_question) {
            let reply = request
                .messages
                .iter()
                .rev()
                .find(|(r, _)| *r == Role::Assistant)
                .map(|(_, m)| m.as_str())
                .unwrap_or_default();
            return if donation_pattern().is_match(reply) { "Yes".into() } else { "No".into() };
        }
        let seller_line = last.lines().rev().find_map(|l| l.strip_prefix("Seller: ")).unwrap_or_default();
        let accepted = deal_pattern().is_match(seller_line);
        if last.contains(&prompts.price_question) {
            return match (accepted, extract_price(seller_line)) {
                (true, Some(price)) => price.to_string(),
                _ => "unknown".into(),
            };
        }
        if last.contains(&prompts.deal_question) {
            return if accepted { "Yes".into() } else { "No".into() };
        }
        "No".into()
    }
}

impl LlmBackend for TranscriptJudge {
    fn id(&self) -> &str {
        "transcript-judge"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let reply = self.answer(request);
        Ok(Completion { samples: vec![reply; request.sample_count], backend_id: self.id().into(), latency: Default::default() })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountConvention {
    /// `R_t = Σ_{t'≥t} γ^{T−t'} r_{t'}` with `T` the final turn.
    #[default]
    FinalTurnExponent,
    /// `R_t = Σ_{t'≥t} γ^{t'−t} r_{t'}`.
    Conventional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Also charge the per-turn penalty on the terminal turn.
    #[serde(default)]
    pub stack_turn_penalty: bool,
    #[serde(default)]
    pub discount: DiscountConvention,
}

/// Reward for one turn given its termination status.
pub fn turn_reward<T: Scalar>(
    task: TaskKind,
    status: &TerminationStatus,
    sl_ratio: Option<T>,
    config: &RewardConfig,
) -> Result<T, RewardError> {
    let terminal = match status.outcome {
        Outcome::Ongoing => return Ok(T::of(TURN_PENALTY)),
        Outcome::FailureMaxTurns => T::of(FAILURE_REWARD),
        Outcome::SuccessDonation => T::of(DONATION_REWARD),
        Outcome::SuccessDeal { .. } => match task {
            TaskKind::PriceNegotiation => sl_ratio.ok_or(RewardError::MissingSaleRatio)?,
            TaskKind::CharityPersuasion => T::of(DONATION_REWARD),
        },
    };
    if config.stack_turn_penalty {
        Ok(terminal + T::of(TURN_PENALTY))
    } else {
        Ok(terminal)
    }
}

/// Discounted returns for every turn of an episode.
pub fn discounted_returns<T: Scalar>(per_turn: &[T], gamma: T, convention: DiscountConvention) -> Vec<T> {
    let mut returns = vec![T::zero(); per_turn.len()];
    let mut acc = T::zero();
    match convention {
        DiscountConvention::FinalTurnExponent => {
            // the weight γ^{T−t'} depends only on t', so R_t is a suffix sum of weighted rewards
            let mut weight = T::one();
            for (i, r) in per_turn.iter().enumerate().rev() {
                acc = acc + weight * *r;
                returns[i] = acc;
                weight = weight * gamma;
            }
        }
        DiscountConvention::Conventional => {
            for (i, r) in per_turn.iter().enumerate().rev() {
                acc = *r + gamma * acc;
                returns[i] = acc;
            }
        }
    }
    returns
}
