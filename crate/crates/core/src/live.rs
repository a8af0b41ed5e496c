//! Turn-by-turn dialogues where a person plays the user.
//!
//! The agent speaks first. Each user message is followed by goal detection
//! and, if the dialogue goes on, the agent's next utterance.

use rand::Rng;

use crate::catalog::TaskKind;
use crate::dialogue::{DialogueState, Outcome, Scenario, TerminationStatus, Utterance};
use crate::planner::PolicyParameters;
use crate::reward::{discounted_returns, turn_reward, GoalQuery, RewardError};
use crate::scalar::Scalar;
use crate::trainer::{assess_turn, plan_agent_move, EpisodeContext, EpisodeRecord, EpisodeSource, TurnError};

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("dialogue already ended: {0:?}")]
    Terminal(Outcome),
    #[error("message text is empty")]
    EmptyText,
    #[error("policy is for {policy}, scenario for {scenario}")]
    TaskMismatch { policy: TaskKind, scenario: TaskKind },
    #[error("declared outcome {0:?} does not fit this task")]
    BadDeclaration(Outcome),
    #[error(transparent)]
    Turn(#[from] TurnError),
}

/// Result of one user message.
#[derive(Clone, Debug, PartialEq)]
pub struct Exchange<T> {
    pub user: Utterance,
    /// `None` when the user's message ended the dialogue.
    pub agent: Option<Utterance>,
    pub status: TerminationStatus,
    pub sl_ratio: Option<T>,
}

#[derive(Clone, Debug)]
pub struct LiveDialogue<T> {
    pub state: DialogueState,
    record: EpisodeRecord<T>,
    closed: bool,
}

impl<T: Scalar> LiveDialogue<T> {
    /// Opens the dialogue and produces the agent's first utterance.
    pub fn start(
        id: String,
        params: &PolicyParameters<T>,
        scenario: Scenario,
        ctx: &EpisodeContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<(Self, Utterance), LiveError> {
        if params.task != scenario.task() {
            return Err(LiveError::TaskMismatch { policy: params.task, scenario: scenario.task() });
        }
        let mut record = EpisodeRecord::open(id, &scenario, ctx.max_turns);
        record.source = EpisodeSource::Human;
        let mut live = LiveDialogue { state: DialogueState::new(scenario, ctx.max_turns), record, closed: false };
        let opening = live.agent_turn(params, ctx, rng)?;
        Ok((live, opening))
    }

    fn agent_turn(&mut self, params: &PolicyParameters<T>, ctx: &EpisodeContext<'_>, rng: &mut impl Rng) -> Result<Utterance, LiveError> {
        let m = plan_agent_move(params, &self.state, ctx, rng)?;
        self.record.tom_truncations += m.truncated;
        self.state = m.state;
        Ok(self.state.history.last().cloned().expect("agent utterance"))
    }

    pub fn is_closed(&self) -> bool {
        self.closed || self.state.status.is_terminal()
    }

    pub fn sl_ratio(&self) -> Option<T> {
        self.record.sl_ratio
    }

    /// Appends the user's message, checks the goal, and lets the agent reply
    /// if the dialogue continues.
    pub fn user_message(
        &mut self,
        text: &str,
        params: &PolicyParameters<T>,
        ctx: &EpisodeContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<Exchange<T>, LiveError> {
        if self.is_closed() {
            return Err(LiveError::Terminal(self.state.status));
        }
        if text.trim().is_empty() {
            return Err(LiveError::EmptyText);
        }
        let state = self.state.advance_with(Utterance::user(text.trim(), None), ctx.catalog).map_err(TurnError::from)?;
        let user = state.history.last().cloned().expect("user utterance");
        let query = match state.task() {
            TaskKind::PriceNegotiation => GoalQuery::DealJudge { judge: ctx.judge },
            TaskKind::CharityPersuasion => GoalQuery::AskSimulator { simulator: ctx.judge, system_prompt: None },
        };
        let turn = assess_turn::<T>(&state, query, ctx)?;
        self.state = state;
        self.record.per_turn_rewards.push(turn.reward);
        if turn.status.terminal {
            self.record.sl_ratio = turn.sl_ratio;
            self.state = self.state.conclude(turn.status);
            return Ok(Exchange { user, agent: None, status: turn.status, sl_ratio: turn.sl_ratio });
        }
        let agent = self.agent_turn(params, ctx, rng)?;
        Ok(Exchange { user, agent: Some(agent), status: turn.status, sl_ratio: None })
    }

    /// Ends the dialogue with an outcome declared from outside, replacing
    /// the last turn's reward with the matching terminal reward.
    pub fn declare(&mut self, outcome: Outcome, ctx: &EpisodeContext<'_>) -> Result<TerminationStatus, LiveError> {
        if self.is_closed() {
            return Err(LiveError::Terminal(self.state.status));
        }
        let task = self.state.task();
        let fits = match outcome {
            Outcome::SuccessDeal { .. } => task == TaskKind::PriceNegotiation,
            Outcome::SuccessDonation => task == TaskKind::CharityPersuasion,
            Outcome::FailureMaxTurns => true,
            Outcome::Ongoing => false,
        };
        if !fits {
            return Err(LiveError::BadDeclaration(outcome));
        }
        let status = TerminationStatus::from(outcome);
        let sl = match (outcome, self.state.scenario.targets()) {
            (Outcome::SuccessDeal { deal_price }, Some((seller, buyer))) => {
                Some(crate::dialogue::sale_to_list_ratio::<T>(deal_price, seller, buyer).map_err(TurnError::from)?)
            }
            _ => None,
        };
        let reward = turn_reward(task, &status, sl, &ctx.reward).map_err(|e: RewardError| TurnError::Reward(e))?;
        match self.record.per_turn_rewards.last_mut() {
            Some(last) if self.state.next_speaker() == crate::dialogue::Speaker::Agent => *last = reward,
            _ => self.record.per_turn_rewards.push(reward),
        }
        self.record.sl_ratio = sl;
        self.state = self.state.conclude(status);
        Ok(status)
    }

    /// Closes without an outcome; the record is marked incomplete.
    pub fn abandon(&mut self) {
        self.closed = true;
    }

    /// Archive record of the dialogue so far.
    pub fn record(&self, ctx: &EpisodeContext<'_>) -> EpisodeRecord<T> {
        let mut record = self.record.clone();
        record.returns = discounted_returns(&record.per_turn_rewards, T::of(ctx.gamma), ctx.reward.discount);
        record.sync_with(&self.state);
        record.complete = self.state.status.is_terminal();
        record
    }
}
