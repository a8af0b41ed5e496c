//! Request and response bodies.

use serde::{Deserialize, Serialize};
use stratplan_core::catalog::TaskKind;
use stratplan_core::dialogue::{Money, Outcome, Scenario, Speaker, TerminationStatus, Utterance};

use crate::error::ApiError;

/// Accepts `cb` / `p4g` as well as the long names.
pub fn parse_task(name: &str) -> Result<TaskKind, ApiError> {
    match name {
        "cb" | "price_negotiation" => Ok(TaskKind::PriceNegotiation),
        "p4g" | "charity_persuasion" => Ok(TaskKind::CharityPersuasion),
        other => Err(ApiError::invalid_request(format!("unknown task {other:?}; expected cb or p4g"))),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub task: String,
    pub checkpoint: String,
    /// Defaults to the task's reference scenario.
    #[serde(default)]
    pub scenario_id: Option<String>,
    /// Overrides the service default.
    #[serde(default)]
    pub tom: Option<bool>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Declared {
    SuccessDeal,
    SuccessDonation,
    Failure,
}

/// Body of `close`. Without an outcome the session is recorded as incomplete.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloseSession {
    #[serde(default)]
    pub outcome: Option<Declared>,
    #[serde(default)]
    pub deal_price: Option<Money>,
}

impl CloseSession {
    pub fn to_outcome(&self) -> Result<Option<Outcome>, ApiError> {
        Ok(match (self.outcome, self.deal_price) {
            (None, None) => None,
            (None, Some(_)) => return Err(ApiError::invalid_outcome("deal_price given without an outcome")),
            (Some(Declared::SuccessDeal), Some(deal_price)) => Some(Outcome::SuccessDeal { deal_price }),
            (Some(Declared::SuccessDeal), None) => return Err(ApiError::invalid_outcome("success_deal needs deal_price")),
            (Some(_), Some(_)) => return Err(ApiError::invalid_outcome("deal_price only applies to success_deal")),
            (Some(Declared::SuccessDonation), None) => Some(Outcome::SuccessDonation),
            (Some(Declared::Failure), None) => Some(Outcome::FailureMaxTurns),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceView {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub turn: u32,
}

impl From<&Utterance> for UtteranceView {
    fn from(u: &Utterance) -> Self {
        UtteranceView { speaker: u.speaker, text: u.text.clone(), strategy: u.agent_strategy.clone(), turn: u.turn_index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub task: TaskKind,
    pub scenario: Scenario,
    pub checkpoint: String,
    pub tom_enabled: bool,
    pub status: TerminationStatus,
    /// True once the session accepts no more messages.
    pub closed: bool,
    pub turns: u32,
    pub max_turns: u32,
    pub transcript: Vec<UtteranceView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sl_ratio: Option<f64>,
    /// Unix seconds.
    pub created_at: u64,
    pub idle_timeout_secs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session: SessionView,
    pub opening: UtteranceView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub turns: u32,
    pub max_turns: u32,
    pub strategies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub user: UtteranceView,
    /// Absent when the user's message ended the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<UtteranceView>,
    pub status: TerminationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sl_ratio: Option<f64>,
    pub metrics: Metrics,
}
