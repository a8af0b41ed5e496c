//! Scenarios, dialogue state and turn bookkeeping.
//!
//! A turn is one agent utterance followed by one user utterance. States are
//! values: [`DialogueState::advance`] returns a new state and leaves the
//! receiver untouched.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::{Catalog, TaskKind};
use crate::reward::GoalStatus;
use crate::scalar::Scalar;

/// Default turn budget.
pub const DEFAULT_MAX_TURNS: u32 = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DialogueError {
    #[error("dialogue already ended ({0:?})")]
    Terminal(Outcome),
    #[error("turn budget of {0} exhausted")]
    TurnBudget(u32),
    #[error("expected a {expected:?} utterance, got {got:?}")]
    Alternation { expected: Speaker, got: Speaker },
    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),
    #[error("degenerate scenario: buyer and seller targets are both {0}")]
    DegenerateScenario(Money),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Exact currency amount in cents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Money(i64);

impl Money {
    pub const fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub const fn from_dollars(dollars: i64) -> Self {
        Money(dollars * 100)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    /// Nearest cent to a floating-point dollar amount.
    pub fn from_f64(dollars: f64) -> Option<Self> {
        let cents = (dollars * 100.0).round();
        (cents.is_finite() && cents.abs() < i64::MAX as f64).then(|| Money(cents as i64))
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        if abs % 100 == 0 {
            write!(f, "{sign}{}", abs / 100)
        } else {
            write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
        }
    }
}

impl FromStr for Money {
    type Err = String;

    /// Accepts `200`, `$200.5`, `1,200.00`, `-3.25`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cleaned: String = s.trim().chars().filter(|c| *c != '$' && *c != ',').collect();
        let (negative, digits) = match cleaned.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, cleaned.as_str()),
        };
        let (whole, frac) = digits.split_once('.').unwrap_or((digits, ""));
        if whole.is_empty() && frac.is_empty() {
            return Err(format!("not a price: {s:?}"));
        }
        if frac.len() > 2 || !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(format!("not a price: {s:?}"));
        }
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| format!("not a price: {s:?}"))? };
        let frac_cents: i64 = match frac.len() {
            0 => 0,
            1 => frac.parse::<i64>().unwrap() * 10,
            _ => frac.parse::<i64>().unwrap(),
        };
        let cents = whole.checked_mul(100).and_then(|c| c.checked_add(frac_cents)).ok_or("price overflow")?;
        Ok(Money(if negative { -cents } else { cents }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let abs = self.0.unsigned_abs();
        let sign = if self.0 < 0 { "-" } else { "" };
        serializer.serialize_str(&format!("{sign}{}.{:02}", abs / 100, abs % 100))
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Number(n) => Money::from_f64(n).ok_or_else(|| serde::de::Error::custom("price out of range")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ScenarioDetails {
    PriceNegotiation {
        item_name: String,
        item_description: String,
        seller_target_price: Money,
        buyer_target_price: Money,
        listing_price: Money,
    },
    CharityPersuasion {
        charity_info: String,
        persuadee_initial_intent: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(flatten)]
    pub details: ScenarioDetails,
}

pub const SAVE_THE_CHILDREN_INFO: &str = "Save the Children is head-quartered in London, and they work to help fight poverty around the world. Children need help in developing countries and war zones. Small donations like $1 or $2 go a long way to help.";

impl Scenario {
    pub fn task(&self) -> TaskKind {
        match self.details {
            ScenarioDetails::PriceNegotiation { .. } => TaskKind::PriceNegotiation,
            ScenarioDetails::CharityPersuasion { .. } => TaskKind::CharityPersuasion,
        }
    }

    /// The road-bike negotiation: seller target 285, buyer target 142.
    pub fn road_bike() -> Self {
        Scenario {
            id: "cb-road-bike".into(),
            details: ScenarioDetails::PriceNegotiation {
                item_name: "road bike".into(),
                item_description: "A skillfully lugged and elegantly pantographed road bike".into(),
                seller_target_price: Money::from_dollars(285),
                buyer_target_price: Money::from_dollars(142),
                listing_price: Money::from_dollars(285),
            },
        }
    }

    pub fn save_the_children() -> Self {
        Scenario {
            id: "p4g-save-the-children".into(),
            details: ScenarioDetails::CharityPersuasion {
                charity_info: SAVE_THE_CHILDREN_INFO.into(),
                persuadee_initial_intent: false,
            },
        }
    }

    pub fn reference(task: TaskKind) -> Self {
        match task {
            TaskKind::PriceNegotiation => Self::road_bike(),
            TaskKind::CharityPersuasion => Self::save_the_children(),
        }
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        match &self.details {
            ScenarioDetails::PriceNegotiation { seller_target_price, buyer_target_price, .. } => {
                if buyer_target_price.cents() <= 0 || seller_target_price.cents() <= 0 {
                    return Err(DialogueError::InvalidScenario("target prices must be positive".into()));
                }
                if buyer_target_price >= seller_target_price {
                    return Err(DialogueError::InvalidScenario(
                        "buyer target must be below seller target".into(),
                    ));
                }
            }
            ScenarioDetails::CharityPersuasion { charity_info, .. } => {
                if charity_info.trim().is_empty() {
                    return Err(DialogueError::InvalidScenario("charity info is empty".into()));
                }
            }
        }
        Ok(())
    }

    /// `(seller target, buyer target)` for negotiation scenarios.
    pub fn targets(&self) -> Option<(Money, Money)> {
        match self.details {
            ScenarioDetails::PriceNegotiation { seller_target_price, buyer_target_price, .. } => {
                Some((seller_target_price, buyer_target_price))
            }
            ScenarioDetails::CharityPersuasion { .. } => None,
        }
    }
}

/// Reads a JSON array of scenarios.
pub fn load_scenarios(path: &std::path::Path) -> Result<Vec<Scenario>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let scenarios: Vec<Scenario> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    for s in &scenarios {
        s.validate().map_err(|e| format!("scenario {}: {e}", s.id))?;
    }
    Ok(scenarios)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Agent,
    User,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resisting_strategy: Option<String>,
    /// 1-based turn this utterance belongs to; assigned by `advance`.
    pub turn_index: u32,
}

impl Utterance {
    pub fn agent(text: impl Into<String>, strategy: impl Into<String>) -> Self {
        Utterance {
            speaker: Speaker::Agent,
            text: text.into(),
            agent_strategy: Some(strategy.into()),
            resisting_strategy: None,
            turn_index: 0,
        }
    }

    pub fn user(text: impl Into<String>, resisting: Option<String>) -> Self {
        Utterance { speaker: Speaker::User, text: text.into(), agent_strategy: None, resisting_strategy: resisting, turn_index: 0 }
    }

    fn check(&self, task: TaskKind, catalog: &Catalog) -> Result<(), DialogueError> {
        if self.text.trim().is_empty() {
            return Err(DialogueError::InvalidUtterance("empty text".into()));
        }
        match self.speaker {
            Speaker::Agent => {
                let name = self
                    .agent_strategy
                    .as_deref()
                    .ok_or_else(|| DialogueError::InvalidUtterance("agent utterance without a strategy".into()))?;
                catalog.strategy(task, name).map_err(|e| DialogueError::InvalidUtterance(e.to_string()))?;
                if self.resisting_strategy.is_some() {
                    return Err(DialogueError::InvalidUtterance("agent utterance with a resisting strategy".into()));
                }
            }
            Speaker::User => {
                if self.agent_strategy.is_some() {
                    return Err(DialogueError::InvalidUtterance("user utterance with an agent strategy".into()));
                }
                if let Some(name) = &self.resisting_strategy {
                    catalog.resisting_index(task, name).map_err(|e| DialogueError::InvalidUtterance(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Ongoing,
    SuccessDeal { deal_price: Money },
    SuccessDonation,
    FailureMaxTurns,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::SuccessDeal { .. } | Outcome::SuccessDonation)
    }

    pub fn is_terminal(self) -> bool {
        self != Outcome::Ongoing
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationStatus {
    pub terminal: bool,
    pub outcome: Outcome,
}

impl From<Outcome> for TerminationStatus {
    fn from(outcome: Outcome) -> Self {
        TerminationStatus { terminal: outcome.is_terminal(), outcome }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub scenario: Scenario,
    pub history: Vec<Utterance>,
    pub turn_count: u32,
    pub status: Outcome,
    pub max_turns: u32,
}

impl DialogueState {
    pub fn new(scenario: Scenario, max_turns: u32) -> Self {
        DialogueState { scenario, history: Vec::new(), turn_count: 0, status: Outcome::Ongoing, max_turns }
    }

    pub fn task(&self) -> TaskKind {
        self.scenario.task()
    }

    pub fn next_speaker(&self) -> Speaker {
        match self.history.last() {
            Some(u) if u.speaker == Speaker::Agent => Speaker::User,
            _ => Speaker::Agent,
        }
    }

    /// Appends `utterance`, returning the new state.
    pub fn advance(&self, utterance: Utterance) -> Result<DialogueState, DialogueError> {
        self.advance_with(utterance, Catalog::bundled())
    }

    pub fn advance_with(&self, mut utterance: Utterance, catalog: &Catalog) -> Result<DialogueState, DialogueError> {
        if self.status.is_terminal() {
            return Err(DialogueError::Terminal(self.status));
        }
        if self.turn_count >= self.max_turns {
            return Err(DialogueError::TurnBudget(self.max_turns));
        }
        let expected = self.next_speaker();
        if utterance.speaker != expected {
            return Err(DialogueError::Alternation { expected, got: utterance.speaker });
        }
        utterance.check(self.task(), catalog)?;
        utterance.turn_index = self.turn_count + 1;
        let mut next = self.clone();
        if utterance.speaker == Speaker::User {
            next.turn_count += 1;
        }
        next.history.push(utterance);
        Ok(next)
    }

    /// Returns a copy with the termination outcome applied.
    pub fn conclude(&self, status: TerminationStatus) -> DialogueState {
        let mut next = self.clone();
        next.status = status.outcome;
        next
    }

    pub fn agent_strategies(&self) -> impl Iterator<Item = &str> {
        self.history.iter().filter_map(|u| u.agent_strategy.as_deref())
    }
}

/// Display names of the agent and user roles.
pub fn role_labels(task: TaskKind) -> (&'static str, &'static str) {
    match task {
        TaskKind::PriceNegotiation => ("Buyer", "Seller"),
        TaskKind::CharityPersuasion => ("Persuader", "Persuadee"),
    }
}

/// One `Role: text` line per utterance.
pub fn render_transcript(history: &[Utterance], task: TaskKind) -> String {
    let (agent, user) = role_labels(task);
    history
        .iter()
        .map(|u| format!("{}: {}", if u.speaker == Speaker::Agent { agent } else { user }, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Termination rule. The goal is checked before the turn budget, so a goal
/// reached on the final turn counts as success.
pub fn is_terminal(state: &DialogueState, goal: &GoalStatus) -> TerminationStatus {
    let outcome = if goal.achieved {
        match (state.task(), goal.deal_price) {
            (TaskKind::PriceNegotiation, Some(deal_price)) => Outcome::SuccessDeal { deal_price },
            // detect_goal never reports a negotiation success without a price
            (TaskKind::PriceNegotiation, None) => Outcome::Ongoing,
            (TaskKind::CharityPersuasion, _) => Outcome::SuccessDonation,
        }
    } else if state.turn_count >= state.max_turns {
        Outcome::FailureMaxTurns
    } else {
        Outcome::Ongoing
    };
    outcome.into()
}

/// `(deal − seller) / (buyer − seller)` as an exact fraction of cents.
pub fn sale_to_list_ratio_exact(deal: Money, seller_target: Money, buyer_target: Money) -> Result<Ratio<i64>, DialogueError> {
    let denom = buyer_target.cents() - seller_target.cents();
    if denom == 0 {
        return Err(DialogueError::DegenerateScenario(buyer_target));
    }
    Ok(Ratio::new(deal.cents() - seller_target.cents(), denom))
}

/// Sale-to-list ratio. Not clamped: deals outside the two targets give
/// values outside `[0, 1]`.
pub fn sale_to_list_ratio<T: Scalar>(deal: Money, seller_target: Money, buyer_target: Money) -> Result<T, DialogueError> {
    let r = sale_to_list_ratio_exact(deal, seller_target, buyer_target)?;
    // a single rounding: numerator and denominator are exact in f64 below 2^53 cents
    let value = r.numer().to_f64().unwrap() / r.denom().to_f64().unwrap();
    Ok(T::of(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p4g() -> DialogueState {
        DialogueState::new(Scenario::save_the_children(), DEFAULT_MAX_TURNS)
    }

    fn goal(achieved: bool, price: Option<i64>) -> GoalStatus {
        GoalStatus { achieved, deal_price: price.map(Money::from_dollars), judge_votes: (0, 0) }
    }

    #[test]
    fn turn_counts_complete_pairs() {
        let s0 = p4g();
        let s1 = s0.advance(Utterance::agent("Hello there!", "Logical Appeal")).unwrap();
        assert_eq!((s1.history.len(), s1.turn_count), (1, 0));
        let s2 = s1.advance(Utterance::user("Hi.", None)).unwrap();
        assert_eq!((s2.history.len(), s2.turn_count), (2, 1));
        assert_eq!(s2.history[1].turn_index, 1);
        assert!(s0.history.is_empty());
    }

    #[test]
    fn terminal_states_are_frozen() {
        let s = p4g().conclude(Outcome::SuccessDonation.into());
        assert_eq!(
            s.advance(Utterance::agent("hi", "Logical Appeal")),
            Err(DialogueError::Terminal(Outcome::SuccessDonation))
        );
    }

    #[test]
    fn speakers_must_alternate() {
        let err = p4g().advance(Utterance::user("hi", None)).unwrap_err();
        assert_eq!(err, DialogueError::Alternation { expected: Speaker::Agent, got: Speaker::User });
    }

    #[test]
    fn utterances_are_checked_against_the_catalog() {
        let err = p4g().advance(Utterance::agent("hi", "Greetings")).unwrap_err();
        assert!(matches!(err, DialogueError::InvalidUtterance(_)));
        let s = p4g().advance(Utterance::agent("hi", "Logical Appeal")).unwrap();
        assert!(s.advance(Utterance::user("no", Some("Donate".into()))).is_err());
        assert!(s.advance(Utterance::user("no", Some("Hesitance".into()))).is_ok());
        assert!(s.advance(Utterance::user("   ", None)).is_err());
    }

    #[test]
    fn termination_rules() {
        let mut s = DialogueState::new(Scenario::road_bike(), 10);
        s.turn_count = 10;
        assert_eq!(is_terminal(&s, &goal(false, None)).outcome, Outcome::FailureMaxTurns);
        s.turn_count = 3;
        let t = is_terminal(&s, &goal(true, Some(200)));
        assert!(t.terminal);
        assert_eq!(t.outcome, Outcome::SuccessDeal { deal_price: Money::from_dollars(200) });
        assert_eq!(is_terminal(&s, &goal(false, None)), TerminationStatus { terminal: false, outcome: Outcome::Ongoing });
        s.turn_count = 10;
        assert!(is_terminal(&s, &goal(true, Some(200))).outcome.is_success());
    }

    #[test]
    fn sale_to_list_ratio_examples() {
        let v: f64 = sale_to_list_ratio(Money::from_dollars(200), Money::from_dollars(285), Money::from_dollars(142)).unwrap();
        assert_eq!(v, 85.0 / 143.0);
        assert!((v - 0.594405594405).abs() < 1e-12);
        let zero: f64 = sale_to_list_ratio(Money::from_dollars(285), Money::from_dollars(285), Money::from_dollars(142)).unwrap();
        let one: f64 = sale_to_list_ratio(Money::from_dollars(142), Money::from_dollars(285), Money::from_dollars(142)).unwrap();
        assert_eq!((zero, one), (0.0, 1.0));
        let above: f64 = sale_to_list_ratio(Money::from_dollars(100), Money::from_dollars(285), Money::from_dollars(142)).unwrap();
        assert!(above > 1.0);
        assert!(sale_to_list_ratio::<f64>(Money::from_dollars(1), Money::from_dollars(5), Money::from_dollars(5)).is_err());
    }

    #[test]
    fn money_parsing_and_display() {
        assert_eq!("200".parse::<Money>().unwrap(), Money::from_dollars(200));
        assert_eq!("$1,200.5".parse::<Money>().unwrap(), Money::from_cents(120050));
        assert_eq!("-3.25".parse::<Money>().unwrap(), Money::from_cents(-325));
        assert!("12.345".parse::<Money>().is_err());
        assert!("abc".parse::<Money>().is_err());
        assert_eq!(Money::from_dollars(285).to_string(), "285");
        assert_eq!(Money::from_cents(28550).to_string(), "285.50");
        let json = serde_json::to_string(&Money::from_cents(20001)).unwrap();
        assert_eq!(json, "\"200.01\"");
        assert_eq!(serde_json::from_str::<Money>(&json).unwrap(), Money::from_cents(20001));
        assert_eq!(serde_json::from_str::<Money>("142").unwrap(), Money::from_dollars(142));
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::road_bike().validate().is_ok());
        assert!(Scenario::save_the_children().validate().is_ok());
        let mut bad = Scenario::road_bike();
        if let ScenarioDetails::PriceNegotiation { buyer_target_price, .. } = &mut bad.details {
            *buyer_target_price = Money::from_dollars(300);
        }
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&Scenario::road_bike()).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&json).unwrap(), Scenario::road_bike());
    }

    proptest! {
        #[test]
        fn ratio_is_scale_invariant(deal in 1i64..100_000, seller in 1i64..100_000, buyer in 1i64..100_000, scale in 1i64..50) {
            prop_assume!(seller != buyer);
            let a: f64 = sale_to_list_ratio(Money::from_cents(deal), Money::from_cents(seller), Money::from_cents(buyer)).unwrap();
            let b: f64 = sale_to_list_ratio(
                Money::from_cents(deal * scale),
                Money::from_cents(seller * scale),
                Money::from_cents(buyer * scale),
            ).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn replay_reproduces_state(n in 0usize..10) {
            let mut s = p4g();
            let mut log = Vec::new();
            for i in 0..n {
                let a = Utterance::agent(format!("agent {i}"), "Emotion Appeal");
                let u = Utterance::user(format!("user {i}"), Some("Hesitance".into()));
                s = s.advance(a.clone()).unwrap();
                s = s.advance(u.clone()).unwrap();
                log.push(a);
                log.push(u);
            }
            let mut replay = p4g();
            for u in log {
                replay = replay.advance(u).unwrap();
            }
            prop_assert_eq!(&replay, &s);
            let agents = s.history.iter().filter(|u| u.speaker == Speaker::Agent).count();
            let users = s.history.len() - agents;
            prop_assert!(agents - users <= 1);
        }
    }
}
