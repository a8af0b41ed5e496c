//! User-state inference: the user's mental state and likely next moves,
//! read off the dialogue history.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::TaskKind;
use crate::dialogue::{render_transcript, Speaker, Utterance};
use crate::gateway::{self, CompletionRequest, GatewayError, LlmBackend, Role};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentalSource {
    Inferred,
    Scripted,
    #[default]
    Empty,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentalModel {
    pub mental_state: String,
    pub future_actions: String,
    pub source: MentalSource,
    /// The reply had no recognizable sections and went whole into `mental_state`.
    #[serde(default)]
    pub degraded: bool,
}

impl MentalModel {
    pub fn empty() -> Self {
        MentalModel::default()
    }

    pub fn is_empty(&self) -> bool {
        self.source == MentalSource::Empty
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TomOptions {
    /// Transcript budget in characters; oldest utterances are dropped first.
    pub max_history_chars: usize,
    pub temperature: f64,
}

impl Default for TomOptions {
    fn default() -> Self {
        TomOptions { max_history_chars: 12_000, temperature: CompletionRequest::DEFAULT_TEMPERATURE }
    }
}

fn tom_preamble(task: TaskKind) -> &'static str {
    match task {
        TaskKind::PriceNegotiation => "You are an expert in price bargain.\nNow give you a conversation history between a buyer and a seller, you need to infer the mental states and future actions of the seller.",
        TaskKind::CharityPersuasion => "You are an expert in charity persuasion.\nNow give you a conversation history between a persuader and a persuadee, you need to infer the mental states and future actions of the persuadee.",
    }
}

/// Builds the inference prompt. Returns the request and how many of the
/// oldest utterances were dropped to fit the budget.
pub fn tom_request(history: &[Utterance], task: TaskKind, options: &TomOptions) -> (CompletionRequest, usize) {
    let mut start = 0;
    let mut transcript = render_transcript(history, task);
    while transcript.len() > options.max_history_chars && start + 1 < history.len() {
        start += 1;
        transcript = render_transcript(&history[start..], task);
    }
    let system = format!(
        "{}\nAnswer in two lines: \"MENTAL: <mental state>\" and \"FUTURE: <future actions>\".",
        tom_preamble(task)
    );
    let body = format!("********\nConversation History\n********\n{transcript}");
    let request = CompletionRequest::new(system, vec![(Role::User, body)])
        .expect("single message")
        .with_temperature(options.temperature)
        .with_max_tokens(200);
    (request, start)
}

/// Splits a reply into its labeled sections. Replies without labels land
/// whole in `mental_state` and are flagged as degraded.
pub fn parse_tom_reply(reply: &str) -> MentalModel {
    let mut mental = Vec::new();
    let mut future = Vec::new();
    let mut current: Option<&mut Vec<String>> = None;
    let mut labeled = false;
    for line in reply.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if let Some(rest) = strip_label(trimmed, &upper, &["MENTAL STATE", "MENTAL STATES", "MENTAL"]) {
            labeled = true;
            mental.push(rest.to_string());
            current = Some(&mut mental);
        } else if let Some(rest) = strip_label(trimmed, &upper, &["FUTURE ACTIONS", "FUTURE ACTION", "FUTURE"]) {
            labeled = true;
            future.push(rest.to_string());
            current = Some(&mut future);
        } else if let Some(buf) = current.as_mut() {
            if !trimmed.is_empty() {
                buf.push(trimmed.to_string());
            }
        }
    }
    if !labeled {
        return MentalModel {
            mental_state: reply.trim().to_string(),
            future_actions: String::new(),
            source: MentalSource::Inferred,
            degraded: true,
        };
    }
    let join = |v: Vec<String>| v.into_iter().filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ");
    MentalModel { mental_state: join(mental), future_actions: join(future), source: MentalSource::Inferred, degraded: false }
}

fn strip_label<'a>(line: &'a str, upper: &str, labels: &[&str]) -> Option<&'a str> {
    labels.iter().find_map(|label| {
        let rest = upper.strip_prefix(label)?;
        let rest = rest.trim_start();
        let rest = rest.strip_prefix(':')?;
        Some(line[line.len() - rest.len()..].trim())
    })
}

/// Infers the user's state from `history` with the default options.
pub fn infer_user_state(history: &[Utterance], task: TaskKind, backend: &dyn LlmBackend) -> Result<MentalModel, GatewayError> {
    infer_user_state_with(history, task, backend, &TomOptions::default()).map(|(m, _)| m)
}

/// Like [`infer_user_state`], also returning the truncation count.
pub fn infer_user_state_with(
    history: &[Utterance],
    task: TaskKind,
    backend: &dyn LlmBackend,
    options: &TomOptions,
) -> Result<(MentalModel, usize), GatewayError> {
    if history.is_empty() {
        return Ok((MentalModel::empty(), 0));
    }
    let (request, dropped) = tom_request(history, task, options);
    let completion = gateway::complete(&request, backend)?;
    let reply = completion.samples.into_iter().next().unwrap_or_default();
    Ok((parse_tom_reply(&reply), dropped))
}

/// Rule-based stand-in used with scripted simulators: summarizes the
/// user's resisting behavior so far.
pub fn scripted_mental_model(history: &[Utterance], task: TaskKind) -> MentalModel {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last = None;
    for u in history.iter().filter(|u| u.speaker == Speaker::User) {
        if let Some(r) = u.resisting_strategy.as_deref() {
            *counts.entry(r).or_default() += 1;
            last = Some(r);
        }
    }
    let Some(last) = last else {
        return MentalModel::empty();
    };
    let (dominant, _) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
    let goal = match task {
        TaskKind::PriceNegotiation => "the seller wants to keep the price high",
        TaskKind::CharityPersuasion => "the persuadee is not yet willing to donate",
    };
    MentalModel {
        mental_state: format!("{goal}; mostly uses {dominant}"),
        future_actions: format!("will likely answer with {last} again"),
        source: MentalSource::Scripted,
        degraded: false,
    }
}

/// How the planner obtains its user-state input.
#[derive(Clone, Copy, Default)]
pub enum TomMode<'a> {
    /// No inference; the planner sees the dialogue history only.
    #[default]
    Off,
    Scripted,
    Backend(&'a dyn LlmBackend),
}

impl TomMode<'_> {
    pub fn is_enabled(&self) -> bool {
        !matches!(self, TomMode::Off)
    }

    /// Returns the model and the number of utterances truncated away.
    pub fn infer(&self, history: &[Utterance], task: TaskKind) -> Result<(MentalModel, usize), GatewayError> {
        match self {
            TomMode::Off => Ok((MentalModel::empty(), 0)),
            TomMode::Scripted => Ok((scripted_mental_model(history, task), 0)),
            TomMode::Backend(b) => infer_user_state_with(history, task, *b, &TomOptions::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixedReply;

    fn history() -> Vec<Utterance> {
        let mut a = Utterance::agent("Hi, is the bike still available?", "Greetings");
        a.turn_index = 1;
        let mut u = Utterance::user("Yes, it is $285.", Some("Self-assertion".into()));
        u.turn_index = 1;
        vec![a, u]
    }

    #[test]
    fn empty_history_is_empty_model() {
        let m = infer_user_state(&[], TaskKind::PriceNegotiation, &FixedReply::new("MENTAL: x")).unwrap();
        assert_eq!(m.source, MentalSource::Empty);
        assert!(m.mental_state.is_empty() && m.future_actions.is_empty());
    }

    #[test]
    fn fixture_reply_splits_into_sections() {
        let m = infer_user_state(
            &history(),
            TaskKind::PriceNegotiation,
            &FixedReply::new("MENTAL: wants ≥ $250\nFUTURE: will counter-offer"),
        )
        .unwrap();
        assert_eq!(m.mental_state, "wants ≥ $250");
        assert_eq!(m.future_actions, "will counter-offer");
        assert_eq!(m.source, MentalSource::Inferred);
        assert!(!m.degraded);
    }

    #[test]
    fn unlabeled_reply_is_degraded() {
        let m = parse_tom_reply("The seller seems firm.");
        assert!(m.degraded);
        assert_eq!(m.mental_state, "The seller seems firm.");
        assert!(m.future_actions.is_empty());
    }

    #[test]
    fn multi_line_sections_and_label_variants() {
        let m = parse_tom_reply("Mental states: firm\non price\nFuture actions: hold");
        assert_eq!(m.mental_state, "firm on price");
        assert_eq!(m.future_actions, "hold");
    }

    #[test]
    fn prompt_preambles() {
        let (req, _) = tom_request(&history(), TaskKind::PriceNegotiation, &TomOptions::default());
        assert!(req.system_prompt.starts_with("You are an expert in price bargain."));
        let (req, _) = tom_request(&history(), TaskKind::CharityPersuasion, &TomOptions::default());
        assert!(req.system_prompt.starts_with("You are an expert in charity persuasion."));
    }

    #[test]
    fn prompt_contains_each_utterance_once_in_order() {
        let h = history();
        let (req, dropped) = tom_request(&h, TaskKind::PriceNegotiation, &TomOptions::default());
        assert_eq!(dropped, 0);
        let body = &req.messages[0].1;
        let mut pos = 0;
        for u in &h {
            assert_eq!(body.matches(&u.text).count(), 1);
            let at = body.find(&u.text).unwrap();
            assert!(at >= pos);
            pos = at;
        }
    }

    #[test]
    fn truncation_drops_oldest_first() {
        let h = history();
        let opts = TomOptions { max_history_chars: 30, ..TomOptions::default() };
        let (req, dropped) = tom_request(&h, TaskKind::PriceNegotiation, &opts);
        assert_eq!(dropped, 1);
        assert!(!req.messages[0].1.contains("still available"));
        assert!(req.messages[0].1.contains("$285"));
    }

    #[test]
    fn scripted_model_reflects_resisting_history() {
        let m = scripted_mental_model(&history(), TaskKind::PriceNegotiation);
        assert_eq!(m.source, MentalSource::Scripted);
        assert!(m.future_actions.contains("Self-assertion"));
        assert!(scripted_mental_model(&[], TaskKind::PriceNegotiation).is_empty());
    }

    #[test]
    fn off_mode_is_empty() {
        let (m, _) = TomMode::Off.infer(&history(), TaskKind::PriceNegotiation).unwrap();
        assert!(m.is_empty());
    }
}
