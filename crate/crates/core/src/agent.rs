//! Turns a chosen strategy into the agent's utterance.

use std::sync::Arc;

use crate::catalog::{Catalog, TaskKind};
use crate::dialogue::{DialogueState, ScenarioDetails, Speaker, SAVE_THE_CHILDREN_INFO};
use crate::gateway::{self, CompletionRequest, GatewayError, LlmBackend, Role};

pub trait AgentVoice: Send + Sync {
    fn id(&self) -> &str;

    /// Text of the agent's next utterance for `strategy`.
    fn utter(&self, state: &DialogueState, strategy: &str, catalog: &Catalog) -> Result<String, GatewayError>;
}

/// Fixed sentence per strategy. Used with scripted simulators and in tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateVoice;

fn template_line(task: TaskKind, strategy: &str) -> &'static str {
    match (task, strategy) {
        (TaskKind::PriceNegotiation, "Greetings") => "Hi there, is the {item} still available?",
        (TaskKind::PriceNegotiation, "Ask a question") => "How long have you had the {item}?",
        (TaskKind::PriceNegotiation, "Answer a question") => "I would use it almost every day.",
        (TaskKind::PriceNegotiation, "Propose the first price") => "Would you take ${offer} for it?",
        (TaskKind::PriceNegotiation, "Propose a counter price") => "How about ${offer} instead?",
        (TaskKind::PriceNegotiation, "Use comparatives") => "I have seen similar ones listed for around ${offer}.",
        (TaskKind::PriceNegotiation, "Confirm information") => "Just to check, it comes as described?",
        (TaskKind::PriceNegotiation, "Affirm confirmation") => "Yes, that is right.",
        (TaskKind::PriceNegotiation, "Deny confirmation") => "No, that is not what I meant.",
        (TaskKind::PriceNegotiation, "Agree with the proposal") => "That sounds reasonable to me.",
        (TaskKind::PriceNegotiation, "Disagree with a proposal") => "That is more than I can spend right now.",
        (TaskKind::CharityPersuasion, "Logical Appeal") => "Even a small amount buys food and medicine for a child.",
        (TaskKind::CharityPersuasion, "Emotion Appeal") => "Imagine a child going to sleep hungry tonight.",
        (TaskKind::CharityPersuasion, "Credibility Appeal") => "Save the Children has been helping kids for over a century.",
        (TaskKind::CharityPersuasion, "Foot in the Door") => "Would you consider giving just one dollar?",
        (TaskKind::CharityPersuasion, "Self-Modeling") => "I donate part of my earnings to them myself.",
        (TaskKind::CharityPersuasion, "Personal Story") => "A friend of mine saw their work firsthand after a flood.",
        (TaskKind::CharityPersuasion, "Donation Information") => "Your donation can be taken directly from your task payment.",
        (TaskKind::CharityPersuasion, "Source-related Inquiry") => "Have you heard of Save the Children before?",
        (TaskKind::CharityPersuasion, "Task-related Inquiry") => "Do you usually give to charities?",
        (TaskKind::CharityPersuasion, "Personal-related Inquiry") => "Do you have children of your own?",
        _ => "Let's keep talking.",
    }
}

impl AgentVoice for TemplateVoice {
    fn id(&self) -> &str {
        "template"
    }

    fn utter(&self, state: &DialogueState, strategy: &str, catalog: &Catalog) -> Result<String, GatewayError> {
        catalog
            .strategy(state.task(), strategy)
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let line = template_line(state.task(), strategy);
        Ok(match &state.scenario.details {
            ScenarioDetails::PriceNegotiation { item_name, buyer_target_price, .. } => line
                .replace("{item}", item_name)
                .replace("{offer}", &buyer_target_price.to_string()),
            ScenarioDetails::CharityPersuasion { .. } => line.to_string(),
        })
    }
}

/// Role-play prompt with the strategy's instruction in the action slot.
pub fn agent_request(state: &DialogueState, strategy: &str, catalog: &Catalog) -> Result<CompletionRequest, GatewayError> {
    let instruction = catalog
        .strategy_instruction(state.task(), strategy)
        .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
    let system = match &state.scenario.details {
        ScenarioDetails::PriceNegotiation { item_name, item_description, buyer_target_price, .. } => format!(
            "Now enter the role-playing mode. In the following conversation, you will play as a buyer in a price bargaining game.\n\
             You are the buyer who is trying to buy the {item_name} with the price of {buyer_target_price}. Product description: {item_description}\n\
             Please reply with only one short and succinct sentence. {instruction} Now start the game."
        ),
        ScenarioDetails::CharityPersuasion { charity_info, .. } => {
            let info = if charity_info.trim().is_empty() { SAVE_THE_CHILDREN_INFO } else { charity_info };
            format!(
                "Now enter the role-playing mode. In the following conversation, you will play as a Persuader who is trying to persuade the Persuadee to donate to the charity called Save the Children.\n\
                 {info}\n\
                 You are the Persuader who is trying to convince the Persuadee to donate to a charity called Save the Children. {instruction}\n\
                 Please reply with only one short and persuasive sentence."
            )
        }
    };
    let messages = state
        .history
        .iter()
        .map(|u| (if u.speaker == Speaker::Agent { Role::Assistant } else { Role::User }, u.text.clone()))
        .collect();
    CompletionRequest::new(system, messages)
}

/// Utterances generated by a chat backend.
#[derive(Clone, Debug)]
pub struct LlmVoice {
    pub backend: Arc<dyn LlmBackend>,
}

impl AgentVoice for LlmVoice {
    fn id(&self) -> &str {
        self.backend.id()
    }

    fn utter(&self, state: &DialogueState, strategy: &str, catalog: &Catalog) -> Result<String, GatewayError> {
        let completion = gateway::complete(&agent_request(state, strategy, catalog)?, self.backend.as_ref())?;
        let text = completion.samples.into_iter().next().unwrap_or_default().trim().to_string();
        if text.is_empty() {
            return Err(GatewayError::Protocol("empty agent utterance".into()));
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::Scenario;
    use crate::gateway::FixedReply;

    #[test]
    fn template_voice_covers_every_strategy() {
        let catalog = Catalog::bundled();
        for task in TaskKind::ALL {
            let state = DialogueState::new(Scenario::reference(task), 10);
            for s in catalog.agent_strategies(task) {
                let text = TemplateVoice.utter(&state, &s.name, catalog).unwrap();
                assert_ne!(text, "Let's keep talking.", "{}", s.name);
                assert!(!text.contains('{'));
            }
        }
    }

    #[test]
    fn prompt_carries_instruction_and_scenario() {
        let catalog = Catalog::bundled();
        let state = DialogueState::new(Scenario::road_bike(), 10);
        let req = agent_request(&state, "Greetings", catalog).unwrap();
        assert!(req.system_prompt.contains(catalog.strategy_instruction(TaskKind::PriceNegotiation, "Greetings").unwrap()));
        assert!(req.system_prompt.contains("with the price of 142"));
        let state = DialogueState::new(Scenario::save_the_children(), 10);
        let req = agent_request(&state, "Emotion Appeal", catalog).unwrap();
        assert!(req.system_prompt.contains("head-quartered in London"));
    }

    #[test]
    fn llm_voice_returns_backend_text() {
        let voice = LlmVoice { backend: Arc::new(FixedReply::new(" Hello! ")) };
        let state = DialogueState::new(Scenario::save_the_children(), 10);
        assert_eq!(voice.utter(&state, "Emotion Appeal", Catalog::bundled()).unwrap(), "Hello!");
    }
}
