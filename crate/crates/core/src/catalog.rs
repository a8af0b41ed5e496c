//! Fixed taxonomies: agent strategies, resisting strategies and personas.
//!
//! The catalog text is part of the prompt contract, so it ships as a data
//! file whose SHA-256 is pinned in [`BUNDLED_CATALOG_SHA256`].

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{CompletionRequest, GatewayError, LlmBackend};

const BUNDLED_CATALOG: &str = include_str!("../data/catalog.toml");

/// SHA-256 of `data/catalog.toml`.
pub const BUNDLED_CATALOG_SHA256: &str =
    "8b554f0a4086b2aeff5443ebb4a24a378642ce9c7f664efd1c26b1e659ad4ccd";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("strategy {name:?} is not in the {task} catalog")]
    Miss { task: TaskKind, name: String },
    #[error("catalog hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("malformed catalog: {0}")]
    Parse(String),
    #[error("persona generation failed: {0}")]
    Generation(#[from] GatewayError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PriceNegotiation,
    CharityPersuasion,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::PriceNegotiation, TaskKind::CharityPersuasion];

    /// Short command-line name: `cb` or `p4g`.
    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::PriceNegotiation => "cb",
            TaskKind::CharityPersuasion => "p4g",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::PriceNegotiation => "price_negotiation",
            TaskKind::CharityPersuasion => "charity_persuasion",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cb" | "price_negotiation" | "negotiation" => Ok(TaskKind::PriceNegotiation),
            "p4g" | "charity_persuasion" | "persuasion" => Ok(TaskKind::CharityPersuasion),
            other => Err(format!("unknown task {other:?} (expected cb or p4g)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStrategy {
    pub task: TaskKind,
    pub name: String,
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResistingStrategy {
    pub task: TaskKind,
    pub name: String,
    pub explanation: String,
}

/// A response option offered to a simulator that is not a resisting strategy
/// (the persuadee's "Donate").
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseOption {
    pub name: String,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompts {
    pub deal_question: String,
    pub price_question: String,
    pub donation_question: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BigFive {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl BigFive {
    pub const ALL: [BigFive; 5] = [
        BigFive::Openness,
        BigFive::Conscientiousness,
        BigFive::Extraversion,
        BigFive::Agreeableness,
        BigFive::Neuroticism,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BigFive::Openness => "openness",
            BigFive::Conscientiousness => "conscientiousness",
            BigFive::Extraversion => "extraversion",
            BigFive::Agreeableness => "agreeableness",
            BigFive::Neuroticism => "neuroticism",
        }
    }

    fn gloss(self) -> &'static str {
        match self {
            BigFive::Openness => "openness to experience, which means you are curious, imaginative, and willing to try new things",
            BigFive::Conscientiousness => "conscientiousness, which means you are organized, dependable, and careful about every commitment you make",
            BigFive::Extraversion => "extraversion, which means you are outgoing, talkative, and energized by other people",
            BigFive::Agreeableness => "agreeableness, which means you are cooperative, trusting, and considerate of others",
            BigFive::Neuroticism => "neuroticism, which means you worry easily, feel stress strongly, and are wary of risk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStyle {
    Directive,
    Analytical,
    Conceptual,
    Behavioral,
}

impl DecisionStyle {
    pub const ALL: [DecisionStyle; 4] = [
        DecisionStyle::Directive,
        DecisionStyle::Analytical,
        DecisionStyle::Conceptual,
        DecisionStyle::Behavioral,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DecisionStyle::Directive => "directive",
            DecisionStyle::Analytical => "analytical",
            DecisionStyle::Conceptual => "conceptual",
            DecisionStyle::Behavioral => "behavioral",
        }
    }

    fn gloss(self) -> &'static str {
        match self {
            DecisionStyle::Directive => "you prefer quick, practical decisions based on clear rules and your own experience",
            DecisionStyle::Analytical => "you carefully consider all available information before making a choice",
            DecisionStyle::Conceptual => "you look at the big picture and weigh creative, long-term possibilities",
            DecisionStyle::Behavioral => "you value harmony and pay attention to how others feel about a decision",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PersonaCategory {
    pub big_five: BigFive,
    pub decision_style: DecisionStyle,
}

impl PersonaCategory {
    pub const COUNT: usize = 20;

    pub fn new(big_five: BigFive, decision_style: DecisionStyle) -> Self {
        Self { big_five, decision_style }
    }

    /// Position in [`enumerate_personas`] order.
    pub fn index(self) -> usize {
        let outer = BigFive::ALL.iter().position(|b| *b == self.big_five).unwrap();
        let inner = DecisionStyle::ALL.iter().position(|d| *d == self.decision_style).unwrap();
        outer * DecisionStyle::ALL.len() + inner
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then(|| {
            Self::new(
                BigFive::ALL[index / DecisionStyle::ALL.len()],
                DecisionStyle::ALL[index % DecisionStyle::ALL.len()],
            )
        })
    }
}

impl fmt::Display for PersonaCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.big_five.label(), self.decision_style.label())
    }
}

/// All 20 persona categories. Big-Five traits form the outer loop and
/// decision styles the inner loop, both in their declaration order.
pub fn enumerate_personas() -> Vec<PersonaCategory> {
    BigFive::ALL
        .iter()
        .flat_map(|&b| DecisionStyle::ALL.iter().map(move |&d| PersonaCategory::new(b, d)))
        .collect()
}

/// One line of the persona list export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub index: usize,
    pub big_five: BigFive,
    pub decision_style: DecisionStyle,
}

pub fn persona_records() -> Vec<PersonaRecord> {
    enumerate_personas()
        .into_iter()
        .map(|c| PersonaRecord { index: c.index(), big_five: c.big_five, decision_style: c.decision_style })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub category: PersonaCategory,
    pub description: String,
}

pub trait PersonaRenderer {
    fn render(&self, category: PersonaCategory) -> Result<PersonaProfile, CatalogError>;
}

/// Deterministic persona descriptions assembled from fixed phrases.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateRenderer;

impl PersonaRenderer for TemplateRenderer {
    fn render(&self, category: PersonaCategory) -> Result<PersonaProfile, CatalogError> {
        Ok(render_persona_description(category))
    }
}

pub fn render_persona_description(category: PersonaCategory) -> PersonaProfile {
    let description = format!(
        "Your personality is characterized by {}. Your decision-making style is {}, meaning {}.",
        category.big_five.gloss(),
        category.decision_style.label(),
        category.decision_style.gloss(),
    );
    PersonaProfile { category, description }
}

/// Persona descriptions rephrased by a text-generation backend.
pub struct LlmRenderer<'a> {
    pub backend: &'a dyn LlmBackend,
    pub temperature: f64,
}

impl LlmRenderer<'_> {
    pub fn prompt(category: PersonaCategory) -> String {
        format!(
            "You need to incorporate the following persona attributes and generate a cohesive persona description.\n\
             You need to ensure the description is easy to understand.\n\
             ********\n\
             Big-Five Personality: {}\n\
             Decision-Making Style: {}\n\
             ********",
            category.big_five.label(),
            category.decision_style.label()
        )
    }
}

impl PersonaRenderer for LlmRenderer<'_> {
    fn render(&self, category: PersonaCategory) -> Result<PersonaProfile, CatalogError> {
        let request = CompletionRequest::new(String::new(), vec![(crate::gateway::Role::User, Self::prompt(category))])
            .map_err(CatalogError::Generation)?
            .with_temperature(self.temperature)
            .with_max_tokens(256);
        let completion = self.backend.complete(&request)?;
        let mut description = completion.samples.into_iter().next().unwrap_or_default().trim().to_string();
        if description.is_empty() {
            return Err(CatalogError::Generation(GatewayError::Protocol("empty persona description".into())));
        }
        let lower = description.to_lowercase();
        if !lower.contains(category.big_five.label()) || !lower.contains(category.decision_style.label()) {
            description.push_str(&format!(
                " (Big-Five personality: {}; decision-making style: {}.)",
                category.big_five.label(),
                category.decision_style.label()
            ));
        }
        Ok(PersonaProfile { category, description })
    }
}

#[derive(Deserialize)]
struct RawPersonas {
    big_five: Vec<String>,
    decision_styles: Vec<String>,
}

#[derive(Deserialize)]
struct RawCatalog {
    version: u32,
    personas: RawPersonas,
    judge: JudgePrompts,
    agent_strategy: Vec<AgentStrategy>,
    resisting_strategy: Vec<ResistingStrategy>,
    donate_option: ResponseOption,
}

/// Immutable strategy catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    version: u32,
    hash: String,
    negotiation: Vec<AgentStrategy>,
    persuasion: Vec<AgentStrategy>,
    negotiation_resisting: Vec<ResistingStrategy>,
    persuasion_resisting: Vec<ResistingStrategy>,
    judge: JudgePrompts,
    donate: ResponseOption,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Catalog {
    /// The catalog compiled into the crate, verified against its pinned hash.
    pub fn bundled() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| {
            Catalog::from_bytes(BUNDLED_CATALOG.as_bytes(), Some(BUNDLED_CATALOG_SHA256))
                .expect("bundled catalog is valid")
        })
    }

    pub fn from_path(path: &std::path::Path, expected_sha256: Option<&str>) -> Result<Self, CatalogError> {
        let bytes = std::fs::read(path).map_err(|e| CatalogError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected_sha256)
    }

    pub fn from_bytes(bytes: &[u8], expected_sha256: Option<&str>) -> Result<Self, CatalogError> {
        let hash = sha256_hex(bytes);
        if let Some(expected) = expected_sha256 {
            if !expected.eq_ignore_ascii_case(&hash) {
                return Err(CatalogError::HashMismatch { expected: expected.to_string(), actual: hash });
            }
        }
        let text = std::str::from_utf8(bytes).map_err(|e| CatalogError::Parse(e.to_string()))?;
        let raw: RawCatalog = toml::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;

        let expected_b5: Vec<&str> = BigFive::ALL.iter().map(|b| b.label()).collect();
        let expected_ds: Vec<&str> = DecisionStyle::ALL.iter().map(|d| d.label()).collect();
        if raw.personas.big_five != expected_b5 || raw.personas.decision_styles != expected_ds {
            return Err(CatalogError::Parse("persona dimensions do not match the built-in order".into()));
        }

        let split_agent = |task| raw.agent_strategy.iter().filter(|s| s.task == task).cloned().collect::<Vec<_>>();
        let split_resist =
            |task| raw.resisting_strategy.iter().filter(|s| s.task == task).cloned().collect::<Vec<_>>();
        let catalog = Catalog {
            version: raw.version,
            hash,
            negotiation: split_agent(TaskKind::PriceNegotiation),
            persuasion: split_agent(TaskKind::CharityPersuasion),
            negotiation_resisting: split_resist(TaskKind::PriceNegotiation),
            persuasion_resisting: split_resist(TaskKind::CharityPersuasion),
            judge: raw.judge,
            donate: raw.donate_option,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<(), CatalogError> {
        for (task, expected) in [(TaskKind::PriceNegotiation, 11), (TaskKind::CharityPersuasion, 10)] {
            let strategies = self.agent_strategies(task);
            if strategies.len() != expected {
                return Err(CatalogError::Parse(format!(
                    "{task} needs {expected} agent strategies, found {}",
                    strategies.len()
                )));
            }
            if self.resisting_strategies(task).len() != 8 {
                return Err(CatalogError::Parse(format!("{task} needs 8 resisting strategies")));
            }
            let mut names: Vec<&str> = strategies.iter().map(|s| s.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != expected {
                return Err(CatalogError::Parse(format!("{task} has duplicate strategy names")));
            }
        }
        Ok(())
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Hex SHA-256 of the catalog bytes this instance was loaded from.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn agent_strategies(&self, task: TaskKind) -> &[AgentStrategy] {
        match task {
            TaskKind::PriceNegotiation => &self.negotiation,
            TaskKind::CharityPersuasion => &self.persuasion,
        }
    }

    pub fn resisting_strategies(&self, task: TaskKind) -> &[ResistingStrategy] {
        match task {
            TaskKind::PriceNegotiation => &self.negotiation_resisting,
            TaskKind::CharityPersuasion => &self.persuasion_resisting,
        }
    }

    pub fn strategy_count(&self, task: TaskKind) -> usize {
        self.agent_strategies(task).len()
    }

    pub fn strategy(&self, task: TaskKind, name: &str) -> Result<&AgentStrategy, CatalogError> {
        self.agent_strategies(task)
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CatalogError::Miss { task, name: name.to_string() })
    }

    pub fn strategy_index(&self, task: TaskKind, name: &str) -> Result<usize, CatalogError> {
        self.agent_strategies(task)
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| CatalogError::Miss { task, name: name.to_string() })
    }

    /// Instruction text attached to a strategy, verbatim from the catalog file.
    pub fn strategy_instruction(&self, task: TaskKind, name: &str) -> Result<&str, CatalogError> {
        self.strategy(task, name).map(|s| s.instruction.as_str())
    }

    pub fn resisting_index(&self, task: TaskKind, name: &str) -> Result<usize, CatalogError> {
        self.resisting_strategies(task)
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| CatalogError::Miss { task, name: name.to_string() })
    }

    pub fn judge_prompts(&self) -> &JudgePrompts {
        &self.judge
    }

    pub fn donate_option(&self) -> &ResponseOption {
        &self.donate
    }
}

/// Looks up a strategy instruction in the bundled catalog.
pub fn strategy_instruction(task: TaskKind, name: &str) -> Result<&'static str, CatalogError> {
    Catalog::bundled().strategy_instruction(task, name)
}
