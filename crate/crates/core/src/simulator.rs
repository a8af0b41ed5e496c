//! Persona-conditioned user simulators and training populations.
//!
//! A simulator is either LLM-backed (its replies come from a chat backend
//! prompted with the persona and the resisting-strategy menu) or scripted
//! (a response table plus a susceptibility per agent strategy). Scripted
//! simulators are deterministic given an RNG seed and expose their
//! best-response strategy, which makes tailoring measurable.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    Catalog, CatalogError, PersonaCategory, PersonaProfile, PersonaRenderer, ResistingStrategy, TaskKind,
    TemplateRenderer,
};
use crate::dialogue::{DialogueState, Money, Scenario, ScenarioDetails, Speaker, Utterance};
use crate::gateway::{CompletionRequest, GatewayError, LlmBackend, Role};
use crate::util::derive_seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SimulatorError {
    #[error("population size {size} is not divisible by {categories} persona categories")]
    Balance { size: usize, categories: usize },
    #[error("invalid population: {0}")]
    InvalidPopulation(String),
    #[error("prompt slot {0:?} is missing")]
    Template(&'static str),
    #[error("simulator is for {simulator} but the scenario is {scenario}")]
    TaskMismatch { simulator: TaskKind, scenario: TaskKind },
    #[error("invalid scripted profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Early,
    Late,
}

impl Phase {
    /// Early covers the first half of the turn budget.
    pub fn of_turn(turn: u32, max_turns: u32) -> Phase {
        if turn <= max_turns.div_ceil(2) {
            Phase::Early
        } else {
            Phase::Late
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub agent_strategy: String,
    pub phase: Phase,
    pub resisting_strategy: String,
    /// Reply text; `{price}` expands to the simulator's current asking price.
    pub template: String,
    /// Propensity gained per turn, before scaling by susceptibility.
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Accept once accumulated propensity reaches the threshold.
    Threshold { threshold: f64 },
    /// Accept each turn with probability `delta · susceptibility`.
    Hazard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    pub id: String,
    pub persona: PersonaCategory,
    pub task: TaskKind,
    pub response_table: Vec<ResponseEntry>,
    pub susceptibility: BTreeMap<String, f64>,
    pub acceptance: AcceptanceRule,
    /// Negotiation only: share of the gap between the two targets the seller
    /// concedes at full propensity.
    #[serde(default)]
    pub concession_span: f64,
}

fn resisting_template(task: TaskKind, resisting: &str) -> &'static str {
    match (task, resisting) {
        (TaskKind::PriceNegotiation, "Source Derogation") => "Honestly, your offer makes me doubt you know what this is worth; I want ${price}.",
        (TaskKind::PriceNegotiation, "Counter Argument") => "Comparable listings go for more, so ${price} is a fair number.",
        (TaskKind::PriceNegotiation, "Personal Choice") => "I would rather keep it than let it go for less than ${price}.",
        (TaskKind::PriceNegotiation, "Information Inquiry") => "Before we talk numbers, what would you use it for? I'm at ${price} for now.",
        (TaskKind::PriceNegotiation, "Self Pity") => "Money is tight for me right now, so I really need ${price}.",
        (TaskKind::PriceNegotiation, "Hesitance") => "Let me think about it; maybe ${price} could work.",
        (TaskKind::PriceNegotiation, "Self-assertion") => "My price is ${price}, and that is firm.",
        (TaskKind::PriceNegotiation, _) => "Okay, I hear you; I'm at ${price} right now.",
        (TaskKind::CharityPersuasion, "Source Derogation") => "How do I know this charity actually spends the money well?",
        (TaskKind::CharityPersuasion, "Counter Argument") => "Helping children abroad is really the job of governments, not mine.",
        (TaskKind::CharityPersuasion, "Personal Choice") => "I usually give to causes closer to home.",
        (TaskKind::CharityPersuasion, "Information Inquiry") => "What exactly does Save the Children do with the money?",
        (TaskKind::CharityPersuasion, "Self Pity") => "Things are stressful for me right now and I can't spare anything.",
        (TaskKind::CharityPersuasion, "Hesitance") => "Maybe later, I am not sure yet.",
        (TaskKind::CharityPersuasion, "Self-assertion") => "No, I'm not going to give anything.",
        (TaskKind::CharityPersuasion, _) => "I see, tell me more.",
    }
}

impl ScriptedProfile {
    /// Deterministic profile for one persona instance.
    ///
    /// Each persona category has a single best-response strategy (the
    /// argmax of its susceptibility) and a runner-up; both move the user
    /// far more than the rest. Early replies reveal the Big-Five trait
    /// through a signature resisting strategy, late replies the decision
    /// style. `instance` jitters the numbers so distinct instances differ.
    pub fn generate(task: TaskKind, persona: PersonaCategory, instance: u64, catalog: &Catalog) -> ScriptedProfile {
        let strategies = catalog.agent_strategies(task);
        let n = strategies.len();
        let b = persona.big_five as usize;
        let d = persona.decision_style as usize;
        let best = (b * 4 + d) % n;
        let runner_up = (best + 1 + b) % n;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5eed, &[task as u64, persona.index() as u64, instance]));

        let mut susceptibility = BTreeMap::new();
        for (i, s) in strategies.iter().enumerate() {
            let v = if i == best {
                0.9 + rng.random_range(0.0..0.1)
            } else if i == runner_up {
                0.45 + rng.random_range(0.0..0.1)
            } else {
                rng.random_range(0.05..0.2)
            };
            susceptibility.insert(s.name.clone(), v);
        }

        let early_resist = ["Information Inquiry", "Counter Argument", "Personal Choice", "Hesitance", "Self Pity"][b];
        let late_resist = ["Self-assertion", "Counter Argument", "Personal Choice", "Source Derogation"][d];
        let mut response_table = Vec::with_capacity(n * 2);
        for (i, s) in strategies.iter().enumerate() {
            for phase in [Phase::Early, Phase::Late] {
                let resisting = match phase {
                    Phase::Early => early_resist,
                    Phase::Late if i == best || i == runner_up => "Others",
                    Phase::Late => late_resist,
                };
                response_table.push(ResponseEntry {
                    agent_strategy: s.name.clone(),
                    phase,
                    resisting_strategy: resisting.to_string(),
                    template: resisting_template(task, resisting).to_string(),
                    delta: if phase == Phase::Early { 0.4 } else { 0.3 },
                });
            }
        }
        ScriptedProfile {
            id: format!("{}-{:02}-{instance}", task.short_name(), persona.index()),
            persona,
            task,
            response_table,
            susceptibility,
            acceptance: AcceptanceRule::Threshold { threshold: 1.0 },
            concession_span: 0.5 + 0.1 * d as f64 + rng.random_range(0.0..0.05),
        }
    }

    pub fn validate(&self, catalog: &Catalog) -> Result<(), SimulatorError> {
        for s in catalog.agent_strategies(self.task) {
            for phase in [Phase::Early, Phase::Late] {
                let entry = self
                    .entry(&s.name, phase)
                    .ok_or_else(|| SimulatorError::InvalidProfile(format!("no response for {:?} in {phase:?}", s.name)))?;
                catalog.resisting_index(self.task, &entry.resisting_strategy)?;
                if !entry.delta.is_finite() {
                    return Err(SimulatorError::InvalidProfile("non-finite delta".into()));
                }
            }
            match self.susceptibility.get(&s.name) {
                Some(v) if (0.0..=1.0).contains(v) => {}
                Some(v) => return Err(SimulatorError::InvalidProfile(format!("susceptibility {v} outside [0, 1]"))),
                None => return Err(SimulatorError::InvalidProfile(format!("no susceptibility for {:?}", s.name))),
            }
        }
        if let AcceptanceRule::Threshold { threshold } = self.acceptance {
            if !(threshold > 0.0) {
                return Err(SimulatorError::InvalidProfile("threshold must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn entry(&self, agent_strategy: &str, phase: Phase) -> Option<&ResponseEntry> {
        self.response_table.iter().find(|e| e.agent_strategy == agent_strategy && e.phase == phase)
    }

    pub fn susceptibility_of(&self, agent_strategy: &str) -> f64 {
        self.susceptibility.get(agent_strategy).copied().unwrap_or(0.0)
    }

    /// The agent strategy this persona responds to most, lowest catalog
    /// index on ties.
    pub fn best_response<'c>(&self, catalog: &'c Catalog) -> &'c str {
        let strategies = catalog.agent_strategies(self.task);
        let mut best = &strategies[0];
        for s in strategies {
            if self.susceptibility_of(&s.name) > self.susceptibility_of(&best.name) {
                best = s;
            }
        }
        &best.name
    }
}

/// Per-episode state of a scripted simulator.
#[derive(Clone, Debug)]
pub struct ScriptedUser<'p> {
    profile: &'p ScriptedProfile,
    propensity: f64,
    accepted: bool,
}

impl<'p> ScriptedUser<'p> {
    pub fn new(profile: &'p ScriptedProfile) -> Self {
        ScriptedUser { profile, propensity: 0.0, accepted: false }
    }

    pub fn propensity(&self) -> f64 {
        self.propensity
    }

    pub fn has_accepted(&self) -> bool {
        self.accepted
    }

    /// Current asking price for negotiation scenarios.
    pub fn asking_price(&self, scenario: &Scenario) -> Option<Money> {
        let (seller, buyer) = scenario.targets()?;
        let progress = self.propensity.clamp(0.0, 1.0) * self.profile.concession_span.clamp(0.0, 1.0);
        let gap = (seller.cents() - buyer.cents()) as f64;
        let dollars = ((seller.cents() as f64 - progress * gap) / 100.0).round() as i64;
        Some(Money::from_dollars(dollars))
    }

    /// Reply to the agent's latest utterance. `state` must end with that
    /// agent utterance.
    pub fn respond(&mut self, state: &DialogueState, last_agent_strategy: &str, rng: &mut impl Rng) -> Utterance {
        let turn = state.turn_count + 1;
        let phase = Phase::of_turn(turn, state.max_turns);
        let entry = self.profile.entry(last_agent_strategy, phase);
        let delta = entry.map_or(0.0, |e| e.delta);
        let gain = delta * self.profile.susceptibility_of(last_agent_strategy);
        self.propensity += gain;
        self.accepted = match self.profile.acceptance {
            AcceptanceRule::Threshold { threshold } => self.propensity >= threshold - 1e-12,
            // always draw, so the RNG stream does not depend on the branch
            AcceptanceRule::Hazard => rng.random::<f64>() < gain,
        };

        let price = self.asking_price(&state.scenario);
        if self.accepted {
            let text = match price {
                Some(p) => format!("Alright, you have a deal at ${p}."),
                None => "You have convinced me, I would like to donate to Save the Children.".to_string(),
            };
            return Utterance::user(text, None);
        }
        match entry {
            Some(e) => {
                let text = match price {
                    Some(p) => e.template.replace("{price}", &p.to_string()),
                    None => e.template.clone(),
                };
                Utterance::user(text, Some(e.resisting_strategy.clone()))
            }
            None => Utterance::user("I'm not sure what you mean.", Some("Others".into())),
        }
    }
}

/// Free-function form of [`ScriptedUser::respond`].
pub fn scripted_response(
    user: &mut ScriptedUser<'_>,
    state: &DialogueState,
    last_agent_strategy: &str,
    rng: &mut impl Rng,
) -> Utterance {
    user.respond(state, last_agent_strategy, rng)
}

#[derive(Clone)]
pub enum SimulatorBackend {
    LlmBacked(Arc<dyn LlmBackend>),
    Scripted(ScriptedProfile),
}

impl fmt::Debug for SimulatorBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimulatorBackend::LlmBacked(b) => write!(f, "LlmBacked({})", b.id()),
            SimulatorBackend::Scripted(p) => write!(f, "Scripted({})", p.id),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

impl SimulatorBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            SimulatorBackend::LlmBacked(_) => BackendKind::Remote,
            SimulatorBackend::Scripted(_) => BackendKind::Scripted,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulatorSpec {
    pub id: String,
    pub persona: PersonaProfile,
    pub task: TaskKind,
    pub resisting_strategies: Vec<ResistingStrategy>,
    pub backend: SimulatorBackend,
}

impl SimulatorSpec {
    pub fn new(id: String, persona: PersonaProfile, task: TaskKind, backend: SimulatorBackend, catalog: &Catalog) -> Self {
        SimulatorSpec { id, persona, task, resisting_strategies: catalog.resisting_strategies(task).to_vec(), backend }
    }

    pub fn scripted(profile: ScriptedProfile, catalog: &Catalog) -> Self {
        let persona = crate::catalog::render_persona_description(profile.persona);
        SimulatorSpec::new(profile.id.clone(), persona, profile.task, SimulatorBackend::Scripted(profile.clone()), catalog)
    }

    pub fn category(&self) -> PersonaCategory {
        self.persona.category
    }

    pub fn scripted_profile(&self) -> Option<&ScriptedProfile> {
        match &self.backend {
            SimulatorBackend::Scripted(p) => Some(p),
            SimulatorBackend::LlmBacked(_) => None,
        }
    }
}

/// Training or evaluation population with its sampling distribution.
#[derive(Clone, Debug)]
pub struct Population {
    members: Vec<SimulatorSpec>,
    weights: Vec<f64>,
}

impl Population {
    pub fn new(members: Vec<SimulatorSpec>, weights: Vec<f64>) -> Result<Self, SimulatorError> {
        if members.is_empty() {
            return Err(SimulatorError::InvalidPopulation("no members".into()));
        }
        if members.len() != weights.len() {
            return Err(SimulatorError::InvalidPopulation(format!(
                "{} members but {} weights",
                members.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SimulatorError::InvalidPopulation("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimulatorError::InvalidPopulation(format!("weights sum to {total}, not 1")));
        }
        let task = members[0].task;
        if members.iter().any(|m| m.task != task) {
            return Err(SimulatorError::InvalidPopulation("members disagree on the task".into()));
        }
        Ok(Population { members, weights })
    }

    /// Weights proportional to each member's persona-category frequency.
    pub fn with_frequency_weights(members: Vec<SimulatorSpec>) -> Result<Self, SimulatorError> {
        let mut counts: BTreeMap<PersonaCategory, usize> = BTreeMap::new();
        for m in &members {
            *counts.entry(m.category()).or_default() += 1;
        }
        let raw: Vec<f64> = members.iter().map(|m| counts[&m.category()] as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();
        Population::new(members, weights)
    }

    pub fn single(member: SimulatorSpec) -> Self {
        Population { members: vec![member], weights: vec![1.0] }
    }

    /// Same members, all probability mass on `index`.
    pub fn one_hot(&self, index: usize) -> Result<Self, SimulatorError> {
        if index >= self.members.len() {
            return Err(SimulatorError::InvalidPopulation(format!("no member {index}")));
        }
        let mut weights = vec![0.0; self.members.len()];
        weights[index] = 1.0;
        Population::new(self.members.clone(), weights)
    }

    pub fn members(&self) -> &[SimulatorSpec] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.members[0].task
    }

    /// Members per persona category.
    pub fn category_counts(&self) -> BTreeMap<PersonaCategory, usize> {
        let mut counts = BTreeMap::new();
        for m in &self.members {
            *counts.entry(m.category()).or_default() += 1;
        }
        counts
    }

    pub fn is_disjoint(&self, other: &Population) -> bool {
        self.members.iter().all(|a| other.members.iter().all(|b| a.id != b.id))
    }

    /// Best-response agent strategy of every scripted member.
    pub fn best_responses(&self, catalog: &Catalog) -> Vec<(String, PersonaCategory, String)> {
        self.members
            .iter()
            .filter_map(|m| m.scripted_profile().map(|p| (m.id.clone(), m.category(), p.best_response(catalog).to_string())))
            .collect()
    }

    /// Draws a member index according to the weights.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
    }
}

/// Draws a simulator with probability equal to its weight.
pub fn sample_simulator<'p>(population: &'p Population, rng: &mut impl Rng) -> &'p SimulatorSpec {
    &population.members[population.sample_index(rng)]
}

#[derive(Clone)]
pub enum BackendChoice {
    Scripted,
    LlmBacked(Arc<dyn LlmBackend>),
}

impl fmt::Debug for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Scripted => write!(f, "Scripted"),
            BackendChoice::LlmBacked(b) => write!(f, "LlmBacked({})", b.id()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PopulationOptions {
    /// First instance number; training and evaluation populations use
    /// disjoint ranges.
    pub instance_base: u64,
    pub backend: BackendChoice,
}

impl Default for PopulationOptions {
    fn default() -> Self {
        PopulationOptions { instance_base: 0, backend: BackendChoice::Scripted }
    }
}

/// Instance base used for evaluation populations.
pub const EVAL_INSTANCE_BASE: u64 = 1_000_000;

/// Balanced population: `size / |categories|` members per category.
pub fn build_population(
    task: TaskKind,
    size: usize,
    categories: &[PersonaCategory],
    renderer: &dyn PersonaRenderer,
) -> Result<Population, SimulatorError> {
    build_population_with(task, size, categories, renderer, &PopulationOptions::default(), Catalog::bundled())
}

pub fn build_population_with(
    task: TaskKind,
    size: usize,
    categories: &[PersonaCategory],
    renderer: &dyn PersonaRenderer,
    options: &PopulationOptions,
    catalog: &Catalog,
) -> Result<Population, SimulatorError> {
    if categories.is_empty() || size == 0 || size % categories.len() != 0 {
        return Err(SimulatorError::Balance { size, categories: categories.len() });
    }
    let per_category = size / categories.len();
    let mut members = Vec::with_capacity(size);
    for category in categories {
        for _ in 0..per_category {
            let instance = options.instance_base + members.len() as u64;
            let persona = renderer.render(*category)?;
            let id = format!("{}-{:02}-{instance}", task.short_name(), category.index());
            let backend = match &options.backend {
                BackendChoice::Scripted => {
                    SimulatorBackend::Scripted(ScriptedProfile::generate(task, *category, instance, catalog))
                }
                BackendChoice::LlmBacked(b) => SimulatorBackend::LlmBacked(b.clone()),
            };
            members.push(SimulatorSpec::new(id, persona, task, backend, catalog));
        }
    }
    Population::with_frequency_weights(members)
}

/// Role-play prompt for an LLM-backed simulator. The history is replayed
/// as messages with the agent in the `user` role.
pub fn build_simulator_prompt(
    spec: &SimulatorSpec,
    scenario: &Scenario,
    history: &[Utterance],
    catalog: &Catalog,
) -> Result<CompletionRequest, SimulatorError> {
    if spec.task != scenario.task() {
        return Err(SimulatorError::TaskMismatch { simulator: spec.task, scenario: scenario.task() });
    }
    if spec.persona.description.trim().is_empty() {
        return Err(SimulatorError::Template("persona description"));
    }
    let mut prompt = String::new();
    let strategies = catalog.resisting_strategies(spec.task);
    match &scenario.details {
        ScenarioDetails::PriceNegotiation { item_name, item_description, listing_price, .. } => {
            if item_name.trim().is_empty() {
                return Err(SimulatorError::Template("item name"));
            }
            if item_description.trim().is_empty() {
                return Err(SimulatorError::Template("item description"));
            }
            prompt.push_str("Now enter the role-playing mode. In the following conversation, you will play as a seller in a price bargaining game.\n\n");
            prompt.push_str(&format!("Your persona: {}\n", spec.persona.description));
            prompt.push_str("You must follow the instructions below during chat.\n");
            prompt.push_str("1. Your utterances and bargain behavior need to strictly follow your persona. Varying your wording and avoid repeating yourself verbatim!\n");
            prompt.push_str("2. You can decide to change your target price flexibly based on your persona and the conversation.\n\n");
            prompt.push_str("Your Response Strategy:\n");
            for (i, s) in strategies.iter().enumerate() {
                prompt.push_str(&format!("{}. \"{}\": {}\n", i + 1, s.name, s.explanation));
            }
            prompt.push_str(&format!(
                "\nYou are the seller who is trying to sell the {item_name} with the initial price of {listing_price}. Product description: {item_description}.\n"
            ));
            prompt.push_str("Please reply with only one short and succinct sentence.\n");
        }
        ScenarioDetails::CharityPersuasion { charity_info, .. } => {
            if charity_info.trim().is_empty() {
                return Err(SimulatorError::Template("charity info"));
            }
            prompt.push_str("Now enter the role-playing mode. In the following conversation, you will play as a Persuadee in a persuasion game.\n\n");
            prompt.push_str(&format!("Your persona: {}\n", spec.persona.description));
            prompt.push_str("You must follow the instructions below during chat.\n");
            prompt.push_str("1. Your utterances need to strictly follow your persona. Varying your wording and avoid repeating yourself verbatim!\n");
            prompt.push_str("2. Pretend you have little knowledge about the Save the Children charity. You have little willingness for donation at the beginning of conversation.\n");
            prompt.push_str("3. Your willingness for donation depends on your persona and how influenced you are by the Persuader.\n");
            prompt.push_str("4. You need to determine whether to donate money or not. If you think your are convinced by the Persuader, you should donate money for the charity.\n\n");
            prompt.push_str("Your Response Strategy:\n");
            let donate = catalog.donate_option();
            prompt.push_str(&format!("1. \"{}\": {}\n", donate.name, donate.explanation));
            for (i, s) in strategies.iter().enumerate() {
                prompt.push_str(&format!("{}. \"{}\": {}\n", i + 2, s.name, s.explanation));
            }
            prompt.push_str("\nYou are the Persuadee who is being persuaded by a Persuader. Please reply with only one short and succinct sentence.\n");
        }
    }
    prompt.push_str("\n********\nConversation History\n********");
    let messages = history
        .iter()
        .map(|u| (if u.speaker == Speaker::Agent { Role::User } else { Role::Assistant }, u.text.clone()))
        .collect();
    Ok(CompletionRequest::new(prompt, messages)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestMember {
    id: String,
    persona_index: usize,
    description: String,
    backend: BackendKind,
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PopulationManifest {
    schema_version: u32,
    task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profiles_file: Option<String>,
    members: Vec<ManifestMember>,
}

fn profiles_path_for(manifest: &Path) -> PathBuf {
    let name = manifest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.with_file_name(format!("{name}.profiles.json"))
}

impl Population {
    /// Writes the manifest and, for scripted members, a sibling
    /// `<manifest>.profiles.json` fixture with their susceptibility tables.
    pub fn save(&self, path: &Path) -> Result<(), SimulatorError> {
        let profiles: Vec<&ScriptedProfile> = self.members.iter().filter_map(|m| m.scripted_profile()).collect();
        let profiles_path = profiles_path_for(path);
        let manifest = PopulationManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            task: self.task(),
            profiles_file: (!profiles.is_empty())
                .then(|| profiles_path.file_name().unwrap().to_string_lossy().into_owned()),
            members: self
                .members
                .iter()
                .zip(&self.weights)
                .map(|(m, w)| ManifestMember {
                    id: m.id.clone(),
                    persona_index: m.category().index(),
                    description: m.persona.description.clone(),
                    backend: m.backend.kind(),
                    weight: *w,
                    profile_id: m.scripted_profile().map(|p| p.id.clone()),
                })
                .collect(),
        };
        let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| SimulatorError::Manifest(format!("{}: {e}", p.display())));
        write(path, serde_json::to_string_pretty(&manifest).unwrap())?;
        if !profiles.is_empty() {
            write(&profiles_path, serde_json::to_string_pretty(&profiles).unwrap())?;
        }
        Ok(())
    }

    /// Loads a manifest. Remote members are bound to `remote`.
    pub fn load(path: &Path, remote: Option<Arc<dyn LlmBackend>>, catalog: &Catalog) -> Result<Self, SimulatorError> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| SimulatorError::Manifest(format!("{}: {e}", p.display())));
        let manifest: PopulationManifest =
            serde_json::from_str(&read(path)?).map_err(|e| SimulatorError::Manifest(e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(SimulatorError::Manifest(format!("unsupported schema version {}", manifest.schema_version)));
        }
        let profiles: Vec<ScriptedProfile> = match &manifest.profiles_file {
            Some(name) => serde_json::from_str(&read(&path.with_file_name(name))?)
                .map_err(|e| SimulatorError::Manifest(e.to_string()))?,
            None => Vec::new(),
        };
        let mut members = Vec::with_capacity(manifest.members.len());
        let mut weights = Vec::with_capacity(manifest.members.len());
        for m in manifest.members {
            let category = PersonaCategory::from_index(m.persona_index)
                .ok_or_else(|| SimulatorError::Manifest(format!("persona index {} out of range", m.persona_index)))?;
            let backend = match m.backend {
                BackendKind::Scripted => {
                    let wanted = m.profile_id.as_deref().unwrap_or(&m.id);
                    let profile = profiles
                        .iter()
                        .find(|p| p.id == wanted)
                        .ok_or_else(|| SimulatorError::Manifest(format!("no scripted profile {wanted:?}")))?;
                    profile.validate(catalog)?;
                    SimulatorBackend::Scripted(profile.clone())
                }
                BackendKind::Remote => SimulatorBackend::LlmBacked(
                    remote.clone().ok_or_else(|| SimulatorError::Manifest("remote member but no remote backend".into()))?,
                ),
            };
            let persona = PersonaProfile { category, description: m.description };
            members.push(SimulatorSpec::new(m.id, persona, manifest.task, backend, catalog));
            weights.push(m.weight);
        }
        Population::new(members, weights)
    }
}

/// Balanced scripted population over every persona category.
pub fn scripted_population(task: TaskKind, size: usize, instance_base: u64) -> Result<Population, SimulatorError> {
    build_population_with(
        task,
        size,
        &crate::catalog::enumerate_personas(),
        &TemplateRenderer,
        &PopulationOptions { instance_base, backend: BackendChoice::Scripted },
        Catalog::bundled(),
    )
}
