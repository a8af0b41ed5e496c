//! A small scripted environment with a known optimal tailored policy.
//!
//! Three personas, each with its own matched strategy. A persona accepts
//! each turn with a fixed hazard that is high for its matched strategy and
//! low otherwise; the hazards are calibrated so that always playing the
//! matched strategy succeeds with probability `matched_rate` within the
//! turn budget and always playing a mismatched one with `mismatched_rate`.
//! Every reply carries the persona's signature resisting strategy, so the
//! persona is identifiable after the first turn.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentVoice, TemplateVoice};
use crate::catalog::{BigFive, Catalog, DecisionStyle, PersonaCategory, TaskKind};
use crate::dialogue::{DialogueState, Scenario, Utterance, DEFAULT_MAX_TURNS};
use crate::planner::sft::CorpusRecord;
use crate::simulator::{AcceptanceRule, Phase, Population, ResponseEntry, ScriptedProfile, ScriptedUser, SimulatorSpec};

#[derive(Clone, Debug)]
pub struct SyntheticEnvironment {
    pub task: TaskKind,
    pub personas: Vec<PersonaCategory>,
    /// Matched strategy index per persona.
    pub matched: Vec<usize>,
    pub matched_rate: f64,
    pub mismatched_rate: f64,
    pub max_turns: u32,
    catalog: &'static Catalog,
}

/// Best policy in the class "fixed opening move, then one strategy per
/// persona", with its exact success rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalPolicy {
    pub opening: usize,
    pub follow_up: Vec<usize>,
    pub success_rate: f64,
}

fn signature(big_five: BigFive) -> &'static str {
    match big_five {
        BigFive::Openness => "Information Inquiry",
        BigFive::Conscientiousness => "Counter Argument",
        BigFive::Extraversion => "Personal Choice",
        BigFive::Agreeableness => "Hesitance",
        BigFive::Neuroticism => "Self Pity",
    }
}

fn signature_text(task: TaskKind, resisting: &str) -> &'static str {
    match (task, resisting) {
        (TaskKind::CharityPersuasion, "Information Inquiry") => "What exactly does Save the Children do with the money?",
        (TaskKind::CharityPersuasion, "Personal Choice") => "I usually give to causes closer to home.",
        (TaskKind::CharityPersuasion, _) => "Things are stressful for me right now and I can't spare anything.",
        (TaskKind::PriceNegotiation, "Information Inquiry") => "What would you use it for? I'm at ${price} for now.",
        (TaskKind::PriceNegotiation, "Personal Choice") => "I would rather keep it than sell it below ${price}.",
        (TaskKind::PriceNegotiation, _) => "Money is tight for me, so I really need ${price}.",
    }
}

impl SyntheticEnvironment {
    /// The reference configuration: success 0.9 when matched, 0.2 when not.
    pub fn new(task: TaskKind) -> Self {
        SyntheticEnvironment {
            task,
            personas: vec![
                PersonaCategory::new(BigFive::Openness, DecisionStyle::Analytical),
                PersonaCategory::new(BigFive::Extraversion, DecisionStyle::Conceptual),
                PersonaCategory::new(BigFive::Neuroticism, DecisionStyle::Behavioral),
            ],
            matched: vec![1, 4, 7],
            matched_rate: 0.9,
            mismatched_rate: 0.2,
            max_turns: DEFAULT_MAX_TURNS,
            catalog: Catalog::bundled(),
        }
    }

    pub fn catalog(&self) -> &'static Catalog {
        self.catalog
    }

    pub fn strategy_count(&self) -> usize {
        self.catalog.strategy_count(self.task)
    }

    /// Per-turn acceptance probability that compounds to `rate` over the budget.
    pub fn per_turn_hazard(&self, rate: f64) -> f64 {
        1.0 - (1.0 - rate).powf(1.0 / f64::from(self.max_turns))
    }

    /// `(matched, mismatched)` per-turn hazards.
    pub fn hazards(&self) -> (f64, f64) {
        (self.per_turn_hazard(self.matched_rate), self.per_turn_hazard(self.mismatched_rate))
    }

    fn hazard(&self, persona: usize, action: usize) -> f64 {
        let (m, x) = self.hazards();
        if self.matched[persona] == action {
            m
        } else {
            x
        }
    }

    /// Matched strategy names, one per persona.
    pub fn best_responses(&self) -> Vec<String> {
        let strategies = self.catalog.agent_strategies(self.task);
        self.matched.iter().map(|i| strategies[*i].name.clone()).collect()
    }

    pub fn profile(&self, persona: usize) -> ScriptedProfile {
        let category = self.personas[persona];
        let resisting = signature(category.big_five);
        let template = signature_text(self.task, resisting);
        let mut susceptibility = BTreeMap::new();
        let mut response_table = Vec::new();
        for (i, s) in self.catalog.agent_strategies(self.task).iter().enumerate() {
            susceptibility.insert(s.name.clone(), self.hazard(persona, i));
            for phase in [Phase::Early, Phase::Late] {
                response_table.push(ResponseEntry {
                    agent_strategy: s.name.clone(),
                    phase,
                    resisting_strategy: resisting.to_string(),
                    template: template.to_string(),
                    delta: 1.0,
                });
            }
        }
        ScriptedProfile {
            id: format!("synthetic-{}-{persona}", self.task.short_name()),
            persona: category,
            task: self.task,
            response_table,
            susceptibility,
            acceptance: AcceptanceRule::Hazard,
            concession_span: 0.5,
        }
    }

    pub fn simulators(&self) -> Vec<SimulatorSpec> {
        (0..self.personas.len()).map(|p| SimulatorSpec::scripted(self.profile(p), self.catalog)).collect()
    }

    /// All personas with equal weight.
    pub fn population(&self) -> Population {
        Population::with_frequency_weights(self.simulators()).expect("three distinct personas")
    }

    /// Only `persona`: the single-simulator training setup.
    pub fn single(&self, persona: usize) -> Population {
        Population::single(self.simulators().swap_remove(persona))
    }

    pub fn scenario(&self) -> Scenario {
        Scenario::reference(self.task)
    }

    /// Probability that `persona` accepts within the budget when the agent
    /// plays `actions[t]` on turn `t`.
    pub fn success_probability(&self, persona: usize, actions: &[usize]) -> f64 {
        let refuse: f64 = actions.iter().take(self.max_turns as usize).map(|a| 1.0 - self.hazard(persona, *a)).product();
        1.0 - refuse
    }

    /// Success rate, averaged over personas, of the uniform random policy.
    pub fn uniform_success_rate(&self) -> f64 {
        let k = self.strategy_count() as f64;
        let (m, x) = self.hazards();
        let per_turn = (m + (k - 1.0) * x) / k;
        1.0 - (1.0 - per_turn).powi(self.max_turns as i32)
    }

    /// Exhaustive search over opening moves and per-persona follow-ups.
    pub fn optimum(&self) -> OptimalPolicy {
        let k = self.strategy_count();
        let n = self.personas.len();
        let mut best = OptimalPolicy { opening: 0, follow_up: vec![0; n], success_rate: -1.0 };
        let combos = k.pow(n as u32);
        for opening in 0..k {
            for code in 0..combos {
                let follow_up: Vec<usize> = (0..n).map(|p| (code / k.pow(p as u32)) % k).collect();
                let rate = (0..n)
                    .map(|p| {
                        let mut actions = vec![follow_up[p]; self.max_turns as usize];
                        actions[0] = opening;
                        self.success_probability(p, &actions)
                    })
                    .sum::<f64>()
                    / n as f64;
                if rate > best.success_rate + 1e-15 {
                    best = OptimalPolicy { opening, follow_up, success_rate: rate };
                }
            }
        }
        best
    }

    /// Decision points from rollouts of the optimal tailored policy, each
    /// labeled with the strategy that policy plays there.
    pub fn expert_corpus(&self, size: usize, seed: u64) -> Vec<CorpusRecord> {
        let optimum = self.optimum();
        let strategies = self.catalog.agent_strategies(self.task);
        let profiles: Vec<ScriptedProfile> = (0..self.personas.len()).map(|p| self.profile(p)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(size);
        while records.len() < size {
            let persona = rng.random_range(0..profiles.len());
            let mut user = ScriptedUser::new(&profiles[persona]);
            let mut state = DialogueState::new(self.scenario(), self.max_turns);
            for turn in 0..self.max_turns {
                if records.len() >= size {
                    break;
                }
                let action = if turn == 0 { optimum.opening } else { optimum.follow_up[persona] };
                let name = &strategies[action].name;
                records.push(CorpusRecord { task: self.task, history: state.history.clone(), label: name.clone() });
                let text = TemplateVoice.utter(&state, name, self.catalog).expect("template voice");
                state = state.advance(Utterance::agent(text, name.clone())).expect("alternation");
                let reply = user.respond(&state, name, &mut rng);
                state = state.advance(reply).expect("alternation");
                if user.has_accepted() {
                    break;
                }
            }
        }
        records
    }
}
