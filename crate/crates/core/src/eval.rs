//! Evaluation runs, metrics and strategy-sequence distance analysis.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PersonaCategory, TaskKind};
use crate::dialogue::Scenario;
use crate::planner::{PolicyParameters, SelectionMode};
use crate::scalar::Scalar;
use crate::simulator::Population;
use crate::trainer::{run_episode, EpisodeContext, EpisodeError, EpisodeRecord};
use crate::util::{derive_seed, fnv1a64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaRow {
    pub persona: PersonaCategory,
    pub persona_index: usize,
    pub episode_count: usize,
    pub success_rate: f64,
    pub average_turns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_sl_ratio: Option<f64>,
}

/// SR, AT and SL% over the valid episodes of an archive. Failed episodes
/// count with their full turn count and an SL% of 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    pub episode_count: usize,
    pub success_count: usize,
    pub success_rate: f64,
    pub average_turns: f64,
    /// Negotiation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_sl_ratio: Option<f64>,
    pub per_persona: Vec<PersonaRow>,
    /// Episodes excluded because a backend or judge failed.
    pub invalid_episodes: usize,
    /// Set when no valid episode was available.
    pub empty: bool,
}

struct Totals {
    n: usize,
    successes: usize,
    turns: u64,
    sl: f64,
}

impl Totals {
    fn new() -> Self {
        Totals { n: 0, successes: 0, turns: 0, sl: 0.0 }
    }

    fn add<T: Scalar>(&mut self, r: &EpisodeRecord<T>) {
        self.n += 1;
        self.turns += u64::from(r.turns);
        if r.is_success() {
            self.successes += 1;
            self.sl += r.sl_ratio.map_or(0.0, |v| v.as_f64());
        }
    }

    fn rates(&self, task: Option<TaskKind>) -> (f64, f64, Option<f64>) {
        if self.n == 0 {
            return (0.0, 0.0, None);
        }
        let n = self.n as f64;
        let sl = (task == Some(TaskKind::PriceNegotiation)).then(|| self.sl / n);
        (self.successes as f64 / n, self.turns as f64 / n, sl)
    }
}

impl MetricsReport {
    pub fn from_records<T: Scalar>(records: &[EpisodeRecord<T>]) -> Self {
        let task = records.first().map(|r| r.task);
        let mut all = Totals::new();
        let mut invalid = 0;
        let mut by_persona: BTreeMap<PersonaCategory, Totals> = BTreeMap::new();
        for r in records {
            if !r.valid {
                invalid += 1;
                continue;
            }
            all.add(r);
            if let Some(p) = r.persona {
                by_persona.entry(p).or_insert_with(Totals::new).add(r);
            }
        }
        let (success_rate, average_turns, mean_sl_ratio) = all.rates(task);
        let mut per_persona: Vec<PersonaRow> = by_persona
            .iter()
            .map(|(p, t)| {
                let (sr, at, sl) = t.rates(task);
                PersonaRow {
                    persona: *p,
                    persona_index: p.index(),
                    episode_count: t.n,
                    success_rate: sr,
                    average_turns: at,
                    mean_sl_ratio: sl,
                }
            })
            .collect();
        per_persona.sort_by_key(|r| r.persona_index);
        MetricsReport {
            task,
            episode_count: all.n,
            success_count: all.successes,
            success_rate,
            average_turns,
            mean_sl_ratio,
            per_persona,
            invalid_episodes: invalid,
            empty: all.n == 0,
        }
    }

    /// `(persona, metric, value)` rows for radar-style plots.
    pub fn plot_triples(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for row in &self.per_persona {
            let label = row.persona.to_string();
            out.push((label.clone(), "SR".to_string(), row.success_rate));
            out.push((label.clone(), "AT".to_string(), row.average_turns));
            if let Some(sl) = row.mean_sl_ratio {
                out.push((label, "SL%".to_string(), sl));
            }
        }
        out
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "episodes {}  invalid {}  SR {:.4}  AT {:.2}",
            self.episode_count, self.invalid_episodes, self.success_rate, self.average_turns
        );
        if let Some(sl) = self.mean_sl_ratio {
            s.push_str(&format!("  SL% {sl:.4}"));
        }
        s
    }

    /// Tab-separated per-persona table with a header line.
    pub fn persona_table(&self) -> String {
        let mut s = String::from("index\tpersona\tepisodes\tSR\tAT\tSL%\n");
        for r in &self.per_persona {
            let sl = r.mean_sl_ratio.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.2}\t{}\n",
                r.persona_index, r.persona, r.episode_count, r.success_rate, r.average_turns, sl
            ));
        }
        s
    }
}

/// Per-persona rows of an archive.
pub fn per_persona_breakdown<T: Scalar>(records: &[EpisodeRecord<T>]) -> Vec<PersonaRow> {
    MetricsReport::from_records(records).per_persona
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    /// Episodes per (simulator, scenario) pair.
    pub repeats: usize,
    pub selection: SelectionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, repeats: 1, selection: SelectionMode::Greedy }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput<T> {
    pub report: MetricsReport,
    pub records: Vec<EpisodeRecord<T>>,
}

/// One episode per (member, scenario, repeat), run in parallel. Each job
/// seeds its own RNG from its indices and results are collected in job
/// order, so the output does not depend on scheduling.
pub fn evaluate<T: Scalar>(
    params: &PolicyParameters<T>,
    population: &Population,
    scenarios: &[Scenario],
    ctx: &EpisodeContext<'_>,
    config: &EvalConfig,
) -> Result<EvalOutput<T>, EpisodeError> {
    let mut ctx = *ctx;
    ctx.selection = config.selection;
    let jobs: Vec<(usize, usize, usize)> = (0..population.len())
        .flat_map(|m| (0..scenarios.len()).flat_map(move |s| (0..config.repeats).map(move |r| (m, s, r))))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(m, s, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[m as u64, s as u64, r as u64]));
            let id = format!("eval-{m}-{s}-{r}");
            run_episode(params, &population.members()[m], &scenarios[s], &ctx, &mut rng, id).map(|r| r.record)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalOutput { report: MetricsReport::from_records(&records), records })
}

/// Maps a strategy sequence to a point in a vector space.
pub trait SequenceEncoder: Sync {
    fn id(&self) -> String;
    fn encode(&self, sequence: &[String]) -> Vec<f64>;
}

/// Normalized strategy histogram followed by hashed positional bigrams.
#[derive(Clone, Debug)]
pub struct HistogramEncoder {
    strategies: Vec<String>,
    bigram_buckets: usize,
}

impl HistogramEncoder {
    pub fn new(task: TaskKind, catalog: &Catalog) -> Self {
        HistogramEncoder {
            strategies: catalog.agent_strategies(task).iter().map(|s| s.name.clone()).collect(),
            bigram_buckets: 16,
        }
    }

    pub fn with_bigram_buckets(mut self, buckets: usize) -> Self {
        self.bigram_buckets = buckets;
        self
    }
}

impl SequenceEncoder for HistogramEncoder {
    fn id(&self) -> String {
        format!("histogram-bigram{}", self.bigram_buckets)
    }

    fn encode(&self, sequence: &[String]) -> Vec<f64> {
        let k = self.strategies.len();
        let mut v = vec![0.0; k + self.bigram_buckets];
        if sequence.is_empty() {
            return v;
        }
        for s in sequence {
            if let Some(i) = self.strategies.iter().position(|n| n == s) {
                v[i] += 1.0 / sequence.len() as f64;
            }
        }
        if self.bigram_buckets > 0 && sequence.len() > 1 {
            let pairs = sequence.len() - 1;
            for (pos, w) in sequence.windows(2).enumerate() {
                let key = format!("{}|{}|{}", pos.min(3), w[0], w[1]);
                let b = (fnv1a64(key.as_bytes()) % self.bigram_buckets as u64) as usize;
                v[k + b] += 1.0 / pairs as f64;
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub intra_persona: f64,
    pub inter_persona: f64,
    pub encoder_id: String,
    pub sequence_count: usize,
    /// Personas dropped for having fewer than two sequences.
    pub excluded: Vec<PersonaCategory>,
}

impl DistanceReport {
    /// `intra < inter` with the gap at least `margin · inter`.
    pub fn separates(&self, margin: f64) -> bool {
        self.inter_persona - self.intra_persona > margin * self.inter_persona
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistanceError {
    #[error("need at least two personas with two or more sequences each")]
    TooFewGroups,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance over same-group pairs and over cross-group pairs.
pub fn distances_from_embeddings<K: Ord + Clone>(points: &[(K, Vec<f64>)]) -> (f64, f64) {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = euclidean(&points[i].1, &points[j].1);
            if points[i].0 == points[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(intra, n_intra), mean(inter, n_inter))
}

/// Pooled intra- and inter-persona distances of the archive's strategy
/// sequences. Records without a persona or marked invalid are ignored.
pub fn strategy_sequence_distances<T: Scalar>(
    records: &[EpisodeRecord<T>],
    encoder: &dyn SequenceEncoder,
) -> Result<DistanceReport, DistanceError> {
    let mut groups: BTreeMap<PersonaCategory, Vec<&EpisodeRecord<T>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.valid) {
        if let Some(p) = r.persona {
            groups.entry(p).or_default().push(r);
        }
    }
    let mut excluded = Vec::new();
    let mut points = Vec::new();
    for (persona, rs) in &groups {
        if rs.len() < 2 {
            log::warn!("persona {persona} has fewer than two sequences; excluded from distance analysis");
            excluded.push(*persona);
            continue;
        }
        points.extend(rs.iter().map(|r| (*persona, encoder.encode(&r.strategy_sequence))));
    }
    if groups.len() - excluded.len() < 2 {
        return Err(DistanceError::TooFewGroups);
    }
    let (intra, inter) = distances_from_embeddings(&points);
    Ok(DistanceReport {
        intra_persona: intra,
        inter_persona: inter,
        encoder_id: encoder.id(),
        sequence_count: points.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{BigFive, DecisionStyle};
    use crate::dialogue::{Money, Outcome};

    fn record(persona: PersonaCategory, success_turn: Option<u32>, sl: Option<f64>) -> EpisodeRecord<f64> {
        let mut r = EpisodeRecord::open("e".into(), &Scenario::road_bike(), 10);
        r.persona = Some(persona);
        match success_turn {
            Some(t) => {
                r.turns = t;
                r.outcome = Outcome::SuccessDeal { deal_price: Money::from_dollars(200) }.into();
                r.sl_ratio = sl;
            }
            None => {
                r.turns = 10;
                r.outcome = Outcome::FailureMaxTurns.into();
            }
        }
        r
    }

    fn openness() -> PersonaCategory {
        PersonaCategory::new(BigFive::Openness, DecisionStyle::Directive)
    }

    #[test]
    fn arithmetic_oracle() {
        let mut rs: Vec<_> = [2, 4, 6].iter().map(|t| record(openness(), Some(*t), Some(0.5))).collect();
        rs.extend((0..7).map(|_| record(openness(), None, None)));
        let m = MetricsReport::from_records(&rs);
        assert_eq!(m.episode_count, 10);
        assert!((m.success_rate - 0.3).abs() < 1e-15);
        assert!((m.average_turns - 8.2).abs() < 1e-12);
        assert!((m.mean_sl_ratio.unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn all_failures_have_zero_sl() {
        let rs: Vec<_> = (0..5).map(|_| record(openness(), None, None)).collect();
        let m = MetricsReport::from_records(&rs);
        assert_eq!(m.mean_sl_ratio, Some(0.0));
        assert_eq!(m.average_turns, 10.0);
    }

    #[test]
    fn empty_archive_is_flagged() {
        let m = MetricsReport::from_records::<f64>(&[]);
        assert!(m.empty);
        assert_eq!(m.episode_count, 0);
    }

    #[test]
    fn breakdown_partitions_by_persona() {
        let other = PersonaCategory::new(BigFive::Neuroticism, DecisionStyle::Behavioral);
        let mut rs: Vec<_> = (0..19).map(|i| record(openness(), (i < 15).then_some(3), Some(0.4))).collect();
        rs.extend((0..6).map(|_| record(other, None, None)));
        let mut rows = per_persona_breakdown(&rs);
        rows.retain(|r| r.persona == openness());
        assert_eq!(rows.len(), 1);
        assert!((rows[0].success_rate - 15.0 / 19.0).abs() < 1e-15);
        let only: Vec<_> = rs.iter().filter(|r| r.persona == Some(openness())).cloned().collect();
        assert_eq!(per_persona_breakdown(&only).len(), 1);
    }

    #[test]
    fn identical_sequences_have_zero_distances() {
        let enc = HistogramEncoder::new(TaskKind::PriceNegotiation, Catalog::bundled());
        let other = PersonaCategory::new(BigFive::Neuroticism, DecisionStyle::Behavioral);
        let rs: Vec<_> = [openness(), openness(), other, other]
            .iter()
            .map(|p| {
                let mut r = record(*p, None, None);
                r.strategy_sequence = vec!["Greetings".into(), "Ask a question".into()];
                r
            })
            .collect();
        let d = strategy_sequence_distances(&rs, &enc).unwrap();
        assert_eq!((d.intra_persona, d.inter_persona), (0.0, 0.0));
    }

    #[test]
    fn too_few_sequences() {
        let enc = HistogramEncoder::new(TaskKind::PriceNegotiation, Catalog::bundled());
        let rs = vec![record(openness(), None, None), record(openness(), None, None)];
        assert_eq!(strategy_sequence_distances(&rs, &enc), Err(DistanceError::TooFewGroups));
    }
}
