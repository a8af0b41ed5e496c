//! Fixed-length feature vectors for the planner.
//!
//! Block layout, in order:
//!
//! | block | width | content |
//! |---|---|---|
//! | turn | `max_turns` | one-hot of completed turns (all zero at the start) |
//! | agent | `n_strategies` | frequency of each agent strategy used so far |
//! | resisting | `n_resisting` | frequency of each user resisting strategy so far |
//! | dialogue tail | `hash_buckets` | hashed tokens of the last `tail_utterances` utterances |
//! | mental state | `hash_buckets` | hashed tokens of the inferred mental state |
//! | future actions | `hash_buckets` | hashed tokens of the inferred future actions |
//!
//! Hashed blocks hold term frequencies that sum to 1 (or are all zero).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, TaskKind};
use crate::dialogue::{Speaker, Utterance, DEFAULT_MAX_TURNS};
use crate::scalar::Scalar;
use crate::tom::MentalModel;
use crate::util::{fnv1a64, tokenize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub task: TaskKind,
    pub max_turns: usize,
    pub n_strategies: usize,
    pub n_resisting: usize,
    pub hash_buckets: usize,
    pub tail_utterances: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Turn,
    Agent,
    Resisting,
    Tail,
    Mental,
    Future,
}

impl FeatureLayout {
    pub const DEFAULT_BUCKETS: usize = 32;
    pub const DEFAULT_TAIL: usize = 2;

    pub fn for_task(task: TaskKind, catalog: &Catalog) -> Self {
        FeatureLayout {
            task,
            max_turns: DEFAULT_MAX_TURNS as usize,
            n_strategies: catalog.strategy_count(task),
            n_resisting: catalog.resisting_strategies(task).len(),
            hash_buckets: Self::DEFAULT_BUCKETS,
            tail_utterances: Self::DEFAULT_TAIL,
        }
    }

    pub fn dim(&self) -> usize {
        self.max_turns + self.n_strategies + self.n_resisting + 3 * self.hash_buckets
    }

    pub fn block(&self, block: Block) -> Range<usize> {
        let t = self.max_turns;
        let a = t + self.n_strategies;
        let r = a + self.n_resisting;
        let h = self.hash_buckets;
        match block {
            Block::Turn => 0..t,
            Block::Agent => t..a,
            Block::Resisting => a..r,
            Block::Tail => r..r + h,
            Block::Mental => r + h..r + 2 * h,
            Block::Future => r + 2 * h..r + 3 * h,
        }
    }

    /// Identifies the layout in checkpoints.
    pub fn layout_hash(&self) -> String {
        let text = format!(
            "features-v1|{}|{}|{}|{}|{}|{}",
            self.task.short_name(),
            self.max_turns,
            self.n_strategies,
            self.n_resisting,
            self.hash_buckets,
            self.tail_utterances
        );
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_f64(values: &[f64]) -> Self {
        FeatureVector { values: values.iter().map(|v| T::of(*v)).collect() }
    }
}

fn hash_into(out: &mut [f64], texts: &[&str]) {
    let n = out.len();
    let mut total = 0usize;
    for text in texts {
        for token in tokenize(text) {
            out[(fnv1a64(token.as_bytes()) % n as u64) as usize] += 1.0;
            total += 1;
        }
    }
    if total > 0 {
        for v in out.iter_mut() {
            *v /= total as f64;
        }
    }
}

/// Encodes history and inferred user state. Strategy names unknown to the
/// catalog are ignored.
pub fn encode_features<T: Scalar>(
    history: &[Utterance],
    mental: &MentalModel,
    layout: &FeatureLayout,
    catalog: &Catalog,
) -> FeatureVector<T> {
    let mut v = vec![0.0f64; layout.dim()];
    let turns = history.iter().filter(|u| u.speaker == Speaker::User).count();
    if turns > 0 {
        let turn = layout.block(Block::Turn);
        v[turn.start + turns.min(layout.max_turns) - 1] = 1.0;
    }

    let agent = layout.block(Block::Agent);
    let resisting = layout.block(Block::Resisting);
    let (mut n_agent, mut n_user) = (0usize, 0usize);
    for u in history {
        match u.speaker {
            Speaker::Agent => {
                n_agent += 1;
                if let Some(i) = u.agent_strategy.as_deref().and_then(|s| catalog.strategy_index(layout.task, s).ok()) {
                    if i < layout.n_strategies {
                        v[agent.start + i] += 1.0;
                    }
                }
            }
            Speaker::User => {
                n_user += 1;
                if let Some(i) = u.resisting_strategy.as_deref().and_then(|s| catalog.resisting_index(layout.task, s).ok()) {
                    if i < layout.n_resisting {
                        v[resisting.start + i] += 1.0;
                    }
                }
            }
        }
    }
    if n_agent > 0 {
        v[agent.clone()].iter_mut().for_each(|x| *x /= n_agent as f64);
    }
    if n_user > 0 {
        v[resisting.clone()].iter_mut().for_each(|x| *x /= n_user as f64);
    }

    let tail: Vec<&str> = history.iter().rev().take(layout.tail_utterances).map(|u| u.text.as_str()).collect();
    hash_into(&mut v[layout.block(Block::Tail)], &tail);
    if !mental.is_empty() {
        hash_into(&mut v[layout.block(Block::Mental)], &[&mental.mental_state]);
        hash_into(&mut v[layout.block(Block::Future)], &[&mental.future_actions]);
    }
    FeatureVector { values: v.into_iter().map(T::of).collect() }
}
