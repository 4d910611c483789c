//! Goal-conditioned reward augmentation of scored preference datasets.
//!
//! Each scored pair (y_w, y_l) with distinct judge scores becomes two
//! goal-conditioned pairs: under goal r_w the chosen response is y_w, and
//! under goal r_l the goal-matching response is y_l, so the ordering swaps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Item, PreferenceDataset, PreferenceTriple, Record, ScoredPair};

/// Prefix template applied before the prompt in text mode.
pub const DEFAULT_TEMPLATE: &str = "Generate responses of score {g}.\n";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
    #[error("template {0:?} is missing the {{g}} placeholder")]
    MissingPlaceholder(String),
    #[error("goal {goal} outside the judge scale [1, {g_max}]")]
    GoalOutOfScale { goal: i64, g_max: u32 },
    #[error("record {id:?} has no judge scores")]
    UnscoredRecord { id: String },
    #[error("record {id:?} has a text prompt; tabular goal encoding needs index prompts")]
    NonIndexPrompt { id: String },
    #[error("extended index {0} cannot be decoded: {1}")]
    BadExtendedIndex(usize, String),
}

/// How a goal is attached to a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum GoalEncoding {
    /// Substitute `{g}` into the template and prepend it to the prompt text.
    Text { template: String },
    /// Extend the prompt index: base * g_max + (g - 1).
    Tabular { g_max: u32 },
}

impl GoalEncoding {
    pub fn default_text() -> Self {
        GoalEncoding::Text {
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

/// A prompt bound to a target score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalConditionedPrompt {
    pub base_prompt: Item,
    pub goal: i64,
    pub rendered: Item,
}

/// One goal-conditioned preference pair plus its origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub triple: PreferenceTriple,
    pub source_id: String,
    pub goal: i64,
}

/// What to do with a pair whose two responses share a judge score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Emit neither conditioned pair.
    #[default]
    Drop,
    /// Emit one pair with the original ordering, conditioned on the shared
    /// score.
    KeepOriginal,
    /// Emit both orderings, both conditioned on the shared score.
    EmitBoth,
}

/// Goal-conditioned reward r_g(x, y) = 1(g = r(x, y)).
pub fn goal_match_reward(g: i64, r: i64) -> i64 {
    i64::from(g == r)
}

/// Attach a goal to a prompt under the given encoding.
pub fn condition_prompt(
    base_prompt: &Item,
    goal: i64,
    encoding: &GoalEncoding,
) -> Result<GoalConditionedPrompt, AugmentError> {
    let rendered = match encoding {
        GoalEncoding::Text { template } => {
            if !template.contains("{g}") {
                return Err(AugmentError::MissingPlaceholder(template.clone()));
            }
            if goal < 1 {
                return Err(AugmentError::GoalOutOfScale {
                    goal,
                    g_max: u32::MAX,
                });
            }
            let prefix = template.replace("{g}", &goal.to_string());
            Item::Text(format!("{prefix}{base_prompt}"))
        }
        GoalEncoding::Tabular { g_max } => {
            if goal < 1 || goal > i64::from(*g_max) {
                return Err(AugmentError::GoalOutOfScale {
                    goal,
                    g_max: *g_max,
                });
            }
            let base = base_prompt
                .as_index("prompt")
                .map_err(|_| AugmentError::NonIndexPrompt {
                    id: base_prompt.to_string(),
                })?;
            Item::Index(base * (*g_max as usize) + (goal as usize - 1))
        }
    };
    Ok(GoalConditionedPrompt {
        base_prompt: base_prompt.clone(),
        goal,
        rendered,
    })
}

/// Invert the tabular encoding: extended index -> (base prompt, goal).
pub fn decode_tabular_prompt(
    extended: usize,
    g_max: u32,
) -> Result<(usize, i64), AugmentError> {
    if g_max == 0 {
        return Err(AugmentError::BadExtendedIndex(extended, "g_max = 0".into()));
    }
    let g_max = g_max as usize;
    Ok((extended / g_max, (extended % g_max) as i64 + 1))
}

fn conditioned_triple(
    id: String,
    pair: &ScoredPair,
    goal: i64,
    chosen: &Item,
    rejected: &Item,
    encoding: &GoalEncoding,
) -> Result<AugmentedPair, AugmentError> {
    let prompt = condition_prompt(&pair.triple.prompt, goal, encoding)?;
    Ok(AugmentedPair {
        triple: PreferenceTriple {
            id,
            prompt: prompt.rendered,
            chosen: chosen.clone(),
            rejected: rejected.clone(),
        },
        source_id: pair.triple.id.clone(),
        goal,
    })
}

/// Turn one scored pair into its goal-conditioned pairs.
///
/// With distinct scores this emits exactly two pairs; the second is
/// conditioned on the rejected response's score, under which the relabeled
/// rewards reverse the ordering.
pub fn augment_pair(
    pair: &ScoredPair,
    tie_policy: TiePolicy,
    encoding: &GoalEncoding,
) -> Result<Vec<AugmentedPair>, AugmentError> {
    let src = &pair.triple.id;
    let (r_w, r_l) = (pair.chosen_score, pair.rejected_score);
    let (yw, yl) = (&pair.triple.chosen, &pair.triple.rejected);
    if r_w != r_l {
        return Ok(vec![
            conditioned_triple(format!("{src}-g{r_w}"), pair, r_w, yw, yl, encoding)?,
            conditioned_triple(format!("{src}-g{r_l}"), pair, r_l, yl, yw, encoding)?,
        ]);
    }
    match tie_policy {
        TiePolicy::Drop => Ok(vec![]),
        TiePolicy::KeepOriginal => Ok(vec![conditioned_triple(
            format!("{src}-g{r_w}"),
            pair,
            r_w,
            yw,
            yl,
            encoding,
        )?]),
        TiePolicy::EmitBoth => Ok(vec![
            conditioned_triple(format!("{src}-g{r_w}"), pair, r_w, yw, yl, encoding)?,
            conditioned_triple(format!("{src}-g{r_l}-swap"), pair, r_l, yl, yw, encoding)?,
        ]),
    }
}

/// Augment every scored record, in input order. With no ties and the default
/// policy the output has exactly twice as many records as the input.
pub fn augment_dataset(
    dataset: &PreferenceDataset,
    tie_policy: TiePolicy,
    encoding: &GoalEncoding,
) -> Result<PreferenceDataset, AugmentError> {
    let mut records = Vec::new();
    let mut extras = serde_json::Map::new();
    let mut dropped = 0usize;
    for record in &dataset.records {
        let scored = match record {
            Record::Scored(s) => s,
            Record::Plain(t) => {
                return Err(AugmentError::UnscoredRecord { id: t.id.clone() });
            }
        };
        let pairs = augment_pair(scored, tie_policy, encoding)?;
        if pairs.is_empty() {
            dropped += 1;
        }
        for pair in pairs {
            let mut extra = serde_json::Map::new();
            extra.insert("source_id".into(), pair.source_id.clone().into());
            extra.insert("goal".into(), pair.goal.into());
            extras.insert(pair.triple.id.clone(), serde_json::Value::Object(extra));
            records.push(Record::Plain(pair.triple));
        }
    }
    let mut out = PreferenceDataset::from_records(records);
    out.provenance
        .insert("score_scale_max".into(), dataset.score_scale_max().into());
    out.provenance.insert("dropped_ties".into(), dropped.into());
    out.provenance.insert(
        "tie_policy".into(),
        serde_json::to_value(tie_policy).expect("tie policy serialization"),
    );
    if !extras.is_empty() {
        out.provenance
            .insert("extra_fields".into(), serde_json::Value::Object(extras));
    }
    Ok(out)
}

/// Wraps prompts with the top of the judge scale, the goal used at
/// evaluation time.
#[derive(Debug, Clone)]
pub struct InferenceConditioner {
    pub encoding: GoalEncoding,
    pub goal: i64,
}

/// Conditioner fixed at g = g_max.
pub fn inference_goal(g_max: u32, encoding: GoalEncoding) -> InferenceConditioner {
    InferenceConditioner {
        encoding,
        goal: i64::from(g_max),
    }
}

impl InferenceConditioner {
    pub fn wrap(&self, base_prompt: &Item) -> Result<GoalConditionedPrompt, AugmentError> {
        condition_prompt(base_prompt, self.goal, &self.encoding)
    }
}
