//! Post-session comparative survey: rendering, response validation and
//! per-quadrant aggregation.
//!
//! Likert questions are asked once per style the participant experienced
//! with a persona, so one response carries up to three ratings per metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PersonaCatalog, Quadrant, QuestionKind, SessionConfig, Style};

/// A rating on the three-point scale {-1, 0, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub struct LikertValue(i8);

impl LikertValue {
    pub const NEGATIVE: LikertValue = LikertValue(-1);
    pub const NEUTRAL: LikertValue = LikertValue(0);
    pub const POSITIVE: LikertValue = LikertValue(1);

    pub fn new(value: i8) -> Option<Self> {
        (-1..=1).contains(&value).then_some(Self(value))
    }

    pub fn get(self) -> i8 {
        self.0
    }
}

impl TryFrom<i8> for LikertValue {
    type Error = String;

    fn try_from(value: i8) -> Result<Self, Self::Error> {
        Self::new(value).ok_or_else(|| format!("likert value {value} is outside {{-1, 0, 1}}"))
    }
}

impl From<LikertValue> for i8 {
    fn from(v: LikertValue) -> i8 {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    /// One rating per style.
    Likert(BTreeMap<Style, LikertValue>),
    Choice(String),
    Text(String),
}

impl Answer {
    fn kind(&self) -> QuestionKind {
        match self {
            Answer::Likert(_) => QuestionKind::Likert,
            Answer::Choice(_) => QuestionKind::ForcedChoice,
            Answer::Text(_) => QuestionKind::FreeText,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant_id: String,
    /// Persona the block was about; used to find its quadrant.
    pub persona_id: String,
    #[serde(default)]
    pub session_ids_compared: Vec<String>,
    pub answers: BTreeMap<String, Answer>,
    /// Milliseconds from the start of the session that collected it.
    #[serde(default)]
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SurveyError {
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("question {question}: expected a {expected:?} answer")]
    WrongKind {
        question: String,
        expected: QuestionKind,
    },
    #[error("question {question}: {choice:?} is not one of the offered choices")]
    InvalidChoice { question: String, choice: String },
    #[error("question {question}: style {style} was not part of this block")]
    StyleNotInBlock { question: String, style: Style },
    #[error("question {0}: no rating given")]
    EmptyLikert(String),
    #[error("response is for persona {got:?}, survey was for {expected:?}")]
    WrongPersona { expected: String, got: String },
}

/// Checks a response against the question definitions.
pub fn validate_response(cfg: &SessionConfig, response: &SurveyResponse) -> Result<(), SurveyError> {
    for (question_id, answer) in &response.answers {
        let question = cfg
            .question(question_id)
            .ok_or_else(|| SurveyError::UnknownQuestion(question_id.clone()))?;
        if answer.kind() != question.kind {
            return Err(SurveyError::WrongKind {
                question: question_id.clone(),
                expected: question.kind,
            });
        }
        match answer {
            Answer::Choice(choice) if !question.choices.contains(choice) => {
                return Err(SurveyError::InvalidChoice {
                    question: question_id.clone(),
                    choice: choice.clone(),
                });
            }
            Answer::Likert(ratings) if ratings.is_empty() => {
                return Err(SurveyError::EmptyLikert(question_id.clone()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// The sessions one participant had with one persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaBlock {
    pub persona_id: String,
    pub display_name: String,
    /// Session id per style experienced.
    pub sessions: BTreeMap<Style, String>,
}

impl PersonaBlock {
    pub fn styles(&self) -> impl Iterator<Item = Style> + '_ {
        self.sessions.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyItem {
    /// `question_id` or `question_id.STYLE` for per-style Likert items.
    pub item_id: String,
    pub question_id: String,
    pub kind: QuestionKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<Style>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyDocument {
    pub persona_id: String,
    pub display_name: String,
    pub consent_text: String,
    pub session_ids_compared: Vec<String>,
    pub items: Vec<SurveyItem>,
}

impl SurveyDocument {
    /// Rejects answers that refer to items this document did not render.
    pub fn check(&self, response: &SurveyResponse) -> Result<(), SurveyError> {
        if response.persona_id != self.persona_id {
            return Err(SurveyError::WrongPersona {
                expected: self.persona_id.clone(),
                got: response.persona_id.clone(),
            });
        }
        for (question_id, answer) in &response.answers {
            let mut items = self.items.iter().filter(|i| &i.question_id == question_id).peekable();
            if items.peek().is_none() {
                return Err(SurveyError::UnknownQuestion(question_id.clone()));
            }
            match answer {
                Answer::Likert(ratings) => {
                    let offered: BTreeSet<Style> = items.filter_map(|i| i.style).collect();
                    if let Some(style) = ratings.keys().find(|s| !offered.contains(s)) {
                        return Err(SurveyError::StyleNotInBlock {
                            question: question_id.clone(),
                            style: *style,
                        });
                    }
                }
                Answer::Choice(choice) => {
                    if !items.any(|i| i.choices.contains(choice)) {
                        return Err(SurveyError::InvalidChoice {
                            question: question_id.clone(),
                            choice: choice.clone(),
                        });
                    }
                }
                Answer::Text(_) => {}
            }
        }
        Ok(())
    }
}

/// Instantiates the configured questions for a persona block, in config
/// order. Likert questions repeat per style; the style-preference question
/// offers only the block's styles and is left out when there is nothing to
/// compare.
pub fn render_survey(cfg: &SessionConfig, block: &PersonaBlock) -> SurveyDocument {
    let styles: Vec<Style> = block.styles().collect();
    let mut items = Vec::new();
    for q in &cfg.survey {
        match q.kind {
            QuestionKind::Likert => {
                for &style in &styles {
                    items.push(SurveyItem {
                        item_id: format!("{}.{}", q.question_id, style.as_str()),
                        question_id: q.question_id.clone(),
                        kind: q.kind,
                        prompt: q.prompt.clone(),
                        style: Some(style),
                        choices: Vec::new(),
                    });
                }
            }
            QuestionKind::ForcedChoice if q.is_style_preference() => {
                let choices: Vec<String> = q
                    .choices
                    .iter()
                    .filter(|c| Style::parse(c).is_some_and(|s| styles.contains(&s)))
                    .cloned()
                    .collect();
                if choices.len() >= 2 {
                    items.push(SurveyItem {
                        item_id: q.question_id.clone(),
                        question_id: q.question_id.clone(),
                        kind: q.kind,
                        prompt: q.prompt.clone(),
                        style: None,
                        choices,
                    });
                }
            }
            QuestionKind::ForcedChoice | QuestionKind::FreeText => items.push(SurveyItem {
                item_id: q.question_id.clone(),
                question_id: q.question_id.clone(),
                kind: q.kind,
                prompt: q.prompt.clone(),
                style: None,
                choices: q.choices.clone(),
            }),
        }
    }
    SurveyDocument {
        persona_id: block.persona_id.clone(),
        display_name: block.display_name.clone(),
        consent_text: cfg.consent_text.clone(),
        session_ids_compared: block.sessions.values().cloned().collect(),
        items,
    }
}

/// Rounds `num / den` half away from zero to an integer. `den` > 0.
fn round_ratio(num: i128, den: i128) -> i64 {
    debug_assert!(den > 0);
    let q = (2 * num.abs() + den) / (2 * den);
    (if num < 0 { -q } else { q }) as i64
}

/// Fixed-point decimal with a given number of fractional digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fixed {
    pub scaled: i64,
    pub digits: u32,
}

impl Fixed {
    pub fn to_f64(self) -> f64 {
        self.scaled as f64 / 10f64.powi(self.digits as i32)
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = 10i64.pow(self.digits);
        let sign = if self.scaled < 0 { "-" } else { "" };
        let abs = self.scaled.unsigned_abs();
        if self.digits == 0 {
            return write!(f, "{sign}{abs}");
        }
        write!(
            f,
            "{sign}{}.{:0width$}",
            abs / unit as u64,
            abs % unit as u64,
            width = self.digits as usize
        )
    }
}

/// Sum and count of the ratings in one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellStats {
    pub sum: i64,
    pub n: u64,
}

impl CellStats {
    pub fn mean(&self) -> f64 {
        self.sum as f64 / self.n as f64
    }

    /// Mean to two decimals, half away from zero.
    pub fn mean_rounded(&self) -> Fixed {
        Fixed {
            scaled: round_ratio(100 * self.sum as i128, self.n as i128),
            digits: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreferenceStats {
    pub votes: u64,
    /// Preference votes cast in the quadrant.
    pub total: u64,
}

impl PreferenceStats {
    pub fn pct(&self) -> f64 {
        self.votes as f64 * 100.0 / self.total as f64
    }

    /// Percentage to one decimal.
    pub fn pct_rounded(&self) -> Fixed {
        Fixed {
            scaled: round_ratio(1000 * self.votes as i128, self.total as i128),
            digits: 1,
        }
    }
}

/// Key of a Likert cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub quadrant: Quadrant,
    pub style: Style,
    pub metric: String,
}

/// Ratings and preferences grouped by quadrant and style. Cells without
/// data are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AggregateTable {
    pub cells: BTreeMap<CellKey, CellStats>,
    pub preferences: BTreeMap<(Quadrant, Style), PreferenceStats>,
}

impl AggregateTable {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty() && self.preferences.is_empty()
    }

    pub fn cell(&self, quadrant: Quadrant, style: Style, metric: &str) -> Option<CellStats> {
        self.cells
            .get(&CellKey {
                quadrant,
                style,
                metric: metric.to_string(),
            })
            .copied()
    }

    pub fn preference(&self, quadrant: Quadrant, style: Style) -> Option<PreferenceStats> {
        self.preferences.get(&(quadrant, style)).copied()
    }

    /// Likert metric names, sorted.
    pub fn metrics(&self) -> BTreeSet<&str> {
        self.cells.keys().map(|k| k.metric.as_str()).collect()
    }
}

/// Pools responses by the quadrant of their persona. Responses for
/// personas without a quadrant, or unknown to the catalog, are skipped.
/// A forced-choice answer naming a style counts as a preference vote.
pub fn aggregate(responses: &[SurveyResponse], catalog: &PersonaCatalog) -> AggregateTable {
    let mut table = AggregateTable::default();
    let mut quadrant_votes: BTreeMap<Quadrant, u64> = BTreeMap::new();
    for response in responses {
        let Some(quadrant) = catalog.get(&response.persona_id).and_then(|p| p.quadrant) else {
            continue;
        };
        for (question_id, answer) in &response.answers {
            match answer {
                Answer::Likert(ratings) => {
                    for (&style, value) in ratings {
                        let cell = table
                            .cells
                            .entry(CellKey {
                                quadrant,
                                style,
                                metric: question_id.clone(),
                            })
                            .or_default();
                        cell.sum += i64::from(value.get());
                        cell.n += 1;
                    }
                }
                Answer::Choice(choice) => {
                    if let Some(style) = Style::parse(choice) {
                        table.preferences.entry((quadrant, style)).or_default().votes += 1;
                        *quadrant_votes.entry(quadrant).or_default() += 1;
                    }
                }
                Answer::Text(_) => {}
            }
        }
    }
    for ((quadrant, _), stats) in table.preferences.iter_mut() {
        stats.total = quadrant_votes[quadrant];
    }
    table
}
