//! JSON and CSV serialization of session records and aggregates.
//!
//! JSON output is canonical: keys sorted, two-space indentation, trailing
//! newline. CSV uses RFC 4180 quoting with CRLF line endings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{PersonaCatalog, PersonaConfig, Quadrant, Style};
use crate::session::{
    ConfigSnapshot, EndReason, SessionRecord, SessionState, Speaker, TurnEvent,
};
use crate::survey::{aggregate, AggregateTable, Answer, SurveyResponse};

pub const EVENTS_HEADER: [&str; 14] = [
    "session_id",
    "persona_id",
    "style",
    "turn_index",
    "speaker",
    "text",
    "started_at",
    "ended_at",
    "intent",
    "strategy",
    "cutoff_text",
    "remaining_text",
    "raw_played_bytes",
    "flags",
];

pub const SURVEY_HEADER: [&str; 6] = [
    "session_id",
    "participant_id",
    "persona_id",
    "question_id",
    "style",
    "answer",
];

pub const AGGREGATE_HEADER: [&str; 5] = ["quadrant", "style", "metric", "value", "n"];

/// Metric name used for preference rows in the aggregate table.
pub const PREFERENCE_METRIC: &str = "preference_pct";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvTable {
    Events,
    Survey,
    Aggregate,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("session is {0}; only finished sessions can be exported")]
    NotFinished(SessionState),
    #[error("nothing to export")]
    NoRecords,
    #[error("invalid export document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("transcript does not match the event log at turn {0}")]
    TranscriptMismatch(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub turn_index: u32,
    pub speaker: Speaker,
    pub text: String,
}

/// The on-disk form of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub session_id: String,
    pub persona_id: String,
    pub style: Style,
    pub seed: u64,
    pub state: SessionState,
    pub end_reason: Option<EndReason>,
    pub transcript: Vec<TranscriptLine>,
    pub events: Vec<TurnEvent>,
    pub survey: Vec<SurveyResponse>,
    pub config_snapshot: ConfigSnapshot,
}

pub fn transcript(events: &[TurnEvent]) -> Vec<TranscriptLine> {
    events
        .iter()
        .map(|e| TranscriptLine {
            turn_index: e.turn_index,
            speaker: e.speaker,
            text: e.text.clone(),
        })
        .collect()
}

impl ExportBundle {
    pub fn from_record(record: &SessionRecord) -> Self {
        Self {
            session_id: record.session_id.clone(),
            persona_id: record.persona_id.clone(),
            style: record.style,
            seed: record.seed,
            state: record.state,
            end_reason: record.end_reason,
            transcript: transcript(&record.events),
            events: record.events.clone(),
            survey: record.survey.iter().cloned().collect(),
            config_snapshot: record.config_snapshot.clone(),
        }
    }

    pub fn into_record(self) -> Result<SessionRecord, ExportError> {
        let expected = transcript(&self.events);
        if let Some(i) = (0..expected.len().max(self.transcript.len()))
            .find(|&i| expected.get(i) != self.transcript.get(i))
        {
            return Err(ExportError::TranscriptMismatch(i));
        }
        Ok(SessionRecord {
            session_id: self.session_id,
            persona_id: self.persona_id,
            style: self.style,
            seed: self.seed,
            state: self.state,
            end_reason: self.end_reason,
            events: self.events,
            survey: self.survey.into_iter().next(),
            config_snapshot: self.config_snapshot,
        })
    }
}

/// Serializes any value as canonical JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let value = sort_keys(serde_json::to_value(value)?);
    let mut out = serde_json::to_vec_pretty(&value)?;
    out.push(b'\n');
    Ok(out)
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn export_json(record: &SessionRecord) -> Result<Vec<u8>, ExportError> {
    if !matches!(record.state, SessionState::Ended | SessionState::SurveyPending) {
        return Err(ExportError::NotFinished(record.state));
    }
    Ok(canonical_json(&ExportBundle::from_record(record))?)
}

pub fn import_json(bytes: &[u8]) -> Result<SessionRecord, ExportError> {
    let bundle: ExportBundle = serde_json::from_slice(bytes)?;
    bundle.into_record()
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, ExportError> {
    w.into_inner()
        .map_err(|e| ExportError::Csv(csv::Error::from(e.into_error())))
}

pub fn export_csv(records: &[SessionRecord], table: CsvTable) -> Result<Vec<u8>, ExportError> {
    match table {
        CsvTable::Events => events_csv(records),
        CsvTable::Survey => survey_csv(records),
        CsvTable::Aggregate => {
            let responses: Vec<SurveyResponse> =
                records.iter().filter_map(|r| r.survey.clone()).collect();
            aggregate_csv(&aggregate(&responses, &snapshot_catalog(records)))
        }
    }
}

/// Personas as they were when each session ran, first occurrence wins.
pub fn snapshot_catalog(records: &[SessionRecord]) -> PersonaCatalog {
    let mut personas = Vec::new();
    for r in records {
        let p = &r.config_snapshot.persona;
        if !personas.iter().any(|q: &PersonaConfig| q.persona_id == p.persona_id) {
            personas.push(p.clone());
        }
    }
    PersonaCatalog { personas }
}

fn events_csv(records: &[SessionRecord]) -> Result<Vec<u8>, ExportError> {
    if records.is_empty() {
        return Err(ExportError::NoRecords);
    }
    let mut w = writer();
    w.write_record(EVENTS_HEADER)?;
    for r in records {
        for e in &r.events {
            let interruption = e.interruption.as_ref();
            let intent = interruption.map(|i| i.intent).or(e.intent);
            let flags: Vec<&str> = e.flags.iter().map(|f| f.as_str()).collect();
            w.write_record([
                r.session_id.as_str(),
                r.persona_id.as_str(),
                r.style.as_str(),
                &e.turn_index.to_string(),
                speaker_str(e.speaker),
                &e.text,
                &e.started_at.to_string(),
                &e.ended_at.to_string(),
                intent.map_or("", |i| i.as_str()),
                interruption.and_then(|i| i.strategy).map_or("", |s| s.as_str()),
                interruption.map_or("", |i| i.cutoff_text.as_str()),
                interruption.map_or("", |i| i.remaining_text.as_str()),
                &interruption.map_or(String::new(), |i| i.raw_played_bytes.to_string()),
                &flags.join(";"),
            ])?;
        }
    }
    finish(w)
}

fn speaker_str(s: Speaker) -> &'static str {
    match s {
        Speaker::User => "user",
        Speaker::Bot => "bot",
    }
}

fn survey_csv(records: &[SessionRecord]) -> Result<Vec<u8>, ExportError> {
    if records.is_empty() {
        return Err(ExportError::NoRecords);
    }
    let mut w = writer();
    w.write_record(SURVEY_HEADER)?;
    for r in records {
        let Some(s) = &r.survey else { continue };
        for (question_id, answer) in &s.answers {
            let mut row = |style: &str, value: &str| {
                w.write_record([
                    r.session_id.as_str(),
                    s.participant_id.as_str(),
                    s.persona_id.as_str(),
                    question_id.as_str(),
                    style,
                    value,
                ])
            };
            match answer {
                Answer::Likert(ratings) => {
                    for (style, value) in ratings {
                        row(style.as_str(), &value.get().to_string())?;
                    }
                }
                Answer::Choice(c) => row("", c)?,
                Answer::Text(t) => row("", t)?,
            }
        }
    }
    finish(w)
}

/// Long-format aggregate: Likert means to two decimals, then the
/// preference percentage to one decimal, per quadrant and style.
pub fn aggregate_csv(table: &AggregateTable) -> Result<Vec<u8>, ExportError> {
    let mut w = writer();
    w.write_record(AGGREGATE_HEADER)?;
    for quadrant in Quadrant::ALL {
        for style in Style::ALL {
            for (key, stats) in table
                .cells
                .iter()
                .filter(|(k, _)| k.quadrant == quadrant && k.style == style)
            {
                w.write_record([
                    quadrant.as_str(),
                    style.as_str(),
                    key.metric.as_str(),
                    &stats.mean_rounded().to_string(),
                    &stats.n.to_string(),
                ])?;
            }
            if let Some(p) = table.preference(quadrant, style) {
                w.write_record([
                    quadrant.as_str(),
                    style.as_str(),
                    PREFERENCE_METRIC,
                    &p.pct_rounded().to_string(),
                    &p.total.to_string(),
                ])?;
            }
        }
    }
    finish(w)
}
