//! Scripted sessions: replay a timed list of participant actions against
//! the mock providers with a manual clock.
//!
//! ```text
//! # comment
//! persona drill_sergeant
//! style B
//! max_turns 4
//! @1200 barge_in 80% No, listen to me!
//! @2000 complete
//! @3000 user Sir, yes sir.
//! @9000 survey {"participant_id": "p1", "persona_id": "drill_sergeant", "answers": {}}
//! ```
//!
//! `barge_in` takes the played amount of the utterance currently being
//! spoken, in bytes or as a percentage. Times must not decrease. A session
//! still running when the script ends is aborted.

use std::sync::Arc;

use duplexkit_core::config::ModelConfig;
use duplexkit_core::providers::ProviderSet;
use duplexkit_core::session::{ManualClock, SessionError, SessionParams};
use duplexkit_core::survey::SurveyResponse;
use duplexkit_core::{ConfigError, Session, SessionRecord, SessionState, Style, StudyConfig};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Played {
    Bytes(u64),
    Percent(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptAction {
    User(String),
    BargeIn { played: Played, text: String },
    Complete,
    Abort,
    Survey(SurveyResponse),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptStep {
    pub at_ms: u64,
    pub line: usize,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub persona_id: String,
    pub style: Style,
    pub max_turns: Option<u32>,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: time {at_ms} is earlier than the previous step")]
    TimeWentBackwards { line: usize, at_ms: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("line {line}: {source}")]
    Session { line: usize, source: SessionError },
    #[error("line {line}: no bot utterance is playing")]
    NothingPlaying { line: usize },
}

fn syntax(line: usize, message: impl Into<String>) -> ScriptError {
    ScriptError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_played(line: usize, token: &str) -> Result<Played, ScriptError> {
    let parsed = match token.strip_suffix('%') {
        Some(pct) => pct.parse().ok().filter(|p| *p <= 100).map(Played::Percent),
        None => token.parse().ok().map(Played::Bytes),
    };
    parsed.ok_or_else(|| syntax(line, format!("bad played amount {token:?}")))
}

pub fn parse_script(text: &str) -> Result<Script, ScriptError> {
    let mut persona_id = None;
    let mut style = None;
    let mut max_turns = None;
    let mut steps: Vec<ScriptStep> = Vec::new();

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (head, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        let rest = rest.trim();

        let Some(at) = head.strip_prefix('@') else {
            match head {
                "persona" if !rest.is_empty() => persona_id = Some(rest.to_string()),
                "style" => {
                    style = Some(Style::parse(rest).ok_or_else(|| syntax(line, "style must be A, B or C"))?)
                }
                "max_turns" => {
                    let n: u32 = rest.parse().map_err(|_| syntax(line, "max_turns needs a number"))?;
                    if n == 0 {
                        return Err(syntax(line, "max_turns must be at least 1"));
                    }
                    max_turns = Some(n);
                }
                _ => return Err(syntax(line, format!("unknown header {head:?}"))),
            }
            continue;
        };

        let at_ms: u64 = at.parse().map_err(|_| syntax(line, "bad time"))?;
        if steps.last().is_some_and(|s| s.at_ms > at_ms) {
            return Err(ScriptError::TimeWentBackwards { line, at_ms });
        }
        let (verb, args) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        let args = args.trim();
        let action = match verb {
            "user" if !args.is_empty() => ScriptAction::User(args.to_string()),
            "barge_in" => {
                let (amount, words) = args.split_once(char::is_whitespace).unwrap_or((args, ""));
                ScriptAction::BargeIn {
                    played: parse_played(line, amount)?,
                    text: words.trim().to_string(),
                }
            }
            "complete" => ScriptAction::Complete,
            "abort" => ScriptAction::Abort,
            "survey" => ScriptAction::Survey(
                serde_json::from_str(args).map_err(|e| syntax(line, format!("survey: {e}")))?,
            ),
            _ => return Err(syntax(line, format!("unknown action {rest:?}"))),
        };
        steps.push(ScriptStep { at_ms, line, action });
    }

    Ok(Script {
        persona_id: persona_id.ok_or_else(|| syntax(0, "missing persona header"))?,
        style: style.ok_or_else(|| syntax(0, "missing style header"))?,
        max_turns,
        steps,
    })
}

/// Deterministic id for a scripted run.
pub fn script_session_id(script: &Script, seed: u64) -> String {
    format!("script-{}-{}-{}", script.persona_id, script.style, seed)
}

/// Runs `script` with mock providers and returns the finished record.
pub async fn run_script(script: &Script, study: &StudyConfig, seed: u64) -> Result<SessionRecord, ScriptError> {
    let mut params = SessionParams::from_study(
        study,
        &script.persona_id,
        script.style,
        seed,
        script_session_id(script, seed),
    )?;
    params.model_cfg = ModelConfig::all_mock();
    if let Some(n) = script.max_turns {
        params.session_cfg.max_turns = n;
    }

    let clock = Arc::new(ManualClock::new(0));
    let (mut session, step) = Session::start(params, Arc::new(ProviderSet::mock()), clock.clone()).await;
    session.settle(step).await;

    for step in &script.steps {
        clock.set(step.at_ms);
        let line = step.line;
        let wrap = |source| ScriptError::Session { line, source };
        match &step.action {
            ScriptAction::User(text) => {
                let next = session.on_user_utterance_complete(text).await.map_err(wrap)?;
                session.settle(next).await;
            }
            ScriptAction::BargeIn { played, text } => {
                let (utterance_id, total) = session.speaking().ok_or(ScriptError::NothingPlaying { line })?;
                let bytes = match *played {
                    Played::Bytes(b) => b,
                    Played::Percent(p) => total * u64::from(p) / 100,
                };
                let next = session.on_barge_in(utterance_id, bytes, text).await.map_err(wrap)?;
                session.settle(next).await;
            }
            ScriptAction::Complete => {
                let (utterance_id, _) = session.speaking().ok_or(ScriptError::NothingPlaying { line })?;
                session.on_bot_utterance_complete(utterance_id).map_err(wrap)?;
            }
            ScriptAction::Abort => {
                session.abort();
            }
            ScriptAction::Survey(response) => {
                session.submit_survey(response.clone()).map_err(wrap)?;
            }
        }
    }

    if !matches!(session.state(), SessionState::SurveyPending | SessionState::Ended) {
        session.abort();
    }
    Ok(session.into_record())
}
