//! Bounded exhaustive walk over session inputs. Shared by the core
//! lifecycle tests and the acceptance harness.
//!
//! Generation jobs are held by the walker, so every interleaving of user
//! input with outstanding LLM calls (including superseded results) is
//! explored. States are deduplicated on an abstract key.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use duplexkit_core::providers::mock::mock_completion;
use duplexkit_core::providers::{DialogueTurn, LlmProvider, ProviderError, ProviderRequestContext, ProviderSet};
use duplexkit_core::session::{
    EndReason, GenerationJob, ManualClock, Output, Session, SessionParams, SessionState, Speaker,
};
use duplexkit_core::survey::{Answer, LikertValue, SurveyResponse};
use duplexkit_core::{StudyConfig, Style};

const EXIT: &str = "[EXIT]";

/// Mock LLM that also ends the conversation on its own when asked to wrap up.
struct WalkLlm;

#[async_trait]
impl LlmProvider for WalkLlm {
    async fn generate(
        &self,
        system_prompt: &str,
        history: &[DialogueTurn],
        _ctx: &ProviderRequestContext,
    ) -> Result<String, ProviderError> {
        let last_user = history.iter().rev().find(|t| t.speaker == Speaker::User);
        if last_user.is_some_and(|t| t.text.contains("wrap up")) {
            return Ok(format!("Fine. {EXIT} We are finished here. {EXIT}"));
        }
        Ok(mock_completion(system_prompt, history))
    }
}

/// Transition table written out independently of the implementation.
fn legal(from: SessionState, to: SessionState) -> bool {
    use SessionState::*;
    const EDGES: &[(SessionState, SessionState)] = &[
        (Idle, BotSpeaking),
        (BotSpeaking, ListeningForUser),
        (BotSpeaking, ProcessingInterrupt),
        (ListeningForUser, GeneratingReply),
        (ProcessingInterrupt, GeneratingReply),
        (GeneratingReply, BotSpeaking),
        (BotSpeaking, SurveyPending),
        (ListeningForUser, SurveyPending),
        (SurveyPending, Ended),
    ];
    EDGES.contains(&(from, to)) || (to == Ended && from != Ended)
}

#[derive(Debug, Clone, Copy)]
enum Input {
    Complete,
    CompleteStale,
    User(&'static str),
    BargeIn { percent: u64, text: &'static str },
    RunJob,
    RunStaleJob,
    Survey,
    BadSurvey,
    Abort,
}

const INPUTS: &[Input] = &[
    Input::Complete,
    Input::CompleteStale,
    Input::User("Tell me about the drills."),
    Input::User("Let's wrap up here."),
    Input::User("goodbye"),
    Input::BargeIn { percent: 50, text: "No, listen to me!" },
    Input::BargeIn { percent: 0, text: "" },
    Input::BargeIn { percent: 100, text: "What about lunch?" },
    Input::BargeIn { percent: 30, text: "uh-huh" },
    Input::RunJob,
    Input::RunStaleJob,
    Input::Survey,
    Input::BadSurvey,
    Input::Abort,
];

#[derive(Clone)]
struct Node {
    session: Session,
    held: Option<GenerationJob>,
    stale: Option<GenerationJob>,
}

#[derive(Debug, Default)]
pub struct WalkStats {
    pub nodes: usize,
    pub edges_seen: BTreeSet<(SessionState, SessionState)>,
    pub end_reasons: BTreeSet<String>,
}

fn key(n: &Node, max_turns: u32) -> String {
    let r = n.session.record();
    let last_user = r.events.iter().rev().find(|e| e.speaker == Speaker::User).map(|e| e.text.as_str());
    let last_strategy = r.events.iter().rev().find_map(|e| e.interruption.as_ref()).map(|i| i.strategy);
    format!(
        "{:?}|{}|{}|{}|{:?}|{:?}|{}|{}|{:?}|{:?}",
        r.state,
        r.user_turns().min(max_turns + 2),
        n.session.has_pending_generation(),
        n.held.is_some(),
        n.stale.is_some(),
        n.session.speaking().is_some(),
        r.end_reason.map_or("-", EndReason::as_str),
        r.survey.is_some(),
        last_user,
        last_strategy,
    )
}

fn survey(persona_id: &str, valid: bool) -> SurveyResponse {
    let rating = LikertValue::new(1).unwrap();
    let mut answers = std::collections::BTreeMap::new();
    if valid {
        answers.insert("naturalness".into(), Answer::Likert([(Style::B, rating)].into()));
    } else {
        answers.insert("naturalness".into(), Answer::Text("great".into()));
    }
    SurveyResponse {
        participant_id: "p".into(),
        persona_id: persona_id.into(),
        session_ids_compared: Vec::new(),
        answers,
        submitted_at: 0,
    }
}

fn check_node(n: &Node, outputs: &[Output], max_turns: u32) -> Result<(), String> {
    let s = &n.session;
    let r = s.record();
    for &(from, to) in s.transitions() {
        if !legal(from, to) {
            return Err(format!("illegal transition {from} -> {to}"));
        }
    }
    for o in outputs {
        match o {
            Output::Speak(speech) if speech.text.contains(EXIT) => {
                return Err(format!("exit tag spoken: {:?}", speech.text));
            }
            Output::SurveyDue if s.state() != SessionState::SurveyPending => {
                return Err(format!("survey due while {}", s.state()));
            }
            _ => {}
        }
    }
    for (i, e) in r.events.iter().enumerate() {
        if e.text.contains(EXIT) {
            return Err(format!("exit tag in visible text: {:?}", e.text));
        }
        if e.turn_index as usize != i || e.ended_at < e.started_at {
            return Err(format!("event {i} malformed: {e:?}"));
        }
        if i > 0 && e.started_at < r.events[i - 1].started_at {
            return Err(format!("event {i} starts before its predecessor"));
        }
    }
    if s.state() == SessionState::SurveyPending
        && !matches!(
            r.end_reason,
            Some(EndReason::TurnCap | EndReason::Terminate | EndReason::ExitTag)
        )
    {
        return Err(format!("survey pending with end reason {:?}", r.end_reason));
    }
    if s.has_pending_generation() != n.held.is_some() {
        return Err("session and walker disagree about the outstanding job".into());
    }
    let quiescent = n.held.is_none();
    if quiescent
        && matches!(s.state(), SessionState::ListeningForUser | SessionState::BotSpeaking)
        && r.user_turns() >= max_turns
    {
        return Err(format!("{} user turns with max_turns {max_turns} but state {}", r.user_turns(), s.state()));
    }
    Ok(())
}

/// Applies one input. `Ok(None)` means the input was rejected without
/// changing anything.
async fn apply(n: &Node, input: Input, providers: &ProviderSet) -> Result<Option<(Node, Vec<Output>)>, String> {
    let mut next = n.clone();
    let before = (n.session.state(), n.session.transitions().len(), n.session.record().events.len());
    let speaking = next.session.speaking();
    let result = match input {
        Input::Complete | Input::CompleteStale => {
            let Some((id, _)) = speaking else { return Ok(None) };
            let id = if matches!(input, Input::CompleteStale) { id + 7 } else { id };
            next.session.on_bot_utterance_complete(id).map(|_| Default::default())
        }
        Input::User(text) => next.session.on_user_utterance_complete(text).await,
        Input::BargeIn { percent, text } => {
            let (id, total) = speaking.unwrap_or((0, 0));
            next.session.on_barge_in(id, total * percent / 100, text).await
        }
        Input::RunJob | Input::RunStaleJob => {
            let slot = if matches!(input, Input::RunJob) { next.held.take() } else { next.stale.take() };
            let Some(job) = slot else { return Ok(None) };
            let result = job.run(providers).await;
            Ok(next.session.complete_generation(job.ticket, result).await)
        }
        Input::Survey | Input::BadSurvey => {
            let persona = n.session.persona().persona_id.clone();
            next.session.submit_survey(survey(&persona, matches!(input, Input::Survey)))
        }
        Input::Abort => Ok(next.session.abort()),
    };
    let step = match result {
        Ok(step) => step,
        Err(_) => {
            let after = (next.session.state(), next.session.transitions().len(), next.session.record().events.len());
            if after != before {
                return Err(format!("{input:?} was rejected but changed the session"));
            }
            return Ok(None);
        }
    };
    if let Some(job) = step.job {
        if let Some(old) = next.held.replace(job) {
            next.stale = Some(old);
        }
    }
    if matches!(input, Input::RunStaleJob) && next.session.record() != n.session.record() {
        return Err("a superseded generation result changed the record".into());
    }
    if n.session.state() == SessionState::Ended && next.session.record() != n.session.record() {
        return Err(format!("{input:?} changed an ended session"));
    }
    if !next.session.has_pending_generation() {
        // The session dropped its job (barge-in, abort); the walker's copy is now stale.
        if let Some(old) = next.held.take() {
            next.stale = Some(old);
        }
    }
    Ok(Some((next, step.outputs)))
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Walks every input sequence up to `depth` for each style, seed and cap.
pub async fn walk(depth: usize, max_turns: &[u32], seeds: &[u64]) -> Result<WalkStats, String> {
    let study = StudyConfig::load_dir(configs_dir()).map_err(|e| e.to_string())?;
    let providers = Arc::new(ProviderSet::mock().with_llm(Arc::new(WalkLlm)));
    let mut stats = WalkStats::default();

    for style in [Style::A, Style::B, Style::C] {
        for &seed in seeds {
            for &cap in max_turns {
                let mut params = SessionParams::from_study(&study, "drill_sergeant", style, seed, "walk")
                    .map_err(|e| e.to_string())?;
                params.session_cfg.max_turns = cap;
                let (session, step) = Session::start(params, providers.clone(), Arc::new(ManualClock::new(0))).await;
                let root = Node {
                    session,
                    held: step.job,
                    stale: None,
                };
                check_node(&root, &step.outputs, cap)?;
                stats.edges_seen.extend(root.session.transitions().iter().copied());

                let mut seen: HashMap<String, usize> = HashMap::new();
                let mut stack = vec![(root, depth)];
                while let Some((node, left)) = stack.pop() {
                    stats.nodes += 1;
                    if left == 0 {
                        continue;
                    }
                    for &input in INPUTS {
                        let Some((next, outputs)) = apply(&node, input, &providers)
                            .await
                            .map_err(|e| format!("{style}/{seed}/cap {cap}: {e}"))?
                        else {
                            continue;
                        };
                        check_node(&next, &outputs, cap).map_err(|e| {
                            format!(
                                "{style}/{seed}/cap {cap} after {input:?}: {e}\ntransitions: {:?}",
                                next.session.transitions()
                            )
                        })?;
                        stats.edges_seen.extend(next.session.transitions().iter().copied());
                        if let Some(reason) = next.session.record().end_reason {
                            stats.end_reasons.insert(reason.as_str().to_string());
                        }
                        let k = key(&next, cap);
                        if seen.get(&k).is_some_and(|&d| d >= left - 1) {
                            continue;
                        }
                        seen.insert(k, left - 1);
                        stack.push((next, left - 1));
                    }
                }
            }
        }
    }
    Ok(stats)
}
