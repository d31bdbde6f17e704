//! Per-session orchestration: lifecycle state machine, barge-in pipeline,
//! exit-tag handling and the event log.
//!
//! A [`Session`] processes one input at a time. LLM generation is handed
//! back to the caller as a [`GenerationJob`] so that it can run while new
//! input keeps arriving; results are applied with
//! [`Session::complete_generation`] and discarded when the job has been
//! superseded in the meantime.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use tokio::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, InterruptionMatrix, ModelConfig, PersonaConfig, ProviderRole, SessionConfig,
    Style, StudyConfig,
};
use crate::cutoff::{derive_alignment, split_on_barge_in, AlignmentPoint, CutoffError, UtterancePlayback};
use crate::providers::{DialogueTurn, ProviderError, ProviderRequestContext, ProviderSet, TtsResult};
use crate::survey::{validate_response, SurveyError, SurveyResponse};
use crate::turn_policy::{
    build_farewell_prompt, build_reply_prompt, build_strategy_prompt, classify_or_fallback,
    parse_autonomous_choice, sample_strategy, ClassificationIssue, InterruptIntent, PolicyError,
    Strategy, StrategyDecision, StrategySampler, EXIT_TAG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    BotSpeaking,
    ListeningForUser,
    ProcessingInterrupt,
    GeneratingReply,
    SurveyPending,
    Ended,
}

impl SessionState {
    pub const ALL: [SessionState; 7] = [
        SessionState::Idle,
        SessionState::BotSpeaking,
        SessionState::ListeningForUser,
        SessionState::ProcessingInterrupt,
        SessionState::GeneratingReply,
        SessionState::SurveyPending,
        SessionState::Ended,
    ];

    /// Whether the lifecycle permits moving from `self` to `next`.
    pub fn can_transition_to(self, next: SessionState) -> bool {
        use SessionState::*;
        match (self, next) {
            (Idle, BotSpeaking)
            | (BotSpeaking, ListeningForUser)
            | (BotSpeaking, ProcessingInterrupt)
            | (ListeningForUser, GeneratingReply)
            | (ProcessingInterrupt, GeneratingReply)
            | (GeneratingReply, BotSpeaking)
            | (BotSpeaking, SurveyPending)
            | (ListeningForUser, SurveyPending)
            | (SurveyPending, Ended) => true,
            // Aborts (client request, shutdown, failed opening).
            (from, Ended) => from != Ended,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::BotSpeaking => "bot_speaking",
            SessionState::ListeningForUser => "listening_for_user",
            SessionState::ProcessingInterrupt => "processing_interrupt",
            SessionState::GeneratingReply => "generating_reply",
            SessionState::SurveyPending => "survey_pending",
            SessionState::Ended => "ended",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFlag {
    /// Autonomous reply without a strategy self-report; Yield assumed.
    MissingAutoTag,
    ProviderError,
    ExitTag,
    /// The classifier answered outside the intent set; Cooperative assumed.
    UnrecognizedIntent,
}

impl EventFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            EventFlag::MissingAutoTag => "missing_auto_tag",
            EventFlag::ProviderError => "provider_error",
            EventFlag::ExitTag => "exit_tag",
            EventFlag::UnrecognizedIntent => "unrecognized_intent",
        }
    }
}

/// What happened to a bot turn that the user talked over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterruptionRecord {
    pub intent: InterruptIntent,
    /// Absent for terminate, and for autonomous turns until the reply arrives.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    pub cutoff_text: String,
    pub remaining_text: String,
    pub raw_played_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed_state: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub turn_index: u32,
    pub speaker: Speaker,
    /// Visible text. For bot turns this is the full intended utterance.
    pub text: String,
    pub started_at: u64,
    pub ended_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance_id: Option<u32>,
    /// Classified intent of a user turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<InterruptIntent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interruption: Option<InterruptionRecord>,
    #[serde(default)]
    pub flags: BTreeSet<EventFlag>,
    /// LLM output before tags were stripped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

/// Why the dialogue part of a session stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    TurnCap,
    Terminate,
    /// The LLM closed the conversation on its own.
    ExitTag,
    Aborted,
    ProviderError,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::TurnCap => "turn_cap",
            EndReason::Terminate => "terminate",
            EndReason::ExitTag => "exit_tag",
            EndReason::Aborted => "aborted",
            EndReason::ProviderError => "provider_error",
        }
    }
}

/// The four configuration documents exactly as the session used them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub persona: PersonaConfig,
    pub interruption: InterruptionMatrix,
    pub session: SessionConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub persona_id: String,
    pub style: Style,
    pub seed: u64,
    pub state: SessionState,
    #[serde(default)]
    pub end_reason: Option<EndReason>,
    pub events: Vec<TurnEvent>,
    #[serde(default)]
    pub survey: Option<SurveyResponse>,
    pub config_snapshot: ConfigSnapshot,
}

impl SessionRecord {
    pub fn user_turns(&self) -> u32 {
        self.events
            .iter()
            .filter(|e| e.speaker == Speaker::User)
            .count() as u32
    }
}

/// Milliseconds since the session started.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now_ms(&self) -> u64;
}

/// Real elapsed time. Follows tokio's paused clock in tests.
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Clock driven by the caller; used by scripted sessions and tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    /// Moves the clock forward; never backwards.
    pub fn set(&self, ms: u64) {
        self.0.fetch_max(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{input} is not accepted while {state}")]
    IllegalInput {
        state: SessionState,
        input: &'static str,
    },
    #[error("utterance {got} is not the one being spoken ({expected:?})")]
    StaleUtterance { expected: Option<u32>, got: u32 },
    #[error(transparent)]
    InvalidPlayback(#[from] CutoffError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error("interruption matrix is for style {matrix}, session asked for {requested}")]
    StyleMismatch { requested: Style, matrix: Style },
}

/// Spoken bot output for the transport to deliver.
#[derive(Debug, Clone, PartialEq)]
pub struct BotSpeech {
    pub utterance_id: u32,
    pub text: String,
    pub audio: TtsResult,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Speak(BotSpeech),
    /// The dialogue is over; the post-session survey should be shown.
    SurveyDue,
    Ended { reason: Option<EndReason> },
}

/// Identifies one generation request. Stale tickets are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GenerationTicket(u64);

/// LLM call the session is waiting on.
#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub ticket: GenerationTicket,
    pub system_prompt: String,
    pub history: Vec<DialogueTurn>,
    pub ctx: ProviderRequestContext,
}

impl GenerationJob {
    pub async fn run(&self, providers: &ProviderSet) -> Result<String, ProviderError> {
        providers
            .generate(&self.system_prompt, &self.history, &self.ctx)
            .await
    }
}

/// Result of feeding one input to a session.
#[derive(Debug, Default)]
pub struct Step {
    pub outputs: Vec<Output>,
    pub job: Option<GenerationJob>,
}

impl Step {
    fn outputs(outputs: Vec<Output>) -> Self {
        Self { outputs, job: None }
    }
}

#[derive(Debug, Clone)]
struct SpokenUtterance {
    utterance_id: u32,
    event_index: usize,
    text: String,
    total_audio_bytes: u64,
    alignment: Option<Vec<AlignmentPoint>>,
}

#[derive(Debug, Clone)]
enum Purpose {
    Reply,
    Interrupt {
        decision: StrategyDecision,
        interrupted_event: usize,
        remaining_text: String,
    },
    Farewell(EndReason),
}

#[derive(Debug, Clone)]
struct Pending {
    ticket: GenerationTicket,
    purpose: Purpose,
}

/// Everything needed to open a session.
#[derive(Debug, Clone)]
pub struct SessionParams {
    pub session_id: String,
    pub persona: PersonaConfig,
    pub matrix: InterruptionMatrix,
    pub session_cfg: SessionConfig,
    pub model_cfg: ModelConfig,
    pub seed: u64,
}

impl SessionParams {
    /// Resolves persona and matrix for `style` from a loaded study.
    pub fn from_study(
        study: &StudyConfig,
        persona_id: &str,
        style: Style,
        seed: u64,
        session_id: impl Into<String>,
    ) -> Result<Self, ConfigError> {
        let persona = study
            .personas
            .get(persona_id)
            .ok_or_else(|| ConfigError::UnknownPersona(persona_id.to_string()))?;
        Ok(Self {
            session_id: session_id.into(),
            persona: persona.clone(),
            matrix: study.matrix_for(persona_id, style)?,
            session_cfg: study.session.clone(),
            model_cfg: study.model.clone(),
            seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    record: SessionRecord,
    sampler: StrategySampler,
    providers: Arc<ProviderSet>,
    clock: Arc<dyn Clock>,
    next_utterance_id: u32,
    speaking: Option<SpokenUtterance>,
    pending: Option<Pending>,
    generation: u64,
    transitions: Vec<(SessionState, SessionState)>,
}

/// Splits off every `[EXIT]` tag. Returns the trimmed visible text and
/// whether any tag was present.
pub fn parse_exit_tag(llm_output: &str) -> (String, bool) {
    let is_exit = llm_output.contains(EXIT_TAG);
    let visible = llm_output
        .split(EXIT_TAG)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    (visible, is_exit)
}

const FALLBACK_REPLY: &str = "Sorry, could you say that again?";
const FALLBACK_FAREWELL: &str = "Goodbye.";

impl Session {
    /// Opens a session and speaks the persona's opening line.
    pub async fn start(
        params: SessionParams,
        providers: Arc<ProviderSet>,
        clock: Arc<dyn Clock>,
    ) -> (Session, Step) {
        let style = params.matrix.style();
        let record = SessionRecord {
            session_id: params.session_id,
            persona_id: params.persona.persona_id.clone(),
            style,
            seed: params.seed,
            state: SessionState::Idle,
            end_reason: None,
            events: Vec::new(),
            survey: None,
            config_snapshot: ConfigSnapshot {
                persona: params.persona,
                interruption: params.matrix,
                session: params.session_cfg,
                model: params.model_cfg,
            },
        };
        let mut session = Session {
            record,
            sampler: StrategySampler::new(params.seed),
            providers,
            clock,
            next_utterance_id: 0,
            speaking: None,
            pending: None,
            generation: 0,
            transitions: Vec::new(),
        };

        let (opening, _) = parse_exit_tag(&session.persona().opening_prompt);
        let utterance_id = session.allocate_utterance();
        match session.synthesize(&opening, utterance_id).await {
            Ok(audio) => {
                session.transition(SessionState::BotSpeaking);
                let speech = session.log_bot_speech(utterance_id, opening, audio, None, BTreeSet::new());
                (session, Step::outputs(vec![Output::Speak(speech)]))
            }
            Err(err) => {
                tracing::warn!(session = %session.record.session_id, error = %err, "opening synthesis failed");
                session.record.end_reason = Some(EndReason::ProviderError);
                session.transition(SessionState::Ended);
                let reason = session.record.end_reason;
                (session, Step::outputs(vec![Output::Ended { reason }]))
            }
        }
    }

    /// Like [`Session::start`], checking that the matrix matches `style`.
    pub async fn start_with_style(
        params: SessionParams,
        style: Style,
        providers: Arc<ProviderSet>,
        clock: Arc<dyn Clock>,
    ) -> Result<(Session, Step), SessionError> {
        if params.matrix.style() != style {
            return Err(SessionError::StyleMismatch {
                requested: style,
                matrix: params.matrix.style(),
            });
        }
        Ok(Self::start(params, providers, clock).await)
    }

    pub fn state(&self) -> SessionState {
        self.record.state
    }

    pub fn record(&self) -> &SessionRecord {
        &self.record
    }

    pub fn into_record(self) -> SessionRecord {
        self.record
    }

    pub fn persona(&self) -> &PersonaConfig {
        &self.record.config_snapshot.persona
    }

    pub fn session_config(&self) -> &SessionConfig {
        &self.record.config_snapshot.session
    }

    /// Utterance currently being played to the user, with its audio length.
    pub fn speaking(&self) -> Option<(u32, u64)> {
        self.speaking
            .as_ref()
            .map(|u| (u.utterance_id, u.total_audio_bytes))
    }

    pub fn has_pending_generation(&self) -> bool {
        self.pending.is_some()
    }

    /// Snapshot of the strategy sampler, for replay checks.
    pub fn sampler_snapshot(&self) -> String {
        self.sampler.snapshot()
    }

    /// Every state change so far, in order.
    pub fn transitions(&self) -> &[(SessionState, SessionState)] {
        &self.transitions
    }

    /// True once the participant has taken `max_turns` turns. The opening
    /// line does not count.
    pub fn check_turn_cap(&self) -> bool {
        self.record.user_turns() >= self.session_config().max_turns
    }

    /// The client finished playing the utterance without being interrupted.
    pub fn on_bot_utterance_complete(&mut self, utterance_id: u32) -> Result<(), SessionError> {
        self.require(SessionState::BotSpeaking, "bot utterance completion")?;
        let expected = self.speaking.as_ref().map(|u| u.utterance_id);
        if expected != Some(utterance_id) {
            return Err(SessionError::StaleUtterance {
                expected,
                got: utterance_id,
            });
        }
        // A pending turn-cap farewell stays pending; it still has to be said.
        let spoken = self.speaking.take().expect("checked above");
        let now = self.now();
        self.record.events[spoken.event_index].ended_at = now;
        self.transition(SessionState::ListeningForUser);
        Ok(())
    }

    /// A complete user turn arrived (not overlapping bot speech).
    pub async fn on_user_utterance_complete(&mut self, transcript: &str) -> Result<Step, SessionError> {
        let transcript = transcript.trim();
        match self.state() {
            SessionState::BotSpeaking | SessionState::ListeningForUser | SessionState::GeneratingReply
                if transcript.is_empty() =>
            {
                Ok(Step::default())
            }
            SessionState::GeneratingReply => Ok(self.user_during_generation(transcript).await),
            SessionState::BotSpeaking => {
                // The bot's line finished playing before the user spoke.
                let id = self.speaking.as_ref().map(|u| u.utterance_id).unwrap_or(0);
                self.on_bot_utterance_complete(id)?;
                Ok(self.user_turn(transcript).await)
            }
            SessionState::ListeningForUser => Ok(self.user_turn(transcript).await),
            state => Err(SessionError::IllegalInput {
                state,
                input: "user utterance",
            }),
        }
    }

    /// The user spoke over `utterance_id` after `played_bytes` of it had
    /// been played.
    pub async fn on_barge_in(
        &mut self,
        utterance_id: u32,
        played_bytes: u64,
        transcript: &str,
    ) -> Result<Step, SessionError> {
        let transcript = transcript.trim();
        if self.state() == SessionState::GeneratingReply {
            // Nothing is audible yet, so there is no floor to contest.
            if transcript.is_empty() {
                return Ok(Step::default());
            }
            return Ok(self.user_during_generation(transcript).await);
        }
        self.require(SessionState::BotSpeaking, "barge-in")?;
        let spoken = self.speaking.clone().expect("bot is speaking");
        if spoken.utterance_id != utterance_id {
            return Err(SessionError::StaleUtterance {
                expected: Some(spoken.utterance_id),
                got: utterance_id,
            });
        }
        let cut = split_on_barge_in(&UtterancePlayback {
            utterance_id,
            intended_text: spoken.text.clone(),
            total_audio_bytes: spoken.total_audio_bytes,
            alignment: spoken.alignment.clone(),
            played_bytes,
        })?;

        self.cancel_pending();
        self.speaking = None;
        self.transition(SessionState::ProcessingInterrupt);
        let now = self.now();
        self.record.events[spoken.event_index].ended_at = now;

        let intent = if transcript.is_empty() {
            // A barge-in with no words behaves like a backchannel.
            InterruptIntent::Backchannel
        } else {
            let classification = classify_or_fallback(
                transcript,
                &self.history(),
                &self.providers,
                &self.ctx(ProviderRole::Intent, None),
            )
            .await;
            let mut flags = BTreeSet::new();
            match classification.issue {
                Some(ClassificationIssue::ProviderError) => {
                    flags.insert(EventFlag::ProviderError);
                }
                Some(ClassificationIssue::Unrecognized) => {
                    flags.insert(EventFlag::UnrecognizedIntent);
                }
                None => {}
            }
            self.log_user(transcript, classification.intent, flags);
            classification.intent
        };

        let mut record = InterruptionRecord {
            intent,
            strategy: None,
            cutoff_text: cut.cutoff_text.clone(),
            remaining_text: cut.remaining_text.clone(),
            raw_played_bytes: played_bytes,
            rng_seed_state: None,
        };

        if intent == InterruptIntent::Terminate {
            self.record.events[spoken.event_index].interruption = Some(record);
            self.transition(SessionState::GeneratingReply);
            let job = self.issue(Purpose::Farewell(EndReason::Terminate));
            return Ok(Step {
                outputs: Vec::new(),
                job: Some(job),
            });
        }

        let decision = sample_strategy(
            intent,
            &self.record.config_snapshot.interruption,
            &mut self.sampler,
            now,
        )?;
        record.strategy = decision.strategy;
        record.rng_seed_state = Some(decision.rng_seed_state.clone());
        self.record.events[spoken.event_index].interruption = Some(record);

        let prompt = build_strategy_prompt(
            &decision,
            self.persona(),
            &cut.cutoff_text,
            &cut.remaining_text,
            transcript,
        );
        self.transition(SessionState::GeneratingReply);
        let job = self.issue_with_prompt(
            Purpose::Interrupt {
                decision,
                interrupted_event: spoken.event_index,
                remaining_text: cut.remaining_text,
            },
            prompt,
        );
        Ok(Step {
            outputs: Vec::new(),
            job: Some(job),
        })
    }

    /// Applies an LLM result. Results for superseded tickets are dropped.
    pub async fn complete_generation(
        &mut self,
        ticket: GenerationTicket,
        result: Result<String, ProviderError>,
    ) -> Step {
        let pending = match &self.pending {
            Some(p) if p.ticket == ticket => self.pending.take().expect("matched"),
            _ => {
                tracing::debug!(session = %self.record.session_id, "discarding superseded generation");
                return Step::default();
            }
        };

        let mut flags = BTreeSet::new();
        let raw = match result {
            Ok(text) => Some(text),
            Err(err) => {
                tracing::warn!(session = %self.record.session_id, error = %err, "generation failed");
                flags.insert(EventFlag::ProviderError);
                None
            }
        };

        let mut text = raw.clone().unwrap_or_default();
        let mut strategy = None;
        if let Purpose::Interrupt {
            decision,
            interrupted_event,
            ..
        } = &pending.purpose
        {
            strategy = decision.strategy;
            if strategy.is_none() {
                let choice = parse_autonomous_choice(&text);
                if raw.is_some() && !choice.tag_found {
                    flags.insert(EventFlag::MissingAutoTag);
                }
                strategy = Some(choice.strategy);
                text = choice.text;
                if let Some(rec) = self.record.events[*interrupted_event].interruption.as_mut() {
                    rec.strategy = strategy;
                }
            }
        }

        let (mut visible, tagged) = parse_exit_tag(&text);
        if tagged {
            flags.insert(EventFlag::ExitTag);
        }
        if visible.trim().is_empty() {
            visible = self.fallback_text(&pending.purpose, strategy);
        } else if strategy == Some(Strategy::Resume)
            && !(visible.starts_with("...") || visible.starts_with('\u{2026}'))
        {
            visible = format!("...{visible}");
        }

        let farewell = match pending.purpose {
            Purpose::Farewell(reason) => Some(reason),
            _ if tagged => Some(EndReason::ExitTag),
            _ => None,
        };

        if self.state() == SessionState::GeneratingReply {
            self.transition(SessionState::BotSpeaking);
        }
        let utterance_id = self.allocate_utterance();
        let audio = match self.synthesize(&visible, utterance_id).await {
            Ok(audio) => audio,
            Err(err) => {
                tracing::warn!(session = %self.record.session_id, error = %err, "synthesis failed");
                flags.insert(EventFlag::ProviderError);
                TtsResult::silent()
            }
        };
        let speech = self.log_bot_speech(utterance_id, visible, audio, raw, flags);
        let mut outputs = vec![Output::Speak(speech)];

        if let Some(reason) = farewell {
            self.speaking = None;
            self.record.end_reason = Some(reason);
            self.transition(SessionState::SurveyPending);
            outputs.push(Output::SurveyDue);
            return Step::outputs(outputs);
        }

        let job = self
            .check_turn_cap()
            .then(|| self.issue(Purpose::Farewell(EndReason::TurnCap)));
        Step { outputs, job }
    }

    /// Runs every generation job inline until the session is quiescent.
    pub async fn settle(&mut self, mut step: Step) -> Vec<Output> {
        let mut outputs = std::mem::take(&mut step.outputs);
        while let Some(job) = step.job.take() {
            let result = job.run(&self.providers).await;
            step = self.complete_generation(job.ticket, result).await;
            outputs.append(&mut step.outputs);
        }
        outputs
    }

    /// Records the participant's survey and closes the session.
    pub fn submit_survey(&mut self, mut response: SurveyResponse) -> Result<Step, SessionError> {
        self.require(SessionState::SurveyPending, "survey submission")?;
        validate_response(self.session_config(), &response)?;
        response.submitted_at = self.now();
        self.record.survey = Some(response);
        self.transition(SessionState::Ended);
        Ok(Step::outputs(vec![Output::Ended {
            reason: self.record.end_reason,
        }]))
    }

    /// Ends the session immediately from any state.
    pub fn abort(&mut self) -> Step {
        if self.state() == SessionState::Ended {
            return Step::default();
        }
        self.cancel_pending();
        if let Some(spoken) = self.speaking.take() {
            let now = self.now();
            self.record.events[spoken.event_index].ended_at = now;
        }
        if self.state() != SessionState::SurveyPending || self.record.end_reason.is_none() {
            self.record.end_reason = Some(EndReason::Aborted);
        }
        self.transition(SessionState::Ended);
        Step::outputs(vec![Output::Ended {
            reason: self.record.end_reason,
        }])
    }

    async fn user_turn(&mut self, transcript: &str) -> Step {
        let intent = self.classify_and_log(transcript).await;
        self.transition(SessionState::GeneratingReply);
        let purpose = if intent == InterruptIntent::Terminate {
            Purpose::Farewell(EndReason::Terminate)
        } else {
            Purpose::Reply
        };
        Step {
            outputs: Vec::new(),
            job: Some(self.issue(purpose)),
        }
    }

    /// New speech while a reply is being generated joins the context and
    /// restarts generation.
    async fn user_during_generation(&mut self, transcript: &str) -> Step {
        let intent = self.classify_and_log(transcript).await;
        let previous = self.pending.take().map(|p| p.purpose);
        let purpose = match (intent, previous) {
            (InterruptIntent::Terminate, _) => Purpose::Farewell(EndReason::Terminate),
            (_, Some(Purpose::Farewell(reason))) => Purpose::Farewell(reason),
            _ => Purpose::Reply,
        };
        Step {
            outputs: Vec::new(),
            job: Some(self.issue(purpose)),
        }
    }

    async fn classify_and_log(&mut self, transcript: &str) -> InterruptIntent {
        let classification = classify_or_fallback(
            transcript,
            &self.history(),
            &self.providers,
            &self.ctx(ProviderRole::Intent, None),
        )
        .await;
        let mut flags = BTreeSet::new();
        match classification.issue {
            Some(ClassificationIssue::ProviderError) => {
                flags.insert(EventFlag::ProviderError);
            }
            Some(ClassificationIssue::Unrecognized) => {
                flags.insert(EventFlag::UnrecognizedIntent);
            }
            None => {}
        }
        self.log_user(transcript, classification.intent, flags);
        classification.intent
    }

    fn fallback_text(&self, purpose: &Purpose, strategy: Option<Strategy>) -> String {
        match purpose {
            Purpose::Farewell(_) => FALLBACK_FAREWELL.to_string(),
            Purpose::Interrupt { remaining_text, .. }
                if strategy.is_some_and(Strategy::continues_utterance)
                    && !remaining_text.trim().is_empty() =>
            {
                format!("...{}", remaining_text.trim_start())
            }
            _ => FALLBACK_REPLY.to_string(),
        }
    }

    fn issue(&mut self, purpose: Purpose) -> GenerationJob {
        let prompt = match &purpose {
            Purpose::Farewell(_) => build_farewell_prompt(self.persona()),
            Purpose::Reply | Purpose::Interrupt { .. } => build_reply_prompt(self.persona()),
        };
        self.issue_with_prompt(purpose, prompt)
    }

    fn issue_with_prompt(&mut self, purpose: Purpose, system_prompt: String) -> GenerationJob {
        self.generation += 1;
        let ticket = GenerationTicket(self.generation);
        self.pending = Some(Pending { ticket, purpose });
        GenerationJob {
            ticket,
            system_prompt,
            history: self.history(),
            ctx: self.ctx(ProviderRole::Llm, Some(self.next_utterance_id)),
        }
    }

    fn cancel_pending(&mut self) {
        if self.pending.take().is_some() {
            self.generation += 1;
        }
    }

    fn history(&self) -> Vec<DialogueTurn> {
        self.record
            .events
            .iter()
            .map(|e| {
                let text = match &e.interruption {
                    Some(i) => i.cutoff_text.clone(),
                    None => e.text.clone(),
                };
                DialogueTurn {
                    speaker: e.speaker,
                    text,
                }
            })
            .filter(|t| !t.text.is_empty())
            .collect()
    }

    fn ctx(&self, role: ProviderRole, utterance_id: Option<u32>) -> ProviderRequestContext {
        let mut ctx = self.providers.context(role, &self.record.session_id);
        ctx.utterance_id = utterance_id;
        ctx
    }

    async fn synthesize(&self, text: &str, utterance_id: u32) -> Result<TtsResult, ProviderError> {
        let ctx = self.ctx(ProviderRole::Tts, Some(utterance_id));
        self.providers
            .synthesize(text, &self.persona().voice_id, &ctx)
            .await
    }

    fn allocate_utterance(&mut self) -> u32 {
        let id = self.next_utterance_id;
        self.next_utterance_id += 1;
        id
    }

    fn now(&self) -> u64 {
        // Timestamps never run backwards within a record.
        let last = self.record.events.last().map_or(0, |e| e.ended_at.max(e.started_at));
        self.clock.now_ms().max(last)
    }

    fn log_user(&mut self, text: &str, intent: InterruptIntent, flags: BTreeSet<EventFlag>) {
        let now = self.now();
        let turn_index = self.record.events.len() as u32;
        self.record.events.push(TurnEvent {
            turn_index,
            speaker: Speaker::User,
            text: text.to_string(),
            started_at: now,
            ended_at: now,
            utterance_id: None,
            intent: Some(intent),
            interruption: None,
            flags,
            raw_output: None,
        });
    }

    fn log_bot_speech(
        &mut self,
        utterance_id: u32,
        text: String,
        audio: TtsResult,
        raw_output: Option<String>,
        flags: BTreeSet<EventFlag>,
    ) -> BotSpeech {
        let now = self.now();
        let turn_index = self.record.events.len() as u32;
        let alignment = derive_alignment(
            audio.timing.as_ref(),
            text.chars().count(),
            audio.total_audio_bytes,
        )
        .unwrap_or_else(|err| {
            tracing::warn!(error = %err, "ignoring provider timing");
            None
        });
        self.record.events.push(TurnEvent {
            turn_index,
            speaker: Speaker::Bot,
            text: text.clone(),
            started_at: now,
            ended_at: now,
            utterance_id: Some(utterance_id),
            intent: None,
            interruption: None,
            flags,
            raw_output,
        });
        self.speaking = Some(SpokenUtterance {
            utterance_id,
            event_index: turn_index as usize,
            text: text.clone(),
            total_audio_bytes: audio.total_audio_bytes,
            alignment,
        });
        BotSpeech {
            utterance_id,
            text,
            audio,
        }
    }

    fn require(&self, state: SessionState, input: &'static str) -> Result<(), SessionError> {
        if self.state() == state {
            Ok(())
        } else {
            Err(SessionError::IllegalInput {
                state: self.state(),
                input,
            })
        }
    }

    fn transition(&mut self, next: SessionState) {
        let from = self.record.state;
        debug_assert!(
            from.can_transition_to(next),
            "illegal transition {from} -> {next}"
        );
        self.transitions.push((from, next));
        self.record.state = next;
    }
}
