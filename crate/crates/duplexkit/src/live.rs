//! Per-connection actor. It owns at most one live session at a time, paces
//! bot audio out in chunks, and runs LLM generation in the background so
//! that barge-ins are handled while a reply is being produced.
//!
//! Barge-in handling is split in two: the `barge_in` message halts playback
//! at once and stores the played byte count; the engine is called when the
//! interrupting utterance's transcript arrives (`user_text`, or
//! `vad_speech_end` followed by ASR). A client interrupting the bot sends
//! `barge_in` before `vad_speech_start`.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use duplexkit_core::config::ProviderRole;
use duplexkit_core::providers::{ProviderError, ProviderSet};
use duplexkit_core::session::{
    GenerationTicket, MonotonicClock, Output, SessionError, SessionParams, Step,
};
use duplexkit_core::survey::{render_survey, PersonaBlock, SurveyDocument, SurveyResponse};
use duplexkit_core::{ConfigError, Session, SessionState, Style};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;

use crate::hub::{Hub, Reservation};
use crate::protocol::{ClientMessage, ErrorCode, ServerMessage};

type Completion = (String, GenerationTicket, Result<String, ProviderError>);

struct Playback {
    utterance_id: u32,
    audio: Vec<u8>,
    offset: usize,
    seq: u32,
}

struct Live {
    session: Session,
    providers: Arc<ProviderSet>,
    playback: VecDeque<Playback>,
    job: Option<JoinHandle<()>>,
    /// Halted utterance and played bytes, waiting for the transcript.
    barge: Option<(u32, u64)>,
    audio: Vec<u8>,
    survey: Option<SurveyDocument>,
}

impl Live {
    fn id(&self) -> &str {
        &self.session.record().session_id
    }
}

impl Drop for Live {
    fn drop(&mut self) {
        if let Some(job) = self.job.take() {
            job.abort();
        }
    }
}

struct Connection {
    hub: Arc<Hub>,
    out: mpsc::Sender<ServerMessage>,
    live: Option<Live>,
    blocks: BTreeMap<String, PersonaBlock>,
    done_tx: mpsc::UnboundedSender<Completion>,
}

/// Drives one client connection until its inbox closes or the hub shuts
/// down. With `reserved`, the reserved session starts immediately.
pub async fn run_connection(
    hub: Arc<Hub>,
    mut inbox: mpsc::Receiver<ClientMessage>,
    out: mpsc::Sender<ServerMessage>,
    reserved: Option<(String, Reservation)>,
) {
    let (done_tx, mut done_rx) = mpsc::unbounded_channel();
    let mut shutdown = hub.subscribe_shutdown();
    let mut ticker = tokio::time::interval(hub.options().chunk_interval);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut conn = Connection {
        hub,
        out,
        live: None,
        blocks: BTreeMap::new(),
        done_tx,
    };

    if *shutdown.borrow_and_update() {
        return;
    }
    if let Some((session_id, r)) = reserved {
        conn.start(session_id, &r.persona_id, r.style, r.seed).await;
    }

    loop {
        let pumping = conn.live.as_ref().is_some_and(|l| !l.playback.is_empty());
        tokio::select! {
            biased;
            _ = shutdown.changed() => {
                if *shutdown.borrow_and_update() {
                    conn.abort().await;
                    break;
                }
            }
            msg = inbox.recv() => match msg {
                Some(msg) => conn.handle(msg).await,
                None => {
                    conn.abort().await;
                    break;
                }
            },
            Some((session_id, ticket, result)) = done_rx.recv() => {
                conn.on_generation(&session_id, ticket, result).await;
            }
            _ = ticker.tick(), if pumping => conn.pump().await,
        }
    }
}

fn session_error_code(err: &SessionError) -> ErrorCode {
    match err {
        SessionError::IllegalInput { .. } | SessionError::StaleUtterance { .. } => ErrorCode::IllegalState,
        SessionError::InvalidPlayback(_) => ErrorCode::InvalidPlayback,
        SessionError::Survey(_) => ErrorCode::InvalidSurvey,
        SessionError::StyleMismatch { .. } => ErrorCode::Config,
        SessionError::Policy(_) => ErrorCode::Internal,
    }
}

impl Connection {
    async fn send(&self, msg: ServerMessage) {
        // A closed outbox means the client is gone; the inbox closing
        // ends the loop.
        let _ = self.out.send(msg).await;
    }

    async fn error(&self, code: ErrorCode, detail: impl Into<String>) {
        self.send(ServerMessage::error(code, detail)).await;
    }

    async fn handle(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::SessionStart {
                persona_id,
                style,
                seed,
            } => {
                if self.live.is_some() {
                    return self.error(ErrorCode::SessionActive, "a session is already running").await;
                }
                let session_id = uuid::Uuid::new_v4().to_string();
                self.start(session_id, &persona_id, style, seed).await;
            }
            ClientMessage::UserAudioChunk { bytes } => self.user_audio(&bytes).await,
            ClientMessage::UserText { text } => self.user_turn(&text).await,
            ClientMessage::VadSpeechStart {} => self.speech_start().await,
            ClientMessage::VadSpeechEnd {} => self.speech_end().await,
            ClientMessage::BargeIn {
                utterance_id,
                played_bytes,
            } => self.barge_in(utterance_id, played_bytes).await,
            ClientMessage::SurveySubmit(response) => self.survey(response).await,
            ClientMessage::SessionAbort {} => self.abort().await,
        }
    }

    async fn start(&mut self, session_id: String, persona_id: &str, style: Style, seed: Option<u64>) {
        let study = self.hub.study();
        let seed = seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
        let params = match SessionParams::from_study(&study, persona_id, style, seed, session_id) {
            Ok(p) => p,
            Err(ConfigError::UnknownPersona(id)) => {
                return self.error(ErrorCode::UnknownPersona, format!("no persona {id:?}")).await;
            }
            Err(err) => return self.error(ErrorCode::Config, err.to_string()).await,
        };
        let providers = match self.hub.providers_for(&study) {
            Ok(p) => p,
            Err(err) => return self.error(ErrorCode::Config, err.to_string()).await,
        };
        let persona = params.persona.clone();
        let consent_text = params.session_cfg.consent_text.clone();
        let (session, step) = Session::start(params, providers.clone(), Arc::new(MonotonicClock::new())).await;
        tracing::info!(session = %session.record().session_id, persona = %persona.persona_id, %style, "session started");
        self.send(ServerMessage::SessionReady {
            session_id: session.record().session_id.clone(),
            persona_id: persona.persona_id.clone(),
            display_name: persona.display_name.clone(),
            style,
            consent_text,
        })
        .await;
        self.live = Some(Live {
            session,
            providers,
            playback: VecDeque::new(),
            job: None,
            barge: None,
            audio: Vec::new(),
            survey: None,
        });
        self.apply(step).await;
    }

    /// Delivers the engine's outputs and launches its generation job.
    async fn apply(&mut self, step: Step) {
        let Some(live) = self.live.as_mut() else { return };
        if let Some(job) = step.job {
            if let Some(old) = live.job.take() {
                old.abort();
            }
            let providers = live.providers.clone();
            let tx = self.done_tx.clone();
            let session_id = live.id().to_string();
            live.job = Some(tokio::spawn(async move {
                let result = job.run(&providers).await;
                let _ = tx.send((session_id, job.ticket, result));
            }));
        }
        self.hub.sync(live.session.record());

        for output in step.outputs {
            match output {
                Output::Speak(speech) => {
                    self.send(ServerMessage::BotText {
                        utterance_id: speech.utterance_id,
                        text: speech.text,
                        media_type: speech.audio.media_type,
                        total_audio_bytes: speech.audio.total_audio_bytes,
                    })
                    .await;
                    if speech.audio.audio_bytes.is_empty() {
                        self.send(ServerMessage::BotAudioEnd {
                            utterance_id: speech.utterance_id,
                        })
                        .await;
                    } else if let Some(live) = self.live.as_mut() {
                        live.playback.push_back(Playback {
                            utterance_id: speech.utterance_id,
                            audio: speech.audio.audio_bytes,
                            offset: 0,
                            seq: 0,
                        });
                    }
                }
                Output::SurveyDue => self.show_survey().await,
                Output::Ended { reason } => {
                    let Some(live) = self.live.take() else { continue };
                    for p in &live.playback {
                        self.send(ServerMessage::BotAudioEnd {
                            utterance_id: p.utterance_id,
                        })
                        .await;
                    }
                    let session_id = live.id().to_string();
                    tracing::info!(session = %session_id, reason = ?reason, "session ended");
                    self.send(ServerMessage::SessionEnded {
                        session_id,
                        reason: reason.map_or("completed", |r| r.as_str()).to_string(),
                    })
                    .await;
                }
            }
        }
    }

    async fn show_survey(&mut self) {
        let Some(live) = self.live.as_mut() else { return };
        let record = live.session.record();
        let persona = live.session.persona();
        let block = self
            .blocks
            .entry(record.persona_id.clone())
            .or_insert_with(|| PersonaBlock {
                persona_id: persona.persona_id.clone(),
                display_name: persona.display_name.clone(),
                sessions: BTreeMap::new(),
            });
        block.sessions.insert(record.style, record.session_id.clone());
        let document = render_survey(live.session.session_config(), block);
        live.survey = Some(document.clone());
        self.send(ServerMessage::SurveyShow { survey: document }).await;
    }

    async fn pump(&mut self) {
        let chunk_bytes = self.hub.options().chunk_bytes.max(1);
        let Some(live) = self.live.as_mut() else { return };
        let Some(p) = live.playback.front_mut() else { return };
        let end = (p.offset + chunk_bytes).min(p.audio.len());
        let msg = ServerMessage::BotAudioChunk {
            utterance_id: p.utterance_id,
            seq: p.seq,
            b64_payload: B64.encode(&p.audio[p.offset..end]),
        };
        p.offset = end;
        p.seq += 1;
        let finished = (p.offset >= p.audio.len()).then_some(p.utterance_id);
        if finished.is_some() {
            live.playback.pop_front();
        }
        self.send(msg).await;
        if let Some(utterance_id) = finished {
            self.send(ServerMessage::BotAudioEnd { utterance_id }).await;
        }
    }

    /// Stops streaming `utterance_id`, or everything when `None`.
    async fn halt(&mut self, utterance_id: Option<u32>) {
        let Some(live) = self.live.as_mut() else { return };
        let mut halted = Vec::new();
        live.playback.retain(|p| {
            let hit = utterance_id.is_none_or(|id| id == p.utterance_id);
            if hit {
                halted.push(p.utterance_id);
            }
            !hit
        });
        for utterance_id in halted {
            self.send(ServerMessage::BotAudioEnd { utterance_id }).await;
        }
    }

    async fn barge_in(&mut self, utterance_id: u32, played_bytes: u64) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        let state = live.session.state();
        match live.session.speaking() {
            Some((id, total)) if id == utterance_id && state == SessionState::BotSpeaking => {
                if played_bytes > total {
                    return self
                        .error(
                            ErrorCode::InvalidPlayback,
                            format!("played_bytes {played_bytes} exceeds the utterance's {total} bytes"),
                        )
                        .await;
                }
            }
            _ if state == SessionState::GeneratingReply => {}
            _ => {
                self.halt(Some(utterance_id)).await;
                return self
                    .error(
                        ErrorCode::IllegalState,
                        format!("utterance {utterance_id} cannot be interrupted while {state}"),
                    )
                    .await;
            }
        }
        if let Some(live) = self.live.as_mut() {
            live.barge = Some((utterance_id, played_bytes));
        }
        self.halt(Some(utterance_id)).await;
    }

    async fn user_audio(&mut self, b64: &str) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        let bytes = match B64.decode(b64) {
            Ok(b) => b,
            Err(err) => return self.error(ErrorCode::BadMessage, format!("audio is not base64: {err}")).await,
        };
        let limit = self.hub.options().max_user_audio_bytes;
        if live.audio.len() + bytes.len() > limit {
            live.audio.clear();
            return self
                .error(ErrorCode::Overrun, format!("user audio exceeded {limit} bytes; utterance dropped"))
                .await;
        }
        live.audio.extend_from_slice(&bytes);
    }

    async fn speech_start(&mut self) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        live.audio.clear();
        if live.barge.is_none() && live.session.state() == SessionState::BotSpeaking {
            // Speech without a barge-in: the client had finished playback.
            if let Some((id, _)) = live.session.speaking() {
                let _ = live.session.on_bot_utterance_complete(id);
                self.hub.sync(live.session.record());
            }
            self.halt(None).await;
        }
    }

    async fn speech_end(&mut self) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        let audio = std::mem::take(&mut live.audio);
        let ctx = live.providers.context(ProviderRole::Asr, live.id());
        let transcript = match live.providers.transcribe(&audio, &ctx).await {
            Ok(t) => t,
            Err(err) => {
                tracing::warn!(error = %err, "transcription failed");
                self.error(ErrorCode::Internal, format!("transcription failed: {err}")).await;
                String::new()
            }
        };
        self.user_turn(&transcript).await;
    }

    async fn user_turn(&mut self, text: &str) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        let result = match live.barge.take() {
            Some((id, played)) => live.session.on_barge_in(id, played, text).await,
            None => {
                let was_speaking = live.session.state() == SessionState::BotSpeaking;
                let result = live.session.on_user_utterance_complete(text).await;
                if was_speaking && live.session.state() != SessionState::BotSpeaking {
                    self.halt(None).await;
                }
                result
            }
        };
        match result {
            Ok(step) => self.apply(step).await,
            Err(err) => self.error(session_error_code(&err), err.to_string()).await,
        }
    }

    async fn on_generation(&mut self, session_id: &str, ticket: GenerationTicket, result: Result<String, ProviderError>) {
        let Some(live) = self.live.as_mut() else { return };
        if live.id() != session_id {
            return;
        }
        live.job = None;
        let step = live.session.complete_generation(ticket, result).await;
        self.apply(step).await;
    }

    async fn survey(&mut self, response: SurveyResponse) {
        let Some(live) = self.live.as_mut() else {
            return self.error(ErrorCode::NoSession, "no session is running").await;
        };
        if let Some(doc) = &live.survey {
            if let Err(err) = doc.check(&response) {
                return self.error(ErrorCode::InvalidSurvey, err.to_string()).await;
            }
        }
        match live.session.submit_survey(response) {
            Ok(step) => self.apply(step).await,
            Err(err) => self.error(session_error_code(&err), err.to_string()).await,
        }
    }

    async fn abort(&mut self) {
        let Some(live) = self.live.as_mut() else { return };
        let step = live.session.abort();
        self.apply(step).await;
    }
}
