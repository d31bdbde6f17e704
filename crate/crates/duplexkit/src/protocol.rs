//! JSON messages exchanged over the session websocket. Every message is an
//! object with a `type` field.

use duplexkit_core::survey::{SurveyDocument, SurveyResponse};
use duplexkit_core::Style;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SessionStart {
        persona_id: String,
        style: Style,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Base64 audio captured since the last chunk.
    UserAudioChunk { bytes: String },
    /// Text-mode stand-in for a transcribed user turn.
    UserText { text: String },
    VadSpeechStart {},
    VadSpeechEnd {},
    BargeIn { utterance_id: u32, played_bytes: u64 },
    SurveySubmit(SurveyResponse),
    SessionAbort {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    UnknownPersona,
    Overrun,
    InvalidPlayback,
    IllegalState,
    NoSession,
    SessionActive,
    InvalidSurvey,
    Config,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionReady {
        session_id: String,
        persona_id: String,
        display_name: String,
        style: Style,
        consent_text: String,
    },
    BotText {
        utterance_id: u32,
        text: String,
        media_type: String,
        total_audio_bytes: u64,
    },
    BotAudioChunk {
        utterance_id: u32,
        seq: u32,
        b64_payload: String,
    },
    /// Sent after the last chunk, or as soon as a barge-in halts playback.
    BotAudioEnd { utterance_id: u32 },
    SurveyShow { survey: SurveyDocument },
    SessionEnded { session_id: String, reason: String },
    Error { code: ErrorCode, detail: String },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            detail: detail.into(),
        }
    }
}
