//! Drives `run_connection` over plain channels and keeps a log of every
//! server message, so tests can reason about ordering without a socket.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use duplexkit::live::run_connection;
use duplexkit::{ClientMessage, GatewayOptions, Hub, ServerMessage};
use duplexkit_core::providers::ProviderSet;
use duplexkit_core::StudyConfig;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn study() -> StudyConfig {
    StudyConfig::load_dir(configs_dir()).expect("shipped configs load")
}

pub fn hub(options: GatewayOptions, providers: ProviderSet) -> Arc<Hub> {
    Arc::new(Hub::new(study(), options).with_providers(providers))
}

pub struct Conn {
    inbox: Option<mpsc::Sender<ClientMessage>>,
    out: mpsc::Receiver<ServerMessage>,
    pub log: Vec<ServerMessage>,
    task: JoinHandle<()>,
}

impl Conn {
    pub fn open(hub: Arc<Hub>) -> Self {
        let (in_tx, in_rx) = mpsc::channel(64);
        let (out_tx, out_rx) = mpsc::channel(1024);
        let task = tokio::spawn(run_connection(hub, in_rx, out_tx, None));
        Self {
            inbox: Some(in_tx),
            out: out_rx,
            log: Vec::new(),
            task,
        }
    }

    pub async fn send(&self, msg: ClientMessage) {
        self.inbox.as_ref().expect("connection open").send(msg).await.expect("actor alive");
    }

    /// Collects messages until `pred` matches one, or `limit` passes.
    pub async fn until(
        &mut self,
        limit: Duration,
        mut pred: impl FnMut(&ServerMessage) -> bool,
    ) -> Result<ServerMessage, String> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            match tokio::time::timeout_at(deadline, self.out.recv()).await {
                Ok(Some(msg)) => {
                    self.log.push(msg.clone());
                    if pred(&msg) {
                        return Ok(msg);
                    }
                }
                Ok(None) => return Err("connection closed".into()),
                Err(_) => return Err(format!("nothing matched within {limit:?}; last: {:?}", self.log.last())),
            }
        }
    }

    /// Collects whatever arrives during `d`.
    pub async fn drain(&mut self, d: Duration) {
        let deadline = tokio::time::Instant::now() + d;
        while let Ok(Some(msg)) = tokio::time::timeout_at(deadline, self.out.recv()).await {
            self.log.push(msg);
        }
    }

    /// Closes the inbox and collects everything up to the actor's exit.
    pub async fn close(mut self) -> Vec<ServerMessage> {
        self.inbox.take();
        while let Some(msg) = self.out.recv().await {
            self.log.push(msg);
        }
        let _ = self.task.await;
        self.log
    }

    /// Bytes of `utterance_id` streamed so far.
    pub fn streamed(&self, utterance_id: u32) -> u64 {
        self.log
            .iter()
            .map(|m| match m {
                ServerMessage::BotAudioChunk {
                    utterance_id: id,
                    b64_payload,
                    ..
                } if *id == utterance_id => B64.decode(b64_payload).expect("chunk is base64").len() as u64,
                _ => 0,
            })
            .sum()
    }

    /// The most recent `bot_text` as (utterance_id, text, total bytes).
    pub fn last_bot_text(&self) -> Option<(u32, String, u64)> {
        self.log.iter().rev().find_map(|m| match m {
            ServerMessage::BotText {
                utterance_id,
                text,
                total_audio_bytes,
                ..
            } => Some((*utterance_id, text.clone(), *total_audio_bytes)),
            _ => None,
        })
    }
}

pub fn is_bot_text(m: &ServerMessage) -> bool {
    matches!(m, ServerMessage::BotText { .. })
}

pub fn is_audio_end(m: &ServerMessage, utterance: u32) -> bool {
    matches!(m, ServerMessage::BotAudioEnd { utterance_id } if *utterance_id == utterance)
}

/// One-line summary of a message, with audio payloads elided.
pub fn brief(m: &ServerMessage) -> String {
    match m {
        ServerMessage::BotAudioChunk { utterance_id, seq, .. } => format!("chunk {utterance_id}/{seq}"),
        ServerMessage::BotText { utterance_id, text, .. } => format!("bot_text {utterance_id} {text:?}"),
        ServerMessage::SurveyShow { .. } => "survey_show".into(),
        other => format!("{other:?}"),
    }
}
