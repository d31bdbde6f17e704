//! Uniform ASR, LLM, TTS and intent interfaces, routed by [`ModelConfig`].

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, ProviderKind, ProviderRole, ProviderRoute};
use crate::cutoff::TtsTiming;
use crate::session::Speaker;
use crate::turn_policy::IntentLabel;

pub mod http;
pub mod mock;

pub use mock::{mock_intent, MockAsr, MockIntent, MockLlm, MockTts};

/// One line of dialogue as providers see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Bot,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider timed out after {0} ms")]
    Timeout(u64),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider answered with status {0}")]
    Status(u16),
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    /// The caller broke a precondition (e.g. empty text to synthesize).
    #[error("invalid request: {0}")]
    Usage(String),
}

/// Per-call routing and deadline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderRequestContext {
    pub session_id: String,
    pub utterance_id: Option<u32>,
    pub timeout_ms: u64,
    pub route: ProviderRoute,
}

impl ProviderRequestContext {
    pub fn new(session_id: impl Into<String>, route: ProviderRoute) -> Self {
        let timeout_ms = route.timeout_ms().max(1);
        Self {
            session_id: session_id.into(),
            utterance_id: None,
            timeout_ms,
            route,
        }
    }

    pub fn for_utterance(mut self, utterance_id: u32) -> Self {
        self.utterance_id = Some(utterance_id);
        self
    }
}

/// Synthesized speech for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtsResult {
    pub audio_bytes: Vec<u8>,
    pub media_type: String,
    pub total_audio_bytes: u64,
    pub timing: Option<TtsTiming>,
}

impl TtsResult {
    pub fn new(audio_bytes: Vec<u8>, media_type: impl Into<String>, timing: Option<TtsTiming>) -> Self {
        let total_audio_bytes = audio_bytes.len() as u64;
        Self {
            audio_bytes,
            media_type: media_type.into(),
            total_audio_bytes,
            timing,
        }
    }

    /// Placeholder for an utterance whose synthesis failed.
    pub fn silent() -> Self {
        Self::new(Vec::new(), "audio/none", None)
    }
}

#[async_trait]
pub trait AsrProvider: Send + Sync {
    async fn transcribe(&self, audio: &[u8], ctx: &ProviderRequestContext) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    async fn generate(
        &self,
        system_prompt: &str,
        history: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait TtsProvider: Send + Sync {
    async fn synthesize(
        &self,
        text: &str,
        voice_id: &str,
        ctx: &ProviderRequestContext,
    ) -> Result<TtsResult, ProviderError>;
}

#[async_trait]
pub trait IntentProvider: Send + Sync {
    async fn classify(
        &self,
        utterance: &str,
        context: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<IntentLabel, ProviderError>;
}

/// The four provider roles bound for a session. Calls made through the
/// set enforce preconditions and the route's timeout.
#[derive(Clone)]
pub struct ProviderSet {
    asr: Arc<dyn AsrProvider>,
    llm: Arc<dyn LlmProvider>,
    tts: Arc<dyn TtsProvider>,
    intent: Arc<dyn IntentProvider>,
    model: ModelConfig,
}

impl std::fmt::Debug for ProviderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderSet").field("model", &self.model).finish()
    }
}

impl ProviderSet {
    pub fn mock() -> Self {
        Self {
            asr: Arc::new(MockAsr::default()),
            llm: Arc::new(MockLlm::default()),
            tts: Arc::new(MockTts::default()),
            intent: Arc::new(MockIntent::default()),
            model: ModelConfig::all_mock(),
        }
    }

    pub fn from_config(model: &ModelConfig) -> Result<Self, ConfigError> {
        let kind = |role: ProviderRole| {
            let route = model.route(role);
            route.kind().ok_or_else(|| ConfigError::UnknownProvider {
                role,
                provider: route.provider.clone(),
            })
        };
        let client = http::client();
        let asr: Arc<dyn AsrProvider> = match kind(ProviderRole::Asr)? {
            ProviderKind::Mock => Arc::new(MockAsr::default()),
            ProviderKind::OpenAiCompatible => Arc::new(http::HttpAsr::new(client.clone())),
        };
        let llm: Arc<dyn LlmProvider> = match kind(ProviderRole::Llm)? {
            ProviderKind::Mock => Arc::new(MockLlm::default()),
            ProviderKind::OpenAiCompatible => Arc::new(http::HttpLlm::new(client.clone())),
        };
        let tts: Arc<dyn TtsProvider> = match kind(ProviderRole::Tts)? {
            ProviderKind::Mock => Arc::new(MockTts::default()),
            ProviderKind::OpenAiCompatible => Arc::new(http::HttpTts::new(client.clone())),
        };
        let intent: Arc<dyn IntentProvider> = match kind(ProviderRole::Intent)? {
            ProviderKind::Mock => Arc::new(MockIntent::default()),
            ProviderKind::OpenAiCompatible => Arc::new(http::HttpIntent::new(client)),
        };
        Ok(Self {
            asr,
            llm,
            tts,
            intent,
            model: model.clone(),
        })
    }

    pub fn with_asr(mut self, asr: Arc<dyn AsrProvider>) -> Self {
        self.asr = asr;
        self
    }

    pub fn with_llm(mut self, llm: Arc<dyn LlmProvider>) -> Self {
        self.llm = llm;
        self
    }

    pub fn with_tts(mut self, tts: Arc<dyn TtsProvider>) -> Self {
        self.tts = tts;
        self
    }

    pub fn with_intent(mut self, intent: Arc<dyn IntentProvider>) -> Self {
        self.intent = intent;
        self
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// Context for a call in `role` on behalf of `session_id`.
    pub fn context(&self, role: ProviderRole, session_id: &str) -> ProviderRequestContext {
        ProviderRequestContext::new(session_id, self.model.route(role).clone())
    }

    pub async fn transcribe(&self, audio: &[u8], ctx: &ProviderRequestContext) -> Result<String, ProviderError> {
        if audio.is_empty() {
            return Ok(String::new());
        }
        with_deadline(ctx, self.asr.transcribe(audio, ctx)).await
    }

    pub async fn generate(
        &self,
        system_prompt: &str,
        history: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<String, ProviderError> {
        if system_prompt.trim().is_empty() {
            return Err(ProviderError::Usage("empty system prompt".into()));
        }
        with_deadline(ctx, self.llm.generate(system_prompt, history, ctx)).await
    }

    pub async fn synthesize(
        &self,
        text: &str,
        voice_id: &str,
        ctx: &ProviderRequestContext,
    ) -> Result<TtsResult, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::Usage("nothing to synthesize".into()));
        }
        let result = with_deadline(ctx, self.tts.synthesize(text, voice_id, ctx)).await?;
        if result.total_audio_bytes != result.audio_bytes.len() as u64 {
            return Err(ProviderError::BadResponse(
                "total_audio_bytes disagrees with the audio length".into(),
            ));
        }
        Ok(result)
    }

    pub async fn classify(
        &self,
        utterance: &str,
        context: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<IntentLabel, ProviderError> {
        if utterance.trim().is_empty() {
            return Err(ProviderError::Usage("empty utterance".into()));
        }
        with_deadline(ctx, self.intent.classify(utterance, context, ctx)).await
    }
}

async fn with_deadline<T>(
    ctx: &ProviderRequestContext,
    fut: impl std::future::Future<Output = Result<T, ProviderError>>,
) -> Result<T, ProviderError> {
    match tokio::time::timeout(Duration::from_millis(ctx.timeout_ms), fut).await {
        Ok(result) => result,
        Err(_) => Err(ProviderError::Timeout(ctx.timeout_ms)),
    }
}
