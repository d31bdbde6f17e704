//! Deterministic in-process providers. Outputs depend only on inputs, so
//! sessions replay identically across runs and processes.

use std::time::Duration;

use async_trait::async_trait;

use super::{
    AsrProvider, DialogueTurn, IntentProvider, LlmProvider, ProviderError, ProviderRequestContext,
    TtsProvider, TtsResult,
};
use crate::cutoff::{AlignmentPoint, TtsTiming};
use crate::session::Speaker;
use crate::turn_policy::{
    extract_section, find_control_token, IntentLabel, InterruptIntent, EXIT_TAG, FAREWELL_MARKER,
    SECTION_REMAINING, SECTION_USER,
};

/// Audio bytes the mock TTS emits per character of text.
pub const MOCK_BYTES_PER_CHAR: u64 = 100;
pub const MOCK_MEDIA_TYPE: &str = "audio/x-duplexkit-mock";

/// Optional delay and failure applied to a mock call.
#[derive(Debug, Clone, Default)]
pub struct Fault {
    pub delay: Option<Duration>,
    pub error: Option<ProviderError>,
}

impl Fault {
    pub fn failing(error: ProviderError) -> Self {
        Self {
            delay: None,
            error: Some(error),
        }
    }

    pub fn delayed(delay: Duration) -> Self {
        Self {
            delay: Some(delay),
            error: None,
        }
    }

    async fn apply(&self) -> Result<(), ProviderError> {
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        match &self.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}

/// Text-mode ASR: audio is a JSON envelope `{"text": "..."}`.
#[derive(Debug, Clone, Default)]
pub struct MockAsr {
    pub fault: Fault,
}

impl MockAsr {
    pub fn with_fault(fault: Fault) -> Self {
        Self { fault }
    }

    /// Builds the envelope the mock understands.
    pub fn envelope(text: &str) -> Vec<u8> {
        serde_json::to_vec(&serde_json::json!({ "text": text })).expect("json")
    }
}

#[async_trait]
impl AsrProvider for MockAsr {
    async fn transcribe(&self, audio: &[u8], _ctx: &ProviderRequestContext) -> Result<String, ProviderError> {
        self.fault.apply().await?;
        #[derive(serde::Deserialize)]
        struct Envelope {
            text: String,
        }
        // Anything that is not an envelope is treated as silence.
        Ok(serde_json::from_slice::<Envelope>(audio)
            .map(|e| e.text)
            .unwrap_or_default())
    }
}

/// Rule-based LLM that makes every strategy path observable.
#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    pub fault: Fault,
}

impl MockLlm {
    pub fn with_fault(fault: Fault) -> Self {
        Self { fault }
    }
}

#[async_trait]
impl LlmProvider for MockLlm {
    async fn generate(
        &self,
        system_prompt: &str,
        history: &[DialogueTurn],
        _ctx: &ProviderRequestContext,
    ) -> Result<String, ProviderError> {
        self.fault.apply().await?;
        Ok(mock_completion(system_prompt, history))
    }
}

/// The mock LLM's rule table.
pub fn mock_completion(system_prompt: &str, history: &[DialogueTurn]) -> String {
    if system_prompt.contains(FAREWELL_MARKER) {
        return format!("Farewell. {EXIT_TAG}");
    }
    let continuation = || {
        let remaining = extract_section(system_prompt, SECTION_REMAINING).unwrap_or("");
        format!("...{}", remaining.trim_start())
    };
    let user_words = || {
        extract_section(system_prompt, SECTION_USER)
            .map(str::to_string)
            .or_else(|| {
                history
                    .iter()
                    .rev()
                    .find(|t| t.speaker == Speaker::User)
                    .map(|t| t.text.clone())
            })
            .unwrap_or_default()
    };
    match find_control_token(system_prompt) {
        Some("RESUME") => continuation(),
        Some("BRIDGE") => format!("Fair point. {}", continuation()),
        Some("OVERRIDE") => format!("Do not interrupt. {}", continuation()),
        Some("YIELD") => format!("Understood. {}", echo(&user_words())),
        Some("AUTO") => format!("[STRATEGY=YIELD] Understood. {}", echo(&user_words())),
        _ => format!("{} Tell me more.", echo(&user_words())),
    }
}

/// One sentence quoting the last five words of `text`.
fn echo(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let tail = words[words.len().saturating_sub(5)..].join(" ");
    let tail = tail.trim_end_matches(['.', '!', '?', ',', ';', ':']);
    if tail.is_empty() {
        "Go on.".to_string()
    } else {
        format!("You said: {tail}.")
    }
}

/// Emits [`MOCK_BYTES_PER_CHAR`] bytes per character with per-character timing.
#[derive(Debug, Clone, Default)]
pub struct MockTts {
    pub fault: Fault,
}

impl MockTts {
    pub fn with_fault(fault: Fault) -> Self {
        Self { fault }
    }
}

#[async_trait]
impl TtsProvider for MockTts {
    async fn synthesize(
        &self,
        text: &str,
        _voice_id: &str,
        _ctx: &ProviderRequestContext,
    ) -> Result<TtsResult, ProviderError> {
        self.fault.apply().await?;
        if text.is_empty() {
            return Err(ProviderError::Usage("nothing to synthesize".into()));
        }
        let per_char = MOCK_BYTES_PER_CHAR as usize;
        let mut audio = Vec::with_capacity(text.len() * per_char);
        let mut timing = Vec::new();
        for (i, c) in text.chars().enumerate() {
            timing.push(AlignmentPoint::new(i, (i * per_char) as u64));
            let code = c as u32;
            audio.extend((0..per_char).map(|k| (code.wrapping_add(k as u32) & 0xff) as u8));
        }
        Ok(TtsResult::new(
            audio,
            MOCK_MEDIA_TYPE,
            Some(TtsTiming::Characters(timing)),
        ))
    }
}

/// Lexicon-based intent classifier.
#[derive(Debug, Clone, Default)]
pub struct MockIntent {
    pub fault: Fault,
}

impl MockIntent {
    pub fn with_fault(fault: Fault) -> Self {
        Self { fault }
    }
}

#[async_trait]
impl IntentProvider for MockIntent {
    async fn classify(
        &self,
        utterance: &str,
        _context: &[DialogueTurn],
        _ctx: &ProviderRequestContext,
    ) -> Result<IntentLabel, ProviderError> {
        self.fault.apply().await?;
        Ok(IntentLabel {
            intent: mock_intent(utterance),
            recognized: true,
        })
    }
}

const BACKCHANNEL_WORDS: &[&str] = &["uh-huh", "yeah", "ok", "okay", "hmm", "right", "mmhm"];
const TERMINATE_PHRASES: &[&str] = &["goodbye", "bye", "stop", "end the", "i'm done"];
const TOPIC_CHANGE_OPENERS: &[&str] = &["what about", "speaking of", "anyway", "by the way"];
const COMPETITIVE_PHRASES: &[&str] = &["no", "wrong", "stop", "listen", "actually you"];

fn tokens(utterance: &str) -> Vec<String> {
    utterance
        .to_lowercase()
        .replace('\u{2019}', "'")
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
                .trim_matches(|c: char| c == '\'' || c == '-')
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let words: Vec<&str> = phrase.split(' ').collect();
    tokens
        .windows(words.len())
        .any(|w| w.iter().zip(&words).all(|(a, b)| a == b))
}

fn starts_with_phrase(tokens: &[String], phrase: &str) -> bool {
    let words: Vec<&str> = phrase.split(' ').collect();
    tokens.len() >= words.len() && tokens.iter().zip(&words).all(|(a, b)| a == b)
}

/// Applies the mock lexicon in priority order: terminate, backchannel,
/// topic change, competitive, otherwise cooperative.
pub fn mock_intent(utterance: &str) -> InterruptIntent {
    let toks = tokens(utterance);
    if TERMINATE_PHRASES.iter().any(|p| contains_phrase(&toks, p)) {
        InterruptIntent::Terminate
    } else if !toks.is_empty()
        && toks.len() <= 3
        && toks.iter().all(|t| BACKCHANNEL_WORDS.contains(&t.as_str()))
    {
        InterruptIntent::Backchannel
    } else if TOPIC_CHANGE_OPENERS.iter().any(|p| starts_with_phrase(&toks, p)) {
        InterruptIntent::TopicChange
    } else if COMPETITIVE_PHRASES.iter().any(|p| contains_phrase(&toks, p)) {
        InterruptIntent::Competitive
    } else {
        InterruptIntent::Cooperative
    }
}
