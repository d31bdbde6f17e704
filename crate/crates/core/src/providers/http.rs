//! Adapters for HTTP endpoints shaped like the OpenAI REST API
//! (`/chat/completions`, `/audio/speech`, `/audio/transcriptions`).
//!
//! Keys are read from the route's environment variable at request time and
//! only ever placed in the `Authorization` header.

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{
    AsrProvider, DialogueTurn, IntentProvider, LlmProvider, ProviderError, ProviderRequestContext,
    TtsProvider, TtsResult,
};
use crate::session::Speaker;
use crate::turn_policy::{parse_intent_answer, IntentLabel, CLASSIFIER_PROMPT};

pub fn client() -> reqwest::Client {
    reqwest::Client::builder()
        .build()
        .expect("default reqwest client builds")
}

fn authorized(
    client: &reqwest::Client,
    ctx: &ProviderRequestContext,
) -> Result<reqwest::RequestBuilder, ProviderError> {
    let key = std::env::var(&ctx.route.api_key_env).map_err(|_| {
        ProviderError::Usage(format!(
            "environment variable {} is not set",
            ctx.route.api_key_env
        ))
    })?;
    Ok(client
        .post(&ctx.route.endpoint_url)
        .bearer_auth(key)
        .timeout(std::time::Duration::from_millis(ctx.timeout_ms)))
}

async fn send(request: reqwest::RequestBuilder) -> Result<reqwest::Response, ProviderError> {
    let response = request.send().await.map_err(|e| {
        if e.is_timeout() {
            ProviderError::Transport("request timed out".into())
        } else {
            ProviderError::Transport(e.without_url().to_string())
        }
    })?;
    let status = response.status();
    if !status.is_success() {
        return Err(ProviderError::Status(status.as_u16()));
    }
    Ok(response)
}

async fn json_body(response: reqwest::Response) -> Result<Value, ProviderError> {
    response
        .json::<Value>()
        .await
        .map_err(|e| ProviderError::BadResponse(e.without_url().to_string()))
}

fn chat_messages(system_prompt: &str, history: &[DialogueTurn]) -> Vec<Value> {
    let mut messages = vec![json!({"role": "system", "content": system_prompt})];
    messages.extend(history.iter().map(|t| {
        let role = match t.speaker {
            Speaker::User => "user",
            Speaker::Bot => "assistant",
        };
        json!({"role": role, "content": t.text})
    }));
    messages
}

fn completion_text(body: &Value) -> Result<String, ProviderError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))
}

async fn chat(
    client: &reqwest::Client,
    ctx: &ProviderRequestContext,
    messages: Vec<Value>,
) -> Result<String, ProviderError> {
    let body = json!({
        "model": ctx.route.model_or_voice_id,
        "messages": messages,
    });
    let response = send(authorized(client, ctx)?.json(&body)).await?;
    completion_text(&json_body(response).await?)
}

pub struct HttpLlm {
    client: reqwest::Client,
}

impl HttpLlm {
    pub fn new(client: reqwest::Client) -> Self {
        Self { client }
    }
}

#[async_trait]
impl LlmProvider for HttpLlm {
    async fn generate(
        &self,
        system_prompt: &str,
        history: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<String, ProviderError> {
        chat(&self.client, ctx, chat_messages(system_prompt, history)).await
    }
}

pub struct HttpIntent {
    client: reqwest::Client,
}

impl HttpIntent {
    pub fn new(client: reqwest::Client) -> Self {
        Self { client }
    }
}

#[async_trait]
impl IntentProvider for HttpIntent {
    async fn classify(
        &self,
        utterance: &str,
        context: &[DialogueTurn],
        ctx: &ProviderRequestContext,
    ) -> Result<IntentLabel, ProviderError> {
        let mut transcript = String::new();
        for turn in context.iter().rev().take(6).rev() {
            let who = match turn.speaker {
                Speaker::User => "User",
                Speaker::Bot => "Agent",
            };
            transcript.push_str(&format!("{who}: {}\n", turn.text));
        }
        let user = format!(
            "Recent conversation:\n{transcript}\nInterrupting utterance: {utterance}\nLabel:"
        );
        let messages = vec![
            json!({"role": "system", "content": CLASSIFIER_PROMPT}),
            json!({"role": "user", "content": user}),
        ];
        let answer = chat(&self.client, ctx, messages).await?;
        Ok(parse_intent_answer(&answer))
    }
}

pub struct HttpTts {
    client: reqwest::Client,
}

impl HttpTts {
    pub fn new(client: reqwest::Client) -> Self {
        Self { client }
    }
}

#[async_trait]
impl TtsProvider for HttpTts {
    async fn synthesize(
        &self,
        text: &str,
        voice_id: &str,
        ctx: &ProviderRequestContext,
    ) -> Result<TtsResult, ProviderError> {
        let body = json!({
            "model": ctx.route.model_or_voice_id,
            "input": text,
            "voice": voice_id,
        });
        let response = send(authorized(&self.client, ctx)?.json(&body)).await?;
        let media_type = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let audio = response
            .bytes()
            .await
            .map_err(|e| ProviderError::Transport(e.without_url().to_string()))?;
        Ok(TtsResult::new(audio.to_vec(), media_type, None))
    }
}

pub struct HttpAsr {
    client: reqwest::Client,
}

impl HttpAsr {
    pub fn new(client: reqwest::Client) -> Self {
        Self { client }
    }
}

#[async_trait]
impl AsrProvider for HttpAsr {
    async fn transcribe(&self, audio: &[u8], ctx: &ProviderRequestContext) -> Result<String, ProviderError> {
        let form = reqwest::multipart::Form::new()
            .text("model", ctx.route.model_or_voice_id.clone())
            .part(
                "file",
                reqwest::multipart::Part::bytes(audio.to_vec()).file_name("audio.webm"),
            );
        let response = send(authorized(&self.client, ctx)?.multipart(form)).await?;
        let body = json_body(response).await?;
        body.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::BadResponse("missing text".into()))
    }
}
