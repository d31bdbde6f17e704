//! Randomized barge-in timing against a streaming connection. After the
//! actor acknowledges a barge-in (the `bot_audio_end` that follows it), no
//! further chunk of the interrupted utterance may appear.
#![allow(dead_code)]

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use duplexkit::{ClientMessage, GatewayOptions, ServerMessage};
use duplexkit_core::providers::ProviderSet;
use duplexkit_core::Style;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conn::{hub, is_audio_end, is_bot_text, Conn};

const INTERRUPTIONS: &[&str] = &[
    "No, listen, I already said it!",
    "Sorry, could you repeat the second part?",
    "What about breakfast, sergeant?",
    "uh-huh",
    "goodbye",
    "",
];

fn options() -> GatewayOptions {
    GatewayOptions {
        chunk_bytes: 100,
        chunk_interval: Duration::from_millis(10),
        ..GatewayOptions::default()
    }
}

#[derive(Debug, Default)]
pub struct TrialStats {
    pub barge_ins: usize,
    pub chunks_before: usize,
}

/// Checks the log. For every barge-in, sent when the log had `sent_at`
/// entries: the `bot_audio_end` acknowledging it cuts the utterance short,
/// at most one chunk that was already in flight precedes it, and no chunk
/// of the utterance follows it.
pub fn check(log: &[ServerMessage], barges: &[(u32, usize)]) -> Result<usize, String> {
    let is_chunk = |m: &ServerMessage, u: u32| matches!(m, ServerMessage::BotAudioChunk { utterance_id, .. } if *utterance_id == u);
    let mut chunks_before = 0;
    for &(utterance, sent_at) in barges {
        let total = log
            .iter()
            .find_map(|m| match m {
                ServerMessage::BotText {
                    utterance_id,
                    total_audio_bytes,
                    ..
                } if *utterance_id == utterance => Some(*total_audio_bytes),
                _ => None,
            })
            .ok_or_else(|| format!("utterance {utterance}: never announced"))?;
        let ack = log[sent_at..]
            .iter()
            .position(|m| is_audio_end(m, utterance))
            .map(|i| i + sent_at)
            .ok_or_else(|| format!("utterance {utterance}: no bot_audio_end after the barge-in"))?;
        let in_flight = log[sent_at..ack].iter().filter(|m| is_chunk(m, utterance)).count();
        if in_flight > 1 {
            return Err(format!("utterance {utterance}: {in_flight} chunks between barge-in and its acknowledgement"));
        }
        if let Some(late) = log[ack + 1..].iter().position(|m| is_chunk(m, utterance)) {
            return Err(format!(
                "utterance {utterance}: chunk {:?} emitted {} messages after barge-in processing",
                log[ack + 1 + late],
                late + 1
            ));
        }
        let streamed: u64 = log[..ack]
            .iter()
            .filter_map(|m| match m {
                ServerMessage::BotAudioChunk { utterance_id, b64_payload, .. } if *utterance_id == utterance => {
                    Some(B64.decode(b64_payload).map_or(0, |b| b.len() as u64))
                }
                _ => None,
            })
            .sum();
        if streamed >= total {
            return Err(format!("utterance {utterance}: played to the end ({total} bytes) despite the barge-in"));
        }
        chunks_before += log[..ack].iter().filter(|m| is_chunk(m, utterance)).count();
    }
    for (i, m) in log.iter().enumerate() {
        if let ServerMessage::BotAudioEnd { utterance_id } = m {
            if log[i + 1..].iter().any(|n| is_audio_end(n, *utterance_id)) {
                return Err(format!("utterance {utterance_id} ended twice"));
            }
        }
    }
    Ok(chunks_before)
}

/// One randomized session: up to three barge-ins at random offsets, with
/// random gaps before the transcript arrives.
pub async fn trial(seed: u64) -> Result<TrialStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conn = Conn::open(hub(options(), ProviderSet::mock()));
    let style = [Style::A, Style::B, Style::C][rng.random_range(0..3)];
    conn.send(ClientMessage::SessionStart {
        persona_id: "drill_sergeant".into(),
        style,
        seed: Some(seed),
    })
    .await;
    conn.until(Duration::from_secs(5), is_bot_text).await?;

    let mut barges = Vec::new();
    let rounds = rng.random_range(1..=3);
    for _ in 0..rounds {
        let (utterance, _, total) = conn.last_bot_text().ok_or("no bot text")?;
        // Stop somewhere inside the utterance: it streams 100 bytes per 10 ms.
        let playing_ms = total / 10;
        let wait = rng.random_range(0..playing_ms.saturating_sub(20).max(1));
        conn.drain(Duration::from_millis(wait)).await;
        if conn.log.iter().any(|m| is_audio_end(m, utterance)) {
            break;
        }
        let played = conn.streamed(utterance);
        barges.push((utterance, conn.log.len()));
        conn.send(ClientMessage::BargeIn {
            utterance_id: utterance,
            played_bytes: played,
        })
        .await;
        if rng.random_bool(0.5) {
            conn.send(ClientMessage::VadSpeechStart {}).await;
        }
        conn.drain(Duration::from_millis(rng.random_range(0..200))).await;
        let text = INTERRUPTIONS[rng.random_range(0..INTERRUPTIONS.len())];
        conn.send(ClientMessage::UserText { text: text.into() }).await;
        let next = conn
            .until(Duration::from_secs(5), |m| {
                matches!(m, ServerMessage::BotText { utterance_id, .. } if *utterance_id > utterance)
                    || matches!(m, ServerMessage::SurveyShow { .. } | ServerMessage::SessionEnded { .. })
            })
            .await?;
        // A farewell is spoken with the survey already due.
        conn.drain(Duration::from_millis(1)).await;
        let over = conn
            .log
            .iter()
            .any(|m| matches!(m, ServerMessage::SurveyShow { .. } | ServerMessage::SessionEnded { .. }));
        if !is_bot_text(&next) || over {
            break;
        }
    }
    conn.drain(Duration::from_millis(500)).await;
    let log = conn.close().await;
    let chunks_before = check(&log, &barges).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(TrialStats {
        barge_ins: barges.len(),
        chunks_before,
    })
}

/// Runs `trials` seeds and sums their stats.
pub async fn run(trials: u64) -> Result<TrialStats, String> {
    let mut total = TrialStats::default();
    for seed in 0..trials {
        let s = trial(seed).await?;
        total.barge_ins += s.barge_ins;
        total.chunks_before += s.chunks_before;
    }
    Ok(total)
}
