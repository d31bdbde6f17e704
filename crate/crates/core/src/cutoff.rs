//! Maps a playback progress report onto the text the bot actually said.
//!
//! Offsets into text count Unicode scalar values. Splits always land on a
//! word boundary; inter-word whitespace goes to the remainder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Links a character offset in the spoken text to a byte offset in its audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub char_offset: usize,
    pub byte_offset: u64,
}

impl AlignmentPoint {
    pub fn new(char_offset: usize, byte_offset: u64) -> Self {
        Self {
            char_offset,
            byte_offset,
        }
    }
}

/// Timing data as a TTS provider may return it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtsTiming {
    /// Start offset of individual characters.
    Characters(Vec<AlignmentPoint>),
    /// Contiguous spans of text and the audio bytes that voice them.
    Chunks(Vec<ChunkTiming>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkTiming {
    pub char_start: usize,
    pub char_end: usize,
    pub byte_start: u64,
    pub byte_end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CutoffError {
    #[error("invalid playback report: {0}")]
    InvalidPlayback(String),
    #[error("invalid alignment: {0}")]
    Alignment(String),
}

/// State of one bot utterance at the moment the user barged in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtterancePlayback {
    pub utterance_id: u32,
    pub intended_text: String,
    pub total_audio_bytes: u64,
    pub alignment: Option<Vec<AlignmentPoint>>,
    pub played_bytes: u64,
}

/// `cutoff_text + remaining_text == intended_text`, always.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoffResult {
    pub cutoff_text: String,
    pub remaining_text: String,
    /// Character position before snapping to a word boundary.
    pub raw_char_offset: usize,
}

/// Splits the intended text where playback stopped.
pub fn split_on_barge_in(p: &UtterancePlayback) -> Result<CutoffResult, CutoffError> {
    if p.played_bytes > p.total_audio_bytes {
        return Err(CutoffError::InvalidPlayback(format!(
            "played_bytes {} exceeds total_audio_bytes {}",
            p.played_bytes, p.total_audio_bytes
        )));
    }
    let chars: Vec<char> = p.intended_text.chars().collect();
    let len = chars.len();

    let raw = match &p.alignment {
        Some(points) => {
            check_alignment(points, len, p.total_audio_bytes)
                .map_err(|e| CutoffError::InvalidPlayback(e.to_string()))?;
            lookup(points, p.played_bytes)
        }
        None if p.total_audio_bytes == 0 => 0,
        None => {
            (len as u128 * p.played_bytes as u128 / p.total_audio_bytes as u128) as usize
        }
    };
    let split = snap_down(&chars, raw.min(len));
    let byte_index = p
        .intended_text
        .char_indices()
        .nth(split)
        .map_or(p.intended_text.len(), |(i, _)| i);
    let (cutoff, remaining) = p.intended_text.split_at(byte_index);
    Ok(CutoffResult {
        cutoff_text: cutoff.to_string(),
        remaining_text: remaining.to_string(),
        raw_char_offset: raw,
    })
}

/// Largest word boundary at or below `pos`. Boundaries are both ends of the
/// text and the first whitespace character after each word.
pub fn snap_down(chars: &[char], pos: usize) -> usize {
    if pos >= chars.len() {
        return chars.len();
    }
    let mut q = pos;
    while q > 0 {
        if chars[q].is_whitespace() && !chars[q - 1].is_whitespace() {
            return q;
        }
        q -= 1;
    }
    0
}

/// Character position voiced by `played` bytes, interpolating linearly
/// between anchors and rounding down.
fn lookup(points: &[AlignmentPoint], played: u64) -> usize {
    let i = points.partition_point(|a| a.byte_offset <= played);
    // check_alignment guarantees points[0].byte_offset == 0, so i >= 1.
    let lo = points[i - 1];
    match points.get(i) {
        None => lo.char_offset,
        Some(hi) => {
            let span_chars = (hi.char_offset - lo.char_offset) as u128;
            let span_bytes = (hi.byte_offset - lo.byte_offset) as u128;
            let into = (played - lo.byte_offset) as u128;
            lo.char_offset + (span_chars * into / span_bytes) as usize
        }
    }
}

fn check_alignment(points: &[AlignmentPoint], len: usize, total: u64) -> Result<(), CutoffError> {
    let first = points
        .first()
        .ok_or_else(|| CutoffError::Alignment("alignment is empty".into()))?;
    if *first != AlignmentPoint::new(0, 0) {
        return Err(CutoffError::Alignment(format!(
            "alignment starts at ({}, {}), expected (0, 0)",
            first.char_offset, first.byte_offset
        )));
    }
    let last = points[points.len() - 1];
    if last != AlignmentPoint::new(len, total) {
        return Err(CutoffError::Alignment(format!(
            "alignment ends at ({}, {}), expected ({len}, {total})",
            last.char_offset, last.byte_offset
        )));
    }
    for w in points.windows(2) {
        if w[1].char_offset <= w[0].char_offset || w[1].byte_offset <= w[0].byte_offset {
            return Err(CutoffError::Alignment(format!(
                "anchors ({}, {}) and ({}, {}) are not strictly increasing",
                w[0].char_offset, w[0].byte_offset, w[1].char_offset, w[1].byte_offset
            )));
        }
    }
    Ok(())
}

/// Normalizes provider timing into anchors from `(0, 0)` to
/// `(text_len, total_bytes)`. No timing means no alignment; callers fall
/// back to proportional mapping.
pub fn derive_alignment(
    timing: Option<&TtsTiming>,
    text_len: usize,
    total_bytes: u64,
) -> Result<Option<Vec<AlignmentPoint>>, CutoffError> {
    let raw: Vec<AlignmentPoint> = match timing {
        None => return Ok(None),
        Some(TtsTiming::Characters(points)) => points.clone(),
        Some(TtsTiming::Chunks(chunks)) => {
            let mut points = Vec::with_capacity(chunks.len() * 2);
            for c in chunks {
                if c.char_end < c.char_start || c.byte_end < c.byte_start {
                    return Err(CutoffError::Alignment(format!(
                        "chunk [{}, {}) / [{}, {}) runs backwards",
                        c.char_start, c.char_end, c.byte_start, c.byte_end
                    )));
                }
                points.push(AlignmentPoint::new(c.char_start, c.byte_start));
                points.push(AlignmentPoint::new(c.char_end, c.byte_end));
            }
            points
        }
    };
    if raw.is_empty() {
        return Ok(None);
    }

    if text_len == 0 || total_bytes == 0 {
        return Ok(None);
    }
    let mut anchors = vec![AlignmentPoint::new(0, 0)];
    for point in raw {
        let prev = *anchors.last().expect("anchors start non-empty");
        if point.char_offset < prev.char_offset || point.byte_offset < prev.byte_offset {
            return Err(CutoffError::Alignment(format!(
                "provider timing goes backwards at ({}, {}) after ({}, {})",
                point.char_offset, point.byte_offset, prev.char_offset, prev.byte_offset
            )));
        }
        if point.char_offset > text_len || point.byte_offset > total_bytes {
            return Err(CutoffError::Alignment(format!(
                "provider timing ({}, {}) lies beyond the utterance ({text_len}, {total_bytes})",
                point.char_offset, point.byte_offset
            )));
        }
        // Keep only anchors that advance both coordinates and stay short of
        // the end anchor, which is appended below.
        let advances = point.char_offset > prev.char_offset && point.byte_offset > prev.byte_offset;
        let before_end = point.char_offset < text_len && point.byte_offset < total_bytes;
        if advances && before_end {
            anchors.push(point);
        }
    }
    anchors.push(AlignmentPoint::new(text_len, total_bytes));
    Ok(Some(anchors))
}
