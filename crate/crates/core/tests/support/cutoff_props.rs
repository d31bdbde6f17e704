//! Generators and an independent checker for cutoff splitting. Shared by
//! the core property tests and the acceptance harness.

use duplexkit_core::cutoff::AlignmentPoint;
use duplexkit_core::{split_on_barge_in, UtterancePlayback};
use proptest::prelude::*;

/// Text with mixed scripts, punctuation and irregular whitespace.
pub fn text() -> impl Strategy<Value = String> {
    let word = prop::sample::select(vec![
        "Louder", "recruit!", "I", "can't", "café", "naïve", "日本語", "über-cool", "🙂", "a", "—", "...",
        "Repeat", "it", "again!", "x", "Ωmega",
    ]);
    let gap = prop::sample::select(vec![" ", " ", " ", "  ", "\t", "\n", " \u{a0}", "\u{3000}"]);
    (
        prop::sample::select(vec!["", " ", "\n"]),
        prop::collection::vec((word, gap), 0..14),
        prop::bool::ANY,
    )
        .prop_map(|(lead, parts, trailing_gap)| {
            let mut s = lead.to_string();
            let n = parts.len();
            for (i, (w, g)) in parts.into_iter().enumerate() {
                s.push_str(w);
                if i + 1 < n || trailing_gap {
                    s.push_str(g);
                }
            }
            s
        })
}

/// Anchors from `(0, 0)` to `(len, total)`, strictly increasing on both axes.
fn alignment(len: usize, total: u64) -> BoxedStrategy<Option<Vec<AlignmentPoint>>> {
    if len == 0 || total == 0 {
        return Just(None).boxed();
    }
    let inner = (len - 1).min(total as usize - 1).min(8);
    let with = (
        prop::collection::btree_set(1..len.max(2), 0..=inner),
        prop::collection::btree_set(1..total.max(2), 0..=inner),
    )
        .prop_map(move |(chars, bytes)| {
            let k = chars.len().min(bytes.len());
            let mut points = vec![AlignmentPoint::new(0, 0)];
            points.extend(
                chars
                    .into_iter()
                    .filter(|&c| c < len)
                    .zip(bytes.into_iter().filter(|&b| b < total))
                    .take(k)
                    .map(|(c, b)| AlignmentPoint::new(c, b)),
            );
            points.push(AlignmentPoint::new(len, total));
            Some(points)
        });
    prop_oneof![Just(None), with].boxed()
}

/// A playback plus a second, later progress report on the same utterance.
pub fn playback_pair() -> impl Strategy<Value = (UtterancePlayback, u64)> {
    (text(), 0u64..20_000)
        .prop_flat_map(|(text, total)| {
            let len = text.chars().count();
            (Just(text), Just(total), alignment(len, total), 0..=total, 0..=total)
        })
        .prop_map(|(intended_text, total, alignment, a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            (
                UtterancePlayback {
                    utterance_id: 0,
                    intended_text,
                    total_audio_bytes: total,
                    alignment,
                    played_bytes: lo,
                },
                hi,
            )
        })
}

fn is_boundary(chars: &[char], k: usize) -> bool {
    k == 0 || k == chars.len() || (chars[k].is_whitespace() && !chars[k - 1].is_whitespace())
}

/// Concatenation, word-boundary integrity and monotonicity for one case.
pub fn check((p, later): &(UtterancePlayback, u64)) -> Result<(), String> {
    let first = split_on_barge_in(p).map_err(|e| format!("split failed: {e}"))?;
    if format!("{}{}", first.cutoff_text, first.remaining_text) != p.intended_text {
        return Err(format!("concatenation broken for {p:?}"));
    }
    let chars: Vec<char> = p.intended_text.chars().collect();
    let k = first.cutoff_text.chars().count();
    if !is_boundary(&chars, k) {
        return Err(format!("split {k} is not a word boundary in {:?}", p.intended_text));
    }
    let raw = first.raw_char_offset.min(chars.len());
    if k > raw {
        return Err(format!("split {k} is past the played position {raw}"));
    }
    if let Some(skipped) = (k + 1..=raw).find(|&j| is_boundary(&chars, j)) {
        return Err(format!("split {k} skipped boundary {skipped} at or below {raw}"));
    }
    if p.played_bytes == p.total_audio_bytes && p.total_audio_bytes > 0 && k != chars.len() {
        return Err("fully played utterance was not fully cut".into());
    }
    if p.played_bytes == 0 && k != 0 {
        return Err("nothing played but cutoff is non-empty".into());
    }

    let mut q = p.clone();
    q.played_bytes = *later;
    let second = split_on_barge_in(&q).map_err(|e| format!("split failed: {e}"))?;
    if second.cutoff_text.chars().count() < k || !second.cutoff_text.starts_with(&first.cutoff_text) {
        return Err(format!("not monotone: {} bytes -> {k} chars, {later} bytes -> {:?}", p.played_bytes, second.cutoff_text));
    }
    Ok(())
}
