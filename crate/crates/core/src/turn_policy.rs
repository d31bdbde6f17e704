//! The turn-taking manager: intent taxonomy, strategy sampling and the
//! strategy-conditioned prompt handed to the LLM.

use std::fmt;
use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{InterruptionMatrix, MatrixMode, PersonaConfig, StrategyWeights};
use crate::providers::{DialogueTurn, ProviderError, ProviderRequestContext, ProviderSet};

/// What the user was doing when they spoke over the bot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterruptIntent {
    Competitive,
    Cooperative,
    TopicChange,
    Backchannel,
    /// Session-ending intent. A lifecycle signal, never a matrix row.
    Terminate,
}

impl InterruptIntent {
    pub const ALL: [InterruptIntent; 5] = [
        InterruptIntent::Competitive,
        InterruptIntent::Cooperative,
        InterruptIntent::TopicChange,
        InterruptIntent::Backchannel,
        InterruptIntent::Terminate,
    ];

    /// The intents that carry a row in a probabilistic matrix.
    pub const MATRIX_ROWS: [InterruptIntent; 4] = [
        InterruptIntent::Competitive,
        InterruptIntent::Cooperative,
        InterruptIntent::TopicChange,
        InterruptIntent::Backchannel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InterruptIntent::Competitive => "competitive",
            InterruptIntent::Cooperative => "cooperative",
            InterruptIntent::TopicChange => "topic_change",
            InterruptIntent::Backchannel => "backchannel",
            InterruptIntent::Terminate => "terminate",
        }
    }

    /// Parses a classifier label. Case, surrounding punctuation and the
    /// separator in "topic change" are ignored.
    pub fn parse_label(label: &str) -> Option<InterruptIntent> {
        let cleaned: String = label
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        Self::ALL.into_iter().find(|intent| intent.as_str() == cleaned)
    }
}

impl fmt::Display for InterruptIntent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the bot responds to an interruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Yield,
    Resume,
    Bridge,
    Override,
}

impl Strategy {
    /// Fixed order used by inverse-CDF sampling. Changing it changes every
    /// recorded replay.
    pub const ALL: [Strategy; 4] = [
        Strategy::Yield,
        Strategy::Resume,
        Strategy::Bridge,
        Strategy::Override,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Yield => "yield",
            Strategy::Resume => "resume",
            Strategy::Bridge => "bridge",
            Strategy::Override => "override",
        }
    }

    /// Upper-case name used inside `[STRATEGY=...]` control tokens.
    pub fn token(self) -> &'static str {
        match self {
            Strategy::Yield => "YIELD",
            Strategy::Resume => "RESUME",
            Strategy::Bridge => "BRIDGE",
            Strategy::Override => "OVERRIDE",
        }
    }

    pub fn from_token(token: &str) -> Option<Strategy> {
        Self::ALL
            .into_iter()
            .find(|s| s.token().eq_ignore_ascii_case(token.trim()))
    }

    /// Instruction appended to the control token.
    pub fn instruction(self) -> &'static str {
        STRATEGY_TEMPLATES[self.index()]
    }

    /// Whether the strategy carries the unspoken remainder forward.
    pub fn continues_utterance(self) -> bool {
        !matches!(self, Strategy::Yield)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One instruction per strategy, indexed in [`Strategy::ALL`] order.
pub const STRATEGY_TEMPLATES: [&str; 4] = [
    "abandon your previous sentence and respond to the user",
    "finish your previous sentence, ignoring the user",
    "briefly acknowledge the user's point, then finish your previous sentence",
    "assert the floor in character, rebuff the interruption, then continue",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no matrix row for intent {0}")]
    MissingRow(InterruptIntent),
    #[error("terminate is a lifecycle signal and cannot be sampled")]
    TerminateNotSampled,
    #[error("malformed sampler snapshot {0:?}")]
    BadSnapshot(String),
}

/// Outcome of the turn-taking manager for one interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub intent: InterruptIntent,
    /// Absent in autonomous mode until the LLM reports its own choice.
    pub strategy: Option<Strategy>,
    pub mode: MatrixMode,
    /// Sampler state taken immediately before this decision.
    pub rng_seed_state: String,
    pub decided_at: u64,
}

/// Seeded source of uniform draws for strategy sampling. Owned by exactly
/// one session.
#[derive(Debug, Clone)]
pub struct StrategySampler {
    seed: u64,
    rng: ChaCha8Rng,
}

impl StrategySampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `chacha8:<seed>:<word position>`; enough to resume the stream exactly.
    pub fn snapshot(&self) -> String {
        format!("chacha8:{}:{}", self.seed, self.rng.get_word_pos())
    }

    pub fn restore(snapshot: &str) -> Result<Self, PolicyError> {
        let bad = || PolicyError::BadSnapshot(snapshot.to_string());
        let mut parts = snapshot.split(':');
        if parts.next() != Some("chacha8") {
            return Err(bad());
        }
        let seed: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let pos: u128 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let mut sampler = Self::new(seed);
        sampler.rng.set_word_pos(pos);
        Ok(sampler)
    }

    /// Uniform draw in [0, 1) from the top 53 bits of the next u64.
    pub fn next_unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Inverse-CDF lookup of `u` in `[0, 1)` over a row in [`Strategy::ALL`] order.
/// Zero-weight strategies are never returned.
pub fn draw_from_row(weights: &StrategyWeights, u: f64) -> Strategy {
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for strategy in Strategy::ALL {
        let w = weights.get(strategy);
        if w > 0.0 {
            cumulative += w;
            last_positive = Some(strategy);
            if u < cumulative {
                return strategy;
            }
        }
    }
    // u landed in the rounding slack above the cumulative sum.
    last_positive.unwrap_or(Strategy::Yield)
}

/// Chooses how to answer an interruption of the given intent.
pub fn sample_strategy(
    intent: InterruptIntent,
    matrix: &InterruptionMatrix,
    sampler: &mut StrategySampler,
    now_ms: u64,
) -> Result<StrategyDecision, PolicyError> {
    if intent == InterruptIntent::Terminate {
        return Err(PolicyError::TerminateNotSampled);
    }
    let rng_seed_state = sampler.snapshot();
    let strategy = match matrix.mode {
        MatrixMode::AlwaysYield => Some(Strategy::Yield),
        MatrixMode::Autonomous => None,
        MatrixMode::Probabilistic => {
            let row = matrix
                .rows
                .get(&intent)
                .ok_or(PolicyError::MissingRow(intent))?;
            Some(draw_from_row(row, sampler.next_unit()))
        }
    };
    Ok(StrategyDecision {
        intent,
        strategy,
        mode: matrix.mode,
        rng_seed_state,
        decided_at: now_ms,
    })
}

/// Why a classification did not come straight from a recognised label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassificationIssue {
    ProviderError,
    Unrecognized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub intent: InterruptIntent,
    pub issue: Option<ClassificationIssue>,
}

/// Classifies an utterance through the configured intent provider.
pub async fn classify_intent(
    utterance: &str,
    context: &[DialogueTurn],
    providers: &ProviderSet,
    ctx: &ProviderRequestContext,
) -> Result<Classification, ProviderError> {
    let label = providers.classify(utterance, context, ctx).await?;
    Ok(Classification {
        intent: label.intent,
        issue: (!label.recognized).then_some(ClassificationIssue::Unrecognized),
    })
}

/// [`classify_intent`] with the live-session fallback: any provider failure
/// is treated as a cooperative interruption.
pub async fn classify_or_fallback(
    utterance: &str,
    context: &[DialogueTurn],
    providers: &ProviderSet,
    ctx: &ProviderRequestContext,
) -> Classification {
    match classify_intent(utterance, context, providers, ctx).await {
        Ok(c) => c,
        Err(err) => {
            tracing::warn!(session = %ctx.session_id, error = %err, "intent classification failed");
            Classification {
                intent: InterruptIntent::Cooperative,
                issue: Some(ClassificationIssue::ProviderError),
            }
        }
    }
}

/// A classifier's answer after mapping onto the closed intent set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntentLabel {
    pub intent: InterruptIntent,
    pub recognized: bool,
}

/// Maps a free-form classifier answer. Unrecognised answers become
/// `Cooperative`, the least disruptive reading.
pub fn parse_intent_answer(answer: &str) -> IntentLabel {
    let first_word = answer.split_whitespace().next().unwrap_or("");
    let parsed = InterruptIntent::parse_label(answer).or_else(|| {
        // "topic change" spans two words; otherwise the first word decides.
        InterruptIntent::parse_label(first_word)
    });
    match parsed {
        Some(intent) => IntentLabel {
            intent,
            recognized: true,
        },
        None => IntentLabel {
            intent: InterruptIntent::Cooperative,
            recognized: false,
        },
    }
}

/// System prompt for zero-shot intent classification.
pub const CLASSIFIER_PROMPT: &str = "\
You label what a person meant when they started talking while a voice agent was still speaking.
Answer with exactly one word from this list and nothing else:
competitive - they want the floor in order to disagree, correct or take control of the conversation.
cooperative - they add or ask for information that fits the current topic without derailing it.
topic_change - they steer the conversation to a different subject.
backchannel - a short acknowledgement such as \"uh-huh\" or \"right\" that does not claim the floor.
terminate - they want to end the conversation, for example by saying goodbye or that they are done.";

// Section markers shared by every prompt builder. The mock LLM parses them.
const SECTION_OPEN: &str = "--- ";
const SECTION_CLOSE: &str = " ---";

pub const SECTION_PERSONA: &str = "persona";
pub const SECTION_ROLE: &str = "role";
pub const SECTION_SCENARIO: &str = "scenario";
pub const SECTION_CUTOFF: &str = "cutoff_text";
pub const SECTION_REMAINING: &str = "remaining_text";
pub const SECTION_USER: &str = "user_utterance";

/// Marker placed in prompts that ask for a closing line.
pub const FAREWELL_MARKER: &str = "[FAREWELL]";
/// Hidden tag the LLM appends to its farewell.
pub const EXIT_TAG: &str = "[EXIT]";

fn push_section(out: &mut String, name: &str, body: &str) {
    out.push_str(SECTION_OPEN);
    out.push_str(name);
    out.push_str(SECTION_CLOSE);
    out.push('\n');
    out.push_str(&defang(body));
    out.push('\n');
    out.push_str(SECTION_OPEN);
    out.push_str("end ");
    out.push_str(name);
    out.push_str(SECTION_CLOSE);
    out.push('\n');
}

/// Reads back the verbatim body of a labeled section.
pub fn extract_section<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("{SECTION_OPEN}{name}{SECTION_CLOSE}\n");
    let close = format!("\n{SECTION_OPEN}end {name}{SECTION_CLOSE}");
    let start = prompt.find(&open)? + open.len();
    let len = prompt[start..].find(&close)?;
    Some(&prompt[start..start + len])
}

fn strategy_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[STRATEGY=([A-Za-z]+)\]").expect("valid regex"))
}

/// Embedded text may not smuggle in a second control token.
fn defang(text: &str) -> String {
    text.replace("[STRATEGY=", "[STRATEGY =")
}

/// Finds the single control token in a prompt.
pub fn find_control_token(prompt: &str) -> Option<&str> {
    strategy_token_regex()
        .captures(prompt)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str())
}

pub fn count_control_tokens(prompt: &str) -> usize {
    strategy_token_regex().find_iter(prompt).count()
}

fn persona_preamble(persona: &PersonaConfig) -> String {
    let mut out = String::new();
    push_section(&mut out, SECTION_PERSONA, &persona.system_prompt);
    push_section(&mut out, SECTION_ROLE, &persona.role_description);
    push_section(&mut out, SECTION_SCENARIO, &persona.scenario);
    out.push_str("Stay in character. Reply with the words you speak aloud only.\n");
    out
}

/// Prompt for an ordinary reply to a completed user turn.
pub fn build_reply_prompt(persona: &PersonaConfig) -> String {
    persona_preamble(persona)
}

/// Prompt asking for the in-character closing line.
pub fn build_farewell_prompt(persona: &PersonaConfig) -> String {
    let mut out = persona_preamble(persona);
    out.push('\n');
    out.push_str(FAREWELL_MARKER);
    out.push_str(
        " The conversation is over. Say a short farewell in character and end your message with the tag ",
    );
    out.push_str(EXIT_TAG);
    out.push_str(".\n");
    out
}

/// Prompt for the reply to an interruption, conditioned on the decided
/// strategy (or, in autonomous mode, offering the strategy menu).
pub fn build_strategy_prompt(
    decision: &StrategyDecision,
    persona: &PersonaConfig,
    cutoff_text: &str,
    remaining_text: &str,
    user_utterance: &str,
) -> String {
    let mut out = persona_preamble(persona);
    out.push('\n');
    let include_remaining = match decision.strategy {
        Some(strategy) => {
            out.push_str(&format!(
                "[STRATEGY={}]: {}.\n",
                strategy.token(),
                strategy.instruction()
            ));
            strategy.continues_utterance()
        }
        None => {
            out.push_str(
                "[STRATEGY=AUTO]: the user interrupted you. Decide in character how to handle it, choosing one option:\n",
            );
            for strategy in Strategy::ALL {
                out.push_str(&format!("- {}: {}.\n", strategy.token(), strategy.instruction()));
            }
            out.push_str(
                "Open your reply with your choice as STRATEGY=<OPTION> inside square brackets, then the words you speak.\n",
            );
            true
        }
    };
    out.push('\n');
    out.push_str("You were speaking when the user cut in.\n");
    push_section(&mut out, SECTION_CUTOFF, cutoff_text);
    if include_remaining {
        push_section(&mut out, SECTION_REMAINING, remaining_text);
    }
    push_section(&mut out, SECTION_USER, user_utterance);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutonomousChoice {
    pub strategy: Strategy,
    pub text: String,
    /// False when the LLM omitted the self-report tag and Yield was assumed.
    pub tag_found: bool,
}

/// Extracts the self-reported strategy tag from an autonomous-mode reply.
pub fn parse_autonomous_choice(llm_output: &str) -> AutonomousChoice {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*\[STRATEGY=(YIELD|RESUME|BRIDGE|OVERRIDE)\]\s*").expect("valid regex")
    });
    match re.captures(llm_output) {
        Some(caps) => {
            let strategy = Strategy::from_token(&caps[1]).expect("regex admits only known tokens");
            AutonomousChoice {
                strategy,
                text: llm_output[caps[0].len()..].to_string(),
                tag_found: true,
            }
        }
        None => AutonomousChoice {
            strategy: Strategy::Yield,
            text: llm_output.to_string(),
            tag_found: false,
        },
    }
}
