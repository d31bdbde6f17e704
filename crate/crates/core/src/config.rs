//! The four researcher-facing configuration files and their validation.
//!
//! Every experimental knob lives in one of these documents:
//! `persona.json`, `interruption_config.json`, `session_config.json` and
//! `model_config.json`. Values are immutable once loaded and can be shared
//! freely across sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::turn_policy::{InterruptIntent, Strategy};

pub const PERSONA_FILE: &str = "persona.json";
pub const INTERRUPTION_FILE: &str = "interruption_config.json";
pub const SESSION_FILE: &str = "session_config.json";
pub const MODEL_FILE: &str = "model_config.json";
/// Optional directory of per-persona matrices, one `<persona_id>.json` each.
pub const PERSONA_MATRIX_DIR: &str = "interruption";

/// Accepted distance of a probabilistic row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Interpersonal circumplex quadrant used to group personas in aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Q1, Quadrant::Q2, Quadrant::Q3, Quadrant::Q4];

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::Q1 => "Q1",
            Quadrant::Q2 => "Q2",
            Quadrant::Q3 => "Q3",
            Quadrant::Q4 => "Q4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaConfig {
    pub persona_id: String,
    pub display_name: String,
    pub role_description: String,
    pub scenario: String,
    pub opening_prompt: String,
    pub system_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<Quadrant>,
    pub voice_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaCatalog {
    pub personas: Vec<PersonaConfig>,
}

impl PersonaCatalog {
    pub fn get(&self, persona_id: &str) -> Option<&PersonaConfig> {
        self.personas.iter().find(|p| p.persona_id == persona_id)
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let catalog: PersonaCatalog = parse_json(PERSONA_FILE, text)?;
        catalog.validate().map_err(|e| e.in_file(PERSONA_FILE))?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut violations = Vec::new();
        let mut seen = BTreeSet::new();
        for (index, p) in self.personas.iter().enumerate() {
            let label = if p.persona_id.trim().is_empty() {
                format!("#{index}")
            } else {
                p.persona_id.clone()
            };
            let required = [
                ("persona_id", &p.persona_id),
                ("display_name", &p.display_name),
                ("opening_prompt", &p.opening_prompt),
                ("system_prompt", &p.system_prompt),
                ("voice_id", &p.voice_id),
            ];
            for (field, value) in required {
                if value.trim().is_empty() {
                    violations.push(Violation::EmptyField {
                        persona: label.clone(),
                        field,
                    });
                }
            }
            if !p.persona_id.trim().is_empty() && !seen.insert(p.persona_id.as_str()) {
                violations.push(Violation::DuplicatePersonaId(p.persona_id.clone()));
            }
        }
        ValidationError::from_violations(violations)
    }
}

/// Experimental condition. A = always yield, B = probabilistic matrix,
/// C = the LLM picks its own strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
    C,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::A, Style::B, Style::C];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::A => "A",
            Style::B => "B",
            Style::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Style> {
        Self::ALL
            .into_iter()
            .find(|style| style.as_str().eq_ignore_ascii_case(s.trim()))
    }

    pub fn mode(self) -> MatrixMode {
        match self {
            Style::A => MatrixMode::AlwaysYield,
            Style::B => MatrixMode::Probabilistic,
            Style::C => MatrixMode::Autonomous,
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixMode {
    AlwaysYield,
    Probabilistic,
    Autonomous,
}

impl MatrixMode {
    pub fn style(self) -> Style {
        match self {
            MatrixMode::AlwaysYield => Style::A,
            MatrixMode::Probabilistic => Style::B,
            MatrixMode::Autonomous => Style::C,
        }
    }
}

/// Categorical weights over the four strategies. Omitted keys in JSON read
/// as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "WeightsRepr", into = "WeightsRepr")]
pub struct StrategyWeights([f64; 4]);

impl StrategyWeights {
    /// Weights in `[yield, resume, bridge, override]` order.
    pub fn new(weights: [f64; 4]) -> Self {
        Self(weights)
    }

    pub fn only(strategy: Strategy) -> Self {
        let mut w = [0.0; 4];
        w[strategy.index()] = 1.0;
        Self(w)
    }

    pub fn get(&self, strategy: Strategy) -> f64 {
        self.0[strategy.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRepr {
    #[serde(rename = "yield", default)]
    yield_w: f64,
    #[serde(rename = "resume", default)]
    resume_w: f64,
    #[serde(rename = "bridge", default)]
    bridge_w: f64,
    #[serde(rename = "override", default)]
    override_w: f64,
}

impl From<WeightsRepr> for StrategyWeights {
    fn from(r: WeightsRepr) -> Self {
        Self([r.yield_w, r.resume_w, r.bridge_w, r.override_w])
    }
}

impl From<StrategyWeights> for WeightsRepr {
    fn from(w: StrategyWeights) -> Self {
        let [yield_w, resume_w, bridge_w, override_w] = w.0;
        Self {
            yield_w,
            resume_w,
            bridge_w,
            override_w,
        }
    }
}

/// Per-intent strategy distributions plus the condition they apply under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterruptionMatrix {
    pub mode: MatrixMode,
    #[serde(default)]
    pub rows: BTreeMap<InterruptIntent, StrategyWeights>,
}

impl InterruptionMatrix {
    pub fn always_yield() -> Self {
        Self {
            mode: MatrixMode::AlwaysYield,
            rows: BTreeMap::new(),
        }
    }

    pub fn autonomous() -> Self {
        Self {
            mode: MatrixMode::Autonomous,
            rows: BTreeMap::new(),
        }
    }

    pub fn style(&self) -> Style {
        self.mode.style()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let matrix: InterruptionMatrix = parse_json(INTERRUPTION_FILE, text)?;
        validate_matrix(&matrix).map_err(|e| e.in_file(INTERRUPTION_FILE))?;
        Ok(matrix)
    }
}

/// Checks the matrix invariants, reporting every violating row at once.
pub fn validate_matrix(m: &InterruptionMatrix) -> Result<(), ValidationError> {
    if m.mode != MatrixMode::Probabilistic {
        return Ok(());
    }
    let mut violations = Vec::new();
    if m.rows.contains_key(&InterruptIntent::Terminate) {
        violations.push(Violation::TerminateRow);
    }
    for intent in InterruptIntent::MATRIX_ROWS {
        let Some(row) = m.rows.get(&intent) else {
            violations.push(Violation::MissingRow(intent));
            continue;
        };
        for strategy in Strategy::ALL {
            // Written so that NaN also lands here.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(row.get(strategy) >= 0.0) {
                violations.push(Violation::NegativeWeight { intent, strategy });
            }
        }
        let sum = row.sum();
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
            violations.push(Violation::RowSum { intent, sum });
        }
    }
    ValidationError::from_violations(violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Likert,
    ForcedChoice,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyQuestion {
    pub question_id: String,
    pub kind: QuestionKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
}

impl SurveyQuestion {
    /// A forced choice whose options are all style labels asks which
    /// condition the participant preferred.
    pub fn is_style_preference(&self) -> bool {
        self.kind == QuestionKind::ForcedChoice
            && !self.choices.is_empty()
            && self.choices.iter().all(|c| Style::parse(c).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub max_turns: u32,
    pub consent_text: String,
    pub survey: Vec<SurveyQuestion>,
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: SessionConfig = parse_json(SESSION_FILE, text)?;
        cfg.validate().map_err(|e| e.in_file(SESSION_FILE))?;
        Ok(cfg)
    }

    pub fn question(&self, question_id: &str) -> Option<&SurveyQuestion> {
        self.survey.iter().find(|q| q.question_id == question_id)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut violations = Vec::new();
        if self.max_turns == 0 {
            violations.push(Violation::ZeroMaxTurns);
        }
        if self.survey.is_empty() {
            violations.push(Violation::EmptySurvey);
        }
        let mut seen = BTreeSet::new();
        for q in &self.survey {
            if q.question_id.trim().is_empty() {
                violations.push(Violation::EmptyQuestionId);
            } else if !seen.insert(q.question_id.as_str()) {
                violations.push(Violation::DuplicateQuestionId(q.question_id.clone()));
            }
            match q.kind {
                QuestionKind::ForcedChoice if q.choices.len() < 2 => {
                    violations.push(Violation::TooFewChoices(q.question_id.clone()));
                }
                QuestionKind::Likert | QuestionKind::FreeText if !q.choices.is_empty() => {
                    violations.push(Violation::UnexpectedChoices(q.question_id.clone()));
                }
                QuestionKind::ForcedChoice
                    if !q.is_style_preference()
                        && q.choices.iter().any(|c| Style::parse(c).is_some()) =>
                {
                    violations.push(Violation::MixedStyleChoices(q.question_id.clone()));
                }
                _ => {}
            }
        }
        ValidationError::from_violations(violations)
    }
}

/// Closed registry of provider adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProviderKind {
    /// Deterministic in-process implementation.
    Mock,
    /// HTTP endpoints shaped like the OpenAI REST API.
    OpenAiCompatible,
}

impl ProviderKind {
    pub fn parse(name: &str) -> Option<ProviderKind> {
        match name {
            "mock" => Some(ProviderKind::Mock),
            "openai_compatible" => Some(ProviderKind::OpenAiCompatible),
            _ => None,
        }
    }

    pub fn is_mock(self) -> bool {
        self == ProviderKind::Mock
    }
}

pub const DEFAULT_TIMEOUT_MS: u64 = 15_000;

/// Where one provider role is sent. Holds the *name* of the environment
/// variable with the key, never the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderRoute {
    pub provider: String,
    pub model_or_voice_id: String,
    pub endpoint_url: String,
    pub api_key_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

impl ProviderRoute {
    pub fn mock() -> Self {
        Self {
            provider: "mock".into(),
            model_or_voice_id: String::new(),
            endpoint_url: String::new(),
            api_key_env: String::new(),
            timeout_ms: None,
        }
    }

    pub fn kind(&self) -> Option<ProviderKind> {
        ProviderKind::parse(&self.provider)
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProviderRole {
    Asr,
    Llm,
    Tts,
    Intent,
}

impl ProviderRole {
    pub const ALL: [ProviderRole; 4] = [
        ProviderRole::Asr,
        ProviderRole::Llm,
        ProviderRole::Tts,
        ProviderRole::Intent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProviderRole::Asr => "asr",
            ProviderRole::Llm => "llm",
            ProviderRole::Tts => "tts",
            ProviderRole::Intent => "intent",
        }
    }
}

impl fmt::Display for ProviderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub asr: ProviderRoute,
    pub llm: ProviderRoute,
    pub tts: ProviderRoute,
    pub intent: ProviderRoute,
}

impl ModelConfig {
    pub fn all_mock() -> Self {
        Self {
            asr: ProviderRoute::mock(),
            llm: ProviderRoute::mock(),
            tts: ProviderRoute::mock(),
            intent: ProviderRoute::mock(),
        }
    }

    pub fn route(&self, role: ProviderRole) -> &ProviderRoute {
        match role {
            ProviderRole::Asr => &self.asr,
            ProviderRole::Llm => &self.llm,
            ProviderRole::Tts => &self.tts,
            ProviderRole::Intent => &self.intent,
        }
    }

    /// Parses and resolves routes, consulting `env` for the presence of
    /// keys needed by real providers. Key values are not retained.
    pub fn from_json_with_env(
        text: &str,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let cfg: ModelConfig = parse_json(MODEL_FILE, text)?;
        cfg.resolve(env)?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Self::from_json_with_env(text, |name| std::env::var(name).ok())
    }

    fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for role in ProviderRole::ALL {
            let route = self.route(role);
            let kind = route.kind().ok_or_else(|| ConfigError::UnknownProvider {
                role,
                provider: route.provider.clone(),
            })?;
            if kind.is_mock() {
                continue;
            }
            if route.api_key_env.trim().is_empty() {
                return Err(ConfigError::Invalid {
                    file: MODEL_FILE.into(),
                    error: ValidationError {
                        violations: vec![Violation::MissingKeyEnv(role)],
                    },
                });
            }
            if env(&route.api_key_env).is_none_or(|v| v.is_empty()) {
                return Err(ConfigError::MissingKey(route.api_key_env.clone()));
            }
        }
        Ok(())
    }
}

/// One reason a configuration was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicatePersonaId(String),
    EmptyField { persona: String, field: &'static str },
    RowSum { intent: InterruptIntent, sum: f64 },
    NegativeWeight { intent: InterruptIntent, strategy: Strategy },
    MissingRow(InterruptIntent),
    TerminateRow,
    ZeroMaxTurns,
    EmptySurvey,
    EmptyQuestionId,
    DuplicateQuestionId(String),
    TooFewChoices(String),
    UnexpectedChoices(String),
    /// Some but not all choices are style labels.
    MixedStyleChoices(String),
    MissingKeyEnv(ProviderRole),
    UnknownPersona(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicatePersonaId(id) => write!(f, "duplicate persona_id {id:?}"),
            Violation::EmptyField { persona, field } => {
                write!(f, "persona {persona}: field {field} is empty")
            }
            Violation::RowSum { intent, sum } => {
                write!(f, "row {intent}: weights sum to {sum}, expected 1")
            }
            Violation::NegativeWeight { intent, strategy } => {
                write!(f, "row {intent}: weight for {strategy} is negative")
            }
            Violation::MissingRow(intent) => write!(f, "row {intent} is missing"),
            Violation::TerminateRow => f.write_str("terminate cannot have a matrix row"),
            Violation::ZeroMaxTurns => f.write_str("max_turns must be at least 1"),
            Violation::EmptySurvey => f.write_str("survey needs at least one question"),
            Violation::EmptyQuestionId => f.write_str("question_id is empty"),
            Violation::DuplicateQuestionId(id) => write!(f, "duplicate question_id {id:?}"),
            Violation::TooFewChoices(id) => {
                write!(f, "question {id}: forced_choice needs at least two choices")
            }
            Violation::UnexpectedChoices(id) => {
                write!(f, "question {id}: only forced_choice questions take choices")
            }
            Violation::MixedStyleChoices(id) => write!(
                f,
                "question {id}: choices must be all style labels or none"
            ),
            Violation::MissingKeyEnv(role) => write!(f, "{role}: api_key_env is empty"),
            Violation::UnknownPersona(id) => write!(f, "no persona with id {id:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}", display_violations(.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn display_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl ValidationError {
    fn from_violations(violations: Vec<Violation>) -> Result<(), ValidationError> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { violations })
        }
    }

    fn in_file(self, file: &str) -> ConfigError {
        ConfigError::Invalid {
            file: file.to_string(),
            error: self,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed JSON at line {line}, column {column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{file}: {error}")]
    Invalid { file: String, error: ValidationError },
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("unknown provider {provider:?} for {role}")]
    UnknownProvider { role: ProviderRole, provider: String },
    #[error("persona {0:?} is not in the catalog")]
    UnknownPersona(String),
    #[error("no probabilistic matrix available for persona {0:?}")]
    NoProbabilisticMatrix(String),
}

impl ConfigError {
    /// Violations carried by a validation failure, if that is what this is.
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid { error, .. } => &error.violations,
            _ => &[],
        }
    }
}

fn parse_json<T: DeserializeOwned>(file: &str, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        file: file.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

fn relabel(err: ConfigError, path: &Path) -> ConfigError {
    match err {
        ConfigError::Parse {
            line,
            column,
            message,
            ..
        } => ConfigError::Parse {
            file: label(path),
            line,
            column,
            message,
        },
        ConfigError::Invalid { error, .. } => ConfigError::Invalid {
            file: label(path),
            error,
        },
        other => other,
    }
}

pub fn load_persona_catalog(path: impl AsRef<Path>) -> Result<PersonaCatalog, ConfigError> {
    let path = path.as_ref();
    PersonaCatalog::from_json(&read(path)?).map_err(|e| relabel(e, path))
}

pub fn load_interruption_matrix(path: impl AsRef<Path>) -> Result<InterruptionMatrix, ConfigError> {
    let path = path.as_ref();
    InterruptionMatrix::from_json(&read(path)?).map_err(|e| relabel(e, path))
}

pub fn load_session_config(path: impl AsRef<Path>) -> Result<SessionConfig, ConfigError> {
    let path = path.as_ref();
    SessionConfig::from_json(&read(path)?).map_err(|e| relabel(e, path))
}

pub fn load_model_config(path: impl AsRef<Path>) -> Result<ModelConfig, ConfigError> {
    let path = path.as_ref();
    ModelConfig::from_json(&read(path)?).map_err(|e| relabel(e, path))
}

/// Everything a study needs, as loaded from one configuration directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub personas: PersonaCatalog,
    /// Matrix used for style B when a persona has no matrix of its own.
    pub matrix: InterruptionMatrix,
    pub persona_matrices: BTreeMap<String, InterruptionMatrix>,
    pub session: SessionConfig,
    pub model: ModelConfig,
}

impl StudyConfig {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::load_dir_with_env(dir, |name| std::env::var(name).ok())
    }

    pub fn load_dir_with_env(
        dir: impl AsRef<Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let dir = dir.as_ref();
        let personas = load_persona_catalog(dir.join(PERSONA_FILE))?;
        let matrix = load_interruption_matrix(dir.join(INTERRUPTION_FILE))?;
        let session = load_session_config(dir.join(SESSION_FILE))?;
        let model_path = dir.join(MODEL_FILE);
        let model = ModelConfig::from_json_with_env(&read(&model_path)?, env)
            .map_err(|e| relabel(e, &model_path))?;

        let mut persona_matrices = BTreeMap::new();
        let matrix_dir = dir.join(PERSONA_MATRIX_DIR);
        if matrix_dir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&matrix_dir)
                .map_err(|source| ConfigError::Io {
                    path: matrix_dir.clone(),
                    source,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            entries.sort();
            for path in entries {
                let persona_id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if personas.get(&persona_id).is_none() {
                    return Err(ConfigError::Invalid {
                        file: label(&path),
                        error: ValidationError {
                            violations: vec![Violation::UnknownPersona(persona_id)],
                        },
                    });
                }
                persona_matrices.insert(persona_id, load_interruption_matrix(&path)?);
            }
        }

        Ok(Self {
            personas,
            matrix,
            persona_matrices,
            session,
            model,
        })
    }

    /// Matrix a session of `style` with `persona_id` runs under. Styles A
    /// and C ignore matrix files; style B prefers the persona's own matrix.
    pub fn matrix_for(&self, persona_id: &str, style: Style) -> Result<InterruptionMatrix, ConfigError> {
        if self.personas.get(persona_id).is_none() {
            return Err(ConfigError::UnknownPersona(persona_id.to_string()));
        }
        match style {
            Style::A => Ok(InterruptionMatrix::always_yield()),
            Style::C => Ok(InterruptionMatrix::autonomous()),
            Style::B => {
                let m = self.persona_matrices.get(persona_id).unwrap_or(&self.matrix);
                if m.mode == MatrixMode::Probabilistic {
                    Ok(m.clone())
                } else {
                    Err(ConfigError::NoProbabilisticMatrix(persona_id.to_string()))
                }
            }
        }
    }
}

/// Serializes any config document as pretty JSON.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("config types always serialize")
}
