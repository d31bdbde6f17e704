//! State shared by all connections: the active study configuration, the
//! session registry and export files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use duplexkit_core::export::{export_csv, export_json, CsvTable, ExportError};
use duplexkit_core::providers::ProviderSet;
use duplexkit_core::session::EndReason;
use duplexkit_core::{ConfigError, SessionRecord, SessionState, Style, StudyConfig};
use serde::Serialize;
use tokio::sync::watch;

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    /// Size of each `bot_audio_chunk` payload before base64.
    pub chunk_bytes: usize,
    /// Pace of outgoing audio chunks.
    pub chunk_interval: Duration,
    /// Most user audio buffered for one utterance.
    pub max_user_audio_bytes: usize,
    /// Bearer token for the admin endpoints. Admin is disabled without one.
    pub admin_token: Option<String>,
    pub exports_dir: Option<PathBuf>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            chunk_bytes: 3200,
            chunk_interval: Duration::from_millis(100),
            max_user_audio_bytes: 4 * 1024 * 1024,
            admin_token: None,
            exports_dir: None,
        }
    }
}

/// A session created over the admin API, waiting for its participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub persona_id: String,
    pub style: Style,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub persona_id: String,
    pub style: Style,
    pub state: SessionState,
    pub end_reason: Option<EndReason>,
}

#[derive(Debug, Clone)]
struct Entry {
    summary: SessionSummary,
    /// Present once the dialogue is over.
    record: Option<SessionRecord>,
}

pub struct Hub {
    config: RwLock<Arc<StudyConfig>>,
    providers: Option<Arc<ProviderSet>>,
    sessions: Mutex<BTreeMap<String, Entry>>,
    reservations: Mutex<BTreeMap<String, Reservation>>,
    options: GatewayOptions,
    shutdown: watch::Sender<bool>,
}

impl Hub {
    pub fn new(study: StudyConfig, options: GatewayOptions) -> Self {
        Self {
            config: RwLock::new(Arc::new(study)),
            providers: None,
            sessions: Mutex::new(BTreeMap::new()),
            reservations: Mutex::new(BTreeMap::new()),
            options,
            shutdown: watch::channel(false).0,
        }
    }

    /// Uses `providers` for every session instead of routing by model config.
    pub fn with_providers(mut self, providers: ProviderSet) -> Self {
        self.providers = Some(Arc::new(providers));
        self
    }

    pub fn options(&self) -> &GatewayOptions {
        &self.options
    }

    pub fn study(&self) -> Arc<StudyConfig> {
        self.config.read().expect("config lock").clone()
    }

    /// Swaps the configuration used by sessions started from now on.
    pub fn update_study(&self, f: impl FnOnce(&mut StudyConfig) -> Result<(), ConfigError>) -> Result<(), ConfigError> {
        let mut guard = self.config.write().expect("config lock");
        let mut next = StudyConfig::clone(&guard);
        f(&mut next)?;
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn providers_for(&self, study: &StudyConfig) -> Result<Arc<ProviderSet>, ConfigError> {
        match &self.providers {
            Some(p) => Ok(p.clone()),
            None => ProviderSet::from_config(&study.model).map(Arc::new),
        }
    }

    pub fn reserve(&self, session_id: String, reservation: Reservation) {
        self.reservations
            .lock()
            .expect("reservations lock")
            .insert(session_id, reservation);
    }

    pub fn take_reservation(&self, session_id: &str) -> Option<Reservation> {
        self.reservations
            .lock()
            .expect("reservations lock")
            .remove(session_id)
    }

    pub fn is_known(&self, session_id: &str) -> bool {
        self.sessions.lock().expect("sessions lock").contains_key(session_id)
            || self
                .reservations
                .lock()
                .expect("reservations lock")
                .contains_key(session_id)
    }

    /// Records the latest state of a session. Finished records are kept
    /// for export; an ended session also has its files written.
    pub fn sync(&self, record: &SessionRecord) {
        let done = matches!(record.state, SessionState::SurveyPending | SessionState::Ended);
        {
            let mut sessions = self.sessions.lock().expect("sessions lock");
            sessions.insert(
                record.session_id.clone(),
                Entry {
                    summary: SessionSummary {
                        session_id: record.session_id.clone(),
                        persona_id: record.persona_id.clone(),
                        style: record.style,
                        state: record.state,
                        end_reason: record.end_reason,
                    },
                    record: done.then(|| record.clone()),
                },
            );
        }
        if record.state == SessionState::Ended {
            if let Some(dir) = &self.options.exports_dir {
                if let Err(err) = self.write_exports(dir, record) {
                    tracing::error!(session = %record.session_id, error = %err, "writing exports failed");
                }
            }
        }
    }

    pub fn sessions(&self) -> Vec<SessionSummary> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .values()
            .map(|e| e.summary.clone())
            .collect()
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions
            .lock()
            .expect("sessions lock")
            .values()
            .filter(|e| e.summary.state != SessionState::Ended)
            .count()
    }

    /// `None` if unknown, `Some(None)` if still in dialogue.
    pub fn record(&self, session_id: &str) -> Option<Option<SessionRecord>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(session_id)
            .map(|e| e.record.clone())
    }

    /// Finished records in session id order.
    pub fn finished_records(&self) -> Vec<SessionRecord> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .values()
            .filter_map(|e| e.record.clone())
            .collect()
    }

    fn write_exports(&self, dir: &Path, record: &SessionRecord) -> Result<(), ExportFileError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.json", record.session_id)), export_json(record)?)?;
        let records: Vec<SessionRecord> = self
            .finished_records()
            .into_iter()
            .filter(|r| r.state == SessionState::Ended)
            .collect();
        for (name, table) in [
            ("events.csv", CsvTable::Events),
            ("survey.csv", CsvTable::Survey),
            ("aggregate.csv", CsvTable::Aggregate),
        ] {
            std::fs::write(dir.join(name), export_csv(&records, table)?)?;
        }
        Ok(())
    }

    pub fn subscribe_shutdown(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }

    /// Asks every connection to abort its session and close.
    pub fn begin_shutdown(&self) {
        self.shutdown.send_replace(true);
    }
}

#[derive(Debug, thiserror::Error)]
enum ExportFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Export(#[from] ExportError),
}
