//! Review state with an append-only event log and periodic snapshots.
//!
//! Every mutation is appended to `events.jsonl` before it is applied, so the
//! log doubles as the audit trail. `snapshot.json` holds the state after a
//! given sequence number; opening replays the log past it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use memekit::jsonl::{self, Appender, JsonlError};
use memekit::matcher::{MatchCandidate, MatchError, Verdict, VerificationQueue};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::survey::{tally, BlindedItem, Survey, SurveyError, Tally, VoteRecord};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
/// Events between automatic snapshots.
pub const SNAPSHOT_EVERY: u64 = 200;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown survey {0}")]
    UnknownSurvey(String),
    #[error("unknown evaluator token")]
    UnknownEvaluator,
    #[error("survey {0} already exists")]
    DuplicateSurvey(String),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error("snapshot {path}: {message}")]
    Snapshot { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    EvaluatorIssued { token: String, label: String },
    SurveyCreated { survey: Survey },
    Vote { survey_id: String, vote: VoteRecord },
    MatchesQueued { candidates: Vec<MatchCandidate> },
    MatchVerdict { candidate_id: String, verdict: Verdict, reviewer_id: String, timestamp: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    seq: u64,
    #[serde(flatten)]
    event: Event,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct State {
    pub evaluators: BTreeMap<String, String>,
    pub surveys: BTreeMap<String, Survey>,
    /// survey id → (evaluator, item) → current vote
    pub votes: BTreeMap<String, BTreeMap<(String, String), VoteRecord>>,
    pub matches: VerificationQueue,
    pub seq: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    evaluators: BTreeMap<String, String>,
    surveys: BTreeMap<String, Survey>,
    votes: BTreeMap<String, Vec<VoteRecord>>,
    matches: VerificationQueue,
}

impl State {
    fn apply(&mut self, event: &Event) -> Result<(), StoreError> {
        match event {
            Event::EvaluatorIssued { token, label } => {
                self.evaluators.insert(token.clone(), label.clone());
            }
            Event::SurveyCreated { survey } => {
                self.surveys.insert(survey.survey_id.clone(), survey.clone());
            }
            Event::Vote { survey_id, vote } => {
                self.votes
                    .entry(survey_id.clone())
                    .or_default()
                    .insert((vote.evaluator_id.clone(), vote.item_id.clone()), vote.clone());
            }
            Event::MatchesQueued { candidates } => {
                self.matches.enqueue(candidates)?;
            }
            Event::MatchVerdict { candidate_id, verdict, .. } => {
                self.matches.verdict(candidate_id, *verdict)?;
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            seq: self.seq,
            evaluators: self.evaluators.clone(),
            surveys: self.surveys.clone(),
            votes: self.votes.iter().map(|(k, v)| (k.clone(), v.values().cloned().collect())).collect(),
            matches: self.matches.clone(),
        }
    }

    fn from_snapshot(s: Snapshot) -> Self {
        let votes = s
            .votes
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|r| ((r.evaluator_id.clone(), r.item_id.clone()), r)).collect()))
            .collect();
        State { evaluators: s.evaluators, surveys: s.surveys, votes, matches: s.matches, seq: s.seq }
    }
}

/// Answer to "what should this evaluator see next".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item { item: BlindedItem, answered: usize, total: usize },
    Done { answered: usize, total: usize },
}

pub struct Store {
    dir: Option<PathBuf>,
    state: RwLock<State>,
    log: Mutex<Option<Appender>>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Store {
    /// State kept in memory only.
    pub fn in_memory() -> Self {
        Self { dir: None, state: RwLock::new(State::default()), log: Mutex::new(None) }
    }

    /// Opens or creates a store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(|e| StoreError::Snapshot { path: dir.to_path_buf(), message: e.to_string() })?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state = if snap_path.exists() {
            let text = fs::read_to_string(&snap_path)
                .map_err(|e| StoreError::Snapshot { path: snap_path.clone(), message: e.to_string() })?;
            let snap: Snapshot = serde_json::from_str(&text)
                .map_err(|e| StoreError::Snapshot { path: snap_path.clone(), message: e.to_string() })?;
            State::from_snapshot(snap)
        } else {
            State::default()
        };
        let events = dir.join(EVENTS_FILE);
        if events.exists() {
            for entry in jsonl::read::<Entry>(&events)? {
                if entry.seq > state.seq {
                    state.apply(&entry.event)?;
                    state.seq = entry.seq;
                }
            }
        }
        log::info!("review store at {} opened at event {}", dir.display(), state.seq);
        let log = Appender::open(&events)?;
        Ok(Self { dir: Some(dir.to_path_buf()), state: RwLock::new(state), log: Mutex::new(Some(log)) })
    }

    /// Validates `event` against the current state, logs it and applies it,
    /// all under the write lock.
    fn commit(&self, event: Event) -> Result<(), StoreError> {
        let mut state = self.state.write().unwrap();
        let mut trial = None;
        // dry run on the parts an event can fail on
        if let Event::MatchVerdict { candidate_id, verdict, .. } = &event {
            let mut q = state.matches.clone();
            q.verdict(candidate_id, *verdict)?;
            trial = Some(q);
        }
        if let Event::MatchesQueued { candidates } = &event {
            let mut q = state.matches.clone();
            q.enqueue(candidates)?;
            trial = Some(q);
        }
        let seq = state.seq + 1;
        if let Some(log) = self.log.lock().unwrap().as_mut() {
            log.append(&Entry { seq, event: event.clone() })?;
        }
        match trial {
            Some(q) => state.matches = q,
            None => state.apply(&event)?,
        }
        state.seq = seq;
        if seq % SNAPSHOT_EVERY == 0 {
            self.write_snapshot(&state)?;
        }
        Ok(())
    }

    fn write_snapshot(&self, state: &State) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(SNAPSHOT_FILE);
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let err = |e: std::io::Error| StoreError::Snapshot { path: path.clone(), message: e.to_string() };
        let text = serde_json::to_string(&state.snapshot()).expect("serializable state");
        fs::write(&tmp, text).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)
    }

    /// Writes a snapshot of the current state now.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let state = self.state.read().unwrap();
        self.write_snapshot(&state)
    }

    /// Issues a fresh opaque evaluator token.
    pub fn issue_evaluator(&self, label: &str) -> Result<String, StoreError> {
        let mut bytes = [0u8; 16];
        rand::rng().fill_bytes(&mut bytes);
        let token = format!("ev-{}", hex::encode(bytes));
        self.commit(Event::EvaluatorIssued { token: token.clone(), label: label.to_string() })?;
        Ok(token)
    }

    pub fn is_evaluator(&self, token: &str) -> bool {
        self.state.read().unwrap().evaluators.contains_key(token)
    }

    pub fn add_survey(&self, survey: Survey) -> Result<String, StoreError> {
        let id = survey.survey_id.clone();
        if self.state.read().unwrap().surveys.contains_key(&id) {
            return Err(StoreError::DuplicateSurvey(id));
        }
        self.commit(Event::SurveyCreated { survey })?;
        Ok(id)
    }

    pub fn survey(&self, survey_id: &str) -> Result<Survey, StoreError> {
        self.state.read().unwrap().surveys.get(survey_id).cloned().ok_or_else(|| StoreError::UnknownSurvey(survey_id.into()))
    }

    pub fn survey_ids(&self) -> Vec<String> {
        self.state.read().unwrap().surveys.keys().cloned().collect()
    }

    pub fn next_item(&self, survey_id: &str, evaluator: &str) -> Result<NextItem, StoreError> {
        let state = self.state.read().unwrap();
        let survey = state.surveys.get(survey_id).ok_or_else(|| StoreError::UnknownSurvey(survey_id.into()))?;
        if !state.evaluators.contains_key(evaluator) {
            return Err(StoreError::UnknownEvaluator);
        }
        let answered: BTreeSet<&str> = state
            .votes
            .get(survey_id)
            .map(|v| v.keys().filter(|(e, _)| e == evaluator).map(|(_, i)| i.as_str()).collect())
            .unwrap_or_default();
        let total = survey.items.len();
        Ok(match survey.items.iter().find(|i| !answered.contains(i.item_id.as_str())) {
            Some(item) => NextItem::Item { item: item.blinded(), answered: answered.len(), total },
            None => NextItem::Done { answered: answered.len(), total },
        })
    }

    /// Stores (or replaces) an evaluator's vote on an item.
    pub fn record_vote(&self, evaluator: &str, item_id: &str, selected: Vec<String>) -> Result<VoteRecord, StoreError> {
        if !self.is_evaluator(evaluator) {
            return Err(StoreError::UnknownEvaluator);
        }
        let survey_id = {
            let state = self.state.read().unwrap();
            let survey = state
                .surveys
                .values()
                .find(|s| s.item(item_id).is_some())
                .ok_or_else(|| SurveyError::UnknownItem(item_id.to_string()))?;
            survey.check_selection(item_id, &selected)?;
            survey.survey_id.clone()
        };
        let vote = VoteRecord { evaluator_id: evaluator.to_string(), item_id: item_id.to_string(), selected, timestamp: now() };
        self.commit(Event::Vote { survey_id, vote: vote.clone() })?;
        Ok(vote)
    }

    pub fn tally(&self, survey_id: &str) -> Result<Tally, StoreError> {
        let state = self.state.read().unwrap();
        let survey = state.surveys.get(survey_id).ok_or_else(|| StoreError::UnknownSurvey(survey_id.into()))?;
        let votes = state.votes.get(survey_id);
        Ok(tally(survey, votes.into_iter().flat_map(|v| v.values())))
    }

    /// Every vote ever cast, including replaced ones, from the event log.
    pub fn audit_votes(&self) -> Result<Vec<VoteRecord>, StoreError> {
        let Some(dir) = &self.dir else { return Ok(Vec::new()) };
        let path = dir.join(EVENTS_FILE);
        Ok(jsonl::read::<Entry>(&path)?
            .into_iter()
            .filter_map(|e| match e.event {
                Event::Vote { vote, .. } => Some(vote),
                _ => None,
            })
            .collect())
    }

    pub fn queue_matches(&self, candidates: Vec<MatchCandidate>) -> Result<usize, StoreError> {
        let fresh: Vec<MatchCandidate> = {
            let state = self.state.read().unwrap();
            candidates.into_iter().filter(|c| state.matches.get(&c.candidate_id).is_none()).collect()
        };
        let n = fresh.len();
        if n > 0 {
            self.commit(Event::MatchesQueued { candidates: fresh })?;
        }
        Ok(n)
    }

    pub fn pending_matches(&self) -> Vec<MatchCandidate> {
        self.state.read().unwrap().matches.pending().cloned().collect()
    }

    pub fn match_verdict(&self, candidate_id: &str, verdict: Verdict, reviewer_id: &str) -> Result<MatchCandidate, StoreError> {
        self.commit(Event::MatchVerdict {
            candidate_id: candidate_id.to_string(),
            verdict,
            reviewer_id: reviewer_id.to_string(),
            timestamp: now(),
        })?;
        Ok(self.state.read().unwrap().matches.get(candidate_id).cloned().expect("verdict on a known candidate"))
    }

    pub fn export_matches(&self, only_verified: bool) -> Vec<MatchCandidate> {
        self.state.read().unwrap().matches.export(only_verified)
    }
}
