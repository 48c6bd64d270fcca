//! Yes-no screening of candidates against their initial image.
//!
//! A session plans `repetitions` trials per candidate in seeded random
//! order, collects identical/different judgments, and declares a candidate
//! below the just-noticeable difference when at least 75% of its pooled
//! responses are "identical".

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{Candidate, CandidateSet};
use crate::error::{Error, Result};

/// Inclusive share of "identical" answers that puts a candidate below the JND.
pub const JND_FRACTION: f64 = 0.75;
pub const DISPLAY_MS: u64 = 1000;
pub const BLANK_MS: u64 = 500;
pub const DEFAULT_REPETITIONS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Identical,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub candidate: usize,
    pub repetition: usize,
    /// Whether the perturbed image is shown before the initial one.
    pub perturbed_first: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub trial: usize,
    pub observer: String,
    pub answer: Answer,
    pub response_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    Open,
    Complete,
    /// Closed by the operator before every trial was answered.
    ForceClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JndVerdict {
    pub candidate: usize,
    pub responses: usize,
    pub identical_fraction: f64,
    pub below_jnd: bool,
}

/// Everything needed to rebuild a session's plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: String,
    /// Name of the candidate set the session screens.
    pub candidate_set: String,
    pub candidates: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySession {
    pub header: SessionHeader,
    pub plan: Vec<Trial>,
    pub responses: Vec<TrialResponse>,
    pub state: SessionState,
}

impl StudySession {
    /// Plans every candidate `repetitions` times in a seeded shuffle, with a
    /// seeded presentation order per trial.
    pub fn create(header: SessionHeader) -> Result<Self> {
        if header.candidates.is_empty() {
            return Err(Error::invalid("cannot screen an empty candidate set"));
        }
        if header.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
        let mut pairs: Vec<(usize, usize)> = header
            .candidates
            .iter()
            .flat_map(|&c| (0..header.repetitions).map(move |r| (c, r)))
            .collect();
        pairs.shuffle(&mut rng);
        let plan = pairs
            .into_iter()
            .enumerate()
            .map(|(id, (candidate, repetition))| Trial {
                id,
                candidate,
                repetition,
                perturbed_first: rng.gen_bool(0.5),
            })
            .collect();
        Ok(Self {
            header,
            plan,
            responses: Vec::new(),
            state: SessionState::Open,
        })
    }

    pub fn for_set(id: String, name: String, set: &CandidateSet, repetitions: usize, seed: u64) -> Result<Self> {
        Self::create(SessionHeader {
            id,
            candidate_set: name,
            candidates: set.candidates.iter().map(|c| c.index).collect(),
            repetitions,
            seed,
        })
    }

    pub fn id(&self) -> &str {
        &self.header.id
    }

    pub fn trial(&self, id: usize) -> Option<&Trial> {
        self.plan.get(id)
    }

    fn answered(&self) -> HashSet<usize> {
        self.responses.iter().map(|r| r.trial).collect()
    }

    /// First planned trial nobody has answered yet, skipping trials this
    /// observer already judged. `None` once the plan is covered.
    pub fn next_trial(&self, observer: &str) -> Option<&Trial> {
        if self.state != SessionState::Open {
            return None;
        }
        let answered = self.answered();
        let mine: HashSet<usize> = self
            .responses
            .iter()
            .filter(|r| r.observer == observer)
            .map(|r| r.trial)
            .collect();
        self.plan
            .iter()
            .find(|t| !answered.contains(&t.id) && !mine.contains(&t.id))
    }

    pub fn record_response(&mut self, response: TrialResponse) -> Result<()> {
        if self.state != SessionState::Open {
            return Err(Error::invalid(format!("session {} is closed", self.header.id)));
        }
        if response.trial >= self.plan.len() {
            return Err(Error::invalid(format!("unknown trial {}", response.trial)));
        }
        if self
            .responses
            .iter()
            .any(|r| r.trial == response.trial && r.observer == response.observer)
        {
            return Err(Error::invalid(format!(
                "observer {:?} already answered trial {}",
                response.observer, response.trial
            )));
        }
        self.responses.push(response);
        if self.answered().len() == self.plan.len() {
            self.state = SessionState::Complete;
        }
        Ok(())
    }

    pub fn force_close(&mut self) {
        if self.state == SessionState::Open {
            self.state = SessionState::ForceClosed;
        }
    }

    /// Pooled verdict per candidate, ordered by candidate index. An open
    /// session is an error; a force-closed one reports only candidates whose
    /// every planned trial was answered.
    pub fn verdicts(&self) -> Result<Vec<JndVerdict>> {
        if self.state == SessionState::Open {
            return Err(Error::invalid(format!(
                "session {} still has unanswered trials",
                self.header.id
            )));
        }
        let answered = self.answered();
        let mut counts: BTreeMap<usize, (usize, usize, bool)> = BTreeMap::new();
        for t in &self.plan {
            let e = counts.entry(t.candidate).or_insert((0, 0, true));
            e.2 &= answered.contains(&t.id);
        }
        for r in &self.responses {
            let e = counts.get_mut(&self.plan[r.trial].candidate).expect("planned candidate");
            e.0 += 1;
            if r.answer == Answer::Identical {
                e.1 += 1;
            }
        }
        Ok(counts
            .into_iter()
            .filter(|(_, (n, _, full))| *full && *n > 0)
            .map(|(candidate, (n, identical, _))| verdict(candidate, n, identical))
            .collect())
    }
}

pub fn verdict(candidate: usize, responses: usize, identical: usize) -> JndVerdict {
    let identical_fraction = identical as f64 / responses as f64;
    JndVerdict {
        candidate,
        responses,
        identical_fraction,
        // Exact rational comparison, so 3/4 lands on the threshold.
        below_jnd: 4 * identical >= 3 * responses,
    }
}

/// Among candidates below the JND, the one with the largest quality change;
/// ties go to the smaller distance, then the smaller λ.
pub fn select_counterexample<'a>(verdicts: &[JndVerdict], set: &'a CandidateSet) -> Option<&'a Candidate> {
    verdicts
        .iter()
        .filter(|v| v.below_jnd)
        .filter_map(|v| set.get(v.candidate))
        .min_by(|a, b| {
            b.abs_delta()
                .total_cmp(&a.abs_delta())
                .then(a.fidelity.total_cmp(&b.fidelity))
                .then(a.lambda.total_cmp(&b.lambda))
        })
}

/// Deterministic stand-in for a human observer: "different" iff the
/// candidate's distance exceeds `tau`, with each answer flipped with
/// probability `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    pub tau: f64,
    pub eta: f64,
}

/// One response per planned trial. `distance` maps a candidate index to
/// its distance under the designated measure.
pub fn simulate_observer(
    session: &StudySession,
    distance: impl Fn(usize) -> f64,
    visibility: Visibility,
    observer: &str,
    seed: u64,
) -> Vec<TrialResponse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    session
        .plan
        .iter()
        .map(|t| {
            let visible = distance(t.candidate) > visibility.tau;
            let flip = rng.gen_bool(visibility.eta.clamp(0.0, 1.0));
            let answer = if visible != flip { Answer::Different } else { Answer::Identical };
            TrialResponse {
                trial: t.id,
                observer: observer.to_string(),
                answer,
                response_ms: 0,
                timestamp: 0,
            }
        })
        .collect()
}

// ---- persistence ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum LogEvent {
    Created { header: SessionHeader },
    Response { session: String, response: TrialResponse },
    Closed { session: String },
}

/// Sessions kept in memory and mirrored to an append-only JSON-lines log.
/// Each session has its own lock, so responses to one session are
/// serialized while other sessions proceed independently.
pub struct SessionStore {
    log_path: Option<PathBuf>,
    log: Mutex<Option<File>>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<StudySession>>>>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self {
            log_path: None,
            log: Mutex::new(None),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    /// Opens (or creates) the log and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut sessions = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent = serde_json::from_str(&line).map_err(|e| Error::Format {
                    what: "session log".into(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
                apply(&mut sessions, event)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            log_path: Some(path),
            log: Mutex::new(Some(file)),
            sessions: Mutex::new(
                sessions
                    .into_iter()
                    .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
                    .collect(),
            ),
        })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn append(&self, event: &LogEvent) -> Result<()> {
        let mut guard = self.log.lock().expect("log lock");
        if let Some(f) = guard.as_mut() {
            let line = serde_json::to_string(event).expect("log events serialize");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }

    /// Creates a session with the next sequential id.
    pub fn create(&self, candidate_set: String, candidates: Vec<usize>, repetitions: usize, seed: u64) -> Result<String> {
        let mut sessions = self.sessions.lock().expect("store lock");
        let id = format!("s{:04}", sessions.len() + 1);
        let header = SessionHeader {
            id: id.clone(),
            candidate_set,
            candidates,
            repetitions,
            seed,
        };
        let session = StudySession::create(header.clone())?;
        self.append(&LogEvent::Created { header })?;
        sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<StudySession>>> {
        self.sessions.lock().expect("store lock").get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.lock().expect("store lock").keys().cloned().collect()
    }

    /// Validates, logs, then applies the response under the session lock.
    pub fn record(&self, id: &str, response: TrialResponse) -> Result<()> {
        let session = self.get(id).ok_or_else(|| Error::invalid(format!("unknown session {id}")))?;
        let mut s = session.lock().expect("session lock");
        let mut probe = s.clone();
        probe.record_response(response.clone())?;
        self.append(&LogEvent::Response {
            session: id.to_string(),
            response,
        })?;
        *s = probe;
        Ok(())
    }

    pub fn force_close(&self, id: &str) -> Result<()> {
        let session = self.get(id).ok_or_else(|| Error::invalid(format!("unknown session {id}")))?;
        let mut s = session.lock().expect("session lock");
        if s.state == SessionState::Open {
            self.append(&LogEvent::Closed { session: id.to_string() })?;
            s.force_close();
        }
        Ok(())
    }
}

fn apply(sessions: &mut BTreeMap<String, StudySession>, event: LogEvent) -> Result<()> {
    let missing = |id: &str| Error::Format {
        what: "session log".into(),
        reason: format!("event for unknown session {id}"),
    };
    match event {
        LogEvent::Created { header } => {
            let id = header.id.clone();
            sessions.insert(id, StudySession::create(header)?);
        }
        LogEvent::Response { session, response } => {
            sessions
                .get_mut(&session)
                .ok_or_else(|| missing(&session))?
                .record_response(response)?;
        }
        LogEvent::Closed { session } => {
            sessions.get_mut(&session).ok_or_else(|| missing(&session))?.force_close();
        }
    }
    Ok(())
}
