//! Shared loop state: the single mutation point between the HTTP handlers
//! and the loop thread.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use protolab_core::dal::{Answer, IterationRecord, Phase};
use protolab_core::data::Dataset;
use protolab_core::proto::Explanation;
use serde::{Deserialize, Serialize};

use crate::journal::{Journal, JournalEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub request_id: String,
    pub instance_id: usize,
    /// Oracle round the request belongs to (round 1 is the initial draw).
    pub round: usize,
    /// Relative URL of the instance image.
    pub image: String,
    pub explanation: Option<Explanation>,
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
    pub status: RequestStatus,
    pub label: Option<usize>,
}

impl LabelRequest {
    pub fn id_for(round: usize, instance_id: usize) -> String {
        format!("{round}-{instance_id}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub phase: Phase,
    pub iteration: usize,
    pub paused: bool,
    pub total: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub pending: usize,
    pub labeled_fraction: f64,
    pub poll_interval_ms: u64,
    /// Set when the loop stopped on an error.
    pub error: Option<String>,
}

/// Result of a label submission, mapped to HTTP status codes by the API.
#[derive(Debug, PartialEq)]
pub enum Submit {
    Accepted,
    /// Same answer as already recorded; nothing changed.
    Unchanged,
    UnknownRequest,
    /// The request was already resolved differently.
    Conflict(RequestStatus),
    InvalidLabel,
    Journal(String),
}

#[derive(Default)]
struct Inner {
    phase: Option<Phase>,
    iteration: usize,
    paused: bool,
    labeled: usize,
    skipped: usize,
    requests: BTreeMap<String, LabelRequest>,
    explanations: BTreeMap<usize, Explanation>,
    records: Vec<IterationRecord>,
    error: Option<String>,
}

pub struct Shared {
    inner: Mutex<Inner>,
    changed: Condvar,
    journal: Journal,
    data: Arc<Dataset>,
    total: usize,
    num_classes: usize,
    poll_interval_ms: u64,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Shared {
    /// `total` is the size of the unlabeled pool the loop draws from.
    pub fn new(
        data: Arc<Dataset>,
        total: usize,
        num_classes: usize,
        journal: Journal,
        poll_interval_ms: u64,
    ) -> Arc<Self> {
        Arc::new(Shared {
            inner: Mutex::new(Inner::default()),
            changed: Condvar::new(),
            journal,
            data,
            total,
            num_classes,
            poll_interval_ms,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn poll_interval_ms(&self) -> u64 {
        self.poll_interval_ms
    }

    pub fn state(&self) -> StateView {
        let g = self.lock();
        let pending = g.requests.values().filter(|r| r.status == RequestStatus::Pending).count();
        let phase = match g.phase {
            Some(p) if g.paused && p != Phase::Done => Phase::Paused,
            Some(p) => p,
            None => Phase::Initializing,
        };
        StateView {
            phase,
            iteration: g.iteration,
            paused: g.paused,
            total: self.total,
            labeled: g.labeled,
            unlabeled: self.total - g.labeled - g.skipped,
            pending,
            labeled_fraction: if self.total == 0 { 0.0 } else { g.labeled as f64 / self.total as f64 },
            poll_interval_ms: self.poll_interval_ms,
            error: g.error.clone(),
        }
    }

    /// Pending requests in issue order.
    pub fn pending(&self) -> Vec<LabelRequest> {
        let g = self.lock();
        let mut v: Vec<LabelRequest> = g
            .requests
            .values()
            .filter(|r| r.status == RequestStatus::Pending)
            .cloned()
            .collect();
        v.sort_by_key(|a| (a.round, a.issued_at, a.instance_id));
        v
    }

    pub fn request(&self, request_id: &str) -> Option<LabelRequest> {
        self.lock().requests.get(request_id).cloned()
    }

    pub fn explanation(&self, instance_id: usize) -> Option<Explanation> {
        self.lock().explanations.get(&instance_id).cloned()
    }

    pub fn records(&self) -> Vec<IterationRecord> {
        self.lock().records.clone()
    }

    /// Applies a human answer. The journal write happens before the state
    /// change so an acknowledged label is never lost.
    pub fn submit(&self, request_id: &str, answer: Answer) -> Submit {
        if let Answer::Label(y) = answer {
            if y >= self.num_classes {
                return Submit::InvalidLabel;
            }
        }
        let mut g = self.lock();
        let Some(req) = g.requests.get(request_id) else {
            return Submit::UnknownRequest;
        };
        let current = match req.status {
            RequestStatus::Pending => None,
            RequestStatus::Labeled => Some(Answer::Label(req.label.expect("labeled requests carry a label"))),
            RequestStatus::Skipped => Some(Answer::Skipped),
        };
        match current {
            Some(a) if a == answer => return Submit::Unchanged,
            Some(_) => return Submit::Conflict(req.status),
            None => {}
        }
        let entry = JournalEntry {
            request_id: request_id.to_string(),
            instance_id: req.instance_id,
            round: req.round,
            answer,
        };
        if let Err(e) = self.journal.append(&entry) {
            return Submit::Journal(e.to_string());
        }
        let req = g.requests.get_mut(request_id).expect("checked above");
        match answer {
            Answer::Label(y) => {
                req.status = RequestStatus::Labeled;
                req.label = Some(y);
                g.labeled += 1;
            }
            Answer::Skipped => {
                req.status = RequestStatus::Skipped;
                g.skipped += 1;
            }
        }
        self.changed.notify_all();
        Submit::Accepted
    }

    pub fn set_paused(&self, paused: bool) {
        self.lock().paused = paused;
        self.changed.notify_all();
    }

    // Loop-side mutations.

    pub(crate) fn set_phase(&self, iteration: usize, phase: Phase) {
        let mut g = self.lock();
        g.iteration = iteration;
        g.phase = Some(phase);
    }

    pub(crate) fn set_error(&self, message: String) {
        let mut g = self.lock();
        g.error = Some(message);
        g.phase = Some(Phase::Done);
    }

    pub(crate) fn add_explanations(&self, explanations: &[Explanation]) {
        let mut g = self.lock();
        for e in explanations {
            g.explanations.insert(e.instance_id, e.clone());
        }
    }

    pub(crate) fn push_record(&self, record: &IterationRecord) {
        self.lock().records.push(record.clone());
    }

    /// Blocks while paused.
    pub(crate) fn wait_unpaused(&self) {
        let mut g = self.lock();
        while g.paused {
            g = self.changed.wait(g).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Opens requests for `ids` not answered already, counting the answered
    /// ones as resolved, then blocks until every request of the round is
    /// resolved. Returns answers in request order.
    pub(crate) fn collect(&self, round: usize, ids: &[usize], replayed: &BTreeMap<usize, Answer>) -> Vec<Answer> {
        let mut g = self.lock();
        let issued_at = now_ms();
        let mut keys = Vec::with_capacity(ids.len());
        for &id in ids {
            let key = LabelRequest::id_for(round, id);
            let explanation = g.explanations.get(&id).cloned();
            let (status, label) = match replayed.get(&id) {
                Some(Answer::Label(y)) => (RequestStatus::Labeled, Some(*y)),
                Some(Answer::Skipped) => (RequestStatus::Skipped, None),
                None => (RequestStatus::Pending, None),
            };
            match status {
                RequestStatus::Labeled => g.labeled += 1,
                RequestStatus::Skipped => g.skipped += 1,
                RequestStatus::Pending => {}
            }
            g.requests.insert(
                key.clone(),
                LabelRequest {
                    request_id: key.clone(),
                    instance_id: id,
                    round,
                    image: format!("/images/{id}"),
                    explanation,
                    issued_at,
                    status,
                    label,
                },
            );
            keys.push(key);
        }
        self.changed.notify_all();
        loop {
            let open = keys.iter().any(|k| g.requests[k].status == RequestStatus::Pending);
            if !open {
                break;
            }
            g = self.changed.wait(g).unwrap_or_else(|p| p.into_inner());
        }
        keys.iter()
            .map(|k| {
                let r = &g.requests[k];
                match r.status {
                    RequestStatus::Labeled => Answer::Label(r.label.expect("labeled")),
                    _ => Answer::Skipped,
                }
            })
            .collect()
    }
}
