//! The multicast queue: merged per-file requests served head to tail, a defer
//! side-queue for parked failures, and the probability-parametrized choice
//! between the retransmit / loopback / defer dispositions of a failed service.

use rand::Rng;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// One merged request: the file, the users waiting for it, and every recorded
/// arrival timestamp per user. A user re-requesting a pending file gets an
/// additional timestamp, and each timestamp later yields its own sojourn
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub file: usize,
    arrivals: BTreeMap<usize, Vec<f64>>,
}

impl QueueEntry {
    pub fn new(file: usize, user: usize, now: f64) -> Self {
        let mut arrivals = BTreeMap::new();
        arrivals.insert(user, vec![now]);
        Self { file, arrivals }
    }

    pub fn users(&self) -> impl Iterator<Item = usize> + '_ {
        self.arrivals.keys().copied()
    }

    pub fn has_user(&self, user: usize) -> bool {
        self.arrivals.contains_key(&user)
    }

    pub fn num_users(&self) -> usize {
        self.arrivals.len()
    }

    pub fn arrival_count(&self) -> usize {
        self.arrivals.values().map(Vec::len).sum()
    }

    pub fn arrivals_of(&self, user: usize) -> &[f64] {
        self.arrivals.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    fn add_arrival(&mut self, user: usize, now: f64) {
        self.arrivals.entry(user).or_default().push(now);
    }

    fn merge_from_nonempty(&mut self, other: QueueEntry) {
        debug_assert_eq!(self.file, other.file);
        for (user, mut ts) in other.arrivals {
            self.arrivals.entry(user).or_default().append(&mut ts);
        }
    }
}

/// Probabilities for the three post-failure dispositions:
/// `[retransmit, loopback, defer]`. The vertices reproduce the pure schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyParams(pub [f64; 3]);

#[derive(Debug, Error, PartialEq)]
#[error("strategy probabilities must be in [0,1] and sum to 1: {0:?}")]
pub struct InvalidStrategy(pub [f64; 3]);

impl StrategyParams {
    pub const RETRANSMIT: StrategyParams = StrategyParams([1.0, 0.0, 0.0]);
    pub const LOOPBACK: StrategyParams = StrategyParams([0.0, 1.0, 0.0]);
    pub const DEFER: StrategyParams = StrategyParams([0.0, 0.0, 1.0]);

    pub fn new(p: [f64; 3]) -> Result<Self, InvalidStrategy> {
        let valid = p.iter().all(|&x| (0.0..=1.0).contains(&x))
            && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if valid {
            Ok(Self(p))
        } else {
            Err(InvalidStrategy(p))
        }
    }

    pub fn p1(&self) -> f64 {
        self.0[0]
    }
    pub fn p2(&self) -> f64 {
        self.0[1]
    }
    pub fn p3(&self) -> f64 {
        self.0[2]
    }
}

/// Disposition of the failed remainder of a served entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostServiceAction {
    /// Keep it at the head, served again immediately.
    Retransmit,
    /// Send it to the tail of the multicast queue.
    Loopback,
    /// Park it until a new request for the same file arrives.
    Defer,
}

/// Categorical draw over the three dispositions.
pub fn sample_post_service_action<R: Rng>(p: &StrategyParams, rng: &mut R) -> PostServiceAction {
    let u: f64 = rng.gen();
    if u < p.0[0] {
        PostServiceAction::Retransmit
    } else if u < p.0[0] + p.0[1] {
        PostServiceAction::Loopback
    } else {
        PostServiceAction::Defer
    }
}

/// Multicast queue state: the ordered main queue (head served next) plus the
/// defer map. At most one entry per file exists across both, so the total
/// backlog never exceeds the catalog size.
#[derive(Debug, Clone, Default)]
pub struct MulticastQueue {
    main: VecDeque<QueueEntry>,
    defer: BTreeMap<usize, QueueEntry>,
}

impl MulticastQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn main_len(&self) -> usize {
        self.main.len()
    }

    pub fn defer_len(&self) -> usize {
        self.defer.len()
    }

    pub fn head(&self) -> Option<&QueueEntry> {
        self.main.front()
    }

    pub fn main_iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.main.iter()
    }

    pub fn defer_iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.defer.values()
    }

    /// Arrival timestamps still waiting for delivery, across both queues.
    pub fn pending_arrivals(&self) -> usize {
        self.main.iter().map(QueueEntry::arrival_count).sum::<usize>()
            + self.defer.values().map(QueueEntry::arrival_count).sum::<usize>()
    }

    fn main_position(&self, file: usize) -> Option<usize> {
        self.main.iter().position(|e| e.file == file)
    }

    /// Records one request. A deferred entry for the file is resurrected and
    /// moved (merged) to the tail of the main queue; an existing main entry
    /// absorbs the request in place; otherwise a fresh entry joins the tail.
    pub fn enqueue_request(&mut self, file: usize, user: usize, now: f64) {
        if let Some(mut parked) = self.defer.remove(&file) {
            parked.add_arrival(user, now);
            debug_assert!(self.main_position(file).is_none());
            self.main.push_back(parked);
        } else if let Some(pos) = self.main_position(file) {
            self.main[pos].add_arrival(user, now);
        } else {
            self.main.push_back(QueueEntry::new(file, user, now));
        }
    }

    /// Settles a completed service of the head entry. `at_start` names the
    /// users the transmission was attempted for (the entry's users when the
    /// service began) and `succeeded` the subset that decoded the file; every
    /// recorded arrival of a succeeded user becomes a sojourn sample
    /// `now - arrival`. The failed remainder is placed per `action`. Users
    /// that merged into the entry mid-service were not attempted: they are
    /// never deferred, joining the failed remainder where the remainder stays
    /// in the main queue and forming a fresh tail entry otherwise.
    ///
    /// Returns the emitted `(user, sojourn)` samples. Panics if the queue is
    /// empty or `served_file` is not at the head.
    pub fn apply_service_outcome(
        &mut self,
        served_file: usize,
        at_start: &[usize],
        succeeded: &[usize],
        action: PostServiceAction,
        now: f64,
    ) -> Vec<(usize, f64)> {
        debug_assert!(succeeded.iter().all(|u| at_start.contains(u)));
        let entry = self.main.pop_front().expect("apply_service_outcome on empty queue");
        assert_eq!(entry.file, served_file, "served entry must be the head of the queue");

        let mut sojourns = Vec::new();
        let mut residue = QueueEntry { file: entry.file, arrivals: BTreeMap::new() };
        let mut joiners = QueueEntry { file: entry.file, arrivals: BTreeMap::new() };
        for (user, ts) in entry.arrivals {
            if succeeded.contains(&user) {
                sojourns.extend(ts.iter().map(|&t| (user, now - t)));
            } else if at_start.contains(&user) {
                residue.arrivals.insert(user, ts);
            } else {
                joiners.arrivals.insert(user, ts);
            }
        }

        if residue.arrivals.is_empty() {
            // Nothing failed; a request that arrived during the transmission
            // simply joins the tail as its own entry.
            if !joiners.arrivals.is_empty() {
                self.main.push_back(joiners);
            }
            return sojourns;
        }

        match action {
            PostServiceAction::Retransmit => {
                residue.merge_from_nonempty(joiners);
                self.main.push_front(residue);
            }
            PostServiceAction::Loopback => {
                residue.merge_from_nonempty(joiners);
                self.main.push_back(residue);
            }
            PostServiceAction::Defer => {
                if joiners.arrivals.is_empty() {
                    self.defer.insert(residue.file, residue);
                } else {
                    // The "new request for the same file" already arrived, so
                    // the merged entry goes straight to the tail instead of
                    // parking.
                    residue.merge_from_nonempty(joiners);
                    self.main.push_back(residue);
                }
            }
        }
        sojourns
    }

    /// One-entry-per-file across main and defer; used by tests and fuzzing.
    pub fn check_invariants(&self, catalog_size: usize) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for e in self.main.iter().chain(self.defer.values()) {
            if !seen.insert(e.file) {
                return Err(format!("file {} appears twice", e.file));
            }
            if e.num_users() == 0 {
                return Err(format!("entry for file {} has no users", e.file));
            }
            if e.arrivals.values().any(|ts| ts.is_empty()) {
                return Err(format!("entry for file {} has a user without arrivals", e.file));
            }
        }
        let total = self.main.len() + self.defer.len();
        if total > catalog_size {
            return Err(format!("backlog {total} exceeds catalog size {catalog_size}"));
        }
        Ok(())
    }
}
