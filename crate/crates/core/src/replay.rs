//! Per-task ring-buffer replay and window extraction.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Transition;

pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("no episode in the buffer holds {0} consecutive transitions")]
    NoEligibleWindow(usize),
    #[error("buffer for task {expected} refused a transition from task {got}")]
    TaskMismatch { expected: u32, got: u32 },
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("index {index} out of range for buffer of size {len}")]
    OutOfRange { index: usize, len: usize },
}

/// `k` transitions of one episode in temporal order, most recent last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarsWindow {
    pub tuples: Vec<Transition>,
}

impl SarsWindow {
    pub fn single(t: Transition) -> Self {
        Self {
            tuples: alloc::vec![t],
        }
    }

    pub fn k(&self) -> usize {
        self.tuples.len()
    }

    pub fn last(&self) -> &Transition {
        self.tuples.last().expect("windows are never empty")
    }

    /// Builds a window of length `k` from the most recent tuples of an
    /// episode. Missing leading tuples are filled by repeating the earliest
    /// available one.
    pub fn padded(recent: &[Transition], k: usize) -> Self {
        assert!(!recent.is_empty() && k > 0);
        let take = recent.len().min(k);
        let tail = &recent[recent.len() - take..];
        let mut tuples = Vec::with_capacity(k);
        tuples.extend(core::iter::repeat_n(tail[0], k - take));
        tuples.extend_from_slice(tail);
        Self { tuples }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    task_id: u32,
    capacity: usize,
    data: Vec<Transition>,
    /// Physical slot of the oldest entry once the ring is full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(task_id: u32, capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            task_id,
            capacity,
            data: Vec::new(),
            head: 0,
        })
    }

    pub fn task_id(&self) -> u32 {
        self.task_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Appends a transition, evicting the oldest one at capacity.
    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if t.task_id != self.task_id {
            return Err(ReplayError::TaskMismatch {
                expected: self.task_id,
                got: t.task_id,
            });
        }
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Transition by age, 0 being the oldest retained.
    pub fn get(&self, index: usize) -> Option<&Transition> {
        if index >= self.data.len() {
            return None;
        }
        Some(&self.data[(self.head + index) % self.data.len()])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        (0..self.len()).filter_map(move |i| self.get(i))
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Transition>, ReplayError> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| *self.get(i).unwrap())
            .collect())
    }

    /// Uniformly sampled logical indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, ReplayError> {
        if self.data.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.data.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    /// Whether the `k` transitions ending at logical `end` form one
    /// consecutive stretch of a single episode. Constant time: episodes are
    /// pushed contiguously, so matching endpoints imply a matching interior.
    fn window_valid(&self, end: usize, k: usize) -> bool {
        if end + 1 < k {
            return false;
        }
        let (Some(last), Some(first)) = (self.get(end), self.get(end + 1 - k)) else {
            return false;
        };
        first.episode == last.episode
            && last.step_index >= first.step_index
            && (last.step_index - first.step_index) as usize == k - 1
    }

    /// Window of length `k` ending at logical index `end`, padded at the
    /// front (see [`SarsWindow::padded`]) when the episode started less than
    /// `k` steps earlier or its head was evicted.
    pub fn window_ending_at(&self, end: usize, k: usize) -> Result<SarsWindow, ReplayError> {
        if k == 0 {
            return Err(ReplayError::ZeroWindow);
        }
        let last = *self.get(end).ok_or(ReplayError::OutOfRange {
            index: end,
            len: self.len(),
        })?;
        let mut recent = Vec::with_capacity(k);
        recent.push(last);
        let mut idx = end;
        while recent.len() < k && idx > 0 {
            let prev = self.get(idx - 1).copied().unwrap();
            let cur = recent[recent.len() - 1];
            if prev.episode != cur.episode || prev.step_index + 1 != cur.step_index {
                break;
            }
            recent.push(prev);
            idx -= 1;
        }
        recent.reverse();
        Ok(SarsWindow::padded(&recent, k))
    }

    /// Uniformly samples windows of `k` consecutive same-episode transitions.
    pub fn sample_windows<R: Rng + ?Sized>(
        &self,
        k: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<SarsWindow>, ReplayError> {
        if k == 0 {
            return Err(ReplayError::ZeroWindow);
        }
        if self.data.is_empty() {
            return Err(ReplayError::Empty);
        }
        let n = self.len();
        let mut out = Vec::with_capacity(batch_size);
        // Rejection sampling on the end index is uniform over valid windows;
        // fall back to an explicit list if valid ends turn out to be rare.
        let mut attempts = 0usize;
        while out.len() < batch_size && attempts < 32 * batch_size.max(1) {
            attempts += 1;
            let end = rng.random_range(0..n);
            if self.window_valid(end, k) {
                out.push(self.window_from(end, k));
            }
        }
        if out.len() < batch_size {
            let ends: Vec<usize> = (0..n).filter(|&e| self.window_valid(e, k)).collect();
            if ends.is_empty() {
                return Err(ReplayError::NoEligibleWindow(k));
            }
            while out.len() < batch_size {
                let end = ends[rng.random_range(0..ends.len())];
                out.push(self.window_from(end, k));
            }
        }
        Ok(out)
    }

    fn window_from(&self, end: usize, k: usize) -> SarsWindow {
        SarsWindow {
            tuples: (end + 1 - k..=end).map(|i| *self.get(i).unwrap()).collect(),
        }
    }
}
