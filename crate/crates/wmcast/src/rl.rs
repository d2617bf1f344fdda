//! Shared learner machinery: replay memories, step-size and exploration
//! schedules, and the probability-simplex projection.

use rand::Rng;

/// Fixed-capacity ring buffer sampled uniformly for minibatches.
#[derive(Debug, Clone)]
pub struct ReplayMemory<T> {
    items: Vec<T>,
    capacity: usize,
    inserted: u64,
}

impl<T: Clone> ReplayMemory<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self { items: Vec::with_capacity(capacity.min(4096)), capacity, inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends an item, overwriting the oldest once full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = item;
        }
        self.inserted += 1;
    }

    /// Contents in insertion order (oldest first).
    pub fn iter_ordered(&self) -> impl Iterator<Item = &T> {
        let len = self.items.len();
        let start = if self.inserted as usize > len {
            (self.inserted % self.capacity as u64) as usize
        } else {
            0
        };
        (0..len).map(move |k| &self.items[(start + k) % len])
    }

    /// Uniform minibatch of `n` items: distinct when enough items exist,
    /// with replacement otherwise. Panics on an empty memory.
    pub fn sample_minibatch<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        assert!(!self.items.is_empty(), "sample from empty replay memory");
        let len = self.items.len();
        if len < n {
            return (0..n).map(|_| self.items[rng.gen_range(0..len)].clone()).collect();
        }
        // Partial Fisher-Yates over an index array.
        let mut idx: Vec<usize> = (0..len).collect();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let j = rng.gen_range(k..len);
            idx.swap(k, j);
            out.push(self.items[idx[k]].clone());
        }
        out
    }
}

/// Learning-rate schedule. The decaying forms satisfy the usual stochastic
/// approximation conditions (divergent sum, summable squares) symbolically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// a / (1 + b * t)
    InverseDecay { a: f64, b: f64 },
    /// a / (1 + b * t * log(log(t))), with the log-log factor clamped below
    /// by 1 so small t stays in-domain.
    InverseLogLogDecay { a: f64, b: f64 },
}

impl Schedule {
    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant(c) => c,
            Schedule::InverseDecay { a, b } => a / (1.0 + b * t as f64),
            Schedule::InverseLogLogDecay { a, b } => {
                a / (1.0 + b * t as f64 * log_log(t as f64))
            }
        }
    }

    /// Rate at t = 0; the constant-step variants pin steps to this value.
    pub fn initial(&self) -> f64 {
        match *self {
            Schedule::Constant(c) => c,
            Schedule::InverseDecay { a, .. } | Schedule::InverseLogLogDecay { a, .. } => a,
        }
    }
}

fn log_log(t: f64) -> f64 {
    t.max(3.0).ln().ln().max(1.0)
}

/// Exploration probability max(floor, eps0 * decay^t), with t counted in
/// target-sync periods.
pub fn epsilon(t: u64, eps0: f64, decay: f64, floor: f64) -> f64 {
    debug_assert!(decay > 0.0 && decay < 1.0);
    (eps0 * decay.powi(t.min(i32::MAX as u64) as i32)).max(floor)
}

/// Projects a 3-vector onto the probability simplex: clamp negatives to zero
/// and renormalise; an all-nonpositive input falls back to uniform.
pub fn project_simplex(r: [f64; 3]) -> [f64; 3] {
    let pos = [r[0].max(0.0), r[1].max(0.0), r[2].max(0.0)];
    let sum: f64 = pos.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return [1.0 / 3.0; 3];
    }
    [pos[0] / sum, pos[1] / sum, pos[2] / sum]
}
