use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::autodiff::{softmax_slice, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicEntry<T> {
    pub key: Vec<T>,
    pub value: Vec<T>,
    /// Write timestamp.
    pub tau: u64,
    /// Times this entry was the strongest match of a counted retrieval.
    pub count: u64,
    /// Caller-defined payload; the model stores the source row here.
    pub slot: usize,
    /// Output of the latest retrieval where this entry was the argmax.
    pub cached: Option<Vec<T>>,
}

/// Result of attending over the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<T> {
    pub r: Vec<T>,
    pub alpha: Vec<T>,
    pub max_alpha: T,
    pub argmax: Option<usize>,
    /// Buffer was empty: `r` is zero and nothing was read.
    pub cold: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteDecision {
    Skipped,
    Inserted,
    /// Inserted after evicting the entry written at `evicted_tau`.
    Replaced {
        evicted_tau: u64,
    },
}

impl WriteDecision {
    pub fn wrote(self) -> bool {
        !matches!(self, Self::Skipped)
    }
}

/// Bounded key-value store read by scaled dot-product attention.
///
/// Never holds more than `capacity` entries. When full, a write evicts the
/// least-accessed entry, the oldest among equals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicBuffer<T> {
    capacity: usize,
    novelty_threshold: T,
    entries: Vec<EpisodicEntry<T>>,
}

impl<T: Scalar> EpisodicBuffer<T> {
    pub fn new(capacity: usize, novelty_threshold: T) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::Parameter(
                "buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            novelty_threshold,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn novelty_threshold(&self) -> T {
        self.novelty_threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EpisodicEntry<T>] {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// `qᵀkᵢ/√d` for every entry.
    pub fn scores(&self, q: &[T]) -> Vec<T> {
        let scale = T::one() / T::of(q.len() as f64).sqrt();
        self.entries
            .iter()
            .map(|e| dot(q, &e.key) * scale)
            .collect()
    }

    fn attend(&mut self, q: &[T], counted: bool) -> Retrieval<T> {
        if self.entries.is_empty() {
            return Retrieval {
                r: vec![T::zero(); q.len()],
                alpha: Vec::new(),
                max_alpha: T::zero(),
                argmax: None,
                cold: true,
            };
        }
        let alpha = softmax_slice(&self.scores(q));
        let dv = self.entries[0].value.len();
        let mut r = vec![T::zero(); dv];
        for (a, e) in alpha.iter().zip(&self.entries) {
            for (acc, &v) in r.iter_mut().zip(&e.value) {
                *acc = *acc + *a * v;
            }
        }
        let best = first_argmax(&alpha);
        let entry = &mut self.entries[best];
        if counted {
            entry.count += 1;
        }
        entry.cached = Some(r.clone());
        Retrieval {
            r,
            max_alpha: alpha[best],
            alpha,
            argmax: Some(best),
            cold: false,
        }
    }

    /// Attention read with query `q`; bumps the access count of the strongest match.
    pub fn retrieve(&mut self, q: &[T]) -> Retrieval<T> {
        self.attend(q, true)
    }

    /// Same read without touching access counts; only refreshes the match's cache.
    pub fn shadow_retrieve(&mut self, q: &[T]) -> Retrieval<T> {
        self.attend(q, false)
    }

    /// Index of the entry with the highest score for `q`, without reading values.
    pub fn nearest(&self, q: &[T]) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        Some(first_argmax(&self.scores(q)))
    }

    /// `1 − max(0, maxᵢ cos(key, kᵢ))`; 1 for an empty buffer.
    pub fn novelty(&self, key: &[T]) -> T {
        let kn = dot(key, key).sqrt();
        let best = self
            .entries
            .iter()
            .map(|e| {
                let en = dot(&e.key, &e.key).sqrt();
                if kn == T::zero() || en == T::zero() {
                    T::zero()
                } else {
                    dot(key, &e.key) / (kn * en)
                }
            })
            .fold(T::zero(), T::max);
        T::one() - best
    }

    /// Stores `(key, value)` when `novelty` exceeds the threshold.
    pub fn write(
        &mut self,
        key: Vec<T>,
        value: Vec<T>,
        tau: u64,
        slot: usize,
        novelty: T,
    ) -> WriteDecision {
        if !(novelty > self.novelty_threshold) {
            return WriteDecision::Skipped;
        }
        let entry = EpisodicEntry {
            key,
            value,
            tau,
            count: 0,
            slot,
            cached: None,
        };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return WriteDecision::Inserted;
        }
        let victim = self
            .entries
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| (e.count, e.tau))
            .map(|(i, _)| i)
            .expect("full buffer is non-empty");
        let evicted_tau = self.entries[victim].tau;
        self.entries.remove(victim);
        self.entries.push(entry);
        WriteDecision::Replaced { evicted_tau }
    }
}

/// Buffer plus its own query, key and value projections, operating on raw vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub buffer: EpisodicBuffer<T>,
}

impl<T: Scalar> EpisodicMemory<T> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        capacity: usize,
        novelty_threshold: T,
    ) -> Result<Self, MemoryError> {
        let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut m = || Tensor::from_fn(vec![d, d], |_| T::of(n.sample(rng)));
        Ok(Self {
            w_q: m(),
            w_k: m(),
            w_v: m(),
            buffer: EpisodicBuffer::new(capacity, novelty_threshold)?,
        })
    }

    fn project(w: &Tensor<T>, x: &[T]) -> Result<Vec<T>, MemoryError> {
        Ok(Tensor::row(x.to_vec()).matmul(w)?.into_data())
    }

    pub fn retrieve(&mut self, x: &[T]) -> Result<Retrieval<T>, MemoryError> {
        let q = Self::project(&self.w_q, x)?;
        Ok(self.buffer.retrieve(&q))
    }

    /// Writes `x` at time `tau` if its key is novel against the current contents.
    pub fn write(&mut self, x: &[T], tau: u64) -> Result<WriteDecision, MemoryError> {
        let k = Self::project(&self.w_k, x)?;
        let v = Self::project(&self.w_v, x)?;
        let novelty = self.buffer.novelty(&k);
        Ok(self.buffer.write(k, v, tau, 0, novelty))
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn first_argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn buf(cap: usize) -> EpisodicBuffer<f64> {
        EpisodicBuffer::new(cap, 0.5).unwrap()
    }

    #[test]
    fn cold_read_is_zero_and_flagged() {
        let mut b = buf(4);
        let r = b.retrieve(&[1.0, 2.0]);
        assert!(r.cold && r.max_alpha == 0.0 && r.r == vec![0.0, 0.0]);
        assert_eq!(b.novelty(&[1.0, 0.0]), 1.0);
    }

    #[test]
    fn singleton_returns_its_value() {
        let mut b = buf(4);
        b.write(vec![1.0, 0.0], vec![3.0, -2.0], 0, 0, 1.0);
        let r = b.retrieve(&[-5.0, 9.0]);
        assert_eq!(r.alpha, vec![1.0]);
        assert_eq!(r.r, vec![3.0, -2.0]);
        assert_eq!(b.entries()[0].count, 1);
    }

    #[test]
    fn identical_entries_return_shared_value() {
        let mut b = buf(4);
        b.write(vec![0.5, 0.5], vec![1.0, 2.0], 0, 0, 1.0);
        b.write(vec![0.5, 0.5], vec![1.0, 2.0], 1, 0, 1.0);
        let r = b.shadow_retrieve(&[3.0, -1.0]);
        assert_eq!(r.alpha, vec![0.5, 0.5]);
        assert_eq!(r.r, vec![1.0, 2.0]);
        assert!(b.entries().iter().all(|e| e.count == 0));
    }

    #[test]
    fn eviction_takes_least_used_then_oldest() {
        let mut b = buf(2);
        b.write(vec![1.0, 0.0], vec![1.0, 0.0], 0, 0, 1.0);
        b.write(vec![0.0, 1.0], vec![0.0, 1.0], 1, 1, 1.0);
        b.retrieve(&[0.0, 10.0]);
        b.retrieve(&[0.0, 10.0]);
        b.retrieve(&[10.0, 0.0]);
        let d = b.write(vec![1.0, 1.0], vec![1.0, 1.0], 2, 2, 1.0);
        assert_eq!(d, WriteDecision::Replaced { evicted_tau: 0 });
        assert_eq!(b.len(), 2);
        // equal counts: the older entry goes
        let d = b.write(vec![-1.0, 1.0], vec![0.0, 0.0], 3, 3, 1.0);
        assert_eq!(d, WriteDecision::Replaced { evicted_tau: 2 });
    }

    #[test]
    fn repeated_token_is_written_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = EpisodicMemory::<f64>::init(&mut rng, 8, 16, 0.5).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..20 {
            m.retrieve(&x).unwrap();
            let d = m.write(&x, t).unwrap();
            assert_eq!(d.wrote(), t == 0);
        }
        assert_eq!(m.buffer.len(), 1);
    }

    #[test]
    fn nearest_agrees_with_retrieval_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = buf(8);
        for t in 0..8 {
            let k: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.write(k.clone(), k, t, 0, 1.0);
        }
        let q = vec![0.3, -0.7, 0.2, 0.9];
        let n = b.nearest(&q);
        assert_eq!(n, b.retrieve(&q).argmax);
    }
}
