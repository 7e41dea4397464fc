//! Transitions and the fixed-capacity FIFO replay buffers used for both the
//! environment data and the model-generated data.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("transition field `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("transition state dim {state} != next_state dim {next_state}")]
    StateDim { state: usize, next_state: usize },
    #[error("transition shape ({state}, {action}) does not match buffer shape ({expected_state}, {expected_action})")]
    Shape {
        state: usize,
        action: usize,
        expected_state: usize,
        expected_action: usize,
    },
    #[error("requested {requested} samples from a buffer holding {size}")]
    NotEnough { requested: usize, size: usize },
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
}

/// One (s, a, r, s', terminal) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    pub fn new(
        state: Vec<f64>,
        action: Vec<f64>,
        reward: f64,
        next_state: Vec<f64>,
        terminal: bool,
    ) -> Self {
        Self {
            state,
            action,
            reward,
            next_state,
            terminal,
        }
    }

    pub fn validate(&self) -> Result<(), BufferError> {
        if self.state.len() != self.next_state.len() {
            return Err(BufferError::StateDim {
                state: self.state.len(),
                next_state: self.next_state.len(),
            });
        }
        if !self.reward.is_finite() {
            return Err(BufferError::NonFinite("reward"));
        }
        if !self.state.iter().all(|v| v.is_finite()) {
            return Err(BufferError::NonFinite("state"));
        }
        if !self.action.iter().all(|v| v.is_finite()) {
            return Err(BufferError::NonFinite("action"));
        }
        if !self.next_state.iter().all(|v| v.is_finite()) {
            return Err(BufferError::NonFinite("next_state"));
        }
        Ok(())
    }
}

/// Ring buffer with FIFO eviction.
///
/// Entries live in `entries`; once the buffer is full `write_cursor` points at
/// the oldest entry, which the next push overwrites.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<Transition>,
    write_cursor: usize,
    shape: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            write_cursor: 0,
            shape: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<(), BufferError> {
        t.validate()?;
        let dims = (t.state.len(), t.action.len());
        match self.shape {
            Some(expected) if expected != dims => {
                return Err(BufferError::Shape {
                    state: dims.0,
                    action: dims.1,
                    expected_state: expected.0,
                    expected_action: expected.1,
                })
            }
            None => self.shape = Some(dims),
            _ => {}
        }
        if self.entries.len() < self.capacity {
            self.entries.push(t);
        } else {
            self.entries[self.write_cursor] = t;
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Entry by age: `get(0)` is the oldest retained transition.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        if i >= self.entries.len() {
            return None;
        }
        let start = if self.entries.len() < self.capacity {
            0
        } else {
            self.write_cursor
        };
        self.entries.get((start + i) % self.entries.len())
    }

    /// Iterate from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        (0..self.entries.len()).map(move |i| self.get(i).expect("index in range"))
    }

    /// Indices (by age) of `k` distinct entries, uniformly without replacement.
    pub fn sample_indices(&self, k: usize, seed: u64) -> Result<Vec<usize>, BufferError> {
        if k > self.len() {
            return Err(BufferError::NotEnough {
                requested: k,
                size: self.len(),
            });
        }
        let mut rng = seed::rng(seed);
        Ok(index::sample(&mut rng, self.len(), k).into_vec())
    }

    pub fn sample(&self, k: usize, seed: u64) -> Result<Vec<&Transition>, BufferError> {
        Ok(self
            .sample_indices(k, seed)?
            .into_iter()
            .map(|i| self.get(i).expect("sampled index in range"))
            .collect())
    }

    /// Debug dump, one transition per row.
    /// Columns: `s0..s{d-1}, a0..a{m-1}, reward, ns0..ns{d-1}, terminal`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (ds, da) = self.shape.unwrap_or((0, 0));
        let mut header: Vec<String> = (0..ds).map(|i| format!("s{i}")).collect();
        header.extend((0..da).map(|i| format!("a{i}")));
        header.push("reward".into());
        header.extend((0..ds).map(|i| format!("ns{i}")));
        header.push("terminal".into());
        writeln!(out, "{}", header.join(","))?;
        for t in self.iter() {
            let mut row: Vec<String> = t.state.iter().map(|v| v.to_string()).collect();
            row.extend(t.action.iter().map(|v| v.to_string()));
            row.push(t.reward.to_string());
            row.extend(t.next_state.iter().map(|v| v.to_string()));
            row.push(u8::from(t.terminal).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn tr(x: f64) -> Transition {
        Transition::new(vec![x], vec![0.0], x, vec![x + 1.0], false)
    }

    fn rewards(b: &ReplayBuffer) -> Vec<f64> {
        b.iter().map(|t| t.reward).collect()
    }

    #[test]
    fn first_insert() {
        let mut b = ReplayBuffer::new(3).unwrap();
        b.push(tr(1.0)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for x in 1..=4 {
            b.push(tr(x as f64)).unwrap();
        }
        assert_eq!(rewards(&b), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn thousand_pushes_match_reference_queue() {
        let mut b = ReplayBuffer::new(100).unwrap();
        let mut reference = VecDeque::new();
        for x in 0..1000 {
            b.push(tr(x as f64)).unwrap();
            reference.push_back(x as f64);
            if reference.len() > 100 {
                reference.pop_front();
            }
        }
        assert_eq!(b.len(), 100);
        assert_eq!(rewards(&b), reference.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut b = ReplayBuffer::new(3).unwrap();
        assert_eq!(
            b.push(Transition::new(vec![0.0], vec![0.0], f64::NAN, vec![0.0], false)),
            Err(BufferError::NonFinite("reward"))
        );
        assert_eq!(
            b.push(Transition::new(vec![f64::INFINITY], vec![0.0], 0.0, vec![0.0], false)),
            Err(BufferError::NonFinite("state"))
        );
        assert!(matches!(
            b.push(Transition::new(vec![0.0], vec![0.0], 0.0, vec![0.0, 1.0], false)),
            Err(BufferError::StateDim { .. })
        ));
        b.push(tr(0.0)).unwrap();
        assert!(matches!(
            b.push(Transition::new(vec![0.0, 0.0], vec![0.0], 0.0, vec![0.0, 0.0], false)),
            Err(BufferError::Shape { .. })
        ));
        assert!(b.len() == 1);
    }

    #[test]
    fn exhaustive_sample_is_permutation() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for x in 0..5 {
            b.push(tr(x as f64)).unwrap();
        }
        let mut got: Vec<f64> = b.sample(5, 3).unwrap().iter().map(|t| t.reward).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn oversample_is_an_error() {
        let mut b = ReplayBuffer::new(5).unwrap();
        b.push(tr(0.0)).unwrap();
        assert_eq!(
            b.sample(2, 0).unwrap_err(),
            BufferError::NotEnough {
                requested: 2,
                size: 1
            }
        );
    }

    #[test]
    fn same_seed_same_sample() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for x in 0..100 {
            b.push(tr(x as f64)).unwrap();
        }
        assert_eq!(b.sample_indices(10, 7).unwrap(), b.sample_indices(10, 7).unwrap());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for x in 0..100 {
            b.push(tr(x as f64)).unwrap();
        }
        let trials = 10_000;
        let mut counts = vec![0usize; 100];
        for t in 0..trials {
            for i in b.sample_indices(10, seed::derive(7, "uniformity", &[t as u64])).unwrap() {
                counts[i] += 1;
            }
        }
        // Each entry is included with probability 0.1 per trial.
        let p = 0.1;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let expected = trials as f64 * p;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom; the 0.999 quantile is about 148.
        assert!(chi2 < 148.0, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 4.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_transition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.csv");
        let mut b = ReplayBuffer::new(4).unwrap();
        for x in 0..6 {
            b.push(tr(x as f64)).unwrap();
        }
        b.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "s0,a0,reward,ns0,terminal");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "2,0,2,3,0");
    }

    proptest! {
        #[test]
        fn contents_are_last_capacity_pushes(cap in 1usize..20, n in 0usize..80) {
            let mut b = ReplayBuffer::new(cap).unwrap();
            for x in 0..n {
                b.push(tr(x as f64)).unwrap();
            }
            let expected: Vec<f64> = (n.saturating_sub(cap)..n).map(|x| x as f64).collect();
            prop_assert_eq!(rewards(&b), expected);
        }
    }
}
