//! Replay storage: one-step shaped transitions and compressed n-step records.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result, SdhError};

/// Format tag written at the head of every buffer dump.
pub const REPLAY_FORMAT: &str = "sdh-replay";
pub const REPLAY_FORMAT_VERSION: u32 = 1;

/// `(s, a, r~, c, s', gamma~, done)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: usize,
    pub a: usize,
    pub r_tilde: f64,
    pub cost: f64,
    pub s_next: usize,
    /// `gamma * alpha`, before terminal masking.
    pub gamma_tilde: f64,
    pub done: bool,
}

impl TransitionRecord {
    pub fn bootstrap(&self) -> f64 {
        if self.done {
            0.0
        } else {
            self.gamma_tilde
        }
    }
}

/// Compressed n-step entry: `R_n`, the bootstrap state and the product of
/// shaped discounts across the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStepRecord {
    pub s: usize,
    pub a: usize,
    pub r_n: f64,
    /// Raw cost of the first step, used by the violation scaler.
    pub cost: f64,
    pub s_boot: usize,
    pub u_boot: f64,
    pub done: bool,
    /// Behavior log-probability of `a`, kept for diagnostics only.
    pub behavior_logp: f64,
    /// Number of raw steps folded into the record.
    pub steps: usize,
}

/// One raw step inside a rolling window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub cost: f64,
    pub alpha: f64,
    pub logp: f64,
}

/// `R_n = sum_k u_k alpha_k r_k` with `u_0 = 1`, `u_{k+1} = u_k * (gamma * alpha_k)`,
/// and `u_boot = u_n`.
pub fn compress_window(entries: &[WindowEntry], s_boot: usize, done: bool, gamma: f64) -> Result<NStepRecord> {
    let first = match entries.first() {
        Some(e) => e,
        None => return usage("cannot compress an empty window"),
    };
    let mut u = 1.0;
    let mut r_n = 0.0;
    for e in entries {
        r_n += u * (e.alpha * e.r);
        u *= gamma * e.alpha;
    }
    Ok(NStepRecord {
        s: first.s,
        a: first.a,
        r_n,
        cost: first.cost,
        s_boot,
        u_boot: u,
        done,
        behavior_logp: first.logp,
        steps: entries.len(),
    })
}

/// Effective bootstrap factor: terminals zero it, time-limit truncation keeps it.
pub fn terminal_mask(done: bool, truncated: bool, gamma_tilde: f64) -> Result<f64> {
    if done && truncated {
        return usage("a step cannot be both terminal and truncated");
    }
    Ok(if done { 0.0 } else { gamma_tilde })
}

/// Sliding window of the last `n` steps of the current episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingWindow {
    n: usize,
    gamma: f64,
    entries: VecDeque<WindowEntry>,
}

impl RollingWindow {
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if n == 0 {
            return usage("window length must be at least 1");
        }
        Ok(Self {
            n,
            gamma,
            entries: VecDeque::with_capacity(n),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds the step that led to `s_next`. Once the window is full, returns
    /// the record that starts at the oldest step and bootstraps from `s_next`.
    pub fn push(&mut self, entry: WindowEntry, s_next: usize) -> Result<Option<NStepRecord>> {
        self.entries.push_back(entry);
        if self.entries.len() < self.n {
            return Ok(None);
        }
        let rec = compress_window(self.entries.make_contiguous(), s_next, false, self.gamma)?;
        self.entries.pop_front();
        Ok(Some(rec))
    }

    /// Adds the last step of an episode and flushes. Every window that
    /// reaches the final step is emitted here, so a terminal end is never
    /// bootstrapped.
    pub fn end_episode(&mut self, entry: WindowEntry, s_final: usize, terminal: bool) -> Result<Vec<NStepRecord>> {
        self.entries.push_back(entry);
        self.flush(s_final, terminal)
    }

    /// Ends the episode at `s_final`, emitting one record per remaining
    /// start. A terminal end sets `done`; a truncated end keeps the
    /// bootstrap.
    pub fn flush(&mut self, s_final: usize, terminal: bool) -> Result<Vec<NStepRecord>> {
        let mut out = Vec::with_capacity(self.entries.len());
        while !self.entries.is_empty() {
            out.push(compress_window(self.entries.make_contiguous(), s_final, terminal, self.gamma)?);
            self.entries.pop_front();
        }
        Ok(out)
    }
}

/// FIFO ring buffer with uniform sampling with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

#[derive(Serialize, Deserialize)]
struct Dump<T> {
    format: String,
    version: u32,
    capacity: usize,
    items: Vec<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return usage("replay capacity must be at least 1");
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return usage("cannot sample from an empty replay buffer");
        }
        Ok((0..batch_size).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<T>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }
}

impl<T: Clone + Serialize + DeserializeOwned> ReplayBuffer<T> {
    pub fn dump(&self, path: &Path) -> Result<()> {
        let doc = Dump {
            format: REPLAY_FORMAT.into(),
            version: REPLAY_FORMAT_VERSION,
            capacity: self.capacity,
            items: self.items.iter().cloned().collect(),
        };
        serde_json::to_writer(BufWriter::new(File::create(path)?), &doc)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let doc: Dump<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if doc.format != REPLAY_FORMAT {
            return Err(SdhError::Format(format!("not a replay dump: format {:?}", doc.format)));
        }
        if doc.version != REPLAY_FORMAT_VERSION {
            return Err(SdhError::Format(format!(
                "replay dump version {} is not supported (expected {REPLAY_FORMAT_VERSION})",
                doc.version
            )));
        }
        if doc.capacity == 0 || doc.items.len() > doc.capacity {
            return Err(SdhError::Format("replay dump holds more items than its capacity".into()));
        }
        Ok(Self {
            capacity: doc.capacity,
            items: doc.items.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn entry(r: f64, alpha: f64) -> WindowEntry {
        WindowEntry {
            s: 0,
            a: 0,
            r,
            cost: 0.0,
            alpha,
            logp: 0.0,
        }
    }

    #[test]
    fn two_step_example() {
        let rec = compress_window(&[entry(1.0, 0.5), entry(2.0, 1.0)], 3, false, 0.9).unwrap();
        assert!((rec.r_n - 1.4).abs() < 1e-15);
        assert!((rec.u_boot - 0.405).abs() < 1e-15);
        assert_eq!(rec.s_boot, 3);
        assert_eq!(rec.steps, 2);
    }

    #[test]
    fn degenerate_windows() {
        let rec = compress_window(&[entry(3.0, 0.7)], 1, false, 0.9).unwrap();
        assert_eq!(rec.r_n, 0.7 * 3.0);
        assert_eq!(rec.u_boot, 0.9 * 0.7);
        let zero = compress_window(&[entry(0.0, 0.5), entry(0.0, 0.8), entry(0.0, 1.0)], 1, false, 0.9).unwrap();
        assert_eq!(zero.r_n, 0.0);
        assert!((zero.u_boot - 0.9f64.powi(3) * 0.4).abs() < 1e-15);
        assert!(compress_window(&[], 0, false, 0.9).is_err());
    }

    #[test]
    fn terminal_mask_cases() {
        assert_eq!(terminal_mask(true, false, 0.45).unwrap(), 0.0);
        assert_eq!(terminal_mask(false, true, 0.45).unwrap(), 0.45);
        assert_eq!(terminal_mask(false, false, 0.3).unwrap(), 0.3);
        assert!(terminal_mask(true, true, 0.3).is_err());
    }

    #[test]
    fn window_emits_once_full_and_flushes() {
        let mut w = RollingWindow::new(3, 0.9).unwrap();
        let mut emitted = Vec::new();
        for t in 0..5 {
            let e = WindowEntry { s: t, ..entry(1.0, 1.0) };
            if let Some(rec) = w.push(e, t + 1).unwrap() {
                emitted.push(rec);
            }
        }
        assert_eq!(emitted.len(), 3);
        assert_eq!(emitted[0].s, 0);
        assert_eq!(emitted[0].s_boot, 3);
        let tail = w.flush(5, true).unwrap();
        assert_eq!(tail.iter().map(|r| r.steps).collect::<Vec<_>>(), vec![2, 1]);
        assert!(tail.iter().all(|r| r.done && r.s_boot == 5));
        assert!(w.is_empty());
        let mut w = RollingWindow::new(3, 0.9).unwrap();
        w.push(entry(1.0, 1.0), 1).unwrap();
        let truncated = w.flush(1, false).unwrap();
        assert!(!truncated[0].done);
    }

    #[test]
    fn buffer_is_fifo_and_samples_uniformly() {
        let mut b = ReplayBuffer::new(1).unwrap();
        b.push(7u32);
        b.push(9u32);
        let mut r = rng::stream(1, 0);
        assert!(b.sample_minibatch(5, &mut r).unwrap().iter().all(|x| *x == 9));
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10usize {
            b.push(i);
        }
        let mut counts = [0usize; 10];
        for i in b.sample_indices(100_000, &mut r).unwrap() {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 100_000.0 - 0.1).abs() < 0.01));
        let empty: ReplayBuffer<u8> = ReplayBuffer::new(3).unwrap();
        assert!(empty.sample_minibatch(1, &mut r).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(50).unwrap();
        for i in 0..50usize {
            b.push(i);
        }
        let x = b.sample_minibatch(32, &mut rng::stream(4, 2)).unwrap();
        let y = b.sample_minibatch(32, &mut rng::stream(4, 2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dump_and_restore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.json");
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..6 {
            b.push(compress_window(&[entry(i as f64, 0.5)], i, i % 2 == 0, 0.9).unwrap());
        }
        b.dump(&path).unwrap();
        let back: ReplayBuffer<NStepRecord> = ReplayBuffer::restore(&path).unwrap();
        assert_eq!(back, b);
        std::fs::write(&path, r#"{"format":"sdh-replay","version":99,"capacity":1,"items":[]}"#).unwrap();
        assert!(matches!(ReplayBuffer::<NStepRecord>::restore(&path), Err(SdhError::Format(_))));
    }
}
