//! Primitive (per-step) and extended (K-step, goal-labelled) replay buffers.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::{Observation, Transition};
use crate::error::{Error, Result};
use crate::goal_codec::GoalVector;

/// Transition tagged with its episode and within-episode step index.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTransition {
    pub episode: u64,
    pub step: u64,
    pub transition: Transition,
}

#[derive(Clone, Debug)]
pub struct PrimitiveBuffer {
    capacity: usize,
    entries: VecDeque<StoredTransition>,
}

impl PrimitiveBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> Option<&StoredTransition> {
        self.entries.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredTransition> {
        self.entries.iter()
    }

    /// Appends, evicting the oldest entry at capacity. Entries must arrive in
    /// episode order with consecutive step indices inside an episode.
    pub fn push(&mut self, entry: StoredTransition) -> Result<()> {
        if let Some(last) = self.entries.back() {
            let continues = entry.episode == last.episode && entry.step == last.step + 1;
            let starts_new = entry.episode > last.episode;
            if !(continues || starts_new) {
                return Err(Error::Integrity(format!(
                    "transition (episode {}, step {}) does not follow (episode {}, step {})",
                    entry.episode, entry.step, last.episode, last.step
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// Index of the entry for `(episode, step)`, if still stored.
    pub fn find(&self, episode: u64, step: u64) -> Option<usize> {
        let idx = self
            .entries
            .partition_point(|e| (e.episode, e.step) < (episode, step));
        self.entries
            .get(idx)
            .filter(|e| e.episode == episode && e.step == step)
            .map(|_| idx)
    }

    fn window_ok(&self, start: usize, length: usize) -> bool {
        let first = &self.entries[start];
        let last = &self.entries[start + length - 1];
        // pushes are contiguous within an episode, so equal episode ids at both
        // ends imply the whole window is one unbroken run
        first.episode == last.episode
    }

    /// Uniform over all start positions whose `length`-window lies inside a
    /// single episode.
    pub fn sample_sequence_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
        length: usize,
    ) -> Result<Vec<Vec<StoredTransition>>> {
        if length == 0 || batch == 0 {
            return Err(Error::Usage("batch and length must be positive".into()));
        }
        if self.entries.len() < length {
            return Err(Error::NotReady(format!(
                "{} transitions stored, sequences of {length} requested",
                self.entries.len()
            )));
        }
        let span = self.entries.len() - length + 1;
        let mut eligible: Option<Vec<usize>> = None;
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut start = None;
            if eligible.is_none() {
                for _ in 0..64 {
                    let s = rng.gen_range(0..span);
                    if self.window_ok(s, length) {
                        start = Some(s);
                        break;
                    }
                }
            }
            let start = match start {
                Some(s) => s,
                None => {
                    let list = eligible.get_or_insert_with(|| {
                        (0..span).filter(|&s| self.window_ok(s, length)).collect()
                    });
                    if list.is_empty() {
                        return Err(Error::NotReady(format!(
                            "no single-episode run of {length} transitions"
                        )));
                    }
                    list[rng.gen_range(0..list.len())]
                }
            };
            out.push(self.entries.range(start..start + length).cloned().collect());
        }
        Ok(out)
    }
}

/// One K-step goal pursuit: observation at the segment start, observation
/// after K steps, the goal pursued throughout and the undiscounted sum of the
/// K primitive rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedTransition {
    pub start_observation: Observation,
    pub end_observation: Observation,
    pub goal: GoalVector,
    pub cumulative_reward: f64,
    pub episode: u64,
    pub start_step: u64,
}

#[derive(Clone, Debug)]
pub struct ExtendedBuffer {
    capacity: usize,
    entries: VecDeque<ExtendedTransition>,
}

impl ExtendedBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExtendedTransition> {
        self.entries.iter()
    }

    fn push_unchecked(&mut self, e: ExtendedTransition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    /// Uniform with replacement over stored entries.
    pub fn sample_extended_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
    ) -> Result<Vec<ExtendedTransition>> {
        if batch == 0 {
            return Err(Error::Usage("batch must be positive".into()));
        }
        if batch > self.entries.len() {
            return Err(Error::NotReady(format!(
                "{} extended entries stored, batch of {batch} requested",
                self.entries.len()
            )));
        }
        Ok((0..batch)
            .map(|_| self.entries[rng.gen_range(0..self.entries.len())].clone())
            .collect())
    }
}

/// Both buffers plus the goal interval K that ties them together.
#[derive(Clone, Debug)]
pub struct ReplayStore {
    pub primitive: PrimitiveBuffer,
    pub extended: ExtendedBuffer,
    goal_interval: usize,
}

impl ReplayStore {
    pub fn new(primitive_capacity: usize, extended_capacity: usize, goal_interval: usize) -> Self {
        assert!(goal_interval > 0);
        Self {
            primitive: PrimitiveBuffer::new(primitive_capacity),
            extended: ExtendedBuffer::new(extended_capacity),
            goal_interval,
        }
    }

    pub fn goal_interval(&self) -> usize {
        self.goal_interval
    }

    pub fn push_primitive(&mut self, entry: StoredTransition) -> Result<()> {
        self.primitive.push(entry)
    }

    /// Validates alignment and, when the segment is still in the primitive
    /// buffer, that it lies in one episode and that the reward sum matches.
    pub fn push_extended(&mut self, e: ExtendedTransition) -> Result<()> {
        let k = self.goal_interval as u64;
        if !e.start_step.is_multiple_of(k) {
            return Err(Error::Integrity(format!(
                "extended segment starts at step {}, not a multiple of {k}",
                e.start_step
            )));
        }
        if !e.cumulative_reward.is_finite() {
            return Err(Error::Integrity("non-finite cumulative reward".into()));
        }
        if let Some(first) = self.primitive.find(e.episode, e.start_step) {
            let mut sum = 0.0;
            for offset in 0..self.goal_interval {
                let entry = self.primitive.get(first + offset).filter(|s| {
                    s.episode == e.episode && s.step == e.start_step + offset as u64
                });
                let Some(entry) = entry else {
                    return Err(Error::Integrity(format!(
                        "segment (episode {}, step {}) spans an episode boundary",
                        e.episode, e.start_step
                    )));
                };
                if entry.transition.terminal && offset + 1 < self.goal_interval {
                    return Err(Error::Integrity(format!(
                        "episode {} ends inside the segment starting at step {}",
                        e.episode, e.start_step
                    )));
                }
                sum += entry.transition.reward;
            }
            if sum != e.cumulative_reward {
                return Err(Error::Integrity(format!(
                    "cumulative reward {} does not match segment sum {sum}",
                    e.cumulative_reward
                )));
            }
        }
        self.extended.push_unchecked(e);
        Ok(())
    }

    pub fn sample_sequence_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
        length: usize,
    ) -> Result<Vec<Vec<StoredTransition>>> {
        self.primitive.sample_sequence_batch(rng, batch, length)
    }

    pub fn sample_extended_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
    ) -> Result<Vec<ExtendedTransition>> {
        self.extended.sample_extended_batch(rng, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MazeLayout, SizeClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(tag: f64) -> Observation {
        let mut o = MazeLayout::generate(SizeClass::S, 0).observe((1, 1), 0);
        o.patch[0] = tag;
        o
    }

    fn stored(episode: u64, step: u64, reward: f64, terminal: bool) -> StoredTransition {
        StoredTransition {
            episode,
            step,
            transition: Transition {
                observation: obs(step as f64),
                action: (step % 3) as usize,
                reward,
                next_observation: obs(step as f64 + 1.0),
                terminal,
                truncated: false,
            },
        }
    }

    fn extended(episode: u64, start_step: u64, reward: f64) -> ExtendedTransition {
        ExtendedTransition {
            start_observation: obs(0.0),
            end_observation: obs(8.0),
            goal: GoalVector(vec![0.0; 4]),
            cumulative_reward: reward,
            episode,
            start_step,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = PrimitiveBuffer::new(5);
        for s in 0..6 {
            b.push(stored(0, s, 0.0, false)).unwrap();
        }
        assert_eq!(b.len(), 5);
        assert_eq!(b.get(0).unwrap().step, 1);
        assert_eq!(b.find(0, 0), None);
        assert_eq!(b.find(0, 3), Some(2));
    }

    #[test]
    fn pushed_entry_is_retrievable_exactly() {
        let mut b = PrimitiveBuffer::new(10);
        let e = stored(0, 0, 0.0, false);
        b.push(e.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.sample_sequence_batch(&mut rng, 1, 1).unwrap();
        assert_eq!(batch[0][0], e);
    }

    #[test]
    fn out_of_order_push_rejected() {
        let mut b = PrimitiveBuffer::new(10);
        b.push(stored(1, 0, 0.0, false)).unwrap();
        assert!(b.push(stored(1, 2, 0.0, false)).is_err());
        assert!(b.push(stored(0, 1, 0.0, false)).is_err());
        b.push(stored(2, 0, 0.0, false)).unwrap();
    }

    #[test]
    fn episodes_partition_entries() {
        let mut b = PrimitiveBuffer::new(100);
        for ep in 0..4 {
            for s in 0..(3 + ep) {
                b.push(stored(ep, s, 0.0, false)).unwrap();
            }
        }
        let eps: Vec<u64> = b.iter().map(|e| e.episode).collect();
        assert!(eps.windows(2).all(|w| w[0] <= w[1]));
        for ep in 0..4u64 {
            let steps: Vec<u64> = b.iter().filter(|e| e.episode == ep).map(|e| e.step).collect();
            assert_eq!(steps, (0..3 + ep).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_episode_is_the_only_candidate() {
        let mut b = PrimitiveBuffer::new(100);
        for s in 0..16 {
            b.push(stored(0, s, 0.0, s == 15)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample_sequence_batch(&mut rng, 3, 16).unwrap();
        for seq in batch {
            assert_eq!(seq.iter().map(|e| e.step).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sequences_never_cross_episodes() {
        let mut b = PrimitiveBuffer::new(1000);
        for ep in 0..20 {
            for s in 0..(5 + ep % 7) {
                b.push(stored(ep, s, 0.0, false)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seq in b.sample_sequence_batch(&mut rng, 200, 6).unwrap() {
            assert!(seq.iter().all(|e| e.episode == seq[0].episode));
            assert!(seq.windows(2).all(|w| w[1].step == w[0].step + 1));
        }
    }

    #[test]
    fn not_ready_when_no_run_is_long_enough() {
        let mut b = PrimitiveBuffer::new(100);
        for ep in 0..5 {
            for s in 0..3 {
                b.push(stored(ep, s, 0.0, false)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(b.sample_sequence_batch(&mut rng, 1, 4), Err(Error::NotReady(_))));
        let empty = PrimitiveBuffer::new(4);
        assert!(matches!(empty.sample_sequence_batch(&mut rng, 1, 1), Err(Error::NotReady(_))));
    }

    #[test]
    fn sequence_starts_are_uniform() {
        // two episodes of 10 and 6 steps, windows of 4: 7 + 3 eligible starts
        let mut b = PrimitiveBuffer::new(100);
        for s in 0..10 {
            b.push(stored(0, s, 0.0, false)).unwrap();
        }
        for s in 0..6 {
            b.push(stored(1, s, 0.0, false)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        for seq in b.sample_sequence_batch(&mut rng, draws, 4).unwrap() {
            *counts.entry((seq[0].episode, seq[0].step)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        let p = 0.1;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (k, c) in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{k:?}: {c}");
        }
    }

    #[test]
    fn extended_reward_sum_accepted() {
        let mut store = ReplayStore::new(100, 10, 8);
        for s in 0..8 {
            store.push_primitive(stored(0, s, if s == 7 { 1.0 } else { 0.0 }, s == 7)).unwrap();
        }
        store.push_extended(extended(0, 0, 1.0)).unwrap();
        assert_eq!(store.extended.len(), 1);
        assert!(matches!(store.push_extended(extended(0, 0, 0.0)), Err(Error::Integrity(_))));
    }

    #[test]
    fn misaligned_segment_rejected() {
        let mut store = ReplayStore::new(100, 10, 8);
        assert!(matches!(store.push_extended(extended(0, 3, 0.0)), Err(Error::Integrity(_))));
    }

    #[test]
    fn segment_across_episode_end_rejected() {
        let mut store = ReplayStore::new(100, 10, 8);
        for s in 0..5 {
            store.push_primitive(stored(0, s, 0.0, s == 4)).unwrap();
        }
        for s in 0..8 {
            store.push_primitive(stored(1, s, 0.0, false)).unwrap();
        }
        assert!(matches!(store.push_extended(extended(0, 0, 0.0)), Err(Error::Integrity(_))));
        store.push_extended(extended(1, 0, 0.0)).unwrap();
    }

    #[test]
    fn extended_sampling() {
        let mut buf = ExtendedBuffer::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(buf.sample_extended_batch(&mut rng, 1), Err(Error::NotReady(_))));
        buf.push_unchecked(extended(0, 0, 0.5));
        for _ in 0..10 {
            assert_eq!(buf.sample_extended_batch(&mut rng, 1).unwrap()[0].cumulative_reward, 0.5);
        }
        assert!(matches!(buf.sample_extended_batch(&mut rng, 2), Err(Error::NotReady(_))));
        for i in 1..4 {
            buf.push_unchecked(extended(i, 0, i as f64));
        }
        assert_eq!(buf.len(), 3);
        assert!(buf.iter().all(|e| e.episode > 0));
    }

    #[test]
    fn extended_sampling_is_uniform() {
        let mut buf = ExtendedBuffer::new(10);
        for i in 0..5 {
            buf.push_unchecked(extended(i, 0, i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        let batches = (0..draws / 5).flat_map(|_| buf.sample_extended_batch(&mut rng, 5).unwrap());
        for e in batches {
            counts[e.episode as usize] += 1;
        }
        let p = 0.2;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }
}
