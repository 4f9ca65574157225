//! Class-balanced video stream: a fair coin picks the class, then the next
//! video is drawn from that class's queue, reshuffled on every pass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Label, Manifest, Split};
use crate::error::{CoreError, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug)]
struct Queue {
    members: Vec<usize>,
    order: Vec<usize>,
}

impl Queue {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.order.is_empty() {
            self.order = self.members.clone();
            self.order.shuffle(rng);
        }
        self.order.pop().expect("queue members are non-empty")
    }
}

#[derive(Clone, Debug)]
pub struct BalancedSampler {
    rng: ChaCha8Rng,
    real: Queue,
    fake: Queue,
}

impl BalancedSampler {
    /// `labels[i]` is the class of item `i`; draws yield item indices.
    pub fn new(labels: &[Label], seed: u64) -> Result<Self> {
        let pick = |want: Label| Queue { members: (0..labels.len()).filter(|&i| labels[i] == want).collect(), order: Vec::new() };
        let (real, fake) = (pick(Label::Real), pick(Label::Fake));
        if real.members.is_empty() || fake.members.is_empty() {
            return Err(CoreError::data(format!(
                "balanced sampling needs both classes ({} real, {} fake)",
                real.members.len(),
                fake.members.len()
            )));
        }
        Ok(BalancedSampler { rng: rng_for(seed, "balanced-sampler"), real, fake })
    }

    /// Sampler over the videos of `split`, yielding indices into
    /// `manifest.records()`.
    pub fn for_split(manifest: &Manifest, split: Split, seed: u64) -> Result<(Self, Vec<usize>)> {
        let ids: Vec<usize> = (0..manifest.records().len()).filter(|&i| manifest.records()[i].split == split).collect();
        if ids.is_empty() {
            return Err(CoreError::data(format!("split `{split}` is empty")));
        }
        let labels: Vec<Label> = ids.iter().map(|&i| manifest.records()[i].label).collect();
        let mut s = Self::new(&labels, seed)?;
        s.remap(&ids);
        Ok((s, ids))
    }

    fn remap(&mut self, ids: &[usize]) {
        for q in [&mut self.real, &mut self.fake] {
            q.members = q.members.iter().map(|&i| ids[i]).collect();
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.rng.random_bool(0.5) {
            self.fake.next(&mut self.rng)
        } else {
            self.real.next(&mut self.rng)
        }
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(real: usize, fake: usize) -> Vec<Label> {
        std::iter::repeat_n(Label::Real, real).chain(std::iter::repeat_n(Label::Fake, fake)).collect()
    }

    #[test]
    fn skewed_split_is_balanced() {
        let l = labels(28, 100);
        let s = BalancedSampler::new(&l, 7).unwrap();
        let real = s.take(10_000).filter(|&i| l[i] == Label::Real).count();
        let frac = real as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn every_video_is_covered() {
        let l = labels(9, 31);
        let mut seen = vec![false; l.len()];
        for i in BalancedSampler::new(&l, 1).unwrap().take(50 * l.len()) {
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn balanced_split_is_uniform() {
        let l = labels(5, 5);
        let mut counts = vec![0usize; 10];
        for i in BalancedSampler::new(&l, 3).unwrap().take(10_000) {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(BalancedSampler::new(&labels(0, 4), 0).is_err());
        assert!(BalancedSampler::new(&labels(3, 0), 0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let l = labels(3, 8);
        let a: Vec<usize> = BalancedSampler::new(&l, 11).unwrap().take(200).collect();
        let b: Vec<usize> = BalancedSampler::new(&l, 11).unwrap().take(200).collect();
        assert_eq!(a, b);
    }
}
