use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One training window: sequence `sequence` of dataset `dataset`, centered
/// on frame `t` (neighbors are clamped by [`FrameSequence::window`]).
///
/// [`FrameSequence::window`]: super::FrameSequence::window
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub sequence: usize,
    pub t: usize,
}

/// Round-robin over datasets, switching every `switch_every` draws; each
/// dataset is visited in a fresh seeded permutation per epoch.
#[derive(Clone, Debug)]
pub struct JointSampler {
    frame_counts: Vec<Vec<usize>>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    switch_every: usize,
    active: usize,
    in_block: usize,
    rng: ChaCha8Rng,
}

impl JointSampler {
    /// `frame_counts[d][s]` is the length of sequence `s` in dataset `d`.
    pub fn new(frame_counts: Vec<Vec<usize>>, switch_every: usize, seed: u64) -> Result<Self> {
        if switch_every == 0 {
            return Err(Error::validation("switch_every must be at least 1"));
        }
        if frame_counts.is_empty() {
            return Err(Error::validation("joint sampler needs at least one dataset"));
        }
        for (d, counts) in frame_counts.iter().enumerate() {
            if counts.is_empty() {
                return Err(Error::validation(format!("dataset {d} is empty")));
            }
            if let Some(s) = counts.iter().position(|&n| n == 0) {
                return Err(Error::validation(format!("dataset {d}: sequence {s} has no frames")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = frame_counts
            .iter()
            .map(|c| {
                let mut o: Vec<usize> = (0..c.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(Self {
            cursors: vec![0; frame_counts.len()],
            frame_counts,
            orders,
            switch_every,
            active: 0,
            in_block: 0,
            rng,
        })
    }
}

impl Iterator for JointSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        if self.in_block == self.switch_every {
            self.active = (self.active + 1) % self.frame_counts.len();
            self.in_block = 0;
        }
        self.in_block += 1;
        let d = self.active;
        if self.cursors[d] == self.orders[d].len() {
            self.orders[d].shuffle(&mut self.rng);
            self.cursors[d] = 0;
        }
        let sequence = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        let t = self.rng.gen_range(0..self.frame_counts[d][sequence]);
        Some(Draw {
            dataset: d,
            sequence,
            t,
        })
    }
}
