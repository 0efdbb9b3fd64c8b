//! Seeded triplet sampling over a location set.

use crate::locdata::LocationSet;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;

pub const NEGATIVES: usize = 4;

/// Image indices of one training tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: [usize; NEGATIVES],
}

impl Triplet {
    /// Anchor, positive, then negatives.
    pub fn images(&self) -> [usize; 2 + NEGATIVES] {
        let [a, b, c, d] = self.negatives;
        [self.anchor, self.positive, a, b, c, d]
    }

    /// Positive shares the anchor's location, negatives come from distinct other locations.
    pub fn is_valid(&self, set: &LocationSet) -> bool {
        let loc = set.location_of(self.anchor);
        let mut neg_locs: Vec<usize> = self.negatives.iter().map(|&n| set.location_of(n)).collect();
        let all_other = neg_locs.iter().all(|&l| l != loc);
        neg_locs.sort_unstable();
        neg_locs.dedup();
        self.anchor != self.positive && set.location_of(self.positive) == loc && all_other && neg_locs.len() == NEGATIVES
    }
}

/// Endless, reproducible triplet stream. Each epoch visits every eligible
/// anchor (an image whose location has another member) once in shuffled order.
#[derive(Clone, Debug)]
pub struct TripletMiner<'a> {
    set: &'a LocationSet,
    rng: ChaCha8Rng,
    eligible: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> TripletMiner<'a> {
    pub fn new(set: &'a LocationSet, seed: u64) -> Result<Self, TrainError> {
        if set.num_locations() < 1 + NEGATIVES {
            return Err(TrainError::TooFewLocations(set.num_locations()));
        }
        let eligible: Vec<usize> = (0..set.num_images())
            .filter(|&i| set.locations[set.location_of(i)].members.len() >= 2)
            .collect();
        if eligible.is_empty() {
            return Err(TrainError::NoPositives);
        }
        Ok(Self {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
            eligible,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn anchors_per_epoch(&self) -> usize {
        self.eligible.len()
    }

    /// Next triplet and the epoch it belongs to (from 0).
    pub fn next_triplet(&mut self) -> (usize, Triplet) {
        if self.cursor == self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = self.eligible.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let anchor = self.order[self.cursor];
        self.cursor += 1;
        let loc = self.set.location_of(anchor);
        let members = &self.set.locations[loc].members;
        let pick = self.rng.gen_range(0..members.len() - 1);
        let others: Vec<usize> = members.iter().copied().filter(|&m| m != anchor).collect();
        let positive = others[pick];
        let candidates: Vec<usize> = (0..self.set.num_locations()).filter(|&l| l != loc).collect();
        let chosen = index::sample(&mut self.rng, candidates.len(), NEGATIVES);
        let mut negatives = [0usize; NEGATIVES];
        for (slot, ci) in negatives.iter_mut().zip(chosen.iter()) {
            let m = &self.set.locations[candidates[ci]].members;
            *slot = m[self.rng.gen_range(0..m.len())];
        }
        (
            self.epoch,
            Triplet {
                anchor,
                positive,
                negatives,
            },
        )
    }
}

impl Iterator for TripletMiner<'_> {
    type Item = (usize, Triplet);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_triplet())
    }
}

/// Convenience wrapper returning a stream that can be consumed with iterator adapters.
pub fn mine_triplets(set: &LocationSet, seed: u64) -> Result<TripletMiner<'_>, TrainError> {
    TripletMiner::new(set, seed)
}
