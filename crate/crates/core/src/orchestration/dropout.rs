//! Bounded random walk over the number of connected sites.
//!
//! At full strength a site drops with probability 1/2; at the floor
//! (`N_total − N_max`) one rejoins with probability 1/2; in between drop,
//! rejoin and no change each have probability 1/3. Which site moves is
//! chosen uniformly among the eligible ones.

use std::collections::BTreeSet;

use rand::Rng;

use super::config::DropoutMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutState {
    sites: Vec<u64>,
    n_max: usize,
    dropped: BTreeSet<u64>,
    mode: DropoutMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Unchanged,
    Dropped(u64),
    Rejoined(u64),
}

impl DropoutState {
    /// All `sites` start connected. `n_max` is clamped to the site count.
    pub fn new(mut sites: Vec<u64>, n_max: usize, mode: DropoutMode) -> Self {
        sites.sort_unstable();
        sites.dedup();
        let n_max = n_max.min(sites.len());
        Self { sites, n_max, dropped: BTreeSet::new(), mode }
    }

    pub fn n_total(&self) -> usize {
        self.sites.len()
    }

    pub fn n_current(&self) -> usize {
        self.sites.len() - self.dropped.len()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn mode(&self) -> DropoutMode {
        self.mode
    }

    pub fn dropped(&self) -> &BTreeSet<u64> {
        &self.dropped
    }

    pub fn is_dropped(&self, site: u64) -> bool {
        self.dropped.contains(&site)
    }

    /// Connected sites in ascending id order.
    pub fn active(&self) -> Vec<u64> {
        self.sites.iter().copied().filter(|s| !self.dropped.contains(s)).collect()
    }

    /// Advances the chain by one round.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Transition {
        if self.n_max == 0 {
            return Transition::Unchanged;
        }
        let at_top = self.n_current() == self.n_total();
        let at_floor = self.n_current() == self.n_total() - self.n_max;
        let (drop, rejoin) = if at_top {
            (rng.random_range(0..2) == 0, false)
        } else if at_floor {
            (false, rng.random_range(0..2) == 0)
        } else {
            match rng.random_range(0..3) {
                0 => (true, false),
                1 => (false, true),
                _ => (false, false),
            }
        };
        if drop {
            let active = self.active();
            let site = active[rng.random_range(0..active.len())];
            self.dropped.insert(site);
            Transition::Dropped(site)
        } else if rejoin {
            let site = *self
                .dropped
                .iter()
                .nth(rng.random_range(0..self.dropped.len()))
                .expect("floor implies a dropped site");
            self.dropped.remove(&site);
            Transition::Rejoined(site)
        } else {
            Transition::Unchanged
        }
    }
}

/// Functional form of [`DropoutState::advance`].
pub fn dropout_step<R: Rng + ?Sized>(state: &DropoutState, rng: &mut R) -> DropoutState {
    let mut next = state.clone();
    next.advance(rng);
    next
}
