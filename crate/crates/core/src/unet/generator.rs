use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{Dihedral, Patch};

/// Pool of augmented patches that is partially regenerated every epoch.
#[derive(Debug, Clone)]
pub struct ContinuousGenerator {
    sources: Vec<Patch>,
    pool: Vec<Patch>,
    target_count: usize,
    refresh_prob: f64,
    rng: ChaCha8Rng,
}

impl ContinuousGenerator {
    pub fn new(sources: Vec<Patch>, target_count: usize, refresh_prob: f64, seed: u64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Empty("generator needs at least one source patch".into()));
        }
        if target_count == 0 {
            return Err(Error::InvalidArgument("target_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&refresh_prob) {
            return Err(Error::InvalidArgument(format!("refresh_prob {refresh_prob} outside [0, 1]")));
        }
        Ok(ContinuousGenerator {
            sources,
            pool: Vec::new(),
            target_count,
            refresh_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn fresh(&mut self) -> Patch {
        let i = self.rng.random_range(0..self.sources.len());
        Dihedral::random(&mut self.rng).apply_patch(&self.sources[i])
    }

    pub fn pool(&self) -> &[Patch] {
        &self.pool
    }

    pub fn sources(&self) -> &[Patch] {
        &self.sources
    }

    /// Fills or refreshes the pool, then returns a shuffled partition of
    /// pool indices into batches (the last one may be short).
    pub fn next_epoch(&mut self, batch_size: usize) -> Vec<Vec<usize>> {
        if self.pool.is_empty() {
            self.pool = (0..self.target_count).map(|_| self.fresh()).collect();
        } else {
            for i in 0..self.pool.len() {
                if self.rng.random_bool(self.refresh_prob) {
                    self.pool[i] = self.fresh();
                }
            }
        }
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::image_io::{GrayImage, Scale, PATCH_SIZE};

    fn patch(v: f32) -> Patch {
        let g = Grid::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| v + (x * 2 + y) as f32 * 1e-3);
        Patch::new(GrayImage::new(g, Scale::default()), None).unwrap()
    }

    #[test]
    fn pool_size_is_target() {
        let mut g = ContinuousGenerator::new(vec![patch(0.0), patch(1.0)], 37, 0.25, 1).unwrap();
        let batches = g.next_epoch(8);
        assert_eq!(g.pool().len(), 37);
        assert_eq!(batches.len(), 5);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn refresh_zero_keeps_pool() {
        let mut g = ContinuousGenerator::new(vec![patch(0.0), patch(1.0), patch(2.0)], 12, 0.0, 3).unwrap();
        g.next_epoch(4);
        let first = g.pool().to_vec();
        g.next_epoch(4);
        assert_eq!(g.pool(), &first[..]);
    }

    #[test]
    fn refresh_one_regenerates_every_slot() {
        let sources: Vec<Patch> = (0..50).map(|i| patch(i as f32)).collect();
        let mut g = ContinuousGenerator::new(sources, 40, 1.0, 5).unwrap();
        g.next_epoch(4);
        let first = g.pool().to_vec();
        g.next_epoch(4);
        let same = first.iter().zip(g.pool()).filter(|(a, b)| a == b).count();
        // a slot can only repeat if the same source and transform are redrawn
        assert!(same < 4, "{same} slots unchanged");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(ContinuousGenerator::new(vec![], 4, 0.5, 0).is_err());
        assert!(ContinuousGenerator::new(vec![patch(0.0)], 4, 1.5, 0).is_err());
    }
}
