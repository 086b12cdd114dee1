use rand::seq::SliceRandom;

use super::BatchStrategy;
use crate::rng::{derive_seed, seeded, Rng};
use crate::{Error, Result};

/// A batch as `(domain index, target row)` pairs.
pub type Batch = Vec<(usize, usize)>;

/// Seeded batch schedule over the fitting windows of several domains.
/// Each epoch's batches depend only on the seed and the epoch number.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    windows: Vec<Vec<usize>>,
    batch_size: usize,
    strategy: BatchStrategy,
    seed: u64,
}

impl BatchPlan {
    pub fn new(windows: Vec<Vec<usize>>, batch_size: usize, strategy: BatchStrategy, seed: u64) -> Result<Self> {
        let k = windows.len();
        if k == 0 {
            return Err(Error::Config("no training domains".into()));
        }
        if let Some(e) = windows.iter().position(Vec::is_empty) {
            return Err(Error::Integrity(format!("training domain #{e} has no fitting windows")));
        }
        if batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if strategy == BatchStrategy::StratifiedEqual && batch_size < k {
            return Err(Error::Config(format!(
                "batch_size {batch_size} is smaller than the number of training domains {k}"
            )));
        }
        Ok(Self {
            windows,
            batch_size,
            strategy,
            seed,
        })
    }

    pub fn total_windows(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }

    /// Samples per domain per batch under the stratified strategy.
    pub fn per_domain(&self) -> usize {
        self.batch_size / self.windows.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        match self.strategy {
            BatchStrategy::Proportional => {
                let n = self.total_windows();
                let full = n / self.batch_size;
                let rem = n % self.batch_size;
                if full == 0 || rem >= 2 {
                    full + usize::from(rem > 0)
                } else {
                    full
                }
            }
            BatchStrategy::StratifiedEqual => {
                let per_batch = self.per_domain() * self.windows.len();
                self.total_windows().div_ceil(per_batch)
            }
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = seeded(derive_seed(self.seed, &[epoch as u64]));
        match self.strategy {
            BatchStrategy::Proportional => self.proportional(&mut rng),
            BatchStrategy::StratifiedEqual => self.stratified(&mut rng),
        }
    }

    fn proportional(&self, rng: &mut Rng) -> Vec<Batch> {
        let mut pool: Vec<(usize, usize)> = self
            .windows
            .iter()
            .enumerate()
            .flat_map(|(e, ws)| ws.iter().map(move |&t| (e, t)))
            .collect();
        pool.shuffle(rng);
        let mut batches: Vec<Batch> = pool.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        batches
    }

    fn stratified(&self, rng: &mut Rng) -> Vec<Batch> {
        let k = self.per_domain();
        let nb = self.batches_per_epoch();
        let streams: Vec<Vec<usize>> = self
            .windows
            .iter()
            .map(|ws| {
                let mut out = Vec::with_capacity(nb * k + ws.len());
                while out.len() < nb * k {
                    let mut perm = ws.clone();
                    perm.shuffle(rng);
                    out.extend(perm);
                }
                out
            })
            .collect();
        (0..nb)
            .map(|b| {
                streams
                    .iter()
                    .enumerate()
                    .flat_map(|(e, s)| s[b * k..(b + 1) * k].iter().map(move |&t| (e, t)))
                    .collect()
            })
            .collect()
    }
}
