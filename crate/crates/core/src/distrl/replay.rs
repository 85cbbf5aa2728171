//! Uniform replay memory with per-transition bootstrap masks.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::nn::Matrix;

use super::critic::ACTION_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Squashed action in [−1, 1]².
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Matrix,
    pub action: Matrix,
    pub reward: Vec<f64>,
    pub next_obs: Matrix,
    pub done: Vec<f64>,
    /// `mask[n][b]` in {0, 1}.
    pub mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let b = ts.len();
        let dim = ts.first().map_or(0, |t| t.obs.len());
        let members = ts.first().map_or(0, |t| t.mask.len());
        let mut obs = Matrix::zeros(b, dim);
        let mut next_obs = Matrix::zeros(b, dim);
        let mut action = Matrix::zeros(b, ACTION_DIM);
        let mut mask = vec![vec![0.0; b]; members];
        for (i, t) in ts.iter().enumerate() {
            check_dim("Batch obs", dim, t.obs.len())?;
            check_dim("Batch next_obs", dim, t.next_obs.len())?;
            check_dim("Batch mask", members, t.mask.len())?;
            obs.row_mut(i).copy_from_slice(&t.obs);
            next_obs.row_mut(i).copy_from_slice(&t.next_obs);
            action.row_mut(i).copy_from_slice(&t.action);
            for (n, &m) in t.mask.iter().enumerate() {
                mask[n][i] = if m { 1.0 } else { 0.0 };
            }
        }
        Ok(Self {
            obs,
            action,
            reward: ts.iter().map(|t| t.reward).collect(),
            next_obs,
            done: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
            mask,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    members: usize,
    mask_prob: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, members: usize, mask_prob: f64) -> Self {
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
            members,
            mask_prob,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Draws the bootstrap mask once; a single-member ensemble always trains on everything.
    pub fn draw_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        if self.members == 1 {
            return vec![true];
        }
        (0..self.members).map(|_| rng.gen_bool(self.mask_prob)).collect()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.mask.len() != self.members {
            return Err(Error::Contract("mask length differs from ensemble size".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let ts: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Batch::from_transitions(&ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(r: f64) -> Transition {
        Transition {
            obs: vec![r],
            action: [0.0, 0.0],
            reward: r,
            next_obs: vec![r],
            done: false,
            mask: vec![true, false],
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 2, 0.9);
        for i in 0..5 {
            b.push(t(i as f64)).unwrap();
        }
        let rs: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        assert_eq!(rs, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn masks_follow_bernoulli_mean() {
        let b = ReplayBuffer::new(10, 5, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let ones: usize = (0..n).map(|_| b.draw_mask(&mut rng).iter().filter(|&&m| m).count()).sum();
        let mean = ones as f64 / (5 * n) as f64;
        assert!((mean - 0.9).abs() < 0.01);
    }

    #[test]
    fn batch_layout() {
        let mut b = ReplayBuffer::new(3, 2, 0.9);
        b.push(t(1.0)).unwrap();
        b.push(t(2.0)).unwrap();
        let batch = b.batch(&[1, 0]).unwrap();
        assert_eq!(batch.reward, vec![2.0, 1.0]);
        assert_eq!(batch.mask, vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
    }
}
