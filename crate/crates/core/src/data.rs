//! Token batches and the seeded synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// `rows × seq` next-token prediction batch, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(rows: usize, seq: usize, inputs: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if rows == 0 || seq == 0 {
            return Err(config_err("batch must have at least one row and one position"));
        }
        if inputs.len() != rows * seq || targets.len() != rows * seq {
            return Err(config_err(format!(
                "batch {rows}x{seq} needs {} inputs and targets, got {} and {}",
                rows * seq,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Batch { rows, seq, inputs, targets })
    }

    /// Builds inputs/targets from `rows` sequences of `seq + 1` tokens.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let rows = seqs.len();
        let len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if len < 2 || seqs.iter().any(|s| s.len() != len) {
            return Err(config_err("sequences must share a length of at least 2"));
        }
        let mut inputs = Vec::with_capacity(rows * (len - 1));
        let mut targets = Vec::with_capacity(rows * (len - 1));
        for s in seqs {
            inputs.extend_from_slice(&s[..len - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        Batch::new(rows, len - 1, inputs, targets)
    }

    /// Splits rows into `parts` equal microbatches, in row order.
    pub fn split(&self, parts: usize) -> Result<Vec<Batch>> {
        if parts == 0 || !self.rows.is_multiple_of(parts) {
            return Err(config_err(format!(
                "{} rows do not divide into {parts} microbatches",
                self.rows
            )));
        }
        let per = self.rows / parts;
        let n = per * self.seq;
        Ok((0..parts)
            .map(|p| Batch {
                rows: per,
                seq: self.seq,
                inputs: self.inputs[p * n..(p + 1) * n].to_vec(),
                targets: self.targets[p * n..(p + 1) * n].to_vec(),
            })
            .collect())
    }

    /// Returns the batch with rows reordered: row `i` of the result is row
    /// `order[i]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(self.inputs.len());
        let mut targets = Vec::with_capacity(self.targets.len());
        for &r in order {
            inputs.extend_from_slice(&self.inputs[r * self.seq..(r + 1) * self.seq]);
            targets.extend_from_slice(&self.targets[r * self.seq..(r + 1) * self.seq]);
        }
        Batch { rows: self.rows, seq: self.seq, inputs, targets }
    }
}

/// Seeded order-2 Markov chain over `vocab` symbols.
///
/// Each context `(a, b)` has `branching` candidate successors with
/// geometrically decaying probabilities, all derived from the seed, so the
/// corpus needs no storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovCorpus {
    pub vocab: usize,
    pub seed: u64,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

fn default_branching() -> usize {
    4
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl MarkovCorpus {
    pub fn new(vocab: usize, seed: u64) -> Self {
        MarkovCorpus { vocab, seed, branching: default_branching() }
    }

    fn successor(&self, a: usize, b: usize, slot: usize) -> usize {
        let key = self.seed ^ ((a as u64) << 40) ^ ((b as u64) << 16) ^ slot as u64;
        (mix(key) % self.vocab as u64) as usize
    }

    /// Samples the token after context `(a, b)`.
    pub fn next<R: Rng + ?Sized>(&self, a: usize, b: usize, rng: &mut R) -> usize {
        // P(slot k) ∝ 2^-k
        let u: f64 = rng.random();
        let total: f64 = (0..self.branching).map(|k| 0.5f64.powi(k as i32)).sum();
        let mut acc = 0.0;
        for k in 0..self.branching {
            acc += 0.5f64.powi(k as i32) / total;
            if u < acc {
                return self.successor(a, b, k);
            }
        }
        self.successor(a, b, self.branching - 1)
    }

    pub fn sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut s = Vec::with_capacity(len);
        s.push(rng.random_range(0..self.vocab));
        if len > 1 {
            s.push(rng.random_range(0..self.vocab));
        }
        while s.len() < len {
            let n = self.next(s[s.len() - 2], s[s.len() - 1], rng);
            s.push(n);
        }
        s.truncate(len);
        s
    }

    /// Deterministic training batch for `step`.
    pub fn batch(&self, step: u64, rows: usize, seq: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed ^ mix(step)));
        let seqs: Vec<Vec<usize>> = (0..rows).map(|_| self.sequence(seq + 1, &mut rng)).collect();
        Batch::from_sequences(&seqs)
    }
}

/// Uniformly random batch, for tests that only need valid token ids.
pub fn random_batch(rows: usize, seq: usize, vocab: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> =
        (0..rows).map(|_| (0..=seq).map(|_| rng.random_range(0..vocab)).collect()).collect();
    Batch::from_sequences(&seqs).expect("well-formed sequences")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_sequences() {
        let b = random_batch(4, 3, 10, 1);
        let parts = b.split(2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].rows, 2);
        assert_eq!([parts[0].inputs.clone(), parts[1].inputs.clone()].concat(), b.inputs);
        assert!(b.split(3).is_err());
        // targets are inputs shifted by one
        assert_eq!(b.inputs[1], b.targets[0]);
    }

    #[test]
    fn corpus_is_deterministic() {
        let c = MarkovCorpus::new(32, 9);
        assert_eq!(c.batch(3, 2, 8).unwrap(), c.batch(3, 2, 8).unwrap());
        assert_ne!(c.batch(3, 2, 8).unwrap(), c.batch(4, 2, 8).unwrap());
        let b = c.batch(0, 2, 8).unwrap();
        assert!(b.inputs.iter().all(|&t| t < 32));
    }
}
