//! Corpus-level BLEU-4 without smoothing, on a 0–100 scale.

use std::collections::HashMap;
use std::hash::Hash;

use crate::{Error, Result};

const MAX_N: usize = 4;

/// Clipped n-gram matches and totals summed over a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Modified precision for n-grams of order `n` (1-based); 0 when no
    /// hypothesis n-grams exist.
    pub fn precision(&self, n: usize) -> f64 {
        let k = n - 1;
        if self.totals[k] == 0 {
            0.0
        } else {
            self.matches[k] as f64 / self.totals[k] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=MAX_N {
            let p = self.precision(n);
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_N as f64).exp()
    }

    fn add_pair<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_N {
            if hyp.len() < n {
                continue;
            }
            let mut counts: HashMap<&[T], usize> = HashMap::new();
            for g in reference.windows(n) {
                *counts.entry(g).or_default() += 1;
            }
            for g in hyp.windows(n) {
                if let Some(c) = counts.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        self.matches[n - 1] += 1;
                    }
                }
            }
            self.totals[n - 1] += hyp.len() + 1 - n;
        }
    }
}

pub fn bleu_stats<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add_pair(h, r);
    }
    Ok(stats)
}

/// Geometric mean of modified 1- to 4-gram precisions times the brevity
/// penalty. Any zero precision makes the score 0.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    bleu_stats(hypotheses, references).map(|s| s.score())
}
