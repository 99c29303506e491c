//! Monte-Carlo estimate of the Tensor Sketch inner-product error as a
//! function of the sketch dimension.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::kernels;
use crate::sketch::McbPooler;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub n1: usize,
    pub n2: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: vec![64, 256, 1024],
            trials: 1000,
            n1: 256,
            n2: 256,
            seed: 0,
        }
    }
}

/// Error statistics for one sketch dimension. Deterministic per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub d: usize,
    pub trials: usize,
    pub n1: usize,
    pub n2: usize,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub record: BenchRecord,
    /// Wall-clock pooling throughput; varies between runs.
    pub pools_per_sec: f64,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn norm(x: &[f64]) -> f64 {
    kernels::dot(x, x).sqrt()
}

/// Relative error `|⟨Φ(u1,u2), Φ(v1,v2)⟩ − ⟨u1,v1⟩⟨u2,v2⟩| / (‖u1‖‖v1‖‖u2‖‖v2‖)`
/// for one trial. Vectors depend only on the trial seed, so every `d`
/// sees the same inputs.
fn trial_error(cfg: &BenchConfig, d: usize, trial: usize, elapsed: &mut f64) -> Result<f64> {
    let seed = cfg.seed ^ trial as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u1, v1) = (draw(&mut rng, cfg.n1), draw(&mut rng, cfg.n1));
    let (u2, v2) = (draw(&mut rng, cfg.n2), draw(&mut rng, cfg.n2));
    let pooler = McbPooler::new(cfg.n1, cfg.n2, d, seed)?;
    let start = Instant::now();
    let (pu, _) = pooler.forward(&u1, &u2)?;
    let (pv, _) = pooler.forward(&v1, &v2)?;
    *elapsed += start.elapsed().as_secs_f64();
    let est = kernels::dot(&pu, &pv);
    let exact = kernels::dot(&u1, &v1) * kernels::dot(&u2, &v2);
    Ok((est - exact).abs() / (norm(&u1) * norm(&v1) * norm(&u2) * norm(&v2)))
}

pub fn run_sketch_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.dims.is_empty() || cfg.dims.contains(&0) || cfg.trials == 0 || cfg.n1 == 0 || cfg.n2 == 0 {
        return Err(Error::InvalidArgument("dims, trials, n1 and n2 must be positive".into()));
    }
    let mut rows = Vec::with_capacity(cfg.dims.len());
    for &d in &cfg.dims {
        let mut elapsed = 0.0;
        let errors = (0..cfg.trials)
            .map(|t| trial_error(cfg, d, t, &mut elapsed))
            .collect::<Result<Vec<_>>>()?;
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        rows.push(BenchRow {
            record: BenchRecord {
                d,
                trials: cfg.trials,
                n1: cfg.n1,
                n2: cfg.n2,
                mean_error: mean,
                std_error: var.sqrt(),
            },
            pools_per_sec: 2.0 * n / elapsed.max(1e-12),
        });
    }
    Ok(rows)
}

/// Fixed-width table of the rows.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>8} {:>8} {:>14} {:>14} {:>14}\n", "d", "trials", "mean_rel_err", "std", "pools/s");
    for r in rows {
        let b = &r.record;
        s += &format!(
            "{:>8} {:>8} {:>14.6e} {:>14.6e} {:>14.0}\n",
            b.d, b.trials, b.mean_error, b.std_error, r.pools_per_sec
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_shrinks_with_d_and_is_deterministic() {
        let cfg = BenchConfig {
            dims: vec![16, 256],
            trials: 200,
            n1: 32,
            n2: 32,
            seed: 5,
        };
        let a = run_sketch_bench(&cfg).unwrap();
        let b = run_sketch_bench(&cfg).unwrap();
        assert_eq!(a[0].record, b[0].record);
        assert!(a[1].record.mean_error < a[0].record.mean_error);
        assert!(format_table(&a).lines().count() == 3);
    }

    #[test]
    fn collisions_persist_at_full_dimension() {
        let cfg = BenchConfig {
            dims: vec![16],
            trials: 50,
            n1: 4,
            n2: 4,
            seed: 1,
        };
        let r = &run_sketch_bench(&cfg).unwrap()[0].record;
        assert!(r.mean_error > 0.0 && r.mean_error < 0.5, "{}", r.mean_error);
    }

    #[test]
    fn rejects_bad_flags() {
        let cfg = BenchConfig {
            dims: vec![0],
            ..BenchConfig::default()
        };
        assert!(run_sketch_bench(&cfg).is_err());
    }
}
