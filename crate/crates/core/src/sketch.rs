//! Count Sketch projection and Tensor Sketch compact bilinear pooling.
//!
//! `Ψ(v)[h[i]] += s[i]·v[i]` projects `v ∈ R^n` to `R^d`. The compact
//! bilinear pooling of two vectors is the circular convolution of their
//! count sketches, which equals the count sketch of the outer product
//! `v1 ⊗ v2` under the pair hash `(h1[i] + h2[j]) mod d` with sign
//! `s1[i]·s2[j]`, without ever materializing the `n1·n2` outer product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{kernels, ComplexVector, FftPlan, Tensor};
use crate::{Error, Result};

/// Frozen hash and sign tables for one input modality.
///
/// Tables are drawn from `ChaCha8Rng::seed_from_u64(seed)`: for each index
/// `i` in order, `h[i]` is drawn uniformly from `0..d`, then `s[i]` from a
/// fair coin mapped to `{-1, +1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchParams {
    n: usize,
    d: usize,
    h: Vec<u32>,
    s: Vec<i8>,
    seed: u64,
}

pub fn sample_sketch_params(n: usize, d: usize, seed: u64) -> Result<SketchParams> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "sketch needs n ≥ 1 and d ≥ 1, got n={n} d={d}"
        )));
    }
    if d > u32::MAX as usize {
        return Err(Error::Overflow(format!("sketch dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        h.push(rng.gen_range(0..d as u32));
        s.push(if rng.gen::<bool>() { 1 } else { -1 });
    }
    Ok(SketchParams { n, d, h, s, seed })
}

impl SketchParams {
    /// Rebuilds tables read back from storage, validating their ranges.
    pub fn from_tables(d: usize, h: Vec<u32>, s: Vec<i8>, seed: u64) -> Result<Self> {
        if h.is_empty() || d == 0 || h.len() != s.len() {
            return Err(Error::InvalidArgument("inconsistent sketch tables".into()));
        }
        if let Some(&bad) = h.iter().find(|&&x| x as usize >= d) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                limit: d,
            });
        }
        if s.iter().any(|&x| x != 1 && x != -1) {
            return Err(Error::InvalidArgument("sign table entry not ±1".into()));
        }
        Ok(SketchParams {
            n: h.len(),
            d,
            h,
            s,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn hashes(&self) -> &[u32] {
        &self.h
    }

    pub fn signs(&self) -> &[i8] {
        &self.s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for ((&h, &s), &x) in self.h.iter().zip(&self.s).zip(v) {
            out[h as usize] += s as f64 * x;
        }
    }

    /// `Ψᵀ y`: gathers `s[i]·y[h[i]]`.
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.h
            .iter()
            .zip(&self.s)
            .map(|(&h, &s)| s as f64 * y[h as usize])
            .collect()
    }
}

pub fn count_sketch(v: &Tensor, p: &SketchParams) -> Result<Tensor> {
    if v.rank() != 1 || v.len() != p.n {
        return Err(Error::shape(format!(
            "count sketch expects length {}, got {:?}",
            p.n,
            v.shape()
        )));
    }
    let mut out = vec![0.0; p.d];
    p.apply(v.data(), &mut out);
    Tensor::vector(out)
}

/// Seed of the second modality's tables, derived so it never equals the first.
pub fn visual_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Tensor Sketch pooler for one (text, visual) pair of input dimensions.
#[derive(Clone, Debug)]
pub struct McbPooler {
    params_text: SketchParams,
    params_vis: SketchParams,
    normalize: bool,
    plan: FftPlan,
}

/// Intermediates of one forward pass, consumed by [`McbPooler::backward`].
#[derive(Clone, Debug)]
pub struct McbCache {
    spec_text: ComplexVector,
    spec_vis: ComplexVector,
    /// Raw pooled output and its signed square root, kept when normalizing.
    raw: Option<(Vec<f64>, Vec<f64>, f64)>,
}

impl McbPooler {
    pub fn new(n_text: usize, n_vis: usize, d: usize, seed: u64) -> Result<Self> {
        Self::from_params(
            sample_sketch_params(n_text, d, seed)?,
            sample_sketch_params(n_vis, d, visual_seed(seed))?,
        )
    }

    pub fn from_params(params_text: SketchParams, params_vis: SketchParams) -> Result<Self> {
        if params_text.d != params_vis.d {
            return Err(Error::shape(format!(
                "sketch dims differ: {} vs {}",
                params_text.d, params_vis.d
            )));
        }
        let plan = FftPlan::new(params_text.d);
        Ok(McbPooler {
            params_text,
            params_vis,
            normalize: false,
            plan,
        })
    }

    /// Enables signed square root followed by L2 normalization of the output.
    pub fn with_normalization(mut self, on: bool) -> Self {
        self.normalize = on;
        self
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn d(&self) -> usize {
        self.params_text.d
    }

    pub fn n_text(&self) -> usize {
        self.params_text.n
    }

    pub fn n_vis(&self) -> usize {
        self.params_vis.n
    }

    pub fn params_text(&self) -> &SketchParams {
        &self.params_text
    }

    pub fn params_vis(&self) -> &SketchParams {
        &self.params_vis
    }

    fn check_inputs(&self, v_text: &[f64], v_vis: &[f64]) -> Result<()> {
        if v_text.len() != self.params_text.n || v_vis.len() != self.params_vis.n {
            return Err(Error::shape(format!(
                "MCB expects inputs of length {} and {}, got {} and {}",
                self.params_text.n,
                self.params_vis.n,
                v_text.len(),
                v_vis.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, v_text: &[f64], v_vis: &[f64]) -> Result<(Vec<f64>, McbCache)> {
        self.check_inputs(v_text, v_vis)?;
        let d = self.d();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        self.params_text.apply(v_text, &mut a);
        self.params_vis.apply(v_vis, &mut b);
        let (spec_text, spec_vis) = crate::numerics::real_pair_spectra(&self.plan, &a, &b);
        let phi = crate::numerics::inverse_of_product(&self.plan, &spec_text, &spec_vis, false)?;
        if !self.normalize {
            return Ok((
                phi,
                McbCache {
                    spec_text,
                    spec_vis,
                    raw: None,
                },
            ));
        }
        let z: Vec<f64> = phi.iter().map(|&x| x.signum() * x.abs().sqrt()).collect();
        let norm = kernels::dot(&z, &z).sqrt();
        let out = if norm > 0.0 {
            z.iter().map(|v| v / norm).collect()
        } else {
            z.clone()
        };
        Ok((
            out,
            McbCache {
                spec_text,
                spec_vis,
                raw: Some((phi, z, norm)),
            },
        ))
    }

    /// Gradients with respect to both inputs. The hash and sign tables are
    /// constants and receive none.
    pub fn backward(&self, cache: &McbCache, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.d();
        if grad_out.len() != d || cache.spec_text.len() != d {
            return Err(Error::shape("MCB backward: gradient/cache length mismatch"));
        }
        let g: Vec<f64> = match &cache.raw {
            None => grad_out.to_vec(),
            Some((phi, z, norm)) => {
                if *norm == 0.0 {
                    vec![0.0; d]
                } else {
                    let y: Vec<f64> = z.iter().map(|v| v / norm).collect();
                    let inner = kernels::dot(&y, grad_out);
                    phi.iter()
                        .zip(&y)
                        .zip(grad_out)
                        .map(|((&p, &yi), &go)| {
                            if p == 0.0 {
                                0.0
                            } else {
                                (go - yi * inner) / norm / (2.0 * p.abs().sqrt())
                            }
                        })
                        .collect()
                }
            }
        };
        // One complex inverse FFT yields both real correlations:
        // ifft(G·conj(B) + i·G·conj(A)) = corr(g, b) + i·corr(g, a).
        let mut gr = g;
        let mut gi = vec![0.0; d];
        self.plan.forward(&mut gr, &mut gi);
        let (a, b) = (&cache.spec_text, &cache.spec_vis);
        let mut re = vec![0.0; d];
        let mut im = vec![0.0; d];
        for k in 0..d {
            let (xr, xi) = (gr[k], gi[k]);
            // p = G·conj(B), q = G·conj(A)
            let pr = xr * b.re[k] + xi * b.im[k];
            let pi = xi * b.re[k] - xr * b.im[k];
            let qr = xr * a.re[k] + xi * a.im[k];
            let qi = xi * a.re[k] - xr * a.im[k];
            re[k] = pr - qi;
            im[k] = pi + qr;
        }
        self.plan.inverse(&mut re, &mut im);
        Ok((
            self.params_text.apply_transpose(&re),
            self.params_vis.apply_transpose(&im),
        ))
    }
}

/// `Φ(v1, v2)`: compact bilinear pooling of a text-side and a visual-side vector.
pub fn mcb_pool(v1: &Tensor, v2: &Tensor, pooler: &McbPooler) -> Result<Tensor> {
    if v1.rank() != 1 || v2.rank() != 1 {
        return Err(Error::shape("MCB inputs must be rank-1"));
    }
    let (out, _) = pooler.forward(v1.data(), v2.data())?;
    Tensor::vector(out)
}

pub fn mcb_backward(
    grad_out: &Tensor,
    v1: &Tensor,
    v2: &Tensor,
    pooler: &McbPooler,
) -> Result<(Tensor, Tensor)> {
    if grad_out.rank() != 1 || grad_out.len() != pooler.d() {
        return Err(Error::shape(format!(
            "MCB gradient must have length {}",
            pooler.d()
        )));
    }
    let (_, cache) = pooler.forward(v1.data(), v2.data())?;
    let (g1, g2) = pooler.backward(&cache, grad_out.data())?;
    Ok((Tensor::vector(g1)?, Tensor::vector(g2)?))
}

/// Parameter count `n1·n2·d` of an explicit bilinear map onto `R^d`.
pub fn bilinear_param_count(n1: u64, n2: u64, d: u64) -> Result<u64> {
    if n1 == 0 || n2 == 0 || d == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    n1.checked_mul(n2)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Overflow(format!("{n1}·{n2}·{d}")))
}
