//! Complex FFT of arbitrary length.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform.
//! Every other length goes through Bluestein's chirp-z algorithm, which
//! rewrites the DFT as a circular convolution of power-of-two length
//! `m >= 2n - 1` and evaluates it with the radix-2 path.

use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone)]
struct Radix2 {
    n: usize,
    /// `exp(-2πik/n)` for `k < n/2`, stored as (re, im).
    twiddles: Vec<(f64, f64)>,
    bitrev: Vec<u32>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let bitrev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * PI * k as f64 / n as f64;
                (angle.cos(), angle.sin())
            })
            .collect();
        Radix2 { n, twiddles, bitrev }
    }

    /// In-place forward transform.
    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i] as usize;
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = self.twiddles[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

#[derive(Debug, Clone)]
struct Bluestein {
    n: usize,
    inner: Radix2,
    /// `exp(-πik²/n)` for `k < n`.
    chirp: Vec<(f64, f64)>,
    /// FFT of the conjugate chirp laid out circularly over length `m`.
    kernel_re: Vec<f64>,
    kernel_im: Vec<f64>,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // k² mod 2n keeps the angle argument small for large n.
        let modulus = 2 * n as u128;
        let chirp: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let k2 = ((k as u128 * k as u128) % modulus) as f64;
                let angle = -PI * k2 / n as f64;
                (angle.cos(), angle.sin())
            })
            .collect();
        let mut kernel_re = vec![0.0; m];
        let mut kernel_im = vec![0.0; m];
        kernel_re[0] = chirp[0].0;
        kernel_im[0] = -chirp[0].1;
        for k in 1..n {
            kernel_re[k] = chirp[k].0;
            kernel_im[k] = -chirp[k].1;
            kernel_re[m - k] = chirp[k].0;
            kernel_im[m - k] = -chirp[k].1;
        }
        inner.forward(&mut kernel_re, &mut kernel_im);
        Bluestein {
            n,
            inner,
            chirp,
            kernel_re,
            kernel_im,
        }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let m = self.inner.n;
        let mut ar = vec![0.0; m];
        let mut ai = vec![0.0; m];
        for k in 0..n {
            let (cr, ci) = self.chirp[k];
            ar[k] = re[k] * cr - im[k] * ci;
            ai[k] = re[k] * ci + im[k] * cr;
        }
        self.inner.forward(&mut ar, &mut ai);
        for k in 0..m {
            let (xr, xi) = (ar[k], ai[k]);
            let (kr, ki) = (self.kernel_re[k], self.kernel_im[k]);
            ar[k] = xr * kr - xi * ki;
            ai[k] = xr * ki + xi * kr;
        }
        // inverse of length m through the conjugation identity
        for v in ai.iter_mut() {
            *v = -*v;
        }
        self.inner.forward(&mut ar, &mut ai);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            let (yr, yi) = (ar[k] * scale, -ai[k] * scale);
            let (cr, ci) = self.chirp[k];
            re[k] = yr * cr - yi * ci;
            im[k] = yr * ci + yi * cr;
        }
    }
}

#[derive(Debug, Clone)]
enum Algorithm {
    Identity,
    Radix2(Radix2),
    Bluestein(Bluestein),
}

/// A precomputed transform for one length. Cheap to clone and share.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    algorithm: Arc<Algorithm>,
}

impl FftPlan {
    /// Panics if `n == 0`; the public wrappers reject empty input first.
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let algorithm = if n == 1 {
            Algorithm::Identity
        } else if n.is_power_of_two() {
            Algorithm::Radix2(Radix2::new(n))
        } else {
            Algorithm::Bluestein(Bluestein::new(n))
        };
        FftPlan {
            n,
            algorithm: Arc::new(algorithm),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unnormalized forward DFT, `X[k] = Σ_j x[j]·exp(-2πi jk/n)`, in place.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        assert_eq!(re.len(), self.n);
        assert_eq!(im.len(), self.n);
        match self.algorithm.as_ref() {
            Algorithm::Identity => {}
            Algorithm::Radix2(p) => p.forward(re, im),
            Algorithm::Bluestein(p) => p.forward(re, im),
        }
    }

    /// Inverse DFT with `1/n` normalization, in place.
    pub fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.forward(re, im);
        let scale = 1.0 / self.n as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= -scale;
        }
    }
}
