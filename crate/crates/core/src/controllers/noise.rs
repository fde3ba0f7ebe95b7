//! Gaussian noise with a power-law spectrum, `S(f) ∝ 1/f^exponent`, along
//! the time axis.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Reusable generator for sequences of a fixed length.
#[derive(Clone)]
pub struct ColoredNoise {
    len: usize,
    scale: Vec<f64>,
    sigma: f64,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ColoredNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ColoredNoise").field("len", &self.len).field("sigma", &self.sigma).finish()
    }
}

impl ColoredNoise {
    pub fn new(len: usize, exponent: f64) -> Self {
        assert!(len >= 1, "noise length must be positive");
        let n = len as f64;
        let bins = len / 2 + 1;
        let fmin = 1.0 / n;
        let scale: Vec<f64> = (0..bins).map(|k| (k as f64 / n).max(fmin).powf(-exponent / 2.0)).collect();
        // exact standard deviation of the unnormalized output
        let mut power = scale[0].powi(2);
        for k in 1..(len + 1) / 2 {
            power += 2.0 * scale[k].powi(2);
        }
        if len % 2 == 0 && len > 1 {
            power += scale[bins - 1].powi(2);
        }
        let sigma = (2.0 * power).sqrt() / n;
        let ifft = FftPlanner::new().plan_fft_inverse(len);
        ColoredNoise { len, scale, sigma, ifft }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One unit-variance sequence.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.len;
        if n == 1 {
            return vec![rng.sample(StandardNormal)];
        }
        let bins = self.scale.len();
        let mut spec = vec![Complex::new(0.0, 0.0); n];
        for k in 0..bins {
            let re: f64 = rng.sample::<f64, _>(StandardNormal) * self.scale[k];
            let im: f64 = rng.sample::<f64, _>(StandardNormal) * self.scale[k];
            spec[k] = Complex::new(re, im);
        }
        // real signal: DC and (for even n) Nyquist bins are real
        spec[0] = Complex::new(spec[0].re * std::f64::consts::SQRT_2, 0.0);
        if n % 2 == 0 {
            spec[bins - 1] = Complex::new(spec[bins - 1].re * std::f64::consts::SQRT_2, 0.0);
        }
        for k in 1..(n + 1) / 2 {
            spec[n - k] = spec[k].conj();
        }
        self.ifft.process(&mut spec);
        spec.iter().map(|c| c.re / n as f64 / self.sigma).collect()
    }
}
