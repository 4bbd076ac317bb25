//! Three-dimensional FFTs on cubic arrays, built from one-dimensional `rustfft` passes.

use rustfft::{Fft, FftDirection, FftPlanner};

use crate::algebra::{C64, ZERO};

/// Plans for a cube of side `n` in one direction.
pub struct Fft3 {
    n: usize,
    plan: std::sync::Arc<dyn Fft<f64>>,
}

impl Fft3 {
    pub fn new(n: usize, direction: FftDirection) -> Self {
        let plan = FftPlanner::new().plan_fft(n, direction);
        Self { n, plan }
    }

    pub fn forward(n: usize) -> Self {
        Self::new(n, FftDirection::Forward)
    }

    pub fn inverse(n: usize) -> Self {
        Self::new(n, FftDirection::Inverse)
    }

    /// Transforms `data` (row-major `n³`, last index fastest) in place, unnormalized.
    pub fn process(&self, data: &mut [C64]) {
        let n = self.n;
        assert_eq!(data.len(), n * n * n, "cube size mismatch");
        let mut line = vec![ZERO; n];
        let mut scratch = vec![ZERO; self.plan.get_inplace_scratch_len()];
        for stride in [1, n, n * n] {
            for base in 0..n * n {
                // Enumerate the n² lines along the axis with this stride.
                let (hi, lo) = (base / stride, base % stride);
                let start = hi * stride * n + lo;
                for (k, v) in line.iter_mut().enumerate() {
                    *v = data[start + k * stride];
                }
                self.plan.process_with_scratch(&mut line, &mut scratch);
                for (k, v) in line.iter().enumerate() {
                    data[start + k * stride] = *v;
                }
            }
        }
    }
}

/// Signed frequency index for position `k` of an `n`-point FFT.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_delta() {
        let n = 6;
        let mut d: Vec<C64> = (0..n * n * n).map(|k| C64::new(k as f64, (k % 5) as f64)).collect();
        let orig = d.clone();
        Fft3::forward(n).process(&mut d);
        Fft3::inverse(n).process(&mut d);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a / (n * n * n) as f64 - b).norm() < 1e-10);
        }
        let mut delta = vec![ZERO; n * n * n];
        delta[0] = C64::new(1.0, 0.0);
        Fft3::forward(n).process(&mut delta);
        assert!(delta.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn single_mode_lands_in_one_bin() {
        let n = 8;
        let mut d = vec![ZERO; n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let ph = 2.0 * std::f64::consts::PI * (a as f64 + 2.0 * b as f64 - 3.0 * c as f64) / n as f64;
                    d[(a * n + b) * n + c] = C64::new(ph.cos(), ph.sin());
                }
            }
        }
        Fft3::forward(n).process(&mut d);
        let peak = (1 * n + 2) * n + (n - 3);
        for (k, z) in d.iter().enumerate() {
            let want = if k == peak { (n * n * n) as f64 } else { 0.0 };
            assert!((z.norm() - want).abs() < 1e-9);
        }
        assert_eq!(signed_index(5, 8), -3);
        assert_eq!(signed_index(4, 8), 4);
    }
}
