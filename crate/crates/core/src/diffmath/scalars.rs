//! Scalar transforms and distributions: symlog, two-hot encoding, diagonal
//! Gaussians.

use rand::Rng;
use rand_distr::StandardNormal;

use super::DiffError;

/// Floor added to softplus-parameterized standard deviations.
pub const STD_FLOOR: f64 = 1e-4;

/// Signed logarithmic squashing: sign(x)·ln(1 + |x|).
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Inverse of [`symlog`]: sign(y)·(e^|y| − 1).
pub fn symexp(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Stddev parameterization shared by every Gaussian head.
pub fn softplus_floor(raw: f64) -> f64 {
    let sp = if raw > 30.0 {
        raw
    } else if raw < -30.0 {
        raw.exp()
    } else {
        raw.exp().ln_1p()
    };
    sp + STD_FLOOR
}

/// Fixed bin grid for two-hot discrete regression, uniformly spaced in
/// symlog space. Encoded/decoded values live in symlog space; callers apply
/// [`symlog`]/[`symexp`] at the boundary.
#[derive(Clone, Debug)]
pub struct ValueBins {
    positions: Vec<f64>,
}

impl ValueBins {
    pub fn symlog_spaced(count: usize, low: f64, high: f64) -> Self {
        assert!(count >= 2 && high > low);
        let step = (high - low) / (count - 1) as f64;
        ValueBins {
            positions: (0..count).map(|i| low + i as f64 * step).collect(),
        }
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Spread a scalar over the two nearest bins so the weighted bin average
/// reproduces it exactly. Values outside the grid clamp to the ends.
pub fn twohot_encode(v: f64, bins: &[f64]) -> Result<Vec<f64>, DiffError> {
    if bins.len() < 2 {
        return Err(DiffError::InvalidArg {
            what: "twohot_encode needs at least 2 bins",
        });
    }
    debug_assert!(bins.windows(2).all(|w| w[0] < w[1]), "bins must be strictly increasing");
    let mut p = vec![0.0; bins.len()];
    let v = v.clamp(bins[0], bins[bins.len() - 1]);
    // partition_point: first index with bins[i] > v; always in [1, len-1] after clamp
    let hi = bins.partition_point(|&b| b <= v).min(bins.len() - 1).max(1);
    let lo = hi - 1;
    let width = bins[hi] - bins[lo];
    let w_hi = ((v - bins[lo]) / width).clamp(0.0, 1.0);
    p[lo] = 1.0 - w_hi;
    p[hi] = w_hi;
    Ok(p)
}

/// Expected bin value under a probability vector.
pub fn twohot_decode(p: &[f64], bins: &[f64]) -> Result<f64, DiffError> {
    if bins.len() < 2 {
        return Err(DiffError::InvalidArg {
            what: "twohot_decode needs at least 2 bins",
        });
    }
    if p.len() != bins.len() {
        return Err(DiffError::DimMismatch {
            what: "twohot_decode probability/bin length mismatch",
        });
    }
    Ok(p.iter().zip(bins).map(|(a, b)| a * b).sum())
}

/// Diagonal Gaussian with strictly positive stddev.
#[derive(Clone, Debug)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Self {
        assert_eq!(mean.len(), stddev.len());
        assert!(stddev.iter().all(|&s| s > 0.0), "stddev must be positive");
        DiagonalGaussian { mean, stddev }
    }

    /// Build from raw (pre-activation) parameters: stddev = softplus(raw) + floor.
    pub fn from_raw(mean: Vec<f64>, raw_std: &[f64]) -> Self {
        let stddev = raw_std.iter().map(|&r| softplus_floor(r)).collect();
        DiagonalGaussian::new(mean, stddev)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let z = (x[i] - self.mean[i]) / self.stddev[i];
            lp += -0.5 * z * z - self.stddev[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.stddev)
            .map(|(&m, &s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps
            })
            .collect()
    }
}

/// KL(q ‖ p) between diagonal Gaussians. Nonnegative; zero iff q = p.
pub fn gaussian_kl(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, DiffError> {
    if q.dim() != p.dim() {
        return Err(DiffError::DimMismatch {
            what: "gaussian_kl dimension mismatch",
        });
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, sq) = (q.mean[i], q.stddev[i]);
        let (mp, sp) = (p.mean[i], p.stddev[i]);
        kl += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symlog_anchors() {
        assert_eq!(symlog(0.0), 0.0);
        assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-12);
        assert!((symlog(-(std::f64::consts::E - 1.0)) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn symlog_roundtrip_large_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = rng.gen_range(-1e4..1e4);
            let y = symexp(symlog(x));
            let rel = (y - x).abs() / x.abs().max(1e-12);
            assert!(rel < 1e-9, "roundtrip {x} -> {y}");
        }
    }

    #[test]
    fn twohot_at_center_is_onehot() {
        let bins = [0.0, 1.0, 2.0, 3.0];
        let p = twohot_encode(2.0, &bins).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn twohot_midpoint_splits_evenly() {
        let bins = [0.0, 1.0, 2.0];
        let p = twohot_encode(0.5, &bins).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn twohot_roundtrip_random() {
        let bins: Vec<f64> = (0..11).map(|i| -2.0 + 0.4 * i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v = rng.gen_range(-2.0..2.0);
            let p = twohot_encode(v, &bins).unwrap();
            assert!(p.iter().filter(|&&x| x != 0.0).count() <= 2);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let back = twohot_decode(&p, &bins).unwrap();
            assert!((back - v).abs() < 1e-9);
        }
    }

    #[test]
    fn twohot_needs_two_bins() {
        assert!(twohot_encode(0.0, &[1.0]).is_err());
        assert!(twohot_decode(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn twohot_clamps_out_of_range() {
        let bins = [-1.0, 0.0, 1.0];
        assert_eq!(twohot_encode(5.0, &bins).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(twohot_encode(-5.0, &bins).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let q = DiagonalGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = DiagonalGaussian::new(vec![1.0], vec![1.0]);
        let p = DiagonalGaussian::new(vec![0.0], vec![1.0]);
        assert!((gaussian_kl(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_dim_mismatch() {
        let q = DiagonalGaussian::new(vec![0.0], vec![1.0]);
        let p = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(gaussian_kl(&q, &p).is_err());
    }

    #[test]
    fn gaussian_log_prob_integrates_to_one_1d() {
        // Quadrature over a wide interval for a 1-d instance.
        let d = DiagonalGaussian::new(vec![0.4], vec![0.7]);
        let n = 20001;
        let (a, b) = (-10.0, 10.0);
        let h = (b - a) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += w * d.log_prob(&[x]).exp();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }
}
