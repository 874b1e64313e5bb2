//! Rank-K Itakura-Saito NMF noise variance model.
//!
//! The noise STFT coefficients are modelled as `n_ft ~ N_c(0, (WH)_ft)`; the
//! multiplicative updates here decrease `Σ d_IS(V, WH)` for a nonnegative
//! target `V`.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Lower bound applied to every entry of `W` and `H` after an update.
pub const EPS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NmfParams {
    /// `F × K` spectral templates.
    pub w: Array2<f64>,
    /// `K × N` activations.
    pub h: Array2<f64>,
}

/// Itakura-Saito divergence `x/y − log(x/y) − 1`.
pub fn is_divergence(x: f64, y: f64) -> Result<f64> {
    if !(x > 0.0 && y > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "IS divergence needs positive arguments, got ({x}, {y})"
        )));
    }
    Ok(is_div_unchecked(x, y))
}

#[inline]
pub(crate) fn is_div_unchecked(x: f64, y: f64) -> f64 {
    let r = x / y;
    r - r.ln() - 1.0
}

/// `Σ_ft d_IS(V_ft, model_ft)`.
pub fn is_cost(v: &Array2<f64>, model: &Array2<f64>) -> f64 {
    Zip::from(v)
        .and(model)
        .fold(0.0, |acc, &a, &b| acc + is_div_unchecked(a, b))
}

impl NmfParams {
    pub fn new(w: Array2<f64>, h: Array2<f64>) -> Result<Self> {
        if w.ncols() != h.nrows() {
            return Err(Error::DimensionMismatch {
                what: "NMF rank (W columns vs H rows)",
                expected: w.ncols(),
                got: h.nrows(),
            });
        }
        if w.iter().chain(h.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "NMF factors must be finite and strictly positive".into(),
            ));
        }
        Ok(Self { w, h })
    }

    pub fn n_freqs(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_frames(&self) -> usize {
        self.h.ncols()
    }

    /// The noise variance model `WH`.
    pub fn variance(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    fn check_target(&self, v: &Array2<f64>) -> Result<()> {
        if v.nrows() != self.n_freqs() {
            return Err(Error::DimensionMismatch {
                what: "NMF target rows",
                expected: self.n_freqs(),
                got: v.nrows(),
            });
        }
        if v.ncols() != self.n_frames() {
            return Err(Error::DimensionMismatch {
                what: "NMF target columns",
                expected: self.n_frames(),
                got: v.ncols(),
            });
        }
        Ok(())
    }

    /// `H ← H ⊙ (Wᵀ num) / (Wᵀ den)`, floored at [`EPS_FLOOR`].
    pub(crate) fn scale_h(&mut self, num: &Array2<f64>, den: &Array2<f64>) {
        let wt = self.w.t();
        let n = wt.dot(num);
        let d = wt.dot(den);
        Zip::from(&mut self.h)
            .and(&n)
            .and(&d)
            .for_each(|h, &n, &d| *h = (*h * n / d).max(EPS_FLOOR));
    }

    /// `W ← W ⊙ (num Hᵀ) / (den Hᵀ)`, floored at [`EPS_FLOOR`].
    pub(crate) fn scale_w(&mut self, num: &Array2<f64>, den: &Array2<f64>) {
        let ht = self.h.t();
        let n = num.dot(&ht);
        let d = den.dot(&ht);
        Zip::from(&mut self.w)
            .and(&n)
            .and(&d)
            .for_each(|w, &n, &d| *w = (*w * n / d).max(EPS_FLOOR));
    }

    /// In-place IS-NMF update of `H` towards `V`.
    pub fn update_h_in_place(&mut self, v: &Array2<f64>) -> Result<()> {
        self.check_target(v)?;
        let (num, den) = is_ratio_terms(v, &self.variance());
        self.scale_h(&num, &den);
        Ok(())
    }

    /// In-place IS-NMF update of `W` towards `V`.
    pub fn update_w_in_place(&mut self, v: &Array2<f64>) -> Result<()> {
        self.check_target(v)?;
        let (num, den) = is_ratio_terms(v, &self.variance());
        self.scale_w(&num, &den);
        Ok(())
    }
}

/// `((WH)^-2 ⊙ V, (WH)^-1)`.
fn is_ratio_terms(v: &Array2<f64>, wh: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let den = wh.mapv(f64::recip);
    let num = Zip::from(v).and(&den).map_collect(|&v, &r| v * r * r);
    (num, den)
}

/// One multiplicative update of `H`; returns the new parameters.
pub fn update_h(p: &NmfParams, v: &Array2<f64>) -> Result<NmfParams> {
    let mut out = p.clone();
    out.update_h_in_place(v)?;
    Ok(out)
}

/// One multiplicative update of `W`; returns the new parameters.
pub fn update_w(p: &NmfParams, v: &Array2<f64>) -> Result<NmfParams> {
    let mut out = p.clone();
    out.update_w_in_place(v)?;
    Ok(out)
}

/// Uniform `[0.1, 1.1)` initialisation, deterministic in `seed`.
pub fn init_nmf(n_freqs: usize, rank: usize, n_frames: usize, seed: u64) -> Result<NmfParams> {
    if n_freqs == 0 || rank == 0 || n_frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "NMF shape must be positive, got F={n_freqs} K={rank} N={n_frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((n_freqs, rank), || rng.random_range(0.1..1.1));
    let h = Array2::from_shape_simple_fn((rank, n_frames), || rng.random_range(0.1..1.1));
    Ok(NmfParams { w, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight elementwise evaluation, independent of `is_cost`.
    fn cost_oracle(v: &Array2<f64>, p: &NmfParams) -> f64 {
        let mut total = 0.0;
        for f in 0..v.nrows() {
            for t in 0..v.ncols() {
                let mut model = 0.0;
                for k in 0..p.rank() {
                    model += p.w[[f, k]] * p.h[[k, t]];
                }
                total += v[[f, t]] / model - (v[[f, t]] / model).ln() - 1.0;
            }
        }
        total
    }

    fn random_target(f: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((f, n), || rng.random_range(0.01..5.0))
    }

    #[test]
    fn divergence_values() {
        assert_eq!(is_divergence(1.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(is_divergence(2.0, 1.0).unwrap(), 0.306_852_819_440_054_7, epsilon = 1e-12);
        assert_relative_eq!(is_divergence(1.0, 2.0).unwrap(), 0.193_147_180_559_945_3, epsilon = 1e-12);
        assert!(is_divergence(0.0, 1.0).is_err());
        assert!(is_divergence(1.0, -1.0).is_err());
    }

    #[test]
    fn fixed_point_when_target_is_model() {
        let p = init_nmf(6, 3, 5, 11).unwrap();
        let v = p.variance();
        let ph = update_h(&p, &v).unwrap();
        let pw = update_w(&p, &v).unwrap();
        for (a, b) in p.h.iter().zip(ph.h.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        for (a, b) in p.w.iter().zip(pw.w.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn small_instance_cost_decreases() {
        let v = random_target(4, 3, 2);
        let p = init_nmf(4, 2, 3, 3).unwrap();
        let before = cost_oracle(&v, &p);
        let p = update_h(&p, &v).unwrap();
        let mid = cost_oracle(&v, &p);
        let p = update_w(&p, &v).unwrap();
        let after = cost_oracle(&v, &p);
        assert!(mid <= before);
        assert!(after <= mid);
    }

    #[test]
    fn rescaling_leaves_cost_invariant() {
        let v = random_target(5, 4, 8);
        let p = init_nmf(5, 2, 4, 9).unwrap();
        let alpha = 3.7;
        let q = NmfParams {
            w: &p.w * alpha,
            h: &p.h / alpha,
        };
        assert_relative_eq!(cost_oracle(&v, &p), cost_oracle(&v, &q), max_relative = 1e-12);
    }

    #[test]
    fn scalar_w_update_reaches_optimum() {
        let p = NmfParams::new(Array2::from_elem((1, 1), 0.7), Array2::from_elem((1, 1), 1.9)).unwrap();
        let v = Array2::from_elem((1, 1), 4.2);
        let q = update_w(&p, &v).unwrap();
        assert_relative_eq!(q.w[[0, 0]], 4.2 / 1.9, max_relative = 1e-14);
        assert!(is_cost(&v, &q.variance()) < 1e-14);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_nmf(10, 3, 7, 42).unwrap();
        let b = init_nmf(10, 3, 7, 42).unwrap();
        let c = init_nmf(10, 3, 7, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.w.iter().chain(a.h.iter()).all(|&x| (0.1..1.1).contains(&x)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_nmf(4, 2, 3, 1).unwrap();
        assert!(update_h(&p, &random_target(4, 4, 1)).is_err());
        assert!(update_w(&p, &random_target(5, 3, 1)).is_err());
        assert!(init_nmf(0, 1, 1, 0).is_err());
    }

    #[test]
    fn floor_keeps_entries_positive() {
        let mut v = random_target(4, 3, 5);
        v.column_mut(1).fill(1e-300);
        let mut p = init_nmf(4, 2, 3, 6).unwrap();
        for _ in 0..200 {
            p.update_h_in_place(&v).unwrap();
            p.update_w_in_place(&v).unwrap();
        }
        assert!(p.w.iter().chain(p.h.iter()).all(|&x| x >= EPS_FLOOR));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn updates_never_increase_cost(seed in 0u64..10_000, k in 1usize..5) {
            let v = random_target(7, 6, seed);
            let mut p = init_nmf(7, k, 6, seed ^ 0xabc).unwrap();
            let mut prev = is_cost(&v, &p.variance());
            for _ in 0..20 {
                p.update_h_in_place(&v).unwrap();
                let c = is_cost(&v, &p.variance());
                prop_assert!(c <= prev * (1.0 + 1e-12));
                prev = c;
                p.update_w_in_place(&v).unwrap();
                let c = is_cost(&v, &p.variance());
                prop_assert!(c <= prev * (1.0 + 1e-12));
                prev = c;
            }
        }
    }
}
