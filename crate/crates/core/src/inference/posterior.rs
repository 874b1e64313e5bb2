use ndarray::{Array2, ArrayView1, Zip};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vae::{encode, standard_normal, EncoderOutput, VaeModel};

/// Posterior of `(s, n)` for one bin given `x = s + n`, speech precision
/// `1/γ²` and noise variance `σ_n²`.
///
/// Returns `(μ_s, μ_n, c)` where the covariance is `c · [[1, −1], [−1, 1]]`
/// with `c = γ²σ_n² / (γ² + σ_n²)`.
#[inline]
pub fn posterior_sn_bin(x: Complex64, gamma2: f64, sigma_n2: f64) -> Result<(Complex64, Complex64, f64)> {
    if !(gamma2 > 0.0 && sigma_n2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "posterior variances must be positive, got gamma2={gamma2} sigma_n2={sigma_n2}"
        )));
    }
    Ok(posterior_sn_unchecked(x, gamma2, sigma_n2))
}

#[inline]
pub(crate) fn posterior_sn_unchecked(x: Complex64, gamma2: f64, sigma_n2: f64) -> (Complex64, Complex64, f64) {
    let total = gamma2 + sigma_n2;
    let mu_s = x * (gamma2 / total);
    let mu_n = x * (sigma_n2 / total);
    (mu_s, mu_n, gamma2 * sigma_n2 / total)
}

/// Column form of [`posterior_sn_bin`]: `(μ_s, μ_n, Σ_ss, Σ_nn)`.
#[allow(clippy::type_complexity)]
pub fn posterior_sn(
    x: ArrayView1<Complex64>,
    gamma2: ArrayView1<f64>,
    sigma_n2: ArrayView1<f64>,
) -> Result<(Vec<Complex64>, Vec<Complex64>, Vec<f64>, Vec<f64>)> {
    if gamma2.len() != x.len() || sigma_n2.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "posterior column lengths",
            expected: x.len(),
            got: gamma2.len().min(sigma_n2.len()),
        });
    }
    let mut mu_s = Vec::with_capacity(x.len());
    let mut mu_n = Vec::with_capacity(x.len());
    let mut sigma = Vec::with_capacity(x.len());
    for ((&x, &g), &v) in x.iter().zip(gamma2.iter()).zip(sigma_n2.iter()) {
        let (s, n, c) = posterior_sn_bin(x, g, v)?;
        mu_s.push(s);
        mu_n.push(n);
        sigma.push(c);
    }
    Ok((mu_s, mu_n, sigma.clone(), sigma))
}

/// Matrix E-(s,n) step: `(μ_s, μ_n, Σ)`.
pub(crate) fn posterior_sn_matrix(
    x: &Array2<Complex64>,
    gamma2: &Array2<f64>,
    noise_var: &Array2<f64>,
) -> (Array2<Complex64>, Array2<Complex64>, Array2<f64>) {
    let mut mu_s = Array2::zeros(x.raw_dim());
    let mut mu_n = Array2::zeros(x.raw_dim());
    let mut sigma = Array2::zeros(x.raw_dim());
    Zip::from(&mut mu_s)
        .and(&mut mu_n)
        .and(&mut sigma)
        .and(x)
        .and(gamma2)
        .and(noise_var)
        .for_each(|s, n, c, &x, &g, &v| {
            (*s, *n, *c) = posterior_sn_unchecked(x, g, v);
        });
    (mu_s, mu_n, sigma)
}

/// Monte Carlo moments of the decoder output under `r(z)`.
#[derive(Debug, Clone)]
pub struct DecoderMoments {
    /// `mean_d 1/σ_f²(z_t^(d))`, the precision `1/γ²`.
    pub inv_mean: Array2<f64>,
    /// `mean_d log σ_f²(z_t^(d))`.
    pub log_mean: Array2<f64>,
}

impl DecoderMoments {
    /// Moments from explicitly given variance draws.
    pub fn from_variances(draws: &[Array2<f64>]) -> Result<Self> {
        let first = draws
            .first()
            .ok_or(Error::InvalidArgument("at least one draw required".into()))?;
        let mut inv_mean = Array2::zeros(first.raw_dim());
        let mut log_mean = Array2::zeros(first.raw_dim());
        for v in draws {
            Zip::from(&mut inv_mean)
                .and(&mut log_mean)
                .and(v)
                .for_each(|i, l, &v| {
                    *i += 1.0 / v;
                    *l += v.ln();
                });
        }
        let inv_d = 1.0 / draws.len() as f64;
        inv_mean *= inv_d;
        log_mean *= inv_d;
        Ok(Self { inv_mean, log_mean })
    }

    /// Draws `count` samples from `N(z_mean, diag(z_var))` and decodes them.
    pub fn sample(
        m: &VaeModel,
        z_mean: &Array2<f64>,
        z_var: &Array2<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        if z_mean.nrows() != m.latent_dim() || z_mean.dim() != z_var.dim() {
            return Err(Error::DimensionMismatch {
                what: "latent statistics vs model latent dimension",
                expected: m.latent_dim(),
                got: z_mean.nrows(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = z_var.mapv(f64::sqrt);
        let (l, n) = z_mean.dim();
        let mut inv_mean = Array2::zeros((m.n_freqs(), n));
        let mut log_mean = Array2::zeros((m.n_freqs(), n));
        for _ in 0..count {
            let eps = standard_normal(&mut rng, l, n);
            let z = z_mean + &(&std * &eps);
            let log_var = m.decode_log(&z.view());
            Zip::from(&mut inv_mean)
                .and(&mut log_mean)
                .and(&log_var)
                .for_each(|i, lm, &lv| {
                    *i += (-lv).exp();
                    *lm += lv;
                });
        }
        let inv_d = 1.0 / count as f64;
        inv_mean *= inv_d;
        log_mean *= inv_d;
        Ok(Self { inv_mean, log_mean })
    }

    pub fn gamma2(&self) -> Array2<f64> {
        self.inv_mean.mapv(f64::recip)
    }
}

/// `γ²` with `1/γ² = (1/D) Σ_d 1/σ_f²(z^(d))`, `z^(d) ~ N(z_mean, z_var)`.
pub fn precision_gamma(
    m: &VaeModel,
    z_mean: &Array2<f64>,
    z_var: &Array2<f64>,
    count: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    Ok(DecoderMoments::sample(m, z_mean, z_var, count, seed)?.gamma2())
}

/// Variational E-z step: encoder applied to `|μ_s|² + Σ_ss`.
pub fn posterior_z(m: &VaeModel, mu_s: &Array2<Complex64>, sigma_ss: &Array2<f64>) -> Result<EncoderOutput> {
    if mu_s.dim() != sigma_ss.dim() {
        return Err(Error::DimensionMismatch {
            what: "sigma_ss shape vs mu_s",
            expected: mu_s.len(),
            got: sigma_ss.len(),
        });
    }
    if sigma_ss.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument("sigma_ss must be nonnegative".into()));
    }
    let power = Zip::from(mu_s)
        .and(sigma_ss)
        .map_collect(|m, &s| m.norm_sqr() + s);
    encode(m, &power)
}

/// Heuristic E-z step: encoder applied to `|μ_s|²` only.
pub fn posterior_z_heuristic(m: &VaeModel, mu_s: &Array2<Complex64>) -> Result<EncoderOutput> {
    encode(m, &mu_s.mapv(|c| c.norm_sqr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn symmetric_case() {
        let (s, n, v) = posterior_sn_bin(c(1.0), 1.0, 1.0).unwrap();
        assert_eq!(s, c(0.5));
        assert_eq!(n, c(0.5));
        assert_eq!(v, 0.5);
    }

    #[test]
    fn asymmetric_case() {
        let (s, n, v) = posterior_sn_bin(c(4.0), 3.0, 1.0).unwrap();
        assert_relative_eq!(s.re, 3.0);
        assert_relative_eq!(n.re, 1.0);
        assert_relative_eq!(v, 0.75);
    }

    #[test]
    fn noiseless_limit() {
        let x = Complex64::new(0.3, -2.0);
        let (s, _, v) = posterior_sn_bin(x, 2.0, 1e-14).unwrap();
        assert!((s - x).norm() < 1e-12);
        assert!(v < 1e-13);
        assert!(posterior_sn_bin(x, 0.0, 1.0).is_err());
    }

    #[test]
    fn column_form_matches_bins() {
        let x = array![c(1.0), Complex64::new(0.0, 2.0)];
        let g = array![1.0, 3.0];
        let v = array![1.0, 0.5];
        let (s, n, ss, nn) = posterior_sn(x.view(), g.view(), v.view()).unwrap();
        assert_eq!(ss, nn);
        for i in 0..2 {
            let (bs, bn, bc) = posterior_sn_bin(x[i], g[i], v[i]).unwrap();
            assert_eq!((s[i], n[i], ss[i]), (bs, bn, bc));
        }
        assert!(posterior_sn(x.view(), g.slice(ndarray::s![..1]), v.view()).is_err());
    }

    #[test]
    fn harmonic_mean_of_draws() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((2, 2), 3.0);
        let g = DecoderMoments::from_variances(&[a, b]).unwrap().gamma2();
        assert!(g.iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn constant_decoder_gamma_is_constant() {
        let psd = [0.2, 4.0, 9.0];
        let m = VaeModel::constant_decoder(&psd, 2).unwrap();
        let z_mean = Array2::zeros((2, 5));
        let z_var = Array2::ones((2, 5));
        for d in [1, 3, 10] {
            let g = precision_gamma(&m, &z_mean, &z_var, d, 4).unwrap();
            for t in 0..5 {
                for f in 0..3 {
                    assert_relative_eq!(g[[f, t]], psd[f], max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_latent_gives_decoder_at_mean() {
        let m = VaeModel::new(6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z_mean = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let z_var = Array2::zeros((3, 4));
        let expected = m.decode_log(&z_mean.view()).mapv(f64::exp);
        for d in [1, 7] {
            let g = precision_gamma(&m, &z_mean, &z_var, d, 99).unwrap();
            for (a, b) in g.iter().zip(expected.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn precision_gamma_is_seeded() {
        let m = VaeModel::new(6, 3, 2);
        let z_mean = Array2::zeros((3, 4));
        let z_var = Array2::ones((3, 4));
        assert_eq!(
            precision_gamma(&m, &z_mean, &z_var, 2, 5).unwrap(),
            precision_gamma(&m, &z_mean, &z_var, 2, 5).unwrap()
        );
        assert_ne!(
            precision_gamma(&m, &z_mean, &z_var, 2, 5).unwrap(),
            precision_gamma(&m, &z_mean, &z_var, 2, 6).unwrap()
        );
    }

    fn random_mu(f: usize, n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((f, n), || {
            Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
        })
    }

    #[test]
    fn posterior_z_variants() {
        let m = VaeModel::new(5, 2, 3);
        let mu = random_mu(5, 4, 1);
        let zero = Array2::zeros((5, 4));
        let plain = encode(&m, &mu.mapv(|c| c.norm_sqr())).unwrap();
        assert_eq!(posterior_z(&m, &mu, &zero).unwrap(), plain);
        assert_eq!(posterior_z_heuristic(&m, &mu).unwrap(), plain);

        let sigma = Array2::from_elem((5, 4), 0.7);
        let full = posterior_z(&m, &mu, &sigma).unwrap();
        assert_ne!(full, plain);

        // Composition oracle: elementwise |re|² + |im|² + σ.
        let mut v = Array2::zeros((5, 4));
        for f in 0..5 {
            for t in 0..4 {
                v[[f, t]] = mu[[f, t]].re * mu[[f, t]].re + mu[[f, t]].im * mu[[f, t]].im + 0.7;
            }
        }
        let oracle = encode(&m, &v).unwrap();
        for (a, b) in full.mean.iter().zip(oracle.mean.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }

        let flat = VaeModel::zeros(5, 2);
        let a = posterior_z(&flat, &mu, &sigma).unwrap();
        let b = posterior_z_heuristic(&flat, &mu).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.iter().all(|&v| v == 0.0));
        assert!(a.variance.iter().all(|&v| v == 1.0));
    }
}
