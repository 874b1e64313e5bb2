//! Random-walk Metropolis-Hastings over per-frame latent vectors.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;
use crate::vae::{LatentBatch, VaeModel};

/// Per-frame log densities of a batch of latent columns, plus optional
/// per-frame auxiliary columns the target wants carried along with the
/// accepted state.
pub struct Evaluation {
    pub log_density: Vec<f64>,
    pub aux: Option<Array2<f64>>,
}

/// Unnormalised per-frame target `log π(z_t)`.
pub trait LogTarget: Sync {
    fn evaluate(&self, z: &Array2<f64>) -> Evaluation;
}

/// Target defined column by column by a closure.
pub struct ColumnTarget<F>(pub F);

impl<F> LogTarget for ColumnTarget<F>
where
    F: Fn(ArrayView1<f64>) -> f64 + Sync + Send,
{
    fn evaluate(&self, z: &Array2<f64>) -> Evaluation {
        Evaluation {
            log_density: par::map_indexed(z.ncols(), |t| (self.0)(z.column(t))),
            aux: None,
        }
    }
}

/// `log N_c(x; 0, var)` from `|x|²`.
#[inline]
pub fn complex_gaussian_log_density(power: f64, var: f64) -> f64 {
    -PI.ln() - var.ln() - power / var
}

/// `p(z_t | x_t) ∝ p(x_t | z_t) p(z_t)` under `x = s + n`,
/// `s ~ N_c(0, σ²(z))`, `n ~ N_c(0, noise_var)`, `z ~ N(0, I)`.
///
/// The auxiliary output is the decoded speech variance `σ²(z)`.
pub struct MixtureTarget<'a> {
    pub model: &'a VaeModel,
    /// `|x|²`, `F × N`.
    pub power: &'a Array2<f64>,
    /// `(WH)`, `F × N`.
    pub noise_var: &'a Array2<f64>,
}

impl LogTarget for MixtureTarget<'_> {
    fn evaluate(&self, z: &Array2<f64>) -> Evaluation {
        let speech_var = self.model.decode_log(&z.view()).mapv(f64::exp);
        let log_density = par::map_indexed(z.ncols(), |t| {
            let mut acc = 0.0;
            for f in 0..speech_var.nrows() {
                let v = speech_var[[f, t]] + self.noise_var[[f, t]];
                acc += complex_gaussian_log_density(self.power[[f, t]], v);
            }
            let prior: f64 = z.column(t).iter().map(|v| v * v).sum();
            acc - 0.5 * prior
        });
        Evaluation {
            log_density,
            aux: Some(speech_var),
        }
    }
}

/// `min(1, exp(log_ratio))`.
#[inline]
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Independent random-walk chains, one per frame, each with its own random
/// stream derived from the seed and the frame index.
pub struct MhChain {
    z: Array2<f64>,
    log_density: Vec<f64>,
    aux: Option<Array2<f64>>,
    rngs: Vec<ChaCha8Rng>,
    accepted: u64,
    proposed: u64,
}

/// States recorded by [`MhChain::run`].
pub struct ChainSamples {
    pub samples: Vec<LatentBatch>,
    /// Auxiliary target output for each kept sample, when the target has one.
    pub aux: Vec<Array2<f64>>,
}

impl MhChain {
    pub fn new<T: LogTarget + ?Sized>(init: Array2<f64>, target: &T, seed: u64) -> Self {
        let rngs = (0..init.ncols())
            .map(|t| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(t as u64);
                r
            })
            .collect();
        let eval = target.evaluate(&init);
        Self {
            z: init,
            log_density: eval.log_density,
            aux: eval.aux,
            rngs,
            accepted: 0,
            proposed: 0,
        }
    }

    pub fn state(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn aux(&self) -> Option<&Array2<f64>> {
        self.aux.as_ref()
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// One proposal `z' ~ N(z, eps2 · I)` and accept/reject per frame.
    pub fn step<T: LogTarget + ?Sized>(&mut self, target: &T, eps2: f64) {
        let (l, n) = self.z.dim();
        let scale = eps2.sqrt();
        let z = &self.z;
        let mut draws: Vec<(ChaCha8Rng, Vec<f64>, f64)> = self
            .rngs
            .drain(..)
            .map(|r| (r, Vec::new(), 0.0))
            .collect();
        par::for_each_mut(&mut draws, |t, (rng, col, u)| {
            *col = (0..l)
                .map(|i| z[[i, t]] + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            *u = rng.random::<f64>();
        });
        let mut proposal = Array2::zeros((l, n));
        for (t, (_, col, _)) in draws.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                proposal[[i, t]] = v;
            }
        }
        let eval = target.evaluate(&proposal);

        for (t, (rng, _, u)) in draws.into_iter().enumerate() {
            self.rngs.push(rng);
            let alpha = acceptance_probability(eval.log_density[t] - self.log_density[t]);
            self.proposed += 1;
            if u < alpha {
                self.accepted += 1;
                self.z.column_mut(t).assign(&proposal.column(t));
                self.log_density[t] = eval.log_density[t];
                if let (Some(cur), Some(new)) = (self.aux.as_mut(), eval.aux.as_ref()) {
                    cur.column_mut(t).assign(&new.column(t));
                }
            }
        }
    }

    /// Runs `n_steps` steps and returns the states after the last
    /// `keep_last` of them.
    pub fn run<T: LogTarget + ?Sized>(
        &mut self,
        target: &T,
        n_steps: usize,
        keep_last: usize,
        eps2: f64,
    ) -> ChainSamples {
        let keep_from = n_steps.saturating_sub(keep_last);
        let mut samples = Vec::with_capacity(keep_last);
        let mut aux = Vec::with_capacity(keep_last);
        for i in 0..n_steps {
            self.step(target, eps2);
            if i >= keep_from {
                samples.push(LatentBatch { z: self.z.clone() });
                if let Some(a) = &self.aux {
                    aux.push(a.clone());
                }
            }
        }
        ChainSamples { samples, aux }
    }
}

/// Single MH step from `z_prev` with fresh per-frame streams from `seed`.
pub fn mh_step<T: LogTarget + ?Sized>(
    z_prev: &LatentBatch,
    target: &T,
    eps2: f64,
    seed: u64,
) -> Result<LatentBatch> {
    if !(eps2 > 0.0) {
        return Err(Error::InvalidArgument(format!("eps2 must be positive, got {eps2}")));
    }
    let mut chain = MhChain::new(z_prev.z.clone(), target, seed);
    chain.step(target, eps2);
    Ok(LatentBatch { z: chain.z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_variance_zero_mixture_density_is_one_over_pi() {
        assert_relative_eq!(complex_gaussian_log_density(0.0, 1.0).exp(), 1.0 / PI);
    }

    #[test]
    fn acceptance_probability_values() {
        assert_eq!(acceptance_probability(0.0), 1.0);
        assert_eq!(acceptance_probability(3.0), 1.0);
        assert_relative_eq!(acceptance_probability(0.5f64.ln()), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn flat_target_always_accepts() {
        let target = ColumnTarget(|_: ArrayView1<f64>| 0.0);
        let mut chain = MhChain::new(Array2::zeros((3, 10)), &target, 1);
        chain.run(&target, 50, 5, 0.1);
        assert_eq!(chain.acceptance_rate(), 1.0);
    }

    #[test]
    fn half_ratio_target_accepts_half() {
        // Every move away from the origin halves the density.
        let target = ColumnTarget(|z: ArrayView1<f64>| {
            if z.iter().all(|&v| v == 0.0) {
                0.0
            } else {
                0.5f64.ln()
            }
        });
        let n = 100_000;
        let z0 = LatentBatch { z: Array2::zeros((2, n)) };
        let z1 = mh_step(&z0, &target, 0.3, 7).unwrap();
        let moved = (0..n).filter(|&t| z1.z[[0, t]] != 0.0).count();
        let rate = moved as f64 / n as f64;
        // Binomial standard error is ~0.0016.
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn standard_normal_calibration() {
        let target = ColumnTarget(|z: ArrayView1<f64>| -0.5 * z[0] * z[0]);
        let mut chain = MhChain::new(Array2::zeros((1, 1)), &target, 2024);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            chain.step(&target, 0.5);
            xs.push(chain.state()[[0, 0]]);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn chains_are_seeded_per_frame() {
        let target = ColumnTarget(|z: ArrayView1<f64>| -0.5 * z.dot(&z));
        let run = |n: usize, seed: u64| {
            let mut c = MhChain::new(Array2::zeros((2, n)), &target, seed);
            c.run(&target, 20, 1, 0.5).samples.pop().unwrap().z
        };
        assert_eq!(run(4, 3), run(4, 3));
        assert_ne!(run(4, 3), run(4, 4));
        // Frame t's chain does not depend on how many other frames exist.
        let a = run(3, 9);
        let b = run(6, 9);
        for t in 0..3 {
            assert_eq!(a.column(t), b.column(t));
        }
    }

    #[test]
    fn run_keeps_last_samples() {
        let target = ColumnTarget(|z: ArrayView1<f64>| -0.5 * z.dot(&z));
        let mut c = MhChain::new(Array2::zeros((2, 3)), &target, 0);
        let out = c.run(&target, 10, 4, 0.5);
        assert_eq!(out.samples.len(), 4);
        assert!(out.aux.is_empty());
        assert_eq!(&out.samples[3].z, c.state());
        assert!(mh_step(&out.samples[0], &target, 0.0, 1).is_err());
    }

    #[test]
    fn mixture_target_carries_decoded_variance() {
        let m = VaeModel::new(5, 2, 1);
        let power = Array2::from_elem((5, 3), 0.4);
        let noise = Array2::from_elem((5, 3), 0.2);
        let target = MixtureTarget {
            model: &m,
            power: &power,
            noise_var: &noise,
        };
        let z = Array2::from_elem((2, 3), 0.3);
        let eval = target.evaluate(&z);
        let sv = eval.aux.unwrap();
        let expected_var = m.decode_log(&z.view()).mapv(f64::exp);
        assert_eq!(sv, expected_var);
        let mut lp = -0.5 * 2.0 * 0.09;
        for f in 0..5 {
            lp += complex_gaussian_log_density(0.4, expected_var[[f, 0]] + 0.2);
        }
        assert_relative_eq!(eval.log_density[0], lp, max_relative = 1e-12);
    }
}
