use std::time::Instant;

use ndarray::{Array2, Zip};

use super::mh::{complex_gaussian_log_density, MhChain, MixtureTarget};
use super::report::{EnhanceReport, IterationRecord};
use super::{
    check_input, derive_seed, relative_change, EngineConfig, Method, Observer, Snapshot,
    SnapshotKind, TAG_CHAIN, TAG_NMF,
};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::nmf::{init_nmf, NmfParams};
use crate::vae::{encode, LatentBatch, VaeModel};

#[derive(Debug, Clone)]
pub struct McemOutcome {
    /// Kept MH samples of the last E-step.
    pub samples: Vec<LatentBatch>,
    /// Chain position after the last E-step, `L × N`.
    pub chain_state: Array2<f64>,
    pub nmf: NmfParams,
    pub report: EnhanceReport,
}

/// Monte Carlo EM baseline with `cfg.samples = R` kept draws out of `4R`.
pub fn run_mcem(x: &ComplexSpectrogram, m: &VaeModel, cfg: &EngineConfig) -> Result<McemOutcome> {
    run_mcem_observed(x, m, cfg, &mut |_| None)
}

/// `(mean_d V_d^-2 ⊙ |x|², mean_d V_d^-1)` with `V_d = σ²_d + WH`.
fn sample_ratio_terms(
    power: &Array2<f64>,
    speech_vars: &[Array2<f64>],
    wh: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut num = Array2::zeros(power.raw_dim());
    let mut den = Array2::zeros(power.raw_dim());
    for sv in speech_vars {
        Zip::from(&mut num)
            .and(&mut den)
            .and(sv)
            .and(wh)
            .for_each(|n, d, &s, &w| {
                let r = 1.0 / (s + w);
                *n += r * r;
                *d += r;
            });
    }
    let inv = 1.0 / speech_vars.len() as f64;
    Zip::from(&mut num)
        .and(&mut den)
        .and(power)
        .for_each(|n, d, &p| {
            *n *= p * inv;
            *d *= inv;
        });
    (num, den)
}

pub fn run_mcem_observed(
    x: &ComplexSpectrogram,
    m: &VaeModel,
    cfg: &EngineConfig,
    observer: &mut Observer<'_>,
) -> Result<McemOutcome> {
    check_input(x, m, cfg)?;
    let cfg = EngineConfig {
        method: Method::Mcem,
        ..cfg.clone()
    };
    let (f, n) = x.data.dim();
    let power = x.power();
    let r = cfg.samples;
    let mut nmf = init_nmf(f, cfg.rank, n, derive_seed(cfg.seed, TAG_NMF, 0))?;
    let mut z = encode(m, &power)?.mean;
    let mut report = EnhanceReport::new(&cfg);
    let mut previous_power: Option<Array2<f64>> = None;
    let mut kept = Vec::new();

    for iteration in 1..=cfg.max_iters {
        let start = Instant::now();
        let noise_var = nmf.variance();

        // E-step
        let target = MixtureTarget {
            model: m,
            power: &power,
            noise_var: &noise_var,
        };
        let mut chain = MhChain::new(z, &target, derive_seed(cfg.seed, TAG_CHAIN, iteration as u64));
        let draws = chain.run(&target, 4 * r, r, cfg.mh.eps2);
        z = chain.state().clone();
        if z.iter().any(|v| !v.is_finite()) || draws.aux.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "MH samples",
            });
        }

        // M-step, H then W.
        let (num, den) = sample_ratio_terms(&power, &draws.aux, &noise_var);
        nmf.scale_h(&num, &den);
        let (num, den) = sample_ratio_terms(&power, &draws.aux, &nmf.variance());
        nmf.scale_w(&num, &den);
        if nmf.w.iter().chain(nmf.h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "NMF parameters",
            });
        }

        let new_var = nmf.variance();
        let mut objective = 0.0;
        for (sample, sv) in draws.samples.iter().zip(&draws.aux) {
            objective += Zip::from(&power)
                .and(sv)
                .and(&new_var)
                .fold(0.0, |acc, &p, &s, &v| acc + complex_gaussian_log_density(p, s + v));
            objective -= 0.5 * sample.z.iter().map(|v| v * v).sum::<f64>();
        }
        objective /= r as f64;

        // Posterior speech power under the kept samples.
        let mut current = Array2::zeros((f, n));
        for sv in &draws.aux {
            Zip::from(&mut current)
                .and(sv)
                .and(&noise_var)
                .and(&power)
                .for_each(|c, &s, &v, &p| {
                    let g = s / (s + v);
                    *c += g * g * p + g * v;
                });
        }
        current /= r as f64;
        let rel_change = previous_power
            .as_ref()
            .map_or(f64::INFINITY, |p| relative_change(&current, p));
        previous_power = Some(current);
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

        let si_sdr = observer(&Snapshot {
            iteration,
            nmf: &nmf,
            estep_noise_var: &noise_var,
            kind: SnapshotKind::Samples(&draws.samples),
        });
        report.iterations.push(IterationRecord {
            iteration,
            objective,
            elapsed_ms,
            rel_change,
            si_sdr,
        });
        kept = draws.samples;

        if rel_change < cfg.tol {
            report.converged = true;
            break;
        }
    }

    Ok(McemOutcome {
        samples: kept,
        chain_state: z,
        nmf,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mixture(seed: u64) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Waveform::new((0..300).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap();
        stft(&w, 16, 4).unwrap()
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            rank: 2,
            samples: 3,
            max_iters: 8,
            tol: 1e-12,
            ..EngineConfig::new(Method::Mcem)
        }
    }

    #[test]
    fn ratio_terms_match_plain_is_update_for_one_zero_draw() {
        // With σ² = 0 the statistics reduce to the IS-NMF terms of |x|².
        let p = Array2::from_shape_fn((3, 4), |(i, j)| 0.5 + (i * 4 + j) as f64 * 0.1);
        let wh = Array2::from_shape_fn((3, 4), |(i, j)| 1.0 + (i + j) as f64 * 0.3);
        let (num, den) = sample_ratio_terms(&p, &[Array2::zeros((3, 4))], &wh);
        for ((&n, &d), (&p, &v)) in num.iter().zip(den.iter()).zip(p.iter().zip(wh.iter())) {
            assert!((n - p / (v * v)).abs() < 1e-15);
            assert!((d - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn keeps_r_samples_and_is_deterministic() {
        let x = mixture(1);
        let m = VaeModel::new(9, 2, 3);
        let a = run_mcem(&x, &m, &cfg()).unwrap();
        let b = run_mcem(&x, &m, &cfg()).unwrap();
        assert_eq!(a.samples.len(), 3);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.nmf, b.nmf);
        assert_eq!(a.report.method, Method::Mcem);
        assert_eq!(a.report.iterations_used(), 8);
        assert_eq!(&a.chain_state, &a.samples[2].z);
    }

    #[test]
    fn observer_sees_samples() {
        let x = mixture(2);
        let m = VaeModel::new(9, 2, 3);
        let mut seen = 0;
        run_mcem_observed(&x, &m, &cfg(), &mut |snap| {
            let SnapshotKind::Samples(s) = snap.kind else {
                unreachable!()
            };
            assert_eq!(s.len(), 3);
            seen += 1;
            Some(seen as f64)
        })
        .unwrap();
        assert_eq!(seen, 8);
    }
}
