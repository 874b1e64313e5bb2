use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use super::posterior::{posterior_sn_matrix, posterior_z, posterior_z_heuristic, DecoderMoments};
use super::report::{EnhanceReport, IterationRecord};
use super::{
    check_input, derive_seed, relative_change, EngineConfig, Method, Observer, Snapshot,
    SnapshotKind, VariationalState, TAG_GAMMA, TAG_NMF,
};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::nmf::{init_nmf, NmfParams};
use crate::vae::{encode, kl_to_prior, EncoderOutput, VaeModel};

#[derive(Debug, Clone)]
pub struct VemOutcome {
    pub state: VariationalState,
    pub nmf: NmfParams,
    pub report: EnhanceReport,
}

/// Variational lower bound `E_r[log p(x, s, n, z) − log r(s, n, z)]` with the
/// decoder expectations replaced by `moments`.
fn surrogate_from_moments(
    mu_s: &Array2<Complex64>,
    mu_n: &Array2<Complex64>,
    sigma: &Array2<f64>,
    moments: &DecoderMoments,
    noise_var: &Array2<f64>,
    z: &EncoderOutput,
) -> f64 {
    let ln_pi = PI.ln();
    let mut total = 0.0;
    for (((((ms, mn), &c), &v), &inv), &lm) in mu_s
        .iter()
        .zip(mu_n.iter())
        .zip(sigma.iter())
        .zip(noise_var.iter())
        .zip(moments.inv_mean.iter())
        .zip(moments.log_mean.iter())
    {
        let speech = -ln_pi - lm - (ms.norm_sqr() + c) * inv;
        let noise = -ln_pi - v.ln() - (mn.norm_sqr() + c) / v;
        let entropy = ln_pi + 1.0 + c.ln();
        total += speech + noise + entropy;
    }
    total - kl_to_prior(z)
}

/// Monte Carlo estimate of the variational free energy of `state` under
/// `nmf`, using `count` draws from `r(z)`.
pub fn free_energy_surrogate(
    x: &ComplexSpectrogram,
    state: &VariationalState,
    nmf: &NmfParams,
    m: &VaeModel,
    count: usize,
    seed: u64,
) -> Result<f64> {
    if state.mu_s.dim() != x.data.dim() || nmf.variance().dim() != x.data.dim() {
        return Err(Error::DimensionMismatch {
            what: "state / NMF shape vs mixture",
            expected: x.data.len(),
            got: state.mu_s.len(),
        });
    }
    let moments = DecoderMoments::sample(m, &state.z_mean, &state.z_var, count, seed)?;
    let z = EncoderOutput {
        mean: state.z_mean.clone(),
        variance: state.z_var.clone(),
    };
    Ok(surrogate_from_moments(
        &state.mu_s,
        &state.mu_n,
        &state.sigma_ss,
        &moments,
        &nmf.variance(),
        &z,
    ))
}

/// Proposed variational EM.
pub fn run_vem(x: &ComplexSpectrogram, m: &VaeModel, cfg: &EngineConfig) -> Result<VemOutcome> {
    let cfg = EngineConfig {
        method: Method::Vem,
        ..cfg.clone()
    };
    run_vem_observed(x, m, &cfg, &mut |_| None)
}

/// Heuristic baseline: E-z step ignores `Σ_ss`.
pub fn run_heuristic(x: &ComplexSpectrogram, m: &VaeModel, cfg: &EngineConfig) -> Result<VemOutcome> {
    let cfg = EngineConfig {
        method: Method::Heuristic,
        ..cfg.clone()
    };
    run_vem_observed(x, m, &cfg, &mut |_| None)
}

/// Runs the variational engine selected by `cfg.method` (VEM or heuristic),
/// calling `observer` after every iteration.
pub fn run_vem_observed(
    x: &ComplexSpectrogram,
    m: &VaeModel,
    cfg: &EngineConfig,
    observer: &mut Observer<'_>,
) -> Result<VemOutcome> {
    check_input(x, m, cfg)?;
    let heuristic = match cfg.method {
        Method::Vem => false,
        Method::Heuristic => true,
        Method::Mcem => {
            return Err(Error::InvalidArgument(
                "run_vem_observed drives the variational engines only".into(),
            ))
        }
    };
    let (f, n) = x.data.dim();
    let mut nmf = init_nmf(f, cfg.rank, n, derive_seed(cfg.seed, TAG_NMF, 0))?;
    let mut z = encode(m, &x.power())?;
    let mut report = EnhanceReport::new(cfg);
    let mut previous_power: Option<Array2<f64>> = None;
    let mut state = None;

    for iteration in 1..=cfg.max_iters {
        let start = Instant::now();

        let moments = DecoderMoments::sample(
            m,
            &z.mean,
            &z.variance,
            cfg.samples,
            derive_seed(cfg.seed, TAG_GAMMA, iteration as u64),
        )?;
        let gamma2 = moments.gamma2();
        let noise_var = nmf.variance();

        // E-(s, n)
        let (mu_s, mu_n, sigma) = posterior_sn_matrix(&x.data, &gamma2, &noise_var);
        if sigma.iter().any(|v| !v.is_finite()) || mu_s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "posterior of (s, n)",
            });
        }

        // M-step, H then W.
        let target = Zip::from(&mu_n)
            .and(&sigma)
            .map_collect(|m, &c| m.norm_sqr() + c);
        nmf.update_h_in_place(&target)?;
        nmf.update_w_in_place(&target)?;
        if nmf.w.iter().chain(nmf.h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "NMF parameters",
            });
        }

        let objective = surrogate_from_moments(
            &mu_s,
            &mu_n,
            &sigma,
            &moments,
            &nmf.variance(),
            &z,
        );

        // E-z
        z = if heuristic {
            posterior_z_heuristic(m, &mu_s)?
        } else {
            posterior_z(m, &mu_s, &sigma)?
        };
        if z.mean.iter().chain(z.variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "latent posterior",
            });
        }

        let current = Zip::from(&mu_s)
            .and(&sigma)
            .map_collect(|m, &c| m.norm_sqr() + c);
        let rel_change = previous_power
            .as_ref()
            .map_or(f64::INFINITY, |p| relative_change(&current, p));
        previous_power = Some(current);

        let s = VariationalState {
            mu_s,
            mu_n,
            sigma_nn: sigma.clone(),
            sigma_ss: sigma,
            z_mean: z.mean.clone(),
            z_var: z.variance.clone(),
            gamma2,
        };
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

        let si_sdr = observer(&Snapshot {
            iteration,
            nmf: &nmf,
            estep_noise_var: &noise_var,
            kind: SnapshotKind::Variational(&s),
        });
        report.iterations.push(IterationRecord {
            iteration,
            objective,
            elapsed_ms,
            rel_change,
            si_sdr,
        });
        state = Some(s);

        if rel_change < cfg.tol {
            report.converged = true;
            break;
        }
    }

    Ok(VemOutcome {
        state: state.expect("at least one iteration"),
        nmf,
        report,
    })
}
