use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::mcem::McemOutcome;
use super::mh::{MhChain, MixtureTarget};
use super::{derive_seed, EngineConfig, VariationalState, TAG_RECON_MH, TAG_RECON_Z};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::nmf::NmfParams;
use crate::vae::{decode, reparam_sample, EncoderOutput, LatentBatch, VaeModel};

/// Speech estimate from a converged engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    /// Wiener gain averaged over MH samples of `p(z | x)`.
    Mh,
    /// Variational posterior mean `μ_s`.
    S,
    /// Wiener gain averaged over draws from `r(z)`.
    Z,
}

impl ReconMode {
    pub const ALL: [ReconMode; 3] = [ReconMode::Mh, ReconMode::S, ReconMode::Z];

    pub fn as_str(self) -> &'static str {
        match self {
            ReconMode::Mh => "mh",
            ReconMode::S => "s",
            ReconMode::Z => "z",
        }
    }
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mh" => Ok(ReconMode::Mh),
            "s" => Ok(ReconMode::S),
            "z" => Ok(ReconMode::Z),
            other => Err(Error::InvalidArgument(format!(
                "unknown reconstruction mode {other:?} (expected mh, s or z)"
            ))),
        }
    }
}

/// `mean_d σ²_d / (σ²_d + WH) · x`.
fn apply_mean_gain(
    x: &ComplexSpectrogram,
    speech_vars: &[Array2<f64>],
    noise_var: &Array2<f64>,
) -> ComplexSpectrogram {
    let mut gain = Array2::<f64>::zeros(x.data.raw_dim());
    for sv in speech_vars {
        Zip::from(&mut gain)
            .and(sv)
            .and(noise_var)
            .for_each(|g, &s, &v| *g += s / (s + v));
    }
    let inv = 1.0 / speech_vars.len() as f64;
    let data = Zip::from(&x.data)
        .and(&gain)
        .map_collect(|&x, &g| x * (g * inv));
    x.with_data(data)
}

fn check_shapes(x: &ComplexSpectrogram, nmf: &NmfParams, m: &VaeModel) -> Result<()> {
    if nmf.n_freqs() != x.n_freqs() || nmf.n_frames() != x.n_frames() {
        return Err(Error::DimensionMismatch {
            what: "NMF shape vs mixture",
            expected: x.data.len(),
            got: nmf.n_freqs() * nmf.n_frames(),
        });
    }
    if m.n_freqs() != x.n_freqs() {
        return Err(Error::DimensionMismatch {
            what: "mixture frequency bins vs model",
            expected: m.n_freqs(),
            got: x.n_freqs(),
        });
    }
    Ok(())
}

/// Wiener estimate averaged over the given latent samples.
pub fn wiener_from_samples(
    x: &ComplexSpectrogram,
    m: &VaeModel,
    samples: &[LatentBatch],
    nmf: &NmfParams,
) -> Result<ComplexSpectrogram> {
    check_shapes(x, nmf, m)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("at least one latent sample required".into()));
    }
    let vars = samples
        .iter()
        .map(|s| decode(m, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(apply_mean_gain(x, &vars, &nmf.variance()))
}

fn mh_estimate(
    x: &ComplexSpectrogram,
    init: Array2<f64>,
    nmf: &NmfParams,
    m: &VaeModel,
    cfg: &EngineConfig,
) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let power = x.power();
    let noise_var = nmf.variance();
    let target = MixtureTarget {
        model: m,
        power: &power,
        noise_var: &noise_var,
    };
    let mut chain = MhChain::new(init, &target, derive_seed(cfg.seed, TAG_RECON_MH, 0));
    let kept = chain.run(&target, cfg.mh.n_iters, cfg.mh.keep_last, cfg.mh.eps2);
    Ok(apply_mean_gain(x, &kept.aux, &noise_var))
}

/// Speech estimate from a variational engine's final state.
pub fn reconstruct(
    x: &ComplexSpectrogram,
    state: &VariationalState,
    nmf: &NmfParams,
    m: &VaeModel,
    mode: ReconMode,
    cfg: &EngineConfig,
) -> Result<ComplexSpectrogram> {
    check_shapes(x, nmf, m)?;
    if state.mu_s.dim() != x.data.dim() || state.z_mean.ncols() != x.n_frames() {
        return Err(Error::DimensionMismatch {
            what: "variational state vs mixture",
            expected: x.data.len(),
            got: state.mu_s.len(),
        });
    }
    match mode {
        ReconMode::S => Ok(x.with_data(state.mu_s.clone())),
        ReconMode::Z => {
            let r = EncoderOutput {
                mean: state.z_mean.clone(),
                variance: state.z_var.clone(),
            };
            let draws = reparam_sample(&r, derive_seed(cfg.seed, TAG_RECON_Z, 0), cfg.samples)?;
            wiener_from_samples(x, m, &draws, nmf)
        }
        ReconMode::Mh => mh_estimate(x, state.z_mean.clone(), nmf, m, cfg),
    }
}

/// MH-Wiener estimate after MCEM, with the chain started from its final
/// position.
pub fn reconstruct_mcem(
    x: &ComplexSpectrogram,
    outcome: &McemOutcome,
    m: &VaeModel,
    cfg: &EngineConfig,
) -> Result<ComplexSpectrogram> {
    check_shapes(x, &outcome.nmf, m)?;
    mh_estimate(x, outcome.chain_state.clone(), &outcome.nmf, m, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, Waveform};
    use crate::inference::posterior_sn;

    fn mixture() -> ComplexSpectrogram {
        let samples = (0..200).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        stft(&Waveform::new(samples, 16_000).unwrap(), 16, 4).unwrap()
    }

    /// NMF with `WH` equal to `level` everywhere.
    fn flat_nmf(f: usize, n: usize, level: f64) -> NmfParams {
        NmfParams::new(Array2::from_elem((f, 1), level), Array2::ones((1, n))).unwrap()
    }

    fn state_for(x: &ComplexSpectrogram, gamma2: f64, noise: f64, l: usize) -> VariationalState {
        let (f, n) = x.data.dim();
        let mut mu_s = Array2::zeros((f, n));
        let mut mu_n = Array2::zeros((f, n));
        let mut sig = Array2::zeros((f, n));
        for t in 0..n {
            let (s, nn, c, _) = posterior_sn(
                x.data.column(t),
                Array2::from_elem((f, 1), gamma2).column(0),
                Array2::from_elem((f, 1), noise).column(0),
            )
            .unwrap();
            for fi in 0..f {
                mu_s[[fi, t]] = s[fi];
                mu_n[[fi, t]] = nn[fi];
                sig[[fi, t]] = c[fi];
            }
        }
        VariationalState {
            mu_s,
            mu_n,
            sigma_nn: sig.clone(),
            sigma_ss: sig,
            z_mean: Array2::zeros((l, n)),
            z_var: Array2::ones((l, n)),
            gamma2: Array2::from_elem((f, n), gamma2),
        }
    }

    fn assert_scaled(est: &ComplexSpectrogram, x: &ComplexSpectrogram, k: f64, tol: f64) {
        for (e, x) in est.data.iter().zip(x.data.iter()) {
            assert!((e - x * k).norm() <= tol * x.norm().max(1e-300), "{e} vs {}", x * k);
        }
    }

    #[test]
    fn equal_variances_halve_the_mixture() {
        let x = mixture();
        let m = VaeModel::constant_decoder(&[0.8; 9], 2).unwrap();
        let nmf = flat_nmf(9, x.n_frames(), 0.8);
        let state = state_for(&x, 0.8, 0.8, 2);
        let cfg = EngineConfig {
            samples: 4,
            mh: super::super::MhConfig {
                n_iters: 10,
                keep_last: 3,
                eps2: 0.1,
            },
            ..EngineConfig::default()
        };
        for mode in ReconMode::ALL {
            let est = reconstruct(&x, &state, &nmf, &m, mode, &cfg).unwrap();
            assert_scaled(&est, &x, 0.5, 1e-12);
        }
    }

    #[test]
    fn vanishing_noise_passes_mixture_through() {
        let x = mixture();
        let m = VaeModel::constant_decoder(&[1.0; 9], 2).unwrap();
        let nmf = flat_nmf(9, x.n_frames(), 1e-10);
        let state = state_for(&x, 1.0, 1e-10, 2);
        let cfg = EngineConfig::default();
        for mode in ReconMode::ALL {
            let est = reconstruct(&x, &state, &nmf, &m, mode, &cfg).unwrap();
            assert_scaled(&est, &x, 1.0, 1e-9);
        }
    }

    #[test]
    fn gains_never_amplify() {
        let x = mixture();
        let m = VaeModel::new(9, 2, 5);
        let nmf = flat_nmf(9, x.n_frames(), 0.3);
        let state = state_for(&x, 1.0, 0.3, 2);
        let cfg = EngineConfig {
            samples: 3,
            ..EngineConfig::default()
        };
        for mode in [ReconMode::Mh, ReconMode::Z] {
            let est = reconstruct(&x, &state, &nmf, &m, mode, &cfg).unwrap();
            for (e, x) in est.data.iter().zip(x.data.iter()) {
                assert!(e.norm() <= x.norm() + 1e-15);
            }
        }
    }

    #[test]
    fn mode_parsing_and_errors() {
        for mode in ReconMode::ALL {
            assert_eq!(mode.as_str().parse::<ReconMode>().unwrap(), mode);
        }
        assert!("wiener".parse::<ReconMode>().is_err());
        let x = mixture();
        let m = VaeModel::new(9, 2, 5);
        assert!(wiener_from_samples(&x, &m, &[], &flat_nmf(9, x.n_frames(), 1.0)).is_err());
        assert!(wiener_from_samples(
            &x,
            &m,
            &[LatentBatch { z: Array2::zeros((2, x.n_frames())) }],
            &flat_nmf(9, x.n_frames() + 1, 1.0)
        )
        .is_err());
    }
}
