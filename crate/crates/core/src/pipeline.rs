//! Waveform-in, waveform-out enhancement.

use crate::dsp::{istft, stft, ComplexSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::inference::{
    reconstruct, reconstruct_mcem, run_mcem_observed, run_vem_observed,
    wiener_from_samples, EngineConfig, EnhanceReport, Method, ReconMode, Snapshot, SnapshotKind,
};
use crate::metrics::si_sdr;
use crate::vae::VaeModel;

/// STFT frame length implied by a model with `n_freqs` bins; the hop is a
/// quarter of it.
pub fn frame_for_model(m: &VaeModel) -> (usize, usize) {
    let frame = 2 * (m.n_freqs() - 1);
    (frame, frame / 4)
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub estimate: Waveform,
    pub report: EnhanceReport,
}

/// One engine run reconstructed in several modes.
#[derive(Debug, Clone)]
pub struct MultiEnhanced {
    pub estimates: Vec<(ReconMode, Waveform)>,
    pub report: EnhanceReport,
}

/// Cheap per-iteration speech estimate used for SI-SDR traces: Z-Wiener for
/// the variational engines, the sample-average Wiener filter for MCEM.
fn trace_estimate(
    x: &ComplexSpectrogram,
    m: &VaeModel,
    cfg: &EngineConfig,
    snap: &Snapshot<'_>,
) -> Result<ComplexSpectrogram> {
    match snap.kind {
        SnapshotKind::Variational(state) => reconstruct(x, state, snap.nmf, m, ReconMode::Z, cfg),
        SnapshotKind::Samples(samples) => wiener_from_samples(x, m, samples, snap.nmf),
    }
}

/// Runs the engine selected by `cfg.method` on `mixture` and reconstructs
/// the speech estimate with `mode`.
///
/// With a `reference`, every iteration records the SI-SDR of a cheap
/// intermediate estimate and the report carries the final SI-SDR.
/// MCEM supports only `ReconMode::Mh`.
pub fn enhance(
    mixture: &Waveform,
    m: &VaeModel,
    cfg: &EngineConfig,
    mode: ReconMode,
    reference: Option<&Waveform>,
) -> Result<Enhanced> {
    let mut out = enhance_modes(mixture, m, cfg, &[mode], reference)?;
    let (_, estimate) = out.estimates.pop().expect("one mode requested");
    Ok(Enhanced {
        estimate,
        report: out.report,
    })
}

/// As [`enhance`], reconstructing every mode in `modes` from a single engine
/// run. The report's final SI-SDR refers to the first mode.
pub fn enhance_modes(
    mixture: &Waveform,
    m: &VaeModel,
    cfg: &EngineConfig,
    modes: &[ReconMode],
    reference: Option<&Waveform>,
) -> Result<MultiEnhanced> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("at least one reconstruction mode required".into()));
    }
    if cfg.method == Method::Mcem {
        if let Some(mode) = modes.iter().find(|&&m| m != ReconMode::Mh) {
            return Err(Error::InvalidArgument(format!(
                "mcem has no variational posterior; reconstruction mode {mode} is unavailable"
            )));
        }
    }
    if let Some(r) = reference {
        if r.len() != mixture.len() {
            return Err(Error::DimensionMismatch {
                what: "reference length vs mixture",
                expected: mixture.len(),
                got: r.len(),
            });
        }
    }
    let (frame, hop) = frame_for_model(m);
    let x = stft(mixture, frame, hop)?;

    let mut failure = None;
    let mut observer = |snap: &Snapshot<'_>| {
        let r = reference?;
        let sdr = trace_estimate(&x, m, cfg, snap)
            .and_then(|s| istft(&s))
            .and_then(|w| si_sdr(r, &w));
        match sdr {
            Ok(v) => Some(v),
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        }
    };

    let (spectrograms, mut report) = match cfg.method {
        Method::Mcem => {
            let out = run_mcem_observed(&x, m, cfg, &mut observer)?;
            let s = reconstruct_mcem(&x, &out, m, cfg)?;
            (vec![s; modes.len()], out.report)
        }
        Method::Vem | Method::Heuristic => {
            let out = run_vem_observed(&x, m, cfg, &mut observer)?;
            let s = modes
                .iter()
                .map(|&mode| reconstruct(&x, &out.state, &out.nmf, m, mode, cfg))
                .collect::<Result<Vec<_>>>()?;
            (s, out.report)
        }
    };
    if let Some(e) = failure {
        return Err(e);
    }
    let estimates = modes
        .iter()
        .zip(&spectrograms)
        .map(|(&mode, s)| Ok((mode, istft(s)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = reference {
        report.final_si_sdr = Some(si_sdr(r, &estimates[0].1)?);
    }
    Ok(MultiEnhanced { estimates, report })
}
