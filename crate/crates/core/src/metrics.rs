//! Scale-invariant SDR, SNR mixing and iteration timing summaries.

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::inference::EnhanceReport;

/// Magnitude cap on reported SI-SDR values.
pub const SDR_CAP_DB: f64 = 100.0;

/// Distance from the final SI-SDR within which a run counts as converged.
pub const SDR_TOLERANCE_DB: f64 = 0.5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(a: &Waveform, b: &Waveform, what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Scale-invariant SDR of `estimate` against `reference`, in dB.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_lengths(reference, estimate, "estimate length vs reference")?;
    let r = &reference.samples;
    let e = &estimate.samples;
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::EmptyInput("zero-energy reference"));
    }
    let alpha = dot(e, r) / rr;
    let target = alpha * alpha * rr;
    let residual: f64 = e
        .iter()
        .zip(r)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    let db = if target == 0.0 {
        -SDR_CAP_DB
    } else if residual == 0.0 {
        SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrResult {
    pub si_sdr_db: f64,
    pub input_si_sdr_db: f64,
    pub improvement_db: f64,
}

impl SdrResult {
    pub fn evaluate(reference: &Waveform, estimate: &Waveform, mixture: &Waveform) -> Result<Self> {
        let si_sdr_db = si_sdr(reference, estimate)?;
        let input_si_sdr_db = si_sdr(reference, mixture)?;
        Ok(Self {
            si_sdr_db,
            input_si_sdr_db,
            improvement_db: si_sdr_db - input_si_sdr_db,
        })
    }
}

/// Scales `noise` to the requested SNR and adds it to `speech`.
///
/// Returns `(mixture, scaled_noise)`.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    check_lengths(speech, noise, "noise length vs speech")?;
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            speech.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite, got {snr_db}")));
    }
    let ps = speech.energy();
    let pn = noise.energy();
    if ps == 0.0 {
        return Err(Error::EmptyInput("zero-energy speech"));
    }
    if pn == 0.0 {
        return Err(Error::EmptyInput("zero-energy noise"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples.iter().map(|v| v * gain).collect();
    let mixture = speech.samples.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok((
        Waveform::new(mixture, speech.sample_rate)?,
        Waveform::new(scaled, speech.sample_rate)?,
    ))
}

/// 1-based index of the first entry within `tol_db` of the last one.
pub fn iters_to_tolerance(trace: &[f64], tol_db: f64) -> Option<usize> {
    let last = *trace.last()?;
    trace
        .iter()
        .position(|v| (v - last).abs() <= tol_db)
        .map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub mean_ms_per_iter: f64,
    pub iterations: usize,
    /// Only available when every iteration recorded an SI-SDR value.
    pub iters_to_tol: Option<usize>,
}

pub fn time_iterations(report: &EnhanceReport) -> IterationSummary {
    IterationSummary {
        mean_ms_per_iter: report.mean_ms_per_iter(),
        iterations: report.iterations_used(),
        iters_to_tol: report
            .sdr_trace()
            .and_then(|t| iters_to_tolerance(&t, SDR_TOLERANCE_DB)),
    }
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{EngineConfig, IterationRecord};
    use approx::assert_relative_eq;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    #[test]
    fn perfect_and_scaled_estimates_hit_the_cap() {
        let r = wave(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(si_sdr(&r, &r).unwrap(), SDR_CAP_DB);
        let twice = wave(r.samples.iter().map(|v| 2.0 * v).collect());
        assert_eq!(si_sdr(&r, &twice).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn orthogonal_noise_ten_to_one() {
        // r = (1, 1, 0, 0) and n ⟂ r with ‖n‖² = ‖r‖²/10.
        let r = wave(vec![1.0, 1.0, 0.0, 0.0]);
        let k = (0.2f64 / 2.0).sqrt();
        let e = wave(vec![1.0 + k, 1.0 - k, 0.0, 0.0]);
        assert_relative_eq!(si_sdr(&r, &e).unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn scale_invariance_and_errors() {
        let r = wave(vec![0.3, -0.1, 0.7, 0.2, -0.4]);
        let e = wave(vec![0.2, 0.1, 0.5, 0.1, -0.6]);
        let e3 = wave(e.samples.iter().map(|v| 3.0 * v).collect());
        assert_relative_eq!(si_sdr(&r, &e).unwrap(), si_sdr(&r, &e3).unwrap(), epsilon = 1e-12);
        assert!(si_sdr(&wave(vec![0.0; 5]), &e).is_err());
        assert!(si_sdr(&r, &wave(vec![0.0; 4])).is_err());
        assert_eq!(si_sdr(&r, &wave(vec![0.0; 5])).unwrap(), -SDR_CAP_DB);
    }

    #[test]
    fn mixing_hits_requested_snr() {
        let s = wave((0..500).map(|i| (i as f64 * 0.1).sin()).collect());
        let n = wave((0..500).map(|i| ((i * 7919 % 113) as f64 / 56.0) - 1.0).collect());
        let (mix, scaled) = mix_at_snr(&s, &n, 0.0).unwrap();
        assert_relative_eq!(s.energy(), scaled.energy(), max_relative = 1e-12);
        for ((m, sc), sp) in mix.samples.iter().zip(&scaled.samples).zip(&s.samples) {
            assert!((m - sc - sp).abs() <= f64::EPSILON * m.abs().max(sp.abs()));
        }
        let (_, scaled) = mix_at_snr(&s, &n, 10.0).unwrap();
        assert_relative_eq!(s.energy() / scaled.energy(), 10.0, max_relative = 1e-12);
        assert!(mix_at_snr(&s, &wave(vec![0.0; 500]), 0.0).is_err());
        assert!(mix_at_snr(&s, &wave(vec![1.0; 10]), 0.0).is_err());
    }

    #[test]
    fn tolerance_rule() {
        assert_eq!(iters_to_tolerance(&[0.0, 5.0, 9.6, 10.0, 10.0], 0.5), Some(3));
        assert_eq!(iters_to_tolerance(&[4.0; 6], 0.5), Some(1));
        let monotone = [1.0, 2.0, 4.0, 6.0, 7.5, 8.7, 9.0, 9.0, 9.0];
        assert!(iters_to_tolerance(&monotone, 0.5).unwrap() <= 7);
        assert_eq!(iters_to_tolerance(&[], 0.5), None);
    }

    #[test]
    fn summary_from_report() {
        let mut report = EnhanceReport {
            method: crate::inference::Method::Vem,
            config: EngineConfig::default(),
            iterations: Vec::new(),
            converged: true,
            final_si_sdr: None,
        };
        for (i, sdr) in [0.0, 5.0, 9.6, 10.0, 10.0].into_iter().enumerate() {
            report.iterations.push(IterationRecord {
                iteration: i + 1,
                objective: 0.0,
                elapsed_ms: 2.0 * (i + 1) as f64,
                rel_change: 1.0,
                si_sdr: Some(sdr),
            });
        }
        let s = time_iterations(&report);
        assert_eq!(s.iters_to_tol, Some(3));
        assert_relative_eq!(s.mean_ms_per_iter, 6.0);
        report.iterations[1].si_sdr = None;
        assert_eq!(time_iterations(&report).iters_to_tol, None);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
    }
}
