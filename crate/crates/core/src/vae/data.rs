//! Synthetic speech-like training material.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{stft, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// RMS level every toy utterance is normalised to.
pub const TOY_RMS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub utterances: Vec<Waveform>,
}

impl ToyDataset {
    pub fn total_samples(&self) -> usize {
        self.utterances.iter().map(Waveform::len).sum()
    }
}

/// `n_utterances` voiced-speech-like signals at 16 kHz, 1 to 3 s long.
///
/// Each utterance is a harmonic comb whose fundamental glides across
/// 150-300 Hz, shaped by three formant resonances that sweep their bands,
/// under a syllabic envelope that never reaches silence, plus weak AR(2)
/// aspiration. Utterance `i` depends only on `(seed, i)`.
pub fn make_toy_dataset(seed: u64, n_utterances: usize) -> Result<ToyDataset> {
    if n_utterances == 0 {
        return Err(Error::InvalidArgument("need at least one utterance".into()));
    }
    let utterances = (0..n_utterances)
        .map(|i| toy_utterance(seed, i as u64))
        .collect::<Result<_>>()?;
    Ok(ToyDataset { utterances })
}

/// Highest harmonic frequency generated.
const MAX_HARMONIC_HZ: f64 = 7500.0;
const F0_RANGE: (f64, f64) = (150.0, 300.0);
/// Samples between updates of the harmonic amplitudes.
const BLOCK: usize = 32;

/// Resonance whose centre sweeps its whole band.
struct Formant {
    low: f64,
    high: f64,
    rate: f64,
    phase: f64,
    bandwidth: f64,
    gain: f64,
}

impl Formant {
    fn draw(rng: &mut ChaCha8Rng, band: (f64, f64), bandwidth: (f64, f64), gain: (f64, f64)) -> Self {
        Self {
            low: band.0,
            high: band.1,
            rate: rng.random_range(0.5..3.0),
            phase: rng.random_range(0.0..2.0 * PI),
            bandwidth: rng.random_range(bandwidth.0..bandwidth.1),
            gain: rng.random_range(gain.0..gain.1),
        }
    }

    fn response(&self, freq: f64, t: f64) -> f64 {
        let u = 0.5 + 0.5 * (2.0 * PI * self.rate * t + self.phase).sin();
        let c = self.low + u * (self.high - self.low);
        let x = (freq - c) / self.bandwidth;
        self.gain / (1.0 + x * x)
    }
}

pub(crate) fn toy_utterance(seed: u64, index: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let fs = DEFAULT_SAMPLE_RATE as f64;

    let duration = rng.random_range(1.0..3.0);
    let len = (duration * fs) as usize;

    // log f0 sweeps the whole range in every utterance.
    let (f_lo, f_hi) = (F0_RANGE.0.ln(), F0_RANGE.1.ln());
    let glide_rate = rng.random_range(0.3..1.5);
    let glide_phase = rng.random_range(0.0..2.0 * PI);
    let tilt = rng.random_range(0.3..0.8);
    let n_harmonics = (MAX_HARMONIC_HZ / F0_RANGE.0) as usize;
    let phases: Vec<f64> = (0..n_harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let formants = [
        Formant::draw(&mut rng, (300.0, 850.0), (60.0, 150.0), (0.8, 1.0)),
        Formant::draw(&mut rng, (850.0, 2300.0), (80.0, 200.0), (0.3, 0.7)),
        Formant::draw(&mut rng, (2300.0, 3400.0), (120.0, 250.0), (0.1, 0.4)),
    ];

    let syllable_rate = rng.random_range(2.0..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);

    let radius: f64 = rng.random_range(0.7..0.9);
    let theta = rng.random_range(0.1..0.7) * PI;
    let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
    let breath = rng.random_range(0.001..0.003);

    let mut samples = Vec::with_capacity(len);
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n_harmonics];
    let mut phase0 = 0.0;
    let (mut e1, mut e2) = (0.0, 0.0);
    for n in 0..len {
        let t = n as f64 / fs;
        let u = 0.5 + 0.5 * (2.0 * PI * glide_rate * t + glide_phase).sin();
        let f0 = (f_lo + u * (f_hi - f_lo)).exp();
        if n % BLOCK == 0 {
            for (k, (c, &ph)) in coeffs.iter_mut().zip(&phases).enumerate() {
                let h = (k + 1) as f64;
                let fk = h * f0;
                let amp = if fk < MAX_HARMONIC_HZ {
                    let shape: f64 = formants.iter().map(|fm| fm.response(fk, t)).sum();
                    (shape + 0.01) / h.powf(tilt)
                } else {
                    0.0
                };
                *c = Complex64::from_polar(amp, ph);
            }
        }
        phase0 += 2.0 * PI * f0 / fs;
        let env = 0.15 + 0.85 * (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos()).powi(2);

        // Harmonic k is Im(c_k e^{ik·phase0}); powers of e^{i·phase0} by recurrence.
        let step = Complex64::from_polar(1.0, phase0);
        let mut w = Complex64::new(1.0, 0.0);
        let mut voiced = 0.0;
        for c in &coeffs {
            w *= step;
            voiced += (c * w).im;
        }
        let white: f64 = rng.sample(StandardNormal);
        let e = a1 * e1 + a2 * e2 + white;
        e2 = e1;
        e1 = e;
        samples.push(env * (voiced + breath * (e * (1.0 - radius) + 0.3 * white)));
    }

    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    for s in &mut samples {
        *s *= TOY_RMS / rms;
    }
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Concatenated `|STFT|²` frames of every waveform, `F × Σ N_i`.
pub fn power_frames(waves: &[Waveform], frame_size: usize, hop: usize) -> Result<Array2<f64>> {
    if waves.is_empty() {
        return Err(Error::EmptyInput("waveform list"));
    }
    let specs = waves
        .iter()
        .map(|w| stft(w, frame_size, hop).map(|s| s.power()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = specs.iter().map(|s| s.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("equal frequency bins"))
}
