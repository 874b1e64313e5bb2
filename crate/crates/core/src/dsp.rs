//! STFT analysis/synthesis with a sine window, and mono WAV I/O.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_FRAME_SIZE: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform"));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT coefficients, `F = frame_size / 2 + 1` rows by `N` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub frame_size: usize,
    pub hop: usize,
    /// Length of the analysed signal, used by [`istft`] to trim padding.
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_freqs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Elementwise `|x|²`.
    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm_sqr())
    }

    /// Same metadata, new coefficients.
    pub fn with_data(&self, data: Array2<Complex64>) -> Self {
        debug_assert_eq!(data.dim(), self.data.dim());
        Self {
            data,
            frame_size: self.frame_size,
            hop: self.hop,
            signal_len: self.signal_len,
            sample_rate: self.sample_rate,
        }
    }
}

/// Half-cycle sine window `sin(π(n + 0.5) / M)`.
pub fn sine_window(frame_size: usize) -> Vec<f64> {
    (0..frame_size)
        .map(|n| (PI * (n as f64 + 0.5) / frame_size as f64).sin())
        .collect()
}

fn check_frame_params(frame_size: usize, hop: usize) -> Result<()> {
    if frame_size == 0 || !frame_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "frame size must be even and positive, got {frame_size}"
        )));
    }
    if hop == 0 || hop > frame_size {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be in 1..={frame_size}"
        )));
    }
    if !frame_size.is_multiple_of(hop) {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must divide frame size {frame_size}"
        )));
    }
    Ok(())
}

/// Leading zero padding and frame count for a signal of `len` samples.
fn frame_layout(len: usize, frame_size: usize, hop: usize) -> (usize, usize) {
    let pad = frame_size - hop;
    let padded = pad + len + pad;
    let n_frames = if padded <= frame_size {
        1
    } else {
        (padded - frame_size).div_ceil(hop) + 1
    };
    (pad, n_frames)
}

fn fft_plans(frame_size: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (
        planner.plan_fft_forward(frame_size),
        planner.plan_fft_inverse(frame_size),
    )
}

/// Short-time Fourier transform with sine analysis window.
///
/// The signal is zero-padded with `frame_size - hop` samples at both ends and
/// then up to a whole number of frames, so every original sample is covered
/// by `frame_size / hop` frames.
pub fn stft(w: &Waveform, frame_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if w.samples.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    check_frame_params(frame_size, hop)?;

    let window = sine_window(frame_size);
    let (pad, n_frames) = frame_layout(w.len(), frame_size, hop);
    let n_freqs = frame_size / 2 + 1;
    let (forward, _) = fft_plans(frame_size);

    let columns = par::map_indexed(n_frames, |t| {
        let start = t * hop;
        let mut buf: Vec<Complex64> = (0..frame_size)
            .map(|n| {
                let pos = start + n;
                let sample = pos
                    .checked_sub(pad)
                    .and_then(|i| w.samples.get(i))
                    .copied()
                    .unwrap_or(0.0);
                Complex64::new(sample * window[n], 0.0)
            })
            .collect();
        forward.process(&mut buf);
        buf.truncate(n_freqs);
        buf
    });

    let mut data = Array2::zeros((n_freqs, n_frames));
    for (t, col) in columns.into_iter().enumerate() {
        for (f, c) in col.into_iter().enumerate() {
            data[[f, t]] = c;
        }
    }

    Ok(ComplexSpectrogram {
        data,
        frame_size,
        hop,
        signal_len: w.len(),
        sample_rate: w.sample_rate,
    })
}

/// Inverse STFT by sine-window weighted overlap-add.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    check_frame_params(s.frame_size, s.hop)?;
    let n_freqs = s.frame_size / 2 + 1;
    if s.data.nrows() != n_freqs {
        return Err(Error::DimensionMismatch {
            what: "spectrogram rows vs frame size",
            expected: n_freqs,
            got: s.data.nrows(),
        });
    }
    if s.signal_len == 0 {
        return Err(Error::EmptyInput("spectrogram signal length"));
    }
    let (pad, n_frames) = frame_layout(s.signal_len, s.frame_size, s.hop);
    if s.data.ncols() != n_frames {
        return Err(Error::DimensionMismatch {
            what: "spectrogram frames vs signal length",
            expected: n_frames,
            got: s.data.ncols(),
        });
    }

    let m = s.frame_size;
    let window = sine_window(m);
    let (_, inverse) = fft_plans(m);
    let scale = 1.0 / m as f64;

    let frames = par::map_indexed(n_frames, |t| {
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for f in 0..n_freqs {
            buf[f] = s.data[[f, t]];
        }
        // Hermitian completion; DC and Nyquist imaginary parts are dropped
        // by taking the real part below.
        for f in 1..m / 2 {
            buf[m - f] = s.data[[f, t]].conj();
        }
        inverse.process(&mut buf);
        buf.iter()
            .zip(&window)
            .map(|(c, w)| c.re * scale * w)
            .collect::<Vec<f64>>()
    });

    let total = (n_frames - 1) * s.hop + m;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    for (t, frame) in frames.iter().enumerate() {
        let start = t * s.hop;
        for n in 0..m {
            out[start + n] += frame[n];
            norm[start + n] += window[n] * window[n];
        }
    }
    let samples = out[pad..pad + s.signal_len]
        .iter()
        .zip(&norm[pad..pad + s.signal_len])
        .map(|(y, w2)| y / w2)
        .collect();

    Ok(Waveform {
        samples,
        sample_rate: s.sample_rate,
    })
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file.
///
/// When `expected_rate` is given, a file at any other rate is rejected.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat(format!(
            "expected mono, got {} channels",
            spec.channels
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::WavFormat(format!(
                "sample rate {} Hz does not match expected {rate} Hz",
                spec.sample_rate
            )));
        }
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::WavFormat(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format: fmt,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &w.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
