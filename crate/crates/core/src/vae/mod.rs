//! VAE speech model: the decoder gives the per-bin speech variance
//! `σ_f²(z)`, the encoder amortizes the latent posterior `q(z | |s|²)`.
//!
//! Architecture (fixed):
//!
//! ```text
//! encoder: |s_t|² (F) -> Linear(F, 128) -> tanh -> { Linear(128, L) = mean
//!                                                  { Linear(128, L) = log-variance
//! decoder: z_t (L)    -> Linear(L, 128) -> tanh -> Linear(128, F) = log σ_f²
//! ```

mod data;
mod grad;
mod train;

pub use data::{make_toy_dataset, power_frames, ToyDataset, TOY_RMS};
pub(crate) use data::toy_utterance;
pub use grad::{loss_and_gradients, BatchLoss};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nmf::is_div_unchecked;
use crate::par;

/// Width of the single hidden layer of both networks.
pub const HIDDEN: usize = 128;

/// Frames per parallel work item in batched forward passes. Fixed so that
/// results do not depend on the thread count.
const COLUMN_CHUNK: usize = 32;

/// Affine layer `y = W x + b`, weight stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || {
                rng.random_range(-limit..limit)
            }),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Applies the layer to every column of `x`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(x);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub enc_hidden: Dense,
    pub enc_mean: Dense,
    pub enc_logvar: Dense,
    pub dec_hidden: Dense,
    pub dec_out: Dense,
}

/// Parameters of the diagonal Gaussian `q(z_t | ·)` for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `L × N`
    pub mean: Array2<f64>,
    /// `L × N`, strictly positive.
    pub variance: Array2<f64>,
}

/// Latent codes, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Array2<f64>,
}

impl LatentBatch {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent batch"));
        }
        Ok(Self { z })
    }

    pub fn n_frames(&self) -> usize {
        self.z.ncols()
    }
}

pub(crate) const TENSOR_NAMES: [&str; 10] = [
    "encoder.hidden.weight",
    "encoder.hidden.bias",
    "encoder.mean.weight",
    "encoder.mean.bias",
    "encoder.logvar.weight",
    "encoder.logvar.bias",
    "decoder.hidden.weight",
    "decoder.hidden.bias",
    "decoder.output.weight",
    "decoder.output.bias",
];

impl VaeModel {
    /// Randomly initialised model with the standard hidden width.
    pub fn new(n_freqs: usize, latent_dim: usize, seed: u64) -> Self {
        Self::with_hidden(n_freqs, latent_dim, HIDDEN, seed)
    }

    pub fn with_hidden(n_freqs: usize, latent_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            enc_hidden: Dense::glorot(n_freqs, hidden, &mut rng),
            enc_mean: Dense::glorot(hidden, latent_dim, &mut rng),
            enc_logvar: Dense::glorot(hidden, latent_dim, &mut rng),
            dec_hidden: Dense::glorot(latent_dim, hidden, &mut rng),
            dec_out: Dense::glorot(hidden, n_freqs, &mut rng),
        }
    }

    /// Model with every weight and bias zero: the encoder returns the prior
    /// and the decoder returns unit variance.
    pub fn zeros(n_freqs: usize, latent_dim: usize) -> Self {
        Self {
            enc_hidden: Dense::zeros(n_freqs, HIDDEN),
            enc_mean: Dense::zeros(HIDDEN, latent_dim),
            enc_logvar: Dense::zeros(HIDDEN, latent_dim),
            dec_hidden: Dense::zeros(latent_dim, HIDDEN),
            dec_out: Dense::zeros(HIDDEN, n_freqs),
        }
    }

    /// Zero encoder and a decoder that ignores `z` and always returns `psd`.
    pub fn constant_decoder(psd: &[f64], latent_dim: usize) -> Result<Self> {
        if psd.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "constant decoder variances must be positive".into(),
            ));
        }
        let mut m = Self::zeros(psd.len(), latent_dim);
        m.dec_out.bias = psd.iter().map(|p| p.ln()).collect();
        Ok(m)
    }

    pub fn n_freqs(&self) -> usize {
        self.enc_hidden.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_mean.output_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_hidden.output_dim()
    }

    pub(crate) fn layers(&self) -> [&Dense; 5] {
        [
            &self.enc_hidden,
            &self.enc_mean,
            &self.enc_logvar,
            &self.dec_hidden,
            &self.dec_out,
        ]
    }

    pub(crate) fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [
            &mut self.enc_hidden,
            &mut self.enc_mean,
            &mut self.enc_logvar,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ]
    }

    /// Flat parameter slices in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(10);
        for (i, layer) in self.layers().into_iter().enumerate() {
            out.push((
                TENSOR_NAMES[2 * i],
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                TENSOR_NAMES[2 * i + 1],
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(10);
        for layer in self.layers_mut() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Checks internal shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let f = self.n_freqs();
        let l = self.latent_dim();
        let h = self.hidden_dim();
        let expected = [(f, h), (h, l), (h, l), (l, h), (h, f)];
        for (layer, (i, o)) in self.layers().iter().zip(expected) {
            if layer.input_dim() != i || layer.output_dim() != o || layer.bias.len() != o {
                return Err(Error::InvalidArgument(format!(
                    "inconsistent layer shape: expected {o}x{i}, got {:?} with bias {}",
                    layer.weight.shape(),
                    layer.bias.len()
                )));
            }
        }
        if self
            .tensors()
            .iter()
            .any(|(_, _, data)| data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(())
    }

    /// Encoder mean and log-variance for each column of `power`.
    pub(crate) fn encode_raw(&self, power: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let chunks = chunked_columns(power.ncols(), |lo, hi| {
            let x = power.slice(ndarray::s![.., lo..hi]);
            let h = self.enc_hidden.forward(&x).mapv(f64::tanh);
            let hv = h.view();
            let mean = self.enc_mean.forward(&hv);
            let logvar = self.enc_logvar.forward(&hv);
            ndarray::concatenate(Axis(0), &[mean.view(), logvar.view()]).expect("same width")
        });
        let l = self.latent_dim();
        let stacked = concat_columns(chunks, 2 * l);
        let mean = stacked.slice(ndarray::s![..l, ..]).to_owned();
        let logvar = stacked.slice(ndarray::s![l.., ..]).to_owned();
        (mean, logvar)
    }

    /// Decoder output `log σ_f²(z_t)` for each column of `z`.
    pub(crate) fn decode_log(&self, z: &ArrayView2<f64>) -> Array2<f64> {
        let chunks = chunked_columns(z.ncols(), |lo, hi| {
            let x = z.slice(ndarray::s![.., lo..hi]);
            let h = self.dec_hidden.forward(&x).mapv(f64::tanh);
            self.dec_out.forward(&h.view())
        });
        concat_columns(chunks, self.n_freqs())
    }
}

fn chunked_columns<F>(n: usize, f: F) -> Vec<Array2<f64>>
where
    F: Fn(usize, usize) -> Array2<f64> + Sync + Send,
{
    let n_chunks = n.div_ceil(COLUMN_CHUNK).max(1);
    par::map_indexed(n_chunks, |c| {
        let lo = c * COLUMN_CHUNK;
        let hi = ((c + 1) * COLUMN_CHUNK).min(n);
        f(lo, hi)
    })
}

fn concat_columns(chunks: Vec<Array2<f64>>, rows: usize) -> Array2<f64> {
    if chunks.len() == 1 {
        return chunks.into_iter().next().expect("one chunk");
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    if views.is_empty() {
        return Array2::zeros((rows, 0));
    }
    ndarray::concatenate(Axis(1), &views).expect("row counts agree")
}

fn check_power(m: &VaeModel, power: &ArrayView2<f64>) -> Result<()> {
    if power.nrows() != m.n_freqs() {
        return Err(Error::DimensionMismatch {
            what: "power spectrogram rows vs model frequency bins",
            expected: m.n_freqs(),
            got: power.nrows(),
        });
    }
    if power.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input"));
    }
    if power.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "power spectrogram must be nonnegative".into(),
        ));
    }
    Ok(())
}

/// Runs the encoder on each frame of a power spectrogram.
pub fn encode(m: &VaeModel, power_spec: &Array2<f64>) -> Result<EncoderOutput> {
    let view = power_spec.view();
    check_power(m, &view)?;
    let (mean, logvar) = m.encode_raw(&view);
    Ok(EncoderOutput {
        mean,
        variance: logvar.mapv(f64::exp),
    })
}

/// Speech variances `σ_f²(z_t)`, `F × N`.
pub fn decode(m: &VaeModel, z: &LatentBatch) -> Result<Array2<f64>> {
    if z.z.nrows() != m.latent_dim() {
        return Err(Error::DimensionMismatch {
            what: "latent rows vs model latent dimension",
            expected: m.latent_dim(),
            got: z.z.nrows(),
        });
    }
    Ok(m.decode_log(&z.z.view()).mapv(f64::exp))
}

/// Standard normal draw of the given shape.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `count` reparametrized draws `mean + sqrt(variance) · ε`.
pub fn reparam_sample(out: &EncoderOutput, rng_seed: u64, count: usize) -> Result<Vec<LatentBatch>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let std = out.variance.mapv(f64::sqrt);
    let (l, n) = out.mean.dim();
    (0..count)
        .map(|_| {
            let eps = standard_normal(&mut rng, l, n);
            LatentBatch::new(&out.mean + &(&std * &eps))
        })
        .collect()
}

/// `KL(N(mean, var) || N(0, 1))` summed over all entries.
pub fn kl_to_prior(out: &EncoderOutput) -> f64 {
    ndarray::Zip::from(&out.mean)
        .and(&out.variance)
        .fold(0.0, |acc, &mu, &var| acc + 0.5 * (mu * mu + var - var.ln() - 1.0))
}

/// Evidence lower bound summed over frames,
/// `Σ_t [ −mean_d Σ_f d_IS(|s_ft|², σ_f²(z_t^(d))) − KL(q(z_t) || p(z_t)) ]`.
///
/// `z_samples` are draws from the encoder posterior of `power_spec`; the IS
/// term is averaged over them.
pub fn elbo(m: &VaeModel, power_spec: &Array2<f64>, z_samples: &[LatentBatch]) -> Result<f64> {
    if z_samples.is_empty() {
        return Err(Error::InvalidArgument("at least one latent sample required".into()));
    }
    let out = encode(m, power_spec)?;
    let mut recon = 0.0;
    for z in z_samples {
        if z.n_frames() != power_spec.ncols() {
            return Err(Error::DimensionMismatch {
                what: "latent samples vs spectrogram frames",
                expected: power_spec.ncols(),
                got: z.n_frames(),
            });
        }
        let var = decode(m, z)?;
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite("decoded variance"));
        }
        recon += ndarray::Zip::from(power_spec)
            .and(&var)
            .fold(0.0, |acc, &p, &v| acc + is_div_unchecked(p.max(POWER_FLOOR), v));
    }
    recon /= z_samples.len() as f64;
    Ok(-recon - kl_to_prior(&out))
}

/// Floor applied to power values inside the IS divergence so silent bins
/// keep the objective finite.
pub const POWER_FLOOR: f64 = 1e-12;
