//! Hand-derived reverse pass for the fixed VAE architecture.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::{Dense, VaeModel, POWER_FLOOR};
use crate::error::{Error, Result};

/// Mean negative ELBO over a batch and its gradient with respect to every
/// parameter (stored in a `VaeModel`-shaped container).
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub gradients: VaeModel,
}

fn dense_grad(upstream: &Array2<f64>, input: &ArrayView2<f64>) -> Dense {
    Dense {
        weight: upstream.dot(&input.t()).as_standard_layout().into_owned(),
        bias: upstream.sum_axis(Axis(1)),
    }
}

/// Loss `−(1/B) Σ_t ELBO_t` with a single reparametrized draw per frame,
/// `z_t = μ_t + exp(½ logvar_t) ⊙ ε_t`, and its exact gradient.
///
/// `power` is `F × B`, `noise` (the `ε` draws) is `L × B`.
pub fn loss_and_gradients(
    m: &VaeModel,
    power: &ArrayView2<f64>,
    noise: &ArrayView2<f64>,
) -> Result<BatchLoss> {
    let batch = power.ncols();
    if batch == 0 {
        return Err(Error::EmptyInput("training batch"));
    }
    if power.nrows() != m.n_freqs() {
        return Err(Error::DimensionMismatch {
            what: "batch rows vs model frequency bins",
            expected: m.n_freqs(),
            got: power.nrows(),
        });
    }
    if noise.dim() != (m.latent_dim(), batch) {
        return Err(Error::DimensionMismatch {
            what: "noise rows vs latent dimension",
            expected: m.latent_dim(),
            got: noise.nrows(),
        });
    }
    let inv_b = 1.0 / batch as f64;

    // Forward.
    let enc_h = m.enc_hidden.forward(power).mapv(f64::tanh);
    let mu = m.enc_mean.forward(&enc_h.view());
    let logvar = m.enc_logvar.forward(&enc_h.view());
    let std = logvar.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&std * noise);
    let dec_h = m.dec_hidden.forward(&z.view()).mapv(f64::tanh);
    let log_sigma = m.dec_out.forward(&dec_h.view());

    let mut recon = 0.0;
    // d loss / d log σ² = (1 − u e^{−log σ²}) / B
    let mut g_log_sigma = Array2::zeros(log_sigma.raw_dim());
    Zip::from(&mut g_log_sigma)
        .and(power)
        .and(&log_sigma)
        .for_each(|g, &u, &ls| {
            let u = u.max(POWER_FLOOR);
            let ratio = u * (-ls).exp();
            recon += ratio - ratio.ln() - 1.0;
            *g = (1.0 - ratio) * inv_b;
        });
    let kl: f64 = Zip::from(&mu)
        .and(&logvar)
        .fold(0.0, |acc, &m, &lv| acc + 0.5 * (m * m + lv.exp() - lv - 1.0));
    let loss = (recon + kl) * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }

    // Decoder.
    let g_dec_out = dense_grad(&g_log_sigma, &dec_h.view());
    let mut g_dec_pre = m.dec_out.weight.t().dot(&g_log_sigma);
    Zip::from(&mut g_dec_pre)
        .and(&dec_h)
        .for_each(|g, &h| *g *= 1.0 - h * h);
    let g_dec_hidden = dense_grad(&g_dec_pre, &z.view());
    let g_z = m.dec_hidden.weight.t().dot(&g_dec_pre);

    // Reparametrization and KL.
    let g_mu = Zip::from(&g_z)
        .and(&mu)
        .map_collect(|&gz, &m| gz + m * inv_b);
    let mut g_logvar = Array2::zeros(logvar.raw_dim());
    Zip::from(&mut g_logvar)
        .and(&g_z)
        .and(noise)
        .and(&std)
        .and(&logvar)
        .for_each(|g, &gz, &e, &s, &lv| {
            *g = 0.5 * gz * e * s + 0.5 * (lv.exp() - 1.0) * inv_b;
        });

    // Encoder.
    let g_enc_mean = dense_grad(&g_mu, &enc_h.view());
    let g_enc_logvar = dense_grad(&g_logvar, &enc_h.view());
    let mut g_enc_pre = m.enc_mean.weight.t().dot(&g_mu) + m.enc_logvar.weight.t().dot(&g_logvar);
    Zip::from(&mut g_enc_pre)
        .and(&enc_h)
        .for_each(|g, &h| *g *= 1.0 - h * h);
    let g_enc_hidden = dense_grad(&g_enc_pre, power);

    Ok(BatchLoss {
        loss,
        gradients: VaeModel {
            enc_hidden: g_enc_hidden,
            enc_mean: g_enc_mean,
            enc_logvar: g_enc_logvar,
            dec_hidden: g_dec_hidden,
            dec_out: g_dec_out,
        },
    })
}
