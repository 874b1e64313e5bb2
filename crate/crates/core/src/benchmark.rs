//! Seeded three-engine comparison on synthetic mixtures.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::inference::{derive_seed, EngineConfig, Method, ReconMode};
use crate::metrics::{median, mix_at_snr, si_sdr, time_iterations};
use crate::par;
use crate::pipeline::enhance_modes;
use crate::vae::{toy_utterance, VaeModel};

const TAG_SPEECH: u64 = 101;
const TAG_NOISE: u64 = 102;
const TAG_ENGINE: u64 = 103;

/// Stationary coloured Gaussian noise: white noise through a random AR(2)
/// resonance plus a white floor. Depends only on `(seed, index)`.
pub fn stationary_noise(seed: u64, index: u64, len: usize, sample_rate: u32) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let radius: f64 = rng.random_range(0.85..0.97);
    let theta = rng.random_range(0.02..0.5) * std::f64::consts::PI;
    let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
    let floor = rng.random_range(0.05..0.2);
    let (mut y1, mut y2) = (0.0, 0.0);
    let samples = (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            let y = a1 * y1 + a2 * y2 + w * (1.0 - radius);
            y2 = y1;
            y1 = y;
            let white: f64 = rng.sample(StandardNormal);
            y + floor * (1.0 - radius) * white
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Speech reference, scaled noise and mixture of benchmark utterance `index`.
pub fn benchmark_mixture(seed: u64, index: u64, snr_db: f64) -> Result<(Waveform, Waveform, Waveform)> {
    let speech = toy_utterance(derive_seed(seed, TAG_SPEECH, 0), index)?;
    let noise = stationary_noise(
        derive_seed(seed, TAG_NOISE, 0),
        index,
        speech.len(),
        speech.sample_rate,
    )?;
    let (mixture, noise) = mix_at_snr(&speech, &noise, snr_db)?;
    Ok((speech, noise, mixture))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_utterances: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Latent draw counts `D` for the variational engines.
    pub d_values: Vec<usize>,
    /// Kept MH sample counts `R` for MCEM.
    pub r_values: Vec<usize>,
    pub modes: Vec<ReconMode>,
    /// Rank, iteration limits and MH settings shared by every run; `method`,
    /// `samples` and `seed` are overridden per run.
    pub engine: EngineConfig,
    /// Record per-iteration SI-SDR so `iters_to_tol` can be filled.
    pub trace: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_utterances: 20,
            snr_db: 0.0,
            seed: 0,
            methods: Method::ALL.to_vec(),
            d_values: vec![1],
            r_values: vec![5],
            modes: ReconMode::ALL.to_vec(),
            engine: EngineConfig::default(),
            trace: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::InvalidArgument("n_utterances must be at least 1".into()));
        }
        if self.methods.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidArgument("methods and modes must be non-empty".into()));
        }
        let needs_d = self.methods.iter().any(|&m| m != Method::Mcem);
        if needs_d && (self.d_values.is_empty() || self.d_values.contains(&0)) {
            return Err(Error::InvalidArgument("d_values must be non-empty and positive".into()));
        }
        if self.methods.contains(&Method::Mcem) && (self.r_values.is_empty() || self.r_values.contains(&0)) {
            return Err(Error::InvalidArgument("r_values must be non-empty and positive".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidArgument("snr_db must be finite".into()));
        }
        self.engine.validate()
    }

    fn jobs(&self) -> Vec<(usize, Method, usize)> {
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        let mut jobs = Vec::new();
        for u in 0..self.n_utterances {
            for &method in &methods {
                let counts = if method == Method::Mcem { &self.r_values } else { &self.d_values };
                for &d in counts {
                    jobs.push((u, method, d));
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    /// `D` for the variational engines, `R` for MCEM.
    #[serde(rename = "D")]
    pub d: usize,
    pub mode: ReconMode,
    pub utterance: usize,
    pub si_sdr: f64,
    pub iters: usize,
    pub ms_per_iter: f64,
    pub iters_to_tol: Option<usize>,
    pub input_si_sdr: f64,
}

impl BenchRow {
    pub fn improvement(&self) -> f64 {
        self.si_sdr - self.input_si_sdr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    #[serde(rename = "D")]
    pub d: usize,
    pub mode: ReconMode,
    pub n: usize,
    pub median_si_sdr: f64,
    pub median_improvement: f64,
    pub median_iters: f64,
    pub mean_ms_per_iter: f64,
    pub median_iters_to_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRatio {
    pub mcem_r: usize,
    pub vem_d: usize,
    pub mcem_ms_per_iter: f64,
    pub vem_ms_per_iter: f64,
    /// `mcem_ms_per_iter / vem_ms_per_iter`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub groups: Vec<GroupSummary>,
    pub median_input_si_sdr: f64,
    pub cost_ratio: Option<CostRatio>,
    /// Median SI-SDR of VEM minus that of the heuristic, MH-Wiener at the
    /// smallest `D`.
    pub vem_minus_heuristic_db: Option<f64>,
}

impl BenchmarkSummary {
    pub fn group(&self, method: Method, d: usize, mode: ReconMode) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.method == method && g.d == d && g.mode == mode)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    /// Sorted by method, count, mode, utterance.
    pub rows: Vec<BenchRow>,
    pub summary: BenchmarkSummary,
}

impl BenchmarkResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }
}

/// Runs every configured engine on `cfg.n_utterances` seeded mixtures.
pub fn run_benchmark(m: &VaeModel, cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let utterances = par::map_indexed(cfg.n_utterances, |u| {
        benchmark_mixture(cfg.seed, u as u64, cfg.snr_db)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let input_sdr = utterances
        .iter()
        .map(|(s, _, mix)| si_sdr(s, mix))
        .collect::<Result<Vec<_>>>()?;

    let jobs = cfg.jobs();
    let results = par::map_indexed(jobs.len(), |j| -> Result<Vec<BenchRow>> {
        let (u, method, d) = jobs[j];
        let (speech, _, mixture) = &utterances[u];
        let engine = EngineConfig {
            method,
            samples: d,
            seed: derive_seed(cfg.seed, TAG_ENGINE, u as u64),
            ..cfg.engine.clone()
        };
        let modes: Vec<ReconMode> = if method == Method::Mcem {
            vec![ReconMode::Mh]
        } else {
            cfg.modes.clone()
        };
        let reference = cfg.trace.then_some(speech);
        let out = enhance_modes(mixture, m, &engine, &modes, reference)?;
        let timing = time_iterations(&out.report);
        out.estimates
            .iter()
            .map(|(mode, est)| {
                Ok(BenchRow {
                    method,
                    d,
                    mode: *mode,
                    utterance: u,
                    si_sdr: si_sdr(speech, est)?,
                    iters: timing.iterations,
                    ms_per_iter: timing.mean_ms_per_iter,
                    iters_to_tol: timing.iters_to_tol,
                    input_si_sdr: input_sdr[u],
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        (a.method, a.d, a.mode, a.utterance).cmp(&(b.method, b.d, b.mode, b.utterance))
    });
    let summary = summarize(&rows, &input_sdr);
    Ok(BenchmarkResult { rows, summary })
}

fn summarize(rows: &[BenchRow], input_sdr: &[f64]) -> BenchmarkSummary {
    let mut keys: Vec<(Method, usize, ReconMode)> = rows.iter().map(|r| (r.method, r.d, r.mode)).collect();
    keys.dedup();
    let groups: Vec<GroupSummary> = keys
        .into_iter()
        .map(|(method, d, mode)| {
            let g: Vec<&BenchRow> = rows
                .iter()
                .filter(|r| r.method == method && r.d == d && r.mode == mode)
                .collect();
            let col = |f: &dyn Fn(&BenchRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let tol: Vec<f64> = g.iter().filter_map(|r| r.iters_to_tol.map(|v| v as f64)).collect();
            GroupSummary {
                method,
                d,
                mode,
                n: g.len(),
                median_si_sdr: median(&col(&|r| r.si_sdr)).unwrap_or(f64::NAN),
                median_improvement: median(&col(&|r| r.improvement())).unwrap_or(f64::NAN),
                median_iters: median(&col(&|r| r.iters as f64)).unwrap_or(f64::NAN),
                mean_ms_per_iter: col(&|r| r.ms_per_iter).iter().sum::<f64>() / g.len() as f64,
                median_iters_to_tol: if tol.len() == g.len() { median(&tol) } else { None },
            }
        })
        .collect();

    let first = |method: Method, mode: ReconMode, preferred: usize| {
        groups
            .iter()
            .filter(|g| g.method == method && g.mode == mode)
            .min_by_key(|g| (g.d != preferred, g.d))
    };
    let cost_ratio = match (first(Method::Mcem, ReconMode::Mh, 5), first(Method::Vem, ReconMode::Mh, 1)) {
        (Some(mc), Some(v)) => Some(CostRatio {
            mcem_r: mc.d,
            vem_d: v.d,
            mcem_ms_per_iter: mc.mean_ms_per_iter,
            vem_ms_per_iter: v.mean_ms_per_iter,
            ratio: mc.mean_ms_per_iter / v.mean_ms_per_iter,
        }),
        _ => None,
    };
    let vem_minus_heuristic_db = match (
        first(Method::Vem, ReconMode::Mh, 1),
        first(Method::Heuristic, ReconMode::Mh, 1),
    ) {
        (Some(v), Some(h)) => Some(v.median_si_sdr - h.median_si_sdr),
        _ => None,
    };
    BenchmarkSummary {
        groups,
        median_input_si_sdr: median(input_sdr).unwrap_or(f64::NAN),
        cost_ratio,
        vem_minus_heuristic_db,
    }
}
