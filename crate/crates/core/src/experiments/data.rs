//! Dataset splits and per-sample link draws.
//!
//! A draw bundles everything random about one sample's trip through the
//! link: pilot noise, the uplink estimate, feedback noise. Each draw has its
//! own RNG stream so batches and evaluation grids are reproducible no matter
//! how they are grouped.

use std::fs::File;
use std::io::BufReader;

use csifb_diffcore::{ParameterStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{derive_seed, to_angular, Dataset};
use crate::cmatrix::ComplexMatrix;
use crate::error::{CsiError, Result};
use crate::experiments::config::ExperimentConfig;
use crate::linklevel::{
    build_pattern, complex_awgn, linear_interpolate, ls_uplink_estimate, receive_downlink_pilots, snr_to_sigma2,
};
use crate::networks::{sef_coarse_estimate, sef_pilot, CeMode, CeNet, Inputs, ModelConfig, Variant};

/// One channel realization in the form the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Angular downlink CSI, the reconstruction target.
    pub g_d: ComplexMatrix,
    /// Spatial uplink CSI.
    pub h_ul: ComplexMatrix,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub dataset_hash: String,
}

/// Loads `cfg.dataset_path` or generates the dataset, then splits it in
/// file order: train, validation, test.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = match &cfg.dataset_path {
        Some(p) => Dataset::read(&mut BufReader::new(File::open(p)?))?,
        None => {
            // round-trip through the file format so generated and loaded
            // datasets carry identical f32-rounded values
            let mut buf = Vec::new();
            Dataset::generate(&cfg.channel, cfg.n_total())?.write(&mut buf)?;
            Dataset::read(&mut buf.as_slice())?
        }
    };
    if ds.config.m_subcarriers != cfg.model.m_subcarriers || ds.config.n_bs != cfg.model.n_bs {
        return Err(CsiError::Config("dataset geometry differs from the model".into()));
    }
    if ds.len() < cfg.n_total() {
        return Err(CsiError::Config(format!("dataset has {} samples, config needs {}", ds.len(), cfg.n_total())));
    }
    let dataset_hash = ds.content_hash()?;
    let mut prepared = ds.samples.iter().map(|s| PreparedSample { g_d: to_angular(&s.h_dl), h_ul: s.h_ul.clone() });
    let train = prepared.by_ref().take(cfg.n_train).collect();
    let val = prepared.by_ref().take(cfg.n_val).collect();
    let test = prepared.take(cfg.n_test).collect();
    Ok(Splits { train, val, test, dataset_hash })
}

/// RNG for stream `(a, b, c)` under `master`.
pub fn stream_rng(master: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(derive_seed(master, a), b), c))
}

/// Trained convolutional CE net with its parameters.
#[derive(Debug, Clone)]
pub struct CeModel {
    pub net: CeNet,
    pub store: ParameterStore<f32>,
}

impl CeModel {
    pub fn apply(&self, x: &ComplexMatrix) -> Result<ComplexMatrix> {
        let mut store = self.store.clone();
        let mut sess = Session::new(&mut store, false);
        let t = sess.constant(complex_tensor(&[x], x.rows())?);
        let y = self.net.forward(&mut sess, t)?;
        let vals: Vec<f64> = sess.graph.value(y).to_f64_vec();
        ComplexMatrix::from_interleaved(x.rows(), x.cols(), &vals)
    }
}

/// Stacks the first `rows` rows of each matrix into `[B, rows, N, 2]`.
pub fn complex_tensor(mats: &[&ComplexMatrix], rows: usize) -> Result<Tensor<f32>> {
    let n = mats[0].cols();
    let mut data = Vec::with_capacity(mats.len() * rows * n * 2);
    for m in mats {
        for z in &m.data()[..rows * n] {
            data.push(z.re as f32);
            data.push(z.im as f32);
        }
    }
    Ok(Tensor::new(&[mats.len(), rows, n, 2], data)?)
}

/// Everything one sample needs besides the network parameters.
#[derive(Debug, Clone)]
pub struct LinkDraw {
    pub snr_u_db: f64,
    pub pilot_noise: ComplexMatrix,
    pub sef_input: Option<ComplexMatrix>,
    /// Uplink CSI seen by the receiver (true or estimated, per strategy).
    pub h_est: ComplexMatrix,
    pub fb_noise: ComplexMatrix,
}

/// Settings shared by every draw of one run.
pub struct LinkSetup<'a> {
    pub model: &'a ModelConfig,
    pub snr_ce_db: f64,
    pub uplink_ce: Option<&'a CeModel>,
    pub training: bool,
}

impl LinkSetup<'_> {
    /// Uplink estimate used for the current phase.
    pub fn uplink_estimate<R: Rng + ?Sized>(
        &self,
        h_ul: &ComplexMatrix,
        sigma2_u: f64,
        rng: &mut R,
    ) -> Result<ComplexMatrix> {
        let m = self.model;
        if !m.strategy.uses_estimate(self.training) || m.ce_mode == CeMode::Ideal {
            return Ok(h_ul.clone());
        }
        let pattern = build_pattern(m.m_subcarriers, m.g_u)?;
        let interp = linear_interpolate(&ls_uplink_estimate(h_ul, &pattern, sigma2_u, rng)?, &pattern)?;
        match m.ce_mode {
            CeMode::Ai => self
                .uplink_ce
                .ok_or_else(|| CsiError::Config("ce_mode = ai needs a trained uplink CE net".into()))?
                .apply(&interp),
            _ => Ok(interp),
        }
    }

    /// Draws noise and estimates for `sample` at uplink SNR `snr_u_db`.
    pub fn draw<R: Rng + ?Sized>(&self, sample: &PreparedSample, snr_u_db: f64, rng: &mut R) -> Result<LinkDraw> {
        let m = self.model;
        let sigma2_d = snr_to_sigma2(self.snr_ce_db);
        let sigma2_u = snr_to_sigma2(snr_u_db);
        let (pilot_noise, sef_input) = if m.variant == Variant::SEFNet && self.training {
            (ComplexMatrix::zeros(m.n_p(), m.l_symbols), None)
        } else if m.variant == Variant::SEFNet {
            let pattern = build_pattern(m.m_subcarriers, m.g_d)?;
            let pilot = sef_pilot(pattern.len(), m.l_symbols, m.n_bs);
            let r = receive_downlink_pilots(&sample.g_d, &pattern, &pilot, sigma2_d, rng)?;
            (ComplexMatrix::zeros(m.n_p(), m.l_symbols), Some(sef_coarse_estimate(&r, &pattern, m.n_bs)?))
        } else {
            let noise = ComplexMatrix::from_fn(m.n_p(), m.l_symbols, |_, _| complex_awgn(rng, sigma2_d));
            (noise, None)
        };
        let h_est = self.uplink_estimate(&sample.h_ul, sigma2_u, rng)?;
        let fb_noise = ComplexMatrix::from_fn(m.k_feedback, m.n_bs, |_, _| complex_awgn(rng, sigma2_u));
        Ok(LinkDraw { snr_u_db, pilot_noise, sef_input, h_est, fb_noise })
    }
}

/// Batch tensors for `samples` with their draws.
pub fn assemble(model: &ModelConfig, samples: &[&PreparedSample], draws: &[LinkDraw]) -> Result<Inputs<f32>> {
    let k = model.k_feedback;
    let m = model.m_subcarriers;
    let g_d: Vec<&ComplexMatrix> = samples.iter().map(|s| &s.g_d).collect();
    let h_ul: Vec<&ComplexMatrix> = samples.iter().map(|s| &s.h_ul).collect();
    let h_est: Vec<&ComplexMatrix> = draws.iter().map(|d| &d.h_est).collect();
    let g_u_hat: Vec<ComplexMatrix> = draws.iter().map(|d| to_angular(&d.h_est)).collect();
    let pilot: Vec<&ComplexMatrix> = draws.iter().map(|d| &d.pilot_noise).collect();
    let fb: Vec<&ComplexMatrix> = draws.iter().map(|d| &d.fb_noise).collect();
    let sef_input = match draws.iter().map(|d| d.sef_input.as_ref()).collect::<Option<Vec<_>>>() {
        Some(v) if !v.is_empty() => Some(complex_tensor(&v, m)?),
        _ => None,
    };
    Ok(Inputs {
        g_d: complex_tensor(&g_d, m)?,
        pilot_noise: complex_tensor(&pilot, model.n_p())?,
        sef_input,
        h_fb: complex_tensor(&h_ul, k)?,
        h_fb_est: complex_tensor(&h_est, k)?,
        fb_noise: complex_tensor(&fb, k)?,
        g_u_hat: complex_tensor(&g_u_hat.iter().collect::<Vec<_>>(), m)?,
    })
}

/// Uniform draw from `[lo, hi]`; a degenerate range returns `lo`.
pub fn uniform_snr<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Interleaved `f64` view of the angular target, one sample after another.
pub fn target_values(samples: &[&PreparedSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.g_d.to_interleaved()).collect()
}
