//! Paired uplink/downlink multipath channels with partial reciprocity.
//!
//! Both links share path angles, delays and powers; only the per-path phases
//! are drawn independently. Angular-domain magnitudes therefore stay strongly
//! correlated across the duplex gap while spatial-domain magnitudes do not.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmatrix::ComplexMatrix;
use crate::error::{CsiError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub n_bs: usize,
    pub n_ue: usize,
    pub m_subcarriers: usize,
    pub f_ul_hz: f64,
    pub f_dl_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub delay_spread_s: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Path power follows `exp(-power_decay * delay / delay_spread)`.
    pub power_decay: f64,
    /// Standard deviation of the per-path log-normal power perturbation, in dB.
    pub cluster_shadowing_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            n_bs: 32,
            n_ue: 1,
            m_subcarriers: 256,
            f_ul_hz: 5.6e9,
            f_dl_hz: 5.4e9,
            subcarrier_spacing_hz: 15e3,
            delay_spread_s: 100e-9,
            n_paths: 24,
            seed: 0,
            power_decay: 3.0,
            cluster_shadowing_db: 3.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CsiError::Config(format!("channel: {msg}")));
        if self.n_ue != 1 {
            return bad("n_ue must be 1");
        }
        if self.n_bs == 0 || self.n_paths == 0 {
            return bad("n_bs and n_paths must be positive");
        }
        if self.m_subcarriers < 2 {
            return bad("m_subcarriers must be at least 2");
        }
        let positive = [self.f_ul_hz, self.f_dl_hz, self.subcarrier_spacing_hz, self.delay_spread_s];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("frequencies, spacing and delay spread must be positive");
        }
        if !(self.power_decay.is_finite() && self.power_decay >= 0.0) {
            return bad("power_decay must be non-negative");
        }
        if !(self.cluster_shadowing_db.is_finite() && self.cluster_shadowing_db >= 0.0) {
            return bad("cluster_shadowing_db must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub angles: Vec<f64>,
    pub delays: Vec<f64>,
    pub powers: Vec<f64>,
    pub phases_ul: Vec<f64>,
    pub phases_dl: Vec<f64>,
}

impl PathSet {
    pub fn n_paths(&self) -> usize {
        self.angles.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Uplink,
    Downlink,
}

pub fn sample_paths<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> Result<PathSet> {
    cfg.validate()?;
    let ds = cfg.delay_spread_s;
    let exp = Exp::new(1.0 / ds).expect("positive rate");
    let mut delays: Vec<f64> = (0..cfg.n_paths)
        .map(|_| loop {
            let d = exp.sample(rng);
            if d <= 10.0 * ds {
                break d;
            }
        })
        .collect();
    delays.sort_by(f64::total_cmp);
    let shadow = Normal::new(0.0, cfg.cluster_shadowing_db).expect("finite std");
    let mut powers: Vec<f64> =
        delays.iter().map(|d| (-cfg.power_decay * d / ds).exp() * 10f64.powf(-shadow.sample(rng) / 10.0)).collect();
    let total: f64 = powers.iter().sum();
    powers.iter_mut().for_each(|p| *p /= total);
    let angles = (0..cfg.n_paths).map(|_| rng.random_range(-PI / 2.0..PI / 2.0)).collect();
    let phases_ul = (0..cfg.n_paths).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let phases_dl = (0..cfg.n_paths).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    Ok(PathSet { angles, delays, powers, phases_ul, phases_dl })
}

/// Half-wavelength ULA response, element `n`: `exp(-j pi n sin(theta) f / f_ref)`.
pub fn steering_vector(theta: f64, n_bs: usize, carrier_hz: f64, f_ref_hz: f64) -> Vec<Complex64> {
    let k = -PI * theta.sin() * carrier_hz / f_ref_hz;
    (0..n_bs).map(|n| Complex64::from_polar(1.0, k * n as f64)).collect()
}

/// Spatial-frequency channel `M x N_BS` of one link.
pub fn synthesize_channel(paths: &PathSet, carrier_hz: f64, cfg: &ChannelConfig, link: Link) -> ComplexMatrix {
    let phases = match link {
        Link::Uplink => &paths.phases_ul,
        Link::Downlink => &paths.phases_dl,
    };
    let (m, n) = (cfg.m_subcarriers, cfg.n_bs);
    let mut h = ComplexMatrix::zeros(m, n);
    for p in 0..paths.n_paths() {
        let a = steering_vector(paths.angles[p], n, carrier_hz, carrier_hz);
        let gain = Complex64::from_polar(paths.powers[p].sqrt(), phases[p]);
        for row in 0..m {
            let f = row as f64 * cfg.subcarrier_spacing_hz;
            let c = gain * Complex64::from_polar(1.0, -2.0 * PI * f * paths.delays[p]);
            for (dst, &ai) in h.row_mut(row).iter_mut().zip(&a) {
                *dst += c * ai;
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h_ul: ComplexMatrix,
    pub h_dl: ComplexMatrix,
    pub paths: PathSet,
    pub seed: u64,
}

/// Per-sample seed from the master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_sample(cfg: &ChannelConfig, seed: u64) -> Result<ChannelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = sample_paths(cfg, &mut rng)?;
    Ok(ChannelSample {
        h_ul: synthesize_channel(&paths, cfg.f_ul_hz, cfg, Link::Uplink),
        h_dl: synthesize_channel(&paths, cfg.f_dl_hz, cfg, Link::Downlink),
        paths,
        seed,
    })
}

/// Unnormalized samples; sample `i` depends only on `(cfg, i)`.
pub fn generate_samples(cfg: &ChannelConfig, n_samples: usize) -> Result<Vec<ChannelSample>> {
    if n_samples == 0 {
        return Err(CsiError::Config("n_samples must be at least 1".into()));
    }
    (0..n_samples as u64).map(|i| generate_sample(cfg, derive_seed(cfg.seed, i))).collect()
}

/// A generated dataset with its global power normalization applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ChannelConfig,
    /// Factor applied to every stored channel so that the mean of
    /// `|H_d|_F^2` over the dataset equals `M * N_BS`.
    pub scale: f64,
    pub samples: Vec<ChannelSample>,
}

impl Dataset {
    pub fn generate(cfg: &ChannelConfig, n_samples: usize) -> Result<Dataset> {
        let mut samples = generate_samples(cfg, n_samples)?;
        let mean: f64 = samples.iter().map(|s| s.h_dl.frobenius_sq()).sum::<f64>() / n_samples as f64;
        let target = (cfg.m_subcarriers * cfg.n_bs) as f64;
        let scale = (target / mean).sqrt();
        for s in &mut samples {
            s.h_ul.scale(scale);
            s.h_dl.scale(scale);
        }
        Ok(Dataset { config: cfg.clone(), scale, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = DatasetHeader {
            config: self.config.clone(),
            n_samples: self.samples.len(),
            scale: self.scale,
            master_seed: self.config.seed,
        };
        let text = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&[DATASET_VERSION])?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(&text)?;
        let mut buf = Vec::new();
        for s in &self.samples {
            buf.clear();
            for v in s.h_ul.to_interleaved_f32().into_iter().chain(s.h_dl.to_interleaved_f32()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a dataset file. Path parameters are not stored; they are
    /// regenerated from each sample's derived seed.
    pub fn read<R: Read>(r: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(CsiError::Format(format!("dataset magic {magic:?}")));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != DATASET_VERSION {
            return Err(CsiError::Format(format!("dataset version {}", version[0])));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut text)?;
        let header: DatasetHeader = serde_json::from_slice(&text)?;
        let cfg = header.config;
        cfg.validate()?;
        let (m, n) = (cfg.m_subcarriers, cfg.n_bs);
        let mut buf = vec![0u8; 2 * 2 * m * n * 4];
        let mut samples = Vec::with_capacity(header.n_samples);
        for i in 0..header.n_samples {
            r.read_exact(&mut buf)?;
            let vals: Vec<f64> =
                buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let (ul, dl) = vals.split_at(2 * m * n);
            let seed = derive_seed(header.master_seed, i as u64);
            let paths = sample_paths(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            samples.push(ChannelSample {
                h_ul: ComplexMatrix::from_interleaved(m, n, ul)?,
                h_dl: ComplexMatrix::from_interleaved(m, n, dl)?,
                paths,
                seed,
            });
        }
        Ok(Dataset { config: cfg, scale: header.scale, samples })
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"FDDS";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    config: ChannelConfig,
    n_samples: usize,
    scale: f64,
    master_seed: u64,
}

fn dft_twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    let norm = 1.0 / (n as f64).sqrt();
    (0..n * n)
        .map(|i| {
            let (a, b) = (i / n, i % n);
            // reduce the exponent first so large a*b keeps full precision
            let k = (a * b) % n;
            Complex64::from_polar(norm, sign * 2.0 * PI * k as f64 / n as f64)
        })
        .collect()
}

fn right_multiply(h: &ComplexMatrix, f: &[Complex64]) -> ComplexMatrix {
    let n = h.cols();
    let mut out = ComplexMatrix::zeros(h.rows(), n);
    for r in 0..h.rows() {
        let src = h.row(r);
        let dst = out.row_mut(r);
        for (a, &x) in src.iter().enumerate() {
            let frow = &f[a * n..(a + 1) * n];
            for (d, &w) in dst.iter_mut().zip(frow) {
                *d += x * w;
            }
        }
    }
    out
}

/// `G = H F` with the unitary DFT `F[a,b] = exp(-j 2 pi a b / N) / sqrt(N)`.
pub fn to_angular(h: &ComplexMatrix) -> ComplexMatrix {
    right_multiply(h, &dft_twiddles(h.cols(), -1.0))
}

/// Inverse of [`to_angular`]: `H = G F^H`.
pub fn to_spatial(g: &ComplexMatrix) -> ComplexMatrix {
    right_multiply(g, &dft_twiddles(g.cols(), 1.0))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CsiError::shape("pearson", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CsiError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Box-plot statistics of a sample of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_values(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciprocityReport {
    pub r_hg: Summary,
    pub r_hh: Summary,
    pub r_gg: Summary,
    /// Samples dropped because one of their magnitude vectors was constant.
    pub skipped: usize,
}

fn first_row_power(h: &ComplexMatrix) -> Vec<f64> {
    h.row(0).iter().map(|z| z.norm_sqr()).collect()
}

/// Pearson statistics of squared magnitudes on the first subcarrier.
pub fn reciprocity_report(samples: &[ChannelSample], n_eval: usize) -> Result<ReciprocityReport> {
    if n_eval == 0 || n_eval > samples.len() {
        return Err(CsiError::Config(format!("n_eval {n_eval} out of range for {} samples", samples.len())));
    }
    let (mut hg, mut hh, mut gg) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for s in &samples[..n_eval] {
        let hu = first_row_power(&s.h_ul);
        let hd = first_row_power(&s.h_dl);
        let gu = first_row_power(&to_angular(&s.h_ul.select_rows(&[0])));
        let gd = first_row_power(&to_angular(&s.h_dl.select_rows(&[0])));
        match (pearson(&hu, &gd), pearson(&hu, &hd), pearson(&gu, &gd)) {
            (Ok(a), Ok(b), Ok(c)) => {
                hg.push(a);
                hh.push(b);
                gg.push(c);
            }
            (Err(CsiError::ZeroVariance), _, _)
            | (_, Err(CsiError::ZeroVariance), _)
            | (_, _, Err(CsiError::ZeroVariance)) => skipped += 1,
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return Err(e),
        }
    }
    let summary = |v: &[f64]| Summary::from_values(v).ok_or(CsiError::ZeroVariance);
    Ok(ReciprocityReport { r_hg: summary(&hg)?, r_hh: summary(&hh)?, r_gg: summary(&gg)?, skipped })
}
