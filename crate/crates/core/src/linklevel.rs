//! Pilot placement, estimation and the fading feedback link.
//!
//! These are the reference (f64, complex) versions of the signal-processing
//! steps. The differentiable pipeline in [`crate::networks`] mirrors them on
//! tensors and is tested against them.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cmatrix::ComplexMatrix;
use crate::error::{CsiError, Result};

/// Equally spaced pilot subcarriers. `positions` are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPattern {
    pub m_total: usize,
    pub interval: usize,
    pub positions: Vec<usize>,
}

impl PilotPattern {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn build_pattern(m_total: usize, interval: usize) -> Result<PilotPattern> {
    if interval == 0 || interval > m_total {
        return Err(CsiError::InvalidInterval { m_total, interval });
    }
    Ok(PilotPattern { m_total, interval, positions: (0..m_total).step_by(interval).collect() })
}

pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Circular complex Gaussian with total variance `sigma2`.
pub fn complex_awgn<R: Rng + ?Sized>(rng: &mut R, sigma2: f64) -> Complex64 {
    if sigma2 == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let n = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("finite variance");
    Complex64::new(n.sample(rng), n.sample(rng))
}

/// Angular pilot set: one `L x N_BS` matrix per pilot subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePilot {
    pub n_p: usize,
    pub l: usize,
    pub n_bs: usize,
    /// Row-major `[n_p, l, n_bs]`.
    pub q: Vec<Complex64>,
}

impl TrainablePilot {
    pub fn new(n_p: usize, l: usize, n_bs: usize, q: Vec<Complex64>) -> Result<Self> {
        if q.len() != n_p * l * n_bs {
            return Err(CsiError::shape("TrainablePilot", n_p * l * n_bs, q.len()));
        }
        Ok(TrainablePilot { n_p, l, n_bs, q })
    }

    /// From interleaved `[n_p, l, n_bs, 2]` reals.
    pub fn from_interleaved(n_p: usize, l: usize, n_bs: usize, values: &[f64]) -> Result<Self> {
        let q = values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Self::new(n_p, l, n_bs, q)
    }

    pub fn row(&self, p: usize, l: usize) -> &[Complex64] {
        &self.q[(p * self.l + l) * self.n_bs..][..self.n_bs]
    }

    /// Projects every length-`n_bs` row onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for row in self.q.chunks_mut(self.n_bs) {
            let n = row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(CsiError::ZeroNorm { op: "TrainablePilot::renormalize" });
            }
            row.iter_mut().for_each(|z| *z /= n);
        }
        Ok(())
    }
}

/// `r(n_p) = g_d(pos[n_p]) Q(n_p)^T + n`, returned as an `N_p x L` matrix.
pub fn receive_downlink_pilots<R: Rng + ?Sized>(
    g_d: &ComplexMatrix,
    pattern: &PilotPattern,
    pilot: &TrainablePilot,
    sigma2_d: f64,
    rng: &mut R,
) -> Result<ComplexMatrix> {
    if g_d.cols() != pilot.n_bs || pattern.len() != pilot.n_p || g_d.rows() != pattern.m_total {
        return Err(CsiError::shape(
            "receive_downlink_pilots",
            (pattern.m_total, pilot.n_p, pilot.n_bs),
            (g_d.rows(), pattern.len(), g_d.cols()),
        ));
    }
    let mut r = ComplexMatrix::zeros(pilot.n_p, pilot.l);
    for (p, &pos) in pattern.positions.iter().enumerate() {
        let g = g_d.row(pos);
        for l in 0..pilot.l {
            let v: Complex64 = g.iter().zip(pilot.row(p, l)).map(|(a, b)| a * b).sum();
            r.set(p, l, v + complex_awgn(rng, sigma2_d));
        }
    }
    Ok(r)
}

/// LS estimate at the uplink pilot positions with all-ones pilots.
pub fn ls_uplink_estimate<R: Rng + ?Sized>(
    h_u: &ComplexMatrix,
    pattern: &PilotPattern,
    sigma2_u: f64,
    rng: &mut R,
) -> Result<ComplexMatrix> {
    if h_u.rows() != pattern.m_total {
        return Err(CsiError::shape("ls_uplink_estimate", pattern.m_total, h_u.rows()));
    }
    let mut est = h_u.select_rows(&pattern.positions);
    est.data_mut().iter_mut().for_each(|z| *z += complex_awgn(rng, sigma2_u));
    Ok(est)
}

/// Per-column piecewise-linear interpolation between pilot rows; rows past
/// the last pilot hold its value.
pub fn linear_interpolate(est: &ComplexMatrix, pattern: &PilotPattern) -> Result<ComplexMatrix> {
    if est.rows() != pattern.len() {
        return Err(CsiError::shape("linear_interpolate", pattern.len(), est.rows()));
    }
    let m = pattern.m_total;
    let pos = &pattern.positions;
    if pos.len() < 2 && m > pos.len() {
        return Err(CsiError::TooFewPilots);
    }
    let mut out = ComplexMatrix::zeros(m, est.cols());
    let mut seg = 0;
    for row in 0..m {
        while seg + 1 < pos.len() && pos[seg + 1] <= row {
            seg += 1;
        }
        if seg + 1 == pos.len() || row <= pos[0] {
            let src = if row <= pos[0] { 0 } else { seg };
            out.row_mut(row).copy_from_slice(est.row(src));
            continue;
        }
        let t = (row - pos[seg]) as f64 / (pos[seg + 1] - pos[seg]) as f64;
        let (a, b) = (est.row(seg), est.row(seg + 1));
        for (c, dst) in out.row_mut(row).iter_mut().enumerate() {
            *dst = a[c] * (1.0 - t) + b[c] * t;
        }
    }
    Ok(out)
}

/// Scales `s` to `|s|^2 = K`.
pub fn power_normalize(s: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = s.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(CsiError::ZeroNorm { op: "power_normalize" });
    }
    let k = (s.len() as f64).sqrt();
    Ok(s.iter().map(|z| z * (k / n)).collect())
}

/// `y(k) = h_u(k) s(k) + n(k)` on the first `K` uplink subcarriers.
pub fn feedback_channel<R: Rng + ?Sized>(
    s: &[Complex64],
    h_u: &ComplexMatrix,
    sigma2_u: f64,
    rng: &mut R,
) -> Result<Vec<Vec<Complex64>>> {
    if s.len() > h_u.rows() {
        return Err(CsiError::shape("feedback_channel", h_u.rows(), s.len()));
    }
    Ok(s.iter()
        .enumerate()
        .map(|(k, &sk)| h_u.row(k).iter().map(|&h| h * sk + complex_awgn(rng, sigma2_u)).collect())
        .collect())
}

/// `h^H y / |h|`.
pub fn mrc_detect(h_est: &[Complex64], y: &[Complex64]) -> Result<Complex64> {
    if h_est.len() != y.len() {
        return Err(CsiError::shape("mrc_detect", h_est.len(), y.len()));
    }
    let n = h_est.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(CsiError::ZeroNorm { op: "mrc_detect" });
    }
    Ok(h_est.iter().zip(y).map(|(h, v)| h.conj() * v).sum::<Complex64>() / n)
}
