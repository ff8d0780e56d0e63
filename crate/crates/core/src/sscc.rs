//! Separate source-channel coding baseline: quantize, convolutionally code,
//! QAM-modulate, and send over the fading feedback link.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmatrix::ComplexMatrix;
use crate::error::{CsiError, Result};
use crate::linklevel::{feedback_channel, mrc_detect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeRate {
    #[serde(rename = "1/3")]
    OneThird,
    #[serde(rename = "2/3")]
    TwoThirds,
    #[serde(rename = "3/4")]
    ThreeQuarters,
}

impl CodeRate {
    /// `(numerator, denominator)`.
    pub fn ratio(self) -> (usize, usize) {
        match self {
            CodeRate::OneThird => (1, 3),
            CodeRate::TwoThirds => (2, 3),
            CodeRate::ThreeQuarters => (3, 4),
        }
    }

    /// Keep-mask over one puncturing period, three mother-code outputs
    /// (generators 133, 171, 165) per input bit.
    pub fn puncture_mask(self) -> &'static [bool] {
        const T: bool = true;
        const F: bool = false;
        match self {
            CodeRate::OneThird => &[T, T, T],
            CodeRate::TwoThirds => &[T, T, F, T, F, F],
            CodeRate::ThreeQuarters => &[T, T, F, T, F, F, F, T, F],
        }
    }

    /// Input bits per puncturing period.
    pub fn period(self) -> usize {
        self.puncture_mask().len() / 3
    }
}

impl fmt::Display for CodeRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.ratio();
        write!(f, "{n}/{d}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsccConfig {
    pub e_neurons: usize,
    pub b_bits: u32,
    pub code_rate: CodeRate,
    pub mod_order_bits: u32,
    #[serde(default)]
    pub offset_enabled: bool,
}

impl SsccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_neurons == 0 || !(1..=16).contains(&self.b_bits) {
            return Err(CsiError::Config("sscc: e_neurons must be positive and b_bits in 1..=16".into()));
        }
        if ![2, 4, 6, 8].contains(&self.mod_order_bits) {
            return Err(CsiError::Config(format!("sscc: modulation order {} not in {{2,4,6,8}}", self.mod_order_bits)));
        }
        Ok(())
    }

    /// Curve label such as `ed16_Q2_O6`.
    pub fn label(&self) -> String {
        format!("ed{}_Q{}_O{}", self.e_neurons, self.b_bits, self.mod_order_bits)
    }
}

/// `K = ceil(e B / (R O))`, computed exactly.
pub fn bandwidth_symbols(cfg: &SsccConfig) -> usize {
    let (num, den) = cfg.code_rate.ratio();
    let top = cfg.e_neurons * cfg.b_bits as usize * den;
    let bottom = num * cfg.mod_order_bits as usize;
    top.div_ceil(bottom)
}

/// Index of the mid-rise cell containing `x`, clamped to `[-1, 1]`.
pub fn quantize_index(x: f64, b_bits: u32) -> u32 {
    let levels = 1u32 << b_bits;
    let step = 2.0 / levels as f64;
    ((x + 1.0) / step).floor().clamp(0.0, (levels - 1) as f64) as u32
}

pub fn dequantize_index(i: u32, b_bits: u32) -> f64 {
    let step = 2.0 / (1u32 << b_bits) as f64;
    -1.0 + (i as f64 + 0.5) * step
}

pub fn quantize(x: &[f64], b_bits: u32) -> Vec<u32> {
    x.iter().map(|&v| quantize_index(v, b_bits)).collect()
}

pub fn dequantize(idx: &[u32], b_bits: u32) -> Vec<f64> {
    idx.iter().map(|&i| dequantize_index(i, b_bits)).collect()
}

/// `dequantize(quantize(x))` for one value.
pub fn quantize_value(x: f64, b_bits: u32) -> f64 {
    dequantize_index(quantize_index(x, b_bits), b_bits)
}

pub const GENERATORS: [u32; 3] = [0o133, 0o171, 0o165];
pub const CONSTRAINT_LENGTH: usize = 7;
pub const TAIL_BITS: usize = CONSTRAINT_LENGTH - 1;
const N_STATES: usize = 1 << TAIL_BITS;

/// Viterbi decoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecState {
    pub traceback: usize,
}

impl Default for CodecState {
    fn default() -> Self {
        CodecState { traceback: 96 }
    }
}

/// Zero bits appended to a message of `msg_len` bits so that message plus
/// tail fills whole puncturing periods.
pub fn padding_bits(msg_len: usize, rate: CodeRate) -> usize {
    let p = rate.period();
    (p - (msg_len + TAIL_BITS) % p) % p
}

fn branch_outputs(register: u32) -> [u8; 3] {
    GENERATORS.map(|g| ((register & g).count_ones() & 1) as u8)
}

/// Mother-code rate-1/3 output for `bits` followed by the zero tail, then punctured.
pub fn conv_encode(bits: &[u8], rate: CodeRate) -> Vec<u8> {
    let pad = padding_bits(bits.len(), rate);
    let mask = rate.puncture_mask();
    let mut state = 0u32;
    let mut out = Vec::with_capacity((bits.len() + pad + TAIL_BITS) * 3);
    let input = bits.iter().copied().chain(std::iter::repeat_n(0, pad + TAIL_BITS));
    for (t, b) in input.enumerate() {
        let reg = ((b as u32 & 1) << TAIL_BITS) | state;
        let outs = branch_outputs(reg);
        for (j, &o) in outs.iter().enumerate() {
            if mask[(t * 3 + j) % mask.len()] {
                out.push(o);
            }
        }
        state = reg >> 1;
    }
    out
}

/// Coded length for a message of `msg_len` bits.
pub fn coded_len(msg_len: usize, rate: CodeRate) -> usize {
    let steps = msg_len + padding_bits(msg_len, rate) + TAIL_BITS;
    let mask = rate.puncture_mask();
    (0..steps * 3).filter(|i| mask[i % mask.len()]).count()
}

/// Hard-decision Viterbi decoding of a zero-tail punctured codeword.
///
/// Punctured positions are erasures and contribute nothing to the path
/// metric. Padding and tail steps only follow the zero branch. Bits are released with a sliding traceback of `state.traceback`
/// steps; the final window is traced back from the all-zero state.
pub fn viterbi_decode(coded: &[u8], rate: CodeRate, msg_len: usize, state: &CodecState) -> Result<Vec<u8>> {
    let expected = coded_len(msg_len, rate);
    if coded.len() != expected {
        return Err(CsiError::shape("viterbi_decode", expected, coded.len()));
    }
    let steps = msg_len + padding_bits(msg_len, rate) + TAIL_BITS;
    let mask = rate.puncture_mask();
    let mut received = vec![None; steps * 3];
    let mut it = coded.iter();
    for (i, slot) in received.iter_mut().enumerate() {
        if mask[i % mask.len()] {
            *slot = it.next().copied();
        }
    }
    let outputs: Vec<[u8; 3]> = (0..(1u32 << CONSTRAINT_LENGTH)).map(branch_outputs).collect();
    const INF: u32 = u32::MAX / 2;
    let mut metric = vec![INF; N_STATES];
    metric[0] = 0;
    let mut next = vec![INF; N_STATES];
    // decisions[t][s] = dropped (oldest) bit of the surviving predecessor of s
    let mut decisions = vec![0u8; steps * N_STATES];
    let depth = state.traceback.max(1);
    let mut decoded = vec![0u8; steps];

    let trace = |decisions: &[u8], from_t: usize, mut s: usize, stop: usize, decoded: &mut [u8], write_all: bool| {
        // walks back from step `from_t` (inclusive) down to `stop`
        let mut t = from_t;
        loop {
            let bit = (s >> (TAIL_BITS - 1)) as u8;
            if write_all || t == stop {
                decoded[t] = bit;
            }
            if t == stop {
                break;
            }
            let dropped = decisions[t * N_STATES + s] as usize;
            s = ((s << 1) & (N_STATES - 1)) | dropped;
            t -= 1;
        }
    };

    for t in 0..steps {
        next.fill(INF);
        let rx = &received[t * 3..t * 3 + 3];
        for s in 0..N_STATES {
            if metric[s] >= INF {
                continue;
            }
            // padding and tail bits are known zeros
            for b in 0..if t < msg_len { 2u32 } else { 1 } {
                let reg = (b << TAIL_BITS) | s as u32;
                let out = &outputs[reg as usize];
                let cost: u32 = rx.iter().zip(out).map(|(r, &o)| matches!(r, Some(v) if *v != o) as u32).sum();
                let ns = (reg >> 1) as usize;
                let m = metric[s] + cost;
                if m < next[ns] {
                    next[ns] = m;
                    decisions[t * N_STATES + ns] = (s & 1) as u8;
                }
            }
        }
        std::mem::swap(&mut metric, &mut next);
        if t >= depth {
            let best = (0..N_STATES).min_by_key(|&s| metric[s]).unwrap();
            trace(&decisions, t, best, t - depth, &mut decoded, false);
        }
    }
    // earlier bits were released by the sliding window
    trace(&decisions, steps - 1, 0, steps.saturating_sub(depth), &mut decoded, true);
    Ok(decoded[..msg_len].to_vec())
}

fn gray_to_binary(mut g: u32) -> u32 {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

fn binary_to_gray(b: u32) -> u32 {
    b ^ (b >> 1)
}

fn check_order(order: u32) -> Result<()> {
    if [2, 4, 6, 8].contains(&order) {
        Ok(())
    } else {
        Err(CsiError::Config(format!("modulation order {order} not in {{2,4,6,8}}")))
    }
}

/// Amplitude scale giving unit average energy for a square constellation.
pub fn qam_scale(order: u32) -> f64 {
    let levels = (1u32 << (order / 2)) as f64;
    1.0 / (2.0 * (levels * levels - 1.0) / 3.0).sqrt()
}

fn axis_level(bits: &[u8], levels: u32) -> f64 {
    let g = bits.iter().fold(0u32, |acc, &b| (acc << 1) | (b as u32 & 1));
    (levels - 1) as f64 - 2.0 * gray_to_binary(g) as f64
}

/// Square Gray-mapped QAM. The first `O/2` bits of each group pick the
/// in-phase level, MSB first; bit value 0 maps to the positive extreme.
/// Trailing bits are zero-padded to a whole symbol.
pub fn qam_modulate(bits: &[u8], order: u32) -> Result<Vec<Complex64>> {
    check_order(order)?;
    let o = order as usize;
    let half = o / 2;
    let levels = 1u32 << half;
    let scale = qam_scale(order);
    let mut padded = bits.to_vec();
    padded.resize(bits.len().div_ceil(o) * o, 0);
    Ok(padded
        .chunks_exact(o)
        .map(|c| Complex64::new(axis_level(&c[..half], levels), axis_level(&c[half..], levels)) * scale)
        .collect())
}

fn axis_bits(x: f64, levels: u32, half: usize, out: &mut Vec<u8>) {
    let i = (((levels - 1) as f64 - x) / 2.0).round().clamp(0.0, (levels - 1) as f64) as u32;
    let g = binary_to_gray(i);
    for k in (0..half).rev() {
        out.push(((g >> k) & 1) as u8);
    }
}

/// Nearest-neighbour hard decisions.
pub fn qam_demodulate(symbols: &[Complex64], order: u32) -> Result<Vec<u8>> {
    check_order(order)?;
    let half = order as usize / 2;
    let levels = 1u32 << half;
    let scale = qam_scale(order);
    let mut out = Vec::with_capacity(symbols.len() * order as usize);
    for z in symbols {
        axis_bits(z.re / scale, levels, half, &mut out);
        axis_bits(z.im / scale, levels, half, &mut out);
    }
    Ok(out)
}

/// Outcome of one pass through the coded link.
#[derive(Debug, Clone, PartialEq)]
pub struct SsccOutput {
    /// Dequantized features as seen by the receiver.
    pub features: Vec<f64>,
    pub bit_errors: usize,
    /// Subcarriers occupied, including the code tail and padding.
    pub symbols_used: usize,
}

/// Feature bits, MSB first per quantization index.
pub fn features_to_bits(features: &[f64], b_bits: u32) -> Vec<u8> {
    quantize(features, b_bits).into_iter().flat_map(|i| (0..b_bits).rev().map(move |k| ((i >> k) & 1) as u8)).collect()
}

pub fn bits_to_features(bits: &[u8], b_bits: u32) -> Vec<f64> {
    bits.chunks_exact(b_bits as usize)
        .map(|c| dequantize_index(c.iter().fold(0u32, |a, &b| (a << 1) | b as u32), b_bits))
        .collect()
}

/// Quantize, code, modulate, transmit, equalize and decode one feature vector.
///
/// `h_est` is the receiver's uplink estimate; pass `h_u` itself for perfect CSI.
pub fn sscc_transmit<R: Rng + ?Sized>(
    features: &[f64],
    cfg: &SsccConfig,
    h_u: &ComplexMatrix,
    h_est: &ComplexMatrix,
    sigma2_u: f64,
    codec: &CodecState,
    rng: &mut R,
) -> Result<SsccOutput> {
    cfg.validate()?;
    if features.len() != cfg.e_neurons {
        return Err(CsiError::shape("sscc_transmit", cfg.e_neurons, features.len()));
    }
    let bits = features_to_bits(features, cfg.b_bits);
    let coded = conv_encode(&bits, cfg.code_rate);
    let symbols = qam_modulate(&coded, cfg.mod_order_bits)?;
    if symbols.len() > h_u.rows() {
        return Err(CsiError::Config(format!(
            "sscc needs {} subcarriers, only {} available",
            symbols.len(),
            h_u.rows()
        )));
    }
    let y = feedback_channel(&symbols, h_u, sigma2_u, rng)?;
    let mut eq = Vec::with_capacity(symbols.len());
    for (k, yk) in y.iter().enumerate() {
        let h = h_est.row(k);
        let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        eq.push(mrc_detect(h, yk)? / norm);
    }
    let mut rx = qam_demodulate(&eq, cfg.mod_order_bits)?;
    rx.truncate(coded.len());
    let decoded = viterbi_decode(&rx, cfg.code_rate, bits.len(), codec)?;
    let bit_errors = decoded.iter().zip(&bits).filter(|(a, b)| a != b).count();
    Ok(SsccOutput { features: bits_to_features(&decoded, cfg.b_bits), bit_errors, symbols_used: symbols.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn puncturing_hits_target_rates() {
        for rate in [CodeRate::OneThird, CodeRate::TwoThirds, CodeRate::ThreeQuarters] {
            let (n, d) = rate.ratio();
            let kept = rate.puncture_mask().iter().filter(|&&k| k).count();
            assert_eq!(kept * n, rate.period() * d, "{rate}");
        }
    }

    #[test]
    fn gray_code_round_trip() {
        for b in 0..256 {
            assert_eq!(gray_to_binary(binary_to_gray(b)), b);
            assert_eq!((binary_to_gray(b) ^ binary_to_gray(b + 1)).count_ones(), 1);
        }
    }

    #[test]
    fn qpsk_zero_bits_map_to_first_quadrant() {
        let s = qam_modulate(&[0, 0], 2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - Complex64::new(r, r)).norm() < 1e-15);
    }

    #[test]
    fn labels_and_padding() {
        let cfg = SsccConfig {
            e_neurons: 16,
            b_bits: 2,
            code_rate: CodeRate::OneThird,
            mod_order_bits: 6,
            offset_enabled: false,
        };
        assert_eq!(cfg.label(), "ed16_Q2_O6");
        assert_eq!(padding_bits(32, CodeRate::TwoThirds), 0);
        assert_eq!(padding_bits(33, CodeRate::TwoThirds), 1);
        assert_eq!(padding_bits(96, CodeRate::ThreeQuarters), 0);
        assert_eq!(coded_len(32, CodeRate::OneThird), 114);
    }
}
