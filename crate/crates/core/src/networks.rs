//! The feedback autoencoder and its variants, plus the convolutional CE nets.
//!
//! Everything here runs on batched tensors in the diffcore graph. Noise,
//! uplink estimates and other non-differentiable inputs are prepared by the
//! caller and handed over as constants in [`Inputs`].

use csifb_diffcore::{Activation, BatchNormConfig, Conv, Dense, ParameterStore, Role, Scalar, Session, Tensor, Var};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmatrix::ComplexMatrix;
use crate::error::{CsiError, Result};
use crate::linklevel::{PilotPattern, TrainablePilot};
use crate::sscc::{bandwidth_symbols, quantize_value, SsccConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    UJEFNet,
    JEFNet,
    DJEFNet,
    SEFNet,
    TwoStageUJEFNet,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::UJEFNet, Variant::JEFNet, Variant::DJEFNet, Variant::SEFNet, Variant::TwoStageUJEFNet];

    pub fn refine(self) -> RefineKind {
        match self {
            Variant::JEFNet | Variant::SEFNet => RefineKind::None,
            Variant::DJEFNet => RefineKind::Plain,
            Variant::UJEFNet | Variant::TwoStageUJEFNet => RefineKind::Joint,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::UJEFNet => "UJEFNet",
            Variant::JEFNet => "JEFNet",
            Variant::DJEFNet => "DJEFNet",
            Variant::SEFNet => "SEFNet",
            Variant::TwoStageUJEFNet => "TwoStageUJEFNet",
        }
    }
}

/// Decoder-side refinement after the initial reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineKind {
    None,
    /// Residual blocks on the reconstruction alone.
    Plain,
    /// Residual blocks fed the reconstruction concatenated with the uplink estimate.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeMode {
    Ideal,
    Ls,
    Ai,
}

/// Which uplink estimate the feedback receiver and refine module see.
///
/// `1`: true uplink in training and test. `2`: true uplink in training,
/// estimated in test. `3`: estimated in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Strategy {
    S1,
    S2,
    S3,
}

impl Strategy {
    pub fn uses_estimate(self, training: bool) -> bool {
        match self {
            Strategy::S1 => false,
            Strategy::S2 => !training,
            Strategy::S3 => true,
        }
    }
}

impl TryFrom<u8> for Strategy {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Strategy::S1),
            2 => Ok(Strategy::S2),
            3 => Ok(Strategy::S3),
            _ => Err(format!("strategy must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        match s {
            Strategy::S1 => 1,
            Strategy::S2 => 2,
            Strategy::S3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub k_feedback: usize,
    pub m_subcarriers: usize,
    pub n_bs: usize,
    /// Downlink pilot interval; pilot subcarriers are `0, g_d, 2 g_d, ...`.
    pub g_d: usize,
    pub l_symbols: usize,
    /// Uplink pilot interval for LS and AI estimation.
    pub g_u: usize,
    pub t_refine: usize,
    pub ce_mode: CeMode,
    pub strategy: Strategy,
    pub leaky_slope: f64,
    pub batchnorm: BatchNormConfig,
    pub sscc: Option<SsccConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::UJEFNet,
            k_feedback: 16,
            m_subcarriers: 256,
            n_bs: 32,
            g_d: 4,
            l_symbols: 16,
            g_u: 4,
            t_refine: 2,
            ce_mode: CeMode::Ideal,
            strategy: Strategy::S1,
            leaky_slope: 0.3,
            batchnorm: BatchNormConfig::default(),
            sscc: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Number of downlink pilot subcarriers.
    pub fn n_p(&self) -> usize {
        self.m_subcarriers.div_ceil(self.g_d)
    }

    pub fn pilot_positions(&self) -> Vec<usize> {
        (0..self.m_subcarriers).step_by(self.g_d).collect()
    }

    /// Real-valued width of the encoder output.
    pub fn feature_width(&self) -> usize {
        match &self.sscc {
            Some(s) => s.e_neurons,
            None => 2 * self.k_feedback,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CsiError::Config(msg));
        if self.k_feedback == 0 || self.n_bs == 0 || self.l_symbols == 0 {
            return bad("k_feedback, n_bs and l_symbols must be positive".into());
        }
        if self.m_subcarriers == 0 || !self.m_subcarriers.is_multiple_of(8) {
            return bad(format!("m_subcarriers = {} must be a positive multiple of 8", self.m_subcarriers));
        }
        if self.k_feedback > self.m_subcarriers {
            return bad(format!("k_feedback = {} exceeds {} subcarriers", self.k_feedback, self.m_subcarriers));
        }
        if self.g_d == 0 || self.g_d > self.m_subcarriers {
            return Err(CsiError::InvalidInterval { m_total: self.m_subcarriers, interval: self.g_d });
        }
        if self.g_u == 0 || self.g_u > self.m_subcarriers {
            return Err(CsiError::InvalidInterval { m_total: self.m_subcarriers, interval: self.g_u });
        }
        if self.variant.refine() != RefineKind::None && self.t_refine == 0 {
            return bad(format!("{} needs t_refine >= 1", self.variant.name()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        if let Some(s) = &self.sscc {
            s.validate()?;
            let k = bandwidth_symbols(s);
            if k != self.k_feedback {
                return bad(format!(
                    "sscc {} occupies K = {k}, config has k_feedback = {}",
                    s.label(),
                    self.k_feedback
                ));
            }
        }
        Ok(())
    }

    /// Refine blocks actually built for this variant.
    pub fn refine_blocks(&self) -> usize {
        if self.variant.refine() == RefineKind::None {
            0
        } else {
            self.t_refine.max(1)
        }
    }
}

/// Per-batch constants. Complex tensors carry a trailing axis of 2.
#[derive(Debug, Clone)]
pub struct Inputs<T> {
    /// Angular downlink CSI `[B, M, N, 2]`; also the training target.
    pub g_d: Tensor<T>,
    /// Downlink pilot noise `[B, N_p, L, 2]`; unused by SEFNet.
    pub pilot_noise: Tensor<T>,
    /// Coarse interpolated downlink estimate `[B, M, N, 2]` for SEFNet. When
    /// absent, SEFNet encodes the ideal `g_d` instead of the CE net's output.
    pub sef_input: Option<Tensor<T>>,
    /// True uplink on the feedback subcarriers `[B, K, N, 2]`.
    pub h_fb: Tensor<T>,
    /// Receiver-side estimate of `h_fb`.
    pub h_fb_est: Tensor<T>,
    /// Feedback noise `[B, K, N, 2]`.
    pub fb_noise: Tensor<T>,
    /// Angular uplink estimate `[B, M, N, 2]` for the joint refine module.
    pub g_u_hat: Tensor<T>,
}

pub type Trace = Vec<(String, Vec<usize>)>;

/// Graph handles from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Encoder output before the link: normalized symbols `[B, K, 2]`, or
    /// tanh features `[B, e]` for SSCC.
    pub features: Var,
    /// Decoder input `[B, width]`.
    pub received: Var,
    pub g_bar: Var,
    pub g_hat: Var,
    pub loss: Var,
    /// Per-sample output shape of each named stage.
    pub trace: Trace,
}

/// Three 3x3 Conv+SeLU layers (16, 16, 2 filters) plus an identity skip.
#[derive(Debug, Clone)]
pub struct CeNet {
    layers: [Conv; 3],
}

impl CeNet {
    pub fn new(prefix: &str) -> Self {
        let conv = |i: usize, c_in, c_out| {
            Conv::new(format!("{prefix}.conv{i}"), c_in, c_out, (3, 3)).activation(Activation::Selu)
        };
        CeNet { layers: [conv(1, 2, 16), conv(2, 16, 16), conv(3, 16, 2)] }
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        for l in &self.layers {
            l.declare(store, rng)?;
        }
        Ok(())
    }

    /// `x [B, M, N, 2]` to the same shape.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(sess, h)?;
        }
        Ok(sess.graph.add(h, x)?)
    }

    pub fn prefix(&self) -> &str {
        self.layers[0].name.split('.').next().unwrap_or_default()
    }
}

/// The feedback autoencoder for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    enc: [Conv; 2],
    enc_fc: Dense,
    offset: Option<Dense>,
    dec_fc: Dense,
    dec_conv0: Conv,
    res: Vec<[Conv; 2]>,
    up: [Conv; 3],
    refine: Vec<[Conv; 2]>,
    dce: Option<CeNet>,
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bn = cfg.batchnorm;
        let leaky = Activation::LeakyRelu(cfg.leaky_slope);
        let (m, n) = (cfg.m_subcarriers, cfg.n_bs);
        let conv =
            |name: String, c_in, c_out, k| Conv::new(name, c_in, c_out, (k, k)).with_batchnorm(bn).activation(leaky);
        let enc_in = match cfg.variant {
            Variant::SEFNet => 2 * m * n,
            _ => 2 * cfg.n_p() * cfg.l_symbols,
        };
        let width = cfg.feature_width();
        let enc_act = if cfg.sscc.is_some() { Activation::Tanh } else { Activation::Linear };
        let offset = cfg
            .sscc
            .filter(|s| s.offset_enabled)
            .map(|s| Dense::new("offset.fc", s.e_neurons, s.e_neurons, Activation::Linear));
        let refine_in = if cfg.variant.refine() == RefineKind::Joint { 4 } else { 2 };
        let up = |i: usize, c_in, c_out| {
            Conv::new(format!("dec.up{i}"), c_in, c_out, (3, 3)).transposed().stride((2, 1)).with_batchnorm(bn)
        };
        Ok(Network {
            enc: [conv("enc.conv1".into(), 2, 2, 7), conv("enc.conv2".into(), 2, 2, 7)],
            enc_fc: Dense::new("enc.fc", enc_in, width, enc_act),
            offset,
            dec_fc: Dense::new("dec.fc", width, (m / 8) * n * 2, Activation::Linear),
            dec_conv0: conv("dec.conv0".into(), 2, 2, 7),
            res: (0..5)
                .map(|i| [conv(format!("dec.res{i}.a"), 2, 16, 3), conv(format!("dec.res{i}.b"), 16, 2, 3)])
                .collect(),
            up: [up(1, 2, 16).activation(leaky), up(2, 16, 16).activation(leaky), up(3, 16, 2)],
            refine: (0..cfg.refine_blocks())
                .map(|t| {
                    [
                        conv(format!("ref{t}.a"), refine_in, 16, 3),
                        Conv::new(format!("ref{t}.b"), 16, 2, (3, 3)).with_batchnorm(bn),
                    ]
                })
                .collect(),
            dce: (cfg.variant == Variant::SEFNet).then(|| CeNet::new("dce")),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn downlink_ce(&self) -> Option<&CeNet> {
        self.dce.as_ref()
    }

    /// Declares every parameter. Layers shared between variants are declared
    /// first and in a fixed order so equal seeds give them equal values.
    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        for l in &self.enc {
            l.declare(store, rng)?;
        }
        self.enc_fc.declare(store, rng)?;
        self.dec_fc.declare(store, rng)?;
        self.dec_conv0.declare(store, rng)?;
        for l in self.res.iter().flatten() {
            l.declare(store, rng)?;
        }
        for l in &self.up {
            l.declare(store, rng)?;
        }
        if self.cfg.variant != Variant::SEFNet {
            let pilot = random_pilot(self.cfg.n_p(), self.cfg.l_symbols, self.cfg.n_bs, rng);
            store.insert(PILOT_PARAM, pilot_to_tensor(&pilot), Role::Weight)?;
        }
        if let Some(o) = &self.offset {
            o.declare(store, rng)?;
        }
        for l in self.refine.iter().flatten() {
            l.declare(store, rng)?;
        }
        if let Some(d) = &self.dce {
            d.declare(store, rng)?;
        }
        Ok(())
    }

    /// Fresh parameter store seeded from `cfg.seed`.
    pub fn init_store<T: Scalar>(&self) -> Result<ParameterStore<T>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::channel::derive_seed(self.cfg.seed, 0x5eed));
        let mut store = ParameterStore::new();
        self.declare(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Encoder up to (and including) power normalization or the tanh bound.
    pub fn encode<T: Scalar>(&self, sess: &mut Session<'_, T>, inputs: &Inputs<T>, trace: &mut Trace) -> Result<Var> {
        let b = inputs.g_d.batch();
        let x = match &self.dce {
            // separate design: the feedback net learns on ideal CSI and only
            // meets the CE net's output at test time
            Some(dce) => match &inputs.sef_input {
                Some(coarse) => {
                    let c = sess.constant(coarse.clone());
                    dce.forward(sess, c)?
                }
                None => sess.constant(inputs.g_d.clone()),
            },
            None => {
                let g = sess.constant(inputs.g_d.clone());
                let rows = self.cfg.pilot_positions();
                let g_p = sess.graph.select_rows(g, &rows)?;
                let q = sess.param(PILOT_PARAM)?;
                let r = sess.graph.pilot_receive(g_p, q)?;
                let noise = sess.constant(inputs.pilot_noise.clone());
                sess.graph.add(r, noise)?
            }
        };
        let mut h = x;
        for (i, l) in self.enc.iter().enumerate() {
            h = l.forward(sess, h)?;
            record(trace, &format!("enc.conv{}", i + 1), sess, h);
        }
        let flat: usize = sess.graph.shape(h)[1..].iter().product();
        h = sess.graph.reshape(h, &[b, flat])?;
        record(trace, "enc.reshape", sess, h);
        h = self.enc_fc.forward(sess, h)?;
        record(trace, "enc.fc", sess, h);
        if self.cfg.sscc.is_some() {
            return Ok(h);
        }
        let k = self.cfg.k_feedback;
        let s = sess.graph.reshape(h, &[b, k, 2])?;
        Ok(sess.graph.scale_to_norm(s, 2 * k, (k as f64).sqrt())?)
    }

    /// Feedback link: fading channel plus MRC for DJSCC, or the straight-through
    /// quantizer for SSCC training. Returns the flat decoder input.
    pub fn transmit<T: Scalar>(&self, sess: &mut Session<'_, T>, features: Var, inputs: &Inputs<T>) -> Result<Var> {
        let b = sess.graph.shape(features)[0];
        if let Some(s) = &self.cfg.sscc {
            let bits = s.b_bits;
            return Ok(sess.graph.straight_through(features, move |v| {
                T::from_f64_lossy(quantize_value(v.to_f64().unwrap_or(0.0), bits))
            }));
        }
        let y = sess.graph.complex_channel(features, &inputs.h_fb)?;
        let noise = sess.constant(inputs.fb_noise.clone());
        let y = sess.graph.add(y, noise)?;
        let s_hat = sess.graph.mrc(y, &inputs.h_fb_est)?;
        Ok(sess.graph.reshape(s_hat, &[b, 2 * self.cfg.k_feedback])?)
    }

    /// Offset compensation (SSCC only) and the initial reconstruction `[B, M, N, 2]`.
    pub fn reconstruct<T: Scalar>(&self, sess: &mut Session<'_, T>, received: Var, trace: &mut Trace) -> Result<Var> {
        let b = sess.graph.shape(received)[0];
        let mut x = received;
        if let Some(o) = &self.offset {
            let d = o.forward(sess, x)?;
            x = sess.graph.add(x, d)?;
        }
        let mut h = self.dec_fc.forward(sess, x)?;
        record(trace, "dec.fc", sess, h);
        h = sess.graph.reshape(h, &[b, self.cfg.m_subcarriers / 8, self.cfg.n_bs, 2])?;
        record(trace, "dec.reshape", sess, h);
        h = self.dec_conv0.forward(sess, h)?;
        record(trace, "dec.conv0", sess, h);
        for [a, c] in &self.res {
            let inner = a.forward(sess, h)?;
            let inner = c.forward(sess, inner)?;
            h = sess.graph.add(h, inner)?;
        }
        record(trace, "dec.res", sess, h);
        for (i, l) in self.up.iter().enumerate() {
            h = l.forward(sess, h)?;
            record(trace, &format!("dec.up{}", i + 1), sess, h);
        }
        Ok(h)
    }

    /// Refine blocks on `g_bar`; the joint kind also sees `g_u_hat`.
    pub fn refine<T: Scalar>(&self, sess: &mut Session<'_, T>, g_bar: Var, g_u_hat: &Tensor<T>) -> Result<Var> {
        let joint = self.cfg.variant.refine() == RefineKind::Joint;
        let gu = if joint && !self.refine.is_empty() { Some(sess.constant(g_u_hat.clone())) } else { None };
        self.refine_with(sess, g_bar, gu)
    }

    /// As [`Network::refine`] with the uplink estimate already in the graph.
    pub fn refine_with<T: Scalar>(&self, sess: &mut Session<'_, T>, g_bar: Var, g_u_hat: Option<Var>) -> Result<Var> {
        let mut x = g_bar;
        for [a, c] in &self.refine {
            let input = match g_u_hat {
                Some(gu) => sess.graph.concat_last(x, gu)?,
                None => x,
            };
            let inner = a.forward(sess, input)?;
            let inner = c.forward(sess, inner)?;
            x = sess.graph.add(x, inner)?;
        }
        Ok(x)
    }

    /// Decoder from a received feature vector.
    pub fn decode<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        received: Var,
        g_u_hat: &Tensor<T>,
        trace: &mut Trace,
    ) -> Result<(Var, Var)> {
        let g_bar = self.reconstruct(sess, received, trace)?;
        let g_hat = self.refine(sess, g_bar, g_u_hat)?;
        Ok((g_bar, g_hat))
    }

    /// Full pipeline plus the Frobenius loss against `inputs.g_d`.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, inputs: &Inputs<T>) -> Result<Forward> {
        self.check_inputs(inputs)?;
        let mut trace = Trace::new();
        let features = self.encode(sess, inputs, &mut trace)?;
        let received = self.transmit(sess, features, inputs)?;
        let (g_bar, g_hat) = self.decode(sess, received, &inputs.g_u_hat, &mut trace)?;
        let target = sess.constant(inputs.g_d.clone());
        let loss = sess.graph.frobenius_mse(g_hat, target)?;
        Ok(Forward { features, received, g_bar, g_hat, loss, trace })
    }

    fn check_inputs<T: Scalar>(&self, inputs: &Inputs<T>) -> Result<()> {
        let c = &self.cfg;
        let b = inputs.g_d.batch();
        let full = [b, c.m_subcarriers, c.n_bs, 2];
        let fb = [b, c.k_feedback, c.n_bs, 2];
        let check = |name: &'static str, t: &Tensor<T>, want: &[usize]| {
            if t.shape() == want {
                Ok(())
            } else {
                Err(CsiError::shape(name, want, t.shape()))
            }
        };
        check("g_d", &inputs.g_d, &full)?;
        check("g_u_hat", &inputs.g_u_hat, &full)?;
        if c.variant == Variant::SEFNet {
            if let Some(t) = &inputs.sef_input {
                check("sef_input", t, &full)?;
            }
        } else {
            check("pilot_noise", &inputs.pilot_noise, &[b, c.n_p(), c.l_symbols, 2])?;
        }
        if c.sscc.is_none() {
            check("h_fb", &inputs.h_fb, &fb)?;
            check("h_fb_est", &inputs.h_fb_est, &fb)?;
            check("fb_noise", &inputs.fb_noise, &fb)?;
        }
        Ok(())
    }
}

fn record<T: Scalar>(trace: &mut Trace, name: &str, sess: &Session<'_, T>, v: Var) {
    trace.push((name.to_string(), sess.graph.shape(v)[1..].to_vec()));
}

pub const PILOT_PARAM: &str = "pilot.q";

fn random_pilot<R: Rng + ?Sized>(n_p: usize, l: usize, n_bs: usize, rng: &mut R) -> TrainablePilot {
    let q =
        (0..n_p * l * n_bs).map(|_| Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))).collect();
    let mut p = TrainablePilot { n_p, l, n_bs, q };
    p.renormalize().expect("gaussian rows are nonzero");
    p
}

fn pilot_to_tensor<T: Scalar>(p: &TrainablePilot) -> Tensor<T> {
    let data = p.q.iter().flat_map(|z| [T::from_f64_lossy(z.re), T::from_f64_lossy(z.im)]).collect();
    Tensor::new(&[p.n_p, p.l, p.n_bs, 2], data).expect("pilot shape")
}

/// Reads the pilot parameter back as complex values.
pub fn pilot_from_store<T: Scalar>(store: &ParameterStore<T>) -> Result<TrainablePilot> {
    let t = store.value(PILOT_PARAM)?;
    let s = t.shape();
    TrainablePilot::from_interleaved(s[0], s[1], s[2], &t.to_f64_vec())
}

/// Rescales every pilot row to unit norm after an optimizer step.
pub fn project_pilots<T: Scalar>(store: &mut ParameterStore<T>) -> Result<()> {
    if !store.contains(PILOT_PARAM) {
        return Ok(());
    }
    let mut p = pilot_from_store(store)?;
    p.renormalize()?;
    store.set_value(PILOT_PARAM, pilot_to_tensor(&p))?;
    Ok(())
}

/// Fixed pilots for the separate-estimation baseline: symbol `l` on pilot
/// subcarrier `p` sounds angular bin `(p L + l) mod N`.
pub fn sef_pilot(n_p: usize, l: usize, n_bs: usize) -> TrainablePilot {
    let mut q = vec![Complex64::new(0.0, 0.0); n_p * l * n_bs];
    for p in 0..n_p {
        for s in 0..l {
            q[(p * l + s) * n_bs + (p * l + s) % n_bs] = Complex64::new(1.0, 0.0);
        }
    }
    TrainablePilot { n_p, l, n_bs, q }
}

/// Coarse downlink estimate from [`sef_pilot`] observations `r [N_p, L]`.
///
/// Each angular column is interpolated linearly across the subcarriers that
/// observed it, repeated observations of one subcarrier are averaged, and
/// values outside the observed range are held flat.
pub fn sef_coarse_estimate(r: &ComplexMatrix, pattern: &PilotPattern, n_bs: usize) -> Result<ComplexMatrix> {
    let (n_p, l) = (r.rows(), r.cols());
    if n_p != pattern.len() {
        return Err(CsiError::shape("sef_coarse_estimate", pattern.len(), n_p));
    }
    let m = pattern.m_total;
    let mut out = ComplexMatrix::zeros(m, n_bs);
    for col in 0..n_bs {
        // (subcarrier, mean observation), ascending in subcarrier
        let mut obs: Vec<(usize, Complex64)> = Vec::new();
        for p in 0..n_p {
            let hits: Vec<Complex64> = (0..l).filter(|s| (p * l + s) % n_bs == col).map(|s| r.get(p, s)).collect();
            if !hits.is_empty() {
                let mean = hits.iter().sum::<Complex64>() / hits.len() as f64;
                obs.push((pattern.positions[p], mean));
            }
        }
        if obs.is_empty() {
            continue;
        }
        let mut seg = 0;
        for row in 0..m {
            while seg + 1 < obs.len() && obs[seg + 1].0 <= row {
                seg += 1;
            }
            let v = if row <= obs[0].0 {
                obs[0].1
            } else if seg + 1 == obs.len() {
                obs[seg].1
            } else {
                let (p0, v0) = obs[seg];
                let (p1, v1) = obs[seg + 1];
                let t = (row - p0) as f64 / (p1 - p0) as f64;
                v0 * (1.0 - t) + v1 * t
            };
            out.set(row, col, v);
        }
    }
    Ok(out)
}

/// Smallest reportable NMSE.
pub const NMSE_FLOOR_DB: f64 = -120.0;

/// Per-sample ratios `|G - G_hat|^2 / |G|^2` for flat batches of `sample_len` reals.
pub fn nmse_ratios(pred: &[f64], target: &[f64], sample_len: usize) -> Result<Vec<f64>> {
    if pred.len() != target.len() || sample_len == 0 || !target.len().is_multiple_of(sample_len) {
        return Err(CsiError::shape("nmse", target.len(), pred.len()));
    }
    pred.chunks(sample_len)
        .zip(target.chunks(sample_len))
        .map(|(p, t)| {
            let den: f64 = t.iter().map(|v| v * v).sum();
            if den == 0.0 {
                return Err(CsiError::ZeroNorm { op: "nmse" });
            }
            Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / den)
        })
        .collect()
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    }
}

/// Batch-averaged NMSE in dB, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(pred: &[f64], target: &[f64], sample_len: usize) -> Result<f64> {
    let r = nmse_ratios(pred, target, sample_len)?;
    Ok(ratio_to_db(r.iter().sum::<f64>() / r.len() as f64))
}
