//! SNR sweeps and multi-variant ablations.

use csifb_diffcore::{Session, Tensor};
use serde::{Deserialize, Serialize};

use crate::channel::derive_seed;
use crate::error::{CsiError, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::data::{assemble, load_splits, stream_rng, LinkSetup, PreparedSample, Splits};
use crate::experiments::train::{train, TrainedModel};
use crate::linklevel::snr_to_sigma2;
use crate::networks::{nmse_ratios, ratio_to_db, CeMode, Trace, Variant};
use crate::sscc::{sscc_transmit, CodecState};

const TAG_EVAL: u64 = 7;
const EVAL_CHUNK: usize = 100;

/// One evaluated point. Column order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    /// `DJSCC` or the SSCC label, e.g. `ed16_Q2_O6`.
    pub scheme: String,
    pub strategy: u8,
    pub ce_mode: String,
    pub k: usize,
    pub l: usize,
    pub g_u: usize,
    pub snr_ce_db: f64,
    pub snr_u_db: f64,
    pub nmse_db: f64,
    pub n_eval: usize,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl ResultRow {
    /// Sort key for order-independent aggregation.
    fn key(&self) -> (String, String, u8, String, usize, usize, u64, i64) {
        (
            self.variant.clone(),
            self.scheme.clone(),
            self.strategy,
            self.ce_mode.clone(),
            self.k,
            self.l,
            self.seed,
            (self.snr_u_db * 1000.0).round() as i64,
        )
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.key().cmp(&b.key()).then(a.snr_ce_db.total_cmp(&b.snr_ce_db)).then(a.g_u.cmp(&b.g_u)));
}

fn ce_mode_name(m: CeMode) -> &'static str {
    match m {
        CeMode::Ideal => "ideal",
        CeMode::Ls => "ls",
        CeMode::Ai => "ai",
    }
}

/// Test-time NMSE over `samples` at one uplink SNR.
///
/// Noise for sample `i` at grid index `snr_index` comes from its own stream,
/// so the result does not depend on chunking.
pub fn evaluate_point(
    trained: &TrainedModel,
    samples: &[PreparedSample],
    snr_u_db: f64,
    snr_index: usize,
) -> Result<f64> {
    let cfg = &trained.config;
    let model = &cfg.model;
    let net = &trained.network;
    let setup = LinkSetup { model, snr_ce_db: cfg.snr_ce_db, uplink_ce: trained.uplink_ce.as_ref(), training: false };
    let master = derive_seed(cfg.seed, TAG_EVAL);
    let sigma2_u = snr_to_sigma2(snr_u_db);
    let codec = CodecState::default();
    let mut store = trained.store.clone();
    let mut ratios = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let mut rngs: Vec<_> =
            (0..chunk.len()).map(|j| stream_rng(master, snr_index as u64, (ci * EVAL_CHUNK + j) as u64, 0)).collect();
        let draws = refs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(s, rng)| setup.draw(s, snr_u_db, rng))
            .collect::<Result<Vec<_>>>()?;
        let inputs = assemble(model, &refs, &draws)?;
        let pred = match &model.sscc {
            None => {
                let mut sess = Session::new(&mut store, false);
                let fwd = net.forward(&mut sess, &inputs)?;
                sess.graph.value(fwd.g_hat).to_f64_vec()
            }
            Some(sscc) => {
                let features = {
                    let mut sess = Session::new(&mut store, false);
                    let f = net.encode(&mut sess, &inputs, &mut Trace::new())?;
                    sess.graph.value(f).to_f64_vec()
                };
                let e = sscc.e_neurons;
                let mut received = Vec::with_capacity(features.len());
                for (j, f) in features.chunks(e).enumerate() {
                    let out = sscc_transmit(f, sscc, &refs[j].h_ul, &draws[j].h_est, sigma2_u, &codec, &mut rngs[j])?;
                    received.extend(out.features.into_iter().map(|v| v as f32));
                }
                let mut sess = Session::new(&mut store, false);
                let rx = sess.constant(Tensor::new(&[chunk.len(), e], received)?);
                let (_, g_hat) = net.decode(&mut sess, rx, &inputs.g_u_hat, &mut Trace::new())?;
                sess.graph.value(g_hat).to_f64_vec()
            }
        };
        let target = inputs.g_d.to_f64_vec();
        ratios.extend(nmse_ratios(&pred, &target, target.len() / chunk.len())?);
    }
    if ratios.is_empty() {
        return Err(CsiError::Config("empty evaluation set".into()));
    }
    Ok(ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64))
}

/// One row per grid point of `cfg.snr_u_grid_db`, evaluated on `samples`.
pub fn evaluate_sweep(trained: &TrainedModel, samples: &[PreparedSample]) -> Result<Vec<ResultRow>> {
    let cfg = &trained.config;
    let m = &cfg.model;
    let config_hash = cfg.hash();
    let mut rows = Vec::with_capacity(cfg.snr_u_grid_db.len());
    for (i, &snr) in cfg.snr_u_grid_db.iter().enumerate() {
        let started = std::time::Instant::now();
        let nmse_db = evaluate_point(trained, samples, snr, i)?;
        log::info!(
            "{} S{} at {snr} dB: {nmse_db:.3} dB [{:.1}s]",
            m.variant.name(),
            u8::from(m.strategy),
            started.elapsed().as_secs_f64()
        );
        rows.push(ResultRow {
            variant: m.variant.name().to_string(),
            scheme: m.sscc.map_or_else(|| "DJSCC".to_string(), |s| s.label()),
            strategy: m.strategy.into(),
            ce_mode: ce_mode_name(m.ce_mode).to_string(),
            k: m.k_feedback,
            l: m.l_symbols,
            g_u: m.g_u,
            snr_ce_db: cfg.snr_ce_db,
            snr_u_db: snr,
            nmse_db,
            n_eval: samples.len(),
            seed: cfg.seed,
            config_hash: config_hash.clone(),
            dataset_hash: trained.dataset_hash.clone(),
        });
    }
    Ok(rows)
}

/// `cfg` with its seeds replaced by `seed`.
pub fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.model.seed = seed;
    c
}

/// Trains and evaluates every variant under every seed on one shared
/// dataset. Rows come back in canonical order.
pub fn ablation_suite(cfg: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<ResultRow>> {
    let splits = load_splits(cfg)?;
    ablation_on(cfg, &splits, variants, seeds)
}

pub fn ablation_on(
    cfg: &ExperimentConfig,
    splits: &Splits,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<ResultRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(CsiError::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut c = with_seed(cfg, seed);
            c.model.variant = v;
            let trained = train(&c, splits)?;
            rows.extend(evaluate_sweep(&trained, &splits.test)?);
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}
