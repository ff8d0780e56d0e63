//! Training loops for the feedback autoencoder and the CE nets.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use csifb_diffcore::{read_checkpoint, write_checkpoint, Adam, ParameterStore, ReduceOnPlateau, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::derive_seed;
use crate::error::{CsiError, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::data::{
    assemble, complex_tensor, stream_rng, uniform_snr, CeModel, LinkSetup, PreparedSample, Splits,
};
use crate::linklevel::{build_pattern, linear_interpolate, ls_uplink_estimate, receive_downlink_pilots, snr_to_sigma2};
use crate::networks::{
    nmse_ratios, project_pilots, ratio_to_db, sef_coarse_estimate, sef_pilot, CeMode, CeNet, ModelConfig, Network,
    Strategy, Variant,
};
use crate::ComplexMatrix;

// RNG stream tags
const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_CE: u64 = 3;
const TAG_DCE: u64 = 4;
const TAG_STAGE1: u64 = 5;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_nmse_db: f64,
    pub lr: f64,
}

/// A trained feedback model with everything needed to evaluate it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub network: Network,
    pub store: ParameterStore<f32>,
    pub uplink_ce: Option<CeModel>,
    pub log: Vec<EpochRow>,
    pub dataset_hash: String,
}

/// Whether any phase of this configuration consumes the AI uplink estimate.
pub fn needs_uplink_ce(model: &ModelConfig) -> bool {
    model.ce_mode == CeMode::Ai && model.strategy != Strategy::S1
}

/// Trains the configured variant end to end, including any CE nets it needs.
pub fn train(cfg: &ExperimentConfig, splits: &Splits) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut log = Vec::new();
    let uplink_ce = if needs_uplink_ce(&cfg.model) {
        let (ce, rows) = train_ce(CeKind::Uplink, cfg, splits)?;
        log.extend(rows);
        Some(ce)
    } else {
        None
    };
    let network = Network::new(&cfg.model)?;
    let mut store = network.init_store::<f32>()?;
    if let Some(dce) = network.downlink_ce() {
        let (trained, rows) = train_ce(CeKind::Downlink, cfg, splits)?;
        log.extend(rows);
        store.copy_from(&trained.store, dce.prefix())?;
        store.set_trainable(&format!("{}.", dce.prefix()), false);
    }
    if cfg.model.variant == Variant::TwoStageUJEFNet {
        let first = Network::new(&ModelConfig { variant: Variant::JEFNet, ..cfg.model.clone() })?;
        let mut first_store = first.init_store::<f32>()?;
        log.extend(run_epochs(&first, &mut first_store, cfg, splits, uplink_ce.as_ref(), "stage1", TAG_STAGE1)?);
        store.copy_from(&first_store, "")?;
        store.set_trainable("", false);
        store.set_trainable("ref", true);
        log.extend(run_epochs(&network, &mut store, cfg, splits, uplink_ce.as_ref(), "stage2", TAG_TRAIN)?);
    } else {
        log.extend(run_epochs(&network, &mut store, cfg, splits, uplink_ce.as_ref(), "main", TAG_TRAIN)?);
    }
    Ok(TrainedModel { config: cfg.clone(), network, store, uplink_ce, log, dataset_hash: splits.dataset_hash.clone() })
}

fn run_epochs(
    net: &Network,
    store: &mut ParameterStore<f32>,
    cfg: &ExperimentConfig,
    splits: &Splits,
    uplink_ce: Option<&CeModel>,
    stage: &str,
    tag: u64,
) -> Result<Vec<EpochRow>> {
    let t = &cfg.train;
    let model = net.config();
    let setup = LinkSetup { model, snr_ce_db: cfg.snr_ce_db, uplink_ce, training: true };
    let mut adam = Adam::new(t.lr_initial);
    let mut plateau = ReduceOnPlateau::new(t.lr_factor, t.plateau_patience);
    let mut best: Option<(f64, ParameterStore<f32>)> = None;
    let mut rows = Vec::with_capacity(t.epochs);
    let master = derive_seed(cfg.seed, tag);
    let mut step = 0usize;
    for epoch in 1..=t.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut stream_rng(master, epoch as u64, 0, 0));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(t.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // batch norm needs two samples
            }
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let draws = samples
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let mut rng = stream_rng(master, epoch as u64, bi as u64 + 1, j as u64);
                    let snr = uniform_snr(&mut rng, t.snr_u_range_db);
                    setup.draw(s, snr, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let inputs = assemble(model, &samples, &draws)?;
            step += 1;
            let loss = {
                let mut sess = Session::new(store, true);
                let fwd = net.forward(&mut sess, &inputs)?;
                let loss = sess.graph.value(fwd.loss).data()[0] as f64;
                if !loss.is_finite() {
                    return Err(CsiError::NonFinite { epoch, step });
                }
                sess.backward(fwd.loss)?;
                loss
            };
            adam.step(store);
            project_pilots(store)?;
            store.zero_grads();
            loss_sum += loss;
            batches += 1;
        }
        let (val_loss, val_nmse_db) = validate(net, store, cfg, &splits.val, &setup)?;
        adam.lr = plateau.observe(val_loss, adam.lr);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, store.clone()));
        }
        let row = EpochRow {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            val_nmse_db,
            lr: adam.lr,
        };
        log::info!(
            "{} {stage} epoch {epoch}: train {:.4} val {:.4} ({:.2} dB) lr {:.2e} [{:.1}s]",
            model.variant.name(),
            row.train_loss,
            val_loss,
            val_nmse_db,
            adam.lr,
            started.elapsed().as_secs_f64()
        );
        rows.push(row);
    }
    if let Some((_, s)) = best {
        *store = s;
    }
    Ok(rows)
}

const EVAL_CHUNK: usize = 100;

/// Inference-mode loss and NMSE on `samples` with fixed noise, drawn at the
/// training SNR range.
fn validate(
    net: &Network,
    store: &ParameterStore<f32>,
    cfg: &ExperimentConfig,
    samples: &[PreparedSample],
    setup: &LinkSetup<'_>,
) -> Result<(f64, f64)> {
    let master = derive_seed(cfg.seed, TAG_VAL);
    let mut store = store.clone();
    let (mut loss_sum, mut ratios) = (0.0, Vec::with_capacity(samples.len()));
    for (ci, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let draws = refs
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mut rng = stream_rng(master, (ci * EVAL_CHUNK + j) as u64, 0, 0);
                let snr = uniform_snr(&mut rng, cfg.train.snr_u_range_db);
                setup.draw(s, snr, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs = assemble(net.config(), &refs, &draws)?;
        let mut sess = Session::new(&mut store, false);
        let fwd = net.forward(&mut sess, &inputs)?;
        loss_sum += sess.graph.value(fwd.loss).data()[0] as f64 * chunk.len() as f64;
        let pred = sess.graph.value(fwd.g_hat).to_f64_vec();
        ratios.extend(nmse_ratios(&pred, &inputs.g_d.to_f64_vec(), pred.len() / chunk.len())?);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok((loss_sum / samples.len() as f64, ratio_to_db(mean_ratio)))
}

/// Which link a convolutional CE net refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeKind {
    /// LS-interpolated uplink pilots to spatial uplink CSI.
    Uplink,
    /// Coarse angular downlink estimate from fixed pilots to angular downlink CSI.
    Downlink,
}

impl CeKind {
    pub fn prefix(self) -> &'static str {
        match self {
            CeKind::Uplink => "ce",
            CeKind::Downlink => "dce",
        }
    }

    fn tag(self) -> u64 {
        match self {
            CeKind::Uplink => TAG_CE,
            CeKind::Downlink => TAG_DCE,
        }
    }
}

/// `(input, target)` for one CE training or evaluation sample.
pub fn ce_pair(
    kind: CeKind,
    model: &ModelConfig,
    sample: &PreparedSample,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ComplexMatrix, ComplexMatrix)> {
    let sigma2 = snr_to_sigma2(snr_db);
    match kind {
        CeKind::Uplink => {
            let pattern = build_pattern(model.m_subcarriers, model.g_u)?;
            let est = ls_uplink_estimate(&sample.h_ul, &pattern, sigma2, rng)?;
            Ok((linear_interpolate(&est, &pattern)?, sample.h_ul.clone()))
        }
        CeKind::Downlink => {
            let pattern = build_pattern(model.m_subcarriers, model.g_d)?;
            let pilot = sef_pilot(pattern.len(), model.l_symbols, model.n_bs);
            let r = receive_downlink_pilots(&sample.g_d, &pattern, &pilot, sigma2, rng)?;
            Ok((sef_coarse_estimate(&r, &pattern, model.n_bs)?, sample.g_d.clone()))
        }
    }
}

fn ce_snr(kind: CeKind, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        CeKind::Uplink => uniform_snr(rng, cfg.ce.snr_u_range_db),
        CeKind::Downlink => cfg.snr_ce_db,
    }
}

/// Trains a CE net standalone with the Frobenius loss, keeping the epoch
/// with the best validation NMSE.
pub fn train_ce(kind: CeKind, cfg: &ExperimentConfig, splits: &Splits) -> Result<(CeModel, Vec<EpochRow>)> {
    let net = CeNet::new(kind.prefix());
    let master = derive_seed(cfg.seed, kind.tag());
    let mut store = ParameterStore::<f32>::new();
    net.declare(&mut store, &mut ChaCha8Rng::seed_from_u64(master))?;
    let adam = Adam::new(cfg.ce.lr);
    let mut best: Option<(f64, ParameterStore<f32>)> = None;
    let mut rows = Vec::new();
    for epoch in 1..=cfg.ce.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut stream_rng(master, epoch as u64, 0, 0));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.ce.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let mut rng = stream_rng(master, epoch as u64, bi as u64 + 1, j as u64);
                let snr = ce_snr(kind, cfg, &mut rng);
                let (x, y) = ce_pair(kind, &cfg.model, &splits.train[i], snr, &mut rng)?;
                xs.push(x);
                ys.push(y);
            }
            let m = cfg.model.m_subcarriers;
            let x = complex_tensor(&xs.iter().collect::<Vec<_>>(), m)?;
            let y = complex_tensor(&ys.iter().collect::<Vec<_>>(), m)?;
            let loss = {
                let mut sess = Session::new(&mut store, true);
                let xv = sess.constant(x);
                let yv = sess.constant(y);
                let out = net.forward(&mut sess, xv)?;
                let loss = sess.graph.frobenius_mse(out, yv)?;
                let value = sess.graph.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(CsiError::NonFinite { epoch, step: bi + 1 });
                }
                sess.backward(loss)?;
                value
            };
            adam.step(&mut store);
            store.zero_grads();
            loss_sum += loss;
            batches += 1;
        }
        let model = CeModel { net: net.clone(), store: store.clone() };
        let (baseline, trained) = evaluate_ce(&model, kind, cfg, &splits.val, None)?;
        log::info!(
            "{} epoch {epoch}: train {:.4} val {trained:.2} dB (interpolation {baseline:.2} dB)",
            kind.prefix(),
            loss_sum / batches as f64
        );
        if best.as_ref().is_none_or(|(b, _)| trained < *b) {
            best = Some((trained, store.clone()));
        }
        rows.push(EpochRow {
            stage: kind.prefix().to_string(),
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: f64::NAN,
            val_nmse_db: trained,
            lr: adam.lr,
        });
    }
    let store = best.map(|(_, s)| s).unwrap_or(store);
    Ok((CeModel { net, store }, rows))
}

/// NMSE in dB of the plain interpolation and of the CE net on `samples`.
/// `snr_db` fixes the pilot SNR; otherwise the training range is used.
pub fn evaluate_ce(
    model: &CeModel,
    kind: CeKind,
    cfg: &ExperimentConfig,
    samples: &[PreparedSample],
    snr_db: Option<f64>,
) -> Result<(f64, f64)> {
    let master = derive_seed(derive_seed(cfg.seed, kind.tag()), TAG_VAL);
    let (mut base, mut net) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream_rng(master, i as u64, 0, 0);
        let snr = match snr_db {
            Some(v) => v,
            None => ce_snr(kind, cfg, &mut rng),
        };
        let (x, y) = ce_pair(kind, &cfg.model, s, snr, &mut rng)?;
        let out = model.apply(&x)?;
        let target = y.to_interleaved();
        base += nmse_ratios(&x.to_interleaved(), &target, target.len())?[0];
        net += nmse_ratios(&out.to_interleaved(), &target, target.len())?[0];
    }
    let n = samples.len() as f64;
    Ok((ratio_to_db(base / n), ratio_to_db(net / n)))
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    config: ExperimentConfig,
    dataset_hash: String,
    log: Vec<EpochRow>,
    uplink_ce: bool,
}

/// Writes the model (and uplink CE net, if any) to one checkpoint file.
pub fn save_checkpoint(path: &Path, trained: &TrainedModel) -> Result<()> {
    let mut merged = trained.store.clone();
    if let Some(ce) = &trained.uplink_ce {
        for (name, entry) in ce.store.iter() {
            merged.insert_entry(name, entry.clone())?;
        }
    }
    let extra = CheckpointExtra {
        config: trained.config.clone(),
        dataset_hash: trained.dataset_hash.clone(),
        log: trained.log.clone(),
        uplink_ce: trained.uplink_ce.is_some(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &merged, &Adam::new(trained.config.train.lr_initial), serde_json::to_value(&extra)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let (mut merged, manifest) = read_checkpoint::<_, f32>(&mut BufReader::new(File::open(path)?))?;
    let extra: CheckpointExtra = serde_json::from_value(manifest.extra)
        .map_err(|e| CsiError::CheckpointMismatch(format!("manifest payload: {e}")))?;
    let network = Network::new(&extra.config.model)?;
    let uplink_ce = if extra.uplink_ce {
        let net = CeNet::new(CeKind::Uplink.prefix());
        let mut store = ParameterStore::new();
        let prefix = format!("{}.", net.prefix());
        let names: Vec<String> = merged.names().filter(|n| n.starts_with(&prefix)).map(String::from).collect();
        for n in names {
            store.insert_entry(&n, merged.get(&n)?.clone())?;
        }
        merged = strip(&merged, &prefix)?;
        Some(CeModel { net, store })
    } else {
        None
    };
    let expected = network.init_store::<f32>()?;
    let want: Vec<&str> = expected.names().collect();
    let got: Vec<&str> = merged.names().collect();
    if want != got {
        return Err(CsiError::CheckpointMismatch(format!(
            "parameter names differ from a fresh {} model",
            extra.config.model.variant.name()
        )));
    }
    Ok(TrainedModel {
        config: extra.config,
        network,
        store: merged,
        uplink_ce,
        log: extra.log,
        dataset_hash: extra.dataset_hash,
    })
}

fn strip(store: &ParameterStore<f32>, prefix: &str) -> Result<ParameterStore<f32>> {
    let mut out = ParameterStore::new();
    for (name, e) in store.iter().filter(|(n, _)| !n.starts_with(prefix)) {
        out.insert_entry(name, e.clone())?;
    }
    Ok(out)
}
