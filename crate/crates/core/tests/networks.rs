use csifb::channel::to_angular;
use csifb::linklevel::{build_pattern, receive_downlink_pilots};
use csifb::networks::{
    nmse_db, pilot_from_store, project_pilots, sef_coarse_estimate, sef_pilot, CeNet, Inputs, ModelConfig, Network,
    Strategy, Variant, NMSE_FLOOR_DB, PILOT_PARAM,
};
use csifb::ComplexMatrix;
use csifb_diffcore::{grad_check_session, ParameterStore, Session, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        k_feedback: 2,
        m_subcarriers: 16,
        n_bs: 4,
        g_d: 4,
        l_symbols: 2,
        g_u: 4,
        t_refine: 2,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn random_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> Inputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, k) = (cfg.m_subcarriers, cfg.n_bs, cfg.k_feedback);
    let h_fb = rand_tensor(&mut rng, &[batch, k, n, 2], 1.0);
    let mut h_fb_est = h_fb.clone();
    h_fb_est.add_assign(&rand_tensor(&mut rng, &[batch, k, n, 2], 0.1));
    Inputs {
        g_d: rand_tensor(&mut rng, &[batch, m, n, 2], 1.0),
        pilot_noise: rand_tensor(&mut rng, &[batch, cfg.n_p(), cfg.l_symbols, 2], 0.1),
        sef_input: Some(rand_tensor(&mut rng, &[batch, m, n, 2], 1.0)),
        h_fb,
        h_fb_est,
        fb_noise: rand_tensor(&mut rng, &[batch, k, n, 2], 0.1),
        g_u_hat: rand_tensor(&mut rng, &[batch, m, n, 2], 1.0),
    }
}

fn lift(e: csifb::CsiError) -> csifb_diffcore::DiffError {
    csifb_diffcore::DiffError::InvalidArgument { op: "network", reason: e.to_string() }
}

fn g_hat(net: &Network, store: &mut ParameterStore<f64>, inputs: &Inputs<f64>, training: bool) -> Vec<f64> {
    let mut sess = Session::new(store, training);
    let fwd = net.forward(&mut sess, inputs).unwrap();
    sess.graph.value(fwd.g_hat).data().to_vec()
}

#[test]
fn default_config_matches_architecture_table() {
    let cfg = ModelConfig::default();
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f32>().unwrap();
    let inputs = random_inputs(&cfg, 1, 3);
    let inputs = Inputs {
        g_d: inputs.g_d.cast(),
        pilot_noise: inputs.pilot_noise.cast(),
        sef_input: None,
        h_fb: inputs.h_fb.cast(),
        h_fb_est: inputs.h_fb_est.cast(),
        fb_noise: inputs.fb_noise.cast(),
        g_u_hat: inputs.g_u_hat.cast(),
    };
    let mut sess = Session::new(&mut store, false);
    let fwd = net.forward(&mut sess, &inputs).unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("enc.conv1", vec![64, 16, 2]),
        ("enc.conv2", vec![64, 16, 2]),
        ("enc.reshape", vec![2048]),
        ("enc.fc", vec![32]),
        ("dec.fc", vec![2048]),
        ("dec.reshape", vec![32, 32, 2]),
        ("dec.conv0", vec![32, 32, 2]),
        ("dec.res", vec![32, 32, 2]),
        ("dec.up1", vec![64, 32, 16]),
        ("dec.up2", vec![128, 32, 16]),
        ("dec.up3", vec![256, 32, 2]),
    ];
    let got: Vec<(&str, Vec<usize>)> = fwd.trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    assert_eq!(got, expected);
    assert_eq!(sess.graph.shape(fwd.g_hat), &[1, 256, 32, 2]);
}

#[test]
fn sefnet_encoder_flattens_full_csi() {
    let cfg = ModelConfig { variant: Variant::SEFNet, ..ModelConfig::default() };
    let net = Network::new(&cfg).unwrap();
    let store = net.init_store::<f32>().unwrap();
    assert_eq!(store.value("enc.fc.kernel").unwrap().shape(), &[16384, 32]);
    assert!(!store.contains(PILOT_PARAM));
    assert!(store.contains("dce.conv1.kernel"));
}

#[test]
fn encoder_output_has_power_k() {
    let cfg = tiny(Variant::UJEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    let inputs = random_inputs(&cfg, 3, 5);
    let mut sess = Session::new(&mut store, true);
    let fwd = net.forward(&mut sess, &inputs).unwrap();
    let s = sess.graph.value(fwd.features).data().to_vec();
    for chunk in s.chunks(2 * cfg.k_feedback) {
        let p: f64 = chunk.iter().map(|v| v * v).sum();
        assert!((p - cfg.k_feedback as f64).abs() < 1e-12);
    }
}

#[test]
fn zero_input_hits_normalization_guard() {
    let cfg = tiny(Variant::JEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    let mut inputs = random_inputs(&cfg, 2, 1);
    inputs.g_d.fill(0.0);
    inputs.pilot_noise.fill(0.0);
    let mut sess = Session::new(&mut store, false);
    assert!(net.forward(&mut sess, &inputs).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny(Variant::UJEFNet);
    let net = Network::new(&cfg).unwrap();
    let inputs = random_inputs(&cfg, 2, 9);
    let a = g_hat(&net, &mut net.init_store().unwrap(), &inputs, true);
    let b = g_hat(&net, &mut net.init_store().unwrap(), &inputs, true);
    assert_eq!(a, b);
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for variant in [Variant::UJEFNet, Variant::DJEFNet, Variant::SEFNet] {
        let cfg = tiny(variant);
        let net = Network::new(&cfg).unwrap();
        let store = net.init_store::<f64>().unwrap();
        let inputs = random_inputs(&cfg, 3, 21);
        let err = grad_check_session(&store, &[], true, 1e-6, |sess, _| {
            net.forward(sess, &inputs).map(|f| f.loss).map_err(lift)
        })
        .unwrap();
        assert!(err < 1e-3, "{variant:?}: {err}");
    }
}

#[test]
fn joint_refine_gradients_reach_both_inputs() {
    let cfg = tiny(Variant::UJEFNet);
    let net = Network::new(&cfg).unwrap();
    let store = net.init_store::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [2, cfg.m_subcarriers, cfg.n_bs, 2];
    let ins = [rand_tensor(&mut rng, &shape, 1.0), rand_tensor(&mut rng, &shape, 1.0)];
    let target = rand_tensor(&mut rng, &shape, 1.0);
    let err = grad_check_session(&store, &ins, true, 1e-6, |sess, v| {
        let y = net.refine_with(sess, v[0], Some(v[1])).map_err(lift)?;
        let t = sess.constant(target.clone());
        sess.graph.frobenius_mse(y, t)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = tiny(Variant::UJEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    let inputs = random_inputs(&cfg, 4, 8);
    {
        let mut sess = Session::new(&mut store, true);
        let fwd = net.forward(&mut sess, &inputs).unwrap();
        sess.backward(fwd.loss).unwrap();
    }
    for (name, e) in store.iter().filter(|(_, e)| e.is_optimized()) {
        assert!(e.grad.max_abs() > 0.0, "{name} has a zero gradient");
    }
}

fn zero_refine_outputs(store: &mut ParameterStore<f64>) {
    let names: Vec<String> =
        store.names().filter(|n| n.starts_with("ref") && n.ends_with(".b.kernel")).map(String::from).collect();
    assert!(!names.is_empty());
    for n in names {
        let shape = store.value(&n).unwrap().shape().to_vec();
        store.set_value(&n, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn variants_coincide_with_zeroed_refine() {
    let inputs = random_inputs(&tiny(Variant::JEFNet), 3, 13);
    for training in [false, true] {
        let jef = Network::new(&tiny(Variant::JEFNet)).unwrap();
        let base = g_hat(&jef, &mut jef.init_store().unwrap(), &inputs, training);
        for v in [Variant::UJEFNet, Variant::DJEFNet, Variant::TwoStageUJEFNet] {
            let net = Network::new(&tiny(v)).unwrap();
            let mut store = net.init_store().unwrap();
            zero_refine_outputs(&mut store);
            assert_eq!(g_hat(&net, &mut store, &inputs, training), base, "{v:?} training={training}");
        }
    }
}

#[test]
fn refine_parameter_counts() {
    let count = |v: Variant, t: usize| {
        let net = Network::new(&ModelConfig { t_refine: t, ..tiny(v) }).unwrap();
        net.init_store::<f64>().unwrap().weight_count("ref")
    };
    let (one, two) = (count(Variant::UJEFNet, 1), count(Variant::UJEFNet, 2));
    assert_eq!(two, 2 * one);
    // a: 3x3x4x16 kernel + BN(16) gamma/beta, b: 3x3x16x2 + BN(2)
    assert_eq!(one, 9 * 4 * 16 + 32 + 9 * 16 * 2 + 4);
    assert_eq!(count(Variant::DJEFNet, 1), one - 9 * 2 * 16);
    assert_eq!(count(Variant::JEFNet, 2), 0);
}

#[test]
fn pilot_projection_restores_unit_rows() {
    let cfg = tiny(Variant::UJEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = store.value(PILOT_PARAM).unwrap().shape().to_vec();
    let mut q = store.value(PILOT_PARAM).unwrap().clone();
    q.add_assign(&rand_tensor(&mut rng, &shape, 0.5));
    store.set_value(PILOT_PARAM, q).unwrap();
    project_pilots(&mut store).unwrap();
    let p = pilot_from_store(&store).unwrap();
    for pp in 0..p.n_p {
        for l in 0..p.l {
            let n: f64 = p.row(pp, l).iter().map(|z| z.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn graph_link_matches_reference_signal_processing() {
    // noiseless pilots through the graph equal the complex reference receiver
    let cfg = tiny(Variant::JEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    let mut inputs = random_inputs(&cfg, 1, 17);
    inputs.pilot_noise.fill(0.0);
    let pilot = pilot_from_store(&store).unwrap();
    let g = ComplexMatrix::from_interleaved(cfg.m_subcarriers, cfg.n_bs, inputs.g_d.data()).unwrap();
    let pattern = build_pattern(cfg.m_subcarriers, cfg.g_d).unwrap();
    let reference = receive_downlink_pilots(&g, &pattern, &pilot, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut sess = Session::new(&mut store, false);
    let gd = sess.constant(inputs.g_d.clone());
    let gp = sess.graph.select_rows(gd, &cfg.pilot_positions()).unwrap();
    let q = sess.param(PILOT_PARAM).unwrap();
    let r = sess.graph.pilot_receive(gp, q).unwrap();
    let got = sess.graph.value(r).data().to_vec();
    for (a, b) in got.iter().zip(reference.to_interleaved()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ce_net_with_zero_kernels_is_identity() {
    let ce = CeNet::new("ce");
    let mut store = ParameterStore::<f64>::new();
    ce.declare(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let kernels: Vec<String> = store.names().filter(|n| n.ends_with("kernel")).map(String::from).collect();
    for n in kernels {
        let s = store.value(&n).unwrap().shape().to_vec();
        store.set_value(&n, Tensor::zeros(&s)).unwrap();
    }
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[2, 8, 4, 2], 1.0);
    let mut sess = Session::new(&mut store, false);
    let v = sess.constant(x.clone());
    let y = ce.forward(&mut sess, v).unwrap();
    assert_eq!(sess.graph.value(y).data(), x.data());
    assert_eq!(ce.prefix(), "ce");
}

#[test]
fn sefnet_trains_on_ideal_csi_without_refine() {
    let cfg = tiny(Variant::SEFNet);
    let net = Network::new(&cfg).unwrap();
    let mut store = net.init_store::<f64>().unwrap();
    assert!(store.names().all(|n| !n.starts_with("ref")));
    let kernels: Vec<String> =
        store.names().filter(|n| n.starts_with("dce.") && n.ends_with("kernel")).map(String::from).collect();
    for n in kernels {
        let s = store.value(&n).unwrap().shape().to_vec();
        store.set_value(&n, Tensor::zeros(&s)).unwrap();
    }
    // an identity CE net fed the ideal CSI must match the estimate-free path
    let mut inputs = random_inputs(&cfg, 2, 13);
    inputs.sef_input = Some(inputs.g_d.clone());
    let through_ce = g_hat(&net, &mut store, &inputs, false);
    inputs.sef_input = None;
    assert_eq!(g_hat(&net, &mut store, &inputs, false), through_ce);
}

#[test]
fn sef_estimate_recovers_noiseless_linear_channel() {
    let (m, n, l, g) = (32, 8, 4, 4);
    let pattern = build_pattern(m, g).unwrap();
    let pilot = sef_pilot(pattern.len(), l, n);
    // angular coefficients linear in the subcarrier index
    let h = ComplexMatrix::from_fn(m, n, |r, c| Complex64::new(1.0 + 0.1 * r as f64 * c as f64, -0.05 * r as f64));
    let rx = receive_downlink_pilots(&h, &pattern, &pilot, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let est = sef_coarse_estimate(&rx, &pattern, n).unwrap();
    // column c is observed on every other pilot subcarrier, starting at 0 or g
    for c in 0..n {
        let first = if c < l { 0 } else { g };
        let last = pattern.positions.iter().rev().copied().find(|&p| (p / g * l) % n / l == c / l).unwrap();
        for r in first..=last {
            assert!((est.get(r, c) - h.get(r, c)).norm() < 1e-12, "({r},{c})");
        }
        assert!((est.get(m - 1, c) - h.get(last, c)).norm() < 1e-12);
    }
}

#[test]
fn nmse_reference_values() {
    let t: Vec<f64> = (1..=8).map(|v| v as f64).collect();
    assert_eq!(nmse_db(&t, &t, 4).unwrap(), NMSE_FLOOR_DB);
    assert!(nmse_db(&[0.0; 8], &t, 4).unwrap().abs() < 1e-12);
    let scaled: Vec<f64> = t.iter().map(|v| 0.9 * v).collect();
    assert!((nmse_db(&scaled, &t, 4).unwrap() + 20.0).abs() < 1e-9);
    assert!(nmse_db(&t, &[0.0; 8], 4).is_err());
}

#[test]
fn nmse_is_unitarily_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, n) = (6, 4);
    let a =
        ComplexMatrix::from_fn(m, n, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let b =
        ComplexMatrix::from_fn(m, n, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    // a unitary mixing of the columns: the normalized DFT times a diagonal phase
    let u = ComplexMatrix::from_fn(n, n, |i, j| {
        let ph = Complex64::from_polar(1.0, 0.7 * j as f64);
        Complex64::from_polar(1.0 / (n as f64).sqrt(), -2.0 * std::f64::consts::PI * (i * j) as f64 / n as f64) * ph
    });
    let mix = |x: &ComplexMatrix| ComplexMatrix::from_fn(m, n, |r, c| (0..n).map(|k| x.get(r, k) * u.get(k, c)).sum());
    let before = nmse_db(&a.to_interleaved(), &b.to_interleaved(), 2 * m * n).unwrap();
    let after = nmse_db(&mix(&a).to_interleaved(), &mix(&b).to_interleaved(), 2 * m * n).unwrap();
    assert!((before - after).abs() < 1e-10);
    // the DFT helper is one such rotation
    let ang = nmse_db(&to_angular(&a).to_interleaved(), &to_angular(&b).to_interleaved(), 2 * m * n).unwrap();
    assert!((before - ang).abs() < 1e-10);
}

#[test]
fn config_validation() {
    assert!(tiny(Variant::UJEFNet).validate().is_ok());
    assert!(ModelConfig { m_subcarriers: 20, ..tiny(Variant::UJEFNet) }.validate().is_err());
    assert!(ModelConfig { t_refine: 0, ..tiny(Variant::DJEFNet) }.validate().is_err());
    assert!(ModelConfig { t_refine: 0, ..tiny(Variant::JEFNet) }.validate().is_ok());
    assert!(ModelConfig { k_feedback: 0, ..tiny(Variant::JEFNet) }.validate().is_err());
    let json = serde_json::to_string(&ModelConfig { strategy: Strategy::S3, ..tiny(Variant::SEFNet) }).unwrap();
    assert!(json.contains("\"strategy\":3"));
    let back: ModelConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back.strategy, Strategy::S3);
    assert!(serde_json::from_str::<ModelConfig>(&json.replace("\"strategy\":3", "\"strategy\":4")).is_err());
}
