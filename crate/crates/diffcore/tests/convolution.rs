//! Shape rules and adjoint identities for strided convolutions.

use csifb_diffcore::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: (usize, usize)) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, stride).unwrap();
    g.value(y).clone()
}

fn conv_t(x: &Tensor<f64>, k: &Tensor<f64>, stride: (usize, usize)) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv_transpose2d(xv, kv, stride).unwrap();
    g.value(y).clone()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn transposed_conv_equals_explicit_adjoint_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w, cin, cout, stride) = (6, 4, 2, 3, (2, 1));
    let k = Tensor::new(&[3, 3, cin, cout], rand_vec(&mut rng, 9 * cin * cout)).unwrap();
    let in_len = h * w * cin;
    let (ho, wo) = (h / stride.0, w / stride.1);
    let out_len = ho * wo * cout;
    // Column j of A is conv(e_j).
    let mut a = vec![0.0; out_len * in_len];
    for j in 0..in_len {
        let mut e = vec![0.0; in_len];
        e[j] = 1.0;
        let col = conv(&Tensor::new(&[1, h, w, cin], e).unwrap(), &k, stride);
        for i in 0..out_len {
            a[i * in_len + j] = col.data()[i];
        }
    }
    let y = rand_vec(&mut rng, out_len);
    let expected: Vec<f64> = (0..in_len).map(|j| (0..out_len).map(|i| a[i * in_len + j] * y[i]).sum()).collect();
    let got = conv_t(&Tensor::new(&[1, ho, wo, cout], y).unwrap(), &k, stride);
    assert_eq!(got.shape(), &[1, h, w, cin]);
    for (g, e) in got.data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn decoder_upsampling_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(&[1, 32, 32, 2], rand_vec(&mut rng, 32 * 32 * 2)).unwrap();
    let k1 = Tensor::new(&[3, 3, 16, 2], rand_vec(&mut rng, 9 * 32)).unwrap();
    let y = conv_t(&x, &k1, (2, 1));
    assert_eq!(y.shape(), &[1, 64, 32, 16]);
    let k2 = Tensor::new(&[3, 3, 16, 16], rand_vec(&mut rng, 9 * 256)).unwrap();
    let y = conv_t(&y, &k2, (2, 1));
    assert_eq!(y.shape(), &[1, 128, 32, 16]);
    let k3 = Tensor::new(&[3, 3, 2, 16], rand_vec(&mut rng, 9 * 32)).unwrap();
    let y = conv_t(&y, &k3, (2, 1));
    assert_eq!(y.shape(), &[1, 256, 32, 2]);
}

#[test]
fn same_padding_preserves_unit_stride_shape() {
    let x = Tensor::full(&[2, 5, 7, 2], 1.0);
    let k = Tensor::full(&[7, 7, 2, 2], 1.0);
    let y = conv(&x, &k, (1, 1));
    assert_eq!(y.shape(), &[2, 5, 7, 2]);
    // Centre pixel of a 5x7 input under a 7x7 all-ones kernel sees every input entry.
    let centre = ((2 * 7) + 3) * 2;
    assert_eq!(y.data()[centre], 5.0 * 7.0 * 2.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
    let k = g.constant(Tensor::zeros(&[3, 3, 2, 2]));
    assert!(g.conv2d(x, k, (1, 1)).is_err());
    let k2 = g.constant(Tensor::zeros(&[3, 3, 3, 2]));
    assert!(g.conv2d(x, k2, (0, 1)).is_err());
    assert!(g.conv2d(x, k2, (1, 1)).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inner_product_adjoint_identity(
        seed in any::<u64>(),
        b in 1usize..3, hq in 1usize..5, w in 1usize..6,
        cin in 1usize..4, cout in 1usize..4,
        kh in prop::sample::select(vec![1usize, 3, 5, 7]),
        kw in prop::sample::select(vec![1usize, 3]),
        sh in 1usize..3, sw in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (hq * sh, w * sw);
        let x = Tensor::new(&[b, h, w, cin], rand_vec(&mut rng, b * h * w * cin)).unwrap();
        let k = Tensor::new(&[kh, kw, cin, cout], rand_vec(&mut rng, kh * kw * cin * cout)).unwrap();
        let y = Tensor::new(&[b, h / sh, w / sw, cout], rand_vec(&mut rng, b * (h / sh) * (w / sw) * cout)).unwrap();
        let cx = conv(&x, &k, (sh, sw));
        prop_assert_eq!(cx.shape(), y.shape());
        let lhs = dot(cx.data(), y.data());
        let rhs = dot(x.data(), conv_t(&y, &k, (sh, sw)).data());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = Tensor::new(&[1, 4, 3, 2], rand_vec(&mut rng, 24)).unwrap();
        let x2 = Tensor::new(&[1, 4, 3, 2], rand_vec(&mut rng, 24)).unwrap();
        let k = Tensor::new(&[3, 3, 2, 2], rand_vec(&mut rng, 36)).unwrap();
        let mix: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + q).collect();
        let lhs = conv(&Tensor::new(&[1, 4, 3, 2], mix).unwrap(), &k, (2, 1));
        let (y1, y2) = (conv(&x1, &k, (2, 1)), conv(&x2, &k, (2, 1)));
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (a * y1.data()[i] + y2.data()[i])).abs() < 1e-12);
        }
    }
}
