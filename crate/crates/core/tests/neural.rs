mod oracles;

use ewip_core::neural::{soft_update, Mlp, OutputKind};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line forward pass over the documented flat layout.
fn loop_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let sizes = net.sizes();
    let p = net.params();
    let mut a = x.to_vec();
    let mut off = 0;
    for layer in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[layer], sizes[layer + 1]);
        let w = &p[off..off + n_in * n_out];
        let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for r in 0..n_out {
            let mut acc = b[r];
            for c in 0..n_in {
                acc += w[c * n_out + r] * a[c];
            }
            z[r] = acc;
        }
        if layer + 2 < sizes.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        a = z;
    }
    if let OutputKind::TanhScaled(lim) = net.output_kind() {
        for (v, l) in a.iter_mut().zip(lim) {
            *v = l * v.tanh();
        }
    }
    a
}

fn random_net(rng: &mut ChaCha8Rng) -> Mlp {
    let depth = rng.random_range(2..=4);
    let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
    let out = *sizes.last().unwrap();
    let kind = if rng.random_bool(0.5) {
        OutputKind::Linear
    } else {
        OutputKind::TanhScaled((0..out).map(|_| rng.random_range(0.5..5.0)).collect())
    };
    let mut net = Mlp::new(&sizes, kind, rng.random()).unwrap();
    // widen the last layer and give biases some spread
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    net
}

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let net = random_net(&mut rng);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = net.forward(&x).unwrap();
        let want = loop_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
        assert_eq!(net.forward(&x).unwrap(), got);
    }
}

/// Loss `sum_i c_i y_i + 1/2 y_i^2` summed over a small batch.
fn check_gradients(net: &Mlp, rng: &mut ChaCha8Rng) -> f64 {
    let batch = rng.random_range(1..=3);
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..net.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |n: &Mlp| -> f64 {
        xs.iter()
            .map(|x| {
                loop_forward(n, x)
                    .iter()
                    .zip(&c)
                    .map(|(y, ci)| ci * y + 0.5 * y * y)
                    .sum::<f64>()
            })
            .sum()
    };
    let mut input = DMatrix::zeros(net.input_dim(), batch);
    for (j, x) in xs.iter().enumerate() {
        input.column_mut(j).copy_from_slice(x);
    }
    let pass = net.forward_recorded(&input).unwrap();
    let mut seed = pass.output().clone();
    for mut col in seed.column_iter_mut() {
        for (v, ci) in col.iter_mut().zip(&c) {
            *v += ci;
        }
    }
    let (grads, _) = net.backward(&pass, &seed).unwrap();
    let fd = oracles::central_gradient(
        |p| {
            let n = Mlp::from_params(net.sizes(), net.output_kind().clone(), p.to_vec()).unwrap();
            loss(&n)
        },
        net.params(),
        1e-5,
    );
    grads
        .0
        .iter()
        .zip(&fd)
        .map(|(a, b)| oracles::rel_err(*a, *b, 1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let net = random_net(&mut rng);
        worst = worst.max(check_gradients(&net, &mut rng));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let net = random_net(&mut rng);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pass = net
            .forward_recorded(&DMatrix::from_column_slice(x.len(), 1, &x))
            .unwrap();
        let seed = DMatrix::from_element(net.output_dim(), 1, 1.0);
        let (_, gin) = net.backward(&pass, &seed).unwrap();
        let fd = oracles::central_gradient(|v| loop_forward(&net, v).iter().sum(), &x, 1e-5);
        for (a, b) in gin.iter().zip(&fd) {
            assert!(oracles::rel_err(*a, *b, 1e-3) <= 1e-4);
        }
    }
}

proptest! {
    #[test]
    fn json_round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6) {
        let mut net = Mlp::new(&[4, 7, 3], OutputKind::TanhScaled(vec![5.0, 20.0, 0.1]), seed).unwrap();
        for p in net.params_mut() {
            *p *= scale;
        }
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        for (a, b) in net.params().iter().zip(back.params()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn soft_update_composes_affinely(a in 0.0f64..1.0, b in 0.0f64..1.0, s1 in any::<u64>(), s2 in any::<u64>()) {
        let target = Mlp::new(&[3, 4, 2], OutputKind::Linear, s1).unwrap();
        let online = Mlp::new(&[3, 4, 2], OutputKind::Linear, s2).unwrap();
        let twice = soft_update(&soft_update(&target, &online, a).unwrap(), &online, b).unwrap();
        let once = soft_update(&target, &online, 1.0 - (1.0 - a) * (1.0 - b)).unwrap();
        for (x, y) in twice.params().iter().zip(once.params()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
