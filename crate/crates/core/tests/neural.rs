use ltvs_core::neural::{
    self, gaussian_log_prob, gaussian_log_prob_grad, sigmoid, softplus, Activation, AdamState, Gradients, Mlp,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const STATE_DIM: usize = 42;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// True when every hidden pre-activation is far enough from the ReLU kink
/// that a step of `H` in any parameter cannot cross it.
fn away_from_kinks(net: &Mlp<f64>, x: &[f64]) -> bool {
    let cache = net.forward(x).unwrap();
    (0..net.layers().len() - 1).all(|l| cache.pre_activation(l).iter().all(|z| z.abs() > 1e-3))
}

/// Compares the analytic gradient of `loss` with central differences on a
/// random subset of parameters and returns the relative error
/// `‖fd − an‖ / (‖fd‖ + ‖an‖)` together with the worst coordinate error.
fn check_gradient(
    net: &Mlp<f64>,
    analytic: &Gradients<f64>,
    loss: &dyn Fn(&Mlp<f64>) -> f64,
    coords: &[usize],
) -> (f64, f64) {
    let an = analytic.flatten();
    let base = net.params_flat();
    let mut probe = net.clone();
    let (mut diff2, mut fd2, mut an2, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    for &i in coords {
        let mut p = base.clone();
        p[i] = base[i] + H;
        probe.set_params_flat(&p);
        let up = loss(&probe);
        p[i] = base[i] - H;
        probe.set_params_flat(&p);
        let down = loss(&probe);
        let fd = (up - down) / (2.0 * H);
        diff2 += (fd - an[i]).powi(2);
        fd2 += fd * fd;
        an2 += an[i] * an[i];
        let scale = fd.abs().max(an[i].abs());
        if scale > 1e-6 {
            worst = worst.max((fd - an[i]).abs() / scale);
        }
    }
    let rel = diff2.sqrt() / (fd2.sqrt() + an2.sqrt()).max(1e-300);
    (rel, worst)
}

fn sample_coords(rng: &mut ChaCha8Rng, n_params: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n_params)).collect()
}

#[test]
fn actor_log_prob_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draws = 0;
    let mut worst_rel: f64 = 0.0;
    while draws < 100 {
        let net: Mlp<f64> = neural::actor(STATE_DIM, &mut rng);
        let x = normal_vec(&mut rng, STATE_DIM, 1.5);
        if !away_from_kinks(&net, &x) {
            continue;
        }
        let out = net.predict(&x).unwrap();
        let action = out[0] + out[1] * rng.sample::<f64, _>(StandardNormal);
        let loss = |n: &Mlp<f64>| {
            let o = n.predict(&x).unwrap();
            gaussian_log_prob(o[0], o[1], action)
        };
        let cache = net.forward(&x).unwrap();
        let (g_mu, g_sigma) = gaussian_log_prob_grad(out[0], out[1], action);
        let grads = net.backward(&cache, &[g_mu, g_sigma]).unwrap();
        let coords = sample_coords(&mut rng, net.num_params(), 150);
        let (rel, _) = check_gradient(&net, &grads, &loss, &coords);
        assert!(rel < REL_TOL, "draw {draws}: relative error {rel:e}");
        worst_rel = worst_rel.max(rel);
        draws += 1;
    }
    assert!(worst_rel < REL_TOL);
}

#[test]
fn critic_squared_error_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut draws = 0;
    while draws < 100 {
        let net: Mlp<f64> = neural::critic(STATE_DIM, &mut rng);
        let x = normal_vec(&mut rng, STATE_DIM, 1.5);
        if !away_from_kinks(&net, &x) {
            continue;
        }
        let target = rng.random_range(-50.0..10.0);
        let loss = |n: &Mlp<f64>| (n.predict(&x).unwrap()[0] - target).powi(2);
        let cache = net.forward(&x).unwrap();
        let err = cache.output()[0] - target;
        let grads = net.backward(&cache, &[2.0 * err]).unwrap();
        let coords = sample_coords(&mut rng, net.num_params(), 150);
        let (rel, worst) = check_gradient(&net, &grads, &loss, &coords);
        assert!(rel < REL_TOL, "draw {draws}: relative error {rel:e}");
        assert!(worst < 1e-3, "draw {draws}: worst coordinate {worst:e}");
        draws += 1;
    }
}

#[test]
fn full_parameter_sweep_on_small_actor() {
    // Every parameter of a small network, including the softplus head.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut done = 0;
    while done < 10 {
        let net: Mlp<f64> = Mlp::new(&[5, 7, 4, 2], vec![Activation::Linear, Activation::Softplus], &mut rng);
        let x = normal_vec(&mut rng, 5, 1.0);
        if !away_from_kinks(&net, &x) {
            continue;
        }
        let action = rng.random_range(-1.0..1.0);
        let loss = |n: &Mlp<f64>| {
            let o = n.predict(&x).unwrap();
            gaussian_log_prob(o[0], o[1], action)
        };
        let out = net.predict(&x).unwrap();
        let (g_mu, g_sigma) = gaussian_log_prob_grad(out[0], out[1], action);
        let grads = net.backward(&net.forward(&x).unwrap(), &[g_mu, g_sigma]).unwrap();
        let all: Vec<usize> = (0..net.num_params()).collect();
        let (rel, worst) = check_gradient(&net, &grads, &loss, &all);
        assert!(rel < REL_TOL, "relative error {rel:e}");
        assert!(worst < 1e-3, "worst coordinate {worst:e}");
        done += 1;
    }
}

#[test]
fn log_prob_and_softplus_derivatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let mu = rng.random_range(-3.0..3.0);
        let sigma = rng.random_range(0.05..2.0);
        let a = mu + sigma * rng.random_range(-3.0..3.0);
        let (g_mu, g_sigma) = gaussian_log_prob_grad(mu, sigma, a);
        let fd_mu = (gaussian_log_prob(mu + H, sigma, a) - gaussian_log_prob(mu - H, sigma, a)) / (2.0 * H);
        let fd_sigma = (gaussian_log_prob(mu, sigma + H, a) - gaussian_log_prob(mu, sigma - H, a)) / (2.0 * H);
        for (fd, an) in [(fd_mu, g_mu), (fd_sigma, g_sigma)] {
            assert!((fd - an).abs() <= REL_TOL * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
        }
        let z: f64 = rng.random_range(-20.0..20.0);
        let fd = (softplus(z + H) - softplus(z - H)) / (2.0 * H);
        let an = sigmoid(z);
        assert!((fd - an).abs() <= REL_TOL * an.max(1e-6), "softplus'({z}): {fd} vs {an}");
    }
}

#[test]
fn log_prob_closed_forms() {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((gaussian_log_prob(0.3, 1.0, 0.3) + half_ln_2pi).abs() < 1e-12);
    let s = 0.7f64;
    let v = gaussian_log_prob(0.2, s, 0.2 + s);
    assert!((v - (-half_ln_2pi - s.ln() - 0.5)).abs() < 1e-12);
}

/// Naive forward pass written against the public layer data only.
fn oracle_forward(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let layers = net.layers();
    let mut a = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let mut z = layer.biases.clone();
        for (i, &ai) in a.iter().enumerate().take(layer.inputs) {
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += layer.weights[o * layer.inputs + i] * ai;
            }
        }
        a = if li + 1 == layers.len() {
            z.iter()
                .zip(net.heads())
                .map(|(&v, h)| match h {
                    Activation::Linear => v,
                    Activation::Softplus => (1.0 + v.exp()).ln(),
                })
                .collect()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
    }
    a
}

#[test]
fn forward_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let net: Mlp<f64> = neural::actor(STATE_DIM, &mut rng);
        let x = normal_vec(&mut rng, STATE_DIM, 2.0);
        let got = net.predict(&x).unwrap();
        let want = oracle_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
        assert!(got[1] > 0.0);
    }
}

#[test]
fn hand_computed_forward() {
    let mut net: Mlp<f64> = Mlp::zeros(&[2, 2, 2], vec![Activation::Linear, Activation::Softplus]);
    {
        let layers = net.params_mut();
        layers[0].weights = vec![1.0, -1.0, 0.5, 2.0];
        layers[0].biases = vec![0.0, -1.0];
        layers[1].weights = vec![2.0, 1.0, -1.0, 0.5];
        layers[1].biases = vec![0.1, 0.2];
    }
    // Hidden: relu(1 − 2) = 0, relu(0.5 + 4 − 1) = 3.5.
    let out = net.predict(&[1.0, 2.0]).unwrap();
    assert!((out[0] - 3.6).abs() < 1e-12);
    assert!((out[1] - (1.0 + 1.95f64.exp()).ln()).abs() < 1e-12);

    let zero: Mlp<f64> = Mlp::zeros(&[3, 4, 2], vec![Activation::Linear, Activation::Softplus]);
    let out = zero.predict(&[0.3, -1.0, 2.0]).unwrap();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn initial_policy_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let actor: Mlp<f64> = neural::actor(STATE_DIM, &mut rng);
    assert_eq!(actor.dims(), vec![STATE_DIM, 64, 32, 2]);
    assert_eq!(actor.heads(), &[Activation::Linear, Activation::Softplus]);
    let critic: Mlp<f64> = neural::critic(STATE_DIM, &mut rng);
    assert_eq!(critic.dims(), vec![STATE_DIM, 128, 1]);
    // Zero input isolates the biases: σ starts at 0.5, μ at 0.
    let out = actor.predict(&vec![0.0; STATE_DIM]).unwrap();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 0.5).abs() < 1e-12);
    for layer in actor.layers() {
        let bound = 1.0 / (layer.inputs as f64).sqrt();
        assert!(layer.weights.iter().all(|w| w.abs() <= bound));
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let net64: Mlp<f64> = neural::actor(STATE_DIM, &mut rng);
        let mut net32: Mlp<f32> = Mlp::zeros(&net64.dims(), net64.heads().to_vec());
        let flat: Vec<f32> = net64.params_flat().iter().map(|&v| v as f32).collect();
        net32.set_params_flat(&flat);
        let x = normal_vec(&mut rng, STATE_DIM, 1.0);
        if !away_from_kinks(&net64, &x) {
            continue;
        }
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let o64 = net64.predict(&x).unwrap();
        let o32 = net32.predict(&x32).unwrap();
        for (a, b) in o64.iter().zip(&o32) {
            assert!((a - *b as f64).abs() < 1e-4 * a.abs().max(1.0));
        }
        let g64 = net64.backward(&net64.forward(&x).unwrap(), &[1.0, -0.5]).unwrap().flatten();
        let g32 = net32.backward(&net32.forward(&x32).unwrap(), &[1.0, -0.5]).unwrap().flatten();
        let num: f64 = g64.iter().zip(&g32).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>().sqrt();
        let den: f64 = g64.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-4, "{}", num / den);
    }
}

#[test]
fn serde_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let net: Mlp<f64> = neural::actor(STATE_DIM, &mut rng);
    let text = serde_json::to_string(&net).unwrap();
    let back: Mlp<f64> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, net);
    let x = normal_vec(&mut rng, STATE_DIM, 1.0);
    let (a, b) = (net.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert_eq!(a[0].to_bits(), b[0].to_bits());
    assert_eq!(a[1].to_bits(), b[1].to_bits());

    let mut opt = AdamState::<f64>::new(net.num_params());
    let mut moved = net.clone();
    let g = moved.backward(&moved.forward(&x).unwrap(), &[1.0, 1.0]).unwrap();
    opt.step(&mut moved, &g, 1e-3).unwrap();
    let back: AdamState<f64> = serde_json::from_str(&serde_json::to_string(&opt).unwrap()).unwrap();
    assert_eq!(back, opt);
}

#[test]
fn stale_cache_and_bad_shapes_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut net: Mlp<f64> = neural::critic(4, &mut rng);
    assert!(net.forward(&[1.0, 2.0]).is_err());
    let cache = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(net.backward(&cache, &[1.0, 2.0]).is_err());
    let other = net.clone();
    assert!(other.backward(&cache, &[1.0]).is_err());
    net.params_mut()[0].biases[0] += 1.0;
    assert!(net.backward(&cache, &[1.0]).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut net: Mlp<f64> = neural::critic(3, &mut rng);
    let before = net.params_flat();
    let x = [0.5, -1.0, 2.0];
    let g = net.backward(&net.forward(&x).unwrap(), &[1.0]).unwrap();
    let gf = g.flatten();
    let mut opt = AdamState::new(net.num_params());
    opt.step(&mut net, &g, 1e-3).unwrap();
    for ((b, a), gi) in before.iter().zip(net.params_flat()).zip(gf) {
        if gi.abs() > 1e-6 {
            assert!((a - b + 1e-3 * gi.signum()).abs() < 1e-8, "{b} -> {a} with grad {gi}");
        } else if gi == 0.0 {
            assert_eq!(a, *b);
        }
    }
    let mut bad = g.clone();
    bad.layers[0].biases[0] = f64::NAN;
    assert!(opt.step(&mut net, &bad, 1e-3).is_err());
}
