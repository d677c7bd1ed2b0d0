use oilcast::diffusion::{
    ddpm_loss, ddpm_loss_given, forward_sample, noise_batch, posterior_params, posterior_variance, step_embedding,
    EpsilonNet, LossNorm, NoisePredictor, NoiseSchedule, Sampler,
};
use oilcast::rng;
use oilcast::{AdamW, AdamWConfig, Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Recovers the injected noise from x_n given the true x0.
struct OracleNet<'a> {
    x0: &'a Tensor<f64>,
    sched: &'a NoiseSchedule<f64>,
}

impl NoisePredictor<f64> for OracleNet<'_> {
    fn data_dim(&self) -> usize {
        self.x0.cols()
    }

    fn cond_dim(&self) -> usize {
        1
    }

    fn predict(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, xn: Var, _: Var, steps: &[usize]) -> Result<Var> {
        let xn = g.value(xn).clone();
        let cols = xn.cols();
        let mut out = xn.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ab = self.sched.alpha_bar(steps[i / cols]);
            *v = (xn.data()[i] - ab.sqrt() * self.x0.data()[i]) / (1.0 - ab).sqrt();
        }
        Ok(g.constant(out))
    }
}

struct ZeroNet(usize);

impl NoisePredictor<f64> for ZeroNet {
    fn data_dim(&self) -> usize {
        self.0
    }

    fn cond_dim(&self) -> usize {
        1
    }

    fn predict(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, xn: Var, _: Var, _: &[usize]) -> Result<Var> {
        let shape = g.shape(xn).to_vec();
        Ok(g.constant(Tensor::zeros(&shape)))
    }
}

#[test]
fn single_step_schedule() {
    let s = NoiseSchedule::<f64>::linear(1, 0.02, 0.5).unwrap();
    assert_eq!(s.betas(), &[0.02]);
    assert_eq!(s.alpha_bar(1), 1.0 - 0.02);
    assert_eq!(s.beta_tilde(1), 0.0);
}

#[test]
fn two_step_products() {
    let s = NoiseSchedule::<f64>::from_betas(vec![0.1, 0.2]).unwrap();
    assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
}

#[test]
fn schedule_rejects_bad_betas() {
    assert!(NoiseSchedule::<f64>::from_betas(vec![0.5, 0.5]).is_err());
    assert!(NoiseSchedule::<f64>::from_betas(vec![0.2, 0.1]).is_err());
    assert!(NoiseSchedule::<f64>::from_betas(vec![0.0, 0.1]).is_err());
    assert!(NoiseSchedule::<f64>::linear(0, 0.1, 0.2).is_err());
    assert!(NoiseSchedule::<f64>::linear(10, 0.2, 0.1).is_err());
    assert!(NoiseSchedule::<f64>::linear(10, 0.1, 1.0).is_err());
}

#[test]
fn default_schedule_shape() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.1).unwrap();
    assert_eq!(s.steps(), 100);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(100) - 0.1).abs() < 1e-15);
    assert!(s.alpha_bar(100) < 0.01);
}

#[test]
fn hypothetical_equal_beta_posterior_variance() {
    // β = [0.5, 0.5]: ᾱ_1 = 0.5, ᾱ_2 = 0.25.
    let v: f64 = posterior_variance(0.5, 0.5, 0.25);
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn forward_sample_examples() {
    let s = NoiseSchedule::from_betas(vec![0.5, 0.5 + 1e-12]).unwrap();
    let x0 = t(&[3], &[2.0, -4.0, 1.0]);
    let eps = Tensor::zeros(&[3]);
    // ᾱ_2 ≈ 0.25, so the result is ≈ x0/2.
    let y = forward_sample(&x0, 2, &eps, &s).unwrap();
    for (a, b) in y.data().iter().zip(x0.data()) {
        assert!((a - 0.5 * b).abs() < 1e-11);
    }
    let small = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
    let y = forward_sample(&Tensor::zeros(&[2]), 1, &t(&[2], &[5.0, -5.0]), &small).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-5));
    assert!(forward_sample(&x0, 3, &eps, &s).is_err());
    assert!(forward_sample(&x0, 0, &eps, &s).is_err());
}

#[test]
fn forward_sample_monte_carlo_moments() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.1).unwrap();
    let mut r = rng::seeded(7);
    let draws = 100_000;
    for n in [1, 30, 100] {
        let x0 = Tensor::full(&[draws], 1.5);
        let eps = rng::normal_tensor(&mut r, &[draws]);
        let xn = forward_sample(&x0, n, &eps, &s).unwrap();
        let resid: Vec<f64> = xn.data().iter().map(|v| v - s.alpha_bar(n).sqrt() * 1.5).collect();
        let mean = resid.iter().sum::<f64>() / draws as f64;
        let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let target = 1.0 - s.alpha_bar(n);
        assert!((var / target - 1.0).abs() < 0.03, "n={n}: var {var} vs {target}");
        assert!(mean.abs() < 3.0 * (target / draws as f64).sqrt());
    }
}

#[test]
fn posterior_examples() {
    let s = NoiseSchedule::<f64>::linear(50, 1e-3, 0.2).unwrap();
    let x = t(&[2], &[0.3, -1.0]);
    let (_, var) = posterior_params(&x, &x, 1, &s).unwrap();
    assert_eq!(var, 0.0);
    // At n = 1 the posterior mean is x0 exactly.
    let (mean, _) = posterior_params(&t(&[2], &[9.0, 9.0]), &x, 1, &s).unwrap();
    assert!(mean.max_abs_diff(&x) < 1e-12);
}

#[test]
fn posterior_mean_is_between_inputs_on_convex_sweep() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.1).unwrap();
    for n in 1..=100 {
        let (mean, var) = posterior_params(&t(&[1], &[1.0]), &t(&[1], &[1.0]), n, &s).unwrap();
        let m = mean.data()[0];
        assert!(m.is_finite() && var.is_finite());
        // Coefficients sum to ≈ 1 + O(β) because √α_n ≤ 1 and √ᾱ_{n-1} ≤ 1.
        assert!(m > 0.0 && m <= 1.0 + 1e-12, "n={n}: {m}");
    }
}

#[test]
fn posterior_matches_gaussian_product_oracle() {
    // q(x_{n-1}|x_n,x0) ∝ N(x_n; √α x_{n-1}, β) · N(x_{n-1}; √ᾱ_{n-1} x0, 1-ᾱ_{n-1}).
    let s = NoiseSchedule::<f64>::linear(20, 1e-3, 0.3).unwrap();
    let (xn, x0) = (0.7, -1.2);
    for n in 2..=20 {
        let (a, b, abp) = (s.alpha(n), s.beta(n), s.alpha_bar(n - 1));
        let prec = a / b + 1.0 / (1.0 - abp);
        let mean = (a.sqrt() * xn / b + abp.sqrt() * x0 / (1.0 - abp)) / prec;
        let (m, v) = posterior_params(&t(&[1], &[xn]), &t(&[1], &[x0]), n, &s).unwrap();
        assert!((m.data()[0] - mean).abs() < 1e-12);
        assert!((v - 1.0 / prec).abs() < 1e-12);
    }
}

#[test]
fn oracle_net_has_zero_loss_for_both_norms() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.1).unwrap();
    let mut r = rng::seeded(3);
    let x0 = rng::normal_tensor(&mut r, &[16, 3]);
    let net = OracleNet { x0: &x0, sched: &s };
    let store = ParamStore::new();
    for norm in [LossNorm::L1, LossNorm::L2] {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[16, 1]));
        let loss = ddpm_loss(&mut g, &store, &net, &s, &x0, h, &mut r, norm).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-12, "{norm}");
    }
}

#[test]
fn zero_net_l2_loss_averages_to_dimension() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.1).unwrap();
    let mut r = rng::seeded(5);
    let d = 4;
    let x0 = rng::normal_tensor(&mut r, &[10_000, d]);
    let store = ParamStore::new();
    let mut g = Graph::new();
    let h = g.constant(Tensor::zeros(&[10_000, 1]));
    let loss = ddpm_loss(&mut g, &store, &ZeroNet(d), &s, &x0, h, &mut r, LossNorm::L2).unwrap();
    let v = g.value(loss).data()[0];
    assert!((v / d as f64 - 1.0).abs() < 0.05, "{v}");
}

#[test]
fn loss_rejects_width_mismatch() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-4, 0.1).unwrap();
    let mut r = rng::seeded(1);
    let mut g = Graph::new();
    let h = g.constant(Tensor::zeros(&[2, 1]));
    let x0 = Tensor::zeros(&[2, 3]);
    let res = ddpm_loss(&mut g, &ParamStore::new(), &ZeroNet(2), &s, &x0, h, &mut r, LossNorm::L1);
    assert!(matches!(res, Err(oilcast::Error::Contract(_))));
}

#[test]
fn zero_predictor_reverse_step_divides_by_sqrt_alpha() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-2, 0.2).unwrap();
    let store = ParamStore::new();
    let sampler = Sampler::new(&ZeroNet(2), &store, &s);
    let xn = t(&[1, 2], &[1.0, -3.0]);
    let h = Tensor::zeros(&[1, 1]);
    let z = Tensor::zeros(&[1, 2]);
    let y = sampler.reverse_step(&xn, &h, 5, &z).unwrap();
    for (a, b) in y.data().iter().zip(xn.data()) {
        assert!((a - b / s.alpha(5).sqrt()).abs() < 1e-15);
    }
    let lit = Sampler::new(&ZeroNet(2), &store, &s).paper_literal(true);
    let y = lit.reverse_step(&xn, &h, 5, &z).unwrap();
    assert!((y.data()[0] - 1.0 / s.alpha_bar(5).sqrt()).abs() < 1e-15);
    assert!(sampler.reverse_step(&xn, &h, 0, &z).is_err());
}

#[test]
fn final_step_injects_no_noise() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-2, 0.2).unwrap();
    let store = ParamStore::new();
    let sampler = Sampler::new(&ZeroNet(1), &store, &s);
    let xn = t(&[1, 1], &[0.4]);
    let h = Tensor::zeros(&[1, 1]);
    let a = sampler.reverse_step(&xn, &h, 1, &t(&[1, 1], &[100.0])).unwrap();
    let b = sampler.reverse_step(&xn, &h, 1, &Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_step_round_trip_recovers_x0() {
    let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
    let mut r = rng::seeded(11);
    let x0 = rng::normal_tensor(&mut r, &[5, 2]);
    let eps = rng::normal_tensor(&mut r, &[5, 2]);
    let xn = forward_sample(&x0, 1, &eps, &s).unwrap();
    let net = OracleNet { x0: &x0, sched: &s };
    let store = ParamStore::new();
    let back = Sampler::new(&net, &store, &s).reverse_step(&xn, &Tensor::zeros(&[5, 1]), 1, &Tensor::zeros(&[5, 2])).unwrap();
    assert!(back.max_abs_diff(&x0) < 1e-9);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = NoiseSchedule::<f64>::linear(20, 1e-4, 0.1).unwrap();
    let mut store = ParamStore::new();
    let net = EpsilonNet::new(&mut store, "eps.", 2, 3, 16, &mut rng::seeded(0)).unwrap();
    let h = rng::normal_tensor(&mut rng::seeded(1), &[4, 3]);
    let sampler = Sampler::new(&net, &store, &s);
    let a = sampler.sample(&h, &mut rng::seeded(9)).unwrap();
    let b = sampler.sample(&h, &mut rng::seeded(9)).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn one_step_sampler_is_single_noiseless_step() {
    let s = NoiseSchedule::from_betas(vec![0.2]).unwrap();
    let mut store = ParamStore::new();
    let net = EpsilonNet::new(&mut store, "", 1, 1, 8, &mut rng::seeded(0)).unwrap();
    let h = Tensor::zeros(&[1, 1]);
    let sampler = Sampler::new(&net, &store, &s);
    let x_init = t(&[1, 1], &[0.3]);
    let full = sampler.sample_from(x_init.clone(), &h, &mut rng::seeded(4)).unwrap();
    let step = sampler.reverse_step(&x_init, &h, 1, &Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(full, step);
}

#[test]
fn stream_sampler_rows_depend_only_on_their_stream() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-3, 0.1).unwrap();
    let mut store = ParamStore::new();
    let net = EpsilonNet::new(&mut store, "", 2, 2, 8, &mut rng::seeded(0)).unwrap();
    let sampler = Sampler::new(&net, &store, &s);
    let h = Tensor::zeros(&[3, 2]);
    let x = rng::normal_tensor(&mut rng::seeded(2), &[3, 2]);
    let mut fwd: Vec<_> = (0..3).map(|i| rng::stream(5, i)).collect();
    let mut rev: Vec<_> = (0..3).rev().map(|i| rng::stream(5, i)).collect();
    let xr = Tensor::from_rows(&[x.row(2).to_vec(), x.row(1).to_vec(), x.row(0).to_vec()]).unwrap();
    let a = sampler.sample_streams(x, &h, &mut fwd).unwrap();
    let b = sampler.sample_streams(xr, &h, &mut rev).unwrap();
    for i in 0..3 {
        assert_eq!(a.row(i), b.row(2 - i));
    }
}

#[test]
fn embedding_distinguishes_steps() {
    let a = step_embedding::<f64>(1);
    let b = step_embedding::<f64>(2);
    assert_eq!(a.len(), 64);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
    assert!(a.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn epsilon_net_loss_gradient_matches_finite_differences() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-3, 0.2).unwrap();
    let mut store = ParamStore::new();
    let net = EpsilonNet::new(&mut store, "", 2, 3, 6, &mut rng::seeded(0)).unwrap();
    let x0 = rng::normal_tensor(&mut rng::seeded(1), &[4, 2]);
    let hval = rng::normal_tensor(&mut rng::seeded(2), &[4, 3]);
    let batch = noise_batch(&x0, &s, &mut rng::seeded(3)).unwrap();
    let loss_at = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let h = g.constant(hval.clone());
        let l = ddpm_loss_given(&mut g, store, &net, &batch, h, LossNorm::L2).unwrap();
        (g.value(l).data()[0], g.backward(l).unwrap().into_param_grads())
    };
    let (_, grads) = loss_at(&store);
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).unwrap().clone();
        let mut numeric = analytic.clone();
        for k in 0..analytic.numel() {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[k] += 1e-5;
            let mut m = store.clone();
            m.get_mut(id).data_mut()[k] -= 1e-5;
            numeric.data_mut()[k] = (loss_at(&p).0 - loss_at(&m).0) / 2e-5;
        }
        let diff = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / norm < 1e-4, "{}: {}", store.name(id), diff / norm);
    }
}

#[test]
fn training_shrinks_loss_on_constant_data() {
    let s = NoiseSchedule::<f64>::linear(50, 1e-4, 0.1).unwrap();
    let mut store = ParamStore::new();
    let net = EpsilonNet::new(&mut store, "", 1, 1, 32, &mut rng::seeded(0)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default().with_learning_rate(3e-3), &store).unwrap();
    let x0 = Tensor::full(&[128, 1], 2.0);
    let mut r = rng::seeded(1);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[128, 1]));
        let l = ddpm_loss(&mut g, &store, &net, &s, &x0, h, &mut r, LossNorm::L2).unwrap();
        losses.push(g.value(l).data()[0]);
        let grads = g.backward(l).unwrap().into_param_grads();
        opt.step(&mut store, &grads).unwrap();
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_identities(steps in 1usize..200, start in 1e-5f64..0.05, width in 1e-4f64..0.9) {
        let end = (start + width).min(0.99);
        let s = NoiseSchedule::<f64>::linear(steps, start, end).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert_eq!(s.beta_tilde(1), 0.0);
        for n in 1..=steps {
            prop_assert_eq!(s.alpha_bar(n), s.alpha_bar(n - 1) * (1.0 - s.beta(n)));
            prop_assert!(s.beta_tilde(n) >= 0.0 && s.beta_tilde(n) <= s.beta(n));
            prop_assert!(s.alpha_bar(n) < s.alpha_bar(n - 1));
        }
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..500, l2 in any::<bool>()) {
        let s = NoiseSchedule::<f64>::linear(20, 1e-4, 0.1).unwrap();
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed);
        let net = EpsilonNet::new(&mut store, "", 2, 2, 8, &mut r).unwrap();
        let x0 = rng::normal_tensor(&mut r, &[3, 2]);
        let mut g = Graph::new();
        let h = g.constant(rng::normal_tensor(&mut r, &[3, 2]));
        let norm = if l2 { LossNorm::L2 } else { LossNorm::L1 };
        let l = ddpm_loss(&mut g, &store, &net, &s, &x0, h, &mut r, norm).unwrap();
        prop_assert!(g.value(l).data()[0] >= 0.0);
    }
}
