use oilcast::eval::{
    best_quantile, ensemble_moments, mase, mse, nearest_rank_index, plot_csv, plot_svg, quantile_grid, quantile_path,
    ForecastEnsemble, Metric, MetricsReport, MetricsRow, PlotPoint, Selection,
};
use oilcast::rng;
use oilcast::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

/// Smallest 0-based rank k whose cumulative share (k+1)/S reaches m/100.
fn brute_rank(m: usize, s: usize) -> usize {
    (0..s).find(|&k| (k + 1) * 100 >= m * s).unwrap_or(s - 1)
}

fn ensemble(s: usize, h: usize, d: usize, seed: u64) -> ForecastEnsemble<f64> {
    ForecastEnsemble::new(rng::normal_tensor(&mut rng::seeded(seed), &[s, h, d])).unwrap()
}

#[test]
fn nearest_rank_examples() {
    assert_eq!(nearest_rank_index(0.5, 100).unwrap(), 49);
    assert_eq!(nearest_rank_index(0.0, 100).unwrap(), 0);
    assert_eq!(nearest_rank_index(1.0, 100).unwrap(), 99);
    assert_eq!(nearest_rank_index(0.05, 100).unwrap(), 4);
    assert_eq!(nearest_rank_index(0.7, 100).unwrap(), 69);
    assert!(nearest_rank_index(1.01, 100).is_err());
    assert!(nearest_rank_index(-0.1, 100).is_err());
}

#[test]
fn nearest_rank_matches_brute_force() {
    for s in 1..=150 {
        for m in 0..=100 {
            assert_eq!(nearest_rank_index(m as f64 / 100.0, s).unwrap(), brute_rank(m, s), "m={m} s={s}");
        }
    }
}

#[test]
fn quantile_endpoints_are_extremes() {
    let ens = ensemble(30, 5, 2, 1);
    let lo = quantile_path(&ens, 0.0).unwrap();
    let hi = quantile_path(&ens, 1.0).unwrap();
    for h in 0..5 {
        for d in 0..2 {
            let col = ens.column(h, d);
            assert_eq!(lo.get(h, d), col.iter().copied().fold(f64::INFINITY, f64::min));
            assert_eq!(hi.get(h, d), col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
}

#[test]
fn quantile_grid_has_nineteen_points() {
    let g = quantile_grid();
    assert_eq!(g.len(), 19);
    assert_eq!(g[0], 0.05);
    assert_eq!(g[18], 0.95);
    for q in [0.20, 0.25, 0.30, 0.65, 0.70, 0.85, 0.90] {
        assert!(g.iter().any(|&x| (x - q).abs() < 1e-12));
    }
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
    assert_eq!(mse(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
    assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(oilcast::Error::Contract(_))));
}

#[test]
fn mase_examples() {
    assert_eq!(mase(&[5.0, 5.0], &[5.0, 6.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);
    assert_eq!(mase(&[5.0, 6.0], &[5.0, 6.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(matches!(mase(&[1.0], &[1.0], &[3.0, 3.0, 3.0]), Err(oilcast::Error::UndefinedMetric(_))));
    assert!(mase(&[1.0], &[1.0], &[3.0]).is_err());
}

#[test]
fn naive_persistence_on_random_walks_scores_near_one() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut r = rng::seeded(seed);
        let mut walk = vec![0.0];
        for _ in 0..1045 {
            let last = *walk.last().unwrap();
            walk.push(last + rng::normal::<f64>(&mut r));
        }
        let (train, test) = walk.split_at(1000);
        // One-step persistence: each forecast is the previous true value.
        let one_step: Vec<f64> = std::iter::once(*train.last().unwrap()).chain(test[..test.len() - 1].iter().copied()).collect();
        total += mase(&one_step, test, train).unwrap();
    }
    let mean = total / 10.0;
    assert!((0.8..=1.25).contains(&mean), "{mean}");
}

#[test]
fn best_quantile_planted_median() {
    let mut ens = ensemble(100, 6, 1, 3);
    let truth = quantile_path(&ens, 0.5).unwrap();
    let (q, v) = best_quantile(&ens, &truth, &[0.0, 1.0], Metric::Mse).unwrap();
    assert_eq!((q, v), (0.5, 0.0));
    ens = ForecastEnsemble::new(Tensor::full(&[100, 6, 1], 2.0)).unwrap();
    let (q, _) = best_quantile(&ens, &Tensor::full(&[6, 1], 1.0), &[0.0, 1.0], Metric::Mase).unwrap();
    assert_eq!(q, 0.05);
}

#[test]
fn best_quantile_planted_ninetieth() {
    // Sample k holds value k at every step, so rank 89 is the 0.9 path.
    let data: Vec<f64> = (0..100).flat_map(|k| vec![k as f64; 8]).collect();
    let ens = ForecastEnsemble::new(Tensor::new(vec![100, 8, 1], data).unwrap()).unwrap();
    let truth = Tensor::full(&[8, 1], 89.0);
    let (q, v) = best_quantile(&ens, &truth, &[0.0, 1.0], Metric::Mse).unwrap();
    let brute = quantile_grid()
        .into_iter()
        .map(|q| (q, (89.0 - (brute_rank((q * 100.0).round() as usize, 100) as f64)).powi(2)))
        .fold((f64::NAN, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    assert_eq!((q, v), brute);
    assert_eq!(q, 0.9);
}

#[test]
fn moments_examples() {
    let ens = ForecastEnsemble::new(Tensor::full(&[5, 3, 1], 4.0)).unwrap();
    let m = ensemble_moments(&ens).unwrap();
    assert!(m.mean.data().iter().all(|&v| v == 4.0));
    assert!(m.std.data().iter().all(|&v| v == 0.0));
    let ens = ForecastEnsemble::<f64>::new(Tensor::from_f64(&[2, 1, 1], &[1.0, 4.0]).unwrap()).unwrap();
    let m = ensemble_moments(&ens).unwrap();
    assert_eq!(m.mean.data()[0], 2.5);
    // Population convention: |a − b|/2.
    assert_eq!(m.std.data()[0], 1.5);
    let one = ForecastEnsemble::new(Tensor::full(&[1, 3, 1], 4.0)).unwrap();
    assert!(matches!(ensemble_moments(&one), Err(oilcast::Error::UndefinedMetric(_))));
}

#[test]
fn pooled_moments_of_standard_normal() {
    let ens = ensemble(400, 50, 2, 8);
    let m = ensemble_moments(&ens).unwrap();
    for d in 0..2 {
        assert!(m.pooled_mean[d].abs() < 0.02);
        assert!((m.pooled_std[d] - 1.0).abs() < 0.02);
    }
}

#[test]
fn report_round_trips_and_aligns() {
    let row = |site: &str, sel| MetricsRow {
        model: "informer".into(),
        site: site.into(),
        channel: "oil".into(),
        selection: sel,
        quantile: 0.9,
        mse: 0.1 + 0.2,
        mase: 1.0 / 3.0,
        ens_mean: -0.0,
        ens_std: 1e-300,
        truth_mean: 123456.789,
        truth_std: f64::MIN_POSITIVE,
    };
    let report = MetricsReport { rows: vec![row("S1", Selection::Fixed), row("S2", Selection::Oracle)] };
    let back = MetricsReport::from_csv(&report.to_csv()).unwrap();
    assert_eq!(back.to_csv(), report.to_csv());
    assert_eq!(back.rows[0].mse.to_bits(), report.rows[0].mse.to_bits());
    let text = report.to_text();
    let widths: Vec<usize> = text.lines().map(|l| l.len()).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    assert!(text.starts_with("model"));
    assert!(MetricsReport::from_csv("bad header\n").is_err());
}

#[test]
fn plot_outputs() {
    let pts: Vec<PlotPoint> = (0..4)
        .map(|i| PlotPoint { date: format!("2010-03-0{}", i + 1), truth: i as f64, prediction: 1.0, q_low: 0.0, q_high: 3.0 })
        .collect();
    let csv = plot_csv(&pts);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().nth(1).unwrap(), "2010-03-01,0.000000,1.000000,0.000000,3.000000");
    let svg = plot_svg("site <A>", &pts);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("site &lt;A&gt;"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(plot_svg("empty", &[]).contains("</svg>"));
}

fn brute_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let e = p[i] - t[i];
        s += e * e;
    }
    s / p.len() as f64
}

fn brute_mase(p: &[f64], t: &[f64], train: &[f64]) -> f64 {
    let mut num = 0.0;
    for i in 0..p.len() {
        num += (p[i] - t[i]).abs();
    }
    let mut den = 0.0;
    for i in 1..train.len() {
        den += (train[i] - train[i - 1]).abs();
    }
    (num / p.len() as f64) / (den / (train.len() - 1) as f64)
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut r = rng::seeded(99);
    for _ in 0..1000 {
        let h = r.random_range(1..60);
        let l = r.random_range(2..80);
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let mut draw = |n: usize| (0..n).map(|_| scale * rng::normal::<f64>(&mut r)).collect::<Vec<f64>>();
        let (p, t, train) = (draw(h), draw(h), draw(l));
        let a = mse(&p, &t).unwrap();
        let b = brute_mse(&p, &t);
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        let a = mase(&p, &t, &train).unwrap();
        let b = brute_mase(&p, &t, &train);
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn quantiles_are_monotone(s in 1usize..60, seed in 0u64..1000) {
        let ens = ensemble(s, 4, 2, seed);
        let mut qs = quantile_grid();
        qs.insert(0, 0.0);
        qs.push(1.0);
        let paths: Vec<_> = qs.iter().map(|&q| quantile_path(&ens, q).unwrap()).collect();
        for w in paths.windows(2) {
            prop_assert!(w[0].data().iter().zip(w[1].data()).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn metrics_ignore_sample_order(seed in 0u64..1000) {
        let ens = ensemble(20, 5, 1, seed);
        let mut order: Vec<usize> = (0..20).collect();
        order.reverse();
        order.swap(3, 11);
        let shuffled = ForecastEnsemble::from_paths(&order.iter().map(|&s| ens.path(s)).collect::<Vec<_>>()).unwrap();
        let truth = rng::normal_tensor::<f64>(&mut rng::seeded(seed + 1), &[5, 1]);
        let train = [0.0, 1.0, 0.5];
        prop_assert_eq!(
            best_quantile(&ens, &truth, &train, Metric::Mase).unwrap(),
            best_quantile(&shuffled, &truth, &train, Metric::Mase).unwrap()
        );
        prop_assert_eq!(ensemble_moments(&ens).unwrap().pooled_mean, ensemble_moments(&shuffled).unwrap().pooled_mean);
    }

    #[test]
    fn mse_scales_quadratically_and_mase_is_scale_free(c in 0.01f64..100.0, seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let p: Vec<f64> = (0..10).map(|_| rng::normal(&mut r)).collect();
        let t: Vec<f64> = (0..10).map(|_| rng::normal(&mut r)).collect();
        let tr: Vec<f64> = (0..10).map(|_| rng::normal(&mut r)).collect();
        let sc = |v: &[f64]| v.iter().map(|x| c * x).collect::<Vec<_>>();
        let base = mse(&p, &t).unwrap();
        prop_assert!((mse(&sc(&p), &sc(&t)).unwrap() - c * c * base).abs() <= 1e-10 * c * c * base.max(1e-300));
        let m = mase(&p, &t, &tr).unwrap();
        prop_assert!((mase(&sc(&p), &sc(&t), &sc(&tr)).unwrap() - m).abs() <= 1e-12 * m.max(1.0));
    }
}
