use m3net::fixtures::{toy_config, toy_splits};
use m3net::metrics::MetricsAccumulator;
use m3net::trainer::evaluate;
use m3net::{M3Net, Tensor, Variant};

/// Horizon-wise sums from independent per-window predictions.
fn naive_metrics(model: &M3Net<f64>, splits: &m3net::Splits, threshold: f64) -> Vec<(f64, f64, f64)> {
    let f = model.config().horizon;
    let mut abs = vec![0.0; f];
    let mut sq = vec![0.0; f];
    let mut ape = vec![0.0; f];
    let mut count = vec![0usize; f];
    let mut ape_count = vec![0usize; f];
    for i in 0..splits.test.len() {
        let s = splits.test.sample(i);
        let x: Tensor<f64> = s.x.cast();
        let pred = model.predict(&x, s.tod_idx, s.dow_idx, &splits.stats).unwrap();
        for n in 0..model.config().nodes {
            for h in 0..f {
                let p = pred.get(&[n, h]);
                let y = s.y.get(&[h, n]) as f64;
                abs[h] += (p - y).abs();
                sq[h] += (p - y) * (p - y);
                count[h] += 1;
                if y.abs() > threshold {
                    ape[h] += (p - y).abs() / y.abs();
                    ape_count[h] += 1;
                }
            }
        }
    }
    let mut out: Vec<(f64, f64, f64)> = (0..f)
        .map(|h| {
            let c = count[h] as f64;
            (abs[h] / c, (sq[h] / c).sqrt(), 100.0 * ape[h] / ape_count[h] as f64)
        })
        .collect();
    let c: f64 = count.iter().sum::<usize>() as f64;
    out.push((
        abs.iter().sum::<f64>() / c,
        (sq.iter().sum::<f64>() / c).sqrt(),
        100.0 * ape.iter().sum::<f64>() / ape_count.iter().sum::<usize>() as f64,
    ));
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn evaluate_matches_per_window_oracle() {
    for variant in Variant::ALL {
        let cfg = m3net::ModelConfig {
            horizon: 12,
            ..toy_config(variant, 3)
        };
        let splits = toy_splits(&cfg, 500, 3).unwrap();
        let model = M3Net::<f64>::new(cfg).unwrap();
        let report = evaluate(&model, &splits.test, &splits.stats, 7, 1.0).unwrap();
        let want = naive_metrics(&model, &splits, 1.0);
        for h in [3, 6, 12] {
            let got = report.horizon(h).unwrap();
            let (mae, rmse, mape) = want[h - 1];
            assert!(rel(got.mae, mae) < 1e-9 && rel(got.rmse, rmse) < 1e-9 && rel(got.mape, mape) < 1e-9);
        }
        let (mae, rmse, mape) = want[12];
        let avg = report.average;
        assert!(rel(avg.mae, mae) < 1e-9, "{variant}: {} vs {mae}", avg.mae);
        assert!(rel(avg.rmse, rmse) < 1e-9);
        assert!(rel(avg.mape, mape) < 1e-9);
    }
}

#[test]
fn metrics_hand_case() {
    let mut acc = MetricsAccumulator::new(1, 1.0);
    let pred = Tensor::<f64>::new(&[2, 1], vec![12.0, 16.0]).unwrap();
    let y = Tensor::<f64>::new(&[2, 1], vec![10.0, 20.0]).unwrap();
    acc.push(&pred, &y);
    let c = acc.report().average;
    assert!((c.mae - 3.0).abs() < 1e-12);
    assert!((c.rmse - 10f64.sqrt()).abs() < 1e-12);
    assert!((c.mape - 20.0).abs() < 1e-12);
    assert!((c.rmse - 3.1623).abs() < 1e-4);
}

#[test]
fn mape_skips_small_targets() {
    let mut acc = MetricsAccumulator::new(1, 1.0);
    let pred = Tensor::<f64>::new(&[3, 1], vec![11.0, 5.0, 3.0]).unwrap();
    let y = Tensor::<f64>::new(&[3, 1], vec![10.0, 1.0, 0.0]).unwrap();
    acc.push(&pred, &y);
    let c = acc.report().average;
    // only the first entry has |y| > 1
    assert!((c.mape - 10.0).abs() < 1e-12);
    assert!((c.mae - 8.0 / 3.0).abs() < 1e-12);
}

#[test]
fn empty_split_is_an_error() {
    let cfg = toy_config(Variant::Full, 0);
    let splits = toy_splits(&cfg, 400, 0).unwrap();
    let model = M3Net::<f64>::new(cfg).unwrap();
    let err = evaluate(&model, &splits.test.truncated(0), &splits.stats, 8, 1.0).unwrap_err();
    assert!(matches!(err, m3net::Error::EmptyEvaluation));
}
