use std::fs;

use varband::backtest::{rolling_backtest, BacktestConfig, R0Rule};
use varband::estimator::build_uncertain_covariance;
use varband::frontier::{diagnose, sweep_frontier};
use varband::market_data::{load_prices, load_returns, prices_to_returns, write_returns, WideCsv};
use varband::optimizer::{kkt_residual, solve_with_safeguards};
use varband::synthetic::{generate_from_spec, PanelSpec};
use varband::{BlockConfig, ProblemSpec};

const SPEC: &str = r#"{
  "K": 4, "n0": 250, "seed": 42,
  "assets": [
    {"mu": 0.0011,  "var_lower": 0.000484, "var_upper": 0.000676},
    {"mu": 0.00033, "var_lower": 0.0001,   "var_upper": 0.000196},
    {"mu": 0.00062, "var_lower": 0.000289, "var_upper": 0.0004},
    {"mu": 0.00056, "var_lower": 0.0004,   "var_upper": 0.000625}
  ]
}"#;

#[test]
fn simulate_estimate_solve_sweep() {
    let spec: PanelSpec = serde_json::from_str(SPEC).unwrap();
    let panel = generate_from_spec(&spec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("returns.csv");
    write_returns(&panel, fs::File::create(&path).unwrap()).unwrap();
    let loaded = load_returns(&path, WideCsv::default()).unwrap();
    assert_eq!(loaded.dropped_rows, 0);
    assert_eq!(loaded.panel, panel);

    let cfg = BlockConfig::new(125, 25).unwrap();
    let (params, cov) = build_uncertain_covariance(&loaded.panel, &cfg).unwrap();
    for p in &params {
        assert!(p.var_lower <= p.var_upper);
        assert!(p.mu_lower <= p.mu_upper);
    }
    let mu: Vec<f64> = params.iter().map(|p| p.mu).collect();
    let r0 = mu.iter().sum::<f64>() / mu.len() as f64;
    let problem = ProblemSpec::new(mu, r0, cov, 0.5).unwrap();
    let (sol, used, _) = solve_with_safeguards(problem.clone(), 1e-8).unwrap();
    assert!(kkt_residual(&used, &sol) <= 1e-8);

    let pts = sweep_frontier(&problem, 51).unwrap();
    let diag = diagnose(&pts, used.cov.repaired).unwrap();
    assert!(diag.convexity_defect <= 1e-8);
    assert!(diag.objective_concavity_defect <= 1e-10);
}

#[test]
fn prices_file_to_backtest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prices.csv");
    let mut text = String::from("date,A,B,C\n");
    let mut p = [100.0f64, 50.0, 20.0];
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    for t in 0..200 {
        let d = start + chrono::Days::new(t);
        text.push_str(&format!("{},{},{},{}\n", d, p[0], p[1], p[2]));
        let k = t as f64;
        p[0] *= 1.0 + 0.01 * (k * 0.7).sin();
        p[1] *= 1.0 + 0.006 * (k * 1.3).cos();
        p[2] *= 1.0 + 0.012 * (k * 0.31).sin() + 0.001;
    }
    fs::write(&path, text).unwrap();
    let prices = load_prices(&path, WideCsv::default()).unwrap().panel;
    let returns = prices_to_returns(&prices).unwrap();
    assert_eq!(returns.n_periods(), 199);

    let cfg = BacktestConfig {
        window: 100,
        ws: vec![0.0, 1.0],
        r0_rule: R0Rule::EqualWeightMean,
        block: BlockConfig::new(40, 10).unwrap(),
        ..BacktestConfig::default()
    };
    let rep = rolling_backtest(&returns, &cfg).unwrap();
    assert_eq!(rep.dates.len(), 99);
    assert_eq!(rep.dates[0], returns.dates[100]);
    for m in rep.models.iter().chain(rep.baseline.iter()) {
        assert_eq!(m.wealth.len(), 100);
        assert!(m.carried_days.is_empty());
        for w in &m.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
