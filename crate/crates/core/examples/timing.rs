use gpset::conformal::HyperGrid;
use gpset::datagen::{simulate, Example, SimSpec};
use gpset::pipeline::fit_and_evaluate;
use gpset::{FitOptions, Method, RunConfig};
use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args[1].parse().unwrap();
    let ex = if args[2] == "1" { Example::One } else { Example::Two };
    let method = match args[3].as_str() { "gps" => Method::Gps, "kfs" => Method::Gpskfs, _ => Method::Ocsvm };
    let m_max: usize = args[4].parse().unwrap();
    let gamma: f64 = args[5].parse().unwrap();
    let c2: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    for seed in 0..args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1u64) {
        let sim = simulate(&SimSpec { example: ex, n_per_class: n, n_outlier: n, seed }).unwrap();
        let opts = FitOptions { gamma, seed, m_max, grid: HyperGrid { c: vec![1.0], c1: vec![1.0], c2: vec![c2], sigma_percentiles: vec![50.0] }, ..FitOptions::from_config(&RunConfig::default()) };
        let t = Instant::now();
        let (_, r) = fit_and_evaluate(&sim.train, &sim.test, method, &opts).unwrap();
        println!("seed {seed} {:.1}s cov {:?} card {:.3} cond {:?} det {:?}", t.elapsed().as_secs_f64(), r.coverage, r.cardinality, r.conditional_cardinality, r.detection_rate);
    }
}
