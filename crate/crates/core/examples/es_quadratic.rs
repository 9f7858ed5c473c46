//! Rank-based ES with AdamW on a quadratic bowl, compared with the exact
//! gradient. Usage: `es_quadratic [dim] [steps]`.

use cliqueflow::mbo::{optimize, EsConfig, GradientSource, Quadratic};
use cliqueflow::rng::stream;
use ndarray::Array2;
use rand::Rng;

fn main() {
    let mut args = std::env::args().skip(1);
    let d: usize = args.next().map(|s| s.parse().expect("dim")).unwrap_or(16);
    let steps: usize = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let mut rng = stream(0, "example", 0);
    let center: Vec<f64> = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
    let start = Array2::from_shape_fn((4, d), |_| rng.random_range(-0.1..0.1));
    for scale in [1.0, 1000.0] {
        let f = Quadratic { center: center.clone(), scale };
        for algorithm in [GradientSource::Es, GradientSource::Bp] {
            let cfg = EsConfig { algorithm, design_steps: steps, decay: 0.0, ..EsConfig::default() };
            let run = optimize(&start, &f, &cfg, 1).unwrap();
            let first: f64 = run.trace.iter().map(|t| t[0]).sum::<f64>() / 4.0;
            let last: f64 = run.final_values().iter().sum::<f64>() / 4.0;
            println!("scale {scale:>6}  {algorithm:?}: mean value {first:.3e} -> {last:.3e}");
        }
    }
}
