//! Generates the synthetic dataset and prints its label statistics.
//! Usage: `gen_data [n_records] [out_dir]`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::gen_data;

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    if let Some(n) = args.next() {
        cfg.toy.n_records = n.parse().expect("n_records");
    }
    cfg.paths.out_dir = args.next().unwrap_or_else(|| "out/gen_data".into()).into();
    let task = gen_data(&cfg).expect("gen-data");
    let ys: Vec<f64> = task.records.iter().map(|r| r.property).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    println!("{} records, mean property {mean:.4}, best achievable {:?}", ys.len(), task.spec.optimum());
    println!("split: {} train / {} val / {} test", task.train.len(), task.val.len(), task.test.len());
}
