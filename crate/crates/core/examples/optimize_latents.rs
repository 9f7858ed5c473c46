//! End-to-end discovery: encode held-out records, optimize their latents
//! with ES, decode and score with the oracle.
//! Usage: `optimize_latents <model.ckpt> [n_records] [design_steps]`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{load_model, optimize_designs, Task};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: optimize_latents <model.ckpt> [n_records] [design_steps]");
    let mut cfg = RunConfig::default();
    let n: usize = args.next().map(|s| s.parse().expect("n_records")).unwrap_or(50);
    cfg.es.design_steps = args.next().map(|s| s.parse().expect("design_steps")).unwrap_or(500);
    cfg.flow.n_step = 50;
    cfg.paths.out_dir = "out/optimize".into();
    let model = load_model(ckpt.as_ref()).expect("checkpoint");
    let task = Task::prepare(&cfg).expect("task");
    let s = optimize_designs(&cfg, &model, task.eval_records(n), &task.spec).expect("optimize");
    println!("mean oracle {:.4} -> {:.4} ({:.1}% better)", s.initial_oracle, s.discovered_oracle, 100.0 * s.improvement());
    println!("top {}%: {:.4} over {} designs", cfg.es.top_k_percent, s.filtered_oracle, s.n_filtered);
}
