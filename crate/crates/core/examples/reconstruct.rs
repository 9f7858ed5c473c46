//! Encodes held-out records and decodes them back at each guidance strength.
//! Usage: `reconstruct <model.ckpt> [n_records] [n_step]`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{load_model, reconstruct, Task};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: reconstruct <model.ckpt> [n_records] [n_step]; train one with the train_toy example");
    let mut cfg = RunConfig::default();
    cfg.experiments.n_eval = args.next().map(|s| s.parse().expect("n_records")).unwrap_or(100);
    cfg.flow.n_step = args.next().map(|s| s.parse().expect("n_step")).unwrap_or(100);
    cfg.paths.out_dir = "out/reconstruct".into();
    let model = load_model(ckpt.as_ref()).expect("checkpoint");
    let task = Task::prepare(&cfg).expect("task");
    for r in reconstruct(&cfg, &model, task.eval_records(cfg.experiments.n_eval)).expect("reconstruct") {
        println!("omega {}: species {:.0}%  species+geometry {:.0}%", r.omega, 100.0 * r.species_ratio(), 100.0 * r.match_ratio());
    }
}
