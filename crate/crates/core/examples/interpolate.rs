//! Decodes the straight line between two held-out records, in full and one
//! clique at a time. Usage: `interpolate <model.ckpt>`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{interpolate, load_model, Task};

fn main() {
    let ckpt = std::env::args().nth(1).expect("usage: interpolate <model.ckpt>");
    let mut cfg = RunConfig::default();
    cfg.flow.n_step = 50;
    cfg.paths.out_dir = "out/interpolate".into();
    let model = load_model(ckpt.as_ref()).expect("checkpoint");
    let task = Task::prepare(&cfg).expect("task");
    let pair = task.eval_records(2);
    for r in interpolate(&cfg, &model, &pair[0], &pair[1], &task.spec).expect("interpolate") {
        let mode = r.clique.map_or("full".to_string(), |c| format!("clique {c}"));
        println!("{mode:<9} t={:.3}  predicted {:+.4}  oracle {:.4}  atoms {}", r.t, r.predicted, r.oracle, r.species.len());
    }
}
