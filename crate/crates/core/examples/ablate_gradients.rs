//! Property change under back-propagated and ES gradients, with and
//! without weight decay. Usage: `ablate_gradients <model.ckpt> [n] [steps]`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{ablate_gradients, load_model, Task};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: ablate_gradients <model.ckpt> [n] [steps]");
    let mut cfg = RunConfig::default();
    let n: usize = args.next().map(|s| s.parse().expect("n")).unwrap_or(20);
    cfg.es.design_steps = args.next().map(|s| s.parse().expect("steps")).unwrap_or(500);
    cfg.paths.out_dir = "out/ablate".into();
    let model = load_model(ckpt.as_ref()).expect("checkpoint");
    let task = Task::prepare(&cfg).expect("task");
    for r in ablate_gradients(&cfg, &model, task.eval_records(n), &task.spec).expect("ablate") {
        println!("{:<9} decay {:<4} prediction {:+.4}  oracle {:+.4}", r.method, r.decay, r.predicted_change, r.oracle_change);
    }
}
