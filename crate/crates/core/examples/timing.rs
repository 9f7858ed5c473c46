//! Wall-clock time of the optimization and decoding phases for growing
//! numbers of designs. Usage: `timing <model.ckpt> [design_steps] [n_step]`.

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{load_model, timing, Task};

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: timing <model.ckpt> [design_steps] [n_step]");
    let mut cfg = RunConfig::default();
    cfg.es.design_steps = args.next().map(|s| s.parse().expect("design_steps")).unwrap_or(50);
    cfg.flow.n_step = args.next().map(|s| s.parse().expect("n_step")).unwrap_or(10);
    cfg.paths.out_dir = "out/timing".into();
    let model = load_model(ckpt.as_ref()).expect("checkpoint");
    let task = Task::prepare(&cfg).expect("task");
    for r in timing(&cfg, &model, &task.test).expect("timing") {
        println!("N={:<5} mbo {:>7.2}s  decode {:>7.2}s", r.n, r.mbo_seconds, r.decode_seconds);
    }
}
