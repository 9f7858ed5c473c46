//! Trains the desk model on a freshly generated toy dataset and saves a
//! checkpoint. Usage: `train_toy [steps] [out.ckpt]`.

use cliqueflow::crystal::Vocab;
use cliqueflow::flow::{FlowConfig, LengthPrior};
use cliqueflow::model::{Model, ModelConfig};
use cliqueflow::toy::{generate_dataset, ToyConfig};
use cliqueflow::trainer::{save_checkpoint, split_indices, TrainConfig, Trainer};

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(300);
    let out = args.next().unwrap_or_else(|| "toy.ckpt".into());
    let seed = 0;

    let toy = ToyConfig::default();
    let vocab = Vocab::default();
    let spec = toy.oracle_spec(&vocab, seed);
    let prior = LengthPrior::default();
    let records = generate_dataset(toy.n_records, &toy, &spec, &vocab, &prior, seed);
    let (tr, va, _) = split_indices(records.len(), seed);
    let train: Vec<_> = tr.iter().map(|&i| records[i].clone()).collect();
    let val: Vec<_> = va.iter().map(|&i| records[i].clone()).collect();

    let cfg = TrainConfig { gradient_steps: steps, warmup: (steps / 4).max(1), eval_every: 100.min(steps), ..TrainConfig::desk() };
    let model = Model::new(ModelConfig::desk(), prior, seed).expect("valid model config");
    let mut trainer = Trainer::new(model, cfg, FlowConfig::default(), seed);
    trainer.run(&train, &val, steps, |row| {
        if let Some(v) = row.val_loss {
            println!(
                "step {:>6}  loss {:.4}  atom {:.4}  flow {:.4}  pred {:.5}  val {:.4}  {:.1}s",
                row.step, row.loss, row.atom, row.flow, row.pred, v, row.wall_ms as f64 / 1e3
            );
        }
    });
    save_checkpoint(&trainer, &out).expect("write checkpoint");
    println!("saved {out}");
}
