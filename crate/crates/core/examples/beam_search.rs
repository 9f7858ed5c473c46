//! Beam search against exhaustive enumeration on a random next-token table.

use cliqueflow::atom_decoder::{beam_search, brute_force, BeamSpec, TokenModel};
use cliqueflow::rng::stream;
use rand::Rng;

/// Log-probabilities that depend on the previous token and the length.
struct Table {
    vocab: usize,
    logits: Vec<f64>,
}

impl TokenModel for Table {
    fn n_outputs(&self) -> usize {
        self.vocab + 2
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let w = self.n_outputs();
        prefixes
            .iter()
            .map(|p| {
                let row = (p.last().copied().unwrap_or(0) + w * p.len()) % (self.logits.len() / w);
                let l = &self.logits[row * w..(row + 1) * w];
                let lse = l.iter().skip(1).map(|x| x.exp()).sum::<f64>().ln();
                // token 0 is Start and is never emitted
                std::iter::once(f64::NEG_INFINITY).chain(l.iter().skip(1).map(|x| x - lse)).collect()
            })
            .collect()
    }
}

fn main() {
    let mut rng = stream(0, "example", 0);
    let table = Table { vocab: 3, logits: (0..5 * 40).map(|_| rng.random_range(-2.0..2.0)).collect() };
    for width in [1, 2, 4, 81] {
        let spec = BeamSpec { width, start: 0, stop: 1, max_tokens: 4 };
        let best = &beam_search(&table, &spec)[0];
        println!("width {width:>2}: tokens {:?} score {:.4}", best.tokens, best.score);
    }
    let spec = BeamSpec { width: 81, start: 0, stop: 1, max_tokens: 4 };
    let exact = brute_force(&table, &spec);
    println!("exhaustive: tokens {:?} score {:.4}", exact.tokens, exact.score);
}
