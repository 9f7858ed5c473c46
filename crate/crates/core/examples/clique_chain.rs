//! Chains a latent into overlapping cliques, flattens it back and shows how
//! a disagreeing knot is caught.

use cliqueflow::clique::{chain, flatten, CliqueChain, CliqueShape, LatentVector};

fn main() {
    let shape = CliqueShape::default();
    let z = LatentVector::new((0..shape.d_z()).map(|i| i as f64 / 10.0).collect()).unwrap();
    let zc = chain(&z, &shape).unwrap();
    println!("d_z = {}, chain is {:?}", shape.d_z(), zc.rows().dim());
    println!("clique 0 ends with {:?}, clique 1 starts with {:?}", zc.row(0).last(), zc.row(1).first());
    assert_eq!(flatten(&zc, &shape).unwrap(), z);

    let mut rows = zc.rows().clone();
    rows[[1, 0]] += 1.0;
    match flatten(&CliqueChain::from_rows(rows), &shape) {
        Err(e) => println!("corrupted knot rejected: {e}"),
        Ok(_) => unreachable!("a knot mismatch must not flatten"),
    }
}
