//! Euler integration with classifier-free guidance on hand-written velocity
//! fields, and the lifted logit-normal time distribution.

use cliqueflow::crystal::AtomType;
use cliqueflow::flow::{integrate_from, sample_time, time_cdf, FlowConfig, FlowQuery, GeomState, Trajectory, VelocityField};
use cliqueflow::rng::stream;

/// `dx/dt = a·x + latent[0]` on the first length coordinate.
struct Linear(f64);

impl VelocityField for Linear {
    fn velocities(&self, q: &[FlowQuery<'_>]) -> Vec<GeomState> {
        q.iter()
            .map(|q| {
                let mut v = GeomState::zeros(q.state.n_atoms());
                v.lengths[0] = self.0 * q.state.lengths[0] + q.latent[0];
                v
            })
            .collect()
    }
}

fn main() {
    let species = [AtomType(0)];
    let latent = [0.5];
    let noise = vec![vec![0.0]];
    let tr = [Trajectory { latent: &latent, species: &species }];
    let mut start = GeomState::zeros(1);
    start.lengths[0] = 1.0;
    for n_step in [10, 100, 1000] {
        let cfg = FlowConfig { n_step, omega: 0.0, ..FlowConfig::default() };
        let x = integrate_from(&Linear(-1.0), &tr, &noise, vec![start.clone()], &cfg).unwrap()[0].lengths[0];
        let exact = (-1.0f64).exp() + 0.5 * (1.0 - (-1.0f64).exp());
        println!("n_step {n_step:>4}: x(1) = {x:.6}, analytic {exact:.6}");
    }
    for omega in [0.0, 2.0, 4.0] {
        let cfg = FlowConfig { n_step: 100, omega, ..FlowConfig::default() };
        let x = integrate_from(&Linear(0.0), &tr, &noise, vec![start.clone()], &cfg).unwrap()[0].lengths[0];
        println!("omega {omega}: guided shift {:.3}", x - 1.0);
    }
    let cfg = FlowConfig::default();
    let mut rng = stream(0, "example", 0);
    let ts: Vec<f64> = (0..100_000).map(|_| sample_time(&cfg, &mut rng)).collect();
    for q in [0.1, 0.5, 0.9] {
        let emp = ts.iter().filter(|&&t| t <= q).count() as f64 / ts.len() as f64;
        println!("P(t <= {q}) empirical {emp:.4}, analytic {:.4}", time_cdf(q, cfg.eps_mix));
    }
}
