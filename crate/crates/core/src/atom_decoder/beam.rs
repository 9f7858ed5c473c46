//! Beam search over any next-token model.

use std::cmp::Ordering;

/// Anything that scores next tokens for a batch of prefixes.
pub trait TokenModel {
    /// Width of every returned log-probability vector.
    fn n_outputs(&self) -> usize;

    /// One log-probability vector per prefix. Disallowed tokens are `-inf`.
    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamSpec {
    pub width: usize,
    pub start: usize,
    pub stop: usize,
    /// Hypotheses holding this many non-special tokens are complete.
    pub max_tokens: usize,
}

/// A completed hypothesis: its tokens without Start/Stop and its score
/// `Σ log p` (truncated completions carry no Stop term).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub truncated: bool,
}

struct Alive {
    prefix: Vec<usize>,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)).then(a.parent.cmp(&b.parent))
}

/// Completed hypotheses, best first. The search stops as soon as the best
/// completed score is at least every alive score, which is exact because
/// scores never increase with length.
pub fn beam_search<M: TokenModel + ?Sized>(model: &M, spec: &BeamSpec) -> Vec<Hypothesis> {
    assert!(spec.width >= 1, "beam width must be positive");
    let mut alive = vec![Alive { prefix: vec![spec.start], score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if alive.iter().all(|a| a.score <= best_done) {
            break;
        }
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|a| a.prefix.clone()).collect();
        let logps = model.next_logprobs(&prefixes);
        let mut cands = Vec::new();
        for (parent, (a, lp)) in alive.iter().zip(&logps).enumerate() {
            assert_eq!(lp.len(), model.n_outputs(), "model returned a vector of the wrong width");
            for (token, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY && token != spec.start {
                    cands.push(Candidate { parent, token, score: a.score + l });
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(spec.width);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let body = &alive[c.parent].prefix[1..];
            if c.token == spec.stop {
                finished.push(Hypothesis { tokens: body.to_vec(), score: c.score, truncated: false });
                continue;
            }
            let mut prefix = alive[c.parent].prefix.clone();
            prefix.push(c.token);
            if prefix.len() - 1 >= spec.max_tokens {
                finished.push(Hypothesis { tokens: prefix[1..].to_vec(), score: c.score, truncated: true });
            } else {
                next.push(Alive { prefix, score: c.score });
            }
        }
        alive = next;
    }
    // stable: equal scores keep completion order
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    finished
}

/// Exhaustive search over every completion, for checking [`beam_search`].
pub fn brute_force<M: TokenModel + ?Sized>(model: &M, spec: &BeamSpec) -> Hypothesis {
    fn walk<M: TokenModel + ?Sized>(model: &M, spec: &BeamSpec, prefix: &mut Vec<usize>, score: f64, best: &mut Option<Hypothesis>) {
        let lp = model.next_logprobs(std::slice::from_ref(prefix)).pop().expect("one vector");
        for (token, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY || token == spec.start {
                continue;
            }
            let s = score + l;
            let mut consider = |h: Hypothesis| {
                if best.as_ref().is_none_or(|b| h.score > b.score) {
                    *best = Some(h);
                }
            };
            if token == spec.stop {
                consider(Hypothesis { tokens: prefix[1..].to_vec(), score: s, truncated: false });
            } else if prefix.len() >= spec.max_tokens {
                let mut t = prefix[1..].to_vec();
                t.push(token);
                consider(Hypothesis { tokens: t, score: s, truncated: true });
            } else {
                prefix.push(token);
                walk(model, spec, prefix, s, best);
                prefix.pop();
            }
        }
    }
    let mut best = None;
    walk(model, spec, &mut vec![spec.start], 0.0, &mut best);
    best.expect("at least one completion")
}
