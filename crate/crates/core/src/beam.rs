//! Beam search and greedy decoding over any next-token scorer.
//!
//! Scores are raw sums of log-probabilities. Finished hypotheses (last token
//! `<EOS>`, or length `max_len`) retire to a pool and the live beam shrinks
//! by one for each. Ties are broken by comparing token sequences
//! lexicographically, so the lower token id wins.

use std::cmp::Ordering;

use crate::decoder::{decoder_step, init_state, DecoderState, Frames};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{EOS, PAD, SOS};

/// A model that scores the next token given a state and the previous token.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial(&self) -> Result<Self::State>;

    /// `ln p(· | state, prev)` over the whole vocabulary, and the next state.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;

    fn start_token(&self) -> usize {
        SOS
    }

    fn end_token(&self) -> usize {
        EOS
    }

    /// Tokens never emitted.
    fn is_banned(&self, token: usize) -> bool {
        token == PAD || token == SOS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Pool of finished hypotheses, best first.
pub fn beam_search<S: StepScorer>(scorer: &S, beam_size: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam_size < 1 {
        return Err(Error::contract("beam_size must be at least 1"));
    }
    if max_len < 1 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let eos = scorer.end_token();
    let mut live: Vec<(Vec<usize>, f64, S::State)> = vec![(Vec::new(), 0.0, scorer.initial()?)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut width = beam_size;

    while width > 0 && !live.is_empty() {
        // (parent, token, score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (parent, (tokens, score, state)) in live.iter().enumerate() {
            let prev = tokens.last().copied().unwrap_or_else(|| scorer.start_token());
            let (logp, next) = scorer.step(state, prev)?;
            if logp.len() != scorer.vocab_size() {
                return Err(Error::dim("beam step", &[logp.len()], &[scorer.vocab_size()]));
            }
            for (w, &lp) in logp.iter().enumerate() {
                if lp.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {w}")));
                }
                if !scorer.is_banned(w) {
                    cands.push((parent, w, score + lp));
                }
            }
            next_states.push(next);
        }
        let seq = |&(parent, w, _): &(usize, usize, f64)| {
            let mut s = live[parent].0.clone();
            s.push(w);
            s
        };
        let mut keyed: Vec<(Vec<usize>, f64, usize)> = cands.iter().map(|c| (seq(c), c.2, c.0)).collect();
        keyed.sort_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)));
        keyed.truncate(width);

        let mut next_live = Vec::with_capacity(keyed.len());
        for (tokens, score, parent) in keyed {
            let finished = tokens.last() == Some(&eos) || tokens.len() >= max_len;
            if finished {
                pool.push(Hypothesis {
                    tokens,
                    score,
                    finished: true,
                });
                width -= 1;
            } else {
                next_live.push((tokens, score, next_states[parent].clone()));
            }
        }
        live = next_live;
    }
    pool.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    Ok(pool)
}

/// Argmax token per step (lowest id on ties) until `<EOS>` or `max_len`.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = scorer.start_token();
    while tokens.len() < max_len {
        let (logp, next) = scorer.step(&state, prev)?;
        let best = logp
            .iter()
            .enumerate()
            .filter(|&(w, _)| !scorer.is_banned(w))
            .fold(None::<(usize, f64)>, |acc, (w, &lp)| match acc {
                Some((_, b)) if b >= lp => acc,
                _ => Some((w, lp)),
            })
            .ok_or_else(|| Error::contract("every token is banned"))?;
        tokens.push(best.0);
        score += best.1;
        state = next;
        prev = best.0;
        if prev == scorer.end_token() {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        score,
        finished: true,
    })
}

/// The trained decoder over one clip's features.
pub struct SaLstmScorer<'a, T> {
    model: &'a Model<T>,
    v: Tensor<T>,
}

impl<'a, T: Scalar> SaLstmScorer<'a, T> {
    /// `v` is the `[n × D_v]` encoder output, fixed for the whole search.
    pub fn new(model: &'a Model<T>, v: Tensor<T>) -> Self {
        SaLstmScorer { model, v }
    }
}

/// `(h, c)` as plain tensors.
#[derive(Clone, Debug)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> StepScorer for SaLstmScorer<'_, T> {
    type State = LstmState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config.decoder.vocab_size
    }

    fn initial(&self) -> Result<LstmState<T>> {
        let mut g = Graph::new();
        let p = self.model.decoder.bind(&self.model.store, &mut g, false).init;
        let v = g.constant(self.v.clone());
        let s = init_state(&mut g, v, &p)?;
        Ok(LstmState {
            h: g.value(s.h).clone(),
            c: g.value(s.c).clone(),
        })
    }

    fn step(&self, state: &LstmState<T>, prev: usize) -> Result<(Vec<f64>, LstmState<T>)> {
        let mut g = Graph::new();
        let p = self.model.decoder.bind(&self.model.store, &mut g, false);
        let v = g.constant(self.v.clone());
        let frames = Frames::new(&mut g, v, &p.attention)?;
        let s = DecoderState {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
            t: 0,
        };
        let out = decoder_step(&mut g, &frames, prev, &s, &p)?;
        let logp = g
            .value(out.probs)
            .data()
            .iter()
            .map(|p| p.as_f64().ln())
            .collect();
        Ok((
            logp,
            LstmState {
                h: g.value(out.state.h).clone(),
                c: g.value(out.state.c).clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution at every step.
    struct Uniform(usize);

    impl StepScorer for Uniform {
        type State = ();
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn initial(&self) -> Result<()> {
            Ok(())
        }
        fn step(&self, _: &(), _: usize) -> Result<(Vec<f64>, ())> {
            Ok((vec![-(self.0 as f64).ln(); self.0], ()))
        }
    }

    #[test]
    fn uniform_model_prefers_earliest_eos() {
        let m = Uniform(6);
        let pool = beam_search(&m, 3, 4).unwrap();
        assert_eq!(pool[0].tokens, vec![EOS]);
        assert!((pool[0].score - (1.0f64 / 6.0).ln()).abs() < 1e-12);
        let g = greedy_decode(&m, 4).unwrap();
        assert_eq!(g.tokens, vec![EOS]);
    }

    #[test]
    fn zero_beam_is_an_error() {
        assert!(matches!(beam_search(&Uniform(5), 0, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_respects_max_len_and_bans() {
        let pool = beam_search(&Uniform(7), 5, 3).unwrap();
        assert_eq!(pool.len(), 5);
        for h in &pool {
            assert!(h.tokens.len() <= 3);
            assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&SOS));
            assert!(h.tokens.iter().filter(|&&t| t == EOS).count() <= 1);
        }
    }
}
