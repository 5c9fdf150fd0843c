use std::collections::BTreeMap;

use proptest::prelude::*;

use etecap::beam::{beam_search, greedy_decode, StepScorer};
use etecap::text::{EOS, PAD, SOS};

/// Next-token probabilities looked up by prefix; missing prefixes are
/// uniform over the three emitted tokens `{EOS, 4, 5}`.
struct Table(BTreeMap<Vec<usize>, [f64; 3]>);

const EMIT: [usize; 3] = [EOS, 4, 5];

impl StepScorer for Table {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        6
    }

    fn initial(&self) -> etecap::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, prefix: &Vec<usize>, prev: usize) -> etecap::Result<(Vec<f64>, Vec<usize>)> {
        let mut next = prefix.clone();
        if prev != SOS {
            next.push(prev);
        }
        let p = self.0.get(&next).copied().unwrap_or([1.0 / 3.0; 3]);
        let mut lp = vec![f64::NEG_INFINITY; 6];
        for (k, &t) in EMIT.iter().enumerate() {
            lp[t] = p[k].ln();
        }
        Ok((lp, next))
    }

    fn is_banned(&self, token: usize) -> bool {
        !EMIT.contains(&token)
    }
}

#[test]
fn wider_beam_can_score_lower() {
    // greedy keeps 4, 4 and is forced to stop; two beams drop that prefix
    // for the 5-branch, which looks better after two steps and then flattens
    let table = Table(BTreeMap::from([
        (vec![], [0.1, 0.5, 0.4]),
        (vec![4], [0.3, 0.35, 0.35]),
        (vec![5], [0.0, 0.5, 0.5]),
        (vec![4, 4], [1.0, 0.0, 0.0]),
    ]));
    let g = greedy_decode(&table, 3).unwrap();
    assert_eq!(g.tokens, vec![4, 4, EOS]);
    let one = beam_search(&table, 1, 3).unwrap();
    let two = beam_search(&table, 2, 3).unwrap();
    assert_eq!(one[0].tokens, g.tokens);
    assert!((one[0].score - 0.175f64.ln()).abs() < 1e-12);
    assert!(two[0].score < one[0].score, "{:?} vs {:?}", two[0], one[0]);
}

#[test]
fn peaked_model_returns_its_sequence() {
    let table = Table(BTreeMap::from([
        (vec![], [0.0, 0.0, 1.0]),
        (vec![5], [0.0, 1.0, 0.0]),
        (vec![5, 4], [1.0, 0.0, 0.0]),
    ]));
    for beam in [1, 3, 5] {
        let pool = beam_search(&table, beam, 10).unwrap();
        assert_eq!(pool[0].tokens, vec![5, 4, EOS]);
        assert_eq!(pool[0].score, 0.0);
    }
}

proptest! {
    #[test]
    fn captions_are_well_formed(
        probs in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 13),
        beam in 1usize..6,
        max_len in 1usize..5,
    ) {
        // distinct distributions for every prefix up to length 2
        let mut keys = vec![vec![]];
        for a in [4, 5] {
            keys.push(vec![a]);
            for b in [4, 5] {
                keys.push(vec![a, b]);
            }
        }
        let table = Table(
            keys.into_iter()
                .zip(&probs)
                .map(|(k, &(x, y, z))| {
                    let s = x + y + z;
                    (k, [x / s, y / s, z / s])
                })
                .collect(),
        );
        let pool = beam_search(&table, beam, max_len).unwrap();
        prop_assert!(!pool.is_empty() && pool.len() <= beam);
        for w in pool.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for h in &pool {
            prop_assert!(h.tokens.len() <= max_len);
            prop_assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&SOS));
            let eos = h.tokens.iter().filter(|&&t| t == EOS).count();
            prop_assert!(eos <= 1);
            prop_assert!(eos == 0 || h.tokens.last() == Some(&EOS));
        }
    }
}
