mod common;

use std::collections::BTreeMap;

use common::*;
use pdf_core::{decode_candidates, greedy_action, vote, Action, VoteMode};
use rand::Rng;

/// Counts every value, collects all maximal ones, then applies the documented
/// tie rule: the original's value if it is a leader, else the smallest leader.
fn reference<T: Ord + Clone>(items: &[T]) -> T {
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it).or_insert(0) += 1;
    }
    let best = *counts.values().max().unwrap();
    let leaders: Vec<&T> = counts.iter().filter(|(_, c)| **c == best).map(|(v, _)| *v).collect();
    if leaders.contains(&&items[0]) {
        return items[0].clone();
    }
    leaders.into_iter().min().unwrap().clone()
}

fn reference_vote(candidates: &[Action], mode: VoteMode) -> Vec<usize> {
    match mode {
        VoteMode::DimWise => (0..candidates[0].dims())
            .map(|d| reference(&candidates.iter().map(|c| c.token(d)).collect::<Vec<_>>()))
            .collect(),
        VoteMode::ActionWise => reference(&candidates.iter().map(|c| c.tokens().to_vec()).collect::<Vec<_>>()),
    }
}

#[test]
fn votes_match_exhaustive_count_on_random_multisets() {
    let mut rng = rng(99);
    for _ in 0..1000 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=7);
        let cands: Vec<Action> = (0..n).map(|_| random_action(&mut rng, d, k)).collect();
        for mode in [VoteMode::DimWise, VoteMode::ActionWise] {
            assert_eq!(vote(&cands, mode).unwrap().tokens(), reference_vote(&cands, mode).as_slice());
        }
        if d == 1 {
            assert_eq!(vote(&cands, VoteMode::DimWise).unwrap(), vote(&cands, VoteMode::ActionWise).unwrap());
        }
    }
}

#[test]
fn documented_examples() {
    let a = |t: &[usize]| Action::new(t.to_vec(), 8).unwrap();
    let cands = [a(&[1, 2]), a(&[1, 3]), a(&[2, 3])];
    assert_eq!(vote(&cands, VoteMode::DimWise).unwrap(), a(&[1, 3]));
    assert_eq!(vote(&cands, VoteMode::ActionWise).unwrap(), a(&[1, 2]));
    let one = [a(&[3]), a(&[3]), a(&[5])];
    assert_eq!(vote(&one, VoteMode::DimWise).unwrap(), a(&[3]));
    assert_eq!(vote(&one, VoteMode::ActionWise).unwrap(), a(&[3]));
    assert_eq!(vote(&[a(&[4, 4])], VoteMode::ActionWise).unwrap(), a(&[4, 4]));
}

#[test]
fn decode_candidates_matches_per_view_argmax() {
    let mut rng = rng(5);
    let views: Vec<_> = (0..3).map(|_| random_logits(&mut rng, 4, 6, 2.0)).collect();
    let cands = decode_candidates(&views).unwrap();
    assert_eq!(cands.len(), 3);
    for (c, v) in cands.iter().zip(&views) {
        assert_eq!(c, &greedy_action(v));
    }
    let twins = decode_candidates(&[views[0].clone(), views[0].clone()]).unwrap();
    assert_eq!(twins[0], twins[1]);
    assert!(decode_candidates(&[]).is_err());
}
