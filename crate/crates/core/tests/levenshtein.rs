//! Alignment checks against an independent shortest-path oracle in string
//! space: the distance between two strings is the fewest single-symbol
//! insertions, deletions and substitutions turning one into the other.

use std::collections::{HashMap, VecDeque};

use nar_core::eval::{corpus_cer, corpus_stats, length_bucket_report, levenshtein_align};
use proptest::prelude::*;

const ALPHABET: [u8; 3] = [0, 1, 2];
const MAX_LEN: usize = 6;

fn all_strings() -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..MAX_LEN {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in &ALPHABET {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn neighbours(s: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        let mut d = s.to_vec();
        d.remove(i);
        out.push(d);
        for &c in &ALPHABET {
            if c != s[i] {
                let mut t = s.to_vec();
                t[i] = c;
                out.push(t);
            }
        }
    }
    if s.len() < MAX_LEN {
        for i in 0..=s.len() {
            for &c in &ALPHABET {
                let mut t = s.to_vec();
                t.insert(i, c);
                out.push(t);
            }
        }
    }
    out
}

/// Breadth-first distances from `src` to every string of length <= 6.
/// Some optimal edit script never leaves the length range of its endpoints,
/// so capping the length does not lose shortest paths.
fn bfs(src: &[u8], index: &HashMap<Vec<u8>, usize>, adj: &[Vec<usize>]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; index.len()];
    let s = index[src];
    dist[s] = 0;
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

#[test]
fn exhaustive_against_shortest_edit_path() {
    let strings = all_strings();
    let index: HashMap<Vec<u8>, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let adj: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| neighbours(s).iter().map(|n| index[n]).collect())
        .collect();
    let mut mismatches = 0;
    for r in &strings {
        let dist = bfs(r, &index, &adj);
        for (j, h) in strings.iter().enumerate() {
            let a = levenshtein_align(r, h);
            let consistent = a.substitutions + a.deletions + a.correct == r.len()
                && a.substitutions + a.insertions + a.correct == h.len();
            if a.distance() != dist[j] || !consistent {
                mismatches += 1;
            }
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn kitten_sitting_distance_three() {
    let a = levenshtein_align(b"kitten", b"sitting");
    assert_eq!(a.distance(), 3);
    assert_eq!((a.substitutions, a.insertions, a.deletions), (2, 1, 0));
}

#[test]
fn backtrace_prefers_substitution_then_deletion() {
    // "ab" -> "b" is one deletion either way; "ab" -> "ba" can be S+S or
    // D+I at equal cost and must come out as two substitutions.
    let a = levenshtein_align(b"ab", b"ba");
    assert_eq!((a.substitutions, a.deletions, a.insertions), (2, 0, 0));
    let a = levenshtein_align(b"ab", b"b");
    assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 1, 0));
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..12)
}

proptest! {
    #[test]
    fn swapping_sides_exchanges_deletions_and_insertions(r in seq(), h in seq()) {
        let a = levenshtein_align(&r, &h);
        let b = levenshtein_align(&h, &r);
        prop_assert_eq!(a.distance(), b.distance());
        // the S/D/I split may differ between the two backtraces, but the
        // edit counts are bounded by the length difference identity
        prop_assert_eq!(a.deletions as isize - a.insertions as isize, r.len() as isize - h.len() as isize);
        prop_assert_eq!(b.deletions as isize - b.insertions as isize, h.len() as isize - r.len() as isize);
    }

    #[test]
    fn corpus_rate_is_length_weighted_mean(pairs in prop::collection::vec((prop::collection::vec(0u8..4, 1..10), seq()), 1..8)) {
        let refs: Vec<(&[u8], &[u8])> = pairs.iter().map(|(r, h)| (r.as_slice(), h.as_slice())).collect();
        let cer = corpus_cer(&refs).unwrap();
        let total_len: usize = pairs.iter().map(|(r, _)| r.len()).sum();
        let weighted: f64 = pairs
            .iter()
            .map(|(r, h)| {
                let rate = levenshtein_align(r, h).distance() as f64 / r.len() as f64;
                rate * r.len() as f64 / total_len as f64
            })
            .sum();
        prop_assert!((cer - weighted).abs() < 1e-12);
    }

    #[test]
    fn buckets_recombine_to_corpus_totals(pairs in prop::collection::vec((prop::collection::vec(0u8..4, 1..15), seq()), 1..12)) {
        let refs: Vec<(&[u8], &[u8])> = pairs.iter().map(|(r, h)| (r.as_slice(), h.as_slice())).collect();
        let rows = length_bucket_report(&refs, &[1, 4, 8, 16]).unwrap();
        let total = corpus_stats(&refs);
        let mut s = 0.0;
        let mut d = 0.0;
        let mut i = 0.0;
        let mut n = 0;
        for row in &rows {
            n += row.n;
            if let (Some(sr), Some(dr), Some(ir)) = (row.sub_rate, row.del_rate, row.ins_rate) {
                let len = row.stats.ref_len as f64;
                s += sr * len;
                d += dr * len;
                i += ir * len;
            }
        }
        prop_assert_eq!(n, pairs.len());
        prop_assert!((s - total.substitutions as f64).abs() < 1e-9);
        prop_assert!((d - total.deletions as f64).abs() < 1e-9);
        prop_assert!((i - total.insertions as f64).abs() < 1e-9);
        let single = length_bucket_report(&refs, &[0, 100]).unwrap();
        prop_assert_eq!(single[0].stats, total);
    }
}
