use htr_convtext::metrics::{cer, char_counts, edit_counts, EditCounts};
use proptest::prelude::*;

/// Plain recursive edit distance, memoised per pair.
fn oracle_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut [[Option<usize>; 7]; 7]) -> usize {
        if let Some(v) = memo[a.len()][b.len()] {
            return v;
        }
        let v = match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = go(ra, rb, memo) + usize::from(x != y);
                let del = go(ra, b, memo) + 1;
                let ins = go(a, rb, memo) + 1;
                sub.min(del).min(ins)
            }
        };
        memo[a.len()][b.len()] = Some(v);
        v
    }
    go(a, b, &mut [[None; 7]; 7])
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
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

#[test]
fn exhaustive_small_alphabet_matches_recursive_oracle() {
    let strings = all_strings(6);
    assert_eq!(strings.len(), 1093);
    for a in &strings {
        for b in &strings {
            let c = edit_counts(a, b);
            assert_eq!(c.distance(), oracle_distance(a, b), "{a:?} vs {b:?}");
            assert_eq!(c.ref_len, a.len());
            // the decomposition must describe a real alignment
            assert_eq!(a.len() - c.deletions + c.insertions, b.len());
            assert!(c.substitutions + c.deletions <= a.len());
        }
    }
}

#[test]
fn swapped_arguments_swap_insertions_and_deletions() {
    let strings = all_strings(5);
    for a in &strings {
        for b in &strings {
            let f = edit_counts(a, b);
            let r = edit_counts(b, a);
            assert_eq!(f.substitutions, r.substitutions, "{a:?} vs {b:?}");
            assert_eq!(f.insertions, r.deletions);
            assert_eq!(f.deletions, r.insertions);
        }
    }
}

fn corpus() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec(("[abc ]{1,8}", "[abc ]{0,8}"), 1..12)
}

proptest! {
    #[test]
    fn cer_ignores_order_and_batching(pairs in corpus(), split in 0usize..12, seed in any::<u64>()) {
        let refs: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let hyps: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        let whole = cer(&refs, &hyps).unwrap();

        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        let n = idx.len();
        for i in 0..n {
            let j = (seed as usize).wrapping_mul(i + 7) % n;
            idx.swap(i, j);
        }
        let rr: Vec<&str> = idx.iter().map(|&i| refs[i]).collect();
        let hh: Vec<&str> = idx.iter().map(|&i| hyps[i]).collect();
        prop_assert_eq!(cer(&rr, &hh).unwrap(), whole);

        let k = split.min(n);
        let parts: EditCounts = [(0, k), (k, n)]
            .iter()
            .map(|&(s, e)| (s..e).map(|i| char_counts(refs[i], hyps[i])).sum::<EditCounts>())
            .sum();
        prop_assert_eq!(parts.rate().unwrap(), whole);
        prop_assert_eq!(cer(&refs, &refs).unwrap(), 0.0);
    }
}
