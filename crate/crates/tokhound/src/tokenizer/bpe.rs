//! The BPE merge loop: repeatedly merge the adjacent symbol pair with the
//! lowest rank, taking the left-most pair on rank ties, until no rule applies.
//!
//! Symbols live in a doubly linked list so a merge is O(1); candidate pairs
//! are kept in a min-heap keyed by (rank, left position). Entries go stale
//! when a neighbour is merged away, so each popped candidate is re-validated
//! against the current list before being applied.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

#[derive(Debug)]
struct Symbol {
    text: String,
    prev: Option<usize>,
    next: Option<usize>,
    alive: bool,
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    rank: u32,
    left: usize,
    /// Snapshot of the pair at push time, used to detect staleness.
    pair: (String, String),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Lowest rank first; left-most position breaks rank ties.
        (self.rank, self.left).cmp(&(other.rank, other.left))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Applies `merge_ranks` to `symbols` and returns the surviving surfaces in
/// order. `symbols` are the initial single-alphabet-symbol strings of one
/// pre-token.
pub(crate) fn merge_symbols(
    symbols: Vec<String>,
    merge_ranks: &HashMap<(String, String), u32>,
) -> Vec<String> {
    if symbols.len() < 2 || merge_ranks.is_empty() {
        return symbols;
    }

    let n = symbols.len();
    let mut list: Vec<Symbol> = symbols
        .into_iter()
        .enumerate()
        .map(|(i, text)| Symbol {
            text,
            prev: i.checked_sub(1),
            next: if i + 1 < n { Some(i + 1) } else { None },
            alive: true,
        })
        .collect();

    let mut heap: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Reverse<Candidate>>, list: &[Symbol], left: usize| {
        let Some(right) = list[left].next else { return };
        let pair = (list[left].text.clone(), list[right].text.clone());
        if let Some(&rank) = merge_ranks.get(&pair) {
            heap.push(Reverse(Candidate { rank, left, pair }));
        }
    };
    for i in 0..n - 1 {
        push(&mut heap, &list, i);
    }

    while let Some(Reverse(cand)) = heap.pop() {
        let left = cand.left;
        if !list[left].alive {
            continue;
        }
        let Some(right) = list[left].next else { continue };
        // Stale if either symbol changed since the candidate was pushed.
        if list[left].text != cand.pair.0 || list[right].text != cand.pair.1 {
            continue;
        }

        let right_text = std::mem::take(&mut list[right].text);
        list[left].text.push_str(&right_text);
        list[right].alive = false;
        list[left].next = list[right].next;
        if let Some(after) = list[left].next {
            list[after].prev = Some(left);
        }

        if let Some(before) = list[left].prev {
            push(&mut heap, &list, before);
        }
        push(&mut heap, &list, left);
    }

    let mut out = Vec::new();
    let mut cursor = Some(0);
    while let Some(i) = cursor {
        debug_assert!(list[i].alive);
        cursor = list[i].next;
        out.push(std::mem::take(&mut list[i].text));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranks(pairs: &[(&str, &str)]) -> HashMap<(String, String), u32> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.to_string(), b.to_string()), i as u32))
            .collect()
    }

    fn syms(s: &str) -> Vec<String> {
        s.chars().map(String::from).collect()
    }

    #[test]
    fn single_forced_merge() {
        let out = merge_symbols(syms("ab"), &ranks(&[("a", "b")]));
        assert_eq!(out, vec!["ab"]);
    }

    #[test]
    fn no_rule_applies() {
        let out = merge_symbols(syms("ba"), &ranks(&[("a", "b")]));
        assert_eq!(out, vec!["b", "a"]);
    }

    #[test]
    fn repeated_pair_merges_everywhere() {
        let out = merge_symbols(syms("abab"), &ranks(&[("a", "b")]));
        assert_eq!(out, vec!["ab", "ab"]);
    }

    #[test]
    fn lower_rank_wins_over_text_order() {
        // "bc" has rank 0, so "abc" must become ["a", "bc"] even though the
        // pair ("a", "b") appears further left.
        let out = merge_symbols(syms("abc"), &ranks(&[("b", "c"), ("a", "b")]));
        assert_eq!(out, vec!["a", "bc"]);
    }

    #[test]
    fn leftmost_pair_wins_on_equal_rank() {
        // "aaa": the rank-0 pair ("a","a") occurs at positions 0 and 1; the
        // left-most application gives ["aa", "a"], not ["a", "aa"].
        let out = merge_symbols(syms("aaa"), &ranks(&[("a", "a")]));
        assert_eq!(out, vec!["aa", "a"]);
    }

    #[test]
    fn merge_results_can_chain() {
        let out = merge_symbols(syms("abcd"), &ranks(&[("a", "b"), ("c", "d"), ("ab", "cd")]));
        assert_eq!(out, vec!["abcd"]);
    }

    #[test]
    fn merging_unblocks_lower_rank_pair() {
        // ("x", "ab") ranks below ("a", "b"); it only becomes adjacent after
        // the higher-rank merge runs, and must then still be applied.
        let out = merge_symbols(syms("xab"), &ranks(&[("x", "ab"), ("a", "b")]));
        assert_eq!(out, vec!["xab"]);
    }
}
