//! Route-comparison metrics and their brute-force oracle twins.
//!
//! Four measures compare a predicted visiting order against the labeled one:
//! location square deviation (mean squared rank displacement), hit ratio at
//! `k` (overlap of the top-`k` prefixes), Kendall rank correlation (pairwise
//! order agreement), and edit distance (unit-cost Levenshtein). Each fast
//! implementation has an independently coded oracle in [`oracle`]; the two
//! must agree exactly, and the test suites hold them to that.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("sequences are not permutations of the same node set")]
    SetMismatch,
    #[error("rank correlation needs at least two nodes")]
    Undefined,
    #[error("empty sequence")]
    Empty,
}

/// Rank of every node id: `ranks[node] = position`, or an error if the two
/// sequences are not permutations of one shared set.
fn rank_map(seq: &[usize]) -> HashMap<usize, usize> {
    seq.iter().enumerate().map(|(r, &v)| (v, r)).collect()
}

fn check_same_set(predicted: &[usize], label: &[usize]) -> Result<(), MetricError> {
    if predicted.len() != label.len() {
        return Err(MetricError::SetMismatch);
    }
    let ranks = rank_map(label);
    if ranks.len() != label.len() {
        return Err(MetricError::SetMismatch);
    }
    let p_ranks = rank_map(predicted);
    if p_ranks.len() != predicted.len() {
        return Err(MetricError::SetMismatch);
    }
    if predicted.iter().any(|v| !ranks.contains_key(v)) {
        return Err(MetricError::SetMismatch);
    }
    Ok(())
}

/// Location square deviation: the mean squared difference between each
/// node's predicted and labeled 0-based rank.
pub fn lsd(predicted: &[usize], label: &[usize]) -> Result<f64, MetricError> {
    if predicted.is_empty() || label.is_empty() {
        return Err(MetricError::Empty);
    }
    check_same_set(predicted, label)?;
    let label_rank = rank_map(label);
    let total: f64 = predicted
        .iter()
        .enumerate()
        .map(|(p_rank, v)| {
            let d = p_rank as f64 - label_rank[v] as f64;
            d * d
        })
        .sum();
    Ok(total / predicted.len() as f64)
}

/// Hit ratio at `k`: the overlap of the two top-`k` prefixes, normalized by
/// the largest overlap a route of this length allows.
pub fn hr_at_k(predicted: &[usize], label: &[usize], k: usize) -> f64 {
    let denom = k.min(label.len());
    if denom == 0 {
        return 1.0;
    }
    let top_label: Vec<usize> = label.iter().take(k).copied().collect();
    let hits = predicted
        .iter()
        .take(k)
        .filter(|v| top_label.contains(v))
        .count();
    hits as f64 / denom as f64
}

/// Number of out-of-order pairs, counted by merge sort in O(N log N).
fn count_inversions(seq: &mut [usize], scratch: &mut [usize]) -> usize {
    let n = seq.len();
    if n <= 1 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = seq.split_at_mut(mid);
    let mut inv = count_inversions(left, scratch) + count_inversions(right, scratch);
    let (mut i, mut j) = (0, 0);
    for slot in scratch[..n].iter_mut() {
        if i < left.len() && (j >= right.len() || left[i] <= right[j]) {
            *slot = left[i];
            i += 1;
        } else {
            // right[j] jumps ahead of everything left in `left`
            inv += left.len() - i;
            *slot = right[j];
            j += 1;
        }
    }
    seq.copy_from_slice(&scratch[..n]);
    inv
}

/// Kendall rank correlation: (concordant − discordant) / total pairs, via
/// inversion counting on the label ranks taken in predicted order.
pub fn krc(predicted: &[usize], label: &[usize]) -> Result<f64, MetricError> {
    check_same_set(predicted, label)?;
    let n = predicted.len();
    if n < 2 {
        return Err(MetricError::Undefined);
    }
    let label_rank = rank_map(label);
    let mut seq: Vec<usize> = predicted.iter().map(|v| label_rank[v]).collect();
    let mut scratch = vec![0; n];
    let discordant = count_inversions(&mut seq, &mut scratch);
    let total = n * (n - 1) / 2;
    let concordant = total - discordant;
    Ok((concordant as f64 - discordant as f64) / total as f64)
}

/// Unit-cost Levenshtein distance between two node-id sequences, as a
/// rolling-row dynamic program.
pub fn ed(predicted: &[usize], label: &[usize]) -> f64 {
    let (a, b) = (predicted, label);
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64
}

/// Independently coded reference implementations. Deliberately naive — their
/// only job is to disagree with the fast paths if either has a bug.
pub mod oracle {
    use std::collections::HashMap;

    /// All-pairs Kendall correlation: O(N²) over every unordered node pair.
    pub fn krc_pairs(predicted: &[usize], label: &[usize]) -> f64 {
        let pos = |seq: &[usize], v: usize| seq.iter().position(|&x| x == v).unwrap();
        let n = predicted.len();
        let (mut concordant, mut discordant) = (0i64, 0i64);
        for a in 0..n {
            for b in (a + 1)..n {
                let (u, v) = (label[a], label[b]);
                let agree = (pos(predicted, u) < pos(predicted, v))
                    == (pos(label, u) < pos(label, v));
                if agree {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
        (concordant - discordant) as f64 / (concordant + discordant) as f64
    }

    /// Memoized recursive Levenshtein distance.
    pub fn ed_recursive(predicted: &[usize], label: &[usize]) -> f64 {
        fn go(
            a: &[usize],
            b: &[usize],
            i: usize,
            j: usize,
            memo: &mut HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&d) = memo.get(&(i, j)) {
                return d;
            }
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            let d = sub.min(del).min(ins);
            memo.insert((i, j), d);
            d
        }
        go(predicted, label, 0, 0, &mut HashMap::new()) as f64
    }

    /// Rank lookups by linear scan instead of a map.
    pub fn lsd_scan(predicted: &[usize], label: &[usize]) -> f64 {
        let total: f64 = predicted
            .iter()
            .enumerate()
            .map(|(p, v)| {
                let l = label.iter().position(|x| x == v).unwrap();
                let d = p as f64 - l as f64;
                d * d
            })
            .sum();
        total / predicted.len() as f64
    }

    /// Top-k overlap by nested loops.
    pub fn hr_nested(predicted: &[usize], label: &[usize], k: usize) -> f64 {
        let denom = k.min(label.len());
        if denom == 0 {
            return 1.0;
        }
        let mut hits = 0;
        for p in predicted.iter().take(k) {
            for l in label.iter().take(k) {
                if p == l {
                    hits += 1;
                }
            }
        }
        hits as f64 / denom as f64
    }
}

/// Mean and population standard deviation of one metric over instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                mean: 0.0,
                std: 0.0,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Aggregated evaluation over a set of route pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub hr: Summary,
    pub krc: Summary,
    pub lsd: Summary,
    pub ed: Summary,
    /// Instances evaluated.
    pub count: usize,
    /// Single-node instances where rank correlation is undefined; these are
    /// skipped for `krc` but still enter every other metric.
    pub krc_skipped: usize,
}

impl MetricReport {
    /// Evaluates every `(predicted, label)` pair and aggregates.
    pub fn compute(
        pairs: &[(Vec<usize>, Vec<usize>)],
        k: usize,
    ) -> Result<MetricReport, MetricError> {
        let mut hr_vals = Vec::with_capacity(pairs.len());
        let mut krc_vals = Vec::with_capacity(pairs.len());
        let mut lsd_vals = Vec::with_capacity(pairs.len());
        let mut ed_vals = Vec::with_capacity(pairs.len());
        let mut krc_skipped = 0;
        for (pred, label) in pairs {
            hr_vals.push(hr_at_k(pred, label, k));
            lsd_vals.push(lsd(pred, label)?);
            ed_vals.push(ed(pred, label));
            match krc(pred, label) {
                Ok(v) => krc_vals.push(v),
                Err(MetricError::Undefined) => krc_skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(MetricReport {
            k,
            hr: Summary::of(&hr_vals),
            krc: Summary::of(&krc_vals),
            lsd: Summary::of(&lsd_vals),
            ed: Summary::of(&ed_vals),
            count: pairs.len(),
            krc_skipped,
        })
    }

    /// Aligned plain-text table, one row of mean ± std per metric column.
    pub fn table(&self) -> String {
        let cols = [
            (format!("HR@{}", self.k), self.hr.to_string()),
            ("KRC".to_string(), self.krc.to_string()),
            ("LSD".to_string(), self.lsd.to_string()),
            ("ED".to_string(), self.ed.to_string()),
        ];
        let widths: Vec<usize> = cols
            .iter()
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let mut header = String::new();
        let mut row = String::new();
        for ((h, v), w) in cols.iter().zip(&widths) {
            header.push_str(&format!("{h:>w$}  "));
            row.push_str(&format!("{v:>w$}  "));
        }
        format!(
            "{}\n{}\ninstances: {} (krc skipped: {})",
            header.trim_end(),
            row.trim_end(),
            self.count,
            self.krc_skipped
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    }

    #[test]
    fn lsd_identical_is_zero() {
        assert_eq!(lsd(&[4, 2, 7], &[4, 2, 7]).unwrap(), 0.0);
    }

    #[test]
    fn lsd_adjacent_swap_of_three() {
        // hand ranks: two nodes displaced by one, one in place
        let got = lsd(&[1, 0, 2], &[0, 1, 2]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lsd_full_reversal_of_four() {
        // hand ranks: displacements 3,1,1,3 -> (9+1+1+9)/4
        assert_eq!(lsd(&[3, 2, 1, 0], &[0, 1, 2, 3]).unwrap(), 5.0);
    }

    #[test]
    fn lsd_rejects_set_mismatch_and_empty() {
        assert_eq!(lsd(&[0, 1], &[0, 2]).unwrap_err(), MetricError::SetMismatch);
        assert_eq!(lsd(&[0, 1], &[0]).unwrap_err(), MetricError::SetMismatch);
        assert_eq!(lsd(&[0, 0], &[0, 1]).unwrap_err(), MetricError::SetMismatch);
        assert_eq!(lsd(&[], &[]).unwrap_err(), MetricError::Empty);
    }

    #[test]
    fn lsd_matches_scan_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            assert_eq!(lsd(&p, &l).unwrap(), oracle::lsd_scan(&p, &l));
        }
    }

    #[test]
    fn hr_identical_is_one_and_disjoint_is_zero() {
        assert_eq!(hr_at_k(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        assert_eq!(hr_at_k(&[0, 1, 2, 9, 8, 7], &[9, 8, 7, 0, 1, 2], 3), 0.0);
    }

    #[test]
    fn hr_partial_overlap_hand_value() {
        // top-3 sets {0,1,2} and {0,2,4} share two nodes
        let got = hr_at_k(&[0, 1, 2, 3, 4], &[0, 2, 4, 1, 3], 3);
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hr_short_routes_divide_by_route_length() {
        assert_eq!(hr_at_k(&[1, 0], &[1, 0], 3), 1.0);
        assert_eq!(hr_at_k(&[1, 0], &[0, 1], 3), 1.0); // same set, k covers all
    }

    #[test]
    fn hr_is_invariant_to_order_within_the_prefix() {
        let label = [5, 6, 7, 8, 9];
        let a = hr_at_k(&[7, 5, 6, 8, 9], &label, 3);
        let b = hr_at_k(&[5, 6, 7, 8, 9], &label, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn hr_matches_nested_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..6);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            assert_eq!(hr_at_k(&p, &l, k), oracle::hr_nested(&p, &l, k));
        }
    }

    #[test]
    fn krc_identity_reversal_and_symmetry() {
        let x = [3, 1, 4, 0, 2];
        let rev: Vec<usize> = x.iter().rev().copied().collect();
        assert_eq!(krc(&x, &x).unwrap(), 1.0);
        assert_eq!(krc(&rev, &x).unwrap(), -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..10);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            assert_eq!(krc(&p, &l).unwrap(), krc(&l, &p).unwrap());
        }
    }

    #[test]
    fn krc_single_node_is_undefined() {
        assert_eq!(krc(&[0], &[0]).unwrap_err(), MetricError::Undefined);
    }

    #[test]
    fn krc_matches_pairwise_oracle_on_a_thousand_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.gen_range(2..=10);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            assert_eq!(krc(&p, &l).unwrap(), oracle::krc_pairs(&p, &l));
        }
    }

    #[test]
    fn ed_identical_is_zero_and_adjacent_swap_is_two() {
        assert_eq!(ed(&[0, 1, 2], &[0, 1, 2]), 0.0);
        assert_eq!(ed(&[1, 0, 2], &[0, 1, 2]), 2.0);
    }

    #[test]
    fn ed_handles_unequal_lengths() {
        assert_eq!(ed(&[], &[0, 1]), 2.0);
        assert_eq!(ed(&[0, 1, 2], &[1]), 2.0);
    }

    #[test]
    fn ed_matches_memoized_oracle_on_five_hundred_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.gen_range(0..12);
            let m = rng.gen_range(0..12);
            let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
            let l: Vec<usize> = (0..m).map(|_| rng.gen_range(0..8)).collect();
            assert_eq!(ed(&p, &l), oracle::ed_recursive(&p, &l));
        }
    }

    #[test]
    fn ranges_hold_on_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let n = rng.gen_range(2..12);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            let h = hr_at_k(&p, &l, 3);
            assert!((0.0..=1.0).contains(&h));
            let t = krc(&p, &l).unwrap();
            assert!((-1.0..=1.0).contains(&t));
            assert!(lsd(&p, &l).unwrap() >= 0.0);
            assert!(ed(&p, &l) >= 0.0);
        }
    }

    #[test]
    fn zero_lsd_and_ed_mean_identical_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..10);
            let (p, l) = (random_perm(&mut rng, n), random_perm(&mut rng, n));
            assert_eq!(lsd(&p, &l).unwrap() == 0.0, p == l);
            assert_eq!(ed(&p, &l) == 0.0, p == l);
        }
    }

    #[test]
    fn summary_mean_and_population_std() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn report_aggregates_and_skips_undefined_krc() {
        let pairs = vec![
            (vec![0, 1, 2], vec![0, 1, 2]), // perfect
            (vec![2, 1, 0], vec![0, 1, 2]), // reversed
            (vec![0], vec![0]),             // krc undefined
        ];
        let r = MetricReport::compute(&pairs, 3).unwrap();
        assert_eq!(r.count, 3);
        assert_eq!(r.krc_skipped, 1);
        assert_eq!(r.krc.count, 2);
        assert_eq!(r.krc.mean, 0.0); // (1 - 1) / 2
        assert_eq!(r.krc.std, 1.0);
        assert_eq!(r.hr.count, 3);
        // hr: 1, 1 (same set within k=3), 1
        assert_eq!(r.hr.mean, 1.0);
        // lsd: 0, 8/3, 0
        assert!((r.lsd.mean - (8.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(r.ed.mean, 2.0 / 3.0); // 0, 2, 0
    }

    #[test]
    fn report_round_trips_through_json_and_prints_a_table() {
        let pairs = vec![(vec![0, 1, 2, 3], vec![0, 2, 1, 3])];
        let r = MetricReport::compute(&pairs, 3).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let table = r.table();
        for header in ["HR@3", "KRC", "LSD", "ED", "instances: 1"] {
            assert!(table.contains(header), "missing {header} in:\n{table}");
        }
    }
}
