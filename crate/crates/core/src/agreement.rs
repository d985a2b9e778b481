//! Inter-annotator agreement: Cohen's kappa and Kendall's tau-b.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Cohen's kappa for two raters over the same items. When chance agreement
/// is total and the raters agree everywhere the result is 1.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("label lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Precondition("kappa needs at least one item".into()));
    }
    let n = a.len() as f64;
    let mut margins: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        margins.entry(x).or_default().0 += 1;
        margins.entry(y).or_default().1 += 1;
        agree += usize::from(x == y);
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = margins.values().map(|(ca, cb)| (*ca as f64 / n) * (*cb as f64 / n)).sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return if agree == a.len() {
            Ok(1.0)
        } else {
            Err(Error::Precondition("kappa undefined: chance agreement is 1 but observed is not".into()))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn tie_pairs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` ascending and returns the number of strict inversions removed.
fn merge_count(v: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mut right = v.split_off(n / 2);
    let mut swaps = merge_count(v) + merge_count(&mut right);
    let left = std::mem::take(v);
    let (mut i, mut j) = (0, 0);
    v.reserve(n);
    while i < left.len() && j < right.len() {
        if right[j].total_cmp(&left[i]) == Ordering::Less {
            v.push(right[j]);
            swaps += (left.len() - i) as u64;
            j += 1;
        } else {
            v.push(left[i]);
            i += 1;
        }
    }
    v.extend_from_slice(&left[i..]);
    v.extend_from_slice(&right[j..]);
    swaps
}

/// Kendall's tau-b in O(n log n). `None` when either side is constant.
pub fn kendalls_tau_b(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("score lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Precondition("tau needs at least two items".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::Precondition("scores must not be NaN".into()));
    }
    // Adding zero folds -0.0 into 0.0 so total_cmp agrees with ==.
    let mut pairs: Vec<(f64, f64)> = a.iter().zip(b).map(|(x, y)| (x + 0.0, y + 0.0)).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let n = pairs.len() as u64;
    let n0 = n * (n - 1) / 2;
    let n1 = tie_pairs(&pairs, |p, q| p.0 == q.0);
    let n3 = tie_pairs(&pairs, |p, q| p.0 == q.0 && p.1 == q.1);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys);
    let n2 = tie_pairs(&ys, |x, y| x == y);
    if n1 == n0 || n2 == n0 {
        return Ok(None);
    }
    let numerator = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let denominator = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(Some((numerator / denominator).clamp(-1.0, 1.0)))
}
