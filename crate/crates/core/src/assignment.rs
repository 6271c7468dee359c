//! Matching cost and the two assignment strategies: one-to-one Hungarian
//! matching and one-to-many subset assignment with unique proposal
//! ownership, plus a brute-force permutation oracle for cross-checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};

/// Weights of the class / L1 / GIoU terms of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCostWeights {
    pub lambda_class: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for MatchCostWeights {
    /// The DETR-family convention (2, 5, 2).
    fn default() -> Self {
        MatchCostWeights {
            lambda_class: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

/// Pairs are (target_index, proposal_index), sorted by target then proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl AssignmentResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, cost: &[Vec<f64>]) -> Self {
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(t, p)| cost[t][p]).sum();
        AssignmentResult { pairs, total_cost }
    }
}

/// Matching cost between one prediction (class probabilities + box) and one
/// target: λ_class·(1 − p[class]) + λ_l1·‖box − box‖₁ + λ_giou·(1 − GIoU).
pub fn match_cost(
    class_probs: &[f64],
    pred_box: &BBox,
    target_class: usize,
    target_box: &BBox,
    w: &MatchCostWeights,
) -> Result<f64> {
    if target_class >= class_probs.len() {
        return Err(Error::InvalidClass {
            class_id: target_class,
            n_classes: class_probs.len(),
        });
    }
    debug_assert!((class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let l1: f64 = pred_box
        .cxcywh()
        .iter()
        .zip(target_box.cxcywh())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(w.lambda_class * (1.0 - class_probs[target_class])
        + w.lambda_l1 * l1
        + w.lambda_giou * (1.0 - giou(pred_box, target_box)))
}

fn check_matrix(cost: &[Vec<f64>], context: &'static str) -> Result<(usize, usize)> {
    let t = cost.len();
    if t == 0 {
        return Ok((0, 0));
    }
    let p = cost[0].len();
    for row in cost {
        if row.len() != p {
            return Err(Error::LengthMismatch {
                context,
                left: p,
                right: row.len(),
            });
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::Contract(format!("{context}: non-finite cost entry")));
        }
    }
    Ok((t, p))
}

/// Minimum-cost perfect matching of all T targets to distinct proposals
/// (T ≤ P), by shortest augmenting paths with potentials, O(T²·P).
/// Deterministic: equal alternatives resolve toward the lower index.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let (t, p) = check_matrix(cost, "hungarian")?;
    if t == 0 {
        return Ok(AssignmentResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    if t > p {
        return Err(Error::Contract(format!(
            "hungarian: {t} targets exceed {p} proposals; pad the matrix first"
        )));
    }
    // 1-based arrays; row_of[j] = target matched to proposal j, 0 = free.
    let mut u = vec![0.0; t + 1];
    let mut v = vec![0.0; p + 1];
    let mut row_of = vec![0usize; p + 1];
    let mut way = vec![0usize; p + 1];
    for i in 1..=t {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; p + 1];
        let mut used = vec![false; p + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=p {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < min_slack[j] {
                        min_slack[j] = cur;
                        way[j] = j0;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=p {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    let mut pairs = Vec::with_capacity(t);
    for j in 1..=p {
        if row_of[j] != 0 {
            pairs.push((row_of[j] - 1, j - 1));
        }
    }
    Ok(AssignmentResult::from_pairs(pairs, cost))
}

/// One-to-many assignment: up to `m_per_target` proposals per target, each
/// proposal owned by at most one target. The globally lowest-cost (t, p)
/// pair claims its proposal first; ties resolve by (t, p) index order.
pub fn one_to_many_assign(cost: &[Vec<f64>], m_per_target: usize) -> Result<AssignmentResult> {
    let (t, p) = check_matrix(cost, "one_to_many_assign")?;
    if m_per_target == 0 {
        return Err(Error::Contract("one_to_many_assign: M must be >= 1".into()));
    }
    let mut edges: Vec<(usize, usize)> = (0..t)
        .flat_map(|ti| (0..p).map(move |pi| (ti, pi)))
        .collect();
    edges.sort_by(|&(t1, p1), &(t2, p2)| {
        cost[t1][p1]
            .partial_cmp(&cost[t2][p2])
            .unwrap()
            .then((t1, p1).cmp(&(t2, p2)))
    });
    let mut owned = vec![false; p];
    let mut load = vec![0usize; t];
    let mut pairs = Vec::new();
    for (ti, pi) in edges {
        if !owned[pi] && load[ti] < m_per_target {
            owned[pi] = true;
            load[ti] += 1;
            pairs.push((ti, pi));
        }
    }
    Ok(AssignmentResult::from_pairs(pairs, cost))
}

/// Exhaustive minimum over all injective target→proposal maps; the oracle
/// for [`hungarian`]. Ties return the lexicographically smallest pair list.
pub fn brute_force_one_to_one(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let (t, p) = check_matrix(cost, "brute_force_one_to_one")?;
    if t == 0 {
        return Ok(AssignmentResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    if t > 8 {
        return Err(Error::SizeGuard {
            what: "targets",
            got: t,
            limit: 8,
        });
    }
    if t > p {
        return Err(Error::Contract(format!(
            "brute_force_one_to_one: {t} targets exceed {p} proposals"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut chosen = vec![usize::MAX; t];
    let mut used = vec![false; p];
    // Depth-first in ascending proposal order per target ⇒ assignments are
    // generated in lexicographic pair-list order; strict improvement keeps
    // the first (smallest) among ties.
    fn recurse(
        cost: &[Vec<f64>],
        ti: usize,
        acc: f64,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if ti == cost.len() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, chosen.clone()));
            }
            return;
        }
        for pi in 0..used.len() {
            if !used[pi] {
                used[pi] = true;
                chosen[ti] = pi;
                recurse(cost, ti + 1, acc + cost[ti][pi], chosen, used, best);
                used[pi] = false;
            }
        }
    }
    recurse(cost, 0, 0.0, &mut chosen, &mut used, &mut best);
    let (_, assignment) = best.expect("t <= p guarantees a feasible assignment");
    let pairs: Vec<(usize, usize)> = assignment.iter().enumerate().map(|(t, &p)| (t, p)).collect();
    Ok(AssignmentResult::from_pairs(pairs, cost))
}
