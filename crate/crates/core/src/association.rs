//! Snapshot-level data association between range measurements and the
//! anchors expected to be seen from a position hypothesis.
//!
//! The assignment minimises the OSPA cost of order 1 with cut-off `d_c`:
//! every pair costs `min(|z − d|, d_c)` and every element left over on the
//! larger side costs `d_c`. It is solved exactly with the Hungarian method on
//! a square matrix padded with `d_c`.

use crate::geometry::{expected_distance, in_fov, specular_visible, AgentPose, Anchor, AnchorId, FloorPlan, FovConfig, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub anchor_id: AnchorId,
    pub position: Point,
    /// Predicted distance in meters.
    pub distance: f64,
}

/// Anchors visible and inside the FOV at a position hypothesis, in the order
/// of the anchor list they were built from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_candidates(pose: &AgentPose, anchors: &[Anchor], plan: &FloorPlan, fov: &FovConfig) -> CandidateSet {
    let entries = anchors
        .iter()
        .filter(|a| specular_visible(&pose.position, a, plan))
        // an anchor on top of the hypothesis has no direction; drop it
        .filter(|a| in_fov(pose, &a.position, fov).unwrap_or(false))
        .map(|a| Candidate {
            anchor_id: a.id.clone(),
            position: a.position,
            distance: expected_distance(&pose.position, a),
        })
        .collect();
    CandidateSet { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub measurement: usize,
    /// Index into the candidate set.
    pub candidate: usize,
    pub anchor_id: AnchorId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// Sorted by measurement index.
    pub pairs: Vec<Pair>,
    /// Measurements without a partner (clutter).
    pub clutter: Vec<usize>,
    /// Candidates without a partner.
    pub missed: Vec<AnchorId>,
}

impl Association {
    /// Candidate paired with measurement `i`, if any.
    pub fn anchor_of(&self, i: usize) -> Option<&AnchorId> {
        self.pairs.iter().find(|p| p.measurement == i).map(|p| &p.anchor_id)
    }

    /// OSPA cost of order 1 (un-normalised): paired deviations plus `d_c` for
    /// every element not paired on the larger side.
    pub fn cost(&self, z: &[f64], cand: &CandidateSet, cutoff: f64) -> f64 {
        let paired: f64 = self
            .pairs
            .iter()
            .map(|p| (z[p.measurement] - cand.entries[p.candidate].distance).abs().min(cutoff))
            .sum();
        paired + cutoff * (z.len().max(cand.len()) - self.pairs.len()) as f64
    }
}

/// Minimum-cost perfect matching on a square matrix; returns the column of
/// every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials and matching use 1-based indices with 0 as the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

fn matching_cost(m: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| m[i][j]).sum()
}

/// Optimal one-to-one assignment of measurements `z` to candidates under the
/// cut-off `d_c`.
///
/// Among optimal assignments the lexicographically smallest one is returned:
/// measurements are fixed in index order, each to the earliest candidate that
/// still admits an optimal completion, or left unpaired if none does.
pub fn ospa_associate(z: &[f64], cand: &CandidateSet, cutoff: f64) -> Association {
    let (n, m) = (z.len(), cand.len());
    let size = n.max(m);
    let capped = |i: usize, j: usize| (z[i] - cand.entries[j].distance).abs().min(cutoff);
    let mut base = vec![vec![cutoff; size]; size];
    for (i, row) in base.iter_mut().enumerate().take(n) {
        for (j, c) in row.iter_mut().enumerate().take(m) {
            *c = capped(i, j);
        }
    }
    let optimum = matching_cost(&base, &hungarian(&base));
    let tol = 1e-9 * optimum.max(cutoff);
    let forbid = 10.0 * cutoff * (size + 1) as f64;

    let mut work = base.clone();
    let mut pairs = Vec::new();
    let mut taken = vec![false; m];
    for i in 0..n {
        let mut fixed = false;
        for j in 0..m {
            if taken[j] || capped(i, j) >= cutoff {
                continue;
            }
            let mut trial = work.clone();
            for (c, v) in trial[i].iter_mut().enumerate() {
                if c != j {
                    *v = forbid;
                }
            }
            for (r, row) in trial.iter_mut().enumerate() {
                if r != i {
                    row[j] = forbid;
                }
            }
            if matching_cost(&trial, &hungarian(&trial)) <= optimum + tol {
                work = trial;
                taken[j] = true;
                pairs.push(Pair {
                    measurement: i,
                    candidate: j,
                    anchor_id: cand.entries[j].anchor_id.clone(),
                });
                fixed = true;
                break;
            }
        }
        if !fixed {
            // unpaired: every real column now costs the cut-off for this row
            for v in work[i].iter_mut().take(m) {
                *v = cutoff;
            }
        }
    }

    let clutter = (0..n).filter(|i| !pairs.iter().any(|p| p.measurement == *i)).collect();
    let missed = (0..m)
        .filter(|&j| !taken[j])
        .map(|j| cand.entries[j].anchor_id.clone())
        .collect();
    Association { pairs, clutter, missed }
}
