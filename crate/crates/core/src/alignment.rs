//! Predicted label alignment: keep decoder steps whose greedy prediction is
//! already a gold label, assign the remaining labels to the remaining steps
//! with a minimum-cost (Hungarian) matching, and score the result.

use crate::error::{Error, Result};
use crate::generator::{StepTargets, PROB_FLOOR};

/// Cost given to padding cells when the cost matrix is not square.
pub const PAD_COST: f64 = 1e9;

/// Binary step × label assignment. `labels` is the gold set `L`; row `t` is
/// assigned to at most one label column and every column to exactly one row.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub labels: Vec<usize>,
    /// Label column per step.
    pub assignment: Vec<Option<usize>>,
}

impl AlignmentMatrix {
    pub fn steps(&self) -> usize {
        self.assignment.len()
    }

    /// `T[t][j]`.
    pub fn entry(&self, step: usize, col: usize) -> u8 {
        u8::from(self.assignment[step] == Some(col))
    }

    pub fn dense(&self) -> Vec<Vec<u8>> {
        (0..self.steps())
            .map(|t| (0..self.labels.len()).map(|j| self.entry(t, j)).collect())
            .collect()
    }

    /// `(step, code)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(t, a)| a.map(|j| (t, self.labels[j])))
    }

    pub fn first_unassigned_step(&self) -> usize {
        self.assignment.iter().position(Option::is_none).unwrap_or(self.steps())
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(t, a)| a.map(|j| cost[t][j]))
            .sum()
    }

    fn check(&self) -> Result<()> {
        let mut seen = vec![0usize; self.labels.len()];
        for j in self.assignment.iter().flatten() {
            seen[*j] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Alignment("every label must be assigned exactly once".into()));
        }
        Ok(())
    }
}

/// Pins each step whose prediction is a still-unclaimed gold label to that
/// label (as a column index into sorted `gold`). Earlier steps win.
pub fn fix_correct_predictions(greedy_path: &[usize], gold: &[usize]) -> Vec<Option<usize>> {
    let mut claimed = vec![false; gold.len()];
    greedy_path
        .iter()
        .map(|c| {
            let j = gold.iter().position(|g| g == c)?;
            if claimed[j] {
                None
            } else {
                claimed[j] = true;
                Some(j)
            }
        })
        .collect()
}

/// Minimum-cost perfect matching of a square matrix; returns the column of
/// each row. O(n³) shortest augmenting path with potentials.
pub fn solve_square(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Completes `pinned` (label column per step) into a full assignment of every
/// label column, minimising the summed `cost[step][col]` over unpinned steps
/// and unclaimed labels.
pub fn hungarian_assign(cost: &[Vec<f64>], pinned: &[Option<usize>], labels: &[usize]) -> Result<AlignmentMatrix> {
    let steps = cost.len();
    let n_labels = labels.len();
    if pinned.len() != steps {
        return Err(Error::dims("hungarian_assign pins", pinned.len(), steps));
    }
    if cost.iter().any(|r| r.len() != n_labels) {
        return Err(Error::dims("hungarian_assign cost columns", "ragged", n_labels));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Alignment("cost matrix must be finite".into()));
    }
    let mut claimed = vec![false; n_labels];
    for j in pinned.iter().flatten() {
        if *j >= n_labels || claimed[*j] {
            return Err(Error::Alignment(format!("inconsistent pin on label column {j}")));
        }
        claimed[*j] = true;
    }
    let free_rows: Vec<usize> = (0..steps).filter(|&t| pinned[t].is_none()).collect();
    let free_cols: Vec<usize> = (0..n_labels).filter(|&j| !claimed[j]).collect();
    if free_cols.len() > free_rows.len() {
        return Err(Error::Alignment(format!(
            "{} labels left for {} free steps; max_len must cover the label set",
            free_cols.len(),
            free_rows.len()
        )));
    }

    let mut assignment = pinned.to_vec();
    if !free_cols.is_empty() {
        let n = free_rows.len();
        let square: Vec<Vec<f64>> = free_rows
            .iter()
            .map(|&t| {
                (0..n)
                    .map(|k| free_cols.get(k).map_or(PAD_COST, |&j| cost[t][j]))
                    .collect()
            })
            .collect();
        for (r, k) in solve_square(&square).into_iter().enumerate() {
            if let Some(&j) = free_cols.get(k) {
                assignment[free_rows[r]] = Some(j);
            }
        }
    }
    let t = AlignmentMatrix {
        labels: labels.to_vec(),
        assignment,
    };
    t.check()?;
    Ok(t)
}

/// `−ln max(p, floor)`.
#[inline]
pub fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Pins correct predictions over the first `steps` greedy choices, then
/// completes the assignment with costs `−ln P[t][code]`.
pub fn pla_align(step_probs: &[&[f64]], greedy: &[usize], gold: &[usize], steps: usize) -> Result<AlignmentMatrix> {
    if steps > step_probs.len() || steps > greedy.len() {
        return Err(Error::Alignment(format!(
            "requested {steps} alignment steps, only {} decoded",
            step_probs.len().min(greedy.len())
        )));
    }
    let cost: Vec<Vec<f64>> = step_probs[..steps]
        .iter()
        .map(|p| gold.iter().map(|&c| nll(p[c])).collect())
        .collect();
    let pins = fix_correct_predictions(&greedy[..steps], gold);
    hungarian_assign(&cost, &pins, gold)
}

/// Σ over assigned `(t, j)` of `−ln p_t(label_j)`, plus `−ln p_t(STOP)` at the
/// first unassigned step (if that step was decoded).
pub fn pla_loss(step_probs: &[&[f64]], alignment: &AlignmentMatrix, stop_id: usize) -> f64 {
    pla_targets(alignment, step_probs.len(), stop_id)
        .iter()
        .zip(step_probs)
        .flat_map(|(ts, p)| ts.iter().map(move |&(c, w)| w * nll(p[c])))
        .sum()
}

/// The per-step NLL targets equivalent to [`pla_loss`], padded to `n_steps`.
pub fn pla_targets(alignment: &AlignmentMatrix, n_steps: usize, stop_id: usize) -> StepTargets {
    let mut targets: StepTargets = vec![Vec::new(); n_steps];
    for (t, code) in alignment.pairs() {
        if t < n_steps {
            targets[t].push((code, 1.0));
        }
    }
    let stop_step = alignment.first_unassigned_step();
    if stop_step < n_steps {
        targets[stop_step].push((stop_id, 1.0));
    }
    targets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    #[test]
    fn pins_examples() {
        assert_eq!(fix_correct_predictions(&[A, B], &[A, B]), vec![Some(0), Some(1)]);
        assert_eq!(fix_correct_predictions(&[A, A], &[A]), vec![Some(0), None]);
        assert_eq!(fix_correct_predictions(&[C, B, A], &[A, B]), vec![None, Some(1), Some(0)]);
    }

    #[test]
    fn one_by_one() {
        let t = hungarian_assign(&[vec![3.5]], &[None], &[7]).unwrap();
        assert_eq!(t.assignment, vec![Some(0)]);
        assert_eq!(t.pairs().collect::<Vec<_>>(), vec![(0, 7)]);
    }

    #[test]
    fn two_by_two_diagonal() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let t = hungarian_assign(&cost, &[None, None], &[A, B]).unwrap();
        assert_eq!(t.dense(), vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(t.total_cost(&cost), 2.0);
    }

    #[test]
    fn pins_survive_and_rest_is_optimal() {
        // step 0 pinned to col 1 even though col 1 is cheaper at step 1
        let cost = vec![vec![5.0, 9.0, 1.0], vec![4.0, 0.0, 6.0], vec![2.0, 3.0, 7.0], vec![1.0, 1.0, 1.0]];
        let t = hungarian_assign(&cost, &[Some(1), None, None, None], &[A, B, C]).unwrap();
        assert_eq!(t.assignment[0], Some(1));
        // remaining: cols {0,2} over rows {1,2,3}: best = row3→2 (1) + row2→0 (2) = 3
        assert_eq!(t.total_cost(&cost), 9.0 + 3.0);
        assert_eq!(t.first_unassigned_step(), 1);
    }

    #[test]
    fn too_many_labels_is_an_error() {
        let cost = vec![vec![1.0, 2.0]];
        assert!(matches!(hungarian_assign(&cost, &[None], &[A, B]), Err(Error::Alignment(_))));
        assert!(hungarian_assign(&[vec![1.0]], &[Some(3)], &[A]).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Brute force over every row permutation; the first `cols` rows of the
    /// permutation take columns 0..cols.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        permutations(rows)
            .into_iter()
            .map(|p| (0..cols).map(|j| cost[p[j]][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn matches_factorial_oracle() {
        let mut rng = seeded_rng(17, "hungarian");
        for _ in 0..200 {
            let cols = rng.gen_range(1..=6);
            let rows = rng.gen_range(cols..=7);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(0..64) as f64 / 8.0).collect())
                .collect();
            let labels: Vec<usize> = (0..cols).collect();
            let t = hungarian_assign(&cost, &vec![None; rows], &labels).unwrap();
            assert_eq!(t.total_cost(&cost), brute_force(&cost));
        }
    }

    #[test]
    fn pla_loss_examples() {
        let one = [1.0, 0.0, 1.0];
        let t = AlignmentMatrix {
            labels: vec![A],
            assignment: vec![Some(0)],
        };
        assert_eq!(pla_loss(&[&one, &one], &t, 2), 0.0);
        let e = (-1f64).exp();
        let p = [e, 0.0, e];
        assert!((pla_loss(&[&p, &p], &t, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pla_loss_three_labels_matches_oracle_sum() {
        let probs: Vec<Vec<f64>> = vec![
            vec![0.5, 0.2, 0.1, 0.1, 0.1],
            vec![0.1, 0.1, 0.6, 0.1, 0.1],
            vec![0.3, 0.4, 0.1, 0.1, 0.1],
            vec![0.05, 0.05, 0.05, 0.8, 0.05],
        ];
        let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let gold = [0, 1, 2];
        // greedy picks 0, 2, 1 → all three pinned
        let t = pla_align(&refs, &[0, 2, 1], &gold, 3).unwrap();
        let expected = -(0.5f64.ln() + 0.6f64.ln() + 0.4f64.ln() + 0.05f64.ln());
        assert!((pla_loss(&refs, &t, 4) - expected).abs() < 1e-12);

        // nothing pinned: oracle picks the best permutation directly
        let t = pla_align(&refs, &[3, 3, 3], &gold, 3).unwrap();
        let cost: Vec<Vec<f64>> = probs[..3].iter().map(|p| gold.iter().map(|&c| -p[c].ln()).collect()).collect();
        let best = brute_force(&cost);
        assert!((pla_loss(&refs, &t, 4) - (best - 0.05f64.ln())).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn pla_loss_nonnegative_and_monotone(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 3),
            bump in 0.0f64..0.5,
        ) {
            let probs: Vec<Vec<f64>> = raw.into_iter().map(|r| { let s: f64 = r.iter().sum(); r.into_iter().map(|v| v / s).collect() }).collect();
            let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            let t = pla_align(&refs, &[3, 3], &[0, 1], 2).unwrap();
            let base = pla_loss(&refs, &t, 3);
            proptest::prop_assert!(base >= 0.0);
            let (step, code) = t.pairs().next().unwrap();
            let mut raised = probs.clone();
            raised[step][code] = (raised[step][code] + bump).min(1.0);
            let rrefs: Vec<&[f64]> = raised.iter().map(Vec::as_slice).collect();
            proptest::prop_assert!(pla_loss(&rrefs, &t, 3) <= base + 1e-15);
        }
    }
}
