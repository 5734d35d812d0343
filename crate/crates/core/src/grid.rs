//! Two-stage hyperparameter search: an (epochs × eta) sweep at a fixed
//! pseudo-label count, then a pseudo-label count sweep at the chosen cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub epochs_list: Vec<usize>,
    pub eta_list: Vec<f64>,
    pub pseudo_k_list: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            epochs_list: vec![50, 150, 250],
            eta_list: vec![0.03, 0.01, 0.001],
            pseudo_k_list: vec![500, 1000, 2000],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_list.is_empty() || self.eta_list.is_empty() || self.pseudo_k_list.is_empty() {
            return Err(Error::validation("grid lists must be nonempty"));
        }
        if self.epochs_list.contains(&0) {
            return Err(Error::validation("grid epochs must be positive"));
        }
        if let Some(eta) = self.eta_list.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::validation(format!("grid eta {eta} must be > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub epochs: usize,
    pub eta: f64,
    pub accuracy: f64,
}

fn check_score(score: f64) -> Result<f64> {
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::validation(format!("grid score {score} is not finite")))
    }
}

/// Argmax over `scores[eta][epochs]`; ties go to fewer epochs, then smaller eta.
pub fn select_cell(epochs_list: &[usize], eta_list: &[f64], scores: &[Vec<f64>]) -> Result<GridCell> {
    if scores.len() != eta_list.len() || scores.iter().any(|row| row.len() != epochs_list.len()) {
        return Err(Error::validation(format!(
            "score matrix must be {}×{}",
            eta_list.len(),
            epochs_list.len()
        )));
    }
    let mut best: Option<GridCell> = None;
    for (row, &eta) in scores.iter().zip(eta_list) {
        for (&score, &epochs) in row.iter().zip(epochs_list) {
            let cell = GridCell {
                epochs,
                eta,
                accuracy: check_score(score)?,
            };
            let better = match best {
                None => true,
                Some(b) => {
                    cell.accuracy > b.accuracy
                        || (cell.accuracy == b.accuracy
                            && (cell.epochs, cell.eta).partial_cmp(&(b.epochs, b.eta)) == Some(std::cmp::Ordering::Less))
                }
            };
            if better {
                best = Some(cell);
            }
        }
    }
    best.ok_or_else(|| Error::validation("empty grid"))
}

/// Argmax over `(k, score)` pairs; ties go to the smaller count.
pub fn select_pseudo_k(results: &[(usize, f64)]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(k, score) in results {
        check_score(score)?;
        match best {
            Some((bk, bs)) if score < bs || (score == bs && k >= bk) => {}
            _ => best = Some((k, score)),
        }
    }
    best.ok_or_else(|| Error::validation("empty pseudo-label sweep"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOutcome {
    /// `scores[eta][epochs]` from the first stage.
    pub scores: Vec<Vec<f64>>,
    pub cell: GridCell,
    pub pseudo_scores: Vec<(usize, f64)>,
    pub best_k: usize,
    pub best_accuracy: f64,
}

/// Runs both stages with `score(epochs, eta, pseudo_k)`; the first stage holds
/// the count at `default_k`.
pub fn grid_search(
    grid: &GridSpec,
    default_k: usize,
    mut score: impl FnMut(usize, f64, usize) -> Result<f64>,
) -> Result<GridOutcome> {
    grid.validate()?;
    let mut scores = vec![vec![0.0; grid.epochs_list.len()]; grid.eta_list.len()];
    for (j, &epochs) in grid.epochs_list.iter().enumerate() {
        for (i, &eta) in grid.eta_list.iter().enumerate() {
            scores[i][j] = score(epochs, eta, default_k)?;
        }
    }
    let cell = select_cell(&grid.epochs_list, &grid.eta_list, &scores)?;
    let mut pseudo_scores = Vec::with_capacity(grid.pseudo_k_list.len());
    for &k in &grid.pseudo_k_list {
        pseudo_scores.push((k, score(cell.epochs, cell.eta, k)?));
    }
    let (best_k, best_accuracy) = select_pseudo_k(&pseudo_scores)?;
    Ok(GridOutcome {
        scores,
        cell,
        pseudo_scores,
        best_k,
        best_accuracy,
    })
}

/// Rows per eta, one column per epoch count.
pub fn scores_to_csv(epochs_list: &[usize], eta_list: &[f64], scores: &[Vec<f64>]) -> String {
    let mut out = String::from("eta");
    for e in epochs_list {
        out.push_str(&format!(",epochs_{e}"));
    }
    out.push('\n');
    for (row, eta) in scores.iter().zip(eta_list) {
        out.push_str(&eta.to_string());
        for s in row {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}
