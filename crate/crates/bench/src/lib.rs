//! Input builders shared by the benchmarks.

use dmsconv::evaluation::ScoreTable;
use dmsconv::Tensor;

/// Deterministic pseudo-random matrix in roughly [-1, 1].
pub fn signal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin())
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// A score table where the true language is favoured by `margin`.
pub fn scores(languages: usize, per_language: usize, margin: f64) -> ScoreTable {
    let names = (0..languages).map(|l| format!("lang{l}")).collect();
    let mut truth = Vec::new();
    let mut rows = Vec::new();
    for l in 0..languages {
        for u in 0..per_language {
            let noise = signal(1, languages, (l * per_language + u) as u64);
            let row = noise
                .data()
                .iter()
                .enumerate()
                .map(|(j, v)| v + if j == l { margin } else { 0.0 })
                .collect();
            truth.push(l);
            rows.push(row);
        }
    }
    ScoreTable::new(names, truth, rows).expect("valid table")
}
