//! Utterance scoring and the Cavg / EER detection metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{prepare, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::Model;

/// Prior of the target language in the detection cost.
pub const P_TARGET: f64 = 0.5;

/// Per-utterance scores for every language plus the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub languages: Vec<String>,
    pub truth: Vec<usize>,
    /// One row per utterance, one column per language.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(languages: Vec<String>, truth: Vec<usize>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if truth.len() != scores.len() {
            return Err(Error::Metric(format!(
                "{} labels for {} score rows",
                truth.len(),
                scores.len()
            )));
        }
        let l = languages.len();
        for (i, (row, &t)) in scores.iter().zip(&truth).enumerate() {
            if row.len() != l {
                return Err(Error::Metric(format!(
                    "row {i} has {} scores for {l} languages",
                    row.len()
                )));
            }
            if t >= l {
                return Err(Error::Label {
                    label: t,
                    classes: l,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Metric(format!(
                    "row {i} contains a non-finite score"
                )));
            }
        }
        Ok(ScoreTable {
            languages,
            truth,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Keeps the columns in `subset` (in that order) and the utterances whose
    /// truth is among them, renormalizing each row to sum to one.
    pub fn restrict(&self, subset: &[usize]) -> Result<ScoreTable> {
        for &s in subset {
            if s >= self.languages.len() {
                return Err(Error::Label {
                    label: s,
                    classes: self.languages.len(),
                });
            }
        }
        let languages = subset.iter().map(|&s| self.languages[s].clone()).collect();
        let mut truth = Vec::new();
        let mut scores = Vec::new();
        for (row, &t) in self.scores.iter().zip(&self.truth) {
            let Some(pos) = subset.iter().position(|&s| s == t) else {
                continue;
            };
            let kept: Vec<f64> = subset.iter().map(|&s| row[s]).collect();
            let total: f64 = kept.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Metric(
                    "cannot renormalize a row with non-positive mass".into(),
                ));
            }
            truth.push(pos);
            scores.push(kept.iter().map(|v| v / total).collect());
        }
        ScoreTable::new(languages, truth, scores)
    }

    /// Header `truth,<languages…>`, then the true language name and the
    /// scores of each utterance.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for l in &self.languages {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (row, &t) in self.scores.iter().zip(&self.truth) {
            out.push_str(&self.languages[t]);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ScoreTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Metric("empty score table".into()))?;
        let mut cols = header.split(',');
        if cols.next().map(str::trim) != Some("truth") {
            return Err(Error::Metric(
                "score table header must start with `truth`".into(),
            ));
        }
        let languages: Vec<String> = cols.map(|c| c.trim().to_string()).collect();
        let mut truth = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let name = cells.next().unwrap_or("").trim();
            let t = languages.iter().position(|l| l == name).ok_or_else(|| {
                Error::Metric(format!("line {}: unknown language {name:?}", i + 2))
            })?;
            let row = cells
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Metric(format!("line {}: {e}", i + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            truth.push(t);
            scores.push(row);
        }
        ScoreTable::new(languages, truth, scores)
    }
}

/// Detection cost of one ordered (target, non-target) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCost {
    pub target: String,
    pub nontarget: String,
    pub p_miss: f64,
    pub p_fa: f64,
    pub cost: f64,
}

/// `C(t, n)` for every ordered pair of distinct languages.
///
/// A trial is accepted for `t` against `n` only if its `t` score is strictly
/// greater than its `n` score, so ties count as rejections.
pub fn pair_costs(table: &ScoreTable) -> Result<Vec<PairCost>> {
    let l = table.languages.len();
    if l < 2 {
        return Err(Error::Metric("Cavg needs at least two languages".into()));
    }
    let mut counts = vec![0usize; l];
    for &t in &table.truth {
        counts[t] += 1;
    }
    let empty: Vec<&str> = (0..l)
        .filter(|&i| counts[i] == 0)
        .map(|i| table.languages[i].as_str())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Metric(format!(
            "pair cost undefined: no trials for {}",
            empty.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(l * (l - 1));
    for t in 0..l {
        for n in 0..l {
            if t == n {
                continue;
            }
            let (mut misses, mut false_alarms) = (0usize, 0usize);
            for (row, &truth) in table.scores.iter().zip(&table.truth) {
                let accept = row[t] > row[n];
                if truth == t && !accept {
                    misses += 1;
                } else if truth == n && accept {
                    false_alarms += 1;
                }
            }
            let p_miss = misses as f64 / counts[t] as f64;
            let p_fa = false_alarms as f64 / counts[n] as f64;
            out.push(PairCost {
                target: table.languages[t].clone(),
                nontarget: table.languages[n].clone(),
                p_miss,
                p_fa,
                cost: P_TARGET * p_miss + (1.0 - P_TARGET) * p_fa,
            });
        }
    }
    Ok(out)
}

/// Mean pairwise detection cost.
pub fn cavg(table: &ScoreTable) -> Result<f64> {
    let costs = pair_costs(table)?;
    Ok(costs.iter().map(|c| c.cost).sum::<f64>() / costs.len() as f64)
}

/// Equal error rate and the score threshold closest to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    /// Fraction in `[0, 0.5]`.
    pub rate: f64,
    pub threshold: f64,
}

/// EER over pooled detection trials from `(score, is_target)` pairs.
///
/// Operating points accept scores `≥ θ` for every distinct score `θ`; the
/// EER is where the lower convex hull of the (P_fa, P_miss) curve crosses
/// P_miss = P_fa, interpolating linearly between hull vertices.
pub fn eer_from_trials(trials: &[(f64, bool)]) -> Result<EerPoint> {
    let n_tar = trials.iter().filter(|t| t.1).count();
    let n_non = trials.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Metric(format!(
            "EER needs target and non-target trials (have {n_tar} and {n_non})"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = trials.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (p_fa, p_miss, threshold), from accept-nothing to accept-everything.
    let mut points = vec![(0.0, 1.0, f64::INFINITY)];
    let (mut tar, mut non) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == theta {
            if sorted[i].1 {
                tar += 1;
            } else {
                non += 1;
            }
            i += 1;
        }
        points.push((
            non as f64 / n_non as f64,
            1.0 - tar as f64 / n_tar as f64,
            theta,
        ));
    }
    let hull = lower_hull(&points);
    for w in hull.windows(2) {
        let (x1, y1, t1) = w[0];
        let (x2, y2, t2) = w[1];
        let d1 = y1 - x1;
        let d2 = y2 - x2;
        if d1 >= 0.0 && d2 <= 0.0 {
            let frac = if d1 == d2 { 0.0 } else { d1 / (d1 - d2) };
            let rate = x1 + frac * (x2 - x1);
            let threshold = if frac <= 0.5 { t1 } else { t2 };
            return Ok(EerPoint { rate, threshold });
        }
    }
    Err(Error::Metric(
        "ROC hull never crosses the equal-error line".into(),
    ))
}

/// Lower convex hull of points sorted by non-decreasing x.
fn lower_hull(points: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
    let mut hull: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    for &p in points {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Pools every (utterance, language) score as a detection trial.
pub fn eer(table: &ScoreTable) -> Result<EerPoint> {
    let mut trials = Vec::with_capacity(table.len() * table.languages.len());
    for (row, &t) in table.scores.iter().zip(&table.truth) {
        for (l, &s) in row.iter().enumerate() {
            trials.push((s, l == t));
        }
    }
    eer_from_trials(&trials)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cavg: f64,
    /// Percent.
    pub eer_percent: f64,
    pub eer_threshold: f64,
    pub utterances: usize,
    pub pairs: Vec<PairCost>,
}

impl MetricReport {
    pub fn compute(table: &ScoreTable) -> Result<Self> {
        let pairs = pair_costs(table)?;
        let cavg = pairs.iter().map(|c| c.cost).sum::<f64>() / pairs.len() as f64;
        let e = eer(table)?;
        Ok(MetricReport {
            cavg,
            eer_percent: 100.0 * e.rate,
            eer_threshold: e.threshold,
            utterances: table.len(),
            pairs,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metric report always serializes")
    }

    /// Summary lines followed by the pair cost matrix.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "utterances  {}", self.utterances);
        let _ = writeln!(out, "Cavg        {:.4}", self.cavg);
        let _ = writeln!(out, "EER         {:.2}%", self.eer_percent);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:>8} {:>8} {:>8}",
            "target", "nontarget", "P_miss", "P_fa", "cost"
        );
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:>8.4} {:>8.4} {:>8.4}",
                p.target, p.nontarget, p.p_miss, p.p_fa, p.cost
            );
        }
        out
    }
}

/// Scores every utterance with a full-length inference pass. Rows are the
/// softmax over all `num_classes` outputs. Runs on the current rayon pool.
pub fn score_dataset(
    model: &Model,
    utts: &[FeatureSequence],
    languages: &[String],
) -> Result<ScoreTable> {
    let classes = model.config.num_classes;
    if languages.len() != classes {
        return Err(Error::Config(format!(
            "{} language names for a {classes}-class model",
            languages.len()
        )));
    }
    let prepared = prepare(
        utts,
        model.config.input_dim,
        model.config.mean_norm_window_frames,
    )?;
    let scores = prepared
        .par_iter()
        .map(|u| model.score_utterance(&u.features))
        .collect::<Result<Vec<_>>>()?;
    let truth = utts.iter().map(|u| u.label).collect();
    ScoreTable::new(languages.to_vec(), truth, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn csv_round_trip() {
        let t =
            ScoreTable::new(names(2), vec![0, 1], vec![vec![0.25, 0.75], vec![0.1, 0.9]]).unwrap();
        assert_eq!(ScoreTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn restrict_renormalizes() {
        let t = ScoreTable::new(
            names(3),
            vec![0, 2, 1],
            vec![
                vec![0.2, 0.6, 0.2],
                vec![0.1, 0.1, 0.8],
                vec![0.3, 0.3, 0.4],
            ],
        )
        .unwrap();
        let r = t.restrict(&[0, 2]).unwrap();
        assert_eq!(r.truth, vec![0, 1]);
        assert_eq!(r.scores[0], vec![0.5, 0.5]);
        assert!((r.scores[1][1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(ScoreTable::new(names(2), vec![0], vec![vec![f64::NAN, 0.0]]).is_err());
    }
}
