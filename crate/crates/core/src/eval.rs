//! Inference by similarity against the location bank, and the accuracy and
//! distance-error metrics.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, Matrix};
use crate::corpus::{LabelId, LocationLabel};
use crate::error::{Error, Result};

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Index of the bank row with the largest dot product; ties go to the lowest
/// index.
pub fn predict_index(user: &[f64], bank: &Matrix) -> usize {
    assert!(bank.rows() > 0, "empty location bank");
    let mut best = 0;
    let mut best_score = dot(user, bank.row(0));
    for j in 1..bank.rows() {
        let s = dot(user, bank.row(j));
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    best
}

/// Similarity of `user` against every bank row.
pub fn similarity_scores(user: &[f64], bank: &Matrix) -> Vec<f64> {
    (0..bank.rows()).map(|j| dot(user, bank.row(j))).collect()
}

fn check_coord(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Coordinate { lat, lon });
    }
    Ok(())
}

/// Great-circle distance between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    check_coord(a.0, a.1)?;
    check_coord(b.0, b.1)?;
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub acc: f64,
    #[serde(rename = "meanD", default, skip_serializing_if = "Option::is_none")]
    pub mean_d: Option<f64>,
    #[serde(rename = "medD", default, skip_serializing_if = "Option::is_none")]
    pub med_d: Option<f64>,
    pub per_class_acc: IndexMap<LabelId, f64>,
    pub n_test: usize,
}

/// Scores predictions against gold labels. Distances are reported only when
/// every label has coordinates; a correct prediction always counts as 0 km.
pub fn evaluate(gold: &[LabelId], predicted: &[LabelId], labels: &[LocationLabel]) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if gold.len() != predicted.len() {
        return Err(Error::Dimension {
            expected: format!("{} predictions", gold.len()),
            got: predicted.len().to_string(),
        });
    }
    let by_id: IndexMap<&LabelId, &LocationLabel> = labels.iter().map(|l| (&l.label_id, l)).collect();
    for id in gold.iter().chain(predicted) {
        if !by_id.contains_key(id) {
            return Err(Error::InvalidArgument(format!("unknown label {id}")));
        }
    }
    let correct = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    let acc = correct as f64 / gold.len() as f64;

    let mut per_class: IndexMap<LabelId, (usize, usize)> = IndexMap::new();
    for l in labels {
        per_class.insert(l.label_id.clone(), (0, 0));
    }
    for (g, p) in gold.iter().zip(predicted) {
        let e = per_class.get_mut(g).expect("validated above");
        e.1 += 1;
        if g == p {
            e.0 += 1;
        }
    }
    let per_class_acc = per_class
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(id, (c, n))| (id, c as f64 / n as f64))
        .collect();

    let (mean_d, med_d) = if labels.iter().all(|l| l.coords().is_some()) {
        let mut d = Vec::with_capacity(gold.len());
        for (g, p) in gold.iter().zip(predicted) {
            if g == p {
                d.push(0.0);
            } else {
                let a = by_id[g].coords().expect("checked");
                let b = by_id[p].coords().expect("checked");
                d.push(haversine_km(a, b)?);
            }
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.sort_by(f64::total_cmp);
        let med = d[(d.len() - 1) / 2];
        (Some(mean), Some(med))
    } else {
        (None, None)
    };
    Ok(EvalReport { acc, mean_d, med_d, per_class_acc, n_test: gold.len() })
}

fn mean_option(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Arithmetic mean of several reports over the same test set.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return Err(Error::InvalidArgument("no reports to average".into()));
    };
    let n = reports.len() as f64;
    let acc = reports.iter().map(|r| r.acc).sum::<f64>() / n;
    let mean_d = mean_option(reports.iter().map(|r| r.mean_d));
    let med_d = mean_option(reports.iter().map(|r| r.med_d));
    let mut per_class_acc = IndexMap::new();
    for id in first.per_class_acc.keys() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class_acc.get(id).copied()).collect();
        per_class_acc.insert(id.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Ok(EvalReport { acc, mean_d, med_d, per_class_acc, n_test: first.n_test })
}

/// Plain-text table with one row per named report: acc in percent, distances
/// in km ("-" when unavailable).
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>11}  {:>11}", "model", "acc (%)", "meanD (km)", "medD (km)");
    for (name, r) in rows {
        let km = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>11}  {:>11}",
            name,
            100.0 * r.acc,
            km(r.mean_d),
            km(r.med_d)
        );
    }
    out
}
