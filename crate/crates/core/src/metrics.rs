//! Macro-F1 and feature-distribution discrepancy.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TemsrError};

/// Unweighted mean of per-class F1; a class with no true and no predicted
/// members scores 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64> {
    if y_true.is_empty() {
        return Err(TemsrError::Domain("macro F1 of an empty label set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(TemsrError::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(bad) = y_true.iter().chain(y_pred).find(|&&y| y >= classes) {
        return Err(TemsrError::Domain(format!("label {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

fn check_pair(p: &Array2<f64>, q: &Array2<f64>) -> Result<()> {
    if p.nrows() < 2 || q.nrows() < 2 {
        return Err(TemsrError::Domain(format!(
            "KL needs at least 2 rows per side, got {} and {}",
            p.nrows(),
            q.nrows()
        )));
    }
    if p.ncols() != q.ncols() {
        return Err(TemsrError::Shape(format!("feature dims {} vs {}", p.ncols(), q.ncols())));
    }
    Ok(())
}

/// KL(P || Q) in nats between diagonal Gaussians fitted (maximum
/// likelihood) to the rows of each matrix.
pub fn kl_gaussian(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    check_pair(p, q)?;
    let fit = |x: &Array2<f64>| {
        let mu = x.mean_axis(Axis(0)).unwrap();
        let var = x.var_axis(Axis(0), 0.0).mapv(|v| v.max(VARIANCE_FLOOR));
        (mu, var)
    };
    let (mp, vp) = fit(p);
    let (mq, vq) = fit(q);
    let mut kl = 0.0;
    for d in 0..p.ncols() {
        let dm = mp[d] - mq[d];
        kl += 0.5 * ((vq[d] / vp[d]).ln() + (vp[d] + dm * dm) / vq[d] - 1.0);
    }
    Ok(kl.max(0.0))
}

/// Sum over dimensions of the discrete KL between per-dimension histograms
/// on a shared range, with additive smoothing.
pub fn kl_histogram(p: &Array2<f64>, q: &Array2<f64>, bins: usize) -> Result<f64> {
    check_pair(p, q)?;
    if bins < 2 {
        return Err(TemsrError::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    const SMOOTH: f64 = 1e-3;
    let mut kl = 0.0;
    for d in 0..p.ncols() {
        let (cp, cq) = (p.column(d), q.column(d));
        let lo = cp.iter().chain(cq.iter()).cloned().fold(f64::INFINITY, f64::min);
        let hi = cp.iter().chain(cq.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo).max(1e-12) / bins as f64;
        let hist = |col: ndarray::ArrayView1<f64>| {
            let mut h = vec![SMOOTH; bins];
            for &v in col {
                h[(((v - lo) / width) as usize).min(bins - 1)] += 1.0;
            }
            let s: f64 = h.iter().sum();
            h.into_iter().map(|c| c / s).collect::<Vec<f64>>()
        };
        let (hp, hq) = (hist(cp), hist(cq));
        kl += hp.iter().zip(&hq).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KlEstimator {
    #[default]
    Gaussian,
    Histogram { bins: usize },
}

impl KlEstimator {
    pub fn kl(&self, p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
        match *self {
            KlEstimator::Gaussian => kl_gaussian(p, q),
            KlEstimator::Histogram { bins } => kl_histogram(p, q, bins),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub epoch: usize,
    pub src_srclike: f64,
    pub srclike_trg: f64,
    pub src_trg: f64,
}

/// One row per snapshot; the first row is taken before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyCurve {
    pub rows: Vec<DiscrepancyRow>,
}

/// Feature snapshots of the three distributions at one epoch.
pub struct FeatureSnapshot<'a> {
    pub source: &'a Array2<f64>,
    pub source_like: &'a Array2<f64>,
    pub target: &'a Array2<f64>,
}

impl DiscrepancyCurve {
    pub fn track(&mut self, epoch: usize, snap: &FeatureSnapshot, estimator: KlEstimator) -> Result<DiscrepancyRow> {
        let row = DiscrepancyRow {
            epoch,
            src_srclike: estimator.kl(snap.source, snap.source_like)?,
            srclike_trg: estimator.kl(snap.source_like, snap.target)?,
            src_trg: estimator.kl(snap.source, snap.target)?,
        };
        for v in [row.src_srclike, row.srclike_trg, row.src_trg] {
            if !v.is_finite() {
                return Err(TemsrError::Domain(format!("non-finite KL at epoch {epoch}")));
            }
        }
        self.rows.push(row);
        Ok(row)
    }

    pub fn first(&self) -> Option<&DiscrepancyRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&DiscrepancyRow> {
        self.rows.last()
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<&DiscrepancyRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }
}

/// One line of `metrics.csv`. Loss columns are epoch means of per-batch
/// values and are empty on the pre-training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    #[serde(rename = "L_Seg")]
    pub l_seg: Option<f64>,
    #[serde(rename = "L_ARDM")]
    pub l_ardm: Option<f64>,
    #[serde(rename = "L_Align")]
    pub l_align: Option<f64>,
    #[serde(rename = "L_TrgEnt")]
    pub l_trg_ent: Option<f64>,
    pub total: Option<f64>,
    #[serde(rename = "MF1_target")]
    pub mf1_target: f64,
    #[serde(rename = "KL_src_srclike")]
    pub kl_src_srclike: f64,
    #[serde(rename = "KL_srclike_trg")]
    pub kl_srclike_trg: f64,
    #[serde(rename = "KL_src_trg")]
    pub kl_src_trg: f64,
}

fn csv_err(e: csv::Error) -> TemsrError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TemsrError::Io(io),
        other => TemsrError::Format(format!("{other:?}")),
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
