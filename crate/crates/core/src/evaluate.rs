//! Per-pair homography, pose and match-accuracy evaluation.

use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::formats::{MetricReport, PairError};
use crate::geometry::{
    auc, corner_error, from_rows, invert, ncm_rmse, pose_error, ransac_essential, ransac_homography, Mat3, Point, PoseGt, RansacConfig,
};
use crate::matcher::Match;
use crate::synthdata::GroundTruth;

pub const HOMOGRAPHY_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];
pub const POSE_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const NCM_TOLERANCE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Homography,
    Pose,
    Ncm,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Homography => "homography",
            Metric::Pose => "pose",
            Metric::Ncm => "ncm",
        }
    }

    pub fn default_thresholds(self) -> Vec<f64> {
        match self {
            Metric::Pose => POSE_THRESHOLDS.to_vec(),
            _ => HOMOGRAPHY_THRESHOLDS.to_vec(),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homography" => Ok(Metric::Homography),
            "pose" => Ok(Metric::Pose),
            "ncm" => Ok(Metric::Ncm),
            _ => Err(Error::Config(format!("unknown metric `{s}` (homography, pose or ncm)"))),
        }
    }
}

/// One pair to evaluate.
#[derive(Clone, Copy, Debug)]
pub struct EvalPair<'a> {
    pub name: &'a str,
    pub matches: &'a [Match],
    pub gt: &'a GroundTruth,
    pub width: usize,
    pub height: usize,
}

fn split(m: &[Match]) -> (Vec<Point>, Vec<Point>) {
    m.iter().map(|m| (m.a, m.b)).unzip()
}

/// Corner error of the RANSAC homography; infinite when estimation fails.
pub fn homography_error(p: &EvalPair, ransac: &RansacConfig) -> f64 {
    let (a, b) = split(p.matches);
    match ransac_homography(&a, &b, ransac) {
        Ok((h, _)) => corner_error(&h, &p.gt.homography(), p.width, p.height),
        Err(_) => f64::INFINITY,
    }
}

fn normalise(k_inv: &Mat3, pts: &[Point]) -> Vec<Point> {
    pts.iter()
        .map(|p| {
            let v = k_inv * Vector3::new(p[0], p[1], 1.0);
            [v[0] / v[2], v[1] / v[2]]
        })
        .collect()
}

/// Maximum of rotation and translation error in degrees; 180 when estimation fails.
pub fn pose_error_deg(p: &EvalPair, ransac: &RansacConfig) -> Result<f64> {
    let (Some(k), Some(e)) = (p.gt.k, p.gt.e) else {
        return Err(Error::Config(format!("pair {} has no pose ground truth", p.name)));
    };
    let k_inv = invert(&from_rows(&k))?;
    let (a, b) = split(p.matches);
    let (na, nb) = (normalise(&k_inv, &a), normalise(&k_inv, &b));
    let f = from_rows(&k)[(0, 0)];
    let cfg = RansacConfig {
        threshold: ransac.threshold / f,
        ..*ransac
    };
    let Ok((e_est, _)) = ransac_essential(&na, &nb, &cfg) else {
        return Ok(180.0);
    };
    let gt = match (p.gt.r, p.gt.t) {
        (Some(r), Some(t)) => PoseGt::Pose(from_rows(&r), Vector3::from(t)),
        _ => PoseGt::Essential(from_rows(&e)),
    };
    let (re, te) = pose_error(&e_est, &gt, &na, &nb);
    Ok(re.max(te))
}

struct PairOutcome {
    row: PairError,
    sq_sum: f64,
}

fn evaluate_pair(metric: Metric, i: usize, p: &EvalPair, ransac: &RansacConfig) -> Result<PairOutcome> {
    let cfg = RansacConfig {
        seed: ransac.seed ^ i as u64,
        ..*ransac
    };
    let (a, b) = split(p.matches);
    let (ncm, rmse) = ncm_rmse(&a, &b, &p.gt.homography(), NCM_TOLERANCE);
    let error = match metric {
        Metric::Homography => homography_error(p, &cfg),
        Metric::Pose => pose_error_deg(p, &cfg)?,
        Metric::Ncm => rmse.unwrap_or(f64::INFINITY),
    };
    Ok(PairOutcome {
        row: PairError {
            pair: p.name.to_string(),
            error: error.is_finite().then_some(error),
            matches: a.len(),
            ncm,
        },
        sq_sum: rmse.map_or(0.0, |r| r * r * a.len() as f64),
    })
}

/// Evaluates every pair; pair `i` uses RANSAC seed `ransac.seed ^ i`.
pub fn evaluate(metric: Metric, pairs: &[EvalPair], thresholds: &[f64], ransac: &RansacConfig) -> Result<MetricReport> {
    evaluate_threads(metric, pairs, thresholds, ransac, 1)
}

/// [`evaluate`] spread over `threads` workers; the report does not depend on
/// the thread count.
pub fn evaluate_threads(metric: Metric, pairs: &[EvalPair], thresholds: &[f64], ransac: &RansacConfig, threads: usize) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config("thresholds must be positive".into()));
    }
    let threads = threads.clamp(1, pairs.len());
    let mut slots: Vec<Option<Result<PairOutcome>>> = (0..pairs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = pairs.len().div_ceil(threads);
        for (k, out) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in out.iter_mut().enumerate() {
                    let i = k * chunk + j;
                    *slot = Some(evaluate_pair(metric, i, &pairs[i], ransac));
                }
            });
        }
    });
    let outcomes = slots.into_iter().map(|o| o.expect("every slot filled")).collect::<Result<Vec<_>>>()?;
    let ncm_total = outcomes.iter().map(|o| o.row.ncm).sum();
    let total: usize = outcomes.iter().map(|o| o.row.matches).sum();
    let sq_sum: f64 = outcomes.iter().map(|o| o.sq_sum).sum();
    let per_pair: Vec<PairError> = outcomes.into_iter().map(|o| o.row).collect();
    let errors: Vec<f64> = per_pair.iter().map(|p| p.error.unwrap_or(f64::INFINITY)).collect();
    Ok(MetricReport {
        metric: metric.name().to_string(),
        thresholds: thresholds.to_vec(),
        auc: auc(&errors, thresholds)?,
        ncm: ncm_total,
        total_matches: total,
        rmse: (total > 0).then(|| (sq_sum / total as f64).sqrt()),
        per_pair_errors: per_pair,
    })
}
