//! Pairwise pose AUC, scale-aligned depth accuracy and point error.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    normalize_scene, quat_conj, quat_mul, quat_norm, quat_to_rotmat, unproject, Camera, DepthMap,
    SceneBundle,
};
use crate::linalg::{self, Vec3};
use crate::scalar::Scalar;

/// Angular errors of one unordered frame pair, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorPair {
    pub i: usize,
    pub j: usize,
    pub rotation: f64,
    pub translation: f64,
}

impl PoseErrorPair {
    pub fn max(&self) -> f64 {
        self.rotation.max(self.translation)
    }
}

fn unit_quat<T: Scalar>(q: [T; 4]) -> Result<[T; 4]> {
    let n = quat_norm(q);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    Ok(q.map(|x| x / n))
}

/// Pose of camera `j` relative to camera `i`: `(q_j q_i^*, t_j - R_rel t_i)`.
fn relative<T: Scalar>(a: &Camera<T>, b: &Camera<T>) -> Result<([T; 4], Vec3<T>)> {
    let q = unit_quat(quat_mul(unit_quat(b.q)?, quat_conj(unit_quat(a.q)?)))?;
    let r = quat_to_rotmat(q)?;
    Ok((q, linalg::sub(b.t, linalg::mat_vec(&r, a.t))))
}

fn vec_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    linalg::norm(linalg::cross(a, b))
        .atan2(linalg::dot(a, b))
        .to_degrees()
}

/// Pairwise rotation and translation-direction errors. Pairs whose ground
/// truth baseline is zero are skipped; their count is returned alongside.
pub fn pose_errors<T: Scalar>(
    pred: &[Camera<T>],
    gt: &[Camera<T>],
) -> Result<(Vec<PoseErrorPair>, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} ground-truth cameras",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::InsufficientData(
            "pose AUC needs at least two frames".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let (qp, tp) = relative(&pred[i], &pred[j])?;
            let (qg, tg) = relative(&gt[i], &gt[j])?;
            let tg = tg.map(|x| x.to_f64_lossy());
            if linalg::norm(tg) <= 1e-12 {
                excluded += 1;
                continue;
            }
            // Half-angle chord form: exactly zero for identical rotations and
            // well conditioned near both ends.
            let (a, b) = (qp.map(|x| x.to_f64_lossy()), qg.map(|x| x.to_f64_lossy()));
            let s = if a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            let diff: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - s * y).powi(2))
                .sum::<f64>()
                .sqrt();
            let sum: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x + s * y).powi(2))
                .sum::<f64>()
                .sqrt();
            let rotation = 4.0 * diff.atan2(sum).to_degrees();
            let tp = tp.map(|x| x.to_f64_lossy());
            let translation = if linalg::norm(tp) > 0.0 {
                vec_angle_deg(tp, tg)
            } else {
                180.0
            };
            pairs.push(PoseErrorPair {
                i,
                j,
                rotation,
                translation,
            });
        }
    }
    Ok((pairs, excluded))
}

/// `(100 / tau) * integral_0^tau frac{e < t} dt`, evaluated exactly: each
/// error contributes `max(0, tau - e)`.
pub fn auc_from_errors(errors: &[f64], tau: f64) -> f64 {
    if errors.is_empty() || !(tau > 0.0) {
        return 0.0;
    }
    let area: f64 = errors.iter().map(|&e| (tau - e).max(0.0)).sum();
    100.0 * area / (tau * errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAuc {
    pub tau: f64,
    pub auc: f64,
    pub pairs: usize,
    pub excluded_pairs: usize,
}

/// AUC at `tau` degrees of the pairwise `max(rotation, translation)` error.
pub fn pose_auc<T: Scalar>(pred: &[Camera<T>], gt: &[Camera<T>], tau: f64) -> Result<PoseAuc> {
    let (pairs, excluded) = pose_errors(pred, gt)?;
    let errors: Vec<f64> = pairs.iter().map(PoseErrorPair::max).collect();
    Ok(PoseAuc {
        tau,
        auc: auc_from_errors(&errors, tau),
        pairs: pairs.len(),
        excluded_pairs: excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    None,
    #[default]
    MedianScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Percentage of pixels within a factor 1.25 of ground truth.
    pub delta_125: f64,
    pub scale: f64,
    pub pixels: usize,
}

/// AbsRel and the 1.25 threshold accuracy over all frames of one sequence.
/// A pixel counts when ground truth is valid and positive and the prediction
/// is valid and positive.
pub fn depth_metrics<T: Scalar>(
    pred: &[DepthMap<T>],
    gt: &[DepthMap<T>],
    alignment: Alignment,
) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} ground-truth depth maps",
            pred.len(),
            gt.len()
        )));
    }
    let mut pairs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.values.len() != g.values.len() {
            return Err(Error::Shape(format!(
                "depth map sizes {}x{} and {}x{}",
                p.width, p.height, g.width, g.height
            )));
        }
        for k in 0..g.values.len() {
            let (dp, dg) = (p.values[k].to_f64_lossy(), g.values[k].to_f64_lossy());
            if g.valid[k] && p.valid[k] && dg.is_finite() && dp.is_finite() && dg > 0.0 && dp > 0.0
            {
                pairs.push((dp, dg));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoValidDepth);
    }
    let scale = match alignment {
        Alignment::None => 1.0,
        Alignment::MedianScale => {
            let mut ratios: Vec<f64> = pairs.iter().map(|(p, g)| g / p).collect();
            ratios.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let n = ratios.len();
            if n % 2 == 1 {
                ratios[n / 2]
            } else {
                0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
            }
        }
    };
    let n = pairs.len() as f64;
    let abs_rel = pairs
        .iter()
        .map(|(p, g)| (scale * p - g).abs() / g)
        .sum::<f64>()
        / n;
    let within = pairs
        .iter()
        .filter(|(p, g)| (scale * p / g).max(g / (scale * p)) < 1.25)
        .count();
    Ok(DepthMetrics {
        abs_rel,
        delta_125: 100.0 * within as f64 / n,
        scale,
        pixels: pairs.len(),
    })
}

/// Mean distance between corresponding points of two already normalized
/// scenes, over pixels valid in both.
pub fn point_error_normalized<T: Scalar>(
    pred: &SceneBundle<T>,
    gt: &SceneBundle<T>,
) -> Result<f64> {
    if pred.depths.len() != gt.depths.len() || pred.cameras.len() != gt.cameras.len() {
        return Err(Error::Shape(
            "prediction and ground truth differ in frame count".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..gt.depths.len() {
        let pp = unproject(&pred.depths[f], &pred.cameras[f])?;
        let pg = unproject(&gt.depths[f], &gt.cameras[f])?;
        if pp.points.len() != pg.points.len() {
            return Err(Error::Shape(format!("frame {f} resolution differs")));
        }
        for k in 0..pg.points.len() {
            if pp.valid[k] && pg.valid[k] {
                let d = linalg::sub(pp.points[k], pg.points[k]).map(|x| x.to_f64_lossy());
                total += linalg::norm(d);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidDepth);
    }
    Ok(total / count as f64)
}

/// Normalizes both scenes to unit space independently, then measures the
/// mean per-pixel point distance.
pub fn point_error<T: Scalar>(pred: &SceneBundle<T>, gt: &SceneBundle<T>) -> Result<f64> {
    point_error_normalized(&normalize_scene(pred)?, &normalize_scene(gt)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub taus: Vec<f64>,
    pub alignment: Alignment,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            taus: vec![3.0, 5.0, 15.0, 30.0],
            alignment: Alignment::MedianScale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub auc: Vec<PoseAuc>,
    pub abs_rel: f64,
    pub delta_125: f64,
    pub point_error: f64,
}

/// Every metric for one predicted sequence against its ground truth.
pub fn evaluate<T: Scalar>(
    pred: &SceneBundle<T>,
    gt: &SceneBundle<T>,
    cfg: &EvalConfig,
) -> Result<SequenceMetrics> {
    let auc = cfg
        .taus
        .iter()
        .map(|&tau| pose_auc(&pred.cameras, &gt.cameras, tau))
        .collect::<Result<Vec<_>>>()?;
    let depth = depth_metrics(&pred.depths, &gt.depths, cfg.alignment)?;
    Ok(SequenceMetrics {
        auc,
        abs_rel: depth.abs_rel,
        delta_125: depth.delta_125,
        point_error: point_error(pred, gt)?,
    })
}

/// Unweighted mean over sequences of every metric.
pub fn aggregate(rows: &[SequenceMetrics]) -> Option<SequenceMetrics> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let auc = (0..first.auc.len())
        .map(|k| PoseAuc {
            tau: first.auc[k].tau,
            auc: mean(&|r| r.auc[k].auc),
            pairs: rows.iter().map(|r| r.auc[k].pairs).sum(),
            excluded_pairs: rows.iter().map(|r| r.auc[k].excluded_pairs).sum(),
        })
        .collect();
    Some(SequenceMetrics {
        auc,
        abs_rel: mean(&|r| r.abs_rel),
        delta_125: mean(&|r| r.delta_125),
        point_error: mean(&|r| r.point_error),
    })
}
