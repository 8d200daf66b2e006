//! Sequence-quality features and a threshold gate over them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point_with, quat_norm, unproject, Camera, DepthMap, SceneBundle};
use crate::linalg::{self, Vec3};
use crate::scalar::Scalar;

/// Mean squared second difference of camera centers and of rotation vectors.
pub fn trajectory_smoothness<T: Scalar>(cameras: &[Camera<T>]) -> Result<(T, T)> {
    let n = cameras.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "smoothness needs at least 3 cameras, got {n}"
        )));
    }
    let centers = cameras
        .iter()
        .map(|c| c.center())
        .collect::<Result<Vec<_>>>()?;
    let rotvecs = cameras
        .iter()
        .map(|c| c.rotation().map(|r| linalg::log_so3(&r)))
        .collect::<Result<Vec<_>>>()?;
    let accel = |x: &[Vec3<T>]| {
        let total = (1..n - 1)
            .map(|i| {
                let d = linalg::add(
                    linalg::sub(x[i + 1], linalg::scale(x[i], T::lit(2.0))),
                    x[i - 1],
                );
                linalg::dot(d, d)
            })
            .fold(T::zero(), |a, b| a + b);
        total / T::from_usize_lossy(n - 2)
    };
    Ok((accel(&centers), accel(&rotvecs)))
}

fn angle_deg<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    // atan2 form stays accurate for small and near-straight angles.
    let c = linalg::norm(linalg::cross(a, b));
    c.atan2(linalg::dot(a, b)).to_degrees()
}

/// Median over sampled points of the largest angle subtended at the point by
/// any pair of cameras that see it (in frustum, positive depth).
pub fn parallax_stat<T: Scalar>(
    points: &[Vec3<T>],
    cameras: &[Camera<T>],
    sample: usize,
) -> Result<T> {
    if cameras.len() < 2 || points.is_empty() {
        return Err(Error::InsufficientData(
            "parallax needs two cameras and a point".into(),
        ));
    }
    let rots = cameras
        .iter()
        .map(|c| c.rotation())
        .collect::<Result<Vec<_>>>()?;
    let centers = cameras
        .iter()
        .map(|c| c.center())
        .collect::<Result<Vec<_>>>()?;
    let take = sample.max(1).min(points.len());
    let mut maxima = Vec::with_capacity(take);
    for s in 0..take {
        let x = points[s * points.len() / take];
        let visible: Vec<usize> = (0..cameras.len())
            .filter(|&i| {
                let p = project_point_with(x, &rots[i], &cameras[i]);
                p.in_frustum
            })
            .collect();
        let mut best: Option<T> = None;
        for (k, &a) in visible.iter().enumerate() {
            for &b in &visible[k + 1..] {
                let ang = angle_deg(linalg::sub(centers[a], x), linalg::sub(centers[b], x));
                best = Some(best.map_or(ang, |m| m.max(ang)));
            }
        }
        maxima.extend(best);
    }
    if maxima.is_empty() {
        return Err(Error::InsufficientData(
            "no point is seen by two cameras".into(),
        ));
    }
    Ok(median(&mut maxima))
}

fn median<T: Scalar>(v: &mut [T]) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// `(linearity, planarity, scattering)` from the covariance eigenvalues
/// `v1 >= v2 >= v3`: `((v1-v2)/v1, (v2-v3)/v1, v3/v1)`.
pub fn pca_shape<T: Scalar>(points: &[Vec3<T>]) -> Result<(T, T, T)> {
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "shape analysis needs 4 points, got {}",
            points.len()
        )));
    }
    let n = T::from_usize_lossy(points.len());
    let mean = linalg::scale(
        points
            .iter()
            .fold([T::zero(); 3], |a, &p| linalg::add(a, p)),
        T::one() / n,
    );
    let mut cov = [[T::zero(); 3]; 3];
    for p in points {
        let d = linalg::sub(*p, mean);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
    }
    let ev = linalg::symmetric_eigenvalues(&cov).map(|v| v.max(T::zero()));
    if !(ev[0] > T::zero()) {
        return Err(Error::InsufficientData("all points coincide".into()));
    }
    Ok((
        (ev[0] - ev[1]) / ev[0],
        (ev[1] - ev[2]) / ev[0],
        ev[2] / ev[0],
    ))
}

/// Fraction of pixels with valid, finite, positive depth, averaged over frames.
pub fn completeness<T: Scalar>(depths: &[DepthMap<T>]) -> f64 {
    if depths.is_empty() {
        return 0.0;
    }
    let per_frame = depths.iter().map(|d| {
        let ok = d
            .values
            .iter()
            .zip(&d.valid)
            .filter(|(v, &m)| m && v.is_finite() && **v > T::zero())
            .count();
        ok as f64 / d.values.len().max(1) as f64
    });
    per_frame.sum::<f64>() / depths.len() as f64
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Static 3-D kd-tree with median splits on the widest axis.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            axis: vec![0; points.len()],
            points,
        };
        tree.build(0, tree.points.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut spread = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for &i in &self.order[lo..hi] {
            for (a, s) in spread.iter_mut().enumerate() {
                s.0 = s.0.min(self.points[i][a]);
                s.1 = s.1.max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (spread[a].1 - spread[a].0).total_cmp(&(spread[b].1 - spread[b].0)))
            .unwrap_or(0);
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi]
            .select_nth_unstable_by(mid - lo, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Squared distances and indices of the `k` nearest points other than
    /// `exclude`, nearest first.
    pub fn nearest(&self, query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(0, self.points.len(), query, k, exclude, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|c| (c.0, c.1)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        q: [f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = self.points[idx];
        if Some(idx) != exclude {
            let d = (0..3).map(|a| (q[a] - p[a]).powi(2)).sum::<f64>();
            if heap.len() < k {
                heap.push(Candidate(d, idx));
            } else if heap.peek().is_some_and(|w| Candidate(d, idx) < *w) {
                heap.pop();
                heap.push(Candidate(d, idx));
            }
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(first.0, first.1, q, k, exclude, heap);
        if heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.0) {
            self.search(second.0, second.1, q, k, exclude, heap);
        }
    }
}

/// Per-point mean distance to the `k` nearest neighbours.
pub fn mean_knn_distances<T: Scalar>(points: &[Vec3<T>], k: usize) -> Result<Vec<f64>> {
    if points.len() < k + 1 || k == 0 {
        return Err(Error::InsufficientData(format!(
            "{} points for k = {k}",
            points.len()
        )));
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(|x| x.to_f64_lossy())).collect();
    let tree = KdTree::new(pts.clone());
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            tree.nearest(p, k, Some(i))
                .iter()
                .map(|(d, _)| d.sqrt())
                .sum::<f64>()
                / k as f64
        })
        .collect())
}

/// Fraction of points whose mean kNN distance exceeds the global mean by
/// more than two standard deviations.
pub fn noise_fraction<T: Scalar>(points: &[Vec3<T>], k: usize) -> Result<f64> {
    let d = mean_knn_distances(points, k)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(d.iter().filter(|&&x| x > mean + 2.0 * std).count() as f64 / n)
}

/// Per-pixel flags: the pixel's 3-D point lands, in at least one other view,
/// on a valid pixel whose depth agrees within `rel_tol`. Also returns the
/// flagged fraction over all pixels.
pub fn multi_view_consistency<T: Scalar>(
    bundle: &SceneBundle<T>,
    rel_tol: f64,
) -> Result<(Vec<Vec<bool>>, f64)> {
    let n = bundle.num_frames();
    if n < 2 || !bundle.is_labeled() {
        return Err(Error::InsufficientData(
            "consistency needs at least two labeled frames".into(),
        ));
    }
    let (w, h) = (bundle.width(), bundle.height());
    let rots = bundle
        .cameras
        .iter()
        .map(|c| c.rotation())
        .collect::<Result<Vec<_>>>()?;
    let tol = T::lit(rel_tol);
    let mut masks = Vec::with_capacity(n);
    let mut count = 0usize;
    for a in 0..n {
        let pm = unproject(&bundle.depths[a], &bundle.cameras[a])?;
        let mask: Vec<bool> = (0..w * h)
            .map(|p| {
                pm.valid[p]
                    && (0..n).filter(|&b| b != a).any(|b| {
                        let proj = project_point_with(pm.points[p], &rots[b], &bundle.cameras[b]);
                        proj.pixel(w, h).is_some_and(|(u, v)| {
                            let d = &bundle.depths[b];
                            let q = v * w + u;
                            d.valid[q]
                                && (proj.depth - d.values[q]).abs() <= tol * d.values[q].abs()
                        })
                    })
            })
            .collect();
        count += mask.iter().filter(|&&m| m).count();
        masks.push(mask);
    }
    Ok((masks, count as f64 / (n * w * h) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityFeatures {
    pub s_trans: f64,
    pub s_rot: f64,
    pub median_max_parallax: f64,
    pub linearity: f64,
    pub planarity: f64,
    pub scattering: f64,
    pub completeness: f64,
    pub noise_fraction: f64,
    pub registration_ratio: f64,
    pub fov_x: f64,
    pub fov_y: f64,
    pub distortion_ratio: f64,
    pub valid_depth_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub parallax_samples: usize,
    pub knn: usize,
    pub consistency_tolerance: f64,
    /// Points used for the shape and noise features (strided subsample).
    pub max_points: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            parallax_samples: 256,
            knn: 8,
            consistency_tolerance: 0.01,
            max_points: 20000,
        }
    }
}

/// Extracts every feature of a labeled bundle.
pub fn extract_features<T: Scalar>(
    bundle: &SceneBundle<T>,
    cfg: &QualityConfig,
) -> Result<QualityFeatures> {
    bundle.validate()?;
    if !bundle.is_labeled() {
        return Err(Error::InsufficientData(
            "quality features need cameras and depths".into(),
        ));
    }
    let n = bundle.num_frames();
    let registered: Vec<&Camera<T>> = bundle
        .cameras
        .iter()
        .filter(|c| {
            c.to_vector().iter().all(|x| x.is_finite())
                && quat_norm(c.q) > T::zero()
                && c.check_focal().is_ok()
        })
        .collect();
    let registration_ratio = registered.len() as f64 / n as f64;
    let (s_trans, s_rot) = if n >= 3 {
        let (a, b) = trajectory_smoothness(&bundle.cameras)?;
        (a.to_f64_lossy(), b.to_f64_lossy())
    } else {
        (0.0, 0.0)
    };
    let mut points = Vec::new();
    for (d, c) in bundle.depths.iter().zip(&bundle.cameras) {
        let pm = unproject(d, c)?;
        points.extend(
            pm.points
                .iter()
                .zip(&pm.valid)
                .filter(|(_, &v)| v)
                .map(|(p, _)| *p),
        );
    }
    let stride = points.len().div_ceil(cfg.max_points.max(1)).max(1);
    let subset: Vec<Vec3<T>> = points.iter().step_by(stride).copied().collect();
    let median_max_parallax = if n >= 2 {
        parallax_stat(&subset, &bundle.cameras, cfg.parallax_samples)
            .map(|x| x.to_f64_lossy())
            .unwrap_or(0.0)
    } else {
        0.0
    };
    let (linearity, planarity, scattering) = pca_shape(&subset)
        .map(|(a, b, c)| (a.to_f64_lossy(), b.to_f64_lossy(), c.to_f64_lossy()))
        .unwrap_or((1.0, 0.0, 0.0));
    let noise = noise_fraction(&subset, cfg.knn).unwrap_or(0.0);
    let mut fx: Vec<f64> = bundle
        .cameras
        .iter()
        .map(|c| c.fov_degrees().0.to_f64_lossy())
        .collect();
    let mut fy: Vec<f64> = bundle
        .cameras
        .iter()
        .map(|c| c.fov_degrees().1.to_f64_lossy())
        .collect();
    let valid_depth_fraction = if n >= 2 {
        multi_view_consistency(bundle, cfg.consistency_tolerance)?.1
    } else {
        0.0
    };
    Ok(QualityFeatures {
        s_trans,
        s_rot,
        median_max_parallax,
        linearity,
        planarity,
        scattering,
        completeness: completeness(&bundle.depths),
        noise_fraction: noise,
        registration_ratio,
        fov_x: median(&mut fx),
        fov_y: median(&mut fy),
        distortion_ratio: 0.0,
        valid_depth_fraction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateThresholds {
    pub min_registration: f64,
    pub fov_min: f64,
    pub fov_max: f64,
    pub max_distortion: f64,
    pub min_valid_depth: f64,
    pub max_linearity: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            min_registration: 0.995,
            fov_min: 30.0,
            fov_max: 120.0,
            max_distortion: 0.1,
            min_valid_depth: 0.05,
            max_linearity: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub accept: bool,
    pub reasons: Vec<String>,
}

/// Rejects on any strictly violated threshold; values exactly at a
/// threshold pass.
pub fn heuristic_gate(f: &QualityFeatures, t: &GateThresholds) -> GateVerdict {
    let mut reasons = Vec::new();
    if f.registration_ratio < t.min_registration {
        reasons.push(format!(
            "registration ratio {:.4} below {}",
            f.registration_ratio, t.min_registration
        ));
    }
    for (name, fov) in [("x", f.fov_x), ("y", f.fov_y)] {
        if fov < t.fov_min || fov > t.fov_max || fov.is_nan() {
            reasons.push(format!(
                "fov out of range: fov_{name} {fov:.2} outside [{}, {}]",
                t.fov_min, t.fov_max
            ));
        }
    }
    if f.distortion_ratio > t.max_distortion {
        reasons.push(format!(
            "distortion ratio {:.4} above {}",
            f.distortion_ratio, t.max_distortion
        ));
    }
    if f.valid_depth_fraction < t.min_valid_depth {
        reasons.push(format!(
            "valid depth fraction {:.4} below {}",
            f.valid_depth_fraction, t.min_valid_depth
        ));
    }
    if f.linearity > t.max_linearity {
        reasons.push(format!(
            "linearity {:.4} above {}",
            f.linearity, t.max_linearity
        ));
    }
    GateVerdict {
        accept: reasons.is_empty(),
        reasons,
    }
}
