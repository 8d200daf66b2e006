//! Supervised training losses and positive/negative patch pairs for the
//! matching loss.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    canonicalize_quat, fundamental_matrix, project_point_with, sampson_with, unproject, Camera,
    DepthMap, SceneBundle,
};
use crate::heads::{DepthOutput, DepthPrediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to ground-truth depth before inversion.
pub const DEPTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub camera: f64,
    pub depth: f64,
    pub point: f64,
    pub matching: f64,
    /// Weight of the `-log c` confidence regularizer.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            camera: 5.0,
            depth: 1.0,
            point: 0.5,
            matching: 0.1,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.camera,
            self.depth,
            self.point,
            self.matching,
            self.alpha,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn combine(&self, camera: f64, depth: f64, point: f64, matching: f64) -> f64 {
        self.camera * camera + self.depth * depth + self.point * point + self.matching * matching
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub camera: f64,
    pub depth: f64,
    pub point: f64,
    pub matching: f64,
    pub total: f64,
    pub matching_skipped: bool,
}

// ---------------------------------------------------------------------------
// Camera

fn sign_canonical<T: Scalar>(q: [T; 4]) -> T {
    if canonicalize_quat(q) == q {
        T::one()
    } else {
        -T::one()
    }
}

/// `sum_i |g_hat_i - g_i|_1` over the 9 components, with each predicted
/// quaternion flipped into the canonical hemisphere first.
pub fn camera_loss_var<'t, T: Scalar>(pred: Var<'t, T>, gt: &[Camera<T>]) -> Result<Var<'t, T>> {
    let tape = pred.tape();
    let p = pred.value();
    if p.shape() != (gt.len(), 9) {
        return Err(Error::Shape(format!(
            "{:?} camera predictions for {} cameras",
            p.shape(),
            gt.len()
        )));
    }
    let signs = Tensor::from_fn(gt.len(), 9, |i, k| {
        if k < 4 {
            sign_canonical([p.get(i, 0), p.get(i, 1), p.get(i, 2), p.get(i, 3)])
        } else {
            T::one()
        }
    });
    let target = Tensor::from_fn(gt.len(), 9, |i, k| gt[i].canonicalized().to_vector()[k]);
    Ok((pred * tape.constant(signs) - tape.constant(target))
        .abs()
        .sum())
}

pub fn camera_loss<T: Scalar>(pred: &[[T; 9]], gt: &[Camera<T>]) -> Result<T> {
    let tape = Tape::new();
    let rows = Tensor::from_fn(pred.len(), 9, |i, k| pred[i][k]);
    Ok(camera_loss_var(tape.constant(rows), gt)?.item())
}

// ---------------------------------------------------------------------------
// Depth and point

/// Confidence-weighted residual loss shared by the depth and point terms:
/// `mean_valid(c * w * |e|_1) + mean_pairs(c_p * |e_q - e_p|_1) - alpha * mean_valid(ln c)`,
/// where pairs are horizontally or vertically adjacent valid pixels `(p, q)`.
pub fn aleatoric_loss<'t, T: Scalar>(
    residual: Var<'t, T>,
    confidence: Var<'t, T>,
    weight: &[T],
    valid: &[bool],
    width: usize,
    alpha: T,
) -> Result<Var<'t, T>> {
    let tape = residual.tape();
    let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoValidDepth);
    }
    let w = tape.constant(Tensor::from_vec(
        rows.len(),
        1,
        rows.iter().map(|&i| weight[i]).collect(),
    ));
    let c = confidence.gather_rows(&rows);
    let e = residual.gather_rows(&rows).abs().sum_rows();
    let mut loss = (c * w * e).mean() - c.ln().mean().scale(alpha);

    let height = valid.len() / width;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for v in 0..height {
        for u in 0..width {
            let p = v * width + u;
            if !valid[p] {
                continue;
            }
            if u + 1 < width && valid[p + 1] {
                a.push(p);
                b.push(p + 1);
            }
            if v + 1 < height && valid[p + width] {
                a.push(p);
                b.push(p + width);
            }
        }
    }
    if !a.is_empty() {
        let diff = (residual.gather_rows(&b) - residual.gather_rows(&a))
            .abs()
            .sum_rows();
        loss = loss + (confidence.gather_rows(&a) * diff).mean();
    }
    Ok(loss)
}

fn inverse_depth_weight<T: Scalar>(gt: &DepthMap<T>) -> Vec<T> {
    gt.values
        .iter()
        .map(|&d| T::one() + T::one() / d.max(T::lit(DEPTH_FLOOR)))
        .collect()
}

/// Depth loss of one frame; `depth`, `confidence` are `HW x 1` columns.
pub fn depth_loss_var<'t, T: Scalar>(
    depth: Var<'t, T>,
    confidence: Var<'t, T>,
    gt: &DepthMap<T>,
    alpha: T,
) -> Result<Var<'t, T>> {
    let n = gt.width * gt.height;
    if depth.shape() != (n, 1) || confidence.shape() != (n, 1) {
        return Err(Error::Shape(format!(
            "depth prediction {:?} for a {}x{} map",
            depth.shape(),
            gt.height,
            gt.width
        )));
    }
    let target = depth
        .tape()
        .constant(Tensor::from_vec(n, 1, gt.values.clone()));
    aleatoric_loss(
        depth - target,
        confidence,
        &inverse_depth_weight(gt),
        &gt.valid,
        gt.width,
        alpha,
    )
}

pub fn depth_loss<T: Scalar>(pred: &DepthPrediction<T>, gt: &DepthMap<T>, alpha: T) -> Result<T> {
    let tape = Tape::new();
    let n = pred.depth.len();
    let d = tape.constant(Tensor::from_vec(n, 1, pred.depth.clone()));
    let c = tape.constant(Tensor::from_vec(n, 1, pred.confidence.clone()));
    Ok(depth_loss_var(d, c, gt, alpha)?.item())
}

/// Rotation matrix of a `1 x 4` quaternion (normalized inside the graph).
pub fn rotation_var<'t, T: Scalar>(q: Var<'t, T>) -> Var<'t, T> {
    let q = q / q.square().sum().sqrt();
    let [w, x, y, z] = std::array::from_fn(|k| q.slice_cols(k, 1));
    let two = T::lit(2.0);
    let one_minus = |a: Var<'t, T>, b: Var<'t, T>| (a * a + b * b).scale(-two).add_scalar(T::one());
    let r = [
        [
            one_minus(y, z),
            (x * y - w * z).scale(two),
            (x * z + w * y).scale(two),
        ],
        [
            (x * y + w * z).scale(two),
            one_minus(x, z),
            (y * z - w * x).scale(two),
        ],
        [
            (x * z - w * y).scale(two),
            (y * z + w * x).scale(two),
            one_minus(x, y),
        ],
    ];
    Var::concat_rows(&r.map(|row| Var::concat_cols(&row)))
}

/// Reference-frame points `HW x 3` from a depth column and a `1 x 9` camera.
pub fn unproject_var<'t, T: Scalar>(
    depth: Var<'t, T>,
    camera: Var<'t, T>,
    width: usize,
    height: usize,
) -> Var<'t, T> {
    let tape = depth.tape();
    let (hw, hh) = (
        T::from_usize_lossy(width) * T::lit(0.5),
        T::from_usize_lossy(height) * T::lit(0.5),
    );
    let du = tape.constant(Tensor::from_fn(width * height, 1, |p, _| {
        T::from_usize_lossy(p % width) - hw
    }));
    let dv = tape.constant(Tensor::from_fn(width * height, 1, |p, _| {
        T::from_usize_lossy(p / width) - hh
    }));
    let fx = camera.slice_cols(7, 1).scale(hw);
    let fy = camera.slice_cols(8, 1).scale(hh);
    let xc = Var::concat_cols(&[depth * du / fx, depth * dv / fy, depth]);
    let t = camera.slice_cols(4, 3);
    (xc - t).matmul(rotation_var(camera.slice_cols(0, 4)))
}

/// Point loss of one frame: residuals between predicted and ground-truth
/// reference-frame points, with the depth loss's confidence and weighting.
pub fn point_loss_var<'t, T: Scalar>(
    depth: Var<'t, T>,
    confidence: Var<'t, T>,
    camera: Var<'t, T>,
    gt: &DepthMap<T>,
    gt_camera: &Camera<T>,
    alpha: T,
) -> Result<Var<'t, T>> {
    let n = gt.width * gt.height;
    if depth.shape() != (n, 1) || confidence.shape() != (n, 1) || camera.shape() != (1, 9) {
        return Err(Error::Shape(
            "point loss inputs do not match the ground-truth map".into(),
        ));
    }
    gt_camera.check_focal()?;
    gt_camera.rotation()?;
    // The target goes through the same arithmetic as the prediction, so a
    // perfect prediction leaves a residual of exactly zero.
    let tape = depth.tape();
    let gt_depth = tape.constant(Tensor::from_vec(n, 1, gt.values.clone()));
    let gt_cam = tape.constant(Tensor::from_vec(1, 9, gt_camera.to_vector().to_vec()));
    let target = unproject_var(gt_depth, gt_cam, gt.width, gt.height).value();
    let pred = unproject_var(depth, camera, gt.width, gt.height);
    aleatoric_loss(
        pred - tape.constant(target),
        confidence,
        &inverse_depth_weight(gt),
        &gt.valid,
        gt.width,
        alpha,
    )
}

pub fn point_loss<T: Scalar>(
    pred: &DepthPrediction<T>,
    camera: &[T; 9],
    gt: &DepthMap<T>,
    gt_camera: &Camera<T>,
    alpha: T,
) -> Result<T> {
    let tape = Tape::new();
    let n = pred.depth.len();
    let d = tape.constant(Tensor::from_vec(n, 1, pred.depth.clone()));
    let c = tape.constant(Tensor::from_vec(n, 1, pred.confidence.clone()));
    let cam = tape.constant(Tensor::from_vec(1, 9, camera.to_vec()));
    Ok(point_loss_var(d, c, cam, gt, gt_camera, alpha)?.item())
}

// ---------------------------------------------------------------------------
// Matching

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivePair {
    pub frame_a: usize,
    pub patch_a: usize,
    pub frame_b: usize,
    pub patch_b: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativePair {
    pub frame_a: usize,
    pub patch_a: usize,
    pub frame_b: usize,
    pub patch_b: usize,
    /// Squared-pixel Sampson distance between the patch centers.
    pub sampson: f64,
    pub rgb_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchPairSet {
    pub positives: Vec<PositivePair>,
    pub negatives: Vec<NegativePair>,
}

impl PatchPairSet {
    /// No positive pair: the matching loss is skipped.
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub patch_size: usize,
    /// Relative depth tolerance for a projection to count.
    pub depth_tolerance: f64,
    /// Projections closer than this to the image edge are discarded.
    pub border: usize,
    pub min_overlap: f64,
    /// Minimum valid projections for a query patch to be used.
    pub min_projections: usize,
    pub max_queries: usize,
    /// Squared pixels.
    pub sampson_threshold: f64,
    pub rgb_threshold: f64,
    /// Negative draws attempted per wanted negative.
    pub negative_attempts: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            depth_tolerance: 0.01,
            border: 4,
            min_overlap: 0.10,
            min_projections: 8,
            max_queries: 64,
            sampson_threshold: 25.0,
            rgb_threshold: 0.15,
            negative_attempts: 20,
        }
    }
}

/// Correspondence counts `(frame_a, patch_a) -> (frame_b -> (patch_b -> count))`.
type Counts = BTreeMap<(usize, usize), BTreeMap<usize, BTreeMap<usize, usize>>>;

fn correspondence_counts<T: Scalar>(bundle: &SceneBundle<T>, cfg: &PairConfig) -> Result<Counts> {
    let (w, h, r) = (bundle.width(), bundle.height(), cfg.patch_size);
    let gw = w / r;
    let n = bundle.num_frames();
    let rots = bundle
        .cameras
        .iter()
        .map(|c| c.rotation())
        .collect::<Result<Vec<_>>>()?;
    let tol = T::lit(cfg.depth_tolerance);
    let mut counts = Counts::new();
    for a in 0..n {
        let pm = unproject(&bundle.depths[a], &bundle.cameras[a])?;
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                if !pm.valid[p] || bundle.is_dynamic(a, p) {
                    continue;
                }
                let patch_a = (v / r) * gw + u / r;
                for b in (0..n).filter(|&b| b != a) {
                    let proj = project_point_with(pm.points[p], &rots[b], &bundle.cameras[b]);
                    let Some((pu, pv)) = proj.pixel(w, h) else {
                        continue;
                    };
                    if pu < cfg.border
                        || pv < cfg.border
                        || pu + cfg.border >= w
                        || pv + cfg.border >= h
                    {
                        continue;
                    }
                    let q = pv * w + pu;
                    let db = &bundle.depths[b];
                    if !db.valid[q] || bundle.is_dynamic(b, q) {
                        continue;
                    }
                    let target = db.values[q];
                    if !((proj.depth - target).abs() <= tol * target.abs()) {
                        continue;
                    }
                    let patch_b = (pv / r) * gw + pu / r;
                    *counts
                        .entry((a, patch_a))
                        .or_default()
                        .entry(b)
                        .or_default()
                        .entry(patch_b)
                        .or_default() += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Positive pairs: query patches with enough depth-consistent projections,
/// sampled with probability proportional to their correspondence count,
/// paired with every target patch receiving more than `min_overlap` of the
/// patch's projections into that frame.
pub fn find_positives<T: Scalar, R: Rng>(
    bundle: &SceneBundle<T>,
    cfg: &PairConfig,
    rng: &mut R,
) -> Result<Vec<PositivePair>> {
    if bundle.num_frames() < 2 || !bundle.is_labeled() {
        return Err(Error::InsufficientData(
            "pair construction needs at least two labeled frames".into(),
        ));
    }
    if cfg.patch_size == 0
        || bundle.width() % cfg.patch_size != 0
        || bundle.height() % cfg.patch_size != 0
    {
        return Err(Error::Config(format!(
            "patch size {} does not tile the images",
            cfg.patch_size
        )));
    }
    let counts = correspondence_counts(bundle, cfg)?;
    let eligible: Vec<(&(usize, usize), usize)> = counts
        .iter()
        .map(|(k, per_frame)| {
            (
                k,
                per_frame.values().flat_map(|m| m.values()).sum::<usize>(),
            )
        })
        .filter(|&(_, total)| total >= cfg.min_projections)
        .collect();
    let chosen: Vec<&(usize, usize)> = if eligible.len() <= cfg.max_queries {
        eligible.iter().map(|&(k, _)| k).collect()
    } else {
        // Weighted sampling without replacement (exponential keys).
        let mut keyed: Vec<(f64, &(usize, usize))> = eligible
            .iter()
            .map(|&(k, total)| {
                (
                    rng.gen::<f64>().max(f64::MIN_POSITIVE).ln() / total as f64,
                    k,
                )
            })
            .collect();
        keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(y.1)));
        let mut keys: Vec<_> = keyed
            .into_iter()
            .take(cfg.max_queries)
            .map(|(_, k)| k)
            .collect();
        keys.sort();
        keys
    };
    let mut out = Vec::new();
    for key in chosen {
        for (&b, targets) in &counts[key] {
            let total: usize = targets.values().sum();
            for (&patch_b, &c) in targets {
                let overlap = c as f64 / total as f64;
                if overlap > cfg.min_overlap {
                    out.push(PositivePair {
                        frame_a: key.0,
                        patch_a: key.1,
                        frame_b: b,
                        patch_b,
                        overlap,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn patch_mean_rgb<T: Scalar>(
    bundle: &SceneBundle<T>,
    frame: usize,
    patch: usize,
    r: usize,
) -> [f64; 3] {
    let img = &bundle.images[frame];
    let gw = img.width / r;
    let (py, px) = (patch / gw, patch % gw);
    let mut acc = [0.0; 3];
    for (c, a) in acc.iter_mut().enumerate() {
        for dy in 0..r {
            for dx in 0..r {
                *a += img.get(c, px * r + dx, py * r + dy).to_f64_lossy();
            }
        }
        *a /= (r * r) as f64;
    }
    acc
}

/// Positives plus an equal number of negatives: random cross-frame patch
/// pairs that are both far from each other's epipolar line and different in
/// mean colour.
pub fn build_pairs<T: Scalar, R: Rng>(
    bundle: &SceneBundle<T>,
    cfg: &PairConfig,
    rng: &mut R,
) -> Result<PatchPairSet> {
    let mut positives = find_positives(bundle, cfg, rng)?;
    if positives.is_empty() {
        return Ok(PatchPairSet::default());
    }
    let n = bundle.num_frames();
    let r = cfg.patch_size;
    let (gw, gh) = (bundle.width() / r, bundle.height() / r);
    let patches = gw * gh;
    let mut fundamentals = BTreeMap::new();
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            if let Ok(f) = fundamental_matrix(&bundle.cameras[a], &bundle.cameras[b]) {
                fundamentals.insert((a, b), f);
            }
        }
    }
    let center = |p: usize| {
        let half = T::lit((r as f64 - 1.0) * 0.5);
        [
            T::from_usize_lossy((p % gw) * r) + half,
            T::from_usize_lossy((p / gw) * r) + half,
        ]
    };
    let mut negatives = Vec::new();
    let attempts = cfg.negative_attempts.max(1) * positives.len();
    for _ in 0..attempts {
        if negatives.len() == positives.len() {
            break;
        }
        let a = rng.gen_range(0..n);
        let b = (a + rng.gen_range(1..n)) % n;
        let (pa, pb) = (rng.gen_range(0..patches), rng.gen_range(0..patches));
        let Some(f) = fundamentals.get(&(a, b)) else {
            continue;
        };
        let sampson = sampson_with(f, center(pa), center(pb)).to_f64_lossy();
        if !(sampson > cfg.sampson_threshold) {
            continue;
        }
        let (ca, cb) = (
            patch_mean_rgb(bundle, a, pa, r),
            patch_mean_rgb(bundle, b, pb, r),
        );
        let rgb =
            ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt();
        if rgb > cfg.rgb_threshold {
            negatives.push(NegativePair {
                frame_a: a,
                patch_a: pa,
                frame_b: b,
                patch_b: pb,
                sampson,
                rgb_distance: rgb,
            });
        }
    }
    if negatives.len() < positives.len() {
        // Keep a uniformly random subset of positives of the same size.
        for i in 0..negatives.len() {
            let j = rng.gen_range(i..positives.len());
            positives.swap(i, j);
        }
        positives.truncate(negatives.len());
    }
    Ok(PatchPairSet {
        positives,
        negatives,
    })
}

/// `mean_pos softplus(-s) + mean_neg softplus(s)` on cosine similarities of
/// image tokens (`(N * tokens_per_frame) x C`, frame-major). `None` when
/// there are no pairs.
pub fn matching_loss_var<'t, T: Scalar>(
    tokens: Var<'t, T>,
    tokens_per_frame: usize,
    pairs: &PatchPairSet,
) -> Option<Var<'t, T>> {
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return None;
    }
    let sims = |rows_a: Vec<usize>, rows_b: Vec<usize>| {
        let a = tokens.gather_rows(&rows_a).l2_normalize_rows(T::lit(1e-12));
        let b = tokens.gather_rows(&rows_b).l2_normalize_rows(T::lit(1e-12));
        (a * b).sum_rows()
    };
    let row = |f: usize, p: usize| f * tokens_per_frame + p;
    let pos = sims(
        pairs
            .positives
            .iter()
            .map(|p| row(p.frame_a, p.patch_a))
            .collect(),
        pairs
            .positives
            .iter()
            .map(|p| row(p.frame_b, p.patch_b))
            .collect(),
    );
    let neg = sims(
        pairs
            .negatives
            .iter()
            .map(|p| row(p.frame_a, p.patch_a))
            .collect(),
        pairs
            .negatives
            .iter()
            .map(|p| row(p.frame_b, p.patch_b))
            .collect(),
    );
    Some((-pos).softplus().mean() + neg.softplus().mean())
}

/// Value-level matching loss; returns `(loss, skipped)`.
pub fn matching_loss<T: Scalar>(
    tokens: &Tensor<T>,
    tokens_per_frame: usize,
    pairs: &PatchPairSet,
) -> (T, bool) {
    let tape = Tape::new();
    match matching_loss_var(tape.constant(tokens.clone()), tokens_per_frame, pairs) {
        Some(l) => (l.item(), false),
        None => (T::zero(), true),
    }
}

/// Graph nodes of every loss term.
pub struct LossTerms<'t, T> {
    pub camera: Var<'t, T>,
    pub depth: Var<'t, T>,
    pub point: Var<'t, T>,
    pub matching: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

impl<T: Scalar> LossTerms<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |x: Var<'_, T>| x.item().to_f64_lossy();
        LossBreakdown {
            camera: v(self.camera),
            depth: v(self.depth),
            point: v(self.point),
            matching: self.matching.map(v).unwrap_or(0.0),
            total: v(self.total),
            matching_skipped: self.matching.is_none(),
        }
    }
}

/// Weighted sum of the camera, depth, point and matching losses of a
/// forward pass against a labeled, normalized bundle.
pub fn total_loss<'t, T: Scalar>(
    depth: &DepthOutput<'t, T>,
    cameras: Var<'t, T>,
    image_tokens: Var<'t, T>,
    bundle: &SceneBundle<T>,
    pairs: &PatchPairSet,
    weights: &LossWeights,
) -> Result<LossTerms<'t, T>> {
    weights.validate()?;
    if !bundle.is_labeled() {
        return Err(Error::InsufficientData(
            "supervised loss needs cameras and depths".into(),
        ));
    }
    let n = bundle.num_frames();
    if depth.frames != n || depth.width != bundle.width() || depth.height != bundle.height() {
        return Err(Error::Shape(
            "depth prediction does not match the bundle".into(),
        ));
    }
    let alpha = T::lit(weights.alpha);
    let camera = camera_loss_var(cameras, &bundle.cameras)?;
    let mut d_terms = Vec::with_capacity(n);
    let mut p_terms = Vec::with_capacity(n);
    for i in 0..n {
        let (d, c) = (depth.frame_depth(i), depth.frame_confidence(i));
        d_terms.push(depth_loss_var(d, c, &bundle.depths[i], alpha)?);
        p_terms.push(point_loss_var(
            d,
            c,
            cameras.slice_rows(i, 1),
            &bundle.depths[i],
            &bundle.cameras[i],
            alpha,
        )?);
    }
    let depth_l = Var::concat_rows(&d_terms).sum();
    let point_l = Var::concat_rows(&p_terms).sum();
    let matching = matching_loss_var(image_tokens, image_tokens.rows() / n, pairs);
    let mut total = camera.scale(T::lit(weights.camera))
        + depth_l.scale(T::lit(weights.depth))
        + point_l.scale(T::lit(weights.point));
    if let Some(m) = matching {
        total = total + m.scale(T::lit(weights.matching));
    }
    Ok(LossTerms {
        camera,
        depth: depth_l,
        point: point_l,
        matching,
        total,
    })
}
