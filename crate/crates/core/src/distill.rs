//! EMA teacher-student self-distillation with stochastic augmentations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    canonicalize_quat, quat_mul, quat_norm, rebase_cameras, Camera, DepthMap, Image, SceneBundle,
};
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Augmentation strengths. Zero strengths disable the matching operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue shift as a fraction of a full turn.
    pub hue: f64,
    /// Gaussian blur sigma range in pixels; `None` disables blur.
    pub blur_sigma: Option<(f64, f64)>,
    /// Draw a random multiple of 90 degrees (odd turns only on square images).
    pub rotate: bool,
    /// Per-frame probability of one masked rectangle.
    pub mask_prob: f64,
    /// Rectangle side range in pixels, clipped to the image.
    pub mask_side: (usize, usize),
    pub permute: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 0.1,
            blur_sigma: Some((0.1, 2.0)),
            rotate: true,
            mask_prob: 0.05,
            mask_side: (32, 128),
            permute: true,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            blur_sigma: None,
            rotate: false,
            mask_prob: 0.0,
            mask_side: (32, 128),
            permute: false,
        }
    }

    /// Only frame reordering.
    pub fn permutation_only() -> Self {
        Self {
            permute: true,
            ..Self::identity()
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.x0..self.x1).contains(&u) && (self.y0..self.y1).contains(&v)
    }
}

/// What `augment` did, enough to map predictions back to the input frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    /// Output frame `k` is input frame `permutation[k]`.
    pub permutation: Vec<usize>,
    pub quarter_turns: u8,
    /// Masked rectangles per input frame, in rotated pixel coordinates.
    pub masks: Vec<Vec<Rect>>,
}

impl AugmentRecord {
    pub fn inverse_permutation(&self) -> Vec<usize> {
        invert(&self.permutation)
    }

    /// Per input frame, `true` where a pixel was masked.
    pub fn masked_pixels(&self, width: usize, height: usize) -> Vec<Vec<bool>> {
        self.masks
            .iter()
            .map(|rects| {
                (0..width * height)
                    .map(|p| rects.iter().any(|r| r.contains(p % width, p / width)))
                    .collect()
            })
            .collect()
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// Reorders frames so that output frame `k` is input frame `perm[k]`.
pub fn apply_permutation<T: Scalar>(
    bundle: &SceneBundle<T>,
    perm: &[usize],
) -> Result<SceneBundle<T>> {
    let mut seen = vec![false; bundle.num_frames()];
    if perm.len() != seen.len()
        || perm
            .iter()
            .any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::Shape(format!(
            "{perm:?} is not a permutation of {} frames",
            bundle.num_frames()
        )));
    }
    Ok(bundle.select_frames(perm))
}

/// Undoes `apply_permutation(_, perm)`.
pub fn restore_order<T: Scalar>(bundle: &SceneBundle<T>, perm: &[usize]) -> Result<SceneBundle<T>> {
    apply_permutation(bundle, &invert(perm))
}

/// Rotates a row-major `w x h` grid by `k` quarter turns; one turn sends
/// pixel `(u, v)` to `(v, w - 1 - u)`.
pub fn rotate_grid<V: Copy>(data: &[V], w: usize, h: usize, k: u8) -> (Vec<V>, usize, usize) {
    let mut out = data.to_vec();
    let (mut cw, mut ch) = (w, h);
    for _ in 0..k % 4 {
        let mut next = out.clone();
        for v in 0..ch {
            for u in 0..cw {
                next[(cw - 1 - u) * ch + v] = out[v * cw + u];
            }
        }
        out = next;
        std::mem::swap(&mut cw, &mut ch);
    }
    (out, cw, ch)
}

/// Camera seeing the rotated image: a roll about the optical axis with the
/// focal lengths swapped on odd turns. Exact up to the half-pixel offset
/// between the pixel-center grid and the principal point.
pub fn rotate_camera<T: Scalar>(cam: &Camera<T>, k: u8) -> Camera<T> {
    let mut c = cam.clone();
    let h = T::FRAC_1_SQRT_2();
    // (x, y) -> (y, -x) in camera coordinates per turn.
    let roll = [h, T::zero(), T::zero(), -h];
    for _ in 0..k % 4 {
        c.q = canonicalize_quat(quat_mul(roll, c.q));
        c.t = [c.t[1], -c.t[0], c.t[2]];
        c.f = [c.f[1], c.f[0]];
        std::mem::swap(&mut c.width, &mut c.height);
    }
    let n = quat_norm(c.q);
    c.q = c.q.map(|x| x / n);
    c
}

fn rotate_image<T: Scalar>(img: &Image<T>, k: u8) -> Image<T> {
    let plane = img.width * img.height;
    let mut data = Vec::with_capacity(img.data.len());
    let (mut w, mut h) = (img.width, img.height);
    for c in 0..3 {
        let (d, nw, nh) = rotate_grid(
            &img.data[c * plane..(c + 1) * plane],
            img.width,
            img.height,
            k,
        );
        data.extend(d);
        (w, h) = (nw, nh);
    }
    Image {
        width: w,
        height: h,
        data,
    }
}

/// Rotates every per-pixel field and camera of a bundle.
pub fn rotate_bundle<T: Scalar>(bundle: &SceneBundle<T>, k: u8) -> SceneBundle<T> {
    if k % 4 == 0 {
        return bundle.clone();
    }
    let (w, h) = (bundle.width(), bundle.height());
    SceneBundle {
        images: bundle.images.iter().map(|i| rotate_image(i, k)).collect(),
        cameras: bundle.cameras.iter().map(|c| rotate_camera(c, k)).collect(),
        depths: bundle
            .depths
            .iter()
            .map(|d| {
                let (values, nw, nh) = rotate_grid(&d.values, w, h, k);
                DepthMap {
                    width: nw,
                    height: nh,
                    values,
                    valid: rotate_grid(&d.valid, w, h, k).0,
                }
            })
            .collect(),
        dynamic: bundle
            .dynamic
            .as_ref()
            .map(|m| m.iter().map(|x| rotate_grid(x, w, h, k).0).collect()),
        confidence: bundle
            .confidence
            .as_ref()
            .map(|m| m.iter().map(|x| rotate_grid(x, w, h, k).0).collect()),
    }
}

/// Blackens the rectangle in the image and invalidates its depth.
pub fn apply_mask<T: Scalar>(bundle: &mut SceneBundle<T>, frame: usize, rect: Rect) {
    let (w, h) = (bundle.width(), bundle.height());
    for v in rect.y0..rect.y1.min(h) {
        for u in rect.x0..rect.x1.min(w) {
            for c in 0..3 {
                bundle.images[frame].set(c, u, v, T::zero());
            }
            if let Some(d) = bundle.depths.get_mut(frame) {
                d.valid[v * w + u] = false;
            }
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn jitter(img: &mut [f64], plane: usize, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range((1.0 - s).max(0.0)..=1.0 + s);
    let gray = |img: &[f64], p: usize| (0..3).map(|c| LUMA[c] * img[c * plane + p]).sum::<f64>();
    if spec.brightness > 0.0 {
        let b = factor(rng, spec.brightness);
        img.iter_mut().for_each(|x| *x *= b);
    }
    if spec.contrast > 0.0 {
        let c = factor(rng, spec.contrast);
        let mean = (0..plane).map(|p| gray(img, p)).sum::<f64>() / plane as f64;
        img.iter_mut().for_each(|x| *x = mean + c * (*x - mean));
    }
    if spec.saturation > 0.0 {
        let s = factor(rng, spec.saturation);
        for p in 0..plane {
            let g = gray(img, p);
            for c in 0..3 {
                img[c * plane + p] = g + s * (img[c * plane + p] - g);
            }
        }
    }
    if spec.hue > 0.0 {
        // Rotation of the chroma plane in YIQ space.
        let a = rng.gen_range(-spec.hue..=spec.hue) * std::f64::consts::TAU;
        let (cs, sn) = (a.cos(), a.sin());
        for p in 0..plane {
            let [r, g, b] = [img[p], img[plane + p], img[2 * plane + p]];
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (cs * i - sn * q, sn * i + cs * q);
            img[p] = y + 0.956 * i + 0.621 * q;
            img[plane + p] = y - 0.272 * i - 0.647 * q;
            img[2 * plane + p] = y - 1.106 * i + 1.703 * q;
        }
    }
    img.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

fn gaussian_blur(img: &mut [f64], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    for plane in img.chunks_mut(w * h) {
        let src = plane.to_vec();
        for v in 0..h {
            for u in 0..w {
                plane[v * w + u] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * src[v * w + clamp(u as isize + j as isize - radius, w)])
                    .sum();
            }
        }
        let src = plane.to_vec();
        for v in 0..h {
            for u in 0..w {
                plane[v * w + u] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * src[clamp(v as isize + j as isize - radius, h) * w + u])
                    .sum();
            }
        }
    }
}

/// Draws the shared quarter-turn count for a bundle of the given size.
pub fn draw_rotation(spec: &AugmentationSpec, width: usize, height: usize, seed: u64) -> u8 {
    if !spec.rotate {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if width == height {
        rng.gen_range(0..4)
    } else {
        2 * rng.gen_range(0..2)
    }
}

/// Augments with a rotation drawn from `seed`.
pub fn augment<T: Scalar>(
    bundle: &SceneBundle<T>,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<(SceneBundle<T>, AugmentRecord)> {
    let k = draw_rotation(spec, bundle.width(), bundle.height(), seed ^ 0x5e_ed0f_7a7e);
    augment_with_rotation(bundle, spec, seed, k)
}

/// Rotation by `quarter_turns`, then per-frame photometric jitter, blur and
/// masking, then frame reordering; all randomness besides the rotation comes
/// from `seed`.
pub fn augment_with_rotation<T: Scalar>(
    bundle: &SceneBundle<T>,
    spec: &AugmentationSpec,
    seed: u64,
    quarter_turns: u8,
) -> Result<(SceneBundle<T>, AugmentRecord)> {
    bundle.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rotate_bundle(bundle, quarter_turns);
    let (w, h) = (out.width(), out.height());
    let n = out.num_frames();
    let photometric =
        spec.brightness > 0.0 || spec.contrast > 0.0 || spec.saturation > 0.0 || spec.hue > 0.0;
    let mut masks = vec![Vec::new(); n];
    for (f, frame_masks) in masks.iter_mut().enumerate() {
        if photometric || spec.blur_sigma.is_some() {
            let mut px: Vec<f64> = out.images[f]
                .data
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect();
            jitter(&mut px, w * h, spec, &mut rng);
            if let Some((lo, hi)) = spec.blur_sigma {
                gaussian_blur(&mut px, w, h, rng.gen_range(lo..=hi));
            }
            out.images[f].data = px.into_iter().map(T::lit).collect();
        }
        if spec.mask_prob > 0.0 && rng.gen_bool(spec.mask_prob.min(1.0)) {
            let side = |rng: &mut ChaCha8Rng, n: usize| {
                rng.gen_range(spec.mask_side.0..=spec.mask_side.1.max(spec.mask_side.0))
                    .clamp(1, n)
            };
            let (sw, sh) = (side(&mut rng, w), side(&mut rng, h));
            let (x0, y0) = (rng.gen_range(0..=w - sw), rng.gen_range(0..=h - sh));
            let rect = Rect {
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            };
            apply_mask(&mut out, f, rect);
            frame_masks.push(rect);
        }
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    if spec.permute {
        permutation.shuffle(&mut rng);
    }
    let out = apply_permutation(&out, &permutation)?;
    Ok((
        out,
        AugmentRecord {
            permutation,
            quarter_turns,
            masks,
        },
    ))
}

/// EMA teacher: a parameter copy that only `update` mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub model: Model<T>,
    pub decay: f64,
}

impl<T: Scalar> TeacherState<T> {
    pub fn new(student: &Model<T>, decay: f64) -> Self {
        Self {
            model: student.clone(),
            decay,
        }
    }

    pub fn update(&mut self, student: &Model<T>) -> Result<()> {
        ema_update(&mut self.model.params, &student.params, self.decay)
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA decay {m} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    // Written as a step towards the student so equal weights stay fixed.
    let k = T::lit(1.0 - m);
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            if m == 0.0 {
                *a = b
            } else {
                *a += k * (b - *a)
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub augmentation: AugmentationSpec,
    pub feature_weight: f64,
    pub camera_weight: f64,
    pub depth_weight: f64,
    pub ema_decay: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            augmentation: AugmentationSpec::default(),
            feature_weight: 1.0,
            camera_weight: 1.0,
            depth_weight: 1.0,
            ema_decay: 0.999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillSeeds {
    /// Draws the rotation applied to both streams.
    pub shared: u64,
    pub teacher: u64,
    pub student: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub feature: f64,
    pub camera: f64,
    pub depth: f64,
    pub total: f64,
}

/// Row indices that gather per-frame blocks of `stride` rows back into input
/// frame order.
fn frame_rows(inverse: &[usize], stride: usize) -> Vec<usize> {
    inverse
        .iter()
        .flat_map(|&k| k * stride..(k + 1) * stride)
        .collect()
}

fn canonical_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let s = if row[0] < T::zero() {
        -T::one()
    } else {
        T::one()
    };
    row.iter()
        .enumerate()
        .map(|(k, &x)| if k < 4 { s * x } else { x })
        .collect()
}

/// One self-distillation step. Heads of `student` are frozen; gradients of
/// the trunk and tokenizer are added to the student's gradient slots.
pub fn distill_step<T: Scalar>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    bundle: &SceneBundle<T>,
    seeds: DistillSeeds,
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    student.params.check_compatible(&teacher.params)?;
    student.set_heads_trainable(false);
    let k = draw_rotation(
        &cfg.augmentation,
        bundle.width(),
        bundle.height(),
        seeds.shared,
    );
    let (tb, tr) = augment_with_rotation(bundle, &cfg.augmentation, seeds.teacher, k)?;
    let (sb, sr) = augment_with_rotation(bundle, &cfg.augmentation, seeds.student, k)?;
    let n = bundle.num_frames();
    let (w, h) = (sb.width(), sb.height());
    let (t_inv, s_inv) = (tr.inverse_permutation(), sr.inverse_permutation());

    let t_tape = Tape::new();
    let t_bound = teacher.params.bind_constants(&t_tape);
    let t_out = teacher.forward(&t_tape, &t_bound, &tb.images)?;

    let tape = Tape::new();
    let bound = student.params.bind(&tape);
    let s_out = student.forward(&tape, &bound, &sb.images)?;

    // Token states at every tapped layer, in input frame order.
    let stride = s_out.trunk.final_state.layout.frame_stride();
    let (t_rows, s_rows) = (frame_rows(&t_inv, stride), frame_rows(&s_inv, stride));
    let mut feats = Vec::with_capacity(s_out.trunk.taps.len());
    for (st, tt) in s_out.trunk.taps.iter().zip(&t_out.trunk.taps) {
        let target = tape.constant(tt.tokens.value()).gather_rows(&t_rows);
        feats.push((st.tokens.gather_rows(&s_rows) - target).square().mean());
    }
    let feature = Var::concat_rows(&feats).mean();

    // Cameras: teacher targets in the student's reference frame.
    let t_cams = t_out.cameras.value();
    let t_rows_cam: Vec<Vec<T>> = t_inv.iter().map(|&r| t_cams.row(r).to_vec()).collect();
    let (s_ref, t_ref) = (sr.permutation[0], tr.permutation[0]);
    let targets: Vec<Vec<T>> = if s_ref == t_ref {
        t_rows_cam.iter().map(|r| canonical_row(r)).collect()
    } else {
        let cams = t_rows_cam
            .iter()
            .map(|r| {
                let q = [r[0], r[1], r[2], r[3]];
                let nq = quat_norm(q);
                if !(nq > T::zero()) {
                    return Err(Error::DegenerateQuaternion);
                }
                Ok(Camera {
                    q: q.map(|x| x / nq),
                    t: [r[4], r[5], r[6]],
                    f: [r[7], r[8]],
                    width: w,
                    height: h,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rebase_cameras(&cams, s_ref)?
            .iter()
            .map(|c| c.canonicalized().to_vector().to_vec())
            .collect()
    };
    let s_cams = s_out.cameras.gather_rows(&s_inv);
    let s_val = s_cams.value();
    let signs = Tensor::from_fn(n, 9, |i, c| {
        if c < 4 && s_val.get(i, 0) < T::zero() {
            -T::one()
        } else {
            T::one()
        }
    });
    let target = Tensor::from_fn(n, 9, |i, c| targets[i][c]);
    let camera = (s_cams * tape.constant(signs) - tape.constant(target))
        .abs()
        .mean();

    // Depth on pixels unmasked in both streams.
    let (t_mask, s_mask) = (tr.masked_pixels(w, h), sr.masked_pixels(w, h));
    let plane = w * h;
    let weights = Tensor::from_fn(n * plane, 1, |r, _| {
        let (i, p) = (r / plane, r % plane);
        if t_mask[i][p] || s_mask[i][p] {
            T::zero()
        } else {
            T::one()
        }
    });
    let kept = weights.sum();
    let t_depth = tape
        .constant(t_out.depth.depth.value())
        .gather_rows(&frame_rows(&t_inv, plane));
    let s_depth = s_out.depth.depth.gather_rows(&frame_rows(&s_inv, plane));
    let depth = if kept > T::zero() {
        ((s_depth - t_depth).abs() * tape.constant(weights))
            .sum()
            .scale(T::one() / kept)
    } else {
        tape.scalar(T::zero())
    };

    let total = feature.scale(T::lit(cfg.feature_weight))
        + camera.scale(T::lit(cfg.camera_weight))
        + depth.scale(T::lit(cfg.depth_weight));
    let grads = tape.backward(total)?;
    student.params.accumulate(&bound, &grads);
    let v = |x: Var<'_, T>| x.item().to_f64_lossy();
    Ok(DistillLosses {
        feature: v(feature),
        camera: v(camera),
        depth: v(depth),
        total: v(total),
    })
}
