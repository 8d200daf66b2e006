//! Pinhole cameras, depth/point maps and the operations that move between them.
//!
//! Conventions:
//! - Extrinsics map the reference frame into camera `i`: `X_i = R(q_i) X_ref + t_i`.
//! - Pixel `(u, v)` has integer coordinates (column, row); the principal point
//!   is the image center `(W/2, H/2)`.
//! - `f` holds focal lengths normalized by half the image width/height, so the
//!   pixel focal lengths are `fx * W/2` and `fy * H/2`.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::scalar::Scalar;

/// Hamilton product `a * b` for `(w, x, y, z)` quaternions.
pub fn quat_mul<T: Scalar>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj<T: Scalar>(q: [T; 4]) -> [T; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Flips the sign so that `w >= 0`.
pub fn canonicalize_quat<T: Scalar>(q: [T; 4]) -> [T; 4] {
    if q[0] < T::zero() {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn quat_norm<T: Scalar>(q: [T; 4]) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit quaternion to rotation matrix. Rejects quaternions whose norm is off by
/// more than `1e-6`.
pub fn quat_to_rotmat<T: Scalar>(q: [T; 4]) -> Result<Mat3<T>> {
    let n = quat_norm(q);
    if (n - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::NonUnitQuaternion {
            norm: n.to_f64_lossy(),
        });
    }
    Ok(rotmat_unchecked(q))
}

fn rotmat_unchecked<T: Scalar>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Rotation matrix to a canonical (`w >= 0`) unit quaternion.
pub fn rotmat_to_quat<T: Scalar>(r: &Mat3<T>) -> [T; 4] {
    let one = T::one();
    let quarter = T::lit(0.25);
    let tr = r[0][0] + r[1][1] + r[2][2];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * T::lit(2.0);
        [
            quarter * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (one + r[0][0] - r[1][1] - r[2][2]).sqrt() * T::lit(2.0);
        [
            (r[2][1] - r[1][2]) / s,
            quarter * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (one + r[1][1] - r[0][0] - r[2][2]).sqrt() * T::lit(2.0);
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            quarter * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (one + r[2][2] - r[0][0] - r[1][1]).sqrt() * T::lit(2.0);
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            quarter * s,
        ]
    };
    let n = quat_norm(q);
    canonicalize_quat([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Camera pose and intrinsics: the 9-vector `(q, t, f)` plus image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub q: [T; 4],
    pub t: [T; 3],
    pub f: [T; 2],
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Camera<T> {
    pub fn identity(width: usize, height: usize, f: [T; 2]) -> Self {
        Self {
            q: [T::one(), T::zero(), T::zero(), T::zero()],
            t: [T::zero(); 3],
            f,
            width,
            height,
        }
    }

    pub fn from_vector(v: [T; 9], width: usize, height: usize) -> Self {
        Self {
            q: [v[0], v[1], v[2], v[3]],
            t: [v[4], v[5], v[6]],
            f: [v[7], v[8]],
            width,
            height,
        }
    }

    pub fn to_vector(&self) -> [T; 9] {
        let (q, t, f) = (self.q, self.t, self.f);
        [q[0], q[1], q[2], q[3], t[0], t[1], t[2], f[0], f[1]]
    }

    /// Camera at `center` looking at `target`; `down` hints the world direction
    /// that should map to increasing image rows.
    pub fn look_at(
        center: Vec3<T>,
        target: Vec3<T>,
        down: Vec3<T>,
        f: [T; 2],
        width: usize,
        height: usize,
    ) -> Self {
        let z = linalg::sub(target, center);
        let z = linalg::scale(z, T::one() / linalg::norm(z));
        let y = linalg::sub(down, linalg::scale(z, linalg::dot(down, z)));
        let y = linalg::scale(y, T::one() / linalg::norm(y));
        let x = linalg::cross(y, z);
        let q = rotmat_to_quat(&[x, y, z]);
        let r = rotmat_unchecked(q);
        let t = linalg::scale(linalg::mat_vec(&r, center), -T::one());
        Self {
            q,
            t,
            f,
            width,
            height,
        }
    }

    pub fn canonicalized(&self) -> Self {
        Self {
            q: canonicalize_quat(self.q),
            ..self.clone()
        }
    }

    pub fn rotation(&self) -> Result<Mat3<T>> {
        quat_to_rotmat(self.q)
    }

    pub fn check_focal(&self) -> Result<()> {
        if self.f[0] > T::zero()
            && self.f[1] > T::zero()
            && self.f[0].is_finite()
            && self.f[1].is_finite()
        {
            Ok(())
        } else {
            Err(Error::NonPositiveFocal(
                self.f[0].to_f64_lossy(),
                self.f[1].to_f64_lossy(),
            ))
        }
    }

    /// Pixel focal lengths and principal point `(fx, fy, cx, cy)`.
    pub fn pinhole(&self) -> (T, T, T, T) {
        let hw = T::from_usize_lossy(self.width) * T::lit(0.5);
        let hh = T::from_usize_lossy(self.height) * T::lit(0.5);
        (self.f[0] * hw, self.f[1] * hh, hw, hh)
    }

    pub fn intrinsics(&self) -> Mat3<T> {
        let (fx, fy, cx, cy) = self.pinhole();
        let (z, o) = (T::zero(), T::one());
        [[fx, z, cx], [z, fy, cy], [z, z, o]]
    }

    /// Camera center in the reference frame, `-R^T t`.
    pub fn center(&self) -> Result<Vec3<T>> {
        let r = self.rotation()?;
        Ok(linalg::scale(linalg::mat_t_vec(&r, self.t), -T::one()))
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        Camera {
            q: self.q.map(c),
            t: self.t.map(c),
            f: self.f.map(c),
            width: self.width,
            height: self.height,
        }
    }

    /// Horizontal and vertical field of view in degrees.
    pub fn fov_degrees(&self) -> (T, T) {
        let two = T::lit(2.0);
        (
            (T::one() / self.f[0]).atan() * two * T::lit(180.0) / T::PI(),
            (T::one() / self.f[1]).atan() * two * T::lit(180.0) / T::PI(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "depth map {}x{} with {} values / {} flags",
                width,
                height,
                values.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        let i = v * self.width + u;
        self.valid[i] && self.values[i].is_finite()
    }

    pub fn valid_count(&self) -> usize {
        (0..self.values.len())
            .filter(|&i| self.valid[i] && self.values[i].is_finite())
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMap<T> {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3<T>>,
    pub valid: Vec<bool>,
}

/// RGB image stored planar (`3 x H x W`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); 3 * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> T {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, x: T) {
        self.data[(c * self.height + v) * self.width + u] = x;
    }
}

/// One sequence: images, ground-truth cameras and depths. Unlabeled bundles
/// carry empty `cameras`/`depths`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle<T> {
    pub images: Vec<Image<T>>,
    pub cameras: Vec<Camera<T>>,
    pub depths: Vec<DepthMap<T>>,
    /// Per-frame masks of pixels on moving objects.
    pub dynamic: Option<Vec<Vec<bool>>>,
    /// Per-frame confidence maps (predictions only).
    pub confidence: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> SceneBundle<T> {
    pub fn num_frames(&self) -> usize {
        self.images.len()
    }

    pub fn width(&self) -> usize {
        self.images.first().map_or(0, |i| i.width)
    }

    pub fn height(&self) -> usize {
        self.images.first().map_or(0, |i| i.height)
    }

    pub fn is_labeled(&self) -> bool {
        !self.cameras.is_empty()
    }

    pub fn is_dynamic(&self, frame: usize, pixel: usize) -> bool {
        self.dynamic.as_ref().is_some_and(|d| d[frame][pixel])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n == 0 {
            return Err(Error::Shape("bundle has no frames".into()));
        }
        let (w, h) = (self.width(), self.height());
        for (i, img) in self.images.iter().enumerate() {
            if img.width != w || img.height != h || img.data.len() != 3 * w * h {
                return Err(Error::Shape(format!("image {i} is not 3x{h}x{w}")));
            }
        }
        let labeled = !self.cameras.is_empty() || !self.depths.is_empty();
        if labeled && (self.cameras.len() != n || self.depths.len() != n) {
            return Err(Error::Shape(format!(
                "{} cameras and {} depth maps for {n} frames",
                self.cameras.len(),
                self.depths.len()
            )));
        }
        for (i, d) in self.depths.iter().enumerate() {
            if d.width != w || d.height != h || d.values.len() != w * h || d.valid.len() != w * h {
                return Err(Error::Shape(format!("depth map {i} is not {h}x{w}")));
            }
        }
        for c in &self.cameras {
            if c.width != w || c.height != h {
                return Err(Error::Shape(
                    "camera image size disagrees with images".into(),
                ));
            }
        }
        if let Some(dy) = &self.dynamic {
            if dy.len() != n || dy.iter().any(|m| m.len() != w * h) {
                return Err(Error::Shape("dynamic masks do not match frames".into()));
            }
        }
        if let Some(c) = &self.confidence {
            if c.len() != n || c.iter().any(|m| m.len() != w * h) {
                return Err(Error::Shape("confidence maps do not match frames".into()));
            }
        }
        Ok(())
    }

    /// New bundle with frames in the order given by `order`.
    pub fn select_frames(&self, order: &[usize]) -> Self {
        Self {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            cameras: if self.cameras.is_empty() {
                vec![]
            } else {
                order.iter().map(|&i| self.cameras[i].clone()).collect()
            },
            depths: if self.depths.is_empty() {
                vec![]
            } else {
                order.iter().map(|&i| self.depths[i].clone()).collect()
            },
            dynamic: self
                .dynamic
                .as_ref()
                .map(|d| order.iter().map(|&i| d[i].clone()).collect()),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| order.iter().map(|&i| c[i].clone()).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SceneBundle<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        SceneBundle {
            images: self
                .images
                .iter()
                .map(|i| Image {
                    width: i.width,
                    height: i.height,
                    data: i.data.iter().map(|&x| c(x)).collect(),
                })
                .collect(),
            cameras: self.cameras.iter().map(Camera::cast).collect(),
            depths: self
                .depths
                .iter()
                .map(|d| DepthMap {
                    width: d.width,
                    height: d.height,
                    values: d.values.iter().map(|&x| c(x)).collect(),
                    valid: d.valid.clone(),
                })
                .collect(),
            dynamic: self.dynamic.clone(),
            confidence: self.confidence.as_ref().map(|cs| {
                cs.iter()
                    .map(|m| m.iter().map(|&x| c(x)).collect())
                    .collect()
            }),
        }
    }
}

/// Camera-frame ray direction (z = 1) through pixel `(u, v)`.
#[inline]
pub fn pixel_ray<T: Scalar>(u: usize, v: usize, cam: &Camera<T>) -> Vec3<T> {
    let (fx, fy, cx, cy) = cam.pinhole();
    [
        (T::from_usize_lossy(u) - cx) / fx,
        (T::from_usize_lossy(v) - cy) / fy,
        T::one(),
    ]
}

/// Back-projects a depth map into the reference frame.
pub fn unproject<T: Scalar>(depth: &DepthMap<T>, cam: &Camera<T>) -> Result<PointMap<T>> {
    cam.check_focal()?;
    let r = cam.rotation()?;
    let (w, h) = (depth.width, depth.height);
    let mut points = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let ok = depth.is_valid(u, v);
            let d = depth.get(u, v);
            let ray = pixel_ray(u, v, cam);
            let xc = linalg::scale(ray, d);
            points.push(if ok {
                linalg::mat_t_vec(&r, linalg::sub(xc, cam.t))
            } else {
                [T::zero(); 3]
            });
            valid.push(ok);
        }
    }
    Ok(PointMap {
        width: w,
        height: h,
        points,
        valid,
    })
}

/// Result of projecting one reference-frame point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    /// Depth along the camera's optical axis.
    pub depth: T,
    /// Positive depth and the nearest pixel lies inside the image.
    pub in_frustum: bool,
}

impl<T: Scalar> Projection<T> {
    /// Nearest integer pixel, if inside the image and in front of the camera.
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !(self.depth > T::zero()) {
            return None;
        }
        let (u, v) = (
            (self.u + T::lit(0.5)).floor(),
            (self.v + T::lit(0.5)).floor(),
        );
        if u < T::zero() || v < T::zero() {
            return None;
        }
        let (u, v) = (u.to_usize()?, v.to_usize()?);
        (u < width && v < height).then_some((u, v))
    }
}

/// Projects a point given a precomputed rotation.
#[inline]
pub fn project_point_with<T: Scalar>(x: Vec3<T>, r: &Mat3<T>, cam: &Camera<T>) -> Projection<T> {
    let xc = linalg::add(linalg::mat_vec(r, x), cam.t);
    let (fx, fy, cx, cy) = cam.pinhole();
    let u = fx * xc[0] / xc[2] + cx;
    let v = fy * xc[1] / xc[2] + cy;
    let mut p = Projection {
        u,
        v,
        depth: xc[2],
        in_frustum: false,
    };
    p.in_frustum = p.pixel(cam.width, cam.height).is_some();
    p
}

pub fn project_point<T: Scalar>(x: Vec3<T>, cam: &Camera<T>) -> Result<Projection<T>> {
    cam.check_focal()?;
    Ok(project_point_with(x, &cam.rotation()?, cam))
}

/// Projects every point of a point map; invalid points yield `None`.
pub fn project<T: Scalar>(
    points: &PointMap<T>,
    cam: &Camera<T>,
) -> Result<Vec<Option<Projection<T>>>> {
    cam.check_focal()?;
    let r = cam.rotation()?;
    Ok(points
        .points
        .iter()
        .zip(&points.valid)
        .map(|(&x, &ok)| ok.then(|| project_point_with(x, &r, cam)))
        .collect())
}

/// Re-expresses cameras so that `cameras[reference]` becomes the identity pose.
pub fn rebase_cameras<T: Scalar>(
    cameras: &[Camera<T>],
    reference: usize,
) -> Result<Vec<Camera<T>>> {
    let q0 = cameras[reference].q;
    let n0 = quat_norm(q0);
    if n0 == T::zero() {
        return Err(Error::DegenerateQuaternion);
    }
    let q0 = [q0[0] / n0, q0[1] / n0, q0[2] / n0, q0[3] / n0];
    let t0 = cameras[reference].t;
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == reference {
                return Ok(Camera::identity(c.width, c.height, c.f));
            }
            let q = canonicalize_quat(quat_mul(c.q, quat_conj(q0)));
            let r = quat_to_rotmat(q)?;
            let t = linalg::sub(c.t, linalg::mat_vec(&r, t0));
            Ok(Camera { q, t, ..c.clone() })
        })
        .collect()
}

/// Mean distance of all valid (reference-frame) points to the origin.
fn mean_point_distance<T: Scalar>(
    bundle: &SceneBundle<T>,
    cameras: &[Camera<T>],
) -> Result<(T, usize)> {
    let mut total = T::zero();
    let mut count = 0usize;
    for (d, c) in bundle.depths.iter().zip(cameras) {
        let pm = unproject(d, c)?;
        for (p, &ok) in pm.points.iter().zip(&pm.valid) {
            if ok {
                total += linalg::norm(*p);
                count += 1;
            }
        }
    }
    Ok((total, count))
}

/// Moves everything into camera 0's frame and rescales so that the mean
/// distance of valid points to the origin is one.
pub fn normalize_scene<T: Scalar>(bundle: &SceneBundle<T>) -> Result<SceneBundle<T>> {
    if !bundle.is_labeled() {
        return Err(Error::InsufficientData(
            "normalization needs cameras and depths".into(),
        ));
    }
    let cameras = rebase_cameras(&bundle.cameras, 0)?;
    let (total, count) = mean_point_distance(bundle, &cameras)?;
    if count == 0 {
        return Err(Error::NoValidDepth);
    }
    let scale = total / T::from_usize_lossy(count);
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::InsufficientData(
            "all valid points sit at the reference origin".into(),
        ));
    }
    let mut out = bundle.clone();
    out.cameras = cameras
        .into_iter()
        .map(|c| Camera {
            t: c.t.map(|x| x / scale),
            ..c
        })
        .collect();
    for d in &mut out.depths {
        for v in &mut d.values {
            *v = *v / scale;
        }
    }
    Ok(out)
}

/// Fundamental matrix with `x_b^T F x_a = 0` for homogeneous pixels.
pub fn fundamental_matrix<T: Scalar>(cam_a: &Camera<T>, cam_b: &Camera<T>) -> Result<Mat3<T>> {
    cam_a.check_focal()?;
    cam_b.check_focal()?;
    let (ra, rb) = (cam_a.rotation()?, cam_b.rotation()?);
    let r = linalg::mat_mul(&rb, &linalg::transpose(&ra));
    let t = linalg::sub(cam_b.t, linalg::mat_vec(&r, cam_a.t));
    let scale = linalg::norm(cam_a.t) + linalg::norm(cam_b.t) + T::one();
    if linalg::norm(t) <= T::lit(1e-9) * scale {
        return Err(Error::DegenerateEpipolar);
    }
    let e = linalg::mat_mul(&linalg::skew(t), &r);
    let ka_inv = inverse_intrinsics(cam_a);
    let kb_inv = inverse_intrinsics(cam_b);
    Ok(linalg::mat_mul(
        &linalg::transpose(&kb_inv),
        &linalg::mat_mul(&e, &ka_inv),
    ))
}

fn inverse_intrinsics<T: Scalar>(cam: &Camera<T>) -> Mat3<T> {
    let (fx, fy, cx, cy) = cam.pinhole();
    let (z, o) = (T::zero(), T::one());
    [[o / fx, z, -cx / fx], [z, o / fy, -cy / fy], [z, z, o]]
}

/// First-order geometric (Sampson) epipolar residual in squared pixels.
pub fn sampson_distance<T: Scalar>(
    pixel_a: [T; 2],
    pixel_b: [T; 2],
    cam_a: &Camera<T>,
    cam_b: &Camera<T>,
) -> Result<T> {
    let f = fundamental_matrix(cam_a, cam_b)?;
    Ok(sampson_with(&f, pixel_a, pixel_b))
}

#[inline]
pub fn sampson_with<T: Scalar>(f: &Mat3<T>, pixel_a: [T; 2], pixel_b: [T; 2]) -> T {
    let xa = [pixel_a[0], pixel_a[1], T::one()];
    let xb = [pixel_b[0], pixel_b[1], T::one()];
    let fxa = linalg::mat_vec(f, xa);
    let ftxb = linalg::mat_t_vec(f, xb);
    let num = linalg::dot(xb, fxa);
    let den = fxa[0] * fxa[0] + fxa[1] * fxa[1] + ftxb[0] * ftxb[0] + ftxb[1] * ftxb[1];
    num * num / den
}
