//! Ray-cast synthetic scenes with exact cameras, depths and dynamic masks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray, Camera, DepthMap, Image, SceneBundle};
use crate::linalg::{self, Vec3};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Fronto-parallel textured plane seen by cameras dollying along the
    /// optical axis with focal length proportional to distance, so every
    /// view covers the same footprint.
    Plane,
    /// Cameras inside a textured box.
    BoxRoom,
    /// Cameras on a 90 degree arc around a textured sphere.
    Orbit,
    /// Box room with a sphere that moves between frames.
    DynamicTranslatingObject,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Plane,
        SceneKind::BoxRoom,
        SceneKind::Orbit,
        SceneKind::DynamicTranslatingObject,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Plane => "plane",
            SceneKind::BoxRoom => "box-room",
            SceneKind::Orbit => "orbit",
            SceneKind::DynamicTranslatingObject => "dynamic-translating-object",
        }
    }

    pub fn default_frames(self) -> usize {
        match self {
            SceneKind::Orbit => 8,
            _ => 4,
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene kind `{s}` (expected plane, box-room, orbit, dynamic-translating-object)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Normalized focal length (pixels per half image size).
    pub focal: f64,
}

impl SyntheticSpec {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            frames: kind.default_frames(),
            width: 64,
            height: 64,
            focal: 1.2,
        }
    }
}

/// Sum of two oriented sinusoids per channel over 2-D surface coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    base: [f64; 3],
    waves: [[f64; 4]; 6],
}

impl Texture {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
        let waves = std::array::from_fn(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.gen_range(3.0..12.0);
            [
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.08..0.2),
            ]
        });
        Self { base, waves }
    }

    pub fn color(&self, s: f64, t: f64) -> [f64; 3] {
        std::array::from_fn(|c| {
            let mut x = self.base[c];
            for w in &self.waves[2 * c..2 * c + 2] {
                x += w[3] * (w[0] * s + w[1] * t + w[2]).sin();
            }
            x.clamp(0.0, 1.0)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `origin` spanned by `u`, `v` (unit, orthogonal).
    Plane {
        origin: Vec3<f64>,
        u: Vec3<f64>,
        v: Vec3<f64>,
    },
    Sphere {
        center: Vec3<f64>,
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Displacement per frame index; non-zero marks the primitive dynamic.
    pub velocity: Vec3<f64>,
}

impl Primitive {
    fn is_dynamic(&self) -> bool {
        self.velocity != [0.0; 3]
    }

    /// Nearest positive ray parameter and the surface colour there.
    fn intersect(
        &self,
        origin: Vec3<f64>,
        dir: Vec3<f64>,
        frame: usize,
    ) -> Option<(f64, [f64; 3])> {
        let shift = linalg::scale(self.velocity, frame as f64);
        match &self.shape {
            Shape::Plane { origin: p, u, v } => {
                let p = linalg::add(*p, shift);
                let n = linalg::cross(*u, *v);
                let denom = linalg::dot(n, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = linalg::dot(n, linalg::sub(p, origin)) / denom;
                if s <= 1e-9 {
                    return None;
                }
                let x = linalg::sub(linalg::add(origin, linalg::scale(dir, s)), p);
                Some((
                    s,
                    self.texture.color(linalg::dot(x, *u), linalg::dot(x, *v)),
                ))
            }
            Shape::Sphere { center, radius } => {
                let c = linalg::add(*center, shift);
                let oc = linalg::sub(origin, c);
                let a = linalg::dot(dir, dir);
                let b = linalg::dot(oc, dir);
                let disc = b * b - a * (linalg::dot(oc, oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let s = [(-b - sq) / a, (-b + sq) / a]
                    .into_iter()
                    .find(|&s| s > 1e-9)?;
                let x = linalg::sub(linalg::add(origin, linalg::scale(dir, s)), c);
                let theta = (x[1] / radius).clamp(-1.0, 1.0).acos();
                let phi = x[2].atan2(x[0]);
                Some((s, self.texture.color(theta * radius, phi * radius)))
            }
        }
    }
}

/// Renders `primitives` from every camera. Pixels hitting nothing are black
/// with invalid depth.
pub fn render<T: Scalar>(
    primitives: &[Primitive],
    cameras: &[Camera<f64>],
) -> Result<SceneBundle<T>> {
    let (w, h) = (cameras[0].width, cameras[0].height);
    let any_dynamic = primitives.iter().any(Primitive::is_dynamic);
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    let mut dynamic = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let r = cam.rotation()?;
        let center = cam.center()?;
        let mut img = Image::<T>::new(w, h);
        let mut values = vec![T::zero(); w * h];
        let mut valid = vec![false; w * h];
        let mut dyn_mask = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let dir = linalg::mat_t_vec(&r, pixel_ray(u, v, cam));
                let mut best: Option<(f64, [f64; 3], bool)> = None;
                for p in primitives {
                    if let Some((s, col)) = p.intersect(center, dir, i) {
                        if best.map_or(true, |b| s < b.0) {
                            best = Some((s, col, p.is_dynamic()));
                        }
                    }
                }
                if let Some((s, col, is_dyn)) = best {
                    let px = v * w + u;
                    values[px] = T::lit(s);
                    valid[px] = true;
                    dyn_mask[px] = is_dyn;
                    for (c, &x) in col.iter().enumerate() {
                        img.set(c, u, v, T::lit(x));
                    }
                }
            }
        }
        images.push(img);
        depths.push(DepthMap::new(w, h, values, valid)?);
        dynamic.push(dyn_mask);
    }
    Ok(SceneBundle {
        images,
        cameras: cameras.iter().map(|c| c.cast()).collect(),
        depths,
        dynamic: any_dynamic.then_some(dynamic),
        confidence: None,
    })
}

fn room(rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let (x, y, z) = (2.5, 1.5, 2.5);
    let e = |i: usize| {
        let mut a = [0.0; 3];
        a[i] = 1.0;
        a
    };
    let walls = [
        ([0.0, 0.0, z], e(1), e(0)),
        ([0.0, 0.0, -z], e(0), e(1)),
        ([x, 0.0, 0.0], e(2), e(1)),
        ([-x, 0.0, 0.0], e(1), e(2)),
        ([0.0, y, 0.0], e(0), e(2)),
        ([0.0, -y, 0.0], e(2), e(0)),
    ];
    walls
        .into_iter()
        .map(|(origin, u, v)| Primitive {
            shape: Shape::Plane { origin, u, v },
            texture: Texture::random(rng),
            velocity: [0.0; 3],
        })
        .collect()
}

/// Generates one scene; identical `(spec, seed)` give identical bundles.
pub fn make_synthetic<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<SceneBundle<T>> {
    if spec.frames == 0 || spec.width == 0 || spec.height == 0 || !(spec.focal > 0.0) {
        return Err(Error::Config(
            "synthetic scenes need frames, a positive size and a positive focal".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, f) = (spec.width, spec.height, spec.focal);
    let n = spec.frames;
    let down = [0.0, 1.0, 0.0];
    let (primitives, cameras): (Vec<Primitive>, Vec<Camera<f64>>) = match spec.kind {
        SceneKind::Plane => {
            let plane = Primitive {
                shape: Shape::Plane {
                    origin: [0.0, 0.0, 0.0],
                    u: [1.0, 0.0, 0.0],
                    v: [0.0, 1.0, 0.0],
                },
                texture: Texture::random(&mut rng),
                velocity: [0.0; 3],
            };
            let base: f64 = rng.gen_range(1.5..2.5);
            let cams = (0..n)
                .map(|i| {
                    let d = base * (1.0 + 0.15 * i as f64);
                    let fi = f * d / base;
                    Camera::look_at([0.0, 0.0, -d], [0.0, 0.0, 0.0], down, [fi, fi], w, h)
                })
                .collect();
            (vec![plane], cams)
        }
        SceneKind::BoxRoom | SceneKind::DynamicTranslatingObject => {
            let mut prims = room(&mut rng);
            let start: f64 = rng.gen_range(-0.4..0.4);
            let cams = (0..n)
                .map(|i| {
                    let s = i as f64 / n.max(2) as f64;
                    let center = [start + 0.6 * s, rng.gen_range(-0.1..0.1), -0.8 + 0.3 * s];
                    let target = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2), 2.5];
                    Camera::look_at(center, target, down, [f, f], w, h)
                })
                .collect();
            if spec.kind == SceneKind::DynamicTranslatingObject {
                prims.push(Primitive {
                    shape: Shape::Sphere {
                        center: [-0.5, 0.1, 1.2],
                        radius: 0.45,
                    },
                    texture: Texture::random(&mut rng),
                    velocity: [0.25, 0.0, 0.0],
                });
            }
            (prims, cams)
        }
        SceneKind::Orbit => {
            let sphere = Primitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 0.6,
                },
                texture: Texture::random(&mut rng),
                velocity: [0.0; 3],
            };
            let ground = Primitive {
                shape: Shape::Plane {
                    origin: [0.0, 0.6, 0.0],
                    u: [0.0, 0.0, 1.0],
                    v: [1.0, 0.0, 0.0],
                },
                texture: Texture::random(&mut rng),
                velocity: [0.0; 3],
            };
            let radius = 2.5;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let cams = (0..n)
                .map(|i| {
                    let a = phase + std::f64::consts::FRAC_PI_2 * i as f64 / (n.max(2) - 1) as f64;
                    let center = [radius * a.cos(), -0.3, radius * a.sin()];
                    Camera::look_at(center, [0.0; 3], down, [f, f], w, h)
                })
                .collect();
            (vec![sphere, ground], cams)
        }
    };
    render(&primitives, &cameras)
}
