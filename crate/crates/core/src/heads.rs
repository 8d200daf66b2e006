//! Depth/confidence and camera decoders on top of the trunk tokens.

use rand_chacha::ChaCha8Rng;

use crate::aggregator::{attention_block, init_block, ModelConfig, TokenState, NUM_TAPS};
use crate::autograd::{AttentionMask, Var, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize_quat, quat_norm, Camera};
use crate::params::{normal, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor added to the focal length after the ReLU.
pub const FOCAL_EPS: f64 = 1e-4;

pub fn init_params<T: Scalar>(
    config: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) {
    let c = config.hidden_dim;
    let cd = config.depth_channels;
    let u = config.depth_upsample;
    let taps = NUM_TAPS * c;
    store.insert(
        "depth.proj.w",
        normal(rng, taps, cd, 1.0 / (taps as f64).sqrt()),
    );
    store.insert("depth.proj.b", Tensor::zeros(1, cd));
    for conv in ["conv1", "conv2"] {
        store.insert(
            format!("depth.{conv}.w"),
            normal(rng, 9 * cd, cd, 0.5 / ((9 * cd) as f64).sqrt()),
        );
        store.insert(format!("depth.{conv}.b"), Tensor::zeros(1, cd));
    }
    store.insert("depth.fc1.w", normal(rng, cd, cd, 1.0 / (cd as f64).sqrt()));
    store.insert("depth.fc1.b", Tensor::zeros(1, cd));
    store.insert(
        "depth.fc2.w",
        normal(rng, cd, 2 * u * u, 0.1 / (cd as f64).sqrt()),
    );
    store.insert("depth.fc2.b", Tensor::zeros(1, 2 * u * u));

    for b in 0..config.camera_blocks {
        init_block(store, &format!("camera.block{b}"), config, rng);
    }
    store.insert("camera.ln.g", Tensor::filled(1, c, T::one()));
    store.insert("camera.ln.b", Tensor::zeros(1, c));
    store.insert("camera.fc1.w", normal(rng, c, c, 1.0 / (c as f64).sqrt()));
    store.insert("camera.fc1.b", Tensor::zeros(1, c));
    store.insert("camera.fc2.w", normal(rng, c, 9, 0.1 / (c as f64).sqrt()));
    // Start at the identity rotation, zero translation and unit focal.
    let mut b = Tensor::zeros(1, 9);
    b.set(0, 0, T::one());
    b.set(0, 7, T::one());
    b.set(0, 8, T::one());
    store.insert("camera.fc2.b", b);
}

/// Gather index that rearranges `(frames * h * w) x (planes * u^2)` into
/// `(frames * uh * uw) x planes`: channel `o*u^2 + dy*u + dx` of cell `(i, j)`
/// lands at pixel `(i*u + dy, j*u + dx)`, plane `o`.
pub fn pixel_shuffle_index(frames: usize, h: usize, w: usize, u: usize, planes: usize) -> Vec<u32> {
    let (oh, ow) = (h * u, w * u);
    let src_cols = planes * u * u;
    let mut index = Vec::with_capacity(frames * oh * ow * planes);
    for f in 0..frames {
        for y in 0..oh {
            for x in 0..ow {
                let cell = (f * h + y / u) * w + x / u;
                for o in 0..planes {
                    let ch = o * u * u + (y % u) * u + x % u;
                    index.push((cell * src_cols + ch) as u32);
                }
            }
        }
    }
    index
}

pub fn pixel_shuffle<'t, T: Scalar>(
    x: Var<'t, T>,
    frames: usize,
    h: usize,
    w: usize,
    u: usize,
) -> Var<'t, T> {
    let planes = x.cols() / (u * u);
    assert_eq!(
        x.shape(),
        (frames * h * w, planes * u * u),
        "pixel shuffle input shape"
    );
    x.gather(
        pixel_shuffle_index(frames, h, w, u, planes),
        frames * h * w * u * u,
        planes,
    )
}

/// Row sources for nearest-neighbour upsampling of `(frames*h*w)` cells by `s`.
fn upsample_rows(frames: usize, h: usize, w: usize, s: usize) -> Vec<usize> {
    let (oh, ow) = (h * s, w * s);
    (0..frames)
        .flat_map(|f| (0..oh * ow).map(move |p| (f * h + (p / ow) / s) * w + (p % ow) / s))
        .collect()
}

/// im2col for a 3x3 stride-1 zero-padded convolution over `frames` grids of
/// `h x w` cells with `c` channels: output row per cell, columns ordered
/// (ky, kx, channel).
fn im2col_index(frames: usize, h: usize, w: usize, c: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(frames * h * w * 9 * c);
    for f in 0..frames {
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ky in -1..=1isize {
                    for kx in -1..=1isize {
                        let (sy, sx) = (y + ky, x + kx);
                        let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                        for ch in 0..c {
                            index.push(if inside {
                                (((f * h + sy as usize) * w + sx as usize) * c + ch) as u32
                            } else {
                                ZERO_INDEX
                            });
                        }
                    }
                }
            }
        }
    }
    index
}

fn conv3x3<'t, T: Scalar>(
    x: Var<'t, T>,
    frames: usize,
    h: usize,
    w: usize,
    prefix: &str,
    bound: &Bound<'t, T>,
) -> Var<'t, T> {
    let c = x.cols();
    let cols = x.gather(im2col_index(frames, h, w, c), frames * h * w, 9 * c);
    cols.matmul(bound.get(&format!("{prefix}.w"))) + bound.get(&format!("{prefix}.b"))
}

/// Depth and confidence columns, `(N*H*W) x 1` each, frames stacked.
#[derive(Clone, Copy, Debug)]
pub struct DepthOutput<'t, T> {
    pub depth: Var<'t, T>,
    pub confidence: Var<'t, T>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl<'t, T: Scalar> DepthOutput<'t, T> {
    pub fn frame_depth(&self, i: usize) -> Var<'t, T> {
        let hw = self.height * self.width;
        self.depth.slice_rows(i * hw, hw)
    }

    pub fn frame_confidence(&self, i: usize) -> Var<'t, T> {
        let hw = self.height * self.width;
        self.confidence.slice_rows(i * hw, hw)
    }

    pub fn to_predictions(&self) -> Vec<DepthPrediction<T>> {
        let (d, c) = (self.depth.value(), self.confidence.value());
        let hw = self.height * self.width;
        (0..self.frames)
            .map(|i| DepthPrediction {
                width: self.width,
                height: self.height,
                depth: d.data()[i * hw..(i + 1) * hw].to_vec(),
                confidence: c.data()[i * hw..(i + 1) * hw].to_vec(),
            })
            .collect()
    }
}

/// Maps raw two-plane logits to (depth, confidence).
pub fn depth_activation<'t, T: Scalar>(raw: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
    let depth = raw.slice_cols(0, 1).softplus();
    let confidence = raw.slice_cols(1, 1).softplus().add_scalar(T::one());
    (depth, confidence)
}

/// Fuses the tapped token grids and decodes a full-resolution depth and
/// confidence map per frame.
pub fn depth_head<'t, T: Scalar>(
    taps: &[TokenState<'t, T>],
    config: &ModelConfig,
    bound: &Bound<'t, T>,
) -> Result<DepthOutput<'t, T>> {
    if taps.len() != NUM_TAPS {
        return Err(Error::Shape(format!(
            "depth head needs {NUM_TAPS} taps, got {}",
            taps.len()
        )));
    }
    let layout = taps[0].layout;
    if taps.iter().any(|t| t.layout != layout) || layout.image_tokens != config.image_tokens() {
        return Err(Error::Shape(
            "tap layouts disagree with the model config".into(),
        ));
    }
    let n = layout.num_frames;
    let (gh, gw) = config.grid();
    let u = config.depth_upsample;
    let s = config.patch_size / u;
    let (h, w) = (gh * s, gw * s);
    let fused: Vec<_> = taps.iter().map(|t| t.image_tokens()).collect();
    let x = Var::concat_cols(&fused).matmul(bound.get("depth.proj.w")) + bound.get("depth.proj.b");
    let x = if s == 1 {
        x
    } else {
        x.gather_rows(&upsample_rows(n, gh, gw, s))
    };
    let y = conv3x3(x, n, h, w, "depth.conv1", bound).gelu();
    let x = x + conv3x3(y, n, h, w, "depth.conv2", bound);
    let x = (x.matmul(bound.get("depth.fc1.w")) + bound.get("depth.fc1.b")).gelu();
    let x = x.matmul(bound.get("depth.fc2.w")) + bound.get("depth.fc2.b");
    let raw = pixel_shuffle(x, n, h, w, u);
    let (depth, confidence) = depth_activation(raw);
    Ok(DepthOutput {
        depth,
        confidence,
        frames: n,
        height: h * u,
        width: w * u,
    })
}

/// Maps raw camera outputs `N x 9` to `(q, t, f)` with `f = relu(raw) + eps`.
pub fn camera_activation<'t, T: Scalar>(raw: Var<'t, T>) -> Var<'t, T> {
    let qt = raw.slice_cols(0, 7);
    let f = raw.slice_cols(7, 2).relu().add_scalar(T::lit(FOCAL_EPS));
    Var::concat_cols(&[qt, f])
}

/// Camera parameters per frame, `N x 9`, from a small transformer over every
/// frame's camera token and registers.
pub fn camera_head<'t, T: Scalar>(
    state: &TokenState<'t, T>,
    config: &ModelConfig,
    bound: &Bound<'t, T>,
) -> Var<'t, T> {
    let l = state.layout;
    let group = l.num_registers + 1;
    let mut x = state.tokens.gather_rows(&l.special_rows());
    let mask = AttentionMask::Global(vec![group; l.num_frames]);
    for b in 0..config.camera_blocks {
        x = attention_block(
            x,
            &format!("camera.block{b}"),
            bound,
            config.num_heads,
            &mask,
        );
    }
    let cams: Vec<usize> = (0..l.num_frames).map(|i| i * group).collect();
    let h = x.gather_rows(&cams).layer_norm_rows(T::lit(1e-6)) * bound.get("camera.ln.g")
        + bound.get("camera.ln.b");
    let h = (h.matmul(bound.get("camera.fc1.w")) + bound.get("camera.fc1.b")).gelu();
    camera_activation(h.matmul(bound.get("camera.fc2.w")) + bound.get("camera.fc2.b"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrediction<T> {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<T>,
    pub confidence: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPrediction<T> {
    /// Activated 9-vector `(q, t, f)`; `q` is not yet canonicalized.
    pub raw: [T; 9],
    /// Zero quaternion: no rotation can be recovered.
    pub degenerate: bool,
}

impl<T: Scalar> CameraPrediction<T> {
    pub fn from_rows(cameras: &Tensor<T>) -> Vec<Self> {
        (0..cameras.rows())
            .map(|i| {
                let raw: [T; 9] = std::array::from_fn(|k| cameras.get(i, k));
                let degenerate = quat_norm([raw[0], raw[1], raw[2], raw[3]]) == T::zero();
                Self { raw, degenerate }
            })
            .collect()
    }

    /// Camera with a unit, sign-canonical quaternion.
    pub fn camera(&self, width: usize, height: usize) -> Result<Camera<T>> {
        if self.degenerate {
            return Err(Error::DegenerateQuaternion);
        }
        let r = self.raw;
        let n = quat_norm([r[0], r[1], r[2], r[3]]);
        let q = canonicalize_quat([r[0] / n, r[1] / n, r[2] / n, r[3] / n]);
        Ok(Camera {
            q,
            t: [r[4], r[5], r[6]],
            f: [r[7], r[8]],
            width,
            height,
        })
    }
}
