//! Tokenization and the alternating frame/global attention trunk, with
//! register attention replacing a fraction of the global layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::params::{normal, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const QK_EPS: f64 = 1e-12;
/// Number of intermediate layers exposed to the heads.
pub const NUM_TAPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub num_registers: usize,
    /// Fraction of global layers replaced by register attention.
    pub register_attention_ratio: f64,
    pub height: usize,
    pub width: usize,
    pub mlp_ratio: usize,
    /// Pixel-shuffle factor `u` of the depth head.
    pub depth_upsample: usize,
    pub depth_channels: usize,
    pub camera_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            hidden_dim: 64,
            num_heads: 4,
            patch_size: 16,
            num_registers: 16,
            register_attention_ratio: 0.25,
            height: 64,
            width: 64,
            mlp_ratio: 4,
            depth_upsample: 4,
            depth_channels: 32,
            camera_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0
            || self.num_heads == 0
            || self.hidden_dim == 0
            || self.patch_size == 0
        {
            return bad("blocks, heads, hidden size and patch size must be positive".into());
        }
        if self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
            || self.height == 0
            || self.width == 0
        {
            return bad(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return bad(
                "hidden size must be divisible by 4 for the 2-D positional encoding".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.register_attention_ratio) {
            return bad(format!(
                "register attention ratio {} outside [0, 1]",
                self.register_attention_ratio
            ));
        }
        if self.num_registers == 0 && self.register_attention_ratio > 0.0 {
            return bad("register attention needs at least one register".into());
        }
        if self.depth_upsample == 0 || self.patch_size % self.depth_upsample != 0 {
            return bad(format!(
                "patch size {} is not divisible by depth upsample {}",
                self.patch_size, self.depth_upsample
            ));
        }
        if self.mlp_ratio == 0 || self.depth_channels == 0 {
            return bad("mlp ratio and depth channels must be positive".into());
        }
        Ok(())
    }

    /// Token grid `(H', W')`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn image_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Whether block `k` uses register attention instead of global attention.
    pub fn is_register_block(&self, k: usize) -> bool {
        register_block(self.register_attention_ratio, k)
    }

    /// Indices (over all `2 * num_blocks` attention layers) of the tapped layers.
    pub fn tap_layers(&self) -> [usize; NUM_TAPS] {
        tap_layers(2 * self.num_blocks)
    }

    pub fn layout(&self, num_frames: usize) -> TokenLayout {
        TokenLayout {
            num_frames,
            image_tokens: self.image_tokens(),
            num_registers: self.num_registers,
        }
    }

    pub fn flops_query(&self, num_frames: usize) -> FlopsQuery {
        FlopsQuery {
            frames: num_frames,
            image_tokens: self.image_tokens(),
            blocks: self.num_blocks,
            hidden: self.hidden_dim,
            heads: self.num_heads,
            registers: self.num_registers,
            ratio: self.register_attention_ratio,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
        }
    }
}

fn register_block(ratio: f64, k: usize) -> bool {
    if ratio <= 0.0 {
        return false;
    }
    let period = (1.0 / ratio).ceil() as usize;
    (k + 1) % period.max(1) == 0
}

fn tap_layers(layers: usize) -> [usize; NUM_TAPS] {
    std::array::from_fn(|k| {
        let pos = ((k + 1) as f64 * layers as f64 / NUM_TAPS as f64).round() as usize;
        pos.clamp(1, layers) - 1
    })
}

/// Row layout of a token matrix: frame-major, each frame ordered as
/// (image tokens, camera token, registers).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub num_frames: usize,
    pub image_tokens: usize,
    pub num_registers: usize,
}

impl TokenLayout {
    pub fn frame_stride(&self) -> usize {
        self.image_tokens + 1 + self.num_registers
    }

    pub fn total(&self) -> usize {
        self.num_frames * self.frame_stride()
    }

    pub fn frame_start(&self, frame: usize) -> usize {
        frame * self.frame_stride()
    }

    pub fn camera_row(&self, frame: usize) -> usize {
        self.frame_start(frame) + self.image_tokens
    }

    pub fn image_rows(&self) -> Vec<usize> {
        (0..self.num_frames)
            .flat_map(|i| (0..self.image_tokens).map(move |j| self.frame_start(i) + j))
            .collect()
    }

    pub fn register_rows(&self) -> Vec<usize> {
        (0..self.num_frames)
            .flat_map(|i| (0..self.num_registers).map(move |j| self.camera_row(i) + 1 + j))
            .collect()
    }

    /// Camera token followed by registers, per frame.
    pub fn special_rows(&self) -> Vec<usize> {
        (0..self.num_frames)
            .flat_map(|i| (0..=self.num_registers).map(move |j| self.camera_row(i) + j))
            .collect()
    }
}

/// Token matrix on a tape plus its layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenState<'t, T> {
    pub tokens: Var<'t, T>,
    pub layout: TokenLayout,
}

impl<'t, T: Scalar> TokenState<'t, T> {
    /// All frames' image tokens, `(N * H'W') x C`.
    pub fn image_tokens(&self) -> Var<'t, T> {
        self.tokens.gather_rows(&self.layout.image_rows())
    }

    pub fn frame(&self, frame: usize) -> Var<'t, T> {
        self.tokens
            .slice_rows(self.layout.frame_start(frame), self.layout.frame_stride())
    }
}

/// Registers the trunk and tokenizer parameters.
pub fn init_params<T: Scalar>(
    config: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) {
    let c = config.hidden_dim;
    let patch = 3 * config.patch_size * config.patch_size;
    store.insert(
        "embed.w",
        normal(rng, patch, c, 1.0 / (patch as f64).sqrt()),
    );
    store.insert("embed.b", Tensor::zeros(1, c));
    store.insert("token.cam_ref", normal(rng, 1, c, 1.0));
    store.insert("token.cam_other", normal(rng, 1, c, 1.0));
    store.insert("token.reg_ref", normal(rng, config.num_registers, c, 1.0));
    store.insert("token.reg_other", normal(rng, config.num_registers, c, 1.0));
    for k in 0..config.num_blocks {
        init_block(store, &format!("trunk.{k:02}.frame"), config, rng);
        init_block(store, &format!("trunk.{k:02}.global"), config, rng);
    }
}

/// Parameters of one pre-norm attention + MLP block under `prefix`.
pub fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) {
    let c = config.hidden_dim;
    let m = config.mlp_ratio * c;
    let std = 1.0 / (c as f64).sqrt();
    store.insert(format!("{prefix}.ln1.g"), Tensor::filled(1, c, T::one()));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(1, c));
    store.insert(format!("{prefix}.qkv.w"), normal(rng, c, 3 * c, std));
    store.insert(format!("{prefix}.qkv.b"), Tensor::zeros(1, 3 * c));
    store.insert(
        format!("{prefix}.qk_scale"),
        Tensor::scalar(T::from_usize_lossy(config.head_dim()).sqrt()),
    );
    store.insert(format!("{prefix}.proj.w"), normal(rng, c, c, 0.5 * std));
    store.insert(format!("{prefix}.proj.b"), Tensor::zeros(1, c));
    store.insert(format!("{prefix}.ln2.g"), Tensor::filled(1, c, T::one()));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(1, c));
    store.insert(format!("{prefix}.fc1.w"), normal(rng, c, m, std));
    store.insert(format!("{prefix}.fc1.b"), Tensor::zeros(1, m));
    store.insert(
        format!("{prefix}.fc2.w"),
        normal(rng, m, c, 0.5 / (m as f64).sqrt()),
    );
    store.insert(format!("{prefix}.fc2.b"), Tensor::zeros(1, c));
}

/// Flattened `r x r` patches of every frame, `(N * H'W') x 3r^2`, rows in
/// raster order per frame, columns ordered (channel, dy, dx).
pub fn patchify<T: Scalar>(images: &[Image<T>], r: usize) -> Tensor<T> {
    let (w, h) = (images[0].width, images[0].height);
    let (gh, gw) = (h / r, w / r);
    let cols = 3 * r * r;
    let mut out = Tensor::zeros(images.len() * gh * gw, cols);
    for (i, img) in images.iter().enumerate() {
        for py in 0..gh {
            for px in 0..gw {
                let row = (i * gh + py) * gw + px;
                for c in 0..3 {
                    for dy in 0..r {
                        for dx in 0..r {
                            out.set(
                                row,
                                (c * r + dy) * r + dx,
                                img.get(c, px * r + dx, py * r + dy),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sinusoidal 2-D encoding for an `h x w` grid: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let quarter = c / 4;
    Tensor::from_fn(h * w, c, |row, ch| {
        let (y, x) = ((row / w) as f64, (row % w) as f64);
        let pos = if ch < c / 2 { y } else { x };
        let k = ch % (c / 2);
        let freq = 1.0 / 10000f64.powf((k % quarter) as f64 / quarter as f64);
        T::lit(if k < quarter {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

/// Builds the initial token matrix. Frames flagged as reference take the
/// reference camera/register embeddings, all others the shared non-reference ones.
pub fn tokenize<'t, T: Scalar>(
    tape: &'t Tape<T>,
    images: &[Image<T>],
    is_reference: &[bool],
    config: &ModelConfig,
    bound: &Bound<'t, T>,
) -> Result<TokenState<'t, T>> {
    if images.is_empty() || images.len() != is_reference.len() {
        return Err(Error::Shape(format!(
            "{} images with {} reference flags",
            images.len(),
            is_reference.len()
        )));
    }
    for (i, img) in images.iter().enumerate() {
        if img.width != config.width
            || img.height != config.height
            || img.data.len() != 3 * img.width * img.height
        {
            return Err(Error::Shape(format!(
                "image {i} is {}x{}, model expects {}x{}",
                img.height, img.width, config.height, config.width
            )));
        }
    }
    let n = images.len();
    let layout = config.layout(n);
    let t = layout.image_tokens;
    let (gh, gw) = config.grid();
    let patches = tape.constant(patchify(images, config.patch_size));
    let pos = positional_encoding::<T>(gh, gw, config.hidden_dim);
    let mut pos_all = Tensor::zeros(n * t, config.hidden_dim);
    for i in 0..n {
        for r in 0..t {
            for c in 0..config.hidden_dim {
                pos_all.set(i * t + r, c, pos.get(r, c));
            }
        }
    }
    let embedded =
        patches.matmul(bound.get("embed.w")) + bound.get("embed.b") + tape.constant(pos_all);
    let mut parts = Vec::with_capacity(3 * n);
    for (i, &is_ref) in is_reference.iter().enumerate() {
        parts.push(embedded.slice_rows(i * t, t));
        let (cam, reg) = if is_ref {
            ("token.cam_ref", "token.reg_ref")
        } else {
            ("token.cam_other", "token.reg_other")
        };
        parts.push(bound.get(cam));
        if layout.num_registers > 0 {
            parts.push(bound.get(reg));
        }
    }
    Ok(TokenState {
        tokens: Var::concat_rows(&parts),
        layout,
    })
}

/// Pre-norm multi-head self-attention followed by an MLP, both residual.
/// Queries and keys are l2-normalized per head and the query is scaled by a
/// learned temperature.
pub fn attention_block<'t, T: Scalar>(
    x: Var<'t, T>,
    prefix: &str,
    bound: &Bound<'t, T>,
    num_heads: usize,
    mask: &AttentionMask,
) -> Var<'t, T> {
    let p = |s: &str| bound.get(&format!("{prefix}.{s}"));
    let c = x.cols();
    let dh = c / num_heads;
    let h = x.layer_norm_rows(T::lit(LN_EPS)) * p("ln1.g") + p("ln1.b");
    let qkv = h.matmul(p("qkv.w")) + p("qkv.b");
    let scale = p("qk_scale");
    let heads: Vec<_> = (0..num_heads)
        .map(|j| {
            let q = qkv.slice_cols(j * dh, dh).l2_normalize_rows(T::lit(QK_EPS)) * scale;
            let k = qkv
                .slice_cols(c + j * dh, dh)
                .l2_normalize_rows(T::lit(QK_EPS));
            let v = qkv.slice_cols(2 * c + j * dh, dh);
            Var::attention(q, k, v, mask.clone())
        })
        .collect();
    let attn = if num_heads == 1 {
        heads[0]
    } else {
        Var::concat_cols(&heads)
    };
    let x = x + attn.matmul(p("proj.w")) + p("proj.b");
    let h = x.layer_norm_rows(T::lit(LN_EPS)) * p("ln2.g") + p("ln2.b");
    let h = (h.matmul(p("fc1.w")) + p("fc1.b")).gelu();
    x + h.matmul(p("fc2.w")) + p("fc2.b")
}

/// Attention within each frame only.
pub fn frame_attention<'t, T: Scalar>(
    state: TokenState<'t, T>,
    prefix: &str,
    bound: &Bound<'t, T>,
    num_heads: usize,
) -> TokenState<'t, T> {
    let l = state.layout;
    let mask = AttentionMask::BlockDiagonal(vec![l.frame_stride(); l.num_frames]);
    TokenState {
        tokens: attention_block(state.tokens, prefix, bound, num_heads, &mask),
        layout: l,
    }
}

/// Attention over the tokens of all frames jointly.
pub fn global_attention<'t, T: Scalar>(
    state: TokenState<'t, T>,
    prefix: &str,
    bound: &Bound<'t, T>,
    num_heads: usize,
) -> TokenState<'t, T> {
    let l = state.layout;
    let mask = AttentionMask::Global(vec![l.frame_stride(); l.num_frames]);
    TokenState {
        tokens: attention_block(state.tokens, prefix, bound, num_heads, &mask),
        layout: l,
    }
}

/// Global attention restricted to the registers of all frames; every other
/// token is copied through unchanged.
pub fn register_attention<'t, T: Scalar>(
    state: TokenState<'t, T>,
    prefix: &str,
    bound: &Bound<'t, T>,
    num_heads: usize,
) -> TokenState<'t, T> {
    let l = state.layout;
    if l.num_registers == 0 {
        return state;
    }
    let reg_rows = l.register_rows();
    let regs = state.tokens.gather_rows(&reg_rows);
    let mask = AttentionMask::Global(vec![l.num_registers; l.num_frames]);
    let updated = attention_block(regs, prefix, bound, num_heads, &mask);
    let total = l.total();
    let mut source: Vec<usize> = (0..total).collect();
    for (j, &r) in reg_rows.iter().enumerate() {
        source[r] = total + j;
    }
    let tokens = Var::concat_rows(&[state.tokens, updated]).gather_rows(&source);
    TokenState { tokens, layout: l }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Frame,
    Global,
    Register,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Frame => "frame",
            LayerKind::Global => "global",
            LayerKind::Register => "register",
        }
    }
}

/// Kinds of the `2 * num_blocks` attention layers in execution order: each
/// block runs a frame layer, then a global (or register) layer.
pub fn layer_schedule(num_blocks: usize, ratio: f64) -> Vec<LayerKind> {
    (0..num_blocks)
        .flat_map(|k| {
            [
                LayerKind::Frame,
                if register_block(ratio, k) {
                    LayerKind::Register
                } else {
                    LayerKind::Global
                },
            ]
        })
        .collect()
}

pub struct TrunkOutput<'t, T> {
    pub final_state: TokenState<'t, T>,
    /// Token states after each tapped layer, in layer order.
    pub taps: Vec<TokenState<'t, T>>,
}

pub fn run_trunk<'t, T: Scalar>(
    state: TokenState<'t, T>,
    config: &ModelConfig,
    bound: &Bound<'t, T>,
) -> TrunkOutput<'t, T> {
    let taps_at = config.tap_layers();
    let mut taps = Vec::with_capacity(NUM_TAPS);
    let mut x = state;
    for (l, kind) in layer_schedule(config.num_blocks, config.register_attention_ratio)
        .into_iter()
        .enumerate()
    {
        let k = l / 2;
        x = match kind {
            LayerKind::Frame => {
                frame_attention(x, &format!("trunk.{k:02}.frame"), bound, config.num_heads)
            }
            LayerKind::Global => {
                global_attention(x, &format!("trunk.{k:02}.global"), bound, config.num_heads)
            }
            LayerKind::Register => {
                register_attention(x, &format!("trunk.{k:02}.global"), bound, config.num_heads)
            }
        };
        // Short schedules may tap the same layer twice.
        for _ in taps_at.iter().filter(|&&t| t == l) {
            taps.push(x);
        }
    }
    TrunkOutput {
        final_state: x,
        taps,
    }
}

/// Inputs to the analytic FLOP model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsQuery {
    pub frames: usize,
    pub image_tokens: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub registers: usize,
    pub ratio: f64,
    pub mlp_ratio: usize,
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub kind: LayerKind,
    /// Layers of this kind in the schedule.
    pub count: usize,
    /// Tokens entering the attention of one layer.
    pub tokens: u64,
    pub projection_flops: u64,
    pub attention_flops: u64,
    pub mlp_flops: u64,
    /// Per layer.
    pub flops: u64,
    /// Per layer, 32-bit activations kept for the backward pass.
    pub activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub query: FlopsQuery,
    pub register_layers: Vec<usize>,
    pub patch_embed_flops: u64,
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
    pub baseline_flops: u64,
    /// `1 - total / baseline`.
    pub saving: f64,
    pub activation_bytes: u64,
    pub baseline_activation_bytes: u64,
}

fn layer_cost(kind: LayerKind, q: &FlopsQuery, count: usize) -> LayerCost {
    let n = q.frames as u64;
    let c = q.hidden as u64;
    let stride = (q.image_tokens + 1 + q.registers) as u64;
    let (tokens, pairs) = match kind {
        LayerKind::Frame => (n * stride, n * stride * stride),
        LayerKind::Global => (n * stride, (n * stride) * (n * stride)),
        LayerKind::Register => {
            let r = n * q.registers as u64;
            (r, r * r)
        }
    };
    let m = q.mlp_ratio as u64 * c;
    let projection_flops = 2 * tokens * c * 3 * c + 2 * tokens * c * c;
    let attention_flops = 4 * pairs * c;
    let mlp_flops = 4 * tokens * c * m;
    // ln, qkv, attention out, projection, ln, fc1, gelu, fc2 per token, plus
    // one probability matrix per head.
    let per_token = c + 3 * c + c + c + c + m + m + c;
    let activation_bytes = 4 * (tokens * per_token + q.heads as u64 * pairs);
    LayerCost {
        kind,
        count,
        tokens,
        projection_flops,
        attention_flops,
        mlp_flops,
        flops: projection_flops + attention_flops + mlp_flops,
        activation_bytes,
    }
}

/// Analytic matmul FLOPs (2 per multiply-accumulate) of patch embedding plus
/// trunk, compared against a schedule with no register attention.
pub fn flops_report(q: &FlopsQuery) -> FlopsReport {
    let schedule = layer_schedule(q.blocks, q.ratio);
    let count = |k: LayerKind| schedule.iter().filter(|&&x| x == k).count();
    let layers: Vec<LayerCost> = [LayerKind::Frame, LayerKind::Global, LayerKind::Register]
        .into_iter()
        .map(|k| layer_cost(k, q, count(k)))
        .collect();
    let patch_embed_flops = 2
        * (q.frames * q.image_tokens) as u64
        * (3 * q.patch_size * q.patch_size) as u64
        * q.hidden as u64;
    let total_flops =
        patch_embed_flops + layers.iter().map(|l| l.count as u64 * l.flops).sum::<u64>();
    let baseline_flops = patch_embed_flops + q.blocks as u64 * (layers[0].flops + layers[1].flops);
    let activation_bytes = layers
        .iter()
        .map(|l| l.count as u64 * l.activation_bytes)
        .sum();
    let baseline_activation_bytes =
        q.blocks as u64 * (layers[0].activation_bytes + layers[1].activation_bytes);
    FlopsReport {
        query: q.clone(),
        register_layers: (0..q.blocks)
            .filter(|&k| register_block(q.ratio, k))
            .collect(),
        patch_embed_flops,
        layers,
        total_flops,
        baseline_flops,
        saving: 1.0 - total_flops as f64 / baseline_flops as f64,
        activation_bytes,
        baseline_activation_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_placement_and_taps() {
        let placed: Vec<usize> = (0..24).filter(|&k| register_block(0.25, k)).collect();
        assert_eq!(placed, vec![3, 7, 11, 15, 19, 23]);
        assert!((0..8).all(|k| register_block(1.0, k)));
        assert!((0..8).all(|k| !register_block(0.0, k)));
        assert_eq!(tap_layers(4), [0, 1, 2, 3]);
        assert_eq!(tap_layers(8), [1, 3, 5, 7]);
        assert_eq!(tap_layers(48), [11, 23, 35, 47]);
    }

    #[test]
    fn layout_rows() {
        let l = TokenLayout {
            num_frames: 2,
            image_tokens: 4,
            num_registers: 2,
        };
        assert_eq!(l.frame_stride(), 7);
        assert_eq!(l.image_rows(), vec![0, 1, 2, 3, 7, 8, 9, 10]);
        assert_eq!(l.register_rows(), vec![5, 6, 12, 13]);
        assert_eq!(l.special_rows(), vec![4, 5, 6, 11, 12, 13]);
    }

    #[test]
    fn patchify_orders_channels_then_rows() {
        let mut img = Image::<f64>::new(4, 2);
        for c in 0..3 {
            for v in 0..2 {
                for u in 0..4 {
                    img.set(c, u, v, (100 * c + 10 * v + u) as f64);
                }
            }
        }
        let p = patchify(&[img], 2);
        assert_eq!(p.shape(), (2, 12));
        assert_eq!(
            p.row(1),
            &[2.0, 3.0, 12.0, 13.0, 102.0, 103.0, 112.0, 113.0, 202.0, 203.0, 212.0, 213.0]
        );
    }
}
