//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvrecon::aggregator::{
    flops_report, register_attention, run_trunk, tokenize, FlopsQuery, ModelConfig, TokenState,
};
use mvrecon::autograd::Tape;
use mvrecon::distill::{ema_update, DistillConfig, TeacherState};
use mvrecon::engine::{evaluate_point_error, supervised_step, train_toy, TrainConfig};
use mvrecon::geometry::{normalize_scene, Camera, DepthMap, Image, SceneBundle};
use mvrecon::heads::DepthPrediction;
use mvrecon::losses::*;
use mvrecon::metrics::{
    auc_from_errors, depth_metrics, evaluate, point_error, Alignment, EvalConfig,
};
use mvrecon::model::Model;
use mvrecon::params::ParamStore;
use mvrecon::quality::*;
use mvrecon::synthetic::{make_synthetic, SceneKind, SyntheticSpec};
use mvrecon::{Bundle64, Model64, Scalar, Tensor};

// Pinned tolerances.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_RUNTIME_S: f64 = 120.0;
const EQUIVARIANCE_TOL_F32: f64 = 1e-5;
const REGISTER_TRIALS: usize = 1000;
const SAVING_RANGE: (f64, f64) = (0.18, 0.28);
const ALL_REGISTER_MAX: f64 = 0.10;
const FLOP_MATCH_TOL: f64 = 0.01;
const MATCHING_TOL: f64 = 1e-10;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_FACTOR: f64 = 5.0;
const OVERFIT_RUNTIME_S: f64 = 600.0;
const EMA_REL_TOL: f64 = 1e-10;
const QUALITY_TOL: f64 = 1e-8;
const METRIC_TOL: f64 = 1e-10;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn run_criterion(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({secs:.1} s)"),
        Err(detail) => println!("FAIL {id:>2} {name}: {detail} ({secs:.1} s)"),
    }
    result.is_ok()
}

#[test]
fn acceptance() {
    let results = [
        run_criterion(1, "gradient exactness", gradient_exactness),
        run_criterion(2, "permutation equivariance", permutation_equivariance),
        run_criterion(3, "register-attention isolation", register_isolation),
        run_criterion(4, "flop claims", flop_claims),
        run_criterion(5, "loss fixed points", loss_fixed_points),
        run_criterion(6, "pair-construction oracle", pair_oracle),
        run_criterion(7, "toy overfit", toy_overfit),
        run_criterion(8, "ema convergence and frozen heads", ema_and_frozen_heads),
        run_criterion(9, "quality features", quality_features),
        run_criterion(10, "metric oracles", metric_oracles),
        run_criterion(11, "cli determinism", cli_determinism),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

// ---------------------------------------------------------------------------
// Shared helpers

fn scene(kind: SceneKind, frames: usize, size: usize, seed: u64) -> Bundle64 {
    make_synthetic(
        &SyntheticSpec {
            frames,
            width: size,
            height: size,
            ..SyntheticSpec::new(kind)
        },
        seed,
    )
    .unwrap()
}

fn rotation(c: &Camera<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(c.q[0], c.q[1], c.q[2], c.q[3]))
}

fn center(c: &Camera<f64>) -> Vector3<f64> {
    -(rotation(c).inverse() * Vector3::from(c.t))
}

fn world_point(c: &Camera<f64>, u: usize, v: usize, d: f64) -> Vector3<f64> {
    let (w, h) = (c.width as f64, c.height as f64);
    let xc = Vector3::new(
        (u as f64 - w / 2.0) / (c.f[0] * w / 2.0) * d,
        (v as f64 - h / 2.0) / (c.f[1] * h / 2.0) * d,
        d,
    );
    rotation(c).inverse() * (xc - Vector3::from(c.t))
}

/// Camera-frame point and nearest pixel, if it lies in front and inside.
fn project(c: &Camera<f64>, x: &Vector3<f64>) -> (Vector3<f64>, Option<(usize, usize)>) {
    let xc = rotation(c) * x + Vector3::from(c.t);
    if xc.z <= 0.0 {
        return (xc, None);
    }
    let (w, h) = (c.width as f64, c.height as f64);
    let u = (c.f[0] * w / 2.0 * xc.x / xc.z + w / 2.0 + 0.5).floor();
    let v = (c.f[1] * h / 2.0 * xc.y / xc.z + h / 2.0 + 0.5).floor();
    let inside = u >= 0.0 && v >= 0.0 && u < w && v < h;
    (xc, inside.then(|| (u as usize, v as usize)))
}

fn loss_value(
    params: &ParamStore<f64>,
    config: &ModelConfig,
    bundle: &Bundle64,
    pairs: &PatchPairSet,
) -> f64 {
    let model = Model {
        config: config.clone(),
        params: params.clone(),
    };
    let tape = Tape::new();
    let bound = params.bind_constants(&tape);
    let out = model.forward(&tape, &bound, &bundle.images).unwrap();
    let terms = total_loss(
        &out.depth,
        out.cameras,
        out.trunk.final_state.image_tokens(),
        bundle,
        pairs,
        &LossWeights::default(),
    )
    .unwrap();
    terms.total.item()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_exactness() -> Check {
    let start = Instant::now();
    let config = ModelConfig {
        num_blocks: 2,
        hidden_dim: 32,
        num_heads: 2,
        patch_size: 4,
        num_registers: 4,
        register_attention_ratio: 0.5,
        height: 32,
        width: 32,
        mlp_ratio: 2,
        depth_upsample: 4,
        depth_channels: 8,
        camera_blocks: 1,
    };
    ensure(config.grid() == (8, 8), "token grid must be 8x8")?;
    let bundle = ok(normalize_scene(&scene(SceneKind::BoxRoom, 3, 32, 5)))?;
    let pair_cfg = PairConfig {
        patch_size: 4,
        min_projections: 1,
        ..PairConfig::default()
    };
    let pairs = ok(build_pairs(
        &bundle,
        &pair_cfg,
        &mut ChaCha8Rng::seed_from_u64(1),
    ))?;
    ensure(!pairs.is_empty(), "matching term must take part")?;
    let mut model = ok(Model64::init(config.clone(), 3))?;
    ok(supervised_step(
        &mut model,
        &bundle,
        &pairs,
        &LossWeights::default(),
    ))?;

    // One random unit direction per tensor, plus one over every parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut directions: Vec<(String, BTreeMap<String, Vec<f64>>)> = Vec::new();
    let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    for name in &names {
        let len = model.params.get(name).unwrap().value.len();
        directions.push((
            name.clone(),
            BTreeMap::from([(name.clone(), draw(&mut rng, len))]),
        ));
    }
    let all: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| {
            (
                n.clone(),
                draw(&mut rng, model.params.get(n).unwrap().value.len()),
            )
        })
        .collect();
    directions.push(("<all>".into(), all));

    let h = 1e-7;
    let mut worst = (0.0f64, String::new());
    for (label, mut dir) in directions {
        let norm = dir.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
        dir.values_mut().flatten().for_each(|x| *x /= norm);
        let analytic: f64 = dir
            .iter()
            .map(|(n, v)| {
                model
                    .params
                    .get(n)
                    .unwrap()
                    .grad
                    .data()
                    .iter()
                    .zip(v)
                    .map(|(g, d)| g * d)
                    .sum::<f64>()
            })
            .sum();
        let shifted = |s: f64| {
            let mut p = model.params.clone();
            for (n, v) in &dir {
                for (x, d) in p.get_mut(n).unwrap().value.data_mut().iter_mut().zip(v) {
                    *x += s * d;
                }
            }
            loss_value(&p, &config, &bundle, &pairs)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, label);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst.0 < GRAD_REL_TOL,
        format!(
            "worst relative error {:.2e} on {} (tol {GRAD_REL_TOL:e})",
            worst.0, worst.1
        ),
    )?;
    ensure(secs < GRAD_RUNTIME_S, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} tensors + 1 joint direction, worst relative error {:.2e} ({}) < {GRAD_REL_TOL:e}",
        names.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2

struct ForwardRows<T> {
    trunk: Vec<Tensor<T>>,
    cameras: Tensor<T>,
    depth: Tensor<T>,
    confidence: Tensor<T>,
}

fn forward_rows<T: Scalar>(model: &Model<T>, images: &[Image<T>]) -> ForwardRows<T> {
    let tape = Tape::new();
    let bound = model.params.bind_constants(&tape);
    let out = model.forward(&tape, &bound, images).unwrap();
    let mut trunk: Vec<Tensor<T>> = out.trunk.taps.iter().map(|t| t.tokens.value()).collect();
    trunk.push(out.trunk.final_state.tokens.value());
    ForwardRows {
        trunk,
        cameras: out.cameras.value(),
        depth: out.depth.depth.value(),
        confidence: out.depth.confidence.value(),
    }
}

/// Largest difference between `b` and `a` with blocks of `stride` rows
/// reordered by `perm` (block `k` of `b` pairs with block `perm[k]` of `a`).
fn permuted_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, stride: usize, perm: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for (k, &src) in perm.iter().enumerate() {
        for r in 0..stride {
            for (x, y) in a.row(src * stride + r).iter().zip(b.row(k * stride + r)) {
                worst = worst.max((x.to_f64_lossy() - y.to_f64_lossy()).abs());
            }
        }
    }
    worst
}

fn equivariance_error<T: Scalar>(config: &ModelConfig, perm: &[usize]) -> f64 {
    let bundle: SceneBundle<T> = make_synthetic(
        &SyntheticSpec {
            frames: perm.len(),
            width: config.width,
            height: config.height,
            ..SyntheticSpec::new(SceneKind::Orbit)
        },
        4,
    )
    .unwrap();
    let model = Model::<T>::init(config.clone(), 6).unwrap();
    let base = forward_rows(&model, &bundle.images);
    let images: Vec<Image<T>> = perm.iter().map(|&i| bundle.images[i].clone()).collect();
    let moved = forward_rows(&model, &images);
    let stride = config.layout(perm.len()).frame_stride();
    let hw = config.width * config.height;
    let mut worst = 0.0f64;
    for (a, b) in base.trunk.iter().zip(&moved.trunk) {
        worst = worst.max(permuted_diff(a, b, stride, perm));
    }
    worst = worst.max(permuted_diff(&base.cameras, &moved.cameras, 1, perm));
    worst = worst.max(permuted_diff(&base.depth, &moved.depth, hw, perm));
    worst.max(permuted_diff(&base.confidence, &moved.confidence, hw, perm))
}

fn permutation_equivariance() -> Check {
    let config = ModelConfig {
        num_blocks: 2,
        hidden_dim: 32,
        num_heads: 2,
        patch_size: 8,
        num_registers: 4,
        register_attention_ratio: 0.5,
        height: 32,
        width: 32,
        mlp_ratio: 2,
        depth_upsample: 4,
        depth_channels: 8,
        camera_blocks: 1,
    };
    let perm = [0, 3, 1, 2];
    let e64 = equivariance_error::<f64>(&config, &perm);
    let e32 = equivariance_error::<f32>(&config, &perm);
    ensure(e64 == 0.0, format!("64-bit outputs differ by {e64:e}"))?;
    ensure(
        e32 <= EQUIVARIANCE_TOL_F32,
        format!("32-bit outputs differ by {e32:e}"),
    )?;
    Ok(format!("trunk taps, cameras, depth and confidence: 64-bit max diff {e64:e} (bit-exact), 32-bit {e32:e} <= {EQUIVARIANCE_TOL_F32:e}"))
}

// ---------------------------------------------------------------------------
// 3

fn register_isolation() -> Check {
    let config = ModelConfig {
        num_blocks: 2,
        hidden_dim: 16,
        num_heads: 2,
        patch_size: 4,
        num_registers: 4,
        register_attention_ratio: 1.0,
        height: 8,
        width: 8,
        mlp_ratio: 2,
        depth_upsample: 4,
        depth_channels: 4,
        camera_blocks: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed = 0;
    for trial in 0..REGISTER_TRIALS {
        let model = ok(Model64::init(config.clone(), trial as u64 / 100))?;
        let tape = Tape::new();
        let bound = model.params.bind_constants(&tape);
        let frames = rng.gen_range(1..=4);
        let layout = config.layout(frames);
        let scale = rng.gen_range(0.1..10.0);
        let x = Tensor::from_fn(layout.total(), config.hidden_dim, |_, _| {
            rng.gen_range(-scale..scale)
        });
        let out = register_attention(
            TokenState {
                tokens: tape.constant(x.clone()),
                layout,
            },
            "trunk.01.global",
            &bound,
            config.num_heads,
        )
        .tokens
        .value();
        let regs: BTreeSet<usize> = layout.register_rows().into_iter().collect();
        for r in 0..layout.total() {
            if regs.contains(&r) {
                changed += usize::from(out.row(r) != x.row(r));
            } else {
                ensure(
                    out.row(r) == x.row(r),
                    format!("trial {trial}: row {r} changed"),
                )?;
            }
        }
    }
    ensure(changed > 0, "register rows never changed")?;
    Ok(format!(
        "{REGISTER_TRIALS} random inputs, every non-register row bit-identical"
    ))
}

// ---------------------------------------------------------------------------
// 4

fn flop_claims() -> Check {
    let q = FlopsQuery {
        frames: 24,
        image_tokens: 672,
        blocks: 24,
        hidden: 64,
        heads: 4,
        registers: 16,
        ratio: 0.25,
        mlp_ratio: 4,
        patch_size: 16,
    };
    let quarter = flops_report(&q);
    let all = flops_report(&FlopsQuery {
        ratio: 1.0,
        ..q.clone()
    });
    let all_frac = all.total_flops as f64 / all.baseline_flops as f64;
    ensure(
        (SAVING_RANGE.0..=SAVING_RANGE.1).contains(&quarter.saving),
        format!("25% replacement saves {:.2}%", 100.0 * quarter.saving),
    )?;
    ensure(
        all_frac <= ALL_REGISTER_MAX,
        format!("all-register total is {:.2}% of baseline", 100.0 * all_frac),
    )?;

    let mut worst = 0.0f64;
    for ratio in [0.0, 0.5, 1.0] {
        let config = ModelConfig {
            num_blocks: 4,
            hidden_dim: 16,
            num_heads: 2,
            patch_size: 4,
            num_registers: 4,
            register_attention_ratio: ratio,
            height: 16,
            width: 12,
            mlp_ratio: 4,
            depth_upsample: 4,
            depth_channels: 4,
            camera_blocks: 1,
        };
        let model = ok(Model64::init(config.clone(), 1))?;
        let b = scene(SceneKind::Orbit, 3, 16, 2);
        let images: Vec<Image<f64>> = b.images.iter().map(|img| crop(img, 12)).collect();
        let tape = Tape::new();
        let bound = model.params.bind_constants(&tape);
        let state = ok(tokenize(
            &tape,
            &images,
            &[true, false, false],
            &config,
            &bound,
        ))?;
        run_trunk(state, &config, &bound);
        let analytic = flops_report(&config.flops_query(3)).total_flops as f64;
        worst = worst.max((tape.flops() as f64 - analytic).abs() / analytic);
    }
    ensure(
        worst <= FLOP_MATCH_TOL,
        format!("analytic vs instrumented differ by {:.3}%", 100.0 * worst),
    )?;
    Ok(format!(
        "saving {:.2}% in [{:.0}%, {:.0}%], all-register {:.2}% <= {:.0}%, analytic vs instrumented {:.3}% <= {:.0}%",
        100.0 * quarter.saving,
        100.0 * SAVING_RANGE.0,
        100.0 * SAVING_RANGE.1,
        100.0 * all_frac,
        100.0 * ALL_REGISTER_MAX,
        100.0 * worst,
        100.0 * FLOP_MATCH_TOL
    ))
}

fn crop(img: &Image<f64>, width: usize) -> Image<f64> {
    let mut out = Image::new(width, img.height);
    for c in 0..3 {
        for v in 0..img.height {
            for u in 0..width {
                out.set(c, u, v, img.get(c, u, v));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 5

fn loss_fixed_points() -> Check {
    let b = scene(SceneKind::BoxRoom, 3, 32, 3);
    let rows: Vec<[f64; 9]> = b.cameras.iter().map(|c| c.to_vector()).collect();
    let cam = ok(camera_loss(&rows, &b.cameras))?;
    ensure(cam == 0.0, format!("camera loss {cam:e}"))?;
    for (d, c) in b.depths.iter().zip(&b.cameras) {
        let pred = DepthPrediction {
            width: 32,
            height: 32,
            depth: d.values.clone(),
            confidence: vec![1.0; 32 * 32],
        };
        let dl = ok(depth_loss(&pred, d, 0.1))?;
        let pl = ok(point_loss(&pred, &c.to_vector(), d, c, 0.1))?;
        ensure(
            dl == 0.0 && pl == 0.0,
            format!("depth loss {dl:e}, point loss {pl:e}"),
        )?;
    }
    // Mutually orthogonal tokens: every similarity is zero.
    let tokens = Tensor::from_fn(8, 8, |r, c| if r == c { 1.0 + r as f64 } else { 0.0 });
    let pairs = PatchPairSet {
        positives: (0..3)
            .map(|p| PositivePair {
                frame_a: 0,
                patch_a: p,
                frame_b: 1,
                patch_b: p,
                overlap: 0.5,
            })
            .collect(),
        negatives: (0..3)
            .map(|p| NegativePair {
                frame_a: 1,
                patch_a: p,
                frame_b: 0,
                patch_b: p + 1,
                sampson: 99.0,
                rgb_distance: 1.0,
            })
            .collect(),
    };
    let (m, skipped) = matching_loss(&tokens, 4, &pairs);
    let err = (m - 2.0 * std::f64::consts::LN_2).abs();
    ensure(
        !skipped && err <= MATCHING_TOL,
        format!("matching loss {m} (|err| {err:e})"),
    )?;
    Ok(format!(
        "camera/depth/point exactly 0; matching at zero similarity within {err:.1e} of 2 ln 2"
    ))
}

// ---------------------------------------------------------------------------
// 6

fn positives_oracle(b: &Bundle64, cfg: &PairConfig) -> BTreeSet<(usize, usize, usize, usize)> {
    let (w, h, r) = (b.width(), b.height(), cfg.patch_size);
    let gw = w / r;
    let mut counts: BTreeMap<(usize, usize), BTreeMap<usize, BTreeMap<usize, usize>>> =
        BTreeMap::new();
    for a in 0..b.num_frames() {
        for bf in (0..b.num_frames()).filter(|&x| x != a) {
            for v in 0..h {
                for u in 0..w {
                    let p = v * w + u;
                    if !b.depths[a].valid[p] || b.is_dynamic(a, p) {
                        continue;
                    }
                    let x = world_point(&b.cameras[a], u, v, b.depths[a].values[p]);
                    let (xc, Some((pu, pv))) = project(&b.cameras[bf], &x) else {
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
                    let target = b.depths[bf].values[q];
                    if !b.depths[bf].valid[q]
                        || b.is_dynamic(bf, q)
                        || (xc.z - target).abs() > cfg.depth_tolerance * target
                    {
                        continue;
                    }
                    *counts
                        .entry((a, (v / r) * gw + u / r))
                        .or_default()
                        .entry(bf)
                        .or_default()
                        .entry((pv / r) * gw + pu / r)
                        .or_default() += 1;
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for ((a, pa), per_frame) in counts {
        if per_frame.values().flat_map(|m| m.values()).sum::<usize>() < cfg.min_projections {
            continue;
        }
        for (bf, targets) in per_frame {
            let total: usize = targets.values().sum();
            for (pb, c) in targets {
                if c as f64 / total as f64 > cfg.min_overlap {
                    out.insert((a, pa, bf, pb));
                }
            }
        }
    }
    out
}

fn pair_oracle() -> Check {
    let b = scene(SceneKind::Plane, 2, 64, 11);
    let cfg = PairConfig::default();
    ensure(
        (cfg.depth_tolerance, cfg.border, cfg.min_overlap) == (0.01, 4, 0.10),
        "constants drifted",
    )?;
    let got: BTreeSet<_> = ok(find_positives(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)))?
        .into_iter()
        .map(|p| (p.frame_a, p.patch_a, p.frame_b, p.patch_b))
        .collect();
    let want = positives_oracle(&b, &cfg);
    ensure(!want.is_empty(), "oracle found no positives")?;
    ensure(
        got == want,
        format!("{} positives vs {} from the oracle", got.len(), want.len()),
    )?;
    Ok(format!(
        "{} positives equal the all-pixel projection oracle",
        got.len()
    ))
}

// ---------------------------------------------------------------------------
// 7

fn overfit_config() -> TrainConfig {
    let model = ModelConfig {
        num_blocks: 2,
        hidden_dim: 32,
        num_heads: 2,
        patch_size: 8,
        num_registers: 4,
        register_attention_ratio: 0.5,
        height: 32,
        width: 32,
        mlp_ratio: 2,
        depth_upsample: 4,
        depth_channels: 16,
        camera_blocks: 1,
    };
    TrainConfig {
        model,
        steps: OVERFIT_STEPS,
        peak_lr: 1e-3,
        seed: 0,
        min_frames: 3,
        max_frames: 3,
        ..TrainConfig::default()
    }
}

fn toy_overfit() -> Check {
    let start = Instant::now();
    let cfg = overfit_config();
    let data = vec![ok(normalize_scene(&scene(SceneKind::BoxRoom, 3, 32, 1)))?];
    let model = ok(Model64::init(cfg.model.clone(), 0))?;
    let before = ok(evaluate_point_error(&model, &data[0]))?;
    let out = ok(train_toy(model.clone(), &data, &cfg, |_| {}))?;
    ensure(
        out.diverged.is_none(),
        format!("diverged: {:?}", out.diverged),
    )?;
    let after = ok(evaluate_point_error(&out.model, &data[0]))?;
    let secs = start.elapsed().as_secs_f64();
    // Determinism: a short replay from the same seed is bit-identical.
    let short = TrainConfig {
        steps: 20,
        ..cfg.clone()
    };
    let a = ok(train_toy(model.clone(), &data, &short, |_| {}))?;
    let b = ok(train_toy(model, &data, &short, |_| {}))?;
    ensure(
        a.model == b.model && a.log == b.log,
        "replay with the same seed differs",
    )?;
    let factor = before / after;
    ensure(
        factor >= OVERFIT_FACTOR,
        format!("point error {before:.4} -> {after:.4} is only {factor:.1}x"),
    )?;
    ensure(secs < OVERFIT_RUNTIME_S, format!("took {secs:.0} s"))?;
    Ok(format!("point error {before:.4} -> {after:.4} ({factor:.1}x >= {OVERFIT_FACTOR}x) in {OVERFIT_STEPS} steps, {secs:.1} s, replay bit-identical"))
}

// ---------------------------------------------------------------------------
// 8

fn distance(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| {
            x.value
                .data()
                .iter()
                .zip(y.value.data())
                .map(|(p, q)| (p - q).powi(2))
                .collect::<Vec<_>>()
        })
        .sum::<f64>()
        .sqrt()
}

fn ema_and_frozen_heads() -> Check {
    let config = ModelConfig {
        num_blocks: 2,
        hidden_dim: 16,
        num_heads: 2,
        patch_size: 8,
        num_registers: 2,
        register_attention_ratio: 0.5,
        height: 16,
        width: 16,
        mlp_ratio: 2,
        depth_upsample: 4,
        depth_channels: 4,
        camera_blocks: 1,
    };
    let student = ok(Model64::init(config.clone(), 1))?;
    let mut worst = 0.0f64;
    for (m, k) in [(0.9, 10), (0.99, 25), (0.5, 7)] {
        let mut teacher = ok(Model64::init(config.clone(), 2))?.params;
        let d0 = distance(&teacher, &student.params);
        for _ in 0..k {
            ok(ema_update(&mut teacher, &student.params, m))?;
        }
        let want = d0 * f64::powi(m, k);
        worst = worst.max((distance(&teacher, &student.params) - want).abs() / want);
    }
    ensure(
        worst <= EMA_REL_TOL,
        format!("distance off by {worst:e} relative"),
    )?;

    let mut state = TeacherState::new(&student, 0.9);
    ok(state.update(&student))?;
    ensure(
        distance(&state.model.params, &student.params) == 0.0,
        "teacher of an unchanged student moved",
    )?;

    let data = vec![scene(SceneKind::BoxRoom, 3, 16, 4)];
    let cfg = TrainConfig {
        model: config,
        steps: 4,
        seed: 5,
        min_frames: 2,
        max_frames: 3,
        ssl: Some(DistillConfig::default()),
        ..TrainConfig::default()
    };
    let out = ok(train_toy(student.clone(), &data, &cfg, |_| {}))?;
    ensure(out.diverged.is_none(), "distillation diverged")?;
    let mut trunk_moved = false;
    for (name, p) in out.model.params.iter() {
        let before = &student.params.get(name).unwrap().value;
        if name.starts_with("camera.") || name.starts_with("depth.") {
            ensure(&p.value == before, format!("head parameter {name} changed"))?;
        } else {
            trunk_moved |= &p.value != before;
        }
    }
    ensure(trunk_moved, "no trunk parameter changed")?;
    Ok(format!("||theta_T - theta_S|| shrinks by m^k within {worst:.1e} relative; heads bit-identical after 4 distillation steps"))
}

// ---------------------------------------------------------------------------
// 9

fn quality_features() -> Check {
    let b = scene(SceneKind::Orbit, 8, 32, 9);
    let mut notes = Vec::new();

    // Smoothness: centers and rotation vectors from nalgebra.
    let centers: Vec<Vector3<f64>> = b.cameras.iter().map(center).collect();
    let rotvecs: Vec<Vector3<f64>> = b
        .cameras
        .iter()
        .map(|c| rotation(c).scaled_axis())
        .collect();
    let accel = |x: &[Vector3<f64>]| {
        (1..x.len() - 1)
            .map(|i| (x[i + 1] - 2.0 * x[i] + x[i - 1]).norm_squared())
            .sum::<f64>()
            / (x.len() - 2) as f64
    };
    let (st, sr) = ok(trajectory_smoothness(&b.cameras))?;
    let e = (st - accel(&centers))
        .abs()
        .max((sr - accel(&rotvecs)).abs());
    ensure(e <= QUALITY_TOL, format!("smoothness off by {e:e}"))?;
    notes.push(format!("smoothness {e:.0e}"));

    // Points seen by the cameras.
    let mut points = Vec::new();
    for (d, c) in b.depths.iter().zip(&b.cameras) {
        for p in (0..32 * 32).step_by(7) {
            if d.valid[p] {
                points.push(world_point(c, p % 32, p / 32, d.values[p]));
            }
        }
    }
    let as_arrays: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();

    // Parallax: every point, every visible pair.
    let mut maxima = Vec::new();
    for x in &points {
        let visible: Vec<Vector3<f64>> = b
            .cameras
            .iter()
            .filter(|c| project(c, x).1.is_some())
            .map(center)
            .collect();
        let mut best: Option<f64> = None;
        for i in 0..visible.len() {
            for j in i + 1..visible.len() {
                let (a, c) = ((visible[i] - x).normalize(), (visible[j] - x).normalize());
                let ang = a.dot(&c).clamp(-1.0, 1.0).acos().to_degrees();
                best = Some(best.map_or(ang, |m: f64| m.max(ang)));
            }
        }
        maxima.extend(best);
    }
    maxima.sort_by(f64::total_cmp);
    let n = maxima.len();
    let want = if n % 2 == 1 {
        maxima[n / 2]
    } else {
        0.5 * (maxima[n / 2 - 1] + maxima[n / 2])
    };
    let got = ok(parallax_stat(&as_arrays, &b.cameras, as_arrays.len()))?;
    ensure(
        (got - want).abs() <= QUALITY_TOL,
        format!("parallax {got} vs {want}"),
    )?;
    notes.push(format!("parallax {:.0e}", (got - want).abs()));

    // PCA shape from nalgebra's symmetric eigensolver.
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / points.len() as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let want = (
        (ev[0] - ev[1]) / ev[0],
        (ev[1] - ev[2]) / ev[0],
        ev[2] / ev[0],
    );
    let got = ok(pca_shape(&as_arrays))?;
    let e = (got.0 - want.0)
        .abs()
        .max((got.1 - want.1).abs())
        .max((got.2 - want.2).abs());
    ensure(e <= QUALITY_TOL, format!("pca shape off by {e:e}"))?;
    notes.push(format!("pca {e:.0e}"));

    // Noise fraction from brute-force neighbours.
    let k = 8;
    let knn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let m = knn.iter().sum::<f64>() / knn.len() as f64;
    let sd = (knn.iter().map(|x| (x - m).powi(2)).sum::<f64>() / knn.len() as f64).sqrt();
    let want = knn.iter().filter(|&&x| x > m + 2.0 * sd).count() as f64 / knn.len() as f64;
    let got = ok(noise_fraction(&as_arrays, k))?;
    ensure(
        (got - want).abs() <= QUALITY_TOL,
        format!("noise fraction {got} vs {want}"),
    )?;
    notes.push(format!("noise {:.0e}", (got - want).abs()));

    // Multi-view consistency, pixel by pixel.
    let room = scene(SceneKind::BoxRoom, 3, 32, 2);
    let (w, h) = (32, 32);
    let mut agree = 0usize;
    for a in 0..3 {
        for p in 0..w * h {
            if !room.depths[a].valid[p] {
                continue;
            }
            let x = world_point(&room.cameras[a], p % w, p / w, room.depths[a].values[p]);
            let hit = (0..3).filter(|&bf| bf != a).any(|bf| {
                let (xc, px) = project(&room.cameras[bf], &x);
                px.is_some_and(|(u, v)| {
                    let d = &room.depths[bf];
                    d.valid[v * w + u]
                        && (xc.z - d.values[v * w + u]).abs() <= 0.01 * d.values[v * w + u]
                })
            });
            agree += usize::from(hit);
        }
    }
    let want = agree as f64 / (3 * w * h) as f64;
    let got = ok(multi_view_consistency(&room, 0.01))?.1;
    ensure(
        (got - want).abs() <= QUALITY_TOL,
        format!("consistency {got} vs {want}"),
    )?;
    notes.push(format!("consistency {:.0e}", (got - want).abs()));

    // Gate boundaries: values at a threshold pass, just past it reject.
    let f = ok(extract_features(&b, &QualityConfig::default()))?;
    let t = GateThresholds::default();
    ensure(
        heuristic_gate(&f, &t).accept,
        format!("clean orbit rejected: {:?}", heuristic_gate(&f, &t).reasons),
    )?;
    let cases: [(&str, fn(&mut QualityFeatures, f64), f64, f64); 6] = [
        (
            "registration",
            |f, x| f.registration_ratio = x,
            0.995,
            0.9949,
        ),
        ("fov", |f, x| f.fov_x = x, 30.0, 29.99),
        ("fov", |f, x| f.fov_y = x, 120.0, 120.01),
        ("distortion", |f, x| f.distortion_ratio = x, 0.1, 0.1001),
        (
            "valid depth",
            |f, x| f.valid_depth_fraction = x,
            0.05,
            0.0499,
        ),
        ("linearity", |f, x| f.linearity = x, 0.95, 0.9501),
    ];
    for (word, set, at, past) in cases {
        let mut g = f.clone();
        set(&mut g, at);
        ensure(
            heuristic_gate(&g, &t).accept,
            format!("{word} = {at} should pass"),
        )?;
        set(&mut g, past);
        let v = heuristic_gate(&g, &t);
        ensure(
            !v.accept && v.reasons.len() == 1 && v.reasons[0].contains(word),
            format!("{word} = {past}: {:?}", v.reasons),
        )?;
    }
    notes.push("gate boundaries ok".into());
    Ok(format!("max deviation from oracles: {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 10

/// Area under the step function `t -> #{e < t} / n` on `[0, tau]`, summed
/// interval by interval, scaled to percent.
fn step_integral(errors: &[f64], tau: f64) -> f64 {
    let mut e: Vec<f64> = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut area = 0.0;
    for (k, &lo) in e.iter().enumerate() {
        let hi = e.get(k + 1).copied().unwrap_or(f64::INFINITY).min(tau);
        if lo < hi {
            area += (hi - lo) * (k + 1) as f64 / n;
        }
    }
    100.0 * area / tau
}

fn metric_oracles() -> Check {
    for (errors, tau) in [
        (vec![1.0, 2.0, 3.0, 5.0], 4.0),
        (vec![0.0, 0.5, 0.25, 8.0], 2.0),
        (vec![10.0, 20.0], 5.0),
        (vec![0.0; 3], 1.0),
        (vec![1.5, 0.5, 3.0, 2.0, 6.0, 0.25, 1.0, 4.0], 8.0),
    ] {
        let (got, want) = (auc_from_errors(&errors, tau), step_integral(&errors, tau));
        ensure(
            got == want,
            format!("AUC {got} vs step integral {want} for {errors:?} @ {tau}"),
        )?;
    }

    // Depth metrics pixel by pixel.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (9, 7);
    let make = |rng: &mut ChaCha8Rng| {
        DepthMap::new(
            w,
            h,
            (0..w * h).map(|_| rng.gen_range(0.2..5.0)).collect(),
            (0..w * h).map(|_| rng.gen_bool(0.85)).collect(),
        )
        .unwrap()
    };
    let pred: Vec<DepthMap<f64>> = (0..3).map(|_| make(&mut rng)).collect();
    let gt: Vec<DepthMap<f64>> = (0..3).map(|_| make(&mut rng)).collect();
    let mut px = Vec::new();
    for (p, g) in pred.iter().zip(&gt) {
        for k in 0..w * h {
            if p.valid[k] && g.valid[k] {
                px.push((p.values[k], g.values[k]));
            }
        }
    }
    let mut ratios: Vec<f64> = px.iter().map(|(p, g)| g / p).collect();
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let s = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    let abs_rel = px.iter().map(|(p, g)| (s * p - g).abs() / g).sum::<f64>() / n as f64;
    let delta = 100.0
        * px.iter()
            .filter(|(p, g)| (s * p / g).max(g / (s * p)) < 1.25)
            .count() as f64
        / n as f64;
    let dm = ok(depth_metrics(&pred, &gt, Alignment::MedianScale))?;
    ensure(
        (dm.abs_rel - abs_rel).abs() <= METRIC_TOL && (dm.delta_125 - delta).abs() <= METRIC_TOL,
        format!("depth metrics {dm:?}"),
    )?;

    // Point error: both scenes normalized by hand, then per-pixel distances.
    let gt_b = scene(SceneKind::BoxRoom, 3, 16, 6);
    let mut pred_b = gt_b.clone();
    for (i, c) in pred_b.cameras.iter_mut().enumerate() {
        c.t[0] += 0.05 * i as f64;
        c.f[1] *= 1.02;
    }
    for d in &mut pred_b.depths {
        for (k, v) in d.values.iter_mut().enumerate() {
            *v *= 1.0 + 0.03 * ((k * 7919) % 13) as f64 / 13.0;
        }
    }
    let unit_points = |b: &Bundle64| -> Vec<Vec<Option<Vector3<f64>>>> {
        let (r0, c0) = (rotation(&b.cameras[0]), center(&b.cameras[0]));
        let pts: Vec<Vec<Option<Vector3<f64>>>> = b
            .depths
            .iter()
            .zip(&b.cameras)
            .map(|(d, c)| {
                (0..d.values.len())
                    .map(|k| {
                        d.valid[k].then(|| {
                            r0 * (world_point(c, k % d.width, k / d.width, d.values[k]) - c0)
                        })
                    })
                    .collect()
            })
            .collect();
        let all: Vec<f64> = pts.iter().flatten().flatten().map(|p| p.norm()).collect();
        let scale = all.iter().sum::<f64>() / all.len() as f64;
        pts.into_iter()
            .map(|f| f.into_iter().map(|p| p.map(|x| x / scale)).collect())
            .collect()
    };
    let (pp, pg) = (unit_points(&pred_b), unit_points(&gt_b));
    let dists: Vec<f64> = pp
        .iter()
        .zip(&pg)
        .flat_map(|(a, b)| {
            a.iter()
                .zip(b)
                .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).norm()))
        })
        .collect();
    let want = dists.iter().sum::<f64>() / dists.len() as f64;
    let got = ok(point_error(&pred_b, &gt_b))?;
    ensure(
        (got - want).abs() <= METRIC_TOL,
        format!("point error {got} vs {want}"),
    )?;

    // Perfect predictions.
    let perfect = ok(evaluate(&gt_b, &gt_b, &EvalConfig::default()))?;
    ensure(
        perfect.auc.iter().all(|a| a.auc == 100.0),
        format!("perfect AUC {:?}", perfect.auc),
    )?;
    ensure(
        perfect.abs_rel == 0.0 && perfect.delta_125 == 100.0,
        "perfect depth metrics",
    )?;
    ensure(
        perfect.point_error == 0.0,
        format!("perfect point error {}", perfect.point_error),
    )?;
    Ok(format!(
        "AUC equals the step integral on 5 hand-set lists; depth and point metrics within {METRIC_TOL:e} of pixelwise oracles; perfect gives AUC 100, AbsRel 0, delta 100%, point error 0"
    ))
}

// ---------------------------------------------------------------------------
// 11

fn mvrecon(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvrecon"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`mvrecon {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let model = r#"{"num_blocks": 2, "hidden_dim": 16, "num_heads": 2, "patch_size": 8, "num_registers": 2,
        "register_attention_ratio": 0.5, "height": 32, "width": 32, "mlp_ratio": 2, "depth_upsample": 4,
        "depth_channels": 8, "camera_blocks": 1}"#;
    std::fs::write(root.join("model.json"), model).unwrap();
    std::fs::write(
        root.join("train.json"),
        format!(r#"{{"model": {model}, "min_frames": 2, "max_frames": 3}}"#),
    )
    .unwrap();

    let mut commands = 0;
    for run in ["a", "b"] {
        let d = root.join(run);
        let data = d.join("data");
        let mut stdout = Vec::new();
        for (kind, seed) in [
            ("box-room", "1"),
            ("orbit", "2"),
            ("dynamic-translating-object", "3"),
        ] {
            stdout.push(mvrecon(&[
                "make-synthetic",
                "--kind",
                kind,
                "--seed",
                seed,
                "--frames",
                "3",
                "--width",
                "32",
                "--height",
                "32",
                "--out",
                &s(data.join(kind)),
            ])?);
        }
        stdout.push(mvrecon(&[
            "flops",
            "--frames",
            "24",
            "--tokens",
            "672",
            "--blocks",
            "24",
            "--ratio",
            "0.25",
            "--out",
            &s(d.join("flops")),
        ])?);
        stdout.push(mvrecon(&[
            "demo-forward",
            "--data",
            &s(data.join("orbit")),
            "--config",
            &s(root.join("model.json")),
            "--seed",
            "4",
            "--out",
            &s(d.join("pred/orbit")),
        ])?);
        stdout.push(mvrecon(&[
            "train-toy",
            "--config",
            &s(root.join("train.json")),
            "--data",
            &s(data.clone()),
            "--steps",
            "6",
            "--seed",
            "5",
            "--out",
            &s(d.join("train")),
        ])?);
        stdout.push(mvrecon(&[
            "train-toy",
            "--config",
            &s(root.join("train.json")),
            "--data",
            &s(data.clone()),
            "--steps",
            "3",
            "--seed",
            "6",
            "--ssl",
            "--init",
            &s(d.join("train/checkpoint")),
            "--out",
            &s(d.join("ssl")),
        ])?);
        stdout.push(
            mvrecon(&[
                "eval",
                "--pred",
                &s(d.join("pred")),
                "--gt",
                &s(data.clone()),
                "--out",
                &s(d.join("eval")),
            ])
            .or_else(|_| {
                // Predictions exist only for the orbit sequence.
                mvrecon(&[
                    "eval",
                    "--pred",
                    &s(d.join("pred/orbit")),
                    "--gt",
                    &s(data.join("orbit")),
                    "--out",
                    &s(d.join("eval")),
                ])
            })?,
        );
        stdout.push(mvrecon(&[
            "filter",
            "--data",
            &s(data.clone()),
            "--out",
            &s(d.join("filter")),
        ])?);
        commands = stdout.len();
        std::fs::write(d.join("stdout.txt"), stdout.concat()).unwrap();
    }
    let (a, b) = (tree_bytes(&root.join("a")), tree_bytes(&root.join("b")));
    ensure(a.keys().eq(b.keys()), "runs produced different file sets")?;
    for (path, bytes) in &a {
        ensure(
            bytes == &b[path],
            format!("{} differs between runs", path.display()),
        )?;
    }
    Ok(format!("{commands} invocations over all 6 commands, {} output files byte-identical (stdout included)", a.len()))
}
