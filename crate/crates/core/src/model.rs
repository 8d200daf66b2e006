//! Full network: tokenizer, trunk, depth head and camera head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{self, run_trunk, tokenize, ModelConfig, TrunkOutput};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::geometry::{Camera, DepthMap, Image, SceneBundle};
use crate::heads::{self, camera_head, depth_head, CameraPrediction, DepthOutput, DepthPrediction};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

/// Parameter-name prefixes of the prediction heads.
pub const HEAD_PREFIXES: [&str; 2] = ["camera.", "depth."];

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

pub struct ForwardOutput<'t, T> {
    pub trunk: TrunkOutput<'t, T>,
    pub depth: DepthOutput<'t, T>,
    /// Activated cameras, `N x 9`.
    pub cameras: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions<T> {
    pub depths: Vec<DepthPrediction<T>>,
    pub cameras: Vec<CameraPrediction<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        aggregator::init_params(&config, &mut params, &mut rng);
        heads::init_params(&config, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn set_heads_trainable(&mut self, trainable: bool) {
        for p in HEAD_PREFIXES {
            self.params.set_trainable(p, trainable);
        }
    }

    /// Runs the network with frame 0 as the reference.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        images: &[Image<T>],
    ) -> Result<ForwardOutput<'t, T>> {
        let flags: Vec<bool> = (0..images.len()).map(|i| i == 0).collect();
        let tokens = tokenize(tape, images, &flags, &self.config, bound)?;
        let trunk = run_trunk(tokens, &self.config, bound);
        let depth = depth_head(&trunk.taps, &self.config, bound)?;
        let cameras = camera_head(&trunk.final_state, &self.config, bound);
        Ok(ForwardOutput {
            trunk,
            depth,
            cameras,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn predict(&self, images: &[Image<T>]) -> Result<Predictions<T>> {
        let tape = Tape::new();
        let bound = self.params.bind_constants(&tape);
        let out = self.forward(&tape, &bound, images)?;
        Ok(Predictions {
            depths: out.depth.to_predictions(),
            cameras: CameraPrediction::from_rows(&out.cameras.value()),
        })
    }
}

impl<T: Scalar> Predictions<T> {
    /// Packs predictions as a labeled bundle (every pixel valid, confidence
    /// attached). Degenerate cameras fall back to the identity rotation.
    pub fn to_bundle(&self, images: &[Image<T>]) -> SceneBundle<T> {
        let (w, h) = (images[0].width, images[0].height);
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                c.camera(w, h).unwrap_or_else(|_| {
                    let r = c.raw;
                    Camera {
                        t: [r[4], r[5], r[6]],
                        ..Camera::identity(w, h, [r[7], r[8]])
                    }
                })
            })
            .collect();
        let depths = self
            .depths
            .iter()
            .map(|d| DepthMap {
                width: w,
                height: h,
                values: d.depth.clone(),
                valid: vec![true; w * h],
            })
            .collect();
        SceneBundle {
            images: images.to_vec(),
            cameras,
            depths,
            dynamic: None,
            confidence: Some(self.depths.iter().map(|d| d.confidence.clone()).collect()),
        }
    }
}
