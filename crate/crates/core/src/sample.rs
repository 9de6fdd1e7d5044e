//! Turning a stored frame into one network input: augmentation, farthest
//! point sampling to the model's point count and the occlusion mask of
//! what the network actually sees.

use numkit::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::encoder::EncoderPlan;
use crate::error::{DloError, Result};
use crate::geometry::{NodeSequence, PointCloud};
use crate::heads::LossTargets;
use crate::model::{ModelConfig, Normalization};
use crate::synth::{augment, fps_sample, occlusion_mask, AugmentConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// Exactly N points, world frame.
    pub cloud: PointCloud,
    /// Ground truth, moved with the cloud when rotation is on.
    pub nodes: NodeSequence,
    /// `true` where no input point lies within the voting radius.
    pub mask: Vec<bool>,
}

impl PreparedInput {
    pub fn occluded(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Augments `frame`, samples it down (or up) to `points` and recomputes the
/// occlusion mask against the sampled cloud.
pub fn prepare_input(
    frame: &Frame,
    aug: &AugmentConfig,
    points: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedInput> {
    let a = augment(&frame.cloud, &frame.nodes, aug, rng)?;
    let cloud = fps_sample(&a.cloud, points, rng.random())?;
    let mask = occlusion_mask(&cloud, &a.nodes, radius);
    Ok(PreparedInput {
        cloud,
        nodes: a.nodes,
        mask,
    })
}

/// Random stream for item `index` of pass `pass`, independent of how the
/// items are scheduled across threads.
pub fn item_rng(seed: u64, pass: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Training-time augmentation policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability that a sample gets occluded at all.
    pub occlusion_prob: f64,
    /// Occlusion ratios are drawn uniformly from `[0, max_occlusion]`.
    pub max_occlusion: f64,
    /// Jitter standard deviations are drawn uniformly from `[0, jitter]`, meters.
    pub jitter: f64,
    pub rotation: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            occlusion_prob: 0.5,
            max_occlusion: 0.5,
            jitter: 0.004,
            rotation: false,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            occlusion_prob: 0.0,
            max_occlusion: 0.0,
            jitter: 0.0,
            rotation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_prob)
            || !(0.0..=0.8).contains(&self.max_occlusion)
            || !(self.jitter >= 0.0)
        {
            return Err(DloError::Config(format!(
                "augmentation: occlusion_prob {} in [0, 1], max_occlusion {} in [0, 0.8], jitter {} >= 0",
                self.occlusion_prob, self.max_occlusion, self.jitter
            )));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> AugmentConfig {
        let occluded = self.occlusion_prob > 0.0 && rng.random::<f64>() < self.occlusion_prob;
        let occlusion_ratio = if occluded && self.max_occlusion > 0.0 {
            rng.random_range(0.0..self.max_occlusion)
        } else {
            0.0
        };
        let jitter = if self.jitter > 0.0 {
            rng.random_range(0.0..self.jitter)
        } else {
            0.0
        };
        AugmentConfig {
            jitter,
            rotation: self.rotation,
            occlusion_ratio,
        }
    }
}

/// One precomputed training example in the network frame.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub plan: EncoderPlan,
    pub forward: LossTargets<T>,
    pub reversed: LossTargets<T>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn build(input: &PreparedInput, cfg: &ModelConfig) -> Result<Self> {
        let norm = Normalization::of(&input.cloud);
        let cloud = norm.cloud(&input.cloud);
        let nodes = norm.nodes(&input.nodes);
        let plan = EncoderPlan::build(&cloud, &cfg.encoder)?;
        let forward = LossTargets::new(&cloud.0, &nodes.0, cfg.radius)?;
        let reversed = forward.reversed();
        Ok(Self {
            plan,
            forward,
            reversed,
        })
    }
}

/// Draws an augmentation for `frame` and builds the sample. Frames that
/// occlusion would leave unusable fall back to an unoccluded draw.
pub fn training_sample<T: Scalar>(
    frame: &Frame,
    policy: &AugmentPolicy,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample<T>> {
    let aug = policy.draw(rng);
    let input = match prepare_input(frame, &aug, cfg.points(), cfg.radius, rng) {
        Err(DloError::Unusable(_)) => {
            let clear = AugmentConfig {
                occlusion_ratio: 0.0,
                ..aug
            };
            prepare_input(frame, &clear, cfg.points(), cfg.radius, rng)?
        }
        other => other?,
    };
    TrainSample::build(&input, cfg)
}
