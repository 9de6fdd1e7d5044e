//! Finite-difference check of the composed network: encoder, both heads
//! and both losses at toy size, in 64-bit.

use numkit::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use numkit::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, EncoderPlan};
use crate::error::Result;
use crate::geometry::{PointCloud, Vec3};
use crate::heads::{branch_losses, HeadConfig, LossTargets, LossWeights};
use crate::model::{Model, ModelConfig};

pub const TOY_POINTS: usize = 32;
pub const TOY_NODES: usize = 4;

fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::toy(),
        heads: HeadConfig {
            nodes: TOY_NODES,
            reg_hidden: vec![8],
            vote_hidden: vec![6],
        },
        radius: 0.6,
        top_k: 8,
    }
}

/// Gradient check of `L_reg + L_vot` for a random toy network on a random
/// noisy arc of 32 points with 4 nodes. `corrupt` perturbs one analytic
/// gradient so the check has to fail.
pub fn composed_network(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(cfg.clone(), &mut store, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let arc = |t: f64| Vec3::new(t.cos(), t.sin(), 0.3 * t);
    let cloud = PointCloud(
        (0..TOY_POINTS)
            .map(|_| {
                let t = rng.random_range(0.0..2.0);
                arc(t) + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))
            })
            .collect(),
    );
    let c = cloud.centroid();
    let cloud = cloud.translated(&-c);
    let nodes: Vec<Vec3> = (0..TOY_NODES).map(|j| arc(2.0 * j as f64 / (TOY_NODES - 1) as f64) - c).collect();
    let plan = EncoderPlan::build(&cloud, &cfg.encoder)?;
    let targets = LossTargets::<f64>::new(&cloud.0, &nodes, cfg.radius)?;
    let f = |tape: &mut numkit::Tape<f64>, p: &ParamStore<f64>| -> numkit::Result<numkit::Var> {
        let out = model
            .forward(tape, p, &plan)
            .map_err(|e| numkit::NumError::Contract { op: "network", msg: e.to_string() })?;
        let l = branch_losses(tape, out.reg, out.heat, out.offset, &targets, LossWeights::default())
            .map_err(|e| numkit::NumError::Contract { op: "network", msg: e.to_string() })?;
        Ok(l.total)
    };
    let opts = GradCheckOptions {
        seed,
        corrupt,
        ..GradCheckOptions::default()
    };
    Ok(check_gradients("network", &store, f, &opts)?)
}
