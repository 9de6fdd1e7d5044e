//! The full estimator: encoder, regression head and voting head, input
//! normalization, inference and checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use numkit::checkpoint::Checkpoint;
use numkit::{AdamState, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderPlan};
use crate::error::{DloError, Result};
use crate::geometry::{NodeSequence, PointCloud, Vec3};
use crate::heads::{field_from_tensors, vote, HeadConfig, RegressionHead, VotingField, VotingHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    /// Voting neighborhood radius r in the network frame.
    pub radius: f64,
    /// Requested number of voting points; capped at N/4.
    pub top_k: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, nodes: usize) -> Self {
        Self {
            encoder,
            heads: HeadConfig {
                nodes,
                reg_hidden: vec![256],
                vote_hidden: vec![64],
            },
            radius: 0.02,
            top_k: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.heads.nodes < 2 {
            return Err(DloError::Config(format!("{} nodes, at least 2 required", self.heads.nodes)));
        }
        if !(self.radius > 0.0) || self.top_k == 0 {
            return Err(DloError::Config("voting radius and top-k must be positive".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.encoder.points
    }

    pub fn nodes(&self) -> usize {
        self.heads.nodes
    }

    /// `min(top_k, N / 4)`, at least 1.
    pub fn effective_k(&self) -> usize {
        self.top_k.min(self.encoder.points / 4).max(1)
    }
}

/// Translation into the network frame; the scale is fixed at one meter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn of(cloud: &PointCloud) -> Self {
        Self {
            centroid: cloud.centroid(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid) / self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid
    }

    pub fn cloud(&self, c: &PointCloud) -> PointCloud {
        PointCloud(c.0.iter().map(|p| self.apply(p)).collect())
    }

    pub fn nodes(&self, n: &NodeSequence) -> NodeSequence {
        NodeSequence(n.0.iter().map(|p| self.apply(p)).collect())
    }

    pub fn restore(&self, n: &NodeSequence) -> NodeSequence {
        NodeSequence(n.0.iter().map(|p| self.invert(p)).collect())
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[M, 3]`.
    pub reg: Var,
    /// `[N, M]`.
    pub heat: Var,
    /// `[N M, 3]`.
    pub offset: Var,
}

/// Both branch estimates for one cloud, world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub reg: NodeSequence,
    pub vot: NodeSequence,
    pub field: VotingField,
    pub visibility: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub reg: RegressionHead,
    pub vote: VotingHead,
}

impl Model {
    /// Builds the layers and registers freshly initialized weights.
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), store, &mut rng)?;
        let c = config.encoder.out_channels();
        let reg = RegressionHead::new(store, c, &config.heads, &mut rng);
        let vote = VotingHead::new(store, c, &config.heads, &mut rng);
        Ok(Self {
            config,
            encoder,
            reg,
            vote,
        })
    }

    /// Forward pass on a cloud already in the network frame.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plan: &EncoderPlan,
    ) -> Result<ForwardVars> {
        let features = self.encoder.encode(tape, store, plan)?;
        let reg = self.reg.forward(tape, store, features)?;
        let (heat, offset) = self.vote.forward(tape, store, features)?;
        Ok(ForwardVars { reg, heat, offset })
    }

    /// Regression nodes, voted nodes and visibility for a cloud of exactly
    /// N points, world frame.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, cloud: &PointCloud) -> Result<BranchOutputs> {
        let norm = Normalization::of(cloud);
        let local = norm.cloud(cloud);
        let plan = EncoderPlan::build(&local, &self.config.encoder)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &plan)?;
        let reg_t = tape.value(out.reg);
        let reg = NodeSequence(
            (0..reg_t.rows())
                .map(|j| {
                    let r = reg_t.row(j);
                    Vec3::new(r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy())
                })
                .collect(),
        );
        let field = field_from_tensors(tape.value(out.heat), tape.value(out.offset));
        let voted = vote(&local.0, &field, self.config.radius, self.config.effective_k())?;
        let outputs = BranchOutputs {
            reg: norm.restore(&reg),
            vot: norm.restore(&voted.nodes),
            field,
            visibility: voted.visibility,
        };
        if !outputs.reg.all_finite() || !outputs.vot.all_finite() {
            return Err(DloError::Numerical("non-finite network output".into()));
        }
        Ok(outputs)
    }
}

/// Free-form run state stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init_seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val_error: Option<f64>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default)]
    pub run: serde_json::Value,
}

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    adam: Option<&AdamState<f32>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor<f32>)> = store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect();
    if let Some(state) = adam {
        for ((_, name, _), (m, v)) in store.iter().zip(state.m.iter().zip(&state.v)) {
            entries.push((format!("{MOMENT1}{name}"), m.clone()));
            entries.push((format!("{MOMENT2}{name}"), v.clone()));
        }
    }
    let ck = Checkpoint {
        meta: serde_json::to_string(meta).map_err(|e| DloError::Format(e.to_string()))?,
        entries,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        ck.write_to(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)
        .map_err(|e| DloError::Format(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let ck = Checkpoint::read_from(BufReader::new(file))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&ck.meta).map_err(|e| DloError::Format(format!("checkpoint metadata: {e}")))?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(meta.model.clone(), &mut store, meta.init_seed)?;
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = ck
            .get(name)
            .ok_or_else(|| DloError::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(DloError::Format(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    };
    for (id, name) in &ids {
        let shape = store.get(*id).shape().to_vec();
        *store.get_mut(*id) = take(name, &shape)?;
    }
    let has_moments = ck.entries.iter().any(|(n, _)| n.starts_with(MOMENT1));
    let adam = if has_moments {
        let mut state = AdamState::for_params(&store);
        state.step = meta.adam_step;
        for (k, (id, name)) in ids.iter().enumerate() {
            let shape = store.get(*id).shape().to_vec();
            state.m[k] = take(&format!("{MOMENT1}{name}"), &shape)?;
            state.v[k] = take(&format!("{MOMENT2}{name}"), &shape)?;
        }
        Some(state)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        model,
        store,
        adam,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        let mut c = ModelConfig::new(EncoderConfig::toy(), 4);
        c.heads.reg_hidden = vec![8];
        c.heads.vote_hidden = vec![6];
        c
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud(
            (0..n)
                .map(|i| Vec3::new(i as f64 * 0.02, rng.random_range(-0.01..0.01), 0.3))
                .collect(),
        )
    }

    #[test]
    fn inference_shapes_and_ranges() {
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(toy_config(), &mut store, 1).unwrap();
        let out = model.infer(&store, &cloud(32, 2)).unwrap();
        assert_eq!(out.reg.len(), 4);
        assert_eq!(out.vot.len(), 4);
        assert!(out.field.heat.iter().all(|&h| h > 0.0 && h < 1.0));
        for u in &out.field.offset {
            assert!((u.norm() - 1.0).abs() < 1e-6);
        }
        assert!(out.visibility.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(model.infer(&store, &cloud(31, 2)).is_err());
    }

    #[test]
    fn regression_ignores_point_order() {
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(toy_config(), &mut store, 3).unwrap();
        let c = cloud(32, 4);
        let mut shuffled = c.clone();
        shuffled.0.reverse();
        shuffled.0.swap(3, 17);
        let a = model.infer(&store, &c).unwrap();
        let b = model.infer(&store, &shuffled).unwrap();
        for (p, q) in a.reg.0.iter().zip(&b.reg.0) {
            assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(toy_config(), &mut store, 5).unwrap();
        let mut adam = AdamState::for_params(&store);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        let meta = CheckpointMeta {
            model: model.config.clone(),
            init_seed: 5,
            epoch: 3,
            adam_step: 7,
            best_val_error: Some(0.1),
            run: serde_json::json!({"lr": 0.01}),
        };
        save_checkpoint(&path, &store, Some(&adam), &meta).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.store.iter()) {
            assert_eq!((n1, t1), (n2, t2));
        }
        assert_eq!(back.adam.unwrap(), adam);

        let c = cloud(32, 6);
        assert_eq!(model.infer(&store, &c).unwrap(), back.model.infer(&back.store, &c).unwrap());
    }
}
