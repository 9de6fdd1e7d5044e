//! Hierarchical point-set encoder: set abstraction levels (farthest point
//! sampling, ball grouping, shared MLP, max pool) followed by feature
//! propagation levels (inverse squared distance interpolation, skip
//! concatenation, shared MLP) back to the input resolution.
//!
//! All neighborhood geometry depends only on the input cloud and is
//! computed up front into an [`EncoderPlan`]; the differentiable part runs
//! on a [`Tape`].

use numkit::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::synth::{fps_indices, lexicographic_min};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaLevelConfig {
    pub centroids: usize,
    pub radius: f64,
    pub group: usize,
    pub mlp: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input cloud size N.
    pub points: usize,
    pub levels: Vec<SaLevelConfig>,
    /// MLP widths per propagation level, coarsest first.
    pub propagation: Vec<Vec<usize>>,
}

fn sa(centroids: usize, radius: f64, group: usize, mlp: &[usize]) -> SaLevelConfig {
    SaLevelConfig {
        centroids,
        radius,
        group,
        mlp: mlp.to_vec(),
    }
}

impl EncoderConfig {
    /// CPU-sized configuration, N = 256, 128 output channels.
    pub fn desk() -> Self {
        Self {
            points: 256,
            levels: vec![
                sa(256, 0.05, 16, &[16, 32]),
                sa(64, 0.1, 16, &[32, 64]),
                sa(16, 0.2, 16, &[64, 96]),
                sa(8, 0.4, 16, &[96, 128]),
            ],
            propagation: vec![vec![128], vec![96], vec![64], vec![128]],
        }
    }

    /// Full-size segmentation layout, N = 1024, 1024 output channels.
    pub fn full() -> Self {
        Self {
            points: 1024,
            levels: vec![
                sa(1024, 0.05, 32, &[32, 32, 64]),
                sa(256, 0.1, 32, &[64, 64, 128]),
                sa(64, 0.2, 32, &[128, 128, 256]),
                sa(16, 0.4, 32, &[256, 256, 512]),
            ],
            propagation: vec![vec![256], vec![256], vec![512], vec![1024]],
        }
    }

    /// Tiny layout for gradient checks, N = 32.
    pub fn toy() -> Self {
        Self {
            points: 32,
            levels: vec![
                sa(16, 0.3, 6, &[6]),
                sa(8, 0.5, 4, &[8]),
                sa(4, 0.8, 4, &[8]),
                sa(2, 1.5, 4, &[8]),
            ],
            propagation: vec![vec![8], vec![6], vec![6], vec![8]],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(DloError::Config(format!("unknown encoder preset `{other}`"))),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.propagation
            .last()
            .and_then(|l| l.last())
            .copied()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DloError::Config(m));
        if self.levels.is_empty() || self.levels.len() != self.propagation.len() {
            return err("encoder needs as many propagation as abstraction levels".into());
        }
        let mut prev = self.points;
        for (i, l) in self.levels.iter().enumerate() {
            let decreasing = if i == 0 { l.centroids <= prev } else { l.centroids < prev };
            if l.centroids == 0 || !decreasing {
                return err(format!("level {i}: centroid counts must decrease from N"));
            }
            if !(l.radius > 0.0) || l.group == 0 || l.mlp.is_empty() {
                return err(format!("level {i}: radius, group and mlp must be non-empty"));
            }
            prev = l.centroids;
        }
        if self.propagation.iter().any(Vec::is_empty) {
            return err("propagation widths must be non-empty".into());
        }
        Ok(())
    }
}

/// Dense layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect(),
        )
        .expect("shape");
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }
}

/// Stack of `Linear + ReLU`.
pub fn mlp_forward<T: Scalar>(
    layers: &[Linear],
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mut x: Var,
) -> Result<Var> {
    for l in layers {
        let y = l.forward(tape, store, x)?;
        x = tape.relu(y);
    }
    Ok(x)
}

fn build_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Linear> {
    let mut fan_in = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let l = Linear::new(store, &format!("{prefix}.l{i}"), fan_in, w, rng);
            fan_in = w;
            l
        })
        .collect()
}

/// Grouping of one abstraction level over the previous level's point list.
#[derive(Clone, Debug)]
pub struct LevelPlan {
    /// Indices into the previous level's list.
    pub centroids: Vec<usize>,
    /// `centroids.len() * group` indices into the previous level's list.
    pub neighbors: Vec<usize>,
    pub group: usize,
    /// Neighbor minus centroid, divided by the ball radius, row-major.
    pub relative: Vec<f64>,
}

/// Three-nearest-neighbor interpolation weights from a coarse to a fine list.
#[derive(Clone, Debug)]
pub struct InterpPlan {
    pub k: usize,
    pub index: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Input-dependent geometry of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderPlan {
    /// Input cloud in its original order.
    pub input: Vec<Vec3>,
    /// Level 0 is the input in canonical farthest-point order; level k is
    /// the centroid list of abstraction level k.
    pub level_points: Vec<Vec<Vec3>>,
    pub levels: Vec<LevelPlan>,
    /// Interpolations coarsest first; the last one targets `input`.
    pub interps: Vec<InterpPlan>,
}

/// First `group` points (in list order) strictly within `radius` of each
/// centroid; underfull groups are padded with the centroid itself.
pub fn ball_query(points: &[Vec3], centroids: &[usize], radius: f64, group: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centroids.len() * group);
    for &c in centroids {
        let center = points[c];
        let start = out.len();
        for (i, p) in points.iter().enumerate() {
            if (p - center).norm_squared() < r2 {
                out.push(i);
                if out.len() - start == group {
                    break;
                }
            }
        }
        while out.len() - start < group {
            out.push(c);
        }
    }
    out
}

/// Inverse squared distance weights over the `min(3, coarse)` nearest
/// coarse points, normalized to sum to one. Distances below 1e-10 are
/// clamped.
pub fn three_nn_weights(fine: &[Vec3], coarse: &[Vec3]) -> InterpPlan {
    let k = coarse.len().min(3);
    let mut index = Vec::with_capacity(fine.len() * k);
    let mut weights = Vec::with_capacity(fine.len() * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for p in fine {
        best.clear();
        for (j, q) in coarse.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if best.len() < k || d2 < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(bd, _)| bd <= d2);
                best.insert(pos, (d2, j));
                best.truncate(k);
            }
        }
        let inv: Vec<f64> = best
            .iter()
            .map(|&(d2, _)| {
                let d = d2.sqrt().max(1e-10);
                1.0 / (d * d)
            })
            .collect();
        let total: f64 = inv.iter().sum();
        for (&(_, j), w) in best.iter().zip(&inv) {
            index.push(j);
            weights.push(w / total);
        }
    }
    InterpPlan { k, index, weights }
}

impl EncoderPlan {
    pub fn build(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<Self> {
        if cloud.len() != cfg.points {
            return Err(DloError::Invalid(format!(
                "encoder expects {} points, cloud has {}",
                cfg.points,
                cloud.len()
            )));
        }
        let input = cloud.0.clone();
        let canon = fps_indices(&input, input.len(), lexicographic_min(&input));
        let mut level_points = vec![canon.iter().map(|&i| input[i]).collect::<Vec<_>>()];
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for l in &cfg.levels {
            let prev = level_points.last().expect("level 0");
            // list[0] of every level is the lexicographic minimum of the input
            let centroids = fps_indices(prev, l.centroids, 0);
            let neighbors = ball_query(prev, &centroids, l.radius, l.group);
            let mut relative = Vec::with_capacity(neighbors.len() * 3);
            for (g, &c) in centroids.iter().enumerate() {
                for &n in &neighbors[g * l.group..(g + 1) * l.group] {
                    let d = (prev[n] - prev[c]) / l.radius;
                    relative.extend_from_slice(&[d.x, d.y, d.z]);
                }
            }
            let pts = centroids.iter().map(|&c| prev[c]).collect();
            levels.push(LevelPlan {
                centroids,
                neighbors,
                group: l.group,
                relative,
            });
            level_points.push(pts);
        }
        let depth = cfg.levels.len();
        let mut interps = Vec::with_capacity(depth);
        for k in (1..depth).rev() {
            interps.push(three_nn_weights(&level_points[k], &level_points[k + 1]));
        }
        interps.push(three_nn_weights(&input, &level_points[1]));
        Ok(Self {
            input,
            level_points,
            levels,
            interps,
        })
    }
}

fn xyz_tensor<T: Scalar>(points: &[Vec3]) -> Tensor<T> {
    Tensor::from_fn(points.len(), 3, |i, j| T::from_f64_lossy(points[i][j]))
}

/// One abstraction level: group, shared MLP over `[relative xyz, features]`,
/// max pool per group.
pub fn set_abstraction<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &[Linear],
    features: Var,
    plan: &LevelPlan,
) -> Result<Var> {
    let rows = plan.neighbors.len();
    let rel = Tensor::from_vec(
        vec![rows, 3],
        plan.relative.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )?;
    let rel = tape.constant(rel);
    let grouped = tape.gather_rows(features, plan.neighbors.clone())?;
    let x = tape.concat_cols(rel, grouped)?;
    let x = mlp_forward(mlp, tape, store, x)?;
    Ok(tape.max_pool_over_set(x, plan.group)?)
}

/// One propagation level: interpolate coarse features onto the fine list,
/// append the fine skip features, shared MLP.
pub fn feature_propagation<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &[Linear],
    coarse: Var,
    skip: Var,
    plan: &InterpPlan,
) -> Result<Var> {
    let w = plan.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let up = tape.weighted_gather(coarse, plan.k, plan.index.clone(), w)?;
    let x = tape.concat_cols(up, skip)?;
    mlp_forward(mlp, tape, store, x)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub abstraction: Vec<Vec<Linear>>,
    pub propagation: Vec<Vec<Linear>>,
}

impl Encoder {
    pub fn new<T: Scalar>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut channels = vec![3usize];
        let mut abstraction = Vec::new();
        for (i, l) in config.levels.iter().enumerate() {
            let input = 3 + channels[i];
            abstraction.push(build_mlp(store, &format!("enc.sa{i}"), input, &l.mlp, rng));
            channels.push(*l.mlp.last().expect("validated"));
        }
        let depth = config.levels.len();
        let mut propagation = Vec::new();
        let mut up = channels[depth];
        for (s, widths) in config.propagation.iter().enumerate() {
            // stage s lands on level depth-1-s; level 0 skip is the raw xyz
            let skip = channels[depth - 1 - s];
            propagation.push(build_mlp(store, &format!("enc.fp{s}"), up + skip, widths, rng));
            up = *widths.last().expect("validated");
        }
        Ok(Self {
            config,
            abstraction,
            propagation,
        })
    }

    /// Per-point features `[N, C_out]`, row i for input point i.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, plan: &EncoderPlan) -> Result<Var> {
        let mut feats = vec![tape.constant(xyz_tensor(&plan.level_points[0]))];
        for (mlp, lp) in self.abstraction.iter().zip(&plan.levels) {
            let prev = *feats.last().expect("level 0");
            feats.push(set_abstraction(tape, store, mlp, prev, lp)?);
        }
        let depth = self.abstraction.len();
        let mut up = feats[depth];
        for (s, (mlp, ip)) in self.propagation.iter().zip(&plan.interps).enumerate() {
            let target = depth - 1 - s;
            let skip = if target == 0 {
                tape.constant(xyz_tensor(&plan.input))
            } else {
                feats[target]
            };
            up = feature_propagation(tape, store, mlp, up, skip, ip)?;
        }
        Ok(up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.05..0.05)))
                .collect(),
        )
    }

    #[test]
    fn presets_validate() {
        for name in ["desk", "full", "toy"] {
            let c = EncoderConfig::preset(name).unwrap();
            c.validate().unwrap();
        }
        assert_eq!(EncoderConfig::desk().out_channels(), 128);
        assert_eq!(EncoderConfig::full().out_channels(), 1024);
        assert!(EncoderConfig::preset("huge").is_err());
        let mut bad = EncoderConfig::desk();
        bad.levels[2].centroids = 64;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn interpolation_weights_are_convex_and_exact_on_hits() {
        let fine = random_cloud(40, 1).0;
        let coarse = random_cloud(9, 2).0;
        let plan = three_nn_weights(&fine, &coarse);
        for w in plan.weights.chunks(3) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let hit = three_nn_weights(&coarse[4..5], &coarse);
        assert_eq!(hit.index[0], 4);
        assert!((hit.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn propagation_of_constant_features_is_constant() {
        let fine = random_cloud(20, 3).0;
        let coarse = random_cloud(6, 4).0;
        let plan = three_nn_weights(&fine, &coarse);
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[6, 4], 0.7));
        let up = tape
            .weighted_gather(c, plan.k, plan.index.clone(), plan.weights.clone())
            .unwrap();
        assert!(tape.value(up).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_group_over_all_points_is_the_max_of_the_mlp() {
        let cloud = random_cloud(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mlp = build_mlp(&mut store, "t", 6, &[5], &mut rng);
        let plan = LevelPlan {
            centroids: vec![0],
            neighbors: (0..10).collect(),
            group: 10,
            relative: cloud.0.iter().flat_map(|p| {
                let d = (p - cloud.0[0]) / 10.0;
                [d.x, d.y, d.z]
            }).collect(),
        };
        let mut tape = Tape::new();
        let f = tape.constant(xyz_tensor(&cloud.0));
        let out = set_abstraction(&mut tape, &store, &mlp, f, &plan).unwrap();
        let pooled = tape.value(out).clone();

        let rel = tape.constant(Tensor::from_vec(vec![10, 3], plan.relative.clone()).unwrap());
        let x = tape.concat_cols(rel, f).unwrap();
        let per_point = mlp_forward(&mlp, &mut tape, &store, x).unwrap();
        let pp = tape.value(per_point);
        for j in 0..5 {
            let m = (0..10).map(|i| pp.row(i)[j]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pooled.data()[j], m);
        }
    }

    #[test]
    fn ball_groups_stay_inside_the_radius() {
        let cloud = random_cloud(100, 6);
        let centroids = fps_indices(&cloud.0, 10, 0);
        let groups = ball_query(&cloud.0, &centroids, 0.15, 8);
        for (g, &c) in centroids.iter().enumerate() {
            for &n in &groups[g * 8..(g + 1) * 8] {
                assert!((cloud.0[n] - cloud.0[c]).norm() < 0.15);
            }
        }
    }

    #[test]
    fn two_level_toy_shapes() {
        let cfg = EncoderConfig {
            points: 16,
            levels: vec![sa(8, 0.4, 4, &[5]), sa(4, 0.8, 4, &[7])],
            propagation: vec![vec![6], vec![9]],
        };
        let cloud = random_cloud(16, 7);
        let plan = EncoderPlan::build(&cloud, &cfg).unwrap();
        assert_eq!(plan.level_points[2].len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let l0 = tape.constant(xyz_tensor(&plan.level_points[0]));
        let l1 = set_abstraction(&mut tape, &store, &enc.abstraction[0], l0, &plan.levels[0]).unwrap();
        let l2 = set_abstraction(&mut tape, &store, &enc.abstraction[1], l1, &plan.levels[1]).unwrap();
        assert_eq!(tape.value(l2).shape(), &[4, 7]);
        let out = enc.encode(&mut tape, &store, &plan).unwrap();
        assert_eq!(tape.value(out).shape(), &[16, 9]);
        let wrong = random_cloud(15, 7);
        assert!(EncoderPlan::build(&wrong, &cfg).is_err());
    }
}
