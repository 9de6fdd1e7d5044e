//! The two estimation branches on top of the encoder features: a global
//! regression decoder and point-wise heatmap/offset voting, with their
//! ground truth, losses and voting inference.

use numkit::{ParamStore, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{mlp_forward, Linear};
use crate::error::{DloError, Result};
use crate::geometry::{NodeSequence, Vec3};

/// Heatmap values and unit offsets for every (point, node) pair, stored
/// row-major with index `i * nodes + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct VotingField {
    pub points: usize,
    pub nodes: usize,
    pub heat: Vec<f64>,
    pub offset: Vec<Vec3>,
}

impl VotingField {
    pub fn heat_at(&self, i: usize, j: usize) -> f64 {
        self.heat[i * self.nodes + j]
    }

    pub fn offset_at(&self, i: usize, j: usize) -> Vec3 {
        self.offset[i * self.nodes + j]
    }

    /// Node order reversed, matching a reversed node sequence.
    pub fn reversed_nodes(&self) -> Self {
        let m = self.nodes;
        let mut heat = Vec::with_capacity(self.heat.len());
        let mut offset = Vec::with_capacity(self.offset.len());
        for i in 0..self.points {
            for j in (0..m).rev() {
                heat.push(self.heat[i * m + j]);
                offset.push(self.offset[i * m + j]);
            }
        }
        Self {
            heat,
            offset,
            ..*self
        }
    }
}

/// Ground-truth field: `H = 1 - d/r` and `U = (y - x)/d` for `d < r`,
/// zero otherwise. A point exactly on a node gets `H = 1`, `U = 0`.
pub fn gt_voting_field(cloud: &[Vec3], nodes: &[Vec3], r: f64) -> Result<VotingField> {
    if !(r > 0.0) {
        return Err(DloError::Invalid(format!("voting radius {r} must be positive")));
    }
    let m = nodes.len();
    let mut heat = vec![0.0; cloud.len() * m];
    let mut offset = vec![Vec3::zeros(); cloud.len() * m];
    for (i, x) in cloud.iter().enumerate() {
        for (j, y) in nodes.iter().enumerate() {
            let d = (y - x).norm();
            if d < r {
                heat[i * m + j] = 1.0 - d / r;
                if d > 0.0 {
                    offset[i * m + j] = (y - x) / d;
                }
            }
        }
    }
    Ok(VotingField {
        points: cloud.len(),
        nodes: m,
        heat,
        offset,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutcome {
    pub nodes: NodeSequence,
    /// `max_i H_ij` per node; one minus the occlusion possibility.
    pub visibility: Vec<f64>,
}

/// Candidate `y_ij = r (1 - H_ij) U_ij + x_i`.
pub fn candidate(x: &Vec3, heat: f64, offset: &Vec3, r: f64) -> Vec3 {
    x + offset * (r * (1.0 - heat))
}

/// Heat-weighted mean of the `k` candidates with the highest heat per node.
///
/// Ties in heat are broken by point index. A node whose selected heats sum
/// to zero gets the plain mean of its candidates and visibility 0.
pub fn vote(cloud: &[Vec3], field: &VotingField, r: f64, k: usize) -> Result<VoteOutcome> {
    let n = cloud.len();
    if field.points != n {
        return Err(DloError::Invalid(format!(
            "voting field has {} points, cloud has {n}",
            field.points
        )));
    }
    if k == 0 || k > n {
        return Err(DloError::Invalid(format!("top-k {k} outside [1, {n}]")));
    }
    let m = field.nodes;
    let mut nodes = Vec::with_capacity(m);
    let mut visibility = Vec::with_capacity(m);
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..m {
        let h = |i: usize| field.heat[i * m + j];
        let by_heat = |a: &usize, b: &usize| h(*b).total_cmp(&h(*a)).then(a.cmp(b));
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        if k < n {
            order.select_nth_unstable_by(k - 1, by_heat);
        }
        let top = &mut order[..k];
        top.sort_unstable_by(by_heat);
        let v = h(top[0]).max(0.0);
        let mut acc = Vec3::zeros();
        let mut wsum = 0.0;
        for &i in top.iter() {
            let c = candidate(&cloud[i], h(i), &field.offset[i * m + j], r);
            acc += c * h(i);
            wsum += h(i);
        }
        if wsum > 0.0 {
            nodes.push(acc / wsum);
            visibility.push(v.min(1.0));
        } else {
            let mean = top
                .iter()
                .map(|&i| candidate(&cloud[i], h(i), &field.offset[i * m + j], r))
                .sum::<Vec3>()
                / k as f64;
            nodes.push(mean);
            visibility.push(0.0);
        }
    }
    Ok(VoteOutcome {
        nodes: NodeSequence(nodes),
        visibility,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub nodes: usize,
    /// Hidden widths of the regression decoder.
    pub reg_hidden: Vec<usize>,
    /// Hidden widths of each point-wise head (heatmap and offset).
    pub vote_hidden: Vec<usize>,
}

/// Global max pool, then fully connected layers to `M x 3`.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub nodes: usize,
}

impl RegressionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut fan_in = channels;
        let hidden = cfg
            .reg_hidden
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(store, &format!("reg.l{i}"), fan_in, w, rng);
                fan_in = w;
                l
            })
            .collect();
        let out = Linear::new(store, "reg.out", fan_in, cfg.nodes * 3, rng);
        Self {
            hidden,
            out,
            nodes: cfg.nodes,
        }
    }

    /// `[N, C] -> [M, 3]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let n = tape.value(features).rows();
        let global = tape.max_pool_over_set(features, n)?;
        let h = mlp_forward(&self.hidden, tape, store, global)?;
        let y = self.out.forward(tape, store, h)?;
        Ok(tape.reshape(y, &[self.nodes, 3])?)
    }
}

/// Shared point-wise layers, then sigmoid heatmaps and normalized offsets.
#[derive(Clone, Debug)]
pub struct VotingHead {
    pub heat_hidden: Vec<Linear>,
    pub heat: Linear,
    pub offset_hidden: Vec<Linear>,
    pub offset: Linear,
    pub nodes: usize,
}

impl VotingHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        cfg: &HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stack = |prefix: &str, out: usize, rng: &mut ChaCha8Rng| {
            let mut fan_in = channels;
            let hidden: Vec<Linear> = cfg
                .vote_hidden
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let l = Linear::new(store, &format!("{prefix}.l{i}"), fan_in, w, rng);
                    fan_in = w;
                    l
                })
                .collect();
            let last = Linear::new(store, &format!("{prefix}.out"), fan_in, out, rng);
            (hidden, last)
        };
        let (heat_hidden, heat) = stack("heat", cfg.nodes, rng);
        let (offset_hidden, offset) = stack("offset", cfg.nodes * 3, rng);
        Self {
            heat_hidden,
            heat,
            offset_hidden,
            offset,
            nodes: cfg.nodes,
        }
    }

    /// `[N, C] -> ([N, M] heat, [N * M, 3] unit offsets)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.value(features).rows();
        let h = mlp_forward(&self.heat_hidden, tape, store, features)?;
        let h = self.heat.forward(tape, store, h)?;
        let heat = tape.sigmoid(h);
        let o = mlp_forward(&self.offset_hidden, tape, store, features)?;
        let o = self.offset.forward(tape, store, o)?;
        let o = tape.reshape(o, &[n * self.nodes, 3])?;
        let offset = tape.l2_normalize_rows(o)?;
        Ok((heat, offset))
    }
}

/// Constant targets for one sample, in the network frame.
#[derive(Clone, Debug)]
pub struct LossTargets<T> {
    pub nodes: Tensor<T>,
    pub heat: Tensor<T>,
    pub offset: Tensor<T>,
    /// Per-element weights of the offset term: `1 / (N M)` where the ground
    /// truth offset is a unit vector, zero where it is the zero vector.
    pub offset_weights: Vec<T>,
}

impl<T: Scalar> LossTargets<T> {
    pub fn new(cloud: &[Vec3], nodes: &[Vec3], r: f64) -> Result<Self> {
        let field = gt_voting_field(cloud, nodes, r)?;
        Ok(Self::from_field(nodes, &field))
    }

    pub fn from_field(nodes: &[Vec3], field: &VotingField) -> Self {
        let f = T::from_f64_lossy;
        let scale = 1.0 / (field.points * field.nodes).max(1) as f64;
        let heat = Tensor::from_fn(field.points, field.nodes, |i, j| f(field.heat_at(i, j)));
        let offset = Tensor::from_fn(field.offset.len(), 3, |e, c| f(field.offset[e][c]));
        let offset_weights = field
            .offset
            .iter()
            .flat_map(|u| {
                let w = if u.norm_squared() > 0.0 { scale } else { 0.0 };
                [f(w); 3]
            })
            .collect();
        Self {
            nodes: Tensor::from_fn(nodes.len(), 3, |i, c| f(nodes[i][c])),
            heat,
            offset,
            offset_weights,
        }
    }

    /// Targets for the same sample with the node order reversed.
    pub fn reversed(&self) -> Self {
        let m = self.nodes.rows();
        let n = self.heat.rows();
        let rev_rows = |t: &Tensor<T>, block: usize| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for b in 0..t.rows() / block {
                for j in (0..block).rev() {
                    data.extend_from_slice(t.row(b * block + j));
                }
            }
            Tensor::from_vec(vec![t.rows(), cols], data).expect("shape")
        };
        let heat = Tensor::from_fn(n, m, |i, j| self.heat.row(i)[m - 1 - j]);
        let mut offset_weights = Vec::with_capacity(self.offset_weights.len());
        for i in 0..n {
            for j in (0..m).rev() {
                let e = (i * m + j) * 3;
                offset_weights.extend_from_slice(&self.offset_weights[e..e + 3]);
            }
        }
        Self {
            nodes: rev_rows(&self.nodes, m),
            heat,
            offset: rev_rows(&self.offset, m),
            offset_weights,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub vot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reg: 1.0, vot: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reg: Var,
    pub vot: Var,
    pub total: Var,
}

/// `L_reg` is the mean squared node error; `L_vot` is the heatmap squared
/// error plus the offset squared error, both averaged over the `N M` pairs.
///
/// Predicted offsets are unit vectors, so against a zero target their
/// squared error is the constant 1; those terms are dropped, which shifts
/// the loss by a constant without changing its gradient.
pub fn branch_losses<T: Scalar>(
    tape: &mut Tape<T>,
    reg: Var,
    heat: Var,
    offset: Var,
    targets: &LossTargets<T>,
    weights: LossWeights,
) -> Result<LossVars> {
    let l_reg = tape.mse(reg, targets.nodes.clone())?;
    let l_heat = tape.mse(heat, targets.heat.clone())?;
    let l_off = tape.weighted_sse(offset, targets.offset.clone(), Some(targets.offset_weights.clone()))?;
    let l_vot = tape.add(l_heat, l_off)?;
    let a = tape.scale(l_reg, T::from_f64_lossy(weights.reg));
    let b = tape.scale(l_vot, T::from_f64_lossy(weights.vot));
    let total = tape.add(a, b)?;
    Ok(LossVars {
        reg: l_reg,
        vot: l_vot,
        total,
    })
}

/// Loss under whichever node order of the ground truth fits the prediction
/// better; returns the losses and whether the reversed order was chosen.
pub fn symmetric_losses<T: Scalar>(
    tape: &mut Tape<T>,
    reg: Var,
    heat: Var,
    offset: Var,
    forward: &LossTargets<T>,
    reversed: &LossTargets<T>,
    weights: LossWeights,
) -> Result<(LossVars, bool)> {
    let f = branch_losses(tape, reg, heat, offset, forward, weights)?;
    let r = branch_losses(tape, reg, heat, offset, reversed, weights)?;
    let fv = tape.value(f.total).data()[0];
    let rv = tape.value(r.total).data()[0];
    Ok(if rv < fv { (r, true) } else { (f, false) })
}

/// Reads `[N, M]` heat and `[N M, 3]` offsets off a tape.
pub fn field_from_tensors<T: Scalar>(heat: &Tensor<T>, offset: &Tensor<T>) -> VotingField {
    let (n, m) = (heat.rows(), heat.cols());
    VotingField {
        points: n,
        nodes: m,
        heat: heat.data().iter().map(|v| v.to_f64_lossy()).collect(),
        offset: (0..n * m)
            .map(|e| {
                let r = offset.row(e);
                Vec3::new(r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy())
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn gt_field_analytic_values() {
        let f = gt_voting_field(&[v(0.0, 0.0, 0.0)], &[v(0.01, 0.0, 0.0)], 0.02).unwrap();
        assert!((f.heat[0] - 0.5).abs() < 1e-15);
        assert_eq!(f.offset[0], v(1.0, 0.0, 0.0));

        let f = gt_voting_field(&[v(0.0, 0.0, 0.0)], &[v(0.0, 0.02, 0.0)], 0.02).unwrap();
        assert_eq!((f.heat[0], f.offset[0]), (0.0, Vec3::zeros()));

        let f = gt_voting_field(&[v(1.0, 1.0, 1.0)], &[v(1.0, 1.0, 1.0)], 0.02).unwrap();
        assert_eq!((f.heat[0], f.offset[0]), (1.0, Vec3::zeros()));

        assert!(gt_voting_field(&[], &[], 0.0).is_err());
    }

    #[test]
    fn vote_trivial_cases() {
        let field = VotingField {
            points: 1,
            nodes: 1,
            heat: vec![1.0],
            offset: vec![v(0.0, 1.0, 0.0)],
        };
        let out = vote(&[v(0.3, 0.2, 0.1)], &field, 0.02, 1).unwrap();
        assert_eq!(out.nodes.0[0], v(0.3, 0.2, 0.1));
        assert_eq!(out.visibility, vec![1.0]);

        let cloud = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let field = VotingField {
            points: 2,
            nodes: 1,
            heat: vec![0.5, 0.5],
            offset: vec![v(0.0, 0.0, 1.0), v(0.0, 0.0, -1.0)],
        };
        let out = vote(&cloud, &field, 0.02, 2).unwrap();
        let c1 = candidate(&cloud[0], 0.5, &field.offset[0], 0.02);
        let c2 = candidate(&cloud[1], 0.5, &field.offset[1], 0.02);
        assert!((out.nodes.0[0] - (c1 + c2) / 2.0).norm() < 1e-15);
    }

    #[test]
    fn all_zero_heat_column_falls_back_to_mean() {
        let cloud = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(5.0, 0.0, 0.0)];
        let field = VotingField {
            points: 3,
            nodes: 1,
            heat: vec![0.0; 3],
            offset: vec![Vec3::zeros(); 3],
        };
        let out = vote(&cloud, &field, 0.02, 2).unwrap();
        assert_eq!(out.visibility, vec![0.0]);
        assert!((out.nodes.0[0] - v(0.5, 0.0, 0.0)).norm() < 1e-15);
        assert!(vote(&cloud, &field, 0.02, 4).is_err());
        assert!(vote(&cloud, &field, 0.02, 0).is_err());
    }

    #[test]
    fn top_k_selects_highest_heat() {
        let cloud = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0)];
        let field = VotingField {
            points: 3,
            nodes: 1,
            heat: vec![0.1, 0.9, 0.8],
            offset: vec![Vec3::zeros(); 3],
        };
        let out = vote(&cloud, &field, 0.02, 2).unwrap();
        let expect = (v(1.0, 0.0, 0.0) * 0.9 + v(2.0, 0.0, 0.0) * 0.8) / 1.7;
        assert!((out.nodes.0[0] - expect).norm() < 1e-12);
        assert_eq!(out.visibility, vec![0.9]);
    }

    fn total_loss(pred: &[f64], gt: &[Vec3], reversed_pred: bool) -> f64 {
        let mut tape = Tape::<f64>::new();
        let n = gt.len();
        let reg = tape.constant(Tensor::from_vec(vec![n, 3], pred.to_vec()).unwrap());
        let targets = LossTargets::<f64>::new(&[v(0.005, 0.0, 0.0)], gt, 0.02).unwrap();
        let seen = if reversed_pred { targets.reversed() } else { targets.clone() };
        let heat = tape.constant(seen.heat.clone());
        let offset = tape.constant(Tensor::from_fn(n, 3, |_, c| if c == 1 { 1.0 } else { 0.0 }));
        let (l, _) = symmetric_losses(&mut tape, reg, heat, offset, &targets, &targets.reversed(), LossWeights::default()).unwrap();
        tape.value(l.total).data()[0]
    }

    #[test]
    fn losses_vanish_on_exact_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud: Vec<Vec3> = (0..20).map(|_| v(rng.random(), rng.random(), 0.0) * 0.05).collect();
        let nodes: Vec<Vec3> = (0..4).map(|j| v(j as f64 * 0.015, 0.01, 0.0)).collect();
        let t = LossTargets::<f64>::new(&cloud, &nodes, 0.02).unwrap();
        let mut tape = Tape::new();
        let reg = tape.constant(t.nodes.clone());
        let heat = tape.constant(t.heat.clone());
        let offset = tape.constant(t.offset.clone());
        let l = branch_losses(&mut tape, reg, heat, offset, &t, LossWeights::default()).unwrap();
        for x in [l.reg, l.vot, l.total] {
            assert_eq!(tape.value(x).data()[0], 0.0);
        }
    }

    #[test]
    fn flipped_offset_costs_four_over_pair_count() {
        let cloud = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        let nodes = [v(0.01, 0.0, 0.0)];
        let t = LossTargets::<f64>::new(&cloud, &nodes, 0.02).unwrap();
        let mut tape = Tape::new();
        let reg = tape.constant(t.nodes.clone());
        let heat = tape.constant(t.heat.clone());
        let flipped = Tensor::from_vec(vec![2, 3], vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let offset = tape.constant(flipped);
        let l = branch_losses(&mut tape, reg, heat, offset, &t, LossWeights::default()).unwrap();
        // one in-radius pair, |2U|^2 = 4, averaged over N M = 2 pairs
        assert!((tape.value(l.vot).data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_loss_ignores_node_order() {
        let gt = [v(0.0, 0.0, 0.0), v(0.1, 0.0, 0.0), v(0.2, 0.05, 0.0)];
        let fwd: Vec<f64> = gt.iter().flat_map(|p| [p.x + 0.01, p.y, p.z]).collect();
        let rev: Vec<f64> = gt.iter().rev().flat_map(|p| [p.x + 0.01, p.y, p.z]).collect();
        let a = total_loss(&fwd, &gt, false);
        let b = total_loss(&rev, &gt, true);
        assert!((a - b).abs() < 1e-15 && a > 0.0);
    }

    #[test]
    fn reversed_targets_match_reversed_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud: Vec<Vec3> = (0..30).map(|_| v(rng.random(), rng.random(), 0.0) * 0.06).collect();
        let nodes: Vec<Vec3> = (0..5).map(|j| v(j as f64 * 0.012, 0.02, 0.0)).collect();
        let rev_nodes: Vec<Vec3> = nodes.iter().rev().copied().collect();
        let a = LossTargets::<f64>::new(&cloud, &nodes, 0.02).unwrap().reversed();
        let b = LossTargets::<f64>::new(&cloud, &rev_nodes, 0.02).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.heat, b.heat);
        assert_eq!(a.offset, b.offset);
        assert_eq!(a.offset_weights, b.offset_weights);
        let f = gt_voting_field(&cloud, &nodes, 0.02).unwrap().reversed_nodes();
        assert_eq!(f, gt_voting_field(&cloud, &rev_nodes, 0.02).unwrap());
    }
}
