//! Fusion of the two branches: fit a Gaussian RBF displacement field that
//! carries the reliable regression nodes onto their voted counterparts
//! (coherent point drift with the correspondence fixed to the identity),
//! then move every regression node with it.
//!
//! As in the reference CPD implementation, `fuse` works in normalized
//! coordinates: the regression nodes are centred and scaled to unit RMS
//! radius, so `beta` and `lambda` do not depend on the rope's size or units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::geometry::{NodeSequence, Vec3};

const SIGMA2_FLOOR: f64 = 1e-10;
const LOADING_RETRIES: usize = 3;
const D: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Nodes with visibility at or above this take part in the fit.
    pub threshold: f64,
    pub lambda: f64,
    pub beta: f64,
    pub max_iterations: usize,
    /// Stop once `|sigma2_new - sigma2|` drops below this.
    pub tolerance: f64,
    pub min_visible: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            lambda: 0.25,
            beta: 0.5,
            max_iterations: 50,
            tolerance: 1e-8,
            min_visible: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(DloError::Config(format!("fusion threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.lambda > 0.0) || !(self.beta > 0.0) {
            return Err(DloError::Config(format!(
                "fusion lambda {} and beta {} must be positive",
                self.lambda, self.beta
            )));
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) || self.min_visible == 0 {
            return Err(DloError::Config(
                "fusion iterations, tolerance and minimum visible count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Indices `j` with `visibility[j] >= threshold`.
pub fn select_visible(visibility: &[f64], threshold: f64) -> Vec<usize> {
    visibility
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// `G_ij = exp(-|a_i - b_j|^2 / (2 beta^2))`.
pub fn gaussian_kernel(a: &[Vec3], b: &[Vec3], beta: f64) -> DMatrix<f64> {
    let s = 2.0 * beta * beta;
    DMatrix::from_fn(a.len(), b.len(), |i, j| (-(a[i] - b[j]).norm_squared() / s).exp())
}

fn as_rows(points: &[Vec3]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |i, c| points[i][c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionTransform {
    pub control: Vec<Vec3>,
    /// `S x 3` kernel coefficients.
    pub w: DMatrix<f64>,
    pub beta: f64,
    pub sigma2: f64,
    pub iterations: usize,
    /// Final diagonal loading multiplier after solver retries (1 when the
    /// first factorization succeeded).
    pub loading: f64,
}

/// Solves `(G + lambda sigma2 I) W = rhs`, multiplying the loading by 10 on
/// each failed factorization.
fn solve_loaded(g: &DMatrix<f64>, diag: f64, rhs: &DMatrix<f64>, boost: &mut f64) -> Result<DMatrix<f64>> {
    for _ in 0..=LOADING_RETRIES {
        let mut a = g.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += diag * *boost;
        }
        if let Some(ch) = a.cholesky() {
            let w = ch.solve(rhs);
            if w.iter().all(|v| v.is_finite()) {
                return Ok(w);
            }
        }
        *boost *= 10.0;
    }
    Err(DloError::Numerical(format!(
        "kernel system stayed singular after {LOADING_RETRIES} loading increases"
    )))
}

/// Alternates the coefficient solve and the variance update
/// `sigma2 = |Y_vot - (Y_reg + G W)|_F^2 / D` until the variance settles.
///
/// The variance starts at the mean squared distance between matched nodes
/// divided by `D` and never drops below 1e-10.
pub fn fit_transform(reg: &[Vec3], vot: &[Vec3], cfg: &FusionConfig) -> Result<FusionTransform> {
    if reg.len() != vot.len() {
        return Err(DloError::Invalid(format!(
            "{} regression nodes matched against {} voted nodes",
            reg.len(),
            vot.len()
        )));
    }
    if reg.len() < cfg.min_visible {
        return Err(DloError::Invalid(format!(
            "{} control nodes, at least {} required",
            reg.len(),
            cfg.min_visible
        )));
    }
    let s = reg.len();
    let g = gaussian_kernel(reg, reg, cfg.beta);
    let y_reg = as_rows(reg);
    let y_vot = as_rows(vot);
    let rhs = &y_vot - &y_reg;
    let mut sigma2 = (rhs.norm_squared() / (s as f64 * D)).max(SIGMA2_FLOOR);
    let mut boost = 1.0;
    let mut w = DMatrix::zeros(s, 3);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        w = solve_loaded(&g, cfg.lambda * sigma2, &rhs, &mut boost)?;
        let moved = &y_reg + &g * &w;
        let next = ((&y_vot - moved).norm_squared() / D).max(SIGMA2_FLOOR);
        let delta = (next - sigma2).abs();
        sigma2 = next;
        if delta < cfg.tolerance {
            break;
        }
    }
    Ok(FusionTransform {
        control: reg.to_vec(),
        w,
        beta: cfg.beta,
        sigma2,
        iterations,
        loading: boost,
    })
}

/// `Y + G(Y, control) W`.
pub fn apply_transform(nodes: &[Vec3], t: &FusionTransform) -> NodeSequence {
    let g = gaussian_kernel(nodes, &t.control, t.beta);
    let disp = g * &t.w;
    NodeSequence(
        nodes
            .iter()
            .enumerate()
            .map(|(i, p)| p + Vec3::new(disp[(i, 0)], disp[(i, 1)], disp[(i, 2)]))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FusionStatus {
    Fused { iterations: usize, sigma2: f64 },
    /// The regression nodes were returned unchanged.
    Fallback { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutcome {
    /// Always as many nodes as the regression input.
    pub nodes: NodeSequence,
    /// Indices into the regression sequence.
    pub selected: Vec<usize>,
    /// The voted nodes were matched in reversed order.
    pub voting_reversed: bool,
    pub status: FusionStatus,
}

impl FusionOutcome {
    pub fn is_fallback(&self) -> bool {
        matches!(self.status, FusionStatus::Fallback { .. })
    }
}

/// Centroid and RMS radius of the regression nodes. A degenerate sequence
/// keeps scale 1.
fn normalization(reg: &NodeSequence) -> (Vec3, f64) {
    let c = reg.0.iter().sum::<Vec3>() / reg.len() as f64;
    let rms = (reg.0.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / reg.len() as f64).sqrt();
    (c, if rms > 1e-12 { rms } else { 1.0 })
}

/// Whether the voted nodes run from the other end of the rope: compares
/// visibility-weighted squared distances to the regression nodes in both
/// orders. Ties keep the given order.
pub fn voting_reversed(reg: &NodeSequence, vot: &NodeSequence, visibility: &[f64]) -> bool {
    let m = reg.len();
    let cost = |rev: bool| -> f64 {
        (0..m)
            .map(|j| {
                let k = if rev { m - 1 - j } else { j };
                visibility[k] * (vot.0[k] - reg.0[j]).norm_squared()
            })
            .sum()
    };
    cost(true) < cost(false)
}

/// Matches the voted nodes to the regression order, selects visible nodes,
/// fits the displacement field in normalized coordinates and applies it to
/// the whole regression sequence; falls back to the regression nodes when
/// too few nodes are visible or the kernel solve fails.
pub fn fuse(
    reg: &NodeSequence,
    vot: &NodeSequence,
    visibility: &[f64],
    cfg: &FusionConfig,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    let m = reg.len();
    if vot.len() != m || visibility.len() != m {
        return Err(DloError::Invalid(format!(
            "branch sizes differ: {m} regression, {} voted, {} visibility",
            vot.len(),
            visibility.len()
        )));
    }
    if !reg.all_finite() || !vot.all_finite() || visibility.iter().any(|v| !v.is_finite()) {
        return Err(DloError::Invalid("non-finite branch output".into()));
    }
    // The two branches may label the rope from opposite ends.
    let reversed = voting_reversed(reg, vot, visibility);
    let (vot, visibility) = if reversed {
        let mut v = visibility.to_vec();
        v.reverse();
        (NodeSequence(vot.0.iter().rev().copied().collect()), v)
    } else {
        (vot.clone(), visibility.to_vec())
    };
    let selected = select_visible(&visibility, cfg.threshold);
    let fallback = |reason: String| FusionOutcome {
        nodes: reg.clone(),
        selected: selected.clone(),
        voting_reversed: reversed,
        status: FusionStatus::Fallback { reason },
    };
    if selected.len() < cfg.min_visible {
        return Ok(fallback(format!(
            "{} visible nodes, at least {} required",
            selected.len(),
            cfg.min_visible
        )));
    }
    let (c, scale) = normalization(reg);
    let norm = |p: &Vec3| (p - c) / scale;
    let all: Vec<Vec3> = reg.0.iter().map(norm).collect();
    let ctrl: Vec<Vec3> = selected.iter().map(|&j| all[j]).collect();
    let target: Vec<Vec3> = selected.iter().map(|&j| norm(&vot.0[j])).collect();
    match fit_transform(&ctrl, &target, cfg) {
        Ok(t) => {
            let nodes = NodeSequence(apply_transform(&all, &t).0.iter().map(|p| p * scale + c).collect());
            if !nodes.all_finite() {
                return Ok(fallback("non-finite fused nodes".into()));
            }
            Ok(FusionOutcome {
                nodes,
                selected,
                voting_reversed: reversed,
                status: FusionStatus::Fused {
                    iterations: t.iterations,
                    sigma2: t.sigma2,
                },
            })
        }
        Err(DloError::Numerical(msg)) => Ok(fallback(msg)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(m: usize, spacing: f64) -> Vec<Vec3> {
        (0..m).map(|j| Vec3::new(j as f64 * spacing, 0.0, 0.0)).collect()
    }

    #[test]
    fn selection_by_visibility() {
        assert_eq!(select_visible(&[1.0, 1.0, 0.0, 1.0], 0.5), vec![0, 1, 3]);
        assert_eq!(select_visible(&[1.0; 4], 0.5).len(), 4);
        assert!(select_visible(&[0.0; 4], 0.5).is_empty());
    }

    #[test]
    fn kernel_values() {
        let beta = 0.5;
        let a = [Vec3::zeros(), Vec3::new(beta * 2f64.sqrt(), 0.0, 0.0)];
        let g = gaussian_kernel(&a, &a, beta);
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn identical_branches_give_zero_coefficients() {
        let y = line(6, 0.1);
        let t = fit_transform(&y, &y, &FusionConfig::default()).unwrap();
        assert!(t.w.iter().all(|&v| v == 0.0));
        assert_eq!(apply_transform(&y, &t).0, y);
    }

    #[test]
    fn single_control_node_scalar_algebra() {
        let cfg = FusionConfig {
            min_visible: 1,
            ..Default::default()
        };
        let d = Vec3::new(0.01, -0.02, 0.005);
        let t = fit_transform(&[Vec3::zeros()], &[d], &cfg).unwrap();
        // (1 + lambda sigma2) w = d and sigma2 = |d - w|^2 / 3
        let w = Vec3::new(t.w[(0, 0)], t.w[(0, 1)], t.w[(0, 2)]);
        let s2 = t.sigma2;
        assert!((w * (1.0 + cfg.lambda * s2) - d).norm() < 1e-9);
        assert!((w - d).norm() < 1e-6);
    }

    #[test]
    fn far_nodes_stay_put_and_coincident_nodes_follow() {
        let cfg = FusionConfig {
            beta: 0.05,
            ..Default::default()
        };
        let ctrl = line(4, 0.1);
        let target: Vec<Vec3> = ctrl.iter().map(|p| p + Vec3::new(0.0, 0.01, 0.0)).collect();
        let t = fit_transform(&ctrl, &target, &cfg).unwrap();
        let probe = [ctrl[2], Vec3::new(10.0, 0.0, 0.0)];
        let out = apply_transform(&probe, &t);
        let fitted = apply_transform(&ctrl[2..3], &t);
        assert!((out.0[0] - fitted.0[0]).norm() < 1e-15);
        assert!((out.0[0] - target[2]).norm() < 1e-3);
        assert_eq!(out.0[1], probe[1]);
    }

    #[test]
    fn fuse_fallbacks_and_sizes() {
        let reg = NodeSequence(line(8, 0.05));
        let vot = NodeSequence(reg.0.iter().map(|p| p + Vec3::new(0.0, 0.003, 0.0)).collect());
        let cfg = FusionConfig::default();
        let none = fuse(&reg, &vot, &[0.0; 8], &cfg).unwrap();
        assert!(none.is_fallback());
        assert_eq!(none.nodes, reg);
        let two = fuse(&reg, &vot, &[0.9, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert!(two.is_fallback());
        let all = fuse(&reg, &vot, &[0.9; 8], &cfg).unwrap();
        assert!(!all.is_fallback());
        assert_eq!(all.nodes.len(), 8);
        for (a, b) in all.nodes.0.iter().zip(&vot.0) {
            assert!((a - b).norm() < 1e-4);
        }
        assert!(fuse(&reg, &vot, &[0.9; 7], &cfg).is_err());
    }

    #[test]
    fn fuse_commutes_with_uniform_scaling() {
        let reg = NodeSequence((0..10).map(|j| Vec3::new(0.06 * j as f64, 0.01 * j as f64, 0.2)).collect());
        let vot = NodeSequence(reg.0.iter().map(|p| p + Vec3::new(0.0, 0.02 * (9.0 * p.x).sin(), 0.0)).collect());
        let vis: Vec<f64> = (0..10).map(|j| if j % 3 == 0 { 0.1 } else { 0.8 }).collect();
        let cfg = FusionConfig::default();
        let base = fuse(&reg, &vot, &vis, &cfg).unwrap().nodes;
        let k = 1000.0;
        let scaled = |s: &NodeSequence| NodeSequence(s.0.iter().map(|p| p * k).collect());
        let big = fuse(&scaled(&reg), &scaled(&vot), &vis, &cfg).unwrap().nodes;
        for (a, b) in base.0.iter().zip(&big.0) {
            assert!((a * k - b).norm() < 1e-9 * k);
        }
    }

    #[test]
    fn reversed_voting_order_is_matched() {
        let reg = NodeSequence(line(8, 0.05));
        let vot = NodeSequence(reg.0.iter().map(|p| p + Vec3::new(0.0, 0.004, 0.0)).collect());
        let vis: Vec<f64> = (0..8).map(|j| if j < 5 { 0.9 } else { 0.1 }).collect();
        let cfg = FusionConfig::default();
        let plain = fuse(&reg, &vot, &vis, &cfg).unwrap();
        assert!(!plain.voting_reversed);
        let flipped_vot = NodeSequence(vot.0.iter().rev().copied().collect());
        let flipped_vis: Vec<f64> = vis.iter().rev().copied().collect();
        let flipped = fuse(&reg, &flipped_vot, &flipped_vis, &cfg).unwrap();
        assert!(flipped.voting_reversed);
        assert_eq!(flipped.selected, plain.selected);
        for (a, b) in flipped.nodes.0.iter().zip(&plain.nodes.0) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            FusionConfig { lambda: 0.0, ..Default::default() },
            FusionConfig { beta: -1.0, ..Default::default() },
            FusionConfig { threshold: 1.5, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
