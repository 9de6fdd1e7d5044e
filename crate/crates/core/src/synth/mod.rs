//! Synthetic rope data: simulation, node resampling, single-view surface
//! rendering, augmentation and farthest point sampling.

mod rope;

pub use rope::{relax, simulate_sequence, RopeSpec, RopeState, SimConfig};

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::geometry::{cumulative_arclength, project_onto_polyline, NodeSequence, PointCloud, Vec3};

/// Clouds with fewer points than this after occlusion are unusable.
pub const MIN_POINTS: usize = 32;

/// `count` points at equal arclength along the particle centerline, both
/// ends included.
pub fn resample_nodes(state: &RopeState, count: usize) -> Result<NodeSequence> {
    resample_polyline(&state.particles, count)
}

pub fn resample_polyline(points: &[Vec3], count: usize) -> Result<NodeSequence> {
    if count < 2 {
        return Err(DloError::Invalid(format!("need at least 2 nodes, got {count}")));
    }
    let acc = cumulative_arclength(points);
    let total = *acc.last().unwrap_or(&0.0);
    if !(total > 0.0) {
        return Err(DloError::Degenerate("zero-length centerline".into()));
    }
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s = total * k as f64 / (count - 1) as f64;
        out.push(point_at_arclength(points, &acc, s));
    }
    // pin the last node exactly to the last vertex
    out[count - 1] = *points.last().expect("non-empty");
    Ok(NodeSequence(out))
}

fn point_at_arclength(points: &[Vec3], acc: &[f64], s: f64) -> Vec3 {
    let i = acc.partition_point(|&a| a <= s).clamp(1, points.len() - 1);
    let seg = acc[i] - acc[i - 1];
    let t = if seg > 0.0 { ((s - acc[i - 1]) / seg).clamp(0.0, 1.0) } else { 0.0 };
    points[i - 1] + (points[i] - points[i - 1]) * t
}

fn perpendicular(t: &Vec3) -> Vec3 {
    let a = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    t.cross(&a).normalize()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Surface samples per meter of centerline.
    pub density: f64,
    /// Unit vector from the rope toward the camera.
    pub toward_camera: Vec3,
}

/// Samples the half cylinder of radius `spec.radius` around the centerline
/// that faces the camera.
pub fn render_cloud(state: &RopeState, spec: &RopeSpec, cfg: &RenderConfig, seed: u64) -> Result<PointCloud> {
    if !(cfg.density > 0.0) {
        return Err(DloError::Invalid(format!("density {} must be positive", cfg.density)));
    }
    let pts = &state.particles;
    let acc = cumulative_arclength(pts);
    let total = *acc.last().unwrap_or(&0.0);
    if !(total > 0.0) {
        return Err(DloError::Degenerate("zero-length centerline".into()));
    }
    let cam = cfg.toward_camera.normalize();
    let count = (cfg.density * total).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.random_range(0.0..total);
        let i = acc.partition_point(|&a| a <= s).clamp(1, pts.len() - 1);
        let seg = pts[i] - pts[i - 1];
        let len = seg.norm();
        let t = if len > 0.0 { (s - acc[i - 1]) / len } else { 0.0 };
        let center = pts[i - 1] + seg * t.clamp(0.0, 1.0);
        let tangent = if len > 0.0 { seg / len } else { Vec3::x() };
        let n = cam - tangent * cam.dot(&tangent);
        let n = if n.norm() > 1e-9 { n.normalize() } else { perpendicular(&tangent) };
        let b = tangent.cross(&n);
        let theta = rng.random_range(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2);
        out.push(center + (n * theta.cos() + b * theta.sin()) * spec.radius);
    }
    Ok(PointCloud(out))
}

/// Marks node `j` occluded iff no point lies strictly within `r` of it.
pub fn occlusion_mask(cloud: &PointCloud, nodes: &NodeSequence, r: f64) -> Vec<bool> {
    let r2 = r * r;
    nodes
        .0
        .iter()
        .map(|y| !cloud.0.iter().any(|x| (x - y).norm_squared() < r2))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Gaussian jitter standard deviation, meters.
    pub jitter: f64,
    pub rotation: bool,
    /// Fraction of centerline arclength hidden, in `[0, 0.8]`.
    pub occlusion_ratio: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            jitter: 0.0,
            rotation: false,
            occlusion_ratio: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub nodes: NodeSequence,
    /// Hidden `[start, end)` arclength windows along the node polyline.
    pub windows: Vec<(f64, f64)>,
}

/// 1-3 disjoint windows of total length `ratio * total`, placed uniformly.
pub fn occlusion_windows(total: f64, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    if ratio <= 0.0 {
        return Vec::new();
    }
    let count = rng.random_range(1..=3usize);
    let hidden = ratio * total;
    let free = total - hidden;
    let split = |rng: &mut ChaCha8Rng, parts: usize, amount: f64| -> Vec<f64> {
        let mut cuts: Vec<f64> = (0..parts - 1).map(|_| rng.random::<f64>()).collect();
        cuts.sort_by(f64::total_cmp);
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(parts);
        for c in cuts.into_iter().chain(std::iter::once(1.0)) {
            out.push((c - prev) * amount);
            prev = c;
        }
        out
    };
    let lengths = split(rng, count, hidden);
    let gaps = split(rng, count + 1, free);
    let mut s = 0.0;
    let mut out = Vec::with_capacity(count);
    for (len, gap) in lengths.iter().zip(&gaps) {
        s += gap;
        out.push((s, s + len));
        s += len;
    }
    out
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// Occlusion, then jitter, then a joint random rotation of cloud and nodes
/// about the node centroid.
pub fn augment(
    cloud: &PointCloud,
    nodes: &NodeSequence,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Augmented> {
    if !(0.0..=0.8).contains(&cfg.occlusion_ratio) {
        return Err(DloError::Invalid(format!(
            "occlusion ratio {} outside [0, 0.8]",
            cfg.occlusion_ratio
        )));
    }
    let mut points = cloud.0.clone();
    let mut windows = Vec::new();
    if cfg.occlusion_ratio > 0.0 {
        let acc = cumulative_arclength(&nodes.0);
        let total = *acc.last().unwrap_or(&0.0);
        windows = occlusion_windows(total, cfg.occlusion_ratio, rng);
        points.retain(|p| {
            let (s, _) = project_onto_polyline(p, &nodes.0, &acc);
            !windows.iter().any(|&(a, b)| s >= a && s < b)
        });
        if points.len() < MIN_POINTS {
            return Err(DloError::Unusable(format!(
                "{} points left after occlusion",
                points.len()
            )));
        }
    }
    if cfg.jitter > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter)
            .map_err(|e| DloError::Invalid(format!("jitter: {e}")))?;
        for p in &mut points {
            for c in p.iter_mut() {
                *c += normal.sample(rng);
            }
        }
    }
    let mut nodes = nodes.clone();
    if cfg.rotation {
        let rot = random_rotation(rng);
        let c = nodes.centroid();
        let t = c - rot * c;
        points = points.iter().map(|p| rot * p + t).collect();
        nodes = nodes.transformed(&rot, &t);
    }
    Ok(Augmented {
        cloud: PointCloud(points),
        nodes,
        windows,
    })
}

/// Greedy farthest point ordering of `count` indices starting at `start`.
/// Ties resolve to the lowest index.
pub fn fps_indices(points: &[Vec3], count: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..count {
        out.push(cur);
        let c = points[cur];
        let mut best = (0usize, -1.0f64);
        for (i, (p, d)) in points.iter().zip(dist.iter_mut()).enumerate() {
            let nd = (p - c).norm_squared();
            if nd < *d {
                *d = nd;
            }
            if *d > best.1 {
                best = (i, *d);
            }
        }
        cur = best.0;
    }
    out
}

/// Index of the lexicographically smallest point, first on ties.
pub fn lexicographic_min(points: &[Vec3]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let q = &points[best];
        let less = (p.x, p.y, p.z).partial_cmp(&(q.x, q.y, q.z)) == Some(std::cmp::Ordering::Less);
        if less {
            best = i;
        }
    }
    best
}

/// Fixes the cloud size at `count`: farthest point subset when the cloud is
/// large enough (seeded start), otherwise every point plus seeded draws with
/// replacement.
pub fn fps_sample(cloud: &PointCloud, count: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(DloError::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cloud.len();
    if n >= count {
        let start = rng.random_range(0..n);
        let idx = fps_indices(&cloud.0, count, start);
        Ok(PointCloud(idx.into_iter().map(|i| cloud.0[i]).collect()))
    } else {
        let mut pts = cloud.0.clone();
        pts.extend((n..count).map(|_| cloud.0[rng.random_range(0..n)]));
        Ok(PointCloud(pts))
    }
}

/// Random unit vector within `max_tilt` radians of +z.
pub fn random_view(rng: &mut ChaCha8Rng, max_tilt: f64) -> Vec3 {
    let cos_min = max_tilt.cos();
    let z = rng.random_range(cos_min..=1.0);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}
