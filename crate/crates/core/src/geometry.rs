//! Point clouds and node sequences.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Unordered set of 3-D points, meters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud(pub Vec<Vec3>);

/// Ordered DLO nodes from one end to the other, meters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeSequence(pub Vec<Vec3>);

macro_rules! point_set_impl {
    ($t:ty) => {
        impl $t {
            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn points(&self) -> &[Vec3] {
                &self.0
            }

            pub fn centroid(&self) -> Vec3 {
                if self.0.is_empty() {
                    return Vec3::zeros();
                }
                self.0.iter().sum::<Vec3>() / self.0.len() as f64
            }

            /// `p -> rotation * p + translation` on every point.
            pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vec3) -> Self {
                Self(self.0.iter().map(|p| rotation * p + translation).collect())
            }

            pub fn translated(&self, t: &Vec3) -> Self {
                Self(self.0.iter().map(|p| p + t).collect())
            }

            pub fn all_finite(&self) -> bool {
                self.0.iter().all(|p| p.iter().all(|v| v.is_finite()))
            }
        }
    };
}

point_set_impl!(PointCloud);
point_set_impl!(NodeSequence);

impl NodeSequence {
    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }

    /// Distances between consecutive nodes.
    pub fn spacings(&self) -> Vec<f64> {
        self.0.windows(2).map(|w| (w[1] - w[0]).norm()).collect()
    }

    pub fn polyline_length(&self) -> f64 {
        self.spacings().iter().sum()
    }
}

/// Cumulative arclength at each vertex of a polyline.
pub fn cumulative_arclength(points: &[Vec3]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        s += (w[1] - w[0]).norm();
        acc.push(s);
    }
    acc
}

/// Closest point on a polyline: `(arclength, distance)`.
pub fn project_onto_polyline(p: &Vec3, points: &[Vec3], arclength: &[f64]) -> (f64, f64) {
    if points.len() == 1 {
        return (0.0, (p - points[0]).norm());
    }
    let mut best = (0.0, f64::INFINITY);
    for (i, w) in points.windows(2).enumerate() {
        let seg = w[1] - w[0];
        let len2 = seg.norm_squared();
        let t = if len2 > 0.0 {
            ((p - w[0]).dot(&seg) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = (p - (w[0] + seg * t)).norm();
        if d < best.1 {
            best = (arclength[i] + t * (arclength[i + 1] - arclength[i]), d);
        }
    }
    best
}
