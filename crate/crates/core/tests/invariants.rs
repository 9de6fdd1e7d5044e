use dlo::encoder::{ball_query, Encoder, EncoderConfig, EncoderPlan};
use dlo::eval::{node_error, uniformity};
use dlo::fusion::{fuse, FusionConfig};
use dlo::heads::{vote, VotingField};
use dlo::model::{Model, ModelConfig};
use dlo::synth::{fps_indices, resample_polyline};
use dlo::{NodeSequence, PointCloud, Vec3};
use nalgebra::{Rotation3, Vector3};
use numkit::{ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(seed: u64, n: usize, scale: f64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
        .collect()
}

fn rigid(seed: u64) -> (Rotation3<f64>, Vec3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    let rot = Rotation3::new(axis.normalize() * rng.random_range(0.0..3.1));
    (rot, Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
}

fn smooth_curve(seed: u64, m: usize, length: f64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(0.5..3.0), rng.random_range(-1.0..1.0));
    (0..m)
        .map(|j| {
            let t = j as f64 / (m - 1) as f64 - 0.5;
            Vec3::new(length * t, length / a * (a * t).sin() * 0.5, length * b * t * t)
        })
        .collect()
}

/// Farthest point ordering written directly from its definition.
fn fps_reference(p: &[Vec3], count: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < count {
        let d = |i: usize| chosen.iter().map(|&s| (p[i] - p[s]).norm_squared()).fold(f64::INFINITY, f64::min);
        let mut best = 0;
        for i in 1..p.len() {
            if d(i) > d(best) {
                best = i;
            }
        }
        chosen.push(best);
    }
    chosen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resampling_commutes_with_rigid_motion(seed in any::<u64>(), n in 3usize..30, count in 2usize..20) {
        let line = NodeSequence(smooth_curve(seed, n, 0.7));
        let (rot, tr) = rigid(seed ^ 1);
        let a = resample_polyline(&line.transformed(&rot, &tr).0, count).unwrap();
        let b = resample_polyline(&line.0, count).unwrap().transformed(&rot, &tr);
        prop_assert_eq!(a.len(), count);
        for (p, q) in a.0.iter().zip(&b.0) {
            prop_assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn resampling_a_straight_line_is_uniform(seed in any::<u64>(), n in 2usize..20, count in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cuts: Vec<f64> = (0..n - 2).map(|_| rng.random_range(0.0..1.0)).collect();
        cuts.extend([0.0, 1.0]);
        cuts.sort_by(f64::total_cmp);
        let line: Vec<Vec3> = cuts.iter().map(|&t| Vec3::new(t, 2.0 * t, -t)).collect();
        let nodes = resample_polyline(&line, count).unwrap();
        prop_assert!(uniformity(&nodes).unwrap() < 1e-12);
    }

    #[test]
    fn fps_matches_its_definition(seed in any::<u64>(), n in 1usize..80, frac in 0.0f64..1.0) {
        let p = points(seed, n, 1.0);
        let count = ((n as f64 * frac) as usize).max(1);
        let start = (seed as usize) % n;
        prop_assert_eq!(fps_indices(&p, count, start), fps_reference(&p, count, start));
    }

    #[test]
    fn ball_query_matches_brute_force(seed in any::<u64>(), n in 1usize..60, radius in 0.05f64..1.5, group in 1usize..12) {
        let p = points(seed, n, 1.0);
        let centroids: Vec<usize> = (0..n).step_by(3).collect();
        let got = ball_query(&p, &centroids, radius, group);
        for (g, &c) in centroids.iter().enumerate() {
            let mut expect: Vec<usize> = (0..n).filter(|&i| (p[i] - p[c]).norm() < radius).take(group).collect();
            expect.resize(group, c);
            prop_assert_eq!(&got[g * group..(g + 1) * group], expect.as_slice());
        }
    }

    // Voted nodes are convex combinations of candidates, and the
    // visibility is the largest heat.
    #[test]
    fn vote_stays_in_candidate_hull(seed in any::<u64>(), n in 4usize..40, m in 1usize..6, kf in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = points(seed, n, 0.1);
        let r = 0.05;
        let heat: Vec<f64> = (0..n * m).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let offset: Vec<Vec3> = (0..n * m)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize())
            .collect();
        let field = VotingField { points: n, nodes: m, heat, offset };
        let k = ((n as f64 * kf) as usize).clamp(1, n);
        let out = vote(&cloud, &field, r, k).unwrap();
        for j in 0..m {
            let cands: Vec<Vec3> = (0..n).map(|i| cloud[i] + field.offset_at(i, j) * (r * (1.0 - field.heat_at(i, j)))).collect();
            for c in 0..3 {
                let lo = cands.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = cands.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.nodes.0[j][c] >= lo - 1e-12 && out.nodes.0[j][c] <= hi + 1e-12);
            }
            let max_heat = (0..n).map(|i| field.heat_at(i, j)).fold(0.0, f64::max);
            prop_assert_eq!(out.visibility[j], max_heat);
        }
    }

    #[test]
    fn raising_a_heat_never_lowers_visibility(seed in any::<u64>(), n in 4usize..30, bump in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = points(seed, n, 0.1);
        let heat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let offset = vec![Vec3::x(); n];
        let mut field = VotingField { points: n, nodes: 1, heat, offset };
        let before = vote(&cloud, &field, 0.05, 4.min(n)).unwrap().visibility[0];
        let i = rng.random_range(0..n);
        field.heat[i] = (field.heat[i] + bump).min(1.0);
        let after = vote(&cloud, &field, 0.05, 4.min(n)).unwrap().visibility[0];
        prop_assert!(after >= before);
    }

    #[test]
    fn fusion_identity_and_equivariance(seed in any::<u64>(), m in 3usize..20) {
        let cfg = FusionConfig::default();
        let reg = NodeSequence(smooth_curve(seed, m, 0.6));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let vis: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let same = fuse(&reg, &reg, &vis, &cfg).unwrap();
        prop_assert_eq!(same.nodes.len(), m);
        for (a, b) in same.nodes.0.iter().zip(&reg.0) {
            prop_assert!((a - b).norm() < 1e-9);
        }
        let vot = NodeSequence(reg.0.iter().map(|p| p + Vec3::new(0.0, 0.03 * (5.0 * p.x).sin(), 0.01)).collect());
        let out = fuse(&reg, &vot, &vis, &cfg).unwrap();
        let (rot, tr) = rigid(seed);
        let moved = fuse(&reg.transformed(&rot, &tr), &vot.transformed(&rot, &tr), &vis, &cfg).unwrap();
        prop_assert_eq!(moved.nodes.len(), m);
        for (a, b) in moved.nodes.0.iter().zip(&out.nodes.transformed(&rot, &tr).0) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn node_error_ignores_relabeling_and_uniformity_ignores_motion(seed in any::<u64>(), m in 3usize..16) {
        let gt = NodeSequence(smooth_curve(seed, m, 0.6));
        let pred = NodeSequence(gt.0.iter().map(|p| p + Vec3::new(0.01, -0.004, 0.002) * p.x.sin()).collect());
        let mask: Vec<bool> = (0..m).map(|j| j % 3 == 0).collect();
        let e = node_error(&pred, &gt, &mask).unwrap();
        let perm: Vec<usize> = (0..m).map(|j| (j * 5 + 1) % m).collect();
        if perm.iter().collect::<std::collections::HashSet<_>>().len() == m {
            let pick = |s: &NodeSequence| NodeSequence(perm.iter().map(|&j| s.0[j]).collect());
            let pmask: Vec<bool> = perm.iter().map(|&j| mask[j]).collect();
            let ep = node_error(&pick(&pred), &pick(&gt), &pmask).unwrap();
            prop_assert!((e.all - ep.all).abs() < 1e-12);
        }
        let (rot, tr) = rigid(seed);
        prop_assert!((uniformity(&gt).unwrap() - uniformity(&gt.transformed(&rot, &tr)).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>()) {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cloud = points(seed, cfg.points, 1.0);
        let mut perm: Vec<usize> = (0..cfg.points).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec3> = perm.iter().map(|&i| cloud[i]).collect();
        let run = |pts: Vec<Vec3>| {
            let plan = EncoderPlan::build(&PointCloud(pts), &cfg).unwrap();
            let mut tape = Tape::new();
            let f = enc.encode(&mut tape, &store, &plan).unwrap();
            tape.value(f).clone()
        };
        let (a, b) = (run(cloud), run(shuffled));
        for (r, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(r).iter().zip(a.row(src)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn regression_is_permutation_invariant_and_translation_equivariant(seed in any::<u64>()) {
        let mut cfg = ModelConfig::new(EncoderConfig::toy(), 4);
        cfg.heads.reg_hidden = vec![8];
        cfg.heads.vote_hidden = vec![6];
        cfg.radius = 0.6;
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(cfg, &mut store, seed).unwrap();
        let cloud = points(seed, 32, 1.0);
        let mut rev = cloud.clone();
        rev.reverse();
        let shift = Vec3::new(0.3, -1.2, 0.7);
        let moved: Vec<Vec3> = cloud.iter().map(|p| p + shift).collect();
        let a = model.infer(&store, &PointCloud(cloud)).unwrap();
        let b = model.infer(&store, &PointCloud(rev)).unwrap();
        let c = model.infer(&store, &PointCloud(moved)).unwrap();
        for j in 0..4 {
            prop_assert!((a.reg.0[j] - b.reg.0[j]).norm() < 1e-6);
            prop_assert!((a.reg.0[j] + shift - c.reg.0[j]).norm() < 1e-6);
        }
    }
}
