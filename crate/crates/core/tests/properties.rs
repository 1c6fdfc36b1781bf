use approx::assert_abs_diff_eq;
use dualmem::engine::{Engine, EngineConfig};
use dualmem::fast_weight::{update_weights, FastWeightGradients, FastWeights};
use dualmem::metrics::kdtree::KdTree;
use dualmem::metrics::{ate, chamfer, rpe, umeyama_sim3, TrajectoryPose};
use dualmem::nn::{gaussian_matrix, seeded_rng};
use dualmem::objectives::{conf_regression_loss, PointMap};
use dualmem::state::gated_update;
use dualmem::{FramePacket, StateTokens};
use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (vec3(1.0), 0.0..std::f64::consts::PI).prop_filter_map("degenerate axis", |(axis, angle)| {
        nalgebra::Unit::try_new(axis, 1e-3).map(|a| UnitQuaternion::from_axis_angle(&a, angle))
    })
}

fn trajectory(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<TrajectoryPose>> {
    prop::collection::vec((rotation(), vec3(5.0)), len).prop_map(|poses| {
        poses
            .into_iter()
            .enumerate()
            .map(|(i, (r, t))| TrajectoryPose::new(i as f64, r, t))
            .collect()
    })
}

fn transform(iso: &Isometry3<f64>, traj: &[TrajectoryPose]) -> Vec<TrajectoryPose> {
    traj.iter().map(|p| TrajectoryPose::from_isometry(p.timestamp, &(iso * p.isometry()))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rpe_is_invariant_to_a_global_rigid_motion(
        traj in trajectory(4..20), noise in trajectory(20..21), r in rotation(), t in vec3(10.0)
    ) {
        let est: Vec<_> = traj.iter().zip(&noise)
            .map(|(p, n)| TrajectoryPose::new(p.timestamp, p.rotation * n.rotation.powf(0.05), p.translation + n.translation * 0.05))
            .collect();
        let base = rpe(&est, &traj, 1).unwrap();
        let iso = Isometry3::from_parts(Translation3::from(t), r);
        let moved = rpe(&transform(&iso, &est), &traj, 1).unwrap();
        prop_assert!((base.trans - moved.trans).abs() < 1e-9);
        prop_assert!((base.rot - moved.rot).abs() < 1e-9);
    }

    #[test]
    fn ate_is_zero_under_similarity_transforms(traj in trajectory(3..30), r in rotation(), t in vec3(10.0), s in 0.2f64..5.0) {
        let moved: Vec<_> = traj.iter()
            .map(|p| TrajectoryPose::new(p.timestamp, r * p.rotation, r * p.translation * s + t))
            .collect();
        let e = ate(&moved, &traj);
        if let Ok(e) = e {
            prop_assert!(e < 1e-8, "ATE {}", e);
        }
    }

    #[test]
    fn umeyama_round_trips(pts in prop::collection::vec(vec3(3.0), 4..40), r in rotation(), t in vec3(5.0), s in 0.1f64..10.0) {
        let dst: Vec<_> = pts.iter().map(|p| r * p * s + t).collect();
        if let Ok(fit) = umeyama_sim3(&pts, &dst) {
            for (p, d) in pts.iter().zip(&dst) {
                prop_assert!((fit.apply(p) - d).norm() < 1e-7 * (1.0 + d.norm()));
            }
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in prop::collection::vec(vec3(2.0), 1..60), b in prop::collection::vec(vec3(2.0), 1..60)) {
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        prop_assert_eq!(ab.accuracy, ba.completeness);
        prop_assert_eq!(ab.completeness, ba.accuracy);
        prop_assert!(ab.cd >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap().cd, 0.0);
    }

    #[test]
    fn kdtree_knn_matches_brute_force(pts in prop::collection::vec(vec3(1.0), 1..80), q in vec3(1.5), k in 1usize..10) {
        let tree = KdTree::build(&pts);
        let got: Vec<f64> = tree.knn(&q, k).iter().map(|n| n.dist_sq).collect();
        let mut all: Vec<f64> = pts.iter().map(|p| (p - q).norm_squared()).collect();
        all.sort_by(f64::total_cmp);
        all.truncate(k);
        prop_assert_eq!(got, all);
    }

    #[test]
    fn gated_state_stays_between_old_and_candidate(seed in any::<u64>(), n in 1usize..8, c in 1usize..8) {
        let mut rng = seeded_rng(seed);
        let prev = StateTokens { tokens: gaussian_matrix(n, c, 1.0, &mut rng) };
        let cand = StateTokens { tokens: gaussian_matrix(n, c, 1.0, &mut rng) };
        let zeta = gaussian_matrix(n, c, 1.0, &mut rng).map(dualmem::nn::sigmoid);
        let next = gated_update(&prev, &cand, &zeta).unwrap();
        for i in 0..n * c {
            let (lo, hi) = (prev.tokens[i].min(cand.tokens[i]), prev.tokens[i].max(cand.tokens[i]));
            prop_assert!(next.tokens[i] >= lo - 1e-15 && next.tokens[i] <= hi + 1e-15);
        }
    }

    #[test]
    fn weight_update_is_affine_in_the_gradient(seed in any::<u64>(), a in 0.9f64..1.0, e1 in 0.0f64..2.0, e2 in 0.0f64..2.0) {
        let mut rng = seeded_rng(seed);
        let mut fw = FastWeights::zeros(2, 3);
        let mut g = FastWeightGradients::zeros(2, 3);
        for (h, gh) in fw.heads.iter_mut().zip(g.heads.iter_mut()) {
            for (m, gm) in h.matrices_mut().into_iter().zip(gh.matrices_mut()) {
                *m = gaussian_matrix(3, 3, 1.0, &mut rng);
                *gm = gaussian_matrix(3, 3, 1.0, &mut rng);
            }
        }
        let alpha = DVector::from_element(2, a);
        let at = |eta: f64| update_weights(&fw, &g, &alpha, &DMatrix::from_element(3, 2, eta)).unwrap();
        let (w1, w2, w0) = (at(e1), at(e2), at(0.0));
        for ((x1, x2), x0) in w1.heads.iter().zip(&w2.heads).zip(&w0.heads) {
            for ((m1, m2), m0) in x1.matrices().into_iter().zip(x2.matrices()).zip(x0.matrices()) {
                // (W(e1) − W(0)) e2 == (W(e2) − W(0)) e1
                let lhs = (m1 - m0) * e2;
                let rhs = (m2 - m0) * e1;
                prop_assert!((lhs - rhs).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_loss_is_invariant_to_target_scale(seed in any::<u64>(), k in 0.01f64..100.0, n in 2usize..30) {
        let mut rng = seeded_rng(seed);
        let pts = |rng: &mut _| {
            let m = gaussian_matrix(n, 3, 1.0, rng);
            m.row_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect::<Vec<_>>()
        };
        let pred = PointMap::new(pts(&mut rng), vec![1.5; n]).unwrap();
        let target = PointMap::new(pts(&mut rng), vec![1.0; n]).unwrap();
        let base = conf_regression_loss(&pred, &target, 0.2).unwrap();
        let scaled = conf_regression_loss(&pred, &target.scaled(k), 0.2).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-9 * (1.0 + base.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn engine_memory_stays_finite_and_fixed_size(seed in any::<u64>(), frames in prop::collection::vec((1usize..12, -50.0f64..50.0), 1..12)) {
        let mut engine = Engine::new(EngineConfig::toy(seed)).unwrap();
        let footprint = engine.footprint_bytes();
        let mut rng = seeded_rng(seed ^ 1);
        for (i, (tokens, scale)) in frames.into_iter().enumerate() {
            let packet = FramePacket::new(gaussian_matrix(tokens, 64, scale, &mut rng), i, false).unwrap();
            let out = engine.recurrent_step(&packet).unwrap();
            prop_assert!(out.ttt_loss.is_finite());
            prop_assert!(engine.fast_weights.is_finite());
            prop_assert_eq!(engine.footprint_bytes(), footprint);
            let cap = dualmem::engine::default_norm_cap(12);
            for m in engine.fast_weights.heads.iter().flat_map(|h| h.matrices()) {
                prop_assert!(m.norm() <= cap * (1.0 + 1e-12));
            }
        }
        prop_assert!(engine.state.tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_restore_continues_identically(seed in any::<u64>(), warm in 1usize..5) {
        let mut rng = seeded_rng(seed);
        let packets: Vec<FramePacket> = (0..warm + 3)
            .map(|i| FramePacket::new(gaussian_matrix(5, 64, 1.0, &mut rng), i, false).unwrap())
            .collect();
        let mut a = Engine::new(EngineConfig::toy(seed)).unwrap();
        for p in &packets[..warm] {
            a.recurrent_step(p).unwrap();
        }
        let mut blob = Vec::new();
        a.write_checkpoint(&mut blob).unwrap();
        let mut b = Engine::new(EngineConfig::toy(seed)).unwrap();
        b.restore_checkpoint(&mut blob.as_slice()).unwrap();
        for p in &packets[warm..] {
            let (oa, ob) = (a.recurrent_step(p).unwrap(), b.recurrent_step(p).unwrap());
            prop_assert_eq!(oa.posterior_pose, ob.posterior_pose);
        }
        prop_assert_eq!(&a.state, &b.state);
    }
}
