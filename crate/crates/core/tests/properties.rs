//! Randomized invariants across modules.

use drivelang::action_codec::{
    decode_component, encode_component, flip_action, ActionCodec, ActionTokens, ComponentBounds,
};
use drivelang::driving_language::{
    allowed_range, deserialize, layout, positions, serialize, serialize_with, slot_kind, DrivingSequence, Frame,
    PositionScheme, Slot,
};
use drivelang::evaluator::{pdms, SubScores};
use drivelang::geometry::{compose, integrate, relativize, RelativeAction, Transform2};
use drivelang::model::apply_rotary;
use drivelang::obs_tokenizer::{Codebook, Image, KMeansOptions};
use proptest::prelude::*;

fn action() -> impl Strategy<Value = RelativeAction> {
    (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64).prop_map(|(x, y, t)| RelativeAction::new(x, y, t))
}

fn transform() -> impl Strategy<Value = Transform2> {
    (-50.0..50.0f64, -50.0..50.0f64, -4.0..4.0f64).prop_map(|(x, y, t)| Transform2::from_pose(x, y, t))
}

fn close(a: &Transform2, b: &Transform2, tol: f64) -> bool {
    a.matrix()
        .iter()
        .flatten()
        .zip(b.matrix().iter().flatten())
        .all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn integrate_relativize_round_trip(actions in prop::collection::vec(action(), 1..20)) {
        let traj = integrate(&actions).unwrap();
        let mut abs = vec![Transform2::IDENTITY];
        abs.extend(traj.poses.iter().copied());
        let back = relativize(&abs).unwrap();
        for (a, b) in actions.iter().zip(&back) {
            prop_assert!((a.dx - b.dx).abs() <= 1e-9);
            prop_assert!((a.dy - b.dy).abs() <= 1e-9);
            prop_assert!((a.dtheta - b.dtheta).abs() <= 1e-9);
        }
        for p in &traj.poses {
            prop_assert!((p.rotation_det() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn compose_is_associative(a in transform(), b in transform(), c in transform()) {
        let l = compose(&compose(&a, &b), &c);
        let r = compose(&a, &compose(&b, &c));
        prop_assert!(close(&l, &r, 1e-12 * 150.0));
        prop_assert!((l.rotation_det() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn reversed_inverted_chain_returns_home(actions in prop::collection::vec(action(), 1..16)) {
        let forward = integrate(&actions).unwrap();
        let back: Vec<RelativeAction> = actions.iter().rev().map(|a| a.inverse().unwrap()).collect();
        let ret = integrate(&back).unwrap();
        let home = compose(forward.last().unwrap(), ret.last().unwrap());
        prop_assert!(close(&home, &Transform2::IDENTITY, 1e-9));
    }

    #[test]
    fn codec_component_is_monotone_and_bounded(
        lo in -10.0..0.0f64,
        span in 0.1..20.0f64,
        bins in 2usize..64,
        u in -0.2..1.2f64,
        w in -0.2..1.2f64,
    ) {
        let b = ComponentBounds::new(lo, lo + span).unwrap();
        let (v1, v2) = (lo + u.min(w) * span, lo + u.max(w) * span);
        let (q1, q2) = (encode_component(v1, b, bins), encode_component(v2, b, bins));
        prop_assert!(q1 <= q2);
        prop_assert!((q2 as usize) < bins);
        let d = decode_component(q1, b, bins).unwrap();
        prop_assert!(d >= b.lo && d <= b.hi);
        if (0.0..=1.0).contains(&u.min(w)) {
            let half = span / (2.0 * (bins - 1) as f64);
            let top = q1 as usize == bins - 1;
            prop_assert!(top || (d - v1).abs() <= half * (1.0 + 1e-12), "v {v1} d {d} half {half}");
        }
    }

    #[test]
    fn flip_is_an_involution_and_mirrors_symmetric_codecs(a in action(), bins in 2usize..40) {
        prop_assert_eq!(flip_action(flip_action(a)), a);
        let c = ActionCodec::new(
            ComponentBounds::new(-6.0, 6.0).unwrap(),
            ComponentBounds::new(-6.0, 6.0).unwrap(),
            ComponentBounds::new(-1.5, 1.5).unwrap(),
            bins,
        ).unwrap();
        // floor binning over M-1 intervals: off bin edges, mirroring maps bin q to M-2-q
        let t = c.encode_action(a);
        let f = c.mirrored().encode_action(flip_action(a));
        prop_assert_eq!(t.qx, f.qx);
        let edge = |v: f64, h: f64| {
            let x = (v + h) / (2.0 * h) * (bins - 1) as f64;
            (x - x.round()).abs() < 1e-9
        };
        let top = bins as u32 - 2;
        if !edge(a.dy, 6.0) {
            prop_assert_eq!(f.qy, top - t.qy);
        }
        if !edge(a.dtheta, 1.5) {
            prop_assert_eq!(f.qtheta, top - t.qtheta);
        }
    }

    #[test]
    fn stream_round_trip_and_ranges(
        d in 1u32..40,
        m in 2u32..10,
        frames in prop::collection::vec((prop::collection::vec(0u32..1000, 4), 0u32..100, 0u32..100, 0u32..100), 0..6),
        no_action_positions in any::<bool>(),
    ) {
        let l = layout(d, m).unwrap();
        let seq = DrivingSequence::new(frames.iter().map(|(img, x, y, t)| Frame {
            image: img.iter().map(|v| v % d).collect(),
            action: ActionTokens::new(x % m, y % m, t % m),
        }).collect()).unwrap();
        let scheme = if no_action_positions { PositionScheme::NoActionPositions } else { PositionScheme::FrameWise };
        let s = serialize_with(&seq, &l, scheme).unwrap();
        prop_assert_eq!(s.len(), seq.len() * 7);
        prop_assert_eq!(deserialize(&s.ids, &l, 7).unwrap(), seq.clone());
        for (i, &id) in s.ids.iter().enumerate() {
            let slot = i % 7;
            let (lo, hi) = allowed_range(slot, 7, &l).unwrap();
            prop_assert!(lo <= id && id < hi);
            // exactly one of the four ranges holds the id
            let hits = [l.image_range(), l.action_range(0), l.action_range(1), l.action_range(2)]
                .iter()
                .filter(|(a, b)| *a <= id && id < *b)
                .count();
            prop_assert_eq!(hits, 1);
            // image slots precede the action slots of their frame
            prop_assert_eq!(matches!(slot_kind(slot, 7), Slot::Image(_)), slot < 4);
        }
        if !no_action_positions && !seq.is_empty() {
            prop_assert_eq!(&s.positions, &positions(seq.len(), 7));
            prop_assert_eq!(serialize(&seq, &l).unwrap(), s);
        }
    }

    #[test]
    fn rotary_preserves_norms(
        q in prop::collection::vec(-3.0..3.0f64, 16),
        k in prop::collection::vec(-3.0..3.0f64, 16),
        pos in 0u32..4096,
    ) {
        let (mut q2, mut k2) = (q.clone(), k.clone());
        apply_rotary(&mut q2, &mut k2, pos, 10_000.0).unwrap();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n(&q) - n(&q2)).abs() <= 1e-12 * n(&q).max(1.0));
        prop_assert!((n(&k) - n(&k2)).abs() <= 1e-12 * n(&k).max(1.0));
    }

    #[test]
    fn pdms_is_bounded_and_gated(
        nc in prop::sample::select(vec![0.0, 0.5, 1.0]),
        dac in prop::sample::select(vec![0.0, 1.0]),
        ttc in prop::sample::select(vec![0.0, 1.0]),
        comf in prop::sample::select(vec![0.0, 1.0]),
        ep in 0.0..=1.0f64,
    ) {
        let p = pdms(&SubScores { nc, dac, ttc, comf, ep }, [5.0, 2.0, 5.0]);
        prop_assert!((0.0..=1.0).contains(&p));
        if nc * dac == 0.0 {
            prop_assert_eq!(p, 0.0);
        }
    }
}

fn random_image(seed: u64) -> Image {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut img = Image::new(8, 8);
    for v in img.data.iter_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = ((state >> 33) % 5) as f32 / 4.0;
    }
    img
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn codebook_indices_in_range_and_idempotent(seed in any::<u64>(), size in 1usize..12) {
        let imgs: Vec<Image> = (0..4).map(|i| random_image(seed ^ i)).collect();
        let cb = Codebook::fit(&imgs, KMeansOptions { size, patch: 4, seed, iters: 5 }).unwrap();
        for img in &imgs {
            let g = cb.encode(img).unwrap();
            prop_assert!(g.tokens.iter().all(|&t| (t as usize) < size));
            let again = cb.encode(&cb.decode(&g).unwrap()).unwrap();
            prop_assert_eq!(again, g);
        }
    }
}
