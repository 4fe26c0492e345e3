use std::collections::BTreeSet;

use proptest::prelude::*;

use diffinterp::diffusion::{lerp, slerp};
use diffinterp::tree::{build_tree, frame_schedule, keyed_noise, place_timesteps, GenerationConfig, InterpolationTree};

/// Follows parent links upward from `i`, collecting every interior ancestor.
fn ancestors(tree: &InterpolationTree, i: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut stack = vec![i];
    while let Some(j) = stack.pop() {
        let node = tree.node(j).unwrap();
        for p in [node.parent_lo, node.parent_hi] {
            if p != 0 && p != tree.num_frames && out.insert(p) {
                stack.push(p);
            }
        }
    }
    out
}

fn valid_levels() -> impl Strategy<Value = (usize, usize)> {
    (2usize..160).prop_flat_map(|n| {
        let max_k = (usize::BITS - (n - 1).leading_zeros()) as usize;
        (Just(n), 1..=max_k.max(1) + 2)
    })
}

proptest! {
    #[test]
    fn every_interior_frame_appears_once((n, k) in valid_levels(), lo in 0.05f64..0.4, span in 0.1f64..0.55) {
        let ts = place_timesteps(k, lo, lo + span, 1000).unwrap();
        let tree = build_tree(n, &ts, None).unwrap();
        tree.validate().unwrap();
        let mut seen: Vec<usize> = tree.nodes.iter().map(|nd| nd.index).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (1..n).collect::<Vec<_>>());
    }

    #[test]
    fn parents_bracket_and_are_noisier((n, k) in valid_levels()) {
        let ts = place_timesteps(k, 0.25, 0.65, 1000).unwrap();
        let tree = build_tree(n, &ts, None).unwrap();
        for node in &tree.nodes {
            prop_assert!(node.parent_lo < node.index && node.index < node.parent_hi);
            for a in ancestors(&tree, node.index) {
                prop_assert!(tree.node(a).unwrap().timestep > node.timestep);
            }
            prop_assert!(ts.contains(&node.timestep));
        }
    }

    #[test]
    fn descendants_are_the_inverse_of_ancestors((n, k) in valid_levels()) {
        let ts = place_timesteps(k, 0.25, 0.65, 1000).unwrap();
        let tree = build_tree(n, &ts, None).unwrap();
        for node in &tree.nodes {
            let below = tree.descendants(node.index);
            let expected: BTreeSet<usize> = tree
                .nodes
                .iter()
                .filter(|d| ancestors(&tree, d.index).contains(&node.index))
                .map(|d| d.index)
                .collect();
            prop_assert_eq!(&below, &expected);
            prop_assert!(below.iter().all(|&d| node.parent_lo < d && d < node.parent_hi));
        }
    }

    #[test]
    fn default_level_count_bisects(n in 2usize..300) {
        let config = GenerationConfig { num_frames: n, ..GenerationConfig::default() };
        let tree = config.tree().unwrap();
        // ceil(log2 N) levels leave spans of at most 2 for the last level,
        // so every node is a floor midpoint
        for nd in &tree.nodes {
            prop_assert_eq!(nd.index, (nd.parent_lo + nd.parent_hi) / 2);
        }
        prop_assert!(tree.depth() <= config.num_levels());
    }

    #[test]
    fn timesteps_increase_inside_the_window(k in 1usize..12, lo in 0.01f64..0.5, span in 0.2f64..0.49) {
        let ts = place_timesteps(k, lo, lo + span, 1000).unwrap();
        prop_assert_eq!(ts.len(), k);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ts.iter().all(|&t| (lo * 1000.0).round() as u32 <= t && t <= ((lo + span) * 1000.0).round() as u32));
        prop_assert_eq!(*ts.last().unwrap(), ((lo + span) * 1000.0).round() as u32);
    }

    #[test]
    fn frame_schedule_is_a_symmetric_triangle(n in 2usize..100, t_min in 1u32..400, extra in 0u32..500) {
        let t_max = t_min + extra;
        for i in 1..n {
            let t = frame_schedule(i, n, t_min, t_max).unwrap();
            prop_assert!(t_min <= t && t <= t_max);
            prop_assert_eq!(t, frame_schedule(n - i, n, t_min, t_max).unwrap());
            if 2 * i < n {
                prop_assert!(frame_schedule(i + 1, n, t_min, t_max).unwrap() >= t);
            }
        }
    }

    #[test]
    fn slerp_is_symmetric_on_dyadic_weights(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        num in 0u32..=1024,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let u = num as f64 / 1024.0;
        prop_assert_eq!(slerp(&a, &b, u).unwrap(), slerp(&b, &a, 1.0 - u).unwrap());
        prop_assert_eq!(lerp(&a, &b, u).unwrap(), lerp(&b, &a, 1.0 - u).unwrap());
    }

    #[test]
    fn slerp_norm_stays_between_the_endpoints_for_equal_norms(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
        u in 0.0f64..=1.0,
    ) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&a) > 1e-2 && norm(&b) > 1e-2);
        let a: Vec<f64> = a.iter().map(|x| x / norm(&a)).collect();
        let b: Vec<f64> = b.iter().map(|x| x / norm(&b)).collect();
        let s = slerp(&a, &b, u).unwrap();
        prop_assert!((norm(&s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn keyed_noise_depends_only_on_its_key(seed in any::<u64>(), stream in any::<u64>()) {
        let x = keyed_noise(seed, stream, (2, 3, 4));
        prop_assert_eq!(&x, &keyed_noise(seed, stream, (2, 3, 4)));
        prop_assert_ne!(&x, &keyed_noise(seed, stream.wrapping_add(1), (2, 3, 4)));
        prop_assert_ne!(&x, &keyed_noise(seed.wrapping_add(1), stream, (2, 3, 4)));
    }
}

#[test]
fn too_few_levels_for_the_fill_rule_still_covers_everything() {
    // a single level must place every interior frame directly
    let tree = build_tree(9, &[500], None).unwrap();
    assert_eq!(tree.nodes.len(), 8);
    assert!(tree.nodes.iter().all(|nd| nd.parent_lo == 0 && nd.parent_hi == 9 && nd.timestep == 500));
}

#[test]
fn branching_factors_split_each_span() {
    let tree = build_tree(9, &[250, 650], Some(&[3, 3])).unwrap();
    tree.validate().unwrap();
    let top: Vec<usize> = tree.level(0).map(|nd| nd.index).collect();
    assert_eq!(top, vec![3, 6]);
    // 3 bounds both the span below it and the one above
    assert_eq!(tree.descendants(3), BTreeSet::from([1, 2, 4, 5]));
}

#[test]
fn bad_timesteps_are_rejected() {
    assert!(build_tree(8, &[400, 300], None).is_err());
    assert!(build_tree(1, &[400], None).is_err());
    assert!(place_timesteps(0, 0.25, 0.65, 1000).is_err());
    assert!(place_timesteps(600, 0.25, 0.65, 1000).is_err());
}
