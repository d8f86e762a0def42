use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smae::geometry::{chamfer, fps, knn, Point};
use smae::masking::{block_mask, csem_mask, random_mask, target_count, MaskPlan};
use smae::pipeline::metrics::nmi;
use smae::RunConfig;

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..max)
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud(40), b in cloud(40)) {
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fps_picks_distinct_indices(pts in cloud(50), frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
        let n = pts.len();
        let count = 1 + ((n - 1) as f64 * frac) as usize;
        let start = ((n - 1) as f64 * start_frac) as usize;
        let picked = fps(&pts, count, start).unwrap();
        prop_assert_eq!(picked.len(), count);
        prop_assert_eq!(picked[0], start);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), count);
    }

    #[test]
    fn knn_starts_at_the_center_for_distinct_points(pts in cloud(30), k_frac in 0.0f64..1.0) {
        let n = pts.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let centers: Vec<usize> = (0..n).collect();
        for h in knn(&pts, &centers, k).unwrap() {
            prop_assert_eq!(h.member_indices.len(), k);
            let d0 = h.local_coords[0].iter().map(|v| v * v).sum::<f64>();
            prop_assert_eq!(d0, 0.0);
            let dists: Vec<f64> = h.local_coords.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
            prop_assert!(dists.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn every_strategy_masks_the_target(
        assignment in prop::collection::vec(0usize..6, 4..64),
        ratio in 0.05f64..0.95,
        m_c in 0usize..4,
        seed in any::<u64>(),
    ) {
        let g = assignment.len();
        prop_assume!(target_count(g, ratio).is_ok());
        let t = target_count(g, ratio).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Point> = (0..g).map(|i| [i as f64, (i * i % 7) as f64, 0.0]).collect();
        prop_assert_eq!(random_mask(g, ratio, &mut rng).unwrap().masked_count(), t);
        prop_assert_eq!(block_mask(&centers, ratio, &mut rng).unwrap().masked_count(), t);
        let plan = csem_mask(&assignment, m_c, ratio, &mut rng).unwrap();
        prop_assert_eq!(plan.masked_count(), t);
        prop_assert_eq!(MaskPlan::from_bitstring(&plan.bitstring()).unwrap().masked, plan.masked.clone());
        for c in &plan.fully_masked_components {
            let (n, m) = plan.per_component_counts[c];
            prop_assert_eq!(n, m);
        }
    }

    #[test]
    fn nmi_is_bounded_and_symmetric(
        a in prop::collection::vec(0usize..4, 2..50),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rand::Rng::gen_range(&mut rng, 0..3)).collect();
        let v = nmi(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - nmi(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0, ratio in 0.2f64..0.8) {
        let cfg = RunConfig { seed, lr, mask_ratio: ratio, ..RunConfig::test_small() };
        prop_assert_eq!(RunConfig::parse(&cfg.to_text(), "toy").unwrap(), cfg);
    }
}
