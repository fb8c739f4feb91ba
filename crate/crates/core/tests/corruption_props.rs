use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vecprior::autodiff::Array;
use vecprior::pretrain::{
    corrupt, corrupt_with, map_coordinates, reconstruction_loss, synth_corpus, CorruptionConfig,
    CorruptionMode, MASK_VALUE,
};
use vecprior::vector::PerceptionWindow;

fn corpus(n: usize, seed: u64) -> Vec<vecprior::vector::VectorMap> {
    synth_corpus(n, seed, &PerceptionWindow::default(), 20).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn untouched_points_are_bitwise_unchanged(seed in 0u64..10_000, mask in any::<bool>(), seg in 0.0..1.0f64, pt in 0.0..0.5f64) {
        let map = &corpus(1, seed)[0];
        let cfg = CorruptionConfig {
            mode: if mask { CorruptionMode::Mask } else { CorruptionMode::Noise },
            seg_fraction: seg,
            pt_fraction: pt,
            seed,
            ..CorruptionConfig::default()
        };
        let (out, plan) = corrupt(map, &cfg).unwrap();
        let touched = plan.indices();
        for (i, (a, b)) in map.instances.iter().zip(&out.instances).enumerate() {
            prop_assert_eq!(a.len(), b.len());
            for (j, (p, q)) in a.points().iter().zip(b.points()).enumerate() {
                if touched.contains(&(i, j)) {
                    if mask {
                        prop_assert_eq!((q.x, q.y), (MASK_VALUE, MASK_VALUE));
                    }
                } else {
                    prop_assert_eq!(p, q);
                }
            }
        }
    }

    #[test]
    fn loss_ignores_point_order(values in prop::collection::vec(-30.0..30.0f64, 4..80), shift in 1usize..40) {
        let n = values.len() / 4;
        prop_assume!(n >= 1);
        let pred: Vec<f64> = values[..2 * n].to_vec();
        let target: Vec<f64> = values[2 * n..4 * n].to_vec();
        let rotate = |v: &[f64]| {
            let k = (shift % n) * 2;
            [&v[k..], &v[..k]].concat()
        };
        let a = reconstruction_loss(
            &Array::from_vec(&[n, 2], pred.clone()).unwrap(),
            &Array::from_vec(&[n, 2], target.clone()).unwrap(),
        ).unwrap();
        let b = reconstruction_loss(
            &Array::from_vec(&[n, 2], rotate(&pred)).unwrap(),
            &Array::from_vec(&[n, 2], rotate(&target)).unwrap(),
        ).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}

#[test]
fn mode_none_is_identity() {
    for map in corpus(20, 5) {
        let cfg = CorruptionConfig { mode: CorruptionMode::None, ..CorruptionConfig::default() };
        let (out, plan) = corrupt(&map, &cfg).unwrap();
        assert_eq!(out, map);
        assert!(plan.is_empty());
        assert_eq!(reconstruction_loss(&map_coordinates(&out), &map_coordinates(&map)).unwrap(), 0.0);
    }
}

#[test]
fn noise_displacement_has_rayleigh_mean() {
    // every point corrupted: 1e5 independent 2D draws
    let cfg = CorruptionConfig { seg_fraction: 0.0, pt_fraction: 1.0, ..CorruptionConfig::default() };
    let maps = corpus(800, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut sum, mut n) = (0.0, 0usize);
    'outer: loop {
        for map in &maps {
            let (_, plan) = corrupt_with(map, &cfg, &mut rng).unwrap();
            for p in &plan.points {
                let (dx, dy) = p.delta.unwrap();
                sum += dx.hypot(dy);
                n += 1;
            }
            if n >= 100_000 {
                break 'outer;
            }
        }
    }
    let expected = (std::f64::consts::PI / 2.0).sqrt();
    let mean = sum / n as f64;
    assert!((mean - expected).abs() / expected < 0.05, "mean displacement {mean}");
}
