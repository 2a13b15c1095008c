mod common;

use asia_core::eval::miou;
use asia_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(rng: &mut ChaCha8Rng, parts: u16) -> Vec<u16> {
    (0..256).map(|_| rng.gen_range(0..parts)).collect()
}

#[test]
fn miou_matches_set_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let parts = rng.gen_range(2..6);
        let (pred, gt) = (grid(&mut rng, parts as u16), grid(&mut rng, parts as u16));
        let valid: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.8)).collect();
        for ignore in [false, true] {
            let rep = miou(&pred, &gt, &valid, parts, ignore).unwrap();
            let mut want = common::iou_oracle(&pred, &gt, &valid, parts);
            if ignore {
                want[0] = None;
            }
            for (a, b) in rep.per_part.iter().zip(&want) {
                match (a, b) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-15),
                    _ => assert_eq!(a, b),
                }
            }
            let inc: Vec<f64> = want.into_iter().flatten().collect();
            assert!((rep.miou - inc.iter().sum::<f64>() / inc.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_valid_mask_is_an_empty_input_error() {
    let err = miou(&[0, 1], &[0, 1], &[false, false], 2, false).unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("no valid cells"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (grid(&mut rng, 4), grid(&mut rng, 4));
        let valid = vec![true; 256];
        let ab = miou(&a, &b, &valid, 4, false).unwrap();
        let ba = miou(&b, &a, &valid, 4, false).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn miou_ignores_consistent_relabeling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (grid(&mut rng, 5), grid(&mut rng, 5));
        let mut perm: Vec<u16> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabel = |v: &[u16]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let valid = vec![true; 256];
        let x = miou(&a, &b, &valid, 5, false).unwrap();
        let y = miou(&relabel(&a), &relabel(&b), &valid, 5, false).unwrap();
        prop_assert!((x.miou - y.miou).abs() < 1e-12);
        for r in 0..5 {
            prop_assert_eq!(x.per_part[r], y.per_part[perm[r] as usize]);
        }
    }
}
