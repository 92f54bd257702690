//! Property tests for the crate-wide invariants.

use deyo_core::data::{make_stream, synth_fallback_with_flip, ScenarioKind, ScenarioSpec};
use deyo_core::deyo::{select, AdaptConfig};
use deyo_core::metrics::{rc_curve, EvalRecord};
use deyo_core::numerics::{entropy, softmax, Rng};
use deyo_core::transforms::{patch_shuffle, pixel_shuffle, ImageGrid};
use proptest::prelude::*;

fn finite_logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-300.0f64..300.0, n)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_positive(logits in (2usize..8).prop_flat_map(finite_logits)) {
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_is_permutation_equivariant(
        logits in finite_logits(5),
        swap in (0usize..5, 0usize..5),
    ) {
        let p = softmax(&logits).unwrap();
        let mut permuted = logits.clone();
        permuted.swap(swap.0, swap.1);
        let q = softmax(&permuted).unwrap();
        let mut p_perm = p.clone();
        p_perm.swap(swap.0, swap.1);
        for (a, b) in p_perm.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_probabilities_is_bounded(logits in (2usize..8).prop_flat_map(finite_logits)) {
        let p = softmax(&logits).unwrap();
        let e = entropy(&p);
        prop_assert!(e >= -1e-12);
        prop_assert!(e <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn plpd_of_probability_vectors_stays_in_range(
        a in finite_logits(4),
        b in finite_logits(4),
    ) {
        // PLPD is a difference of probabilities at one index.
        let pa = softmax(&a).unwrap();
        let pb = softmax(&b).unwrap();
        let y = deyo_core::numerics::argmax(&pa);
        let plpd = pa[y] - pb[y];
        prop_assert!((-1.0..=1.0).contains(&plpd));
    }

    #[test]
    fn selection_is_monotone_in_thresholds(
        ent in 0.0f64..0.7,
        plpd in -1.0f64..1.0,
        tau_ent in 0.05f64..0.69,
        tau_plpd in -1.0f64..1.0,
        slack in 0.0f64..0.3,
    ) {
        let mut cfg = AdaptConfig::deyo(2);
        cfg.tau_ent = tau_ent;
        cfg.tau_plpd = tau_plpd;
        let base = select(ent, plpd, &cfg);
        // Lowering tau_plpd or raising tau_ent never unselects a sample.
        let mut looser = cfg.clone();
        looser.tau_plpd = tau_plpd - slack;
        looser.tau_ent = (tau_ent + slack).min(2.0f64.ln());
        if base {
            prop_assert!(select(ent, plpd, &looser));
        }
    }

    #[test]
    fn shuffles_preserve_pixel_multisets(
        seed in any::<u64>(),
        n in prop::sample::select(vec![1usize, 2, 4, 7]),
    ) {
        let mut rng = Rng::new(seed);
        let mut img = ImageGrid::new(28, 28, 3);
        img.data.iter_mut().for_each(|v| *v = rng.next_f64());
        let mut sorted_in: Vec<u64> = img.data.iter().map(|v| v.to_bits()).collect();
        sorted_in.sort_unstable();

        let patched = patch_shuffle(&img, n, &mut rng).unwrap();
        let mut sorted_patch: Vec<u64> = patched.data.iter().map(|v| v.to_bits()).collect();
        sorted_patch.sort_unstable();
        prop_assert_eq!(&sorted_patch, &sorted_in);

        let pixeled = pixel_shuffle(&img, &mut rng);
        let mut sorted_pixel: Vec<u64> = pixeled.data.iter().map(|v| v.to_bits()).collect();
        sorted_pixel.sort_unstable();
        prop_assert_eq!(&sorted_pixel, &sorted_in);
    }

    #[test]
    fn aurc_is_a_rank_statistic(
        seed in any::<u64>(),
        scale in 0.1f64..3.0,
    ) {
        let mut rng = Rng::new(seed);
        let records: Vec<EvalRecord> = (0..40)
            .map(|_| EvalRecord {
                confidence: rng.uniform(-2.0, 2.0),
                correct: rng.bernoulli(0.6),
                entropy: 0.0,
                plpd: 0.0,
                group_id: 0,
            })
            .collect();
        let base = rc_curve(&records).unwrap().aurc;
        let transformed: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord { confidence: (r.confidence * scale).tanh(), ..*r })
            .collect();
        prop_assert_eq!(rc_curve(&transformed).unwrap().aurc, base);
    }

    #[test]
    fn streams_preserve_the_sample_multiset(
        seed in any::<u64>(),
        n in 4usize..80,
        batch in 1usize..24,
        kind in prop::sample::select(vec![
            ScenarioKind::Mild,
            ScenarioKind::LabelShift,
            ScenarioKind::BatchSize1,
        ]),
    ) {
        let samples = synth_fallback_with_flip(n, 0.5, &mut Rng::new(seed)).unwrap();
        let spec = ScenarioSpec::new(kind, batch, seed ^ 0xabcd);
        let stream = make_stream(&samples, &spec).unwrap();
        let total: usize = stream.iter().map(|b| b.len()).sum();
        prop_assert_eq!(total, n);
        let mut seen: Vec<u64> = stream
            .iter()
            .flat_map(|b| b.images.iter().map(|img| {
                // Hash each image by its bits to compare multisets.
                img.data.iter().fold(0u64, |acc, v| {
                    acc.wrapping_mul(1099511628211).wrapping_add(v.to_bits())
                })
            }))
            .collect();
        let mut expect: Vec<u64> = samples
            .iter()
            .map(|s| {
                s.image.data.iter().fold(0u64, |acc, v| {
                    acc.wrapping_mul(1099511628211).wrapping_add(v.to_bits())
                })
            })
            .collect();
        seen.sort_unstable();
        expect.sort_unstable();
        prop_assert_eq!(seen, expect);
    }
}
