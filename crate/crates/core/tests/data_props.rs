//! Synthetic generators: purity, passkey structure, copy placement and the
//! Zipf marginal.

use kvlab_core::data::{gen_passkey, gen_recall_corpus, gen_zipf, Corpus, CorpusKind, VocabLayout, NEEDLE, QUERY};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #[test]
    fn generators_are_pure(seed: u64, len in 8usize..200, depth in 0.0f64..=1.0) {
        let layout = VocabLayout::new(40, 6).unwrap();
        prop_assert_eq!(
            gen_passkey(&layout, len, depth, 2, &mut rng(seed)).unwrap(),
            gen_passkey(&layout, len, depth, 2, &mut rng(seed)).unwrap()
        );
        let copies = (len - 1) / 8;
        prop_assert_eq!(
            gen_recall_corpus(&layout, len, 4, copies, &mut rng(seed)).unwrap(),
            gen_recall_corpus(&layout, len, 4, copies, &mut rng(seed)).unwrap()
        );
        let c = Corpus::new(layout, CorpusKind::Mixed(0.5));
        prop_assert_eq!(c.sample(64, &mut rng(seed)).unwrap(), c.sample(64, &mut rng(seed)).unwrap());
    }

    #[test]
    fn passkey_answer_is_unique(seed: u64, len in 6usize..300, depth in 0.0f64..=1.0, key_len in 1usize..4) {
        let layout = VocabLayout::new(32, 8).unwrap();
        prop_assume!(len > key_len + 3);
        let inst = gen_passkey(&layout, len, depth, key_len, &mut rng(seed)).unwrap();
        let t = &inst.tokens;
        prop_assert_eq!(t.len(), len);
        let (a, b) = inst.needle_span.unwrap();
        prop_assert_eq!(&t[a + 1..b], &inst.answer[..]);
        prop_assert_eq!(t.iter().filter(|&&x| x == NEEDLE).count(), 2);
        prop_assert_eq!(t.iter().filter(|&&x| x == QUERY).count(), 1);
        prop_assert_eq!(t.iter().filter(|&&x| layout.is_key(x)).count(), key_len);
        prop_assert_eq!(&t[len - 2..], &[QUERY, NEEDLE][..]);
    }

    #[test]
    fn copies_sit_at_region_ends(seed: u64, copies in 1usize..6, span in 2usize..8) {
        let layout = VocabLayout::new(64, 4).unwrap();
        let len = copies * 4 * span + 3;
        let t = gen_recall_corpus(&layout, len, span, copies, &mut rng(seed)).unwrap();
        prop_assert!(t.iter().all(|&x| x >= 2));
        let region = len / copies;
        for c in 0..copies {
            let target = (c + 1) * region - span;
            let copy = &t[target..target + span];
            prop_assert!((0..=target - span).any(|s| &t[s..s + span] == copy));
        }
    }
}

/// Pearson statistic of `samples` against the exact Zipf pmf on `vocab`.
fn chi_square(samples: &[u32], vocab: usize, exponent: f64) -> f64 {
    let weights: Vec<f64> = (1..=vocab).map(|k| (k as f64).powf(-exponent)).collect();
    let z: f64 = weights.iter().sum();
    let mut counts = vec![0usize; vocab];
    for &s in samples {
        counts[s as usize] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .zip(&weights)
        .map(|(&o, w)| {
            let e = n * w / z;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn zipf_marginal_fits_its_pmf() {
    // 99.9% quantile of chi-square with 9 degrees of freedom.
    let critical = 27.88;
    for (exponent, seed) in [(1e-3, 1), (0.5, 2), (1.0, 3), (1.5, 4)] {
        let s = gen_zipf(100_000, 10, exponent, &mut rng(seed)).unwrap();
        let stat = chi_square(&s, 10, exponent);
        assert!(stat < critical, "exponent {exponent}: chi2 {stat}");
    }
    // A near-uniform draw must be rejected against a steep pmf.
    let flat = gen_zipf(100_000, 10, 1e-3, &mut rng(9)).unwrap();
    assert!(chi_square(&flat, 10, 1.0) > 1000.0);
}
