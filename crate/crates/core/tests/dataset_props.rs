use pco_core::dataset::{
    generate_synthetic, make_batches, parse_dataset, synthetic_prototypes, write_dataset, SyntheticSpec,
};
use pco_core::metrics::pearson;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = SyntheticSpec> {
    (2usize..6, 0.5f64..5.0, 0.01f64..1.0, 1usize..12, 1usize..5, 0usize..8, any::<u64>()).prop_map(
        |(phonemes, center_scale, noise_scale, utterances, min_phones, extra, seed)| SyntheticSpec {
            phonemes,
            center_scale,
            noise_scale,
            utterances,
            min_phones,
            max_phones: min_phones + extra,
            seed,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn file_round_trip(spec in spec_strategy()) {
        let data = generate_synthetic(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = parse_dataset(buf.as_slice(), true).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn batches_partition_the_mask(spec in spec_strategy(), batch_size in 1usize..6, seed in any::<Option<u64>>()) {
        let data = generate_synthetic(&spec).unwrap();
        let batches = make_batches(&data, batch_size, spec.max_phones, seed).unwrap();
        let masked: usize = batches.iter().map(|b| b.mask.iter().filter(|&&m| m).count()).sum();
        let total: usize = data.iter().map(|s| s.len()).sum();
        prop_assert_eq!(masked, total);
        prop_assert_eq!(batches.iter().map(|b| b.batch_size).sum::<usize>(), data.len());
        for b in &batches {
            for (cell, &m) in b.mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(b.phone_targets[cell], -1.0);
                }
            }
        }
    }
}

#[test]
fn distance_from_prototype_falls_with_score() {
    for seed in 0..5 {
        let spec = SyntheticSpec { utterances: 200, seed, ..Default::default() };
        let protos = synthetic_prototypes(&spec).unwrap();
        let data = generate_synthetic(&spec).unwrap();
        let (mut dist, mut score) = (Vec::new(), Vec::new());
        for p in data.iter().flat_map(|s| &s.phones) {
            let d: f64 = p
                .gop
                .iter()
                .zip(&protos[p.phoneme_id])
                .map(|(x, m)| (x - spec.center_scale * m).powi(2))
                .sum::<f64>()
                .sqrt();
            dist.push(d);
            score.push(p.phone_accuracy);
        }
        let r = pearson(&dist, &score).unwrap();
        assert!(r < 0.0, "seed {seed}: r = {r}");
    }
}

#[test]
fn prototypes_are_unit_and_match_generation() {
    let spec = SyntheticSpec { phonemes: 4, utterances: 20, noise_scale: 1e-9, seed: 3, ..Default::default() };
    let protos = synthetic_prototypes(&spec).unwrap();
    for m in &protos {
        let n: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    // with negligible noise every feature is parallel to its prototype
    for p in generate_synthetic(&spec).unwrap().iter().flat_map(|s| s.phones.clone()) {
        let norm: f64 = p.gop.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            let cos: f64 = p.gop.iter().zip(&protos[p.phoneme_id]).map(|(x, m)| x * m).sum::<f64>() / norm;
            assert!(cos > 0.999);
        }
    }
}
