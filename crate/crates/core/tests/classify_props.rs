use std::collections::BTreeMap;

use faceid::classify::{
    evaluate, split_by_time, train_lstm, train_rf, train_svm, LabeledDataset, LstmModel, LstmParams, LstmWeights,
    RfParams, Sample, Standardizer, SvmParams,
};
use faceid::rng::Stream;
use proptest::prelude::*;

/// Subjects are Gaussian clusters; each sequence drifts slowly over time.
fn dataset(rng: &mut Stream, subjects: usize, sequences: usize, frames: usize, dim: usize) -> LabeledDataset {
    let mut samples = Vec::new();
    let mut seq = 0;
    for s in 0..subjects {
        let centre: Vec<f64> = (0..dim).map(|_| rng.normal() * 4.0).collect();
        for _ in 0..sequences {
            let drift: Vec<f64> = (0..dim).map(|_| rng.normal() * 0.05).collect();
            for f in 0..frames {
                samples.push(Sample {
                    features: (0..dim).map(|j| centre[j] + drift[j] * f as f64 + rng.normal() * 0.3).collect(),
                    subject: 10 + s as u32,
                    sequence: seq,
                    frame: f as u32,
                });
            }
            seq += 1;
        }
    }
    rng.shuffle(&mut samples);
    LabeledDataset::new(samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_never_leaks_future_frames(seed in any::<u64>(), frac in 0.05f64..0.95, frames in 2usize..20) {
        let mut rng = Stream::new(seed, 0);
        let data = dataset(&mut rng, 3, 2, frames, 2);
        let Ok(plan) = split_by_time(&data, frac) else { return Ok(()); };
        let mut train_max: BTreeMap<u32, u32> = BTreeMap::new();
        let mut test_min: BTreeMap<u32, u32> = BTreeMap::new();
        for &i in &plan.train {
            let s = &data.samples()[i];
            let e = train_max.entry(s.sequence).or_insert(0);
            *e = (*e).max(s.frame);
        }
        for &i in &plan.test {
            let s = &data.samples()[i];
            let e = test_min.entry(s.sequence).or_insert(u32::MAX);
            *e = (*e).min(s.frame);
        }
        for (q, lo) in &test_min {
            prop_assert!(*lo > train_max[q]);
        }
        prop_assert_eq!(plan.train.len() + plan.test.len(), data.len());
    }

    #[test]
    fn softmax_outputs_are_distributions(seed in any::<u64>(), d in 1usize..8, h in 1usize..8, c in 2usize..6) {
        let mut rng = Stream::new(seed, 1);
        let model = LstmModel {
            classes: (0..c as u32).collect(),
            standardizer: Standardizer { mean: vec![0.0; d], scale: vec![1.0; d] },
            lookback: 3,
            dropout: 0.0,
            weights: LstmWeights::xavier(d, h, c, &mut rng),
        };
        let frames: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.normal() * 10.0).collect()).collect();
        let window: Vec<&[f64]> = frames.iter().map(Vec::as_slice).collect();
        let p = model.probabilities(&window).unwrap();
        prop_assert_eq!(p.len(), c);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn standardisation_uses_train_rows_only(seed in any::<u64>()) {
        let mut rng = Stream::new(seed, 2);
        let data = dataset(&mut rng, 3, 2, 10, 4);
        let plan = split_by_time(&data, 0.7).unwrap();
        let train = data.subset(&plan.train).unwrap();
        let want = Standardizer::fit(train.samples().iter().map(|s| s.features.as_slice()));
        let svm = train_svm(&train, &SvmParams { epochs: 2, seed, ..Default::default() }).unwrap();
        prop_assert_eq!(&svm.standardizer, &want);
        let lstm = train_lstm(&train, &LstmParams { hidden: 3, epochs: 1, lookback: 2, seed, ..Default::default() }).unwrap();
        prop_assert_eq!(&lstm.standardizer, &want);
    }

    #[test]
    fn training_is_deterministic(seed in any::<u64>()) {
        let mut rng = Stream::new(seed, 3);
        let data = dataset(&mut rng, 3, 2, 8, 3);
        let rf = RfParams { trees: 5, seed, ..Default::default() };
        prop_assert_eq!(train_rf(&data, &rf).unwrap(), train_rf(&data, &rf).unwrap());
        let svm = SvmParams { epochs: 3, seed, ..Default::default() };
        prop_assert_eq!(train_svm(&data, &svm).unwrap(), train_svm(&data, &svm).unwrap());
        let lstm = LstmParams { hidden: 3, epochs: 2, lookback: 2, seed, ..Default::default() };
        prop_assert_eq!(train_lstm(&data, &lstm).unwrap(), train_lstm(&data, &lstm).unwrap());
    }
}

#[test]
fn more_trees_do_not_hurt() {
    let mut rng = Stream::new(4, 0);
    let data = dataset(&mut rng, 8, 2, 20, 6);
    let plan = split_by_time(&data, 0.8).unwrap();
    let train = data.subset(&plan.train).unwrap();
    let score = |trees| {
        let m = train_rf(&train, &RfParams { trees, seed: 4, ..Default::default() }).unwrap();
        evaluate(&m, &data, &plan).unwrap().accuracy
    };
    let (one, many) = (score(1), score(100));
    assert!(many >= one - 0.01, "100 trees {many}, 1 tree {one}");
}
