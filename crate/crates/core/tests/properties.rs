use noisemask::data::{stratified_split, Split};
use noisemask::distributions::{beta_sample, BetaParams, EPS};
use noisemask::evaluation::{auroc_binary, compute_metrics};
use noisemask::mask::{apply_mask, gaussian_blur, upsample, UpsampleMode};
use noisemask::networks::EmaState;
use noisemask::{Rng, Tensor};
use proptest::prelude::*;

fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn scores_and_labels() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
    (2usize..5, 1usize..40).prop_flat_map(|(c, n)| {
        (
            Just(c),
            prop::collection::vec((0u8..6).prop_map(|q| q as f64 / 5.0), n * c),
            prop::collection::vec(0..c, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_each_class_with_rounded_counts(
        counts in prop::collection::vec(0usize..40, 1..6),
        seed in any::<u64>(),
    ) {
        let labels: Vec<u16> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c as u16; n]).collect();
        let splits = stratified_split(&labels, counts.len(), (0.7, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(splits.len(), labels.len());
        for (c, &n) in counts.iter().enumerate() {
            let of = |s: Split| (0..labels.len()).filter(|&i| labels[i] as usize == c && splits[i] == s).count();
            let (tr, va, te) = (of(Split::Train), of(Split::Val), of(Split::Test));
            prop_assert_eq!(tr + va + te, n);
            if n >= 3 {
                prop_assert!(va >= 1 && te >= 1 && tr >= 1);
                let expected = 0.15 * n as f64;
                prop_assert!((va as f64 - expected).abs() <= 1.0);
                prop_assert!((te as f64 - expected).abs() <= 1.0);
            } else {
                prop_assert_eq!(tr, n);
            }
        }
        prop_assert_eq!(&splits, &stratified_split(&labels, counts.len(), (0.7, 0.15, 0.15), seed).unwrap());
    }

    #[test]
    fn metrics_agree_with_brute_force((c, scores, labels) in scores_and_labels()) {
        let n = labels.len();
        let t = Tensor::new(vec![n, c], scores.clone()).unwrap();
        let report = compute_metrics(&t, &labels).unwrap();
        let preds: Vec<usize> = (0..n)
            .map(|i| {
                let row = &scores[i * c..(i + 1) * c];
                (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b })
            })
            .collect();
        let correct = (0..n).filter(|&i| preds[i] == labels[i]).count();
        prop_assert!((report.accuracy - correct as f64 / n as f64).abs() < 1e-12);
        let mut f1s = Vec::new();
        for k in 0..c {
            let tp = (0..n).filter(|&i| preds[i] == k && labels[i] == k).count() as f64;
            let fp = (0..n).filter(|&i| preds[i] == k && labels[i] != k).count() as f64;
            let fn_ = (0..n).filter(|&i| preds[i] != k && labels[i] == k).count() as f64;
            if tp + fn_ > 0.0 {
                f1s.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
            }
            let column: Vec<f64> = (0..n).map(|i| scores[i * c + k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            let oracle = pairwise_auroc(&column, &pos);
            match (report.per_class[k].auroc, oracle) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
        let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        prop_assert!((report.macro_f1 - macro_f1).abs() < 1e-12);
    }

    #[test]
    fn auroc_matches_pairwise_count(
        pairs in prop::collection::vec(((0u8..8).prop_map(|q| q as f64), any::<bool>()), 1..60),
    ) {
        let (scores, pos): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        match (auroc_binary(&scores, &pos), pairwise_auroc(&scores, &pos)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn masking_never_brightens(seed in any::<u64>(), h in 2usize..10, w in 2usize..10) {
        let mut rng = Rng::new(seed);
        let image = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
        let mask = Tensor::new(vec![h, w], (0..h * w).map(|_| rng.uniform()).collect()).unwrap();
        let out = apply_mask(&image, &mask).unwrap();
        prop_assert!(out.data().iter().zip(image.data()).all(|(o, i)| *o <= *i && *o >= 0.0));
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.data().len() as f64;
        prop_assert!(mean(&out) <= mean(&image));
    }

    #[test]
    fn upsample_and_blur_stay_inside_input_range(
        seed in any::<u64>(),
        bilinear in any::<bool>(),
        kernel in (0usize..5).prop_map(|k| 2 * k + 1),
        sigma in 0.3f64..8.0,
    ) {
        let mut rng = Rng::new(seed);
        let raw = Tensor::new(vec![4, 4], (0..16).map(|_| rng.uniform()).collect()).unwrap();
        let lo = raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mode = if bilinear { UpsampleMode::Bilinear } else { UpsampleMode::Nearest };
        let up = upsample(&raw, 12, 12, mode).unwrap();
        let blurred = gaussian_blur(&up, kernel, sigma).unwrap();
        for t in [&up, &blurred] {
            prop_assert_eq!(t.shape(), &[12, 12][..]);
            prop_assert!(t.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn beta_samples_stay_in_clamped_interval(
        seed in any::<u64>(),
        a in 0.01f64..50.0,
        b in 0.01f64..50.0,
    ) {
        let params = BetaParams::new(Tensor::full(&[3, 3], a), Tensor::full(&[3, 3], b)).unwrap();
        let x = beta_sample(&params, &mut Rng::new(seed));
        prop_assert!(x.data().iter().all(|&v| (EPS..=1.0 - EPS).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_maps_stay_finite_and_bounded(seed in any::<u64>(), tau_d in 0.5f64..0.999) {
        let mut ema = EmaState::new(4, 4, 0.9, tau_d).unwrap();
        let mut rng = Rng::new(seed);
        let draw = |rng: &mut Rng| Tensor::new(vec![4, 4], (0..16).map(|_| -5.0 + 10.0 * rng.uniform()).collect()).unwrap();
        for _ in 0..10_000 {
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            ema.update(&a, &b).unwrap();
        }
        for t in [ema.alpha(), ema.beta()] {
            prop_assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= 5.0));
        }
    }
}
