//! Fast tier: no training, untrained or lookup models only.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use wmguard::data::{
    subsample_indices, DatasetSplit, ImageTensor, LabeledExample, Standardization, IMAGE_LEN,
};
use wmguard::defense::ood::OODWrappedModel;
use wmguard::defense::randomlabel::{
    components_for_fraction, cross_validate, fit_pca, hungarian_max, stratified_folds,
    FeatureClassifierKind,
};
use wmguard::harness::ExperimentConfig;
use wmguard::metrics::{accuracy, binary_metrics, Classifier};
use wmguard::model::{build_model, ArchId, ArchSpec, FeatureMatrix, TrainedModel};
use wmguard::watermarking::{
    fgsm_batch, input_gradient, watermark_verification, TriggerItem, TriggerSet, TriggerSourceMeta,
    TriggerType, VerificationKey,
};
use wmguard::Result;

fn untrained() -> &'static TrainedModel {
    static M: OnceLock<TrainedModel> = OnceLock::new();
    M.get_or_init(|| {
        build_model(
            &ArchSpec::new(ArchId::Resnet18, 10).with_width_divisor(16),
            5,
        )
        .unwrap()
    })
}

fn image_from(values: &[f32]) -> ImageTensor {
    ImageTensor::new(values.iter().cycle().take(IMAGE_LEN).copied().collect()).unwrap()
}

/// Reads the label to output from the first pixel: `round(p·1000)`.
struct Lookup {
    k: usize,
}

impl Classifier for Lookup {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        Ok(images
            .iter()
            .map(|im| (im.pixels()[0] * 1000.0).round() as usize)
            .collect())
    }
}

struct Constant {
    label: usize,
    k: usize,
}

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn classify(&self, images: &[&ImageTensor]) -> Result<Vec<usize>> {
        Ok(vec![self.label; images.len()])
    }
}

fn trigger_set(assigned: &[usize], k: usize) -> TriggerSet {
    TriggerSet {
        items: assigned
            .iter()
            .map(|&a| TriggerItem {
                image: ImageTensor::filled(0.5),
                assigned_label: a,
                true_label: None,
                clean_source: None,
                origin: None,
            })
            .collect(),
        trigger_type: TriggerType::Ood,
        gen_seed: 0,
        num_classes: k,
        source_meta: TriggerSourceMeta::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fgsm_zero_epsilon_is_identity_and_bound_holds(
        seed in 0u64..1000,
        eps in 0.0f32..0.1,
        label in 0usize..10,
    ) {
        let mut v = Vec::with_capacity(IMAGE_LEN);
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for _ in 0..IMAGE_LEN {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            v.push((s >> 40) as f32 / (1u64 << 24) as f32);
        }
        let x = ImageTensor::new(v).unwrap();
        let m = untrained();
        let same = fgsm_batch(m, &[&x], &[label], 0.0).unwrap();
        prop_assert_eq!(&same[0], &x);

        let adv = fgsm_batch(m, &[&x], &[label], eps).unwrap();
        prop_assert!(adv[0].linf_distance(&x) <= eps + 1e-6);
        prop_assert!(adv[0].pixels().iter().all(|p| (0.0..=1.0).contains(p)));

        // Unclipped pixels move by exactly eps in the direction of the gradient sign.
        let g: Vec<f32> = input_gradient(m, &[&x], &[label]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for ((&a, &b), &gi) in adv[0].pixels().iter().zip(x.pixels()).zip(&g) {
            if gi != 0.0 && b - eps > 0.0 && b + eps < 1.0 {
                prop_assert!((a - (b + eps * gi.signum())).abs() <= 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn verification_matches_count_and_is_monotone_in_threshold(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..60),
        t1 in 0.01f64..=1.0,
        t2 in 0.01f64..=1.0,
    ) {
        let assigned: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let predicted: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut set = trigger_set(&assigned, 10);
        for (item, &p) in set.items.iter_mut().zip(&predicted) {
            item.image = image_from(&[p as f32 / 1000.0]);
        }
        let hits = pairs.iter().filter(|(a, p)| a == p).count();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let v_lo = watermark_verification(&Lookup { k: 10 }, &set, &VerificationKey::new(&set, lo).unwrap()).unwrap();
        let v_hi = watermark_verification(&Lookup { k: 10 }, &set, &VerificationKey::new(&set, hi).unwrap()).unwrap();
        prop_assert_eq!(v_lo.trigger_accuracy, hits as f64 / pairs.len() as f64);
        prop_assert_eq!(v_lo.bit, u8::from(v_lo.trigger_accuracy >= lo));
        prop_assert!(v_hi.bit <= v_lo.bit);
    }

    #[test]
    fn binary_metrics_match_confusion_tally(
        pairs in prop::collection::vec((0usize..2, 0usize..2), 1..200),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = binary_metrics(&preds, &labels).unwrap();
        let count = |p: usize, l: usize| pairs.iter().filter(|&&(a, b)| a == p && b == l).count();
        let (tp, fp, fn_, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
        prop_assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - f1).abs() < 1e-12);
        let acc = accuracy(&preds, &labels).unwrap();
        prop_assert!((acc - (tp + tn) as f64 / pairs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn subsample_is_deterministic_and_sized(len in 1usize..5000, frac in 0.001f64..=1.0, seed: u64) {
        prop_assume!((frac * len as f64).floor() >= 1.0);
        let a = subsample_indices(len, frac, seed).unwrap();
        prop_assert_eq!(&a, &subsample_indices(len, frac, seed).unwrap());
        prop_assert_eq!(a.len(), (frac * len as f64).floor() as usize);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.last().is_some_and(|&i| i < len));
    }

    #[test]
    fn config_hash_ignores_table_order_and_tracks_seeds(
        data_seed in 0u64..1000,
        model_seed in 0u64..1000,
        frac in 0.05f64..=1.0,
        flip: bool,
    ) {
        let seeds = format!("[seeds]\ndata = {data_seed}\nmodel = {model_seed}\n");
        let data = format!("[data]\nadversary_fraction = {frac}\n");
        let a = ExperimentConfig::parse(&format!("{seeds}{data}"), false, &[]).unwrap();
        let b = ExperimentConfig::parse(&format!("{data}{seeds}"), false, &[]).unwrap();
        prop_assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let key = if flip { "seeds.data" } else { "seeds.model" };
        let c = a.with_overrides(&[format!("{key}={}", data_seed + model_seed + 1001)]).unwrap();
        prop_assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    }
}

/// Eigen-scan oracle from the singular values of the centred matrix.
fn oracle_components(rows: usize, dim: usize, values: &[f32], fraction: f64) -> Option<usize> {
    let m = DMatrix::from_row_iterator(rows, dim, values.iter().map(|&v| f64::from(v)));
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(rows, dim, |r, c| m[(r, c)] - mean[c]);
    let mut eig: Vec<f64> = centred
        .singular_values()
        .iter()
        .map(|s| s * s / (rows - 1) as f64)
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let rank = eig.iter().filter(|&&v| v > total * 1e-12).count();
    let mut cum = 0.0;
    for (i, v) in eig.iter().enumerate() {
        let before = cum / total;
        cum += v;
        // Too close to call at f32 input precision.
        if (before - fraction).abs() < 1e-6 || (cum / total - fraction).abs() < 1e-6 {
            return None;
        }
        if cum / total >= fraction {
            return Some((i + 1).min(rank));
        }
    }
    Some(rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pca_component_count_matches_eigen_scan(
        (rows, dim, values) in (6usize..30, 2usize..10).prop_flat_map(|(r, d)| {
            (Just(r), Just(d), prop::collection::vec(-3.0f32..3.0, r * d))
        }),
        fraction in 0.3f64..=0.99,
    ) {
        let Some(want) = oracle_components(rows, dim, &values, fraction) else {
            return Ok(());
        };
        let p = fit_pca(&FeatureMatrix::new(rows, dim, values).unwrap(), fraction).unwrap();
        prop_assert_eq!(p.n_components_kept, want);
    }

    #[test]
    fn component_count_is_monotone_in_fraction(
        mut eig in prop::collection::vec(0.0f64..10.0, 1..20),
        f1 in 0.01f64..=1.0,
        f2 in 0.01f64..=1.0,
    ) {
        prop_assume!(eig.iter().sum::<f64>() > 0.0);
        eig.sort_by(|a, b| b.total_cmp(a));
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(components_for_fraction(&eig, lo) <= components_for_fraction(&eig, hi));
    }

    #[test]
    fn stratified_folds_balance_each_class(labels in prop::collection::vec(0usize..4, 20..120), seed: u64) {
        let counts: Vec<usize> = (0..4).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        prop_assume!(counts.iter().all(|&n| n >= 5));
        let fold = stratified_folds(&labels, 5, seed).unwrap();
        for c in 0..4 {
            let per: Vec<usize> = (0..5)
                .map(|f| labels.iter().zip(&fold).filter(|(&l, &g)| l == c && g == f).count())
                .collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }
}

fn brute_force_max(w: &[Vec<i64>]) -> i64 {
    fn go(w: &[Vec<i64>], row: usize, used: &mut Vec<bool>) -> i64 {
        if row == w.len() {
            return 0;
        }
        let mut best = i64::MIN;
        for c in 0..w.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(w, 0, &mut vec![false; w.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hungarian_equals_brute_force(
        w in (1usize..=6).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0i64..200, k), k)),
    ) {
        let assign = hungarian_max(&w);
        let mut seen = vec![false; w.len()];
        for &c in &assign {
            prop_assert!(!seen[c]);
            seen[c] = true;
        }
        let total: i64 = assign.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
        prop_assert_eq!(total, brute_force_max(&w));
    }
}

#[test]
fn denial_labels_are_uniform() {
    let k = 10;
    let flag_all = Constant { label: 0, k: 2 };
    let inner = Constant { label: 3, k };
    let w = OODWrappedModel::new(&flag_all, &inner, 2024);
    let batch: Vec<ImageTensor> = (0..500).map(|_| ImageTensor::filled(0.5)).collect();
    let refs: Vec<&ImageTensor> = batch.iter().collect();
    let mut counts = vec![0f64; k];
    for _ in 0..20 {
        for l in w.classify(&refs).unwrap() {
            counts[l] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    assert_eq!(n, 10_000.0);
    let expected = n / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat);
    assert!(
        p > 0.01,
        "chi-square {stat:.2}, p = {p:.4}, counts {counts:?}"
    );

    // Passing inputs reach the inner model untouched.
    let pass_all = Constant { label: 1, k: 2 };
    let w = OODWrappedModel::new(&pass_all, &inner, 2024);
    assert!(w.classify(&refs).unwrap().iter().all(|&l| l == 3));
}

fn blobs(per_class: usize, k: usize) -> (FeatureMatrix, Vec<usize>) {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for i in 0..per_class {
            let jitter = (i as f32 * 0.37).sin() * 0.8;
            values.extend([
                c as f32 * 3.0 + jitter,
                (c % 2) as f32 * 2.0 - jitter,
                jitter * 0.5,
            ]);
            labels.push(c);
        }
    }
    (FeatureMatrix::new(labels.len(), 3, values).unwrap(), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn cv_accuracy_ignores_example_order(perm in Just((0usize..45).collect::<Vec<_>>()).prop_shuffle()) {
        let (x, y) = blobs(15, 3);
        let base = cross_validate(FeatureClassifierKind::Svm, &x, &y, 3, 1.0, 9).unwrap();
        let xp = x.select_rows(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let shuffled = cross_validate(FeatureClassifierKind::Svm, &xp, &yp, 3, 1.0, 9).unwrap();
        prop_assert_eq!(base, shuffled);
    }
}

#[test]
fn eval_accuracy_equals_per_example_tally() {
    let examples: Vec<LabeledExample> = (0..40)
        .map(|i| LabeledExample::new(image_from(&[((i * 7) % 10) as f32 / 1000.0]), i % 10))
        .collect();
    let split = DatasetSplit::new("tally", examples, 10, Standardization::default()).unwrap();
    let model = Lookup { k: 10 };
    let preds = model.classify(&split.images()).unwrap();
    let hits = preds
        .iter()
        .zip(split.labels())
        .filter(|(p, l)| **p == *l)
        .count();
    let got = wmguard::metrics::eval_accuracy(&model, &split).unwrap();
    assert_eq!(got, hits as f64 / 40.0);
}
