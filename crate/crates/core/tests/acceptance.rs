//! One line per acceptance criterion. Criteria that need the real datasets run
//! only when `WMGUARD_DATA_ROOT` points at them and report BLOCKED otherwise;
//! blocked criteria count as failures.

mod common;

use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use wmguard::data::{subsample_indices, ImageTensor, IMAGE_LEN};
use wmguard::defense::ood::OODWrappedModel;
use wmguard::defense::randomlabel::{components_for_fraction, fit_pca, hungarian_max};
use wmguard::harness::{revalidate, run_experiment, EvalReport, ExperimentConfig, Pipeline, Stage};
use wmguard::metrics::{binary_metrics, Classifier};
use wmguard::model::{build_model, ArchId, ArchSpec, FeatureMatrix};
use wmguard::watermarking::{
    fgsm_batch, watermark_verification, TriggerItem, TriggerSet, TriggerSourceMeta, TriggerType,
    VerificationKey,
};

const MIN_MARKED_TEST_ACC: f64 = 0.80;
const MARK_BUDGET_SECONDS: f64 = 2.0 * 3600.0;
const ADV_MAX_WRAPPED_WM: f64 = 0.30;
const ADV_MAX_TEST_DROP: f64 = 0.02;
const OOD_DILUTED_MAX_WM: f64 = 0.30;
const OOD_DILUTED_MAX_TEST_DROP: f64 = 0.10;
const OOD_EXCLUDED_MIN_WM: f64 = 0.60;
const RL_MAX_WRAPPED_WM: f64 = 0.15;
const RL_MIN_WRAPPED_TEST: f64 = 0.55;
const SVM_CV_RANGE: (f64, f64) = (0.73, 0.85);
const PCA_MAX_CV_LOSS: f64 = 0.01;
const KMEANS_RANGE: (f64, f64) = (0.55, 0.75);
const HUNGARIAN_TRIALS: usize = 1000;
const FAST_TIER_BUDGET_SECONDS: f64 = 60.0;
const DENIAL_N: usize = 10_000;
const DENIAL_MIN_P: f64 = 0.01;

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Blocked,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Blocked => "FAIL (BLOCKED)",
        })
    }
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn blocked(why: &str) -> Outcome {
    Outcome {
        status: Status::Blocked,
        detail: why.to_string(),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

/// Real data root, when every dataset the criteria need is present.
fn real_root() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("WMGUARD_DATA_ROOT")?);
    let needed = [
        "cifar-10-batches-bin/data_batch_1.bin",
        "cifar-100-binary/test.bin",
        "svhn/train_32x32.mat",
        "cinic-10/train",
    ];
    needed.iter().all(|p| root.join(p).exists()).then_some(root)
}

const NO_DATA: &str = "needs CIFAR-10, CIFAR-100, SVHN and CINIC-10 under WMGUARD_DATA_ROOT";

struct RealRuns {
    root: PathBuf,
    out: PathBuf,
}

impl RealRuns {
    fn config(&self, file: &str, overrides: &[&str]) -> ExperimentConfig {
        let mut all = vec![
            format!("data.root=\"{}\"", self.root.display()),
            format!("out_dir=\"{}\"", self.out.display()),
        ];
        all.extend(overrides.iter().map(|s| s.to_string()));
        ExperimentConfig::load(&common::workspace_root().join("configs").join(file), &all).unwrap()
    }

    fn run(&self, file: &str, overrides: &[&str]) -> Result<EvalReport, String> {
        run_experiment(&self.config(file, overrides), false).map_err(|e| e.to_string())
    }
}

fn real_runs() -> Option<RealRuns> {
    let root = real_root()?;
    let out = std::env::var_os("WMGUARD_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| common::workspace_root().join("runs/acceptance"));
    Some(RealRuns { root, out })
}

fn or_fail(r: Result<Outcome, String>) -> Outcome {
    r.unwrap_or_else(|e| pass_if(false, format!("run failed: {e}")))
}

fn criterion_1(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail((|| {
        let cfg = runs.config("adversarial.toml", &[]);
        let r = run_experiment(&cfg, false).map_err(|e| e.to_string())?;
        let p = Pipeline::new(cfg, false);
        let mark = p.run_stage(Stage::Mark, false).map_err(|e| e.to_string())?;
        let b = r.baseline;
        Ok(pass_if(
            b.watermark_accuracy == 1.0
                && b.verification_bit == 1
                && b.test_accuracy >= MIN_MARKED_TEST_ACC
                && mark.wall_clock_seconds <= MARK_BUDGET_SECONDS,
            format!(
                "trigger acc {}, bit {}, test acc {} (>= {}), marking took {:.0} s (<= {:.0} s)",
                pct(b.watermark_accuracy),
                b.verification_bit,
                pct(b.test_accuracy),
                pct(MIN_MARKED_TEST_ACC),
                mark.wall_clock_seconds,
                MARK_BUDGET_SECONDS
            ),
        ))
    })())
}

fn criterion_2(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail(runs.run("adversarial.toml", &[]).map(|r| {
        let drop = r.baseline.test_accuracy - r.test_accuracy;
        pass_if(
            r.watermark_accuracy <= ADV_MAX_WRAPPED_WM
                && drop <= ADV_MAX_TEST_DROP
                && r.baseline.verification_bit == 1
                && r.verification_bit == 0,
            format!(
                "wrapped trigger acc {} (<= {}), test drop {:.2} points (<= {:.0}), bit {} -> {}",
                pct(r.watermark_accuracy),
                pct(ADV_MAX_WRAPPED_WM),
                drop * 100.0,
                ADV_MAX_TEST_DROP * 100.0,
                r.baseline.verification_bit,
                r.verification_bit
            ),
        )
    }))
}

fn criterion_3(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail(runs.run("ood-diluted.toml", &[]).map(|r| {
        let drop = r.baseline.test_accuracy - r.test_accuracy;
        pass_if(
            r.watermark_accuracy <= OOD_DILUTED_MAX_WM && drop <= OOD_DILUTED_MAX_TEST_DROP,
            format!(
                "wrapped trigger acc {} (<= {}), test drop {:.2} points (<= {:.0})",
                pct(r.watermark_accuracy),
                pct(OOD_DILUTED_MAX_WM),
                drop * 100.0,
                OOD_DILUTED_MAX_TEST_DROP * 100.0
            ),
        )
    }))
}

fn criterion_4(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail((|| {
        let diluted = runs.run("ood-diluted.toml", &[])?;
        let excluded = runs.run("ood-excluded.toml", &[])?;
        let same_triggers = diluted.checkpoint_hashes.get("trigger.triggers")
            == excluded.checkpoint_hashes.get("trigger.triggers");
        Ok(pass_if(
            same_triggers
                && excluded.watermark_accuracy >= OOD_EXCLUDED_MIN_WM
                && excluded.watermark_accuracy > diluted.watermark_accuracy,
            format!(
                "excluded trigger acc {} (>= {}) vs diluted {}, shared trigger set: {same_triggers}",
                pct(excluded.watermark_accuracy),
                pct(OOD_EXCLUDED_MIN_WM),
                pct(diluted.watermark_accuracy)
            ),
        ))
    })())
}

fn criterion_5(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail(runs.run("random-label.toml", &[]).map(|r| {
        pass_if(
            r.watermark_accuracy <= RL_MAX_WRAPPED_WM && r.test_accuracy >= RL_MIN_WRAPPED_TEST,
            format!(
                "wrapped trigger acc {} (<= {}), wrapped test acc {} (>= {})",
                pct(r.watermark_accuracy),
                pct(RL_MAX_WRAPPED_WM),
                pct(r.test_accuracy),
                pct(RL_MIN_WRAPPED_TEST)
            ),
        )
    }))
}

fn criterion_6(runs: Option<&RealRuns>) -> Outcome {
    let Some(runs) = runs else {
        return blocked(NO_DATA);
    };
    or_fail((|| {
        let plain = runs.run("random-label.toml", &[])?;
        let pca = runs.run(
            "random-label.toml",
            &["wrapper.random_label.pca_fraction=0.95"],
        )?;
        let (a, b) = (
            plain.cv_accuracy.unwrap_or(0.0),
            pca.cv_accuracy.unwrap_or(0.0),
        );
        Ok(pass_if(
            (SVM_CV_RANGE.0..=SVM_CV_RANGE.1).contains(&a) && b >= a - PCA_MAX_CV_LOSS,
            format!(
                "CV acc {} in [{}, {}], PCA-0.95 CV acc {} with {} components (>= {})",
                pct(a),
                pct(SVM_CV_RANGE.0),
                pct(SVM_CV_RANGE.1),
                pct(b),
                pca.pca_components.unwrap_or(0),
                pct(a - PCA_MAX_CV_LOSS)
            ),
        ))
    })())
}

fn brute_force_max(w: &[Vec<i64>]) -> i64 {
    let k = w.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = i64::MIN;
    // Heap's algorithm over all k! column orders.
    let mut c = vec![0usize; k];
    let score = |p: &[usize]| p.iter().enumerate().map(|(r, &col)| w[r][col]).sum::<i64>();
    best = best.max(score(&perm));
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn criterion_7(runs: Option<&RealRuns>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..HUNGARIAN_TRIALS {
        let k = rng.random_range(1..=6);
        let w: Vec<Vec<i64>> = (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..500)).collect())
            .collect();
        let a = hungarian_max(&w);
        let got: i64 = a.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
        let mut cols = a.clone();
        cols.sort_unstable();
        if got != brute_force_max(&w) || cols != (0..k).collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    let hungarian = format!(
        "Hungarian matched brute force in {}/{HUNGARIAN_TRIALS} trials",
        HUNGARIAN_TRIALS - mismatches
    );
    let Some(runs) = runs else {
        return blocked(&format!("{hungarian}; k-means half {NO_DATA}"));
    };
    or_fail(
        runs.run(
            "random-label.toml",
            &["wrapper.random_label.classifier=\"kmeans\""],
        )
        .map(|r| {
            let acc = r.cv_accuracy.unwrap_or(0.0);
            pass_if(
                mismatches == 0 && (KMEANS_RANGE.0..=KMEANS_RANGE.1).contains(&acc),
                format!(
                    "{hungarian}; k-means accuracy {} in [{}, {}]",
                    pct(acc),
                    pct(KMEANS_RANGE.0),
                    pct(KMEANS_RANGE.1)
                ),
            )
        }),
    )
}

struct Fixed(usize, usize);

impl Classifier for Fixed {
    fn num_classes(&self) -> usize {
        self.1
    }

    fn classify(&self, images: &[&ImageTensor]) -> wmguard::Result<Vec<usize>> {
        Ok(vec![self.0; images.len()])
    }
}

fn fast_tier() -> Result<Vec<&'static str>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = Vec::new();

    let model = build_model(
        &ArchSpec::new(ArchId::Resnet18, 10).with_width_divisor(16),
        1,
    )
    .map_err(|e| e.to_string())?;
    let images: Vec<ImageTensor> = (0..8)
        .map(|_| ImageTensor::new((0..IMAGE_LEN).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let labels: Vec<usize> = (0..8).collect();
    let same = fgsm_batch(&model, &refs, &labels, 0.0).map_err(|e| e.to_string())?;
    let adv = fgsm_batch(&model, &refs, &labels, 8.0 / 255.0).map_err(|e| e.to_string())?;
    if same != images
        || adv.iter().zip(&images).any(|(a, x)| {
            a.linf_distance(x) > 8.0 / 255.0 + 1e-6
                || a.pixels().iter().any(|p| !(0.0..=1.0).contains(p))
        })
    {
        return Err("FGSM identity or L-infinity bound violated".into());
    }
    checked.push("fgsm");

    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let items: Vec<TriggerItem> = (0..n)
            .map(|_| TriggerItem {
                image: ImageTensor::filled(0.5),
                assigned_label: rng.random_range(0..3),
                true_label: None,
                clean_source: None,
                origin: None,
            })
            .collect();
        let hits = items.iter().filter(|i| i.assigned_label == 1).count();
        let set = TriggerSet {
            items,
            trigger_type: TriggerType::Ood,
            gen_seed: 0,
            num_classes: 3,
            source_meta: TriggerSourceMeta::default(),
        };
        let mut last_bit = 1;
        for step in 1..=20 {
            let t = f64::from(step) / 20.0;
            let v =
                watermark_verification(&Fixed(1, 3), &set, &VerificationKey::new(&set, t).unwrap())
                    .map_err(|e| e.to_string())?;
            if v.trigger_accuracy != hits as f64 / n as f64 || v.bit > last_bit {
                return Err("verification count or threshold monotonicity violated".into());
            }
            last_bit = v.bit;
        }
    }
    checked.push("threshold");

    let wrapped = OODWrappedModel::new(&Fixed(0, 2), &Fixed(4, 10), 99);
    let batch: Vec<ImageTensor> = (0..DENIAL_N / 10)
        .map(|_| ImageTensor::filled(0.1))
        .collect();
    let brefs: Vec<&ImageTensor> = batch.iter().collect();
    let mut counts = [0f64; 10];
    for _ in 0..10 {
        for l in wrapped.classify(&brefs).map_err(|e| e.to_string())? {
            counts[l] += 1.0;
        }
    }
    let e = DENIAL_N as f64 / 10.0;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    if p <= DENIAL_MIN_P {
        return Err(format!("denial labels not uniform (p = {p:.4})"));
    }
    checked.push("denial");

    for _ in 0..100 {
        let (rows, dim) = (rng.random_range(6..25), rng.random_range(2..8));
        let values: Vec<f32> = (0..rows * dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = FeatureMatrix::new(rows, dim, values.clone()).unwrap();
        let m =
            nalgebra::DMatrix::from_row_iterator(rows, dim, values.iter().map(|&v| f64::from(v)));
        let mean = m.row_mean();
        let centred = nalgebra::DMatrix::from_fn(rows, dim, |r, c| m[(r, c)] - mean[c]);
        let mut eig: Vec<f64> = centred
            .singular_values()
            .iter()
            .map(|s| s * s / (rows - 1) as f64)
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let f = 0.9;
        let total: f64 = eig.iter().sum();
        let mut cum = 0.0;
        let near = eig.iter().any(|v| {
            cum += v;
            (cum / total - f).abs() < 1e-6
        });
        if near {
            continue;
        }
        let got = fit_pca(&x, f).map_err(|e| e.to_string())?.n_components_kept;
        if got != components_for_fraction(&eig, f) {
            return Err("PCA component count differs from the eigen scan".into());
        }
    }
    checked.push("pca");

    for _ in 0..200 {
        let n = rng.random_range(1..100);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let m = binary_metrics(&preds, &labels).map_err(|e| e.to_string())?;
        let tp = preds
            .iter()
            .zip(&labels)
            .filter(|&(&p, &l)| p == 1 && l == 1)
            .count();
        let fp = preds
            .iter()
            .zip(&labels)
            .filter(|&(&p, &l)| p == 1 && l == 0)
            .count();
        let fn_ = preds
            .iter()
            .zip(&labels)
            .filter(|&(&p, &l)| p == 0 && l == 1)
            .count();
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        if (m.tp, m.fp, m.fn_) != (tp, fp, fn_) || (m.f1 - f1).abs() > 1e-12 {
            return Err("binary metrics disagree with confusion counts".into());
        }
    }
    checked.push("metrics");

    for _ in 0..200 {
        let len = rng.random_range(1..3000);
        let frac = rng.random_range(0.01..=1.0);
        let seed = rng.random();
        if (frac * len as f64).floor() < 1.0 {
            continue;
        }
        let a = subsample_indices(len, frac, seed).map_err(|e| e.to_string())?;
        if a != subsample_indices(len, frac, seed).map_err(|e| e.to_string())? {
            return Err("subsample not deterministic".into());
        }
    }
    checked.push("subsample");

    for _ in 0..50 {
        let s: u64 = rng.random_range(0..1000);
        let seeds = format!("[seeds]\ndata = {s}\n");
        let data = "[data]\ntest_fraction = 0.5\n";
        let a = ExperimentConfig::parse(&format!("{seeds}{data}"), false, &[])
            .map_err(|e| e.to_string())?;
        let b = ExperimentConfig::parse(&format!("{data}{seeds}"), false, &[])
            .map_err(|e| e.to_string())?;
        if a.config_hash().map_err(|e| e.to_string())?
            != b.config_hash().map_err(|e| e.to_string())?
        {
            return Err("config hash depends on key order".into());
        }
    }
    checked.push("config-hash");
    Ok(checked)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let r = fast_tier();
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(checked) => pass_if(
            secs < FAST_TIER_BUDGET_SECONDS,
            format!(
                "{} property groups held in {secs:.1} s (< {FAST_TIER_BUDGET_SECONDS:.0} s)",
                checked.join(", ")
            ),
        ),
        Err(e) => pass_if(false, e),
    }
}

fn criterion_9() -> Outcome {
    or_fail((|| {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = common::tiny_config(
            out.path(),
            &["trigger.type=\"ood\"", "wrapper.kind=\"ood\""],
        );
        let first = run_experiment(&cfg, false).map_err(|e| e.to_string())?;
        let eval_dir = eval_dir(&cfg)?;
        let first_bytes = std::fs::read(eval_dir.join("report.json")).map_err(|e| e.to_string())?;
        std::fs::remove_dir_all(cfg.out_dir.join("cache")).map_err(|e| e.to_string())?;
        let second = run_experiment(&cfg, false).map_err(|e| e.to_string())?;
        let second_bytes =
            std::fs::read(eval_dir.join("report.json")).map_err(|e| e.to_string())?;
        let revalidated = revalidate(&eval_dir).map_err(|e| e.to_string())?;
        Ok(pass_if(
            first == second && first_bytes == second_bytes && revalidated == first,
            format!(
                "fresh rerun on synthetic data: report equal {}, persisted bytes equal {}, offline revalidation equal {}",
                first == second,
                first_bytes == second_bytes,
                revalidated == first
            ),
        ))
    })())
}

fn eval_dir(cfg: &ExperimentConfig) -> Result<PathBuf, String> {
    let p = Pipeline::new(cfg.clone(), false);
    let rec = p.run_stage(Stage::Eval, false).map_err(|e| e.to_string())?;
    Ok(p.stage_dir(Stage::Eval, &rec.key))
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

#[test]
fn acceptance() {
    let runs = real_runs();
    let runs = runs.as_ref();
    let criteria: Vec<(u8, &str, Check<'_>)> = vec![
        (1, "watermark embedding", Box::new(|| criterion_1(runs))),
        (2, "adversarial wrapper", Box::new(|| criterion_2(runs))),
        (
            3,
            "OOD wrapper, diluted pool",
            Box::new(|| criterion_3(runs)),
        ),
        (
            4,
            "OOD wrapper, excluded pool",
            Box::new(|| criterion_4(runs)),
        ),
        (5, "random-label wrapper", Box::new(|| criterion_5(runs))),
        (6, "feature SVM and PCA", Box::new(|| criterion_6(runs))),
        (7, "k-means and Hungarian", Box::new(|| criterion_7(runs))),
        (8, "fast property tier", Box::new(criterion_8)),
        (9, "end-to-end determinism", Box::new(criterion_9)),
    ];
    let mut failed = Vec::new();
    let _ = writeln!(std::io::stdout());
    for (id, title, check) in &criteria {
        let o = check();
        // Written past the test harness capture so the lines always show.
        let _ = writeln!(
            std::io::stdout(),
            "criterion {id} [{}] {title}: {}",
            o.status,
            o.detail
        );
        if o.status != Status::Pass {
            failed.push(*id);
        }
    }
    assert!(failed.is_empty(), "criteria not met: {failed:?}");
}
