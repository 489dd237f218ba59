//! Stage DAG `data → trigger → mark → defend → eval` with a content-keyed cache.
//!
//! A stage's key hashes its config subtree together with the keys and artifact
//! hashes of its upstream stages. Artifacts live in `out_dir/cache/<stage>-<key>/`
//! and are published by renaming a fully written temporary directory.

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{ExperimentConfig, WrapperKind};
use super::report::{EvalReport, ModelEval};
use crate::data::{
    load_cinic10_non_cifar, load_dataset, subsample, write_sidecar, DatasetId, DatasetSpec,
    DatasetSplit, SplitKind,
};
use crate::defense::adversarial::{
    build_adv_pairs, load_adv_bundle, save_adv_bundle, train_adv_detector, train_purifier,
    AdvWrappedModel,
};
use crate::defense::ood::{
    build_ood_training_set, load_ood_bundle, save_ood_bundle, train_ood_detector, NegativePool,
    OODWrappedModel, PoolMode,
};
use crate::defense::randomlabel::{
    fit_pca, load_rl_bundle, save_rl_bundle, train_feature_classifier, train_partial_extractor,
    FeatureClassifierConfig, RLWrappedModel,
};
use crate::error::{Error, Result};
use crate::metrics::{eval_accuracy, Classifier};
use crate::model::{build_model, load_checkpoint, save_checkpoint, train, ArchSpec, LossKind};
use crate::util::{self, sha256_hex};
use crate::watermarking::{
    key_generation, load_trigger_set, save_trigger_set, watermark_marking, watermark_verification,
    MarkingMeta, MarkingOptions, TriggerSet, TriggerSources, TriggerType, VerificationKey,
    WatermarkedModel,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Trigger,
    Mark,
    Defend,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Data,
        Stage::Trigger,
        Stage::Mark,
        Stage::Defend,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Trigger => "trigger",
            Stage::Mark => "mark",
            Stage::Defend => "defend",
            Stage::Eval => "eval",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Trigger => &[Stage::Data],
            Stage::Mark => &[Stage::Data, Stage::Trigger],
            Stage::Defend => &[Stage::Data, Stage::Mark],
            Stage::Eval => &[Stage::Data, Stage::Trigger, Stage::Mark, Stage::Defend],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Written as `stage.json` in every stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    /// Upstream stage → key.
    pub upstream: BTreeMap<String, String>,
    /// Artifact → content hash.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

/// Per-purpose seed derived from a configured base seed.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    let h = sha256_hex(format!("{base}:{purpose}").as_bytes());
    u64::from_str_radix(&h[..16], 16).unwrap_or(base)
}

/// All splits an experiment touches, loaded once per process.
pub struct Datasets {
    pub train: DatasetSplit,
    pub mark: Option<DatasetSplit>,
    pub test: DatasetSplit,
    pub adversary: DatasetSplit,
    pub foreign: Option<DatasetSplit>,
    pub rl_train: Option<DatasetSplit>,
    pub pool: Vec<DatasetSplit>,
}

impl Datasets {
    pub fn mark_split(&self) -> &DatasetSplit {
        self.mark.as_ref().unwrap_or(&self.train)
    }

    fn named(&self) -> Vec<(String, &DatasetSplit)> {
        let mut v = vec![
            ("train".to_string(), &self.train),
            ("test".to_string(), &self.test),
            ("adversary".to_string(), &self.adversary),
        ];
        if let Some(m) = &self.mark {
            v.push(("mark".into(), m));
        }
        if let Some(f) = &self.foreign {
            v.push(("foreign".into(), f));
        }
        if let Some(r) = &self.rl_train {
            v.push(("rl_train".into(), r));
        }
        for p in &self.pool {
            v.push((format!("pool.{}", p.name), p));
        }
        v
    }
}

fn take_random(split: &DatasetSplit, k: usize, seed: u64) -> Result<DatasetSplit> {
    if k > split.len() {
        return Err(Error::Config(format!(
            "split `{}` has {} examples, {k} requested",
            split.name,
            split.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, split.len(), k).into_vec();
    idx.sort_unstable();
    let mut out = split.subset(format!("{}-take{k}-s{seed}", split.name), &idx);
    out.source_seed = seed;
    Ok(out)
}

/// Two disjoint index sets, the second holding `round(fraction·n)` indices.
fn holdout_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::Validation(format!(
            "cannot hold out from {n} examples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = rand::seq::index::sample(&mut rng, n, k).into_vec();
    held.sort_unstable();
    let mut mask = vec![false; n];
    for &i in &held {
        mask[i] = true;
    }
    Ok(((0..n).filter(|&i| !mask[i]).collect(), held))
}

fn pool_ids(cfg: &ExperimentConfig) -> Vec<DatasetId> {
    let o = &cfg.wrapper.ood;
    o.pool
        .iter()
        .copied()
        .filter(|id| o.mode == PoolMode::Diluted || !o.excluded_ids.contains(id))
        .collect()
}

fn load_split(id: DatasetId, split: SplitKind, root: &Path) -> Result<DatasetSplit> {
    load_dataset(&DatasetSpec::new(id, split, root))
}

/// Loads every split the config needs.
pub fn load_datasets(cfg: &ExperimentConfig, root: &Path) -> Result<Datasets> {
    let seeds = &cfg.seeds;
    let task = cfg.data.task;
    let train = load_split(task, SplitKind::Train, root)?;
    let test = subsample(
        &load_split(task, SplitKind::Test, root)?,
        cfg.data.test_fraction,
        derive_seed(seeds.data, "test"),
    )?;
    let mark = if cfg.data.mark_fraction < 1.0 {
        Some(subsample(
            &train,
            cfg.data.mark_fraction,
            derive_seed(seeds.data, "mark"),
        )?)
    } else {
        None
    };
    let adversary = subsample(&train, cfg.data.adversary_fraction, seeds.data)?;
    let foreign = if cfg.trigger.kind == TriggerType::Ood {
        Some(load_split(
            cfg.trigger.foreign,
            cfg.trigger.foreign_split,
            root,
        )?)
    } else {
        None
    };
    let mut rl_train = None;
    let mut pool = Vec::new();
    match cfg.wrapper.kind {
        WrapperKind::RandomLabel if cfg.wrapper.random_label.train_dataset != task => {
            let id = cfg.wrapper.random_label.train_dataset;
            rl_train = Some(subsample(
                &load_split(id, SplitKind::Train, root)?,
                cfg.data.adversary_fraction,
                seeds.data,
            )?);
        }
        WrapperKind::Ood => {
            let ids = pool_ids(cfg);
            if ids.is_empty() {
                return Err(Error::Config(
                    "negative pool is empty after exclusion".into(),
                ));
            }
            let need = (cfg.wrapper.ood.balance * adversary.len() as f64).round() as usize;
            for (i, &id) in ids.iter().enumerate() {
                let share = need / ids.len() + usize::from(i < need % ids.len());
                let full = if id == DatasetId::Cinic10 {
                    load_cinic10_non_cifar(root, SplitKind::Train)?
                } else {
                    load_split(id, SplitKind::Train, root)?
                };
                pool.push(take_random(
                    &full,
                    share,
                    derive_seed(seeds.data, &format!("pool.{id}")),
                )?);
            }
        }
        _ => {}
    }
    Ok(Datasets {
        train,
        mark,
        test,
        adversary,
        foreign,
        rl_train,
        pool,
    })
}

/// Resolves, caches and executes pipeline stages for one config.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    /// Run missing upstream stages instead of failing.
    pub auto_upstream: bool,
    data_root: PathBuf,
    datasets: OnceCell<Datasets>,
    records: RefCell<BTreeMap<Stage, StageRecord>>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, auto_upstream: bool) -> Self {
        let data_root = cfg.data_root();
        Pipeline {
            cfg,
            auto_upstream,
            data_root,
            datasets: OnceCell::new(),
            records: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("cache")
    }

    pub fn stage_dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.cache_dir()
            .join(format!("{stage}-{}", &key[..16.min(key.len())]))
    }

    fn datasets(&self) -> Result<&Datasets> {
        if let Some(d) = self.datasets.get() {
            return Ok(d);
        }
        let d = load_datasets(&self.cfg, &self.data_root)?;
        Ok(self.datasets.get_or_init(|| d))
    }

    /// Datasets, checked against the hashes the data stage recorded.
    fn checked_datasets(&self, data: &StageRecord) -> Result<&Datasets> {
        let d = self.datasets()?;
        for (name, split) in d.named() {
            let want = data.outputs.get(&format!("split.{name}"));
            if want != Some(&split.content_hash()) {
                return Err(Error::Validation(format!(
                    "split `{name}` differs from the one recorded by the data stage; re-run `data`"
                )));
            }
        }
        Ok(d)
    }

    fn subtree(&self, stage: Stage) -> Result<Value> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Data => json!({
                "task": c.data.task,
                "adversary_fraction": c.data.adversary_fraction,
                "mark_fraction": c.data.mark_fraction,
                "test_fraction": c.data.test_fraction,
                "seed": c.seeds.data,
                "foreign": (c.trigger.kind == TriggerType::Ood).then(|| json!([c.trigger.foreign, c.trigger.foreign_split])),
                "rl_train": (c.wrapper.kind == WrapperKind::RandomLabel).then_some(c.wrapper.random_label.train_dataset),
                "pool": (c.wrapper.kind == WrapperKind::Ood).then(|| json!({
                    "ids": pool_ids(c),
                    "balance": c.wrapper.ood.balance,
                })),
            }),
            Stage::Trigger => json!({
                "trigger": c.trigger,
                "seed_trigger": c.seeds.trigger,
                "seed_model": c.seeds.model,
            }),
            Stage::Mark => json!({ "mark": c.mark, "seed_model": c.seeds.model }),
            Stage::Defend => {
                let w = &c.wrapper;
                let sub = match w.kind {
                    WrapperKind::None => Value::Null,
                    WrapperKind::Adversarial => serde_json::to_value(&w.adversarial)?,
                    WrapperKind::Ood => json!({ "ood": w.ood, "seed_denial": c.seeds.denial }),
                    WrapperKind::RandomLabel => serde_json::to_value(&w.random_label)?,
                };
                json!({
                    "kind": w.kind,
                    "heldout_fraction": w.heldout_fraction,
                    "wrapper": sub,
                    "seed_model": c.seeds.model,
                    "seed_data": c.seeds.data,
                })
            }
            Stage::Eval => json!({ "name": c.name, "seed_denial": c.seeds.denial }),
        })
    }

    pub fn stage_key(&self, stage: Stage, upstream: &[StageRecord]) -> Result<String> {
        // Splits enter a key by content hash only, and only the ones the stage reads,
        // so wrapper variants share the marked model.
        let reads: &[&str] = match stage {
            Stage::Data => &[],
            Stage::Trigger => &["split.train", "split.test", "split.foreign"],
            Stage::Mark => &["split.train", "split.mark", "split.test"],
            Stage::Defend => &["split.adversary", "split.rl_train", "split.pool."],
            Stage::Eval => &["split.test"],
        };
        let ups: Vec<Value> = upstream
            .iter()
            .map(|r| {
                if r.stage == Stage::Data {
                    let used: BTreeMap<&String, &String> = r
                        .outputs
                        .iter()
                        .filter(|(k, _)| {
                            reads
                                .iter()
                                .any(|p| k.as_str() == *p || (p.ends_with('.') && k.starts_with(p)))
                        })
                        .collect();
                    json!({ "stage": r.stage, "outputs": used })
                } else {
                    json!({ "stage": r.stage, "key": r.key, "outputs": r.outputs })
                }
            })
            .collect();
        util::canonical_hash(&json!({
            "stage": stage,
            "config": self.subtree(stage)?,
            "upstream": ups,
        }))
    }

    fn read_record(&self, stage: Stage, key: &str) -> Option<StageRecord> {
        let path = self.stage_dir(stage, key).join("stage.json");
        util::read_json::<StageRecord>(&path)
            .ok()
            .filter(|r| r.key == key)
    }

    /// Record of an upstream stage for `for_stage`, running it when `auto_upstream`.
    fn upstream_record(&self, u: Stage, for_stage: Stage) -> Result<StageRecord> {
        if let Some(r) = self.records.borrow().get(&u) {
            return Ok(r.clone());
        }
        if self.auto_upstream {
            return self.run_stage(u, false);
        }
        let ups = u
            .upstream()
            .iter()
            .map(|&uu| self.upstream_record(uu, for_stage))
            .collect::<Result<Vec<_>>>()?;
        let key = self.stage_key(u, &ups)?;
        let rec = self
            .read_record(u, &key)
            .ok_or_else(|| Error::MissingArtifact {
                stage: for_stage.to_string(),
                requires: u.to_string(),
            })?;
        self.records.borrow_mut().insert(u, rec.clone());
        Ok(rec)
    }

    fn upstream_records(&self, stage: Stage) -> Result<Vec<StageRecord>> {
        stage
            .upstream()
            .iter()
            .map(|&u| self.upstream_record(u, stage))
            .collect()
    }

    /// Directory of an already-resolved upstream stage.
    fn dir_of(&self, rec: &StageRecord) -> PathBuf {
        self.stage_dir(rec.stage, &rec.key)
    }

    /// Runs `stage` (reusing its cache entry unless `force`), resolving upstream first.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageRecord> {
        if !force {
            if let Some(r) = self.records.borrow().get(&stage) {
                return Ok(r.clone());
            }
        }
        let ups = self.upstream_records(stage)?;
        let key = self.stage_key(stage, &ups)?;
        if !force {
            if let Some(rec) = self.read_record(stage, &key) {
                log::info!("stage {stage}: cached ({})", &key[..16]);
                self.records.borrow_mut().insert(stage, rec.clone());
                return Ok(rec);
            }
        }
        log::info!("stage {stage}: running ({})", &key[..16]);
        let start = Instant::now();
        let tmp = self.cache_dir().join(format!(
            ".tmp-{stage}-{}-{}-{}",
            &key[..16],
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        std::fs::create_dir_all(&tmp)?;
        let outputs = match self.execute(stage, &ups, &tmp) {
            Ok(o) => o,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&tmp);
                return Err(e.in_stage(stage.as_str()));
            }
        };
        let rec = StageRecord {
            stage,
            key: key.clone(),
            upstream: ups
                .iter()
                .map(|r| (r.stage.to_string(), r.key.clone()))
                .collect(),
            outputs,
            tool_version: TOOL_VERSION.to_string(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        util::write_json_atomic(&tmp.join("stage.json"), &rec)?;
        let dir = self.stage_dir(stage, &key);
        if dir.exists() {
            let trash = tmp.with_extension("old");
            std::fs::rename(&dir, &trash)?;
            std::fs::rename(&tmp, &dir)?;
            let _ = std::fs::remove_dir_all(&trash);
        } else {
            std::fs::rename(&tmp, &dir)?;
        }
        self.records.borrow_mut().insert(stage, rec.clone());
        Ok(rec)
    }

    fn execute(
        &self,
        stage: Stage,
        ups: &[StageRecord],
        dir: &Path,
    ) -> Result<BTreeMap<String, String>> {
        let up = |s: Stage| {
            ups.iter()
                .find(|r| r.stage == s)
                .ok_or_else(|| Error::Config(format!("stage {s} not resolved")))
        };
        match stage {
            Stage::Data => self.exec_data(dir),
            Stage::Trigger => self.exec_trigger(up(Stage::Data)?, dir),
            Stage::Mark => self.exec_mark(up(Stage::Data)?, up(Stage::Trigger)?, dir),
            Stage::Defend => self.exec_defend(up(Stage::Data)?, up(Stage::Mark)?, dir),
            Stage::Eval => {
                let report = self.compute_eval(ups)?;
                self.write_eval(&report, ups, dir)
            }
        }
    }

    fn exec_data(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        let d = self.datasets()?;
        let mut out = BTreeMap::new();
        for (name, split) in d.named() {
            let spec = match name.as_str() {
                "train" => Some(DatasetSpec::new(
                    self.cfg.data.task,
                    SplitKind::Train,
                    &self.data_root,
                )),
                "test" => Some(DatasetSpec::new(
                    self.cfg.data.task,
                    SplitKind::Test,
                    &self.data_root,
                )),
                _ => None,
            };
            let meta = write_sidecar(split, spec.as_ref(), &dir.join(format!("{name}.json")))?;
            out.insert(format!("split.{name}"), meta.content_sha256);
        }
        Ok(out)
    }

    fn exec_trigger(&self, data: &StageRecord, dir: &Path) -> Result<BTreeMap<String, String>> {
        let d = self.checked_datasets(data)?;
        let t = &self.cfg.trigger;
        let seed = self.cfg.seeds.trigger;
        let source = match t.source_split {
            SplitKind::Train => &d.train,
            SplitKind::Test => &d.test,
        };
        let mut out = BTreeMap::new();
        let (set, mut vkey) = match t.kind {
            TriggerType::Adversarial => {
                let gseed = derive_seed(self.cfg.seeds.model, "generator");
                let arch = t.generator.spec(d.train.num_classes);
                let generator = train(
                    build_model(&arch, gseed)?,
                    &d.train,
                    &d.test,
                    &t.generator.train.to_config(LossKind::CrossEntropy, gseed),
                )?;
                out.insert(
                    "generator".into(),
                    save_checkpoint(
                        &generator,
                        &dir.join("generator.safetensors"),
                        &BTreeMap::new(),
                    )?,
                );
                key_generation(
                    t.kind,
                    t.n,
                    seed,
                    TriggerSources::Adversarial {
                        clean: source,
                        surrogate: &generator,
                        epsilon: t.epsilon,
                    },
                )?
            }
            TriggerType::Ood => {
                let foreign = d
                    .foreign
                    .as_ref()
                    .ok_or_else(|| Error::Config("OOD triggers need a foreign split".into()))?;
                key_generation(
                    t.kind,
                    t.n,
                    seed,
                    TriggerSources::Ood {
                        foreign,
                        task: &d.train,
                    },
                )?
            }
            TriggerType::RandomLabel => key_generation(
                t.kind,
                t.n,
                seed,
                TriggerSources::RandomLabel { split: source },
            )?,
        };
        vkey = VerificationKey::new(&set, t.threshold).unwrap_or(vkey);
        save_trigger_set(&set, &dir.join("triggers"))?;
        util::write_json_atomic(&dir.join("vkey.json"), &vkey)?;
        out.insert("triggers".into(), set.content_hash());
        out.insert("vkey".into(), util::canonical_hash(&vkey)?);
        Ok(out)
    }

    fn load_triggers(&self, trigger: &StageRecord) -> Result<(TriggerSet, VerificationKey)> {
        let dir = self.dir_of(trigger);
        let set = load_trigger_set(&dir.join("triggers"))?;
        let vkey: VerificationKey = util::read_json(&dir.join("vkey.json"))?;
        Ok((set, vkey))
    }

    fn exec_mark(
        &self,
        data: &StageRecord,
        trigger: &StageRecord,
        dir: &Path,
    ) -> Result<BTreeMap<String, String>> {
        let d = self.checked_datasets(data)?;
        let (set, _) = self.load_triggers(trigger)?;
        let base = d.mark_split();
        // Random-label sources keep only their wrong label in the marking set.
        let filtered;
        let marking = if set.trigger_type == TriggerType::RandomLabel {
            let taken: std::collections::HashSet<_> = set.source_origins().into_iter().collect();
            let keep: Vec<usize> = (0..base.len())
                .filter(|&i| !base.examples[i].origin.is_some_and(|o| taken.contains(&o)))
                .collect();
            filtered = base.subset(format!("{}-minus-triggers", base.name), &keep);
            &filtered
        } else {
            base
        };
        let m = &self.cfg.mark;
        let seed = derive_seed(self.cfg.seeds.model, "mark");
        let opts = MarkingOptions {
            trigger_repeat: m.trigger_repeat,
            model_seed: derive_seed(self.cfg.seeds.model, "mark.init"),
        };
        let wm = watermark_marking(
            &m.model.spec(base.num_classes),
            marking,
            Some(&d.test),
            &set,
            &m.model.train.to_config(LossKind::CrossEntropy, seed),
            &opts,
        )?;
        let extra: BTreeMap<String, String> = [
            ("trigger_type".to_string(), set.trigger_type.to_string()),
            (
                "marking_meta".to_string(),
                serde_json::to_string(&wm.marking_meta)?,
            ),
        ]
        .into_iter()
        .collect();
        let hash = save_checkpoint(&wm.model, &dir.join("marked.safetensors"), &extra)?;
        Ok([("marked".to_string(), hash)].into_iter().collect())
    }

    fn load_marked(&self, mark: &StageRecord) -> Result<(WatermarkedModel, String)> {
        let (model, extra) = load_checkpoint(&self.dir_of(mark).join("marked.safetensors"))?;
        let hash = model.content_hash()?;
        if Some(&hash) != mark.outputs.get("marked") {
            return Err(Error::Validation(
                "marked checkpoint does not match its stage record".into(),
            ));
        }
        let trigger_type: TriggerType = extra
            .get("trigger_type")
            .ok_or_else(|| Error::Validation("marked checkpoint lacks its trigger type".into()))?
            .parse()?;
        let marking_meta: MarkingMeta =
            serde_json::from_str(extra.get("marking_meta").ok_or_else(|| {
                Error::Validation("marked checkpoint lacks marking metadata".into())
            })?)?;
        Ok((
            WatermarkedModel {
                model,
                trigger_type,
                marking_meta,
            },
            hash,
        ))
    }

    fn exec_defend(
        &self,
        data: &StageRecord,
        mark: &StageRecord,
        dir: &Path,
    ) -> Result<BTreeMap<String, String>> {
        let w = &self.cfg.wrapper;
        let mut out = BTreeMap::new();
        if w.kind == WrapperKind::None {
            return Ok(out);
        }
        let d = self.checked_datasets(data)?;
        let (_, marked_hash) = self.load_marked(mark)?;
        let k = d.train.num_classes;
        let mseed = self.cfg.seeds.model;
        let config = self.subtree(Stage::Defend)?;
        let bundle = dir.join("bundle");
        std::fs::create_dir_all(&bundle)?;
        match w.kind {
            WrapperKind::None => {}
            WrapperKind::Adversarial => {
                let a = &w.adversarial;
                let (tr, ho) = holdout_indices(
                    d.adversary.len(),
                    w.heldout_fraction,
                    derive_seed(self.cfg.seeds.data, "heldout"),
                )?;
                let adv_tr = d.adversary.subset(format!("{}-fit", d.adversary.name), &tr);
                let adv_ho = d
                    .adversary
                    .subset(format!("{}-heldout", d.adversary.name), &ho);
                let sseed = derive_seed(mseed, "surrogate");
                let surrogate = train(
                    build_model(&a.surrogate.spec(k), sseed)?,
                    &adv_tr,
                    &adv_ho,
                    &a.surrogate.train.to_config(LossKind::CrossEntropy, sseed),
                )?;
                out.insert(
                    "surrogate".into(),
                    save_checkpoint(
                        &surrogate,
                        &dir.join("surrogate.safetensors"),
                        &BTreeMap::new(),
                    )?,
                );
                let (pairs_tr, bin_tr) = build_adv_pairs(&adv_tr, &surrogate, a.epsilon)?;
                let (pairs_ho, bin_ho) = build_adv_pairs(&adv_ho, &surrogate, a.epsilon)?;
                let dseed = derive_seed(mseed, "detector");
                let detector = train_adv_detector(
                    &a.detector.spec(2),
                    &bin_tr,
                    &bin_ho,
                    a.epsilon,
                    &a.detector.train.to_config(LossKind::CrossEntropy, dseed),
                    dseed,
                )?;
                let pseed = derive_seed(mseed, "purifier");
                let purifier = train_purifier(
                    &ArchSpec::autoencoder().with_width_divisor(a.purifier.width_divisor),
                    &pairs_tr,
                    &pairs_ho,
                    &a.purifier.train.to_config(LossKind::Mse, pseed),
                    pseed,
                )?;
                save_adv_bundle(&bundle, &detector, &purifier, &marked_hash, config)?;
                out.insert("detector".into(), detector.detector.model.content_hash()?);
                out.insert("purifier".into(), purifier.autoencoder.content_hash()?);
            }
            WrapperKind::Ood => {
                let o = &w.ood;
                let pool = NegativePool::new(
                    d.pool.clone(),
                    o.mode,
                    o.excluded_ids.clone(),
                    derive_seed(self.cfg.seeds.data, "pool"),
                )?;
                let (binary, counts) = build_ood_training_set(&d.adversary, &pool, o.balance)?;
                let (tr, ho) = holdout_indices(
                    binary.len(),
                    w.heldout_fraction,
                    derive_seed(self.cfg.seeds.data, "heldout"),
                )?;
                let bin_tr = binary.subset(format!("{}-fit", binary.name), &tr);
                let bin_ho = binary.subset(format!("{}-heldout", binary.name), &ho);
                let dseed = derive_seed(mseed, "ood-detector");
                let detector = train_ood_detector(
                    &o.detector.spec(2),
                    &bin_tr,
                    &bin_ho,
                    pool.manifest(),
                    &o.detector.train.to_config(LossKind::CrossEntropy, dseed),
                    dseed,
                )?;
                util::write_json_atomic(
                    &dir.join("pool.json"),
                    &json!({ "manifest": pool.manifest(), "negatives_by_source": counts }),
                )?;
                save_ood_bundle(
                    &bundle,
                    &detector,
                    self.cfg.seeds.denial,
                    &marked_hash,
                    config,
                )?;
                out.insert("detector".into(), detector.detector.model.content_hash()?);
            }
            WrapperKind::RandomLabel => {
                let r = &w.random_label;
                let split = d.rl_train.as_ref().unwrap_or(&d.adversary);
                if split.num_classes != k {
                    return Err(Error::Config(format!(
                        "random-label training set has {} classes, task has {k}",
                        split.num_classes
                    )));
                }
                let eseed = derive_seed(mseed, "extractor");
                let extractor = train_partial_extractor(
                    &r.extractor.spec(k),
                    split,
                    &r.extractor.train.to_config(LossKind::CrossEntropy, eseed),
                    r.partial_epochs,
                    r.hook_layer.as_deref(),
                    eseed,
                )?;
                let features = extractor.extract(&split.images())?;
                let projection = r.pca_fraction.map(|f| fit_pca(&features, f)).transpose()?;
                let classifier = train_feature_classifier(
                    &features,
                    &split.labels(),
                    k,
                    projection.as_ref(),
                    &FeatureClassifierConfig {
                        kind: r.classifier,
                        c_grid: r.c_grid.clone(),
                        fold_seed: derive_seed(self.cfg.seeds.data, "folds"),
                    },
                )?;
                save_rl_bundle(
                    &bundle,
                    &extractor,
                    projection.as_ref(),
                    &classifier,
                    r.policy,
                    &marked_hash,
                    config,
                )?;
                out.insert("extractor".into(), extractor.model.content_hash()?);
                out.insert("classifier".into(), util::canonical_hash(&classifier)?);
            }
        }
        Ok(out)
    }

    /// Evaluates the marked and wrapped models from cached upstream artifacts.
    pub fn compute_eval(&self, ups: &[StageRecord]) -> Result<EvalReport> {
        let find = |s: Stage| {
            ups.iter()
                .find(|r| r.stage == s)
                .ok_or_else(|| Error::Config(format!("stage {s} not resolved")))
        };
        let (data, trigger, mark, defend) = (
            find(Stage::Data)?,
            find(Stage::Trigger)?,
            find(Stage::Mark)?,
            find(Stage::Defend)?,
        );
        let d = self.checked_datasets(data)?;
        let (set, vkey) = self.load_triggers(trigger)?;
        let (wm, marked_hash) = self.load_marked(mark)?;
        let base_ver = watermark_verification(&wm, &set, &vkey)?;
        let baseline = ModelEval {
            test_accuracy: eval_accuracy(&wm, &d.test)?,
            watermark_accuracy: base_ver.trigger_accuracy,
            verification_bit: base_ver.bit,
        };
        let mut histories = BTreeMap::new();
        histories.insert("mark".to_string(), wm.model.history.clone());
        let mut checkpoint_hashes: BTreeMap<String, String> = BTreeMap::new();
        for r in [trigger, mark, defend] {
            for (k, v) in &r.outputs {
                checkpoint_hashes.insert(format!("{}.{k}", r.stage), v.clone());
            }
        }
        let mut report = EvalReport {
            name: self.cfg.name.clone(),
            task: self.cfg.data.task,
            trigger_type: set.trigger_type,
            wrapper: self.cfg.wrapper.kind,
            wrapper_arch: None,
            threshold: vkey.threshold,
            test_accuracy: baseline.test_accuracy,
            watermark_accuracy: baseline.watermark_accuracy,
            verification_bit: baseline.verification_bit,
            baseline,
            detector: None,
            purifier_mse: None,
            raw_perturbation_mse: None,
            cv_accuracy: None,
            cv_std: None,
            pca_components: None,
            config_hash: self.cfg.config_hash()?,
            stage_hashes: ups
                .iter()
                .map(|r| (r.stage.to_string(), r.key.clone()))
                .collect(),
            checkpoint_hashes,
            histories,
        };
        let bundle = self.dir_of(defend).join("bundle");
        let mut wrapped_eval = |wrapped: &dyn Classifier, reset: &dyn Fn()| -> Result<()> {
            reset();
            report.test_accuracy = eval_accuracy(wrapped, &d.test)?;
            reset();
            let v = watermark_verification(wrapped, &set, &vkey)?;
            report.watermark_accuracy = v.trigger_accuracy;
            report.verification_bit = v.bit;
            Ok(())
        };
        match self.cfg.wrapper.kind {
            WrapperKind::None => {}
            WrapperKind::Adversarial => {
                let (det, pur) = load_adv_bundle(&bundle, &marked_hash)?;
                let w = AdvWrappedModel {
                    detector: &det,
                    purifier: &pur,
                    inner: &wm,
                };
                wrapped_eval(&w, &|| {})?;
                report.wrapper_arch = Some(det.train_meta.arch.arch_id);
                report.detector = Some(det.detector.heldout);
                report.purifier_mse = Some(pur.train_meta.heldout_mse);
                report.raw_perturbation_mse = Some(pur.train_meta.heldout_raw_mse);
                report
                    .histories
                    .insert("detector".into(), det.detector.model.history.clone());
                report
                    .histories
                    .insert("purifier".into(), pur.autoencoder.history.clone());
            }
            WrapperKind::Ood => {
                let (det, denial_seed) = load_ood_bundle(&bundle, &marked_hash)?;
                let w = OODWrappedModel::new(&det, &wm, denial_seed);
                wrapped_eval(&w, &|| w.reset_denial_stream())?;
                report.wrapper_arch = Some(det.detector.model.arch.arch_id);
                report.detector = Some(det.detector.heldout);
                report
                    .histories
                    .insert("detector".into(), det.detector.model.history.clone());
            }
            WrapperKind::RandomLabel => {
                let b = load_rl_bundle(&bundle, &marked_hash)?;
                let w = RLWrappedModel {
                    extractor: &b.extractor,
                    projection: b.projection.as_ref(),
                    classifier: &b.classifier,
                    inner: &wm,
                    policy: b.policy,
                };
                wrapped_eval(&w, &|| {})?;
                report.wrapper_arch = Some(b.extractor.model.arch.arch_id);
                report.cv_accuracy = Some(b.classifier.cv_accuracy);
                report.cv_std = Some(b.classifier.cv_std);
                report.pca_components = b.projection.as_ref().map(|p| p.n_components_kept);
                report
                    .histories
                    .insert("extractor".into(), b.extractor.model.history.clone());
            }
        }
        report.validate()?;
        Ok(report)
    }

    fn write_eval(
        &self,
        report: &EvalReport,
        ups: &[StageRecord],
        dir: &Path,
    ) -> Result<BTreeMap<String, String>> {
        util::write_json_atomic(&dir.join("report.json"), report)?;
        util::write_json_atomic(&dir.join("config.json"), &self.cfg)?;
        let timings: BTreeMap<String, f64> = ups
            .iter()
            .map(|r| (r.stage.to_string(), r.wall_clock_seconds))
            .collect();
        util::write_json_atomic(&dir.join("timings.json"), &timings)?;
        Ok([("report".to_string(), util::canonical_hash(report)?)]
            .into_iter()
            .collect())
    }

    pub fn eval_dir(&self) -> Result<PathBuf> {
        let rec = self.run_stage(Stage::Eval, false)?;
        Ok(self.dir_of(&rec))
    }
}

/// Failure summary written when a run stops early.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartialReport {
    pub config_hash: String,
    pub completed: BTreeMap<String, String>,
    pub failed_stage: Option<String>,
    pub error: String,
}

/// Runs every stage (reusing cached ones unless `force`) and returns the report.
/// On failure writes `partial-report.json` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<EvalReport> {
    let p = Pipeline::new(cfg.clone(), true);
    let result = (|| {
        for stage in Stage::ALL {
            p.run_stage(stage, force)?;
        }
        let eval = p.run_stage(Stage::Eval, false)?;
        util::read_json::<EvalReport>(&p.dir_of(&eval).join("report.json"))
    })();
    match result {
        Ok(r) => Ok(r),
        Err(e) => {
            let failed_stage = match &e {
                Error::Stage { stage, .. } => Some(stage.clone()),
                Error::MissingArtifact { requires, .. } => Some(requires.clone()),
                _ => None,
            };
            let partial = PartialReport {
                config_hash: cfg.config_hash().unwrap_or_default(),
                completed: p
                    .records
                    .borrow()
                    .iter()
                    .map(|(s, r)| (s.to_string(), r.key.clone()))
                    .collect(),
                failed_stage,
                error: e.to_string(),
            };
            let _ = util::write_json_atomic(&cfg.out_dir.join("partial-report.json"), &partial);
            Err(e)
        }
    }
}

/// Recomputes a persisted report from its config and cached artifacts and
/// checks that every value matches exactly.
pub fn revalidate(eval_dir: &Path) -> Result<EvalReport> {
    let stored: EvalReport = util::read_json(&eval_dir.join("report.json"))?;
    let cfg: ExperimentConfig = util::read_json(&eval_dir.join("config.json"))?;
    let p = Pipeline::new(cfg, false);
    let ups = p.upstream_records(Stage::Eval)?;
    let fresh = p.compute_eval(&ups)?;
    if fresh != stored {
        let a = serde_json::to_value(&stored)?;
        let b = serde_json::to_value(&fresh)?;
        let diffs: Vec<String> = a
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        return Err(Error::Validation(format!(
            "report in {} does not reproduce; differing fields: {}",
            eval_dir.display(),
            diffs.join(", ")
        )));
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
        assert_eq!(derive_seed(7, "mark"), derive_seed(7, "mark"));
    }

    #[test]
    fn holdout_is_disjoint_and_sized() {
        let (a, b) = holdout_indices(100, 0.2, 3).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(a.len(), 80);
        assert!(a.iter().all(|i| !b.contains(i)));
    }

    #[test]
    fn seed_override_changes_only_its_stage_subtrees() {
        let cfg = ExperimentConfig::default();
        let c2 = cfg.with_overrides(&["seeds.denial=5".into()]).unwrap();
        let (p1, p2) = (
            Pipeline::new(cfg.clone(), false),
            Pipeline::new(c2.clone(), false),
        );
        for s in [Stage::Data, Stage::Trigger, Stage::Mark] {
            assert_eq!(p1.subtree(s).unwrap(), p2.subtree(s).unwrap());
        }
        assert_ne!(
            p1.subtree(Stage::Eval).unwrap(),
            p2.subtree(Stage::Eval).unwrap()
        );
        assert_ne!(cfg.config_hash().unwrap(), c2.config_hash().unwrap());
    }
}
