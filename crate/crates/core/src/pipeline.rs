//! Stage orchestration behind content-hashed caches.
//!
//! Each stage owns a directory under `out_dir/seed-{s}` and records a
//! `stamp.json` holding the key it was built from: a hash of the stage config
//! and the output hashes of its inputs. A matching stamp is a cache hit. A
//! stamp with a different key is stale and is rebuilt only when `force` is set.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datastore::{read_all, write_dataset, DatasetHandle, Trajectory};
use crate::error::{Error, Result};
use crate::flowfield::{flow_dir, flow_for_dataset, FlowConfig, FlowSet};
use crate::flowvae::{
    embed_dataset, embed_rows, encode_rows, flow_rows, prepare_flow, read_latents, train_vae_rows, write_latents,
    write_vae, LatentTable, Rows, VaeArch, VaeTrainConfig,
};
use crate::hashing::{combine, hash_json, sha256_hex};
use crate::policy::{read_policy, train, write_policy, FlowTargets, LearnedPolicy, PolicyConfig, TrainData, TrainMode};
use crate::retrieval::{
    analyze_retrieval, frame_refs, knn_coverage, label_distribution, proprio_features, retrieve, state_action_features,
    Baseline, RetrievalConfig, RetrievalResult, Strategy,
};
use crate::synthbench::{evaluate_policy, generate_datasets, BenchConfig, EvalReport};

const STAMP: &str = "stamp.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Rollout start states come from seed `seed_offset + run seed`, disjoint
    /// from the generator streams.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed_offset: 1000,
        }
    }
}

/// State-action VAE baseline: MLP over (pooled image, scaled action).
/// Training hyperparameters other than these come from the flow VAE section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SavaeConfig {
    pub pool: usize,
    pub hidden: usize,
}

impl Default for SavaeConfig {
    fn default() -> Self {
        Self { pool: 4, hidden: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    pub modes: Vec<TrainMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.35],
            modes: vec![TrainMode::Bc, TrainMode::BcCo, TrainMode::FlowRetrieval],
        }
    }
}

/// Everything a run depends on. Per-seed configs are derived by overriding
/// the `seed` fields of the sections with each entry of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub bench: BenchConfig,
    pub flow: FlowConfig,
    pub vae: VaeTrainConfig,
    pub savae: SavaeConfig,
    pub retrieval: RetrievalConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            bench: BenchConfig::default(),
            flow: FlowConfig::default(),
            vae: VaeTrainConfig::default(),
            savae: SavaeConfig::default(),
            retrieval: RetrievalConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("pipeline config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sweep.deltas.is_empty() || self.sweep.modes.is_empty() {
            return Err(Error::Config("sweep.deltas and sweep.modes must not be empty".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        if self.savae.pool == 0 || self.savae.hidden == 0 {
            return Err(Error::Config("savae pool and hidden must be positive".into()));
        }
        self.bench.validate()?;
        self.flow.validate()?;
        self.vae.validate()?;
        self.policy.validate()?;
        for &d in &self.sweep.deltas {
            RetrievalConfig {
                delta: d,
                ..self.retrieval.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn bench_for(&self, seed: u64) -> BenchConfig {
        BenchConfig {
            seed,
            ..self.bench.clone()
        }
    }

    pub fn vae_for(&self, seed: u64) -> VaeTrainConfig {
        VaeTrainConfig {
            seed,
            ..self.vae.clone()
        }
    }

    /// One retrieval config per sweep entry. KNN ignores δ, so it yields one.
    pub fn retrieval_sweep(&self, seed: u64) -> Vec<RetrievalConfig> {
        let base = RetrievalConfig {
            seed,
            ..self.retrieval.clone()
        };
        match base.strategy {
            Strategy::Knn => vec![base],
            Strategy::TopPercent => self
                .sweep
                .deltas
                .iter()
                .map(|&delta| RetrievalConfig { delta, ..base.clone() })
                .collect(),
        }
    }

    pub fn policy_for(&self, seed: u64, mode: TrainMode) -> PolicyConfig {
        PolicyConfig {
            seed,
            mode,
            ..self.policy.clone()
        }
    }

    /// Divisors that bring `(dx, dy, grip)` to unit range.
    pub fn action_scale(&self) -> Vec<f32> {
        vec![self.bench.max_step, self.bench.max_step, 1.0]
    }

    pub fn flow_norm(&self) -> f32 {
        self.vae.flow_norm(self.bench.image_size, self.bench.image_size)
    }
}

/// Short directory name for a retrieval config.
pub fn retrieval_tag(r: &RetrievalConfig) -> String {
    let mut s = match r.strategy {
        Strategy::TopPercent => format!("{}-top{}", r.baseline.name(), r.delta),
        Strategy::Knn => format!("{}-knn{}", r.baseline.name(), r.knn_k),
    };
    if let Some(cap) = r.candidate_cap {
        let _ = write!(s, "-cap{cap}");
    }
    s
}

/// What a stage was built from and what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub seed: u64,
    pub key: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the seed directory, to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl Stamp {
    pub fn output_hash(&self) -> String {
        hash_json(&self.outputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub cached: bool,
    pub seconds: f64,
    pub output_hash: String,
}

/// One line of the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: TrainMode,
    /// Retrieval tag for modes that use retrieval, `-` otherwise.
    pub retrieval: String,
    pub delta: Option<f64>,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: TrainMode,
    pub retrieval: String,
    pub seed: u64,
    pub eval_seed: u64,
    pub config_hash: String,
    pub policy_hash: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub retrieval: String,
    pub seed: u64,
    pub retrieved: usize,
    pub prior_frames: usize,
    /// usefulness name to share of retrieved frames
    pub retrieved_share: BTreeMap<String, f64>,
    pub prior_share: BTreeMap<String, f64>,
    pub coverage: crate::retrieval::CoverageReport,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn read_stamp(dir: &Path) -> Result<Option<Stamp>> {
    let path = dir.join(STAMP);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Runs stages for one config. With `cascade`, missing or outdated upstream
/// stages are built on demand; otherwise they must already be current.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub force: bool,
    pub cascade: bool,
    reports: RefCell<Vec<StageReport>>,
    // stamps already resolved by this instance, by stage directory
    resolved: RefCell<HashMap<PathBuf, Stamp>>,
}

struct Stage<'a> {
    name: &'a str,
    command: &'static str,
    seed: u64,
    dir: PathBuf,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            force: false,
            cascade: false,
            reports: Default::default(),
            resolved: Default::default(),
        })
    }

    /// Stage reports in execution order, drained.
    pub fn take_reports(&self) -> Vec<StageReport> {
        std::mem::take(&mut self.reports.borrow_mut())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.cfg.out_dir.join(format!("seed-{seed}"))
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    pub fn target_dir(&self, seed: u64) -> PathBuf {
        self.data_dir(seed).join("target")
    }

    pub fn prior_dir(&self, seed: u64) -> PathBuf {
        self.data_dir(seed).join("prior")
    }

    pub fn vae_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("vae")
    }

    pub fn retrieval_dir(&self, seed: u64, r: &RetrievalConfig) -> PathBuf {
        self.seed_dir(seed).join("retrieval").join(retrieval_tag(r))
    }

    pub fn analysis_dir(&self, seed: u64, r: &RetrievalConfig) -> PathBuf {
        self.seed_dir(seed).join("analysis").join(retrieval_tag(r))
    }

    fn policy_tag(mode: TrainMode, r: Option<&RetrievalConfig>) -> String {
        match (mode, r) {
            (TrainMode::FlowRetrieval, Some(r)) => format!("{}-{}", mode.name(), retrieval_tag(r)),
            _ => mode.name().to_string(),
        }
    }

    pub fn policy_dir(&self, seed: u64, mode: TrainMode, r: Option<&RetrievalConfig>) -> PathBuf {
        self.seed_dir(seed).join("policy").join(Self::policy_tag(mode, r))
    }

    pub fn eval_dir(&self, seed: u64, mode: TrainMode, r: Option<&RetrievalConfig>) -> PathBuf {
        self.seed_dir(seed).join("eval").join(Self::policy_tag(mode, r))
    }

    /// Returns the stage's stamp, building it when `build` is set and the
    /// stamp is absent, incomplete, or (with `force`) stale.
    fn run<F>(&self, st: Stage, build: bool, f: F) -> Result<Stamp>
    where
        F: FnOnce(&Path) -> Result<Vec<PathBuf>>,
    {
        let key = combine(&[st.name, &hash_json(&st.config), &hash_json(&st.inputs)]);
        if let Some(s) = self.resolved.borrow().get(&st.dir).filter(|s| s.key == key) {
            return Ok(s.clone());
        }
        let dir = st.dir.clone();
        let stamp = self.resolve(st, key, build, f)?;
        self.resolved.borrow_mut().insert(dir, stamp.clone());
        Ok(stamp)
    }

    fn resolve<F>(&self, st: Stage, key: String, build: bool, f: F) -> Result<Stamp>
    where
        F: FnOnce(&Path) -> Result<Vec<PathBuf>>,
    {
        let seed_dir = self.seed_dir(st.seed);
        let old = read_stamp(&st.dir)?;
        if let Some(old) = &old {
            let complete = old.outputs.keys().all(|p| seed_dir.join(p).exists());
            if old.key == key && complete {
                log::info!("seed {} {}: cache hit", st.seed, st.name);
                self.reports.borrow_mut().push(StageReport {
                    stage: st.name.to_string(),
                    seed: st.seed,
                    dir: st.dir.clone(),
                    cached: true,
                    seconds: 0.0,
                    output_hash: old.output_hash(),
                });
                return Ok(old.clone());
            }
            if old.key != key && !(build && self.force) {
                return Err(Error::Stale(format!(
                    "{} for seed {} in {} was built from a different config or different inputs",
                    st.name,
                    st.seed,
                    st.dir.display()
                )));
            }
        }
        if !build {
            return Err(Error::Missing {
                what: format!("{} output for seed {} in {}", st.name, st.seed, st.dir.display()),
                command: st.command,
            });
        }
        let t0 = Instant::now();
        std::fs::create_dir_all(&st.dir).map_err(|e| Error::io(&st.dir, e))?;
        let stamp_path = st.dir.join(STAMP);
        if stamp_path.exists() {
            std::fs::remove_file(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?;
        }
        log::info!("seed {} {}: building", st.seed, st.name);
        let files = f(&st.dir)?;
        let mut outputs = BTreeMap::new();
        for p in files {
            let rel = p
                .strip_prefix(&seed_dir)
                .map_err(|_| Error::Data(format!("stage output {} outside {}", p.display(), seed_dir.display())))?
                .to_string_lossy()
                .replace('\\', "/");
            outputs.insert(rel, file_hash(&p)?);
        }
        let stamp = Stamp {
            stage: st.name.to_string(),
            seed: st.seed,
            key,
            config: st.config,
            inputs: st.inputs,
            outputs,
        };
        write_json(&stamp_path, &stamp)?;
        self.reports.borrow_mut().push(StageReport {
            stage: st.name.to_string(),
            seed: st.seed,
            dir: st.dir,
            cached: false,
            seconds: t0.elapsed().as_secs_f64(),
            output_hash: stamp.output_hash(),
        });
        Ok(stamp)
    }

    fn upstream(&self) -> bool {
        self.cascade
    }

    // ---- gen-data

    pub fn gen_data(&self, seed: u64, build: bool) -> Result<Stamp> {
        let bench = self.cfg.bench_for(seed);
        let st = Stage {
            name: "gen-data",
            command: "gen-data",
            seed,
            dir: self.data_dir(seed),
            config: serde_json::to_value(&bench)?,
            inputs: BTreeMap::new(),
        };
        let (target_dir, prior_dir) = (self.target_dir(seed), self.prior_dir(seed));
        self.run(st, build, |_| {
            let d = generate_datasets(&bench)?;
            let mut files = Vec::new();
            for (trajs, dir) in [(&d.target, &target_dir), (&d.prior, &prior_dir)] {
                if dir.exists() {
                    std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let h = write_dataset(trajs, dir)?;
                files.push(h.manifest_path());
                files.extend(h.manifest().trajectories.iter().map(|e| dir.join(&e.file)));
            }
            Ok(files)
        })
    }

    /// Writes the first frame of the first few trajectories of each dataset as
    /// PPM images under `data/preview`.
    pub fn preview(&self, seed: u64, per_dataset: usize) -> Result<Vec<PathBuf>> {
        let dir = self.data_dir(seed).join("preview");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = Vec::new();
        for (name, ds) in [("target", self.target_dir(seed)), ("prior", self.prior_dir(seed))] {
            let h = DatasetHandle::open(&ds)?;
            let entries = &h.manifest().trajectories;
            // spread the picks so both prior sources show up
            let step = (entries.len() / per_dataset.max(1)).max(1);
            for e in entries.iter().step_by(step).take(per_dataset) {
                let t = crate::datastore::read_trajectory(&h, &e.id)?;
                for (i, f) in t.frames.iter().enumerate().step_by((t.len() / 3).max(1)).take(3) {
                    let p = dir.join(format!("{name}-{}-{i:03}.ppm", e.id));
                    f.image.write_pnm(&p)?;
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    fn datasets(&self, seed: u64) -> Result<(DatasetHandle, DatasetHandle)> {
        Ok((DatasetHandle::open(self.target_dir(seed))?, DatasetHandle::open(self.prior_dir(seed))?))
    }

    // ---- compute-flow

    fn flow_set(&self, h: &DatasetHandle) -> FlowSet {
        let (trajectories, skipped) = h.manifest().trajectories.iter().partition::<Vec<_>, _>(|e| e.frames >= 2);
        FlowSet {
            dir: flow_dir(h.dir(), &self.cfg.flow),
            config: self.cfg.flow,
            config_hash: self.cfg.flow.hash(),
            trajectories: trajectories.into_iter().map(|e| e.id.clone()).collect(),
            skipped: skipped.into_iter().map(|e| e.id.clone()).collect(),
        }
    }

    pub fn compute_flow(&self, seed: u64, build: bool) -> Result<Stamp> {
        let data = self.gen_data(seed, self.upstream())?;
        let st = Stage {
            name: "compute-flow",
            command: "compute-flow",
            seed,
            dir: self.seed_dir(seed).join("flow"),
            config: serde_json::to_value(self.cfg.flow)?,
            inputs: BTreeMap::from([("data".to_string(), data.output_hash())]),
        };
        self.run(st, build, |_| {
            let (target, prior) = self.datasets(seed)?;
            let mut files = Vec::new();
            for h in [&target, &prior] {
                let set = flow_for_dataset(h, &self.cfg.flow)?;
                files.extend(set.trajectories.iter().map(|id| set.path_for(id)));
            }
            Ok(files)
        })
    }

    // ---- train-vae (also embeds both datasets)

    pub fn train_vae(&self, seed: u64, build: bool) -> Result<Stamp> {
        let flow = self.compute_flow(seed, self.upstream())?;
        let vcfg = self.cfg.vae_for(seed);
        let st = Stage {
            name: "train-vae",
            command: "train-vae",
            seed,
            dir: self.vae_dir(seed),
            config: serde_json::to_value(&vcfg)?,
            inputs: BTreeMap::from([("flow".to_string(), flow.output_hash())]),
        };
        let config_hash = hash_json(&vcfg);
        self.run(st, build, |dir| {
            let (target, prior) = self.datasets(seed)?;
            let (h, w, _) = prior.image_dims();
            let norm = vcfg.flow_norm(h, w);
            let pset = self.flow_set(&prior);
            let mut rows = Rows::new(2 * vcfg.resolution * vcfg.resolution);
            for id in &pset.trajectories {
                let cache = pset.load(id)?;
                rows.data.extend(flow_rows(&cache.flows, vcfg.resolution, norm)?.data);
            }
            let (model, report) = train_vae_rows(
                &rows,
                VaeArch::Conv {
                    resolution: vcfg.resolution,
                },
                norm,
                &vcfg,
            )?;
            let prior_lat = embed_rows(&model, &rows)?;
            drop(rows);
            let target_lat = embed_dataset(&model, &target, &self.flow_set(&target))?;
            let files = [
                dir.join("model.fvae"),
                dir.join("prior.lat"),
                dir.join("target.lat"),
                dir.join("report.json"),
            ];
            write_vae(&files[0], &model)?;
            write_latents(&files[1], &prior_lat)?;
            write_latents(&files[2], &target_lat)?;
            write_json(
                &files[3],
                &serde_json::json!({ "seed": seed, "config_hash": config_hash, "report": report }),
            )?;
            Ok(files.to_vec())
        })
    }

    pub fn latents(&self, seed: u64) -> Result<(LatentTable, LatentTable)> {
        let dir = self.vae_dir(seed);
        let prior = read_latents(&dir.join("prior.lat"))?;
        let target = read_latents(&dir.join("target.lat"))?;
        if prior.model_hash != target.model_hash {
            return Err(Error::Stale("prior and target latents come from different VAE models".into()));
        }
        Ok((prior, target))
    }

    // ---- retrieve

    pub fn retrieve(&self, seed: u64, rcfg: &RetrievalConfig, build: bool) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        match rcfg.baseline {
            Baseline::FlowLatent => {
                inputs.insert("vae".to_string(), self.train_vae(seed, self.upstream())?.output_hash());
            }
            Baseline::Proprio | Baseline::StateActionVae => {
                inputs.insert("data".to_string(), self.gen_data(seed, self.upstream())?.output_hash());
            }
        }
        let k = self.cfg.policy.k;
        let mut config = serde_json::json!({ "retrieval": rcfg, "k": k, "flow_k": self.cfg.flow.k });
        if rcfg.baseline == Baseline::StateActionVae {
            config["savae"] = serde_json::to_value(&self.cfg.savae)?;
            config["vae"] = serde_json::to_value(self.cfg.vae_for(seed))?;
            config["action_scale"] = serde_json::to_value(self.cfg.action_scale())?;
        }
        let config_hash = hash_json(&config);
        let st = Stage {
            name: "retrieve",
            command: "retrieve",
            seed,
            dir: self.retrieval_dir(seed, rcfg),
            config,
            inputs: inputs.clone(),
        };
        self.run(st, build, |dir| {
            let (target_h, prior_h) = self.datasets(seed)?;
            let prior = read_all(&prior_h)?;
            let frames = frame_refs(&prior);
            let mut files = Vec::new();
            let (p, t) = match rcfg.baseline {
                Baseline::FlowLatent => {
                    let (p, t) = self.latents(seed)?;
                    (p.latents, t.latents)
                }
                Baseline::Proprio => {
                    let target = read_all(&target_h)?;
                    (proprio_features(&prior, self.cfg.flow.k)?, proprio_features(&target, self.cfg.flow.k)?)
                }
                Baseline::StateActionVae => {
                    let target = read_all(&target_h)?;
                    let scale = self.cfg.action_scale();
                    let prows = state_action_features(&prior, self.cfg.savae.pool, &scale)?;
                    let trows = state_action_features(&target, self.cfg.savae.pool, &scale)?;
                    let arch = VaeArch::Mlp {
                        input_dim: prows.dim,
                        hidden: self.cfg.savae.hidden,
                    };
                    let (m, _) = train_vae_rows(&prows, arch, 1.0, &self.cfg.vae_for(seed))?;
                    let path = dir.join("savae.fvae");
                    write_vae(&path, &m)?;
                    files.push(path);
                    (encode_rows(&m, &prows)?, encode_rows(&m, &trows)?)
                }
            };
            let mut r = retrieve(&p, &t, &frames, rcfg, k)?;
            for w in &r.warnings {
                log::warn!("seed {seed} {}: {w}", retrieval_tag(rcfg));
            }
            r.hashes.insert("config".into(), config_hash.clone());
            r.hashes.extend(inputs.clone());
            let path = dir.join("result.json");
            r.write(&path)?;
            files.push(path);
            Ok(files)
        })
    }

    pub fn retrieval_result(&self, seed: u64, rcfg: &RetrievalConfig) -> Result<RetrievalResult> {
        RetrievalResult::read(&self.retrieval_dir(seed, rcfg).join("result.json"))
    }

    // ---- analyze

    pub fn analyze(&self, seed: u64, rcfg: &RetrievalConfig, build: bool) -> Result<Stamp> {
        let retrieved = self.retrieve(seed, rcfg, self.upstream())?;
        let vae = self.train_vae(seed, self.upstream())?;
        let st = Stage {
            name: "analyze",
            command: "analyze",
            seed,
            dir: self.analysis_dir(seed, rcfg),
            config: serde_json::json!({ "knn_k": rcfg.knn_k, "k": self.cfg.policy.k }),
            inputs: BTreeMap::from([
                ("retrieval".to_string(), retrieved.output_hash()),
                ("vae".to_string(), vae.output_hash()),
            ]),
        };
        let tag = retrieval_tag(rcfg);
        self.run(st, build, |dir| {
            let r = self.retrieval_result(seed, rcfg)?;
            let hist = analyze_retrieval(&r)?;
            let prior = read_all(&DatasetHandle::open(self.prior_dir(seed))?)?;
            let frames = frame_refs(&prior);
            drop(prior);
            let prior_hist = label_distribution(&frames)?;
            let (p, t) = self.latents(seed)?;
            let coverage = knn_coverage(&p.latents, &t.latents, &frames, rcfg.knn_k, self.cfg.policy.k)?;
            let shares = |h: &crate::retrieval::StageHistogram| {
                crate::datastore::Usefulness::ALL
                    .iter()
                    .map(|u| (u.name().to_string(), h.share(*u)))
                    .collect::<BTreeMap<_, _>>()
            };
            let a = Analysis {
                retrieval: tag.clone(),
                seed,
                retrieved: r.len(),
                prior_frames: frames.len(),
                retrieved_share: shares(&hist),
                prior_share: shares(&prior_hist),
                coverage,
            };
            let files = vec![
                dir.join("hist.csv"),
                dir.join("hist.svg"),
                dir.join("prior_hist.csv"),
                dir.join("prior_hist.svg"),
                dir.join("coverage_knn.csv"),
                dir.join("coverage_top.csv"),
                dir.join("analysis.json"),
            ];
            write_text(&files[0], &hist.to_csv())?;
            write_text(&files[1], &hist.to_svg(&format!("retrieved frames by stage progress ({tag}, seed {seed})")))?;
            write_text(&files[2], &prior_hist.to_csv())?;
            write_text(&files[3], &prior_hist.to_svg(&format!("prior frames by stage progress (seed {seed})")))?;
            write_text(&files[4], &a.coverage.knn_hist.to_csv())?;
            write_text(&files[5], &a.coverage.top_hist.to_csv())?;
            write_json(&files[6], &a)?;
            Ok(files)
        })
    }

    pub fn analysis(&self, seed: u64, rcfg: &RetrievalConfig) -> Result<Analysis> {
        read_json(&self.analysis_dir(seed, rcfg).join("analysis.json"))
    }

    // ---- train-policy

    /// `rcfg` is used only by FLOW_RETRIEVAL.
    pub fn train_policy(&self, seed: u64, mode: TrainMode, rcfg: &RetrievalConfig, build: bool) -> Result<Stamp> {
        let pcfg = self.cfg.policy_for(seed, mode);
        let r = (mode == TrainMode::FlowRetrieval).then_some(rcfg);
        let mut inputs = BTreeMap::from([("data".to_string(), self.gen_data(seed, self.upstream())?.output_hash())]);
        if mode.uses_flow() {
            inputs.insert("flow".into(), self.compute_flow(seed, self.upstream())?.output_hash());
        }
        if let Some(r) = r {
            inputs.insert("retrieval".into(), self.retrieve(seed, r, self.upstream())?.output_hash());
        }
        let config = serde_json::json!({
            "policy": pcfg,
            "action_scale": self.cfg.action_scale(),
            "flow_norm": self.cfg.flow_norm(),
        });
        let config_hash = hash_json(&config);
        let st = Stage {
            name: "train-policy",
            command: "train-policy",
            seed,
            dir: self.policy_dir(seed, mode, r),
            config,
            inputs: inputs.clone(),
        };
        self.run(st, build, |dir| {
            let (target_h, prior_h) = self.datasets(seed)?;
            let target = read_all(&target_h)?;
            let prior = read_all(&prior_h)?;
            let retrieved = r.map(|r| self.retrieval_result(seed, r)).transpose()?;
            let flows = if mode.uses_flow() {
                self.flow_targets(&target_h, &prior_h, &target, retrieved.as_ref(), &pcfg)?
            } else {
                FlowTargets::new()
            };
            let mut hashes = inputs.clone();
            hashes.insert("config".into(), config_hash.clone());
            let data = TrainData {
                target: &target,
                prior: &prior,
                retrieved: retrieved.as_ref(),
                flows: &flows,
                action_scale: self.cfg.action_scale(),
                flow_norm: self.cfg.flow_norm(),
                hashes,
            };
            let (model, report) = train(&data, &pcfg)?;
            let files = vec![dir.join("policy.pol"), dir.join("report.json"), dir.join("loss.csv")];
            write_policy(&files[0], &model)?;
            write_json(&files[1], &report)?;
            write_text(&files[2], &report.to_csv())?;
            Ok(files)
        })
    }

    fn flow_targets(
        &self,
        target_h: &DatasetHandle,
        prior_h: &DatasetHandle,
        target: &[Trajectory],
        retrieved: Option<&RetrievalResult>,
        pcfg: &PolicyConfig,
    ) -> Result<FlowTargets> {
        let norm = self.cfg.flow_norm();
        let res = pcfg.flow_resolution;
        let mut out = FlowTargets::new();
        if !pcfg.flow_on_retrieved_only {
            let set = self.flow_set(target_h);
            for t in target {
                let cache = set.load(&t.id)?;
                for (i, f) in cache.flows.iter().enumerate() {
                    out.insert((t.id.clone(), i), prepare_flow(f, res, norm));
                }
            }
        }
        if let Some(r) = retrieved {
            let mut by_traj: HashMap<&str, Vec<usize>> = HashMap::new();
            for s in &r.segments {
                by_traj.entry(&s.segment.trajectory).or_default().push(s.segment.start);
            }
            let set = self.flow_set(prior_h);
            let mut ids: Vec<&str> = by_traj.keys().copied().collect();
            ids.sort_unstable();
            for id in ids {
                let cache = set.load(id)?;
                for &i in &by_traj[id] {
                    let f = cache
                        .flows
                        .get(i)
                        .ok_or_else(|| Error::Data(format!("flow cache for {id} has no frame {i}")))?;
                    out.insert((id.to_string(), i), prepare_flow(f, res, norm));
                }
            }
        }
        Ok(out)
    }

    // ---- eval

    pub fn eval(&self, seed: u64, mode: TrainMode, rcfg: &RetrievalConfig, build: bool) -> Result<Stamp> {
        let r = (mode == TrainMode::FlowRetrieval).then_some(rcfg);
        let policy = self.train_policy(seed, mode, rcfg, self.upstream())?;
        let bench = self.cfg.bench_for(seed);
        let eval_seed = self.cfg.eval.seed_offset + seed;
        let config = serde_json::json!({ "bench": bench, "episodes": self.cfg.eval.episodes, "eval_seed": eval_seed });
        let config_hash = hash_json(&config);
        let st = Stage {
            name: "eval",
            command: "eval",
            seed,
            dir: self.eval_dir(seed, mode, r),
            config,
            inputs: BTreeMap::from([("policy".to_string(), policy.output_hash())]),
        };
        let pdir = self.policy_dir(seed, mode, r);
        self.run(st, build, |dir| {
            let model = read_policy(&pdir.join("policy.pol"))?;
            let policy_hash = crate::policy::policy_hash(&model);
            let mut p = LearnedPolicy { model };
            let report = evaluate_policy(&mut p, &bench, self.cfg.eval.episodes, eval_seed);
            if !report.non_finite.is_empty() {
                log::warn!(
                    "seed {seed} {}: {} rollouts aborted on non-finite actions",
                    mode.name(),
                    report.non_finite.len()
                );
            }
            let rec = EvalRecord {
                mode,
                retrieval: r.map(retrieval_tag).unwrap_or_else(|| "-".into()),
                seed,
                eval_seed,
                config_hash: config_hash.clone(),
                policy_hash,
                report,
            };
            let path = dir.join("eval.json");
            write_json(&path, &rec)?;
            Ok(vec![path])
        })
    }

    pub fn eval_record(&self, seed: u64, mode: TrainMode, rcfg: &RetrievalConfig) -> Result<EvalRecord> {
        let r = (mode == TrainMode::FlowRetrieval).then_some(rcfg);
        read_json(&self.eval_dir(seed, mode, r).join("eval.json"))
    }

    // ---- run-all

    /// Every stage for every seed, δ and mode; writes `summary.csv` and the
    /// effective config to `out_dir`.
    pub fn run_all(&mut self) -> Result<Vec<SummaryRow>> {
        self.cascade = true;
        std::fs::create_dir_all(&self.cfg.out_dir).map_err(|e| Error::io(&self.cfg.out_dir, e))?;
        write_text(&self.cfg.out_dir.join("config.toml"), &self.cfg.to_toml_string())?;
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            let sweep = self.cfg.retrieval_sweep(seed);
            for r in &sweep {
                self.analyze(seed, r, true)?;
            }
            for &mode in &self.cfg.sweep.modes {
                let rs: Vec<&RetrievalConfig> = if mode == TrainMode::FlowRetrieval {
                    sweep.iter().collect()
                } else {
                    vec![&sweep[0]]
                };
                for r in rs {
                    self.eval(seed, mode, r, true)?;
                    let rec = self.eval_record(seed, mode, r)?;
                    rows.push(SummaryRow {
                        mode,
                        retrieval: rec.retrieval,
                        delta: (mode == TrainMode::FlowRetrieval && r.strategy == Strategy::TopPercent).then_some(r.delta),
                        seed,
                        episodes: rec.report.episodes,
                        successes: rec.report.successes,
                        success_rate: rec.report.success_rate,
                    });
                }
            }
        }
        write_text(&self.cfg.out_dir.join("summary.csv"), &summary_csv(&rows, &self.cfg.hash()))?;
        Ok(rows)
    }
}

/// `mode,retrieval,delta,seed,episodes,successes,success_rate,config_hash`.
pub fn summary_csv(rows: &[SummaryRow], config_hash: &str) -> String {
    let mut s = String::from("mode,retrieval,delta,seed,episodes,successes,success_rate,config_hash\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{}",
            r.mode.name(),
            r.retrieval,
            r.delta.map(|d| d.to_string()).unwrap_or_default(),
            r.seed,
            r.episodes,
            r.successes,
            r.success_rate,
            &config_hash[..16]
        );
    }
    s
}

/// Mean success rate per `(mode, retrieval)` across seeds, in first-seen order.
pub fn mean_success(rows: &[SummaryRow]) -> Vec<(TrainMode, String, f64, usize)> {
    let mut out: Vec<(TrainMode, String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.0 == r.mode && o.1 == r.retrieval) {
            Some(o) => {
                o.2 += r.success_rate;
                o.3 += 1;
            }
            None => out.push((r.mode, r.retrieval.clone(), r.success_rate, 1)),
        }
    }
    for o in &mut out {
        o.2 /= o.3 as f64;
    }
    out
}
