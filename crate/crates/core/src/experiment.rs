//! Experiment orchestration behind the CLI: config loading and validation,
//! dataset generation, donor mapping, transforms and report emission.
//!
//! Every (fusor, seed) cell trains one single-modality donor twin per source
//! modality in use, then one transformed twin per op. Cells are independent
//! and run through [`Execution::map`], so outputs do not depend on the
//! thread count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{cost_compare, Aggregation, CostLedger, EstimateConfig, FedConfig};
use crate::fusion::FusorKind;
use crate::metrics::{emit_report, HistoryRun, Report, ResultRow};
use crate::scenario::{generate_world, load_csv_areas, prepare, write_area_csv, Modality, MultiModalDataset, PreparedData, WorldConfig};
use crate::twin::{
    evaluate, map_modalities, transform, CoderConfig, ReconTarget, TrainConfig, TrainMode, Trained, TransformConfig,
    TwinCheckpoint, TwinConfig, TwinModel, TwinOp,
};

pub const EXPERIMENT_FORMAT: &str = "twin-experiment-v1";

/// Twin build parameters; the window length comes from `world.window`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinSection {
    pub latent_dim: usize,
    pub fusor: FusorKind,
    /// Overrides `fusor` with a sweep.
    pub fusors: Option<Vec<FusorKind>>,
    pub layers: CoderConfig,
    pub recon: ReconTarget,
}

impl Default for TwinSection {
    fn default() -> Self {
        let t = TwinConfig::default();
        Self {
            latent_dim: t.latent_dim,
            fusor: t.fusor,
            fusors: None,
            layers: t.layers,
            recon: t.recon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Per-area CSV files used instead of the synthetic world.
    pub data: Option<Vec<PathBuf>>,
    pub fed: FedConfig,
    pub batch_size: usize,
    pub local_lr_bound_fraction: Option<f64>,
    pub estimate: EstimateConfig,
    pub twin: TwinSection,
    pub ops: Vec<TwinOp>,
    pub seeds: Vec<u64>,
    pub mode: TrainMode,
    pub fine_tune: f64,
    pub output: PathBuf,
    pub checkpoints: bool,
    pub charts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            data: None,
            fed: FedConfig {
                rounds: 300,
                local_lr: 0.1,
                ..FedConfig::default()
            },
            batch_size: 16,
            local_lr_bound_fraction: None,
            estimate: EstimateConfig::default(),
            twin: TwinSection::default(),
            ops: ["V->W", "V+W->S", "S->V,W,S"]
                .iter()
                .map(|s| s.parse().expect("default op"))
                .collect(),
            seeds: vec![1, 2, 3],
            mode: TrainMode::Specific,
            fine_tune: 0.1,
            output: PathBuf::from("out"),
            checkpoints: true,
            charts: true,
        }
    }
}

impl ExperimentConfig {
    pub fn fusors(&self) -> Vec<FusorKind> {
        self.twin.fusors.clone().unwrap_or_else(|| vec![self.twin.fusor])
    }

    pub fn twin_config(&self, fusor: FusorKind) -> TwinConfig {
        TwinConfig {
            latent_dim: self.twin.latent_dim,
            window: self.world.window,
            fusor,
            layers: self.twin.layers.clone(),
            recon: self.twin.recon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            fed: self.fed.clone(),
            batch_size: self.batch_size,
            local_lr_bound_fraction: self.local_lr_bound_fraction,
            estimate: self.estimate,
        }
    }

    pub fn transform_config(&self) -> TransformConfig {
        TransformConfig {
            train: self.train_config(),
            mode: self.mode,
            fine_tune: self.fine_tune,
        }
    }

    /// `--seed` semantics: one world and one training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.seeds = vec![seed];
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.world.violations();
        out.extend(self.fed.violations());
        out.extend(self.twin_config(self.twin.fusor).violations());
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".to_string());
        }
        if let Some(f) = self.local_lr_bound_fraction {
            if !(f > 0.0 && f.is_finite()) {
                out.push("local_lr_bound_fraction must be positive".to_string());
            }
        }
        if self.estimate.samples < 2 {
            out.push("estimate.samples must be at least 2".to_string());
        }
        if matches!(&self.twin.fusors, Some(f) if f.is_empty()) {
            out.push("twin.fusors must not be empty".to_string());
        }
        if self.ops.is_empty() {
            out.push("ops must not be empty".to_string());
        }
        for op in &self.ops {
            if let Err(e) = op.validate() {
                out.push(format!("ops: {e}"));
            }
        }
        if self.seeds.is_empty() {
            out.push("seeds must not be empty".to_string());
        }
        if !(self.fine_tune >= 0.0 && self.fine_tune.is_finite()) {
            out.push("fine_tune must be non-negative".to_string());
        }
        if matches!(&self.data, Some(d) if d.is_empty()) {
            out.push("data must list at least one file".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Parses and validates a config document. A run manifest is accepted
    /// too: its `effective_config` is used. All unknown keys and semantic
    /// violations are reported together.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        if let Some(inner) = value.get_mut("effective_config") {
            value = inner.take();
        }
        let template = serde_json::to_value(Self::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &template, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown.iter().map(|k| format!("unknown key `{k}`")).collect::<Vec<_>>().join("; "),
            ));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Keys of `value` absent from `template`, as dotted paths. Null template
/// entries (unset options) and empty template arrays are not descended.
fn unknown_keys(value: &Value, template: &Value, path: &str, out: &mut Vec<String>) {
    match (value, template) {
        (Value::Object(v), Value::Object(t)) => {
            for (k, child) in v {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match t.get(k) {
                    Some(tc) => unknown_keys(child, tc, &p, out),
                    None => out.push(p),
                }
            }
        }
        (Value::Array(v), Value::Array(t)) => {
            if let Some(first) = t.first() {
                for (i, child) in v.iter().enumerate() {
                    unknown_keys(child, first, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

/// Loads the configured CSV files or generates the synthetic world.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<MultiModalDataset> {
    match &cfg.data {
        Some(paths) => load_csv_areas(paths),
        None => generate_world(&cfg.world),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: Option<u64>,
    pub areas: usize,
    pub steps: usize,
    pub modalities: Vec<Modality>,
    pub raw_bytes: u64,
}

impl DatasetInfo {
    fn new(cfg: &ExperimentConfig, ds: &MultiModalDataset) -> Self {
        Self {
            seed: cfg.data.is_none().then_some(cfg.world.seed),
            areas: ds.areas.len(),
            steps: ds.steps(),
            modalities: ds.modalities(),
            raw_bytes: ds.raw_bytes(),
        }
    }
}

/// Written next to every command's outputs. Contains no timestamps, so
/// reruns reproduce it byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub effective_config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub files: Vec<String>,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, ds: &MultiModalDataset, files: &[PathBuf]) -> Result<PathBuf> {
    let manifest = Manifest {
        format: EXPERIMENT_FORMAT.to_string(),
        command: command.to_string(),
        effective_config: cfg.clone(),
        dataset: DatasetInfo::new(cfg, ds),
        files: files.iter().map(|p| relative(out, p)).collect(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `data/area_{i}.csv` per area plus the manifest.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg)?;
    let dir = out.join("data");
    create_dir(&dir)?;
    let mut files = Vec::new();
    for (i, area) in ds.areas.iter().enumerate() {
        let path = dir.join(format!("area_{i}.csv"));
        write_area_csv(area, &path)?;
        files.push(path);
    }
    let manifest = write_manifest(out, "generate", cfg, &ds, &files)?;
    files.push(manifest);
    Ok(files)
}

/// File-name form of an op: `V->W` becomes `V_to_W`, `V+W->S` `VW_to_S`.
pub fn op_slug(op: &TwinOp) -> String {
    let modalities = |ms: &[Modality]| ms.iter().map(|m| m.to_string()).collect::<String>();
    let route = op.route();
    format!("{}_to_{}", modalities(&route.sources), modalities(&route.targets))
}

/// Centralized cost of training one twin: ship the op's raw modalities once.
fn centralized_cost(cfg: &FedConfig, data: &MultiModalDataset, twin: &TwinModel, op: &TwinOp, terms: usize) -> (CostLedger, CostLedger) {
    let mut needed = op.sources();
    needed.extend(op.targets());
    let raw: Vec<u64> = data
        .areas
        .iter()
        .map(|a| {
            a.samples
                .iter()
                .filter(|(m, _)| needed.contains(m))
                .map(|(_, s)| s.iter().map(Vec::len).sum::<usize>() as u64)
                .sum()
        })
        .collect();
    let vectors = match cfg.aggregation {
        Aggregation::Mean => 1,
        Aggregation::Gated => terms,
    };
    cost_compare(cfg, data.areas.len(), twin.param_count(), vectors, &raw)
}

struct OpOutcome {
    op: TwinOp,
    trained: Trained,
    row: ResultRow,
}

struct CellOutcome {
    fusor: FusorKind,
    seed: u64,
    donors: BTreeMap<Modality, Trained>,
    ops: Vec<OpOutcome>,
}

/// Donors either come from checkpoints (one per op source) or are mapped
/// from scratch, one single-modality twin per source modality.
pub enum Donors {
    Train,
    Given(Vec<TwinModel>),
}

fn cell_seed(seed: u64, stream: u64) -> u64 {
    crate::numerics::RngStream::new(seed).fork(stream).seed()
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    fusor: FusorKind,
    seed: u64,
    donors: &Donors,
    exec: Execution,
) -> Result<CellOutcome> {
    let twin_cfg = cfg.twin_config(fusor);
    let train = cfg.train_config();
    let mut mapped = BTreeMap::new();
    if let Donors::Train = donors {
        let mut sources: Vec<Modality> = cfg.ops.iter().flat_map(TwinOp::sources).collect();
        sources.sort();
        sources.dedup();
        for m in sources {
            log::info!("{fusor} seed {seed}: mapping donor {m}");
            let t = map_modalities(data, &[m], &twin_cfg, &train, cell_seed(seed, m.index() as u64), exec)?;
            mapped.insert(m, t);
        }
    }
    let tcfg = cfg.transform_config();
    let test = data.test_flat();
    let mut ops = Vec::with_capacity(cfg.ops.len());
    for (k, op) in cfg.ops.iter().enumerate() {
        log::info!("{fusor} seed {seed}: {op}");
        let chosen: Vec<&TwinModel> = match donors {
            Donors::Train => op.sources().iter().filter_map(|m| mapped.get(m)).map(|t| &t.twin).collect(),
            Donors::Given(list) => list.iter().collect(),
        };
        let trained = transform(&chosen, op, data, &twin_cfg, &tcfg, cell_seed(seed, 100 + k as u64), exec)?;
        let scores = evaluate(&trained.twin, &op.route(), &test)?;
        let per_target: BTreeMap<Modality, f64> = scores.iter().map(|(&m, r)| (m, r.value)).collect();
        let mean = per_target.values().sum::<f64>() / per_target.len() as f64;
        ops.push(OpOutcome {
            op: op.clone(),
            row: ResultRow {
                fusor,
                op: op.to_string(),
                seed,
                nmse: mean,
                per_target,
            },
            trained,
        });
    }
    Ok(CellOutcome {
        fusor,
        seed,
        donors: mapped,
        ops,
    })
}

/// Full run output, in (fusor, seed, op) order.
pub struct RunOutcome {
    pub results: Vec<ResultRow>,
    pub files: Vec<PathBuf>,
}

/// Runs every (fusor, seed) cell and writes reports, checkpoints and the
/// manifest under `out`. On divergence or a bound violation a JSON report
/// is written first and the error returned.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, donors: Donors, exec: Execution) -> Result<RunOutcome> {
    let raw = load_dataset(cfg)?;
    let data = prepare(&raw, cfg.world.window, cfg.world.train_fraction)?;
    create_dir(out)?;
    if let Donors::Given(list) = &donors {
        if let Some(d) = list.iter().find(|d| !cfg.fusors().contains(&d.fusor)) {
            return Err(Error::Config(format!(
                "donor fusor {} is not in the configured sweep",
                d.fusor
            )));
        }
    }
    let cells: Vec<(FusorKind, u64)> = cfg
        .fusors()
        .into_iter()
        .flat_map(|f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let outcomes = exec.map(cells.len(), |i| run_cell(cfg, &data, cells[i].0, cells[i].1, &donors, exec));
    let mut done = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            Ok(c) => done.push(c),
            Err(e) => {
                write_failure(out, &e)?;
                return Err(e);
            }
        }
    }

    let mut report = Report {
        charts: cfg.charts,
        ..Report::default()
    };
    let mut files = Vec::new();
    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoints {
        create_dir(&ckpt_dir)?;
    }
    for cell in &done {
        let tag = format!("{}/seed{}", cell.fusor, cell.seed);
        for (m, donor) in &cell.donors {
            report.history.push(HistoryRun {
                run: format!("{tag}/donor-{m}"),
                rounds: donor.mapping.history.clone(),
            });
            report.costs.push((format!("{tag}/donor-{m}"), donor.mapping.ledger.clone()));
            if cfg.checkpoints {
                let path = ckpt_dir.join(format!("{}_seed{}_donor_{m}.json", cell.fusor, cell.seed));
                TwinCheckpoint::from_twin(&donor.twin).write(&path)?;
                files.push(path);
            }
        }
        for o in &cell.ops {
            let run = format!("{tag}/{}", o.op);
            report.results.push(o.row.clone());
            report.history.push(HistoryRun {
                run: run.clone(),
                rounds: o.trained.mapping.history.clone(),
            });
            let terms = o.op.targets().len();
            let (_, central) = centralized_cost(&cfg.fed, &raw, &o.trained.twin, &o.op, terms);
            report.costs.push((run.clone(), o.trained.mapping.ledger.clone()));
            report.costs.push((run, central));
            if cfg.checkpoints {
                let path = ckpt_dir.join(format!("{}_seed{}_{}.json", cell.fusor, cell.seed, op_slug(&o.op)));
                TwinCheckpoint::from_twin(&o.trained.twin).write(&path)?;
                files.push(path);
            }
        }
    }
    let mut written = emit_report(&report, out)?;
    written.extend(files);
    let manifest = write_manifest(out, "run", cfg, &raw, &written)?;
    written.push(manifest);
    Ok(RunOutcome {
        results: report.results,
        files: written,
    })
}

/// Closed-form federated and centralized ledgers for every (fusor, op),
/// without training.
pub fn cmd_costs(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, CostLedger)>> {
    let raw = load_dataset(cfg)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    for fusor in cfg.fusors() {
        let twin_cfg = cfg.twin_config(fusor);
        for op in &cfg.ops {
            let (enc, dec) = match cfg.mode {
                TrainMode::Specific => (op.sources(), op.targets()),
                TrainMode::Unified => (raw.modalities(), raw.modalities()),
            };
            let mut rng = crate::numerics::RngStream::new(0);
            let twin = crate::twin::build_twin_with(&enc, &dec, &twin_cfg, &mut rng)?;
            let terms = dec.len();
            let (fed, central) = centralized_cost(&cfg.fed, &raw, &twin, op, terms);
            rows.push((format!("{fusor}/{op}"), fed));
            rows.push((format!("{fusor}/{op}"), central));
        }
    }
    let path = out.join("costs.csv");
    crate::metrics::write_costs_csv(&path, &rows)?;
    write_manifest(out, "costs", cfg, &raw, &[path])?;
    Ok(rows)
}

#[derive(Serialize)]
struct DivergenceReport {
    round: usize,
    area: usize,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct BoundReport {
    local_lr: f64,
    bound: f64,
}

fn write_failure(out: &Path, e: &Error) -> Result<()> {
    let (name, text) = match *e {
        Error::Divergence { round, area, step, loss } => (
            "divergence.json",
            serde_json::to_string_pretty(&DivergenceReport { round, area, step, loss })?,
        ),
        Error::BoundViolation { local_lr, bound } => (
            "bound_report.json",
            serde_json::to_string_pretty(&BoundReport { local_lr, bound })?,
        ),
        _ => return Ok(()),
    };
    let path = out.join(name);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Path of the failure report `cmd_run` writes for `e`, if any.
pub fn failure_report_path(out: &Path, e: &Error) -> Option<PathBuf> {
    match e {
        Error::Divergence { .. } => Some(out.join("divergence.json")),
        Error::BoundViolation { .. } => Some(out.join("bound_report.json")),
        _ => None,
    }
}
