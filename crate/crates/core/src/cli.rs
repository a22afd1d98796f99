//! Run configuration and the command implementations behind the `grounder`
//! binary. Every command is a plain function so examples and tests can drive
//! it without a subprocess.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{default_rules, RuleMatcher, Stage, VisitHistory};
use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::index::{build_index, ground, ground_batch, index_to_bytes, load_index, IndexSnapshot, QueryResult};
use crate::records::{load_associations, load_records, write_associations, Association, Record, Schema};
use crate::scoring::SimKind;
use crate::serialize::{MaskMode, SepMode};
use crate::synthbench::{
    self, entry_fields_for, evaluate, make_benchmark, Benchmark, GeneratorConfig, Metrics, NoiseConfig, DEFAULT_KS,
};
use crate::train::{checkpoint_to_bytes, continue_training, load_checkpoint, AdamConfig, Checkpoint, TrainConfig, TrainData};

pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";
pub const ASSOCIATIONS_FILE: &str = "associations.jsonl";

/// Training hyperparameters as they appear in the run file. Schemas and the
/// vocabulary size come from the enclosing [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub variant: Variant,
    pub sim: SimKind,
    pub sep: SepMode,
    pub mask: MaskMode,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub hidden: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub share_towers: bool,
    pub log_every: u64,
    pub weight_by_strength: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let c = TrainConfig::new(synthbench::query_schema(), synthbench::entry_schema());
        TrainOptions {
            variant: c.encoder.variant,
            sim: c.sim,
            sep: c.sep,
            mask: c.mask,
            batch_size: c.batch_size,
            steps: c.steps,
            lr: c.lr,
            adam: c.adam,
            hidden: c.encoder.hidden,
            out_dim: c.encoder.out_dim,
            heads: c.encoder.heads,
            max_len: c.encoder.max_len,
            share_towers: c.share_towers,
            log_every: c.log_every,
            weight_by_strength: c.weight_by_strength,
        }
    }
}

impl TrainOptions {
    pub fn to_config(&self, query_schema: &Schema, entry_schema: &Schema, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(query_schema.clone(), entry_schema.clone());
        c.encoder.variant = self.variant;
        c.encoder.hidden = self.hidden;
        c.encoder.out_dim = self.out_dim;
        c.encoder.heads = self.heads;
        c.encoder.max_len = self.max_len;
        c.encoder.seed = seed;
        c.seed = seed;
        c.sim = self.sim;
        c.sep = self.sep;
        c.mask = self.mask;
        c.batch_size = self.batch_size;
        c.steps = self.steps;
        c.lr = self.lr;
        c.adam = self.adam;
        c.share_towers = self.share_towers;
        c.log_every = self.log_every;
        c.weight_by_strength = self.weight_by_strength;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            checkpoint: "runs/model.gckpt".into(),
            index: "runs/entries.gidx".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives data generation and training; overrides `generator.seed`.
    pub seed: u64,
    pub query_schema: Schema,
    pub entry_schema: Schema,
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    pub n_queries: usize,
    pub test_fraction: f64,
    pub train: TrainOptions,
    /// Rule cascade for the baseline; the stock cascade when absent.
    pub baseline_rules: Option<Vec<Stage>>,
    pub paths: Paths,
    pub grid_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            query_schema: synthbench::query_schema(),
            entry_schema: synthbench::entry_schema(),
            generator: GeneratorConfig::default(),
            noise: NoiseConfig::default(),
            n_queries: 20_000,
            test_fraction: 0.1,
            train: TrainOptions::default(),
            baseline_rules: None,
            paths: Paths::default(),
            grid_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.noise.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        for stage in self.rules()? {
            stage.validate(&self.query_schema, &self.entry_schema)?;
        }
        self.train_config(self.seed).validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train.to_config(&self.query_schema, &self.entry_schema, seed)
    }

    pub fn rules(&self) -> Result<Vec<Stage>> {
        match &self.baseline_rules {
            Some(r) => Ok(r.clone()),
            None => default_rules(&self.query_schema, &self.entry_schema),
        }
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        make_benchmark(&self.generator_config(), &self.noise, self.n_queries, self.test_fraction)
    }
}

/// Writes through a sibling temp file and a rename so a failed command never
/// leaves a half-written output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRow {
    pub query_id: String,
    pub entry_id: String,
    pub split: Split,
}

/// Benchmark files as read back from a data directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<Record>,
    pub queries: Vec<Record>,
    pub gold: BTreeMap<String, String>,
    pub train: Vec<Association>,
    pub test_ids: Vec<String>,
}

impl Dataset {
    pub fn from_benchmark(bench: &Benchmark) -> Self {
        Dataset {
            entries: bench.entries.clone(),
            queries: bench.queries.clone(),
            gold: bench.gold.clone(),
            train: bench.train.clone(),
            test_ids: bench.test.iter().map(|a| a.query_id.clone()).collect(),
        }
    }

    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let (entries, _) = load_records(dir.join(ENTRIES_FILE), &cfg.entry_schema)?;
        let (queries, _) = load_records(dir.join(QUERIES_FILE), &cfg.query_schema)?;
        let (train, _) = load_associations(dir.join(ASSOCIATIONS_FILE), &queries, &entries)?;
        let gold_path = dir.join(GOLD_FILE);
        let text = fs::read_to_string(&gold_path).map_err(|e| Error::io(&gold_path, e))?;
        let mut gold = BTreeMap::new();
        let mut test_ids = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: GoldRow = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            if row.split == Split::Test {
                test_ids.push(row.query_id.clone());
            }
            gold.insert(row.query_id, row.entry_id);
        }
        Ok(Dataset {
            entries,
            queries,
            gold,
            train,
            test_ids,
        })
    }

    pub fn test_queries(&self) -> Vec<&Record> {
        let ids: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        self.queries.iter().filter(|q| ids.contains(q.id.as_str())).collect()
    }

    pub fn visit_history(&self) -> VisitHistory {
        let mut h = VisitHistory::default();
        for a in &self.train {
            h.add(&a.entry_id, a.strength.round().max(1.0) as u64);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub entries: usize,
    pub queries: usize,
    pub train_associations: usize,
    pub test_queries: usize,
    pub files: Vec<PathBuf>,
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<GenSummary> {
    cfg.validate()?;
    let bench = cfg.benchmark()?;
    let test: HashSet<&str> = bench.test.iter().map(|a| a.query_id.as_str()).collect();
    let gold: Vec<GoldRow> = bench
        .gold
        .iter()
        .map(|(q, e)| GoldRow {
            query_id: q.clone(),
            entry_id: e.clone(),
            split: if test.contains(q.as_str()) { Split::Test } else { Split::Train },
        })
        .collect();
    let lines = |records: &[Record], schema: &Schema| -> Vec<u8> {
        records.iter().flat_map(|r| (r.to_json_line(schema) + "\n").into_bytes()).collect()
    };
    let files = [
        (ENTRIES_FILE, lines(&bench.entries, &cfg.entry_schema)),
        (QUERIES_FILE, lines(&bench.queries, &cfg.query_schema)),
        (GOLD_FILE, jsonl(&gold)?),
        (ASSOCIATIONS_FILE, jsonl(&bench.train)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(GenSummary {
        entries: bench.entries.len(),
        queries: bench.queries.len(),
        train_associations: bench.train.len(),
        test_queries: bench.test.len(),
        files: written,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub first_step: u64,
    pub last_step: u64,
    pub final_loss: f64,
}

/// Trains from scratch, or continues `resume` for another `steps` steps.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    let ckpt = match resume {
        Some(path) => load_checkpoint(path)?,
        None => Checkpoint::init(cfg.train_config(cfg.seed))?,
    };
    let first_step = ckpt.step + 1;
    let steps = cfg.train.steps;
    let train_data = TrainData::new(&data.queries, &data.entries, &data.train)?;
    let run = continue_training(ckpt, &train_data, steps, log)?;
    write_atomic(out, &checkpoint_to_bytes(&run.checkpoint)?)?;
    Ok(TrainSummary {
        checkpoint: out.to_path_buf(),
        first_step,
        last_step: run.checkpoint.step,
        final_loss: *run.losses.last().expect("at least one step"),
    })
}

pub fn cmd_build_index(checkpoint: &Path, data: &Dataset, out: &Path) -> Result<IndexSnapshot> {
    let ckpt = load_checkpoint(checkpoint)?;
    let snapshot = build_index(&ckpt, &data.entries, ckpt.config.sim)?;
    write_atomic(out, &index_to_bytes(&snapshot))?;
    Ok(snapshot)
}

/// Grounds one JSON query object against a saved index.
pub fn cmd_query(checkpoint: &Path, index: &Path, record_json: &str, k: usize) -> Result<QueryResult> {
    let ckpt = load_checkpoint(checkpoint)?;
    let snapshot = load_index(index)?;
    let (mut records, report) = crate::records::parse_records(record_json.trim(), &ckpt.config.query_schema);
    if let Some((line, message)) = report.malformed.first() {
        return Err(Error::MalformedLine {
            line: *line,
            message: message.clone(),
        });
    }
    if records.len() != 1 {
        return Err(Error::Record(format!("expected one query record, got {}", records.len())));
    }
    ground(&ckpt, &snapshot, &records.remove(0), k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub system: String,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Metrics,
}

pub fn evaluate_baseline(cfg: &RunConfig, data: &Dataset) -> Result<Metrics> {
    let matcher = RuleMatcher::new(&data.entries, cfg.rules()?)?;
    let history = data.visit_history();
    evaluate(
        |q| matcher.match_query(q, &history).map(|id| vec![id]),
        &data.test_queries(),
        &data.gold,
        &DEFAULT_KS,
    )
}

pub fn evaluate_model(ckpt: &Checkpoint, snapshot: &IndexSnapshot, data: &Dataset) -> Result<Metrics> {
    let queries = data.test_queries();
    let k = DEFAULT_KS.iter().copied().max().unwrap_or(1);
    let mut results = ground_batch(ckpt, snapshot, &queries, k)?.into_iter();
    evaluate(|_| results.next().map(|r| r.ids()), &queries, &data.gold, &DEFAULT_KS)
}

pub enum EvalTarget<'a> {
    Baseline,
    Checkpoint { path: &'a Path, index: Option<&'a Path> },
}

pub fn cmd_eval(cfg: &RunConfig, data: &Dataset, target: EvalTarget<'_>) -> Result<EvalReport> {
    match target {
        EvalTarget::Baseline => Ok(EvalReport {
            system: "baseline".into(),
            checkpoint: None,
            metrics: evaluate_baseline(cfg, data)?,
        }),
        EvalTarget::Checkpoint { path, index } => {
            let ckpt = load_checkpoint(path)?;
            let snapshot = match index {
                Some(p) => load_index(p)?,
                None => build_index(&ckpt, &data.entries, ckpt.config.sim)?,
            };
            Ok(EvalReport {
                system: "model".into(),
                checkpoint: Some(path.to_path_buf()),
                metrics: evaluate_model(&ckpt, &snapshot, data)?,
            })
        }
    }
}

/// Trains on the dataset's train split and scores the test split.
pub fn train_and_evaluate(config: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, Metrics)> {
    let run = crate::train::train(config, &data.queries, &data.entries, &data.train, None)?;
    let snapshot = build_index(&run.checkpoint, &data.entries, config.sim)?;
    let metrics = evaluate_model(&run.checkpoint, &snapshot, data)?;
    Ok((run.checkpoint, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combination {
    pub variant: Variant,
    pub sim: SimKind,
    pub sep: SepMode,
    pub mask: MaskMode,
}

impl Combination {
    /// All 24 module combinations in a fixed order.
    pub fn all() -> Vec<Combination> {
        let mut out = Vec::with_capacity(24);
        for variant in Variant::ALL {
            for sim in SimKind::ALL {
                for sep in SepMode::ALL {
                    for mask in MaskMode::ALL {
                        out.push(Combination { variant, sim, sep, mask });
                    }
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!("{:?}/{}/{:?}/{:?}", self.variant, self.sim, self.sep, self.mask)
    }

    fn apply(&self, opts: &TrainOptions) -> TrainOptions {
        TrainOptions {
            variant: self.variant,
            sim: self.sim,
            sep: self.sep,
            mask: self.mask,
            ..opts.clone()
        }
    }
}

/// Stable 64-bit FNV-1a, used to give each grid cell its own RNG stream.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub variant: Variant,
    pub sim: SimKind,
    pub sep: SepMode,
    pub mask: MaskMode,
    pub mean: f64,
    pub stddev: f64,
    pub runs: usize,
    pub accuracies: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalRow {
    pub axis: String,
    pub level: String,
    pub mean: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
    pub marginals: Vec<MarginalRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl GridReport {
    pub fn row(&self, c: Combination) -> Option<&GridRow> {
        self.rows
            .iter()
            .find(|r| r.variant == c.variant && r.sim == c.sim && r.sep == c.sep && r.mask == c.mask)
    }

    /// Mean over every run of the rows selected by `keep`.
    pub fn pooled_mean(&self, keep: impl Fn(&GridRow) -> bool) -> f64 {
        let xs: Vec<f64> = self.rows.iter().filter(|r| keep(r)).flat_map(|r| r.accuracies.iter().copied()).collect();
        mean_std(&xs).0
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tsim\tsep\tmask\tmean\tstddev\truns\tfailures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?}\t{}\t{:?}\t{:?}\t{:.4}\t{:.4}\t{}\t{}\n",
                r.variant,
                r.sim,
                r.sep,
                r.mask,
                r.mean,
                r.stddev,
                r.runs,
                r.failures.len()
            ));
        }
        out.push_str("\naxis\tlevel\tmean\truns\n");
        for m in &self.marginals {
            out.push_str(&format!("{}\t{}\t{:.4}\t{}\n", m.axis, m.level, m.mean, m.runs));
        }
        out
    }
}

fn marginals(rows: &[GridRow]) -> Vec<MarginalRow> {
    let mut out = Vec::with_capacity(9);
    let mut push = |axis: &str, level: String, keep: &dyn Fn(&GridRow) -> bool| {
        let xs: Vec<f64> = rows.iter().filter(|r| keep(r)).flat_map(|r| r.accuracies.iter().copied()).collect();
        out.push(MarginalRow {
            axis: axis.into(),
            level,
            mean: mean_std(&xs).0,
            runs: xs.len(),
        });
    };
    for v in Variant::ALL {
        push("backbone", format!("{v:?}"), &|r| r.variant == v);
    }
    for s in SimKind::ALL {
        push("similarity", s.to_string(), &|r| r.sim == s);
    }
    for s in SepMode::ALL {
        push("separator", format!("{s:?}"), &|r| r.sep == s);
    }
    for m in MaskMode::ALL {
        push("mask", format!("{m:?}"), &|r| r.mask == m);
    }
    out
}

/// Trains and scores every (combination, seed) cell. Data depend only on the
/// seed; each cell's training stream is `seed ^ label_hash(label)`, so the
/// order and parallelism of execution never change a result.
pub fn run_grid(
    cfg: &RunConfig,
    combos: &[Combination],
    seeds: &[u64],
    parallel: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<GridReport> {
    if seeds.is_empty() {
        return Err(Error::Config("grid needs at least one seed".into()));
    }
    let datasets = seeds
        .iter()
        .map(|&s| {
            let c = RunConfig { seed: s, ..cfg.clone() };
            Ok(Dataset::from_benchmark(&c.benchmark()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..combos.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let run_job = |&(c, s): &(usize, usize)| -> std::result::Result<f64, String> {
        let combo = combos[c];
        let label = combo.label();
        let seed = seeds[s] ^ label_hash(&label);
        let opts = combo.apply(&cfg.train);
        let config = opts.to_config(&cfg.query_schema, &cfg.entry_schema, seed);
        let out = train_and_evaluate(&config, &datasets[s]).map(|(_, m)| m.top1_acc).map_err(|e| e.to_string());
        progress(&format!("{label} seed {}: {:?}", seeds[s], out));
        out
    };
    let results: Vec<std::result::Result<f64, String>> = if parallel > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    } else {
        jobs.iter().map(run_job).collect()
    };

    let mut rows = Vec::with_capacity(combos.len());
    for (c, combo) in combos.iter().enumerate() {
        let mut accuracies = Vec::new();
        let mut failures = Vec::new();
        for (&(jc, js), r) in jobs.iter().zip(&results) {
            if jc != c {
                continue;
            }
            match r {
                Ok(a) => accuracies.push(*a),
                Err(e) => failures.push(format!("seed {}: {e}", seeds[js])),
            }
        }
        let (mean, stddev) = mean_std(&accuracies);
        rows.push(GridRow {
            variant: combo.variant,
            sim: combo.sim,
            sep: combo.sep,
            mask: combo.mask,
            mean,
            stddev,
            runs: accuracies.len(),
            accuracies,
            failures,
        });
    }
    Ok(GridReport {
        seeds: seeds.to_vec(),
        marginals: marginals(&rows),
        rows,
    })
}

/// Full 24-cell grid; writes `grid.tsv` and `grid.json` under `out_dir`.
pub fn cmd_grid(cfg: &RunConfig, seeds: &[u64], parallel: usize, out_dir: &Path) -> Result<GridReport> {
    let report = run_grid(cfg, &Combination::all(), seeds, parallel, &|line| eprintln!("{line}"))?;
    write_atomic(&out_dir.join("grid.tsv"), report.to_tsv().as_bytes())?;
    write_atomic(&out_dir.join("grid.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Query field sets, each extending the previous one.
pub const ABLATION_FIELD_SETS: [&[&str]; 4] = [
    &[synthbench::NAME],
    &[synthbench::NAME, synthbench::ADDRESS],
    &[synthbench::NAME, synthbench::ADDRESS, synthbench::PHONE],
    &[synthbench::NAME, synthbench::ADDRESS, synthbench::PHONE, synthbench::BUSINESS],
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub query_fields: Vec<String>,
    pub entry_fields: Vec<String>,
    pub mean: f64,
    pub stddev: f64,
    pub accuracies: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("query_fields\tentry_fields\tmean\tstddev\truns\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\n",
                r.query_fields.join(","),
                r.entry_fields.join(","),
                r.mean,
                r.stddev,
                r.accuracies.len()
            ));
        }
        out
    }
}

/// Retrains with each nested valid-field set and reports accuracy in order.
/// Checkpoints land in `out_dir` along with `ablation.tsv` and `ablation.json`.
pub fn cmd_ablate_fields(cfg: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let datasets = seeds
        .iter()
        .map(|&s| Ok(Dataset::from_benchmark(&RunConfig { seed: s, ..cfg.clone() }.benchmark()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for fields in ABLATION_FIELD_SETS {
        let entry_fields = entry_fields_for(fields);
        let entry_refs: Vec<&str> = entry_fields.iter().map(String::as_str).collect();
        let q = cfg.query_schema.restrict(fields)?;
        let e = cfg.entry_schema.restrict(&entry_refs)?;
        let tag = fields.join("+");
        let mut accuracies = Vec::new();
        let mut checkpoints = Vec::new();
        for (&seed, data) in seeds.iter().zip(&datasets) {
            let config = cfg.train.to_config(&q, &e, seed);
            let (ckpt, metrics) = train_and_evaluate(&config, data)?;
            let path = out_dir.join(format!("ablation-{tag}-seed{seed}.gckpt"));
            write_atomic(&path, &checkpoint_to_bytes(&ckpt)?)?;
            eprintln!("{tag} seed {seed}: top-1 {:.4}", metrics.top1_acc);
            accuracies.push(metrics.top1_acc);
            checkpoints.push(path);
        }
        let (mean, stddev) = mean_std(&accuracies);
        rows.push(AblationRow {
            query_fields: fields.iter().map(|s| s.to_string()).collect(),
            entry_fields,
            mean,
            stddev,
            accuracies,
            checkpoints,
        });
    }
    let report = AblationReport {
        seeds: seeds.to_vec(),
        rows,
    };
    write_atomic(&out_dir.join("ablation.tsv"), report.to_tsv().as_bytes())?;
    write_atomic(&out_dir.join("ablation.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Writes the train split as an association file (used by examples that
/// assemble a data directory by hand).
pub fn write_train_associations(dir: &Path, train: &[Association]) -> Result<()> {
    write_associations(dir.join(ASSOCIATIONS_FILE), train)
}
