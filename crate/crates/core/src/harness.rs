//! Experiment driver: builds the dataset, runs every
//! (test domain, OOD class, seed, mode) cell, scores every detector and
//! writes CSV results plus aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{
    build_colored_mnist_from, gen_synthetic, min_ood_classes, mnist_sources, split_id_ood, ColoredMnistOptions,
    DomainDataset, LabeledPool, SyntheticConfig, SyntheticSpec, DATA_DIR_ENV,
};
use crate::detectors::{Detector, DetectorKind};
use crate::dual::{train_dual, DualConfig};
use crate::erm::{train_erm, ErmConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gda::Ridge;
use crate::meta::{all_class_adapt, train_meta, MetaConfig};
use crate::metrics::{accuracy, aupr_out, auroc, scored};
use crate::model::Predictor;
use crate::rng::{derive_seed, substream};
use crate::transform::{ColorTransform, DomainTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    ColoredMnist(ColoredMnistSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColoredMnistSource {
    /// Directory holding the raw IDX files; falls back to the data-dir
    /// environment variable.
    pub dir: Option<PathBuf>,
    pub include_test_split: bool,
    pub options: ColoredMnistOptions,
}

impl Default for ColoredMnistSource {
    fn default() -> Self {
        Self {
            dir: None,
            include_test_split: true,
            options: ColoredMnistOptions::default(),
        }
    }
}

impl ColoredMnistSource {
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        match &self.dir {
            Some(d) => Ok(d.clone()),
            None => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("colored_mnist needs `dir` or {DATA_DIR_ENV}"))),
        }
    }

    pub fn sources(&self) -> Result<Vec<(PathBuf, PathBuf)>> {
        Ok(mnist_sources(&self.resolve_dir()?, self.include_test_split))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Meta,
    Dual,
    CeOnly,
    MetaNoGi,
    MetaNoOod,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Dual => "dual",
            Mode::CeOnly => "ce_only",
            Mode::MetaNoGi => "meta_no_gi",
            Mode::MetaNoOod => "meta_no_ood",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Mode::Meta | Mode::MetaNoGi | Mode::MetaNoOod)
    }

    /// Meta settings with this mode's ablation applied.
    pub fn meta_config(self, base: &MetaConfig) -> MetaConfig {
        let mut cfg = base.clone();
        match self {
            Mode::MetaNoGi => cfg.lambda_gi = 0.0,
            Mode::MetaNoOod => cfg.lambda_ood = 0.0,
            _ => {}
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepCounts {
    pub meta: usize,
    pub dual: usize,
    pub ce_only: usize,
}

impl Default for StepCounts {
    fn default() -> Self {
        Self {
            meta: 200,
            dual: 500,
            ce_only: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub modes: Vec<Mode>,
    pub hidden: Vec<usize>,
    pub steps: StepCounts,
    pub meta: MetaConfig,
    pub dual: DualConfig,
    pub ce_only: ErmConfig,
    pub detectors: Vec<DetectorKind>,
    pub ddu_ridge: Ridge,
    pub test_domains: Vec<usize>,
    pub ood_classes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Require the OOD-class list to cover the full protocol's share of classes.
    pub protocol_full: bool,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            dataset: DatasetSpec::Synthetic(SyntheticConfig::default()),
            data_seed: 0,
            modes: vec![Mode::Meta],
            hidden: vec![32, 32],
            steps: StepCounts::default(),
            meta: MetaConfig::default(),
            dual: DualConfig::default(),
            ce_only: ErmConfig::default(),
            detectors: DetectorKind::ALL.to_vec(),
            ddu_ridge: Ridge::default(),
            test_domains: vec![2],
            ood_classes: vec![3],
            seeds: vec![0],
            protocol_full: false,
            execution: Execution::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
    }

    /// Checks that hold without the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.detectors.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("modes, detectors and seeds must be nonempty".into()));
        }
        if self.test_domains.is_empty() || self.ood_classes.is_empty() {
            return Err(Error::Config("test_domains and ood_classes must be nonempty".into()));
        }
        if self.modes.iter().any(|m| m.is_meta()) {
            self.meta.validate()?;
        }
        if self.modes.contains(&Mode::Dual) {
            self.dual.validate()?;
        }
        if self.modes.contains(&Mode::CeOnly) {
            self.ce_only.validate()?;
        }
        Ok(())
    }

    /// Checks that need the built dataset.
    pub fn validate_against(&self, ds: &DomainDataset) -> Result<()> {
        for &d in &self.test_domains {
            if !ds.domains.contains(&d) {
                return Err(Error::Unknown {
                    what: "test domain",
                    id: d,
                });
            }
        }
        for &c in &self.ood_classes {
            if c >= ds.num_classes {
                return Err(Error::Unknown {
                    what: "OOD class",
                    id: c,
                });
            }
        }
        let need = min_ood_classes(ds.num_classes);
        if self.protocol_full && self.ood_classes.len() < need {
            return Err(Error::Config(format!(
                "protocol_full needs at least {need} OOD classes, got {}",
                self.ood_classes.len()
            )));
        }
        Ok(())
    }
}

/// Built dataset and the analytic transformation model that goes with it.
pub struct Prepared {
    pub dataset: DomainDataset,
    pub transform: Box<dyn DomainTransform>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(s) => {
            let spec = SyntheticSpec::from_config(s, cfg.data_seed)?;
            let dataset = gen_synthetic(&spec, cfg.data_seed)?;
            Ok(Prepared {
                dataset,
                transform: Box::new(spec.decoder),
            })
        }
        DatasetSpec::ColoredMnist(src) => {
            let built = build_colored_mnist_from(&src.sources()?, cfg.data_seed, &src.options)?;
            let plane = built.dataset.input_dim / 2;
            Ok(Prepared {
                dataset: built.dataset,
                transform: Box::new(ColorTransform::new(plane)),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub test_domain: usize,
    pub ood_class: usize,
    pub seed: u64,
    pub mode: Mode,
    pub detector: DetectorKind,
    pub auroc: f64,
    pub aupr: f64,
    pub id_accuracy: f64,
    pub wall_time_seconds: f64,
}

/// One (test domain, OOD class, seed, mode) unit of work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub test_domain: usize,
    pub ood_class: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "d{}_c{}_s{}_{}",
            self.test_domain,
            self.ood_class,
            self.seed,
            self.mode.name()
        )
    }
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &test_domain in &cfg.test_domains {
        for &ood_class in &cfg.ood_classes {
            for &seed in &cfg.seeds {
                for &mode in &cfg.modes {
                    out.push(Cell {
                        test_domain,
                        ood_class,
                        seed,
                        mode,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub records: Vec<EvalRecord>,
    pub log: String,
    pub predictor: Predictor,
}

/// Trains and evaluates a single cell.
pub fn run_cell(cfg: &ExperimentConfig, prep: &Prepared, cell: Cell) -> Result<CellOutcome> {
    let start = Instant::now();
    let ds = &prep.dataset;
    let tf = prep.transform.as_ref();
    let split = split_id_ood(ds, cell.test_domain, cell.ood_class)?;
    let (train, id_test) = LabeledPool::for_split(ds, &split)?;
    let ood_test = ds.features(&split.ood_test);
    // Every mode of a (domain, class, seed) cell starts from the same weights.
    let mut p = Predictor::new(
        ds.input_dim,
        &cfg.hidden,
        train.num_classes,
        &mut substream(cell.seed, &format!("init/{}/{}", cell.test_domain, cell.ood_class)),
    );
    let train_seed = derive_seed(cell.seed, &format!("train/{}/{}", cell.test_domain, cell.ood_class));
    let mut log = Vec::<u8>::new();
    let temperature;
    match cell.mode {
        m if m.is_meta() => {
            let mcfg = m.meta_config(&cfg.meta);
            temperature = mcfg.energy.temperature;
            train_meta(&mut p, &train, tf, &mcfg, cfg.steps.meta, train_seed, Some(&mut log))?;
            all_class_adapt(&mut p, &train, tf, &mcfg, mcfg.adapt_steps, train_seed)?;
        }
        Mode::Dual => {
            temperature = cfg.dual.energy.temperature;
            train_dual(
                &mut p,
                &train,
                tf,
                &cfg.dual,
                cfg.steps.dual,
                train_seed,
                Some(&mut log),
            )?;
        }
        _ => {
            temperature = cfg.meta.energy.temperature;
            train_erm(
                &mut p,
                &train,
                &cfg.ce_only,
                cfg.steps.ce_only,
                train_seed,
                Some(&mut log),
            )?;
        }
    }
    let id_accuracy = accuracy(&p.predict(&id_test.x)?, &id_test.y)?;
    let mut records = Vec::with_capacity(cfg.detectors.len());
    for &kind in &cfg.detectors {
        let det = Detector::fit(kind, &p, &train, temperature, cfg.ddu_ridge)?;
        let s_id = det.score(&p, &id_test.x)?;
        let s_ood = det.score(&p, &ood_test)?;
        let samples = scored(&s_id, &s_ood);
        records.push(EvalRecord {
            dataset: cfg.name.clone(),
            test_domain: cell.test_domain,
            ood_class: cell.ood_class,
            seed: cell.seed,
            mode: cell.mode,
            detector: kind,
            auroc: auroc(&samples)?,
            aupr: aupr_out(&samples)?,
            id_accuracy,
            wall_time_seconds: 0.0,
        });
    }
    let wall = start.elapsed().as_secs_f64();
    for r in &mut records {
        r.wall_time_seconds = wall;
    }
    Ok(CellOutcome {
        cell,
        records,
        log: String::from_utf8_lossy(&log).into_owned(),
        predictor: p,
    })
}

/// Every cell of the config, records sorted by cell then detector order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    cfg.validate_against(&prep.dataset)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<CellOutcome>> {
    let all = cells(cfg);
    let outcomes = exec::map(cfg.execution, &all, |&cell| {
        run_cell(cfg, prep, cell).map_err(|e| {
            e.context(format!(
                "test_domain={} ood_class={} seed={} mode={}",
                cell.test_domain,
                cell.ood_class,
                cell.seed,
                cell.mode.name()
            ))
        })
    });
    let mut outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.cell);
    Ok(outcomes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub detector: DetectorKind,
    /// `all` for the average over every test domain.
    pub test_domain: String,
    pub n: usize,
    pub auroc_mean: f64,
    pub auroc_se: f64,
    pub aupr_mean: f64,
    pub aupr_se: f64,
    pub id_accuracy_mean: f64,
    pub id_accuracy_se: f64,
    /// Set when the group has one record and its standard errors are 0 by convention.
    pub single: bool,
}

/// Mean and standard error `sd/√n` with the `n−1` sample deviation.
pub fn mean_se(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("aggregation group".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

fn summary_row(mode: Mode, detector: DetectorKind, scope: String, group: &[&EvalRecord]) -> Result<SummaryRow> {
    let col = |f: fn(&EvalRecord) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (auroc_mean, auroc_se) = mean_se(&col(|r| r.auroc))?;
    let (aupr_mean, aupr_se) = mean_se(&col(|r| r.aupr))?;
    let (id_accuracy_mean, id_accuracy_se) = mean_se(&col(|r| r.id_accuracy))?;
    Ok(SummaryRow {
        mode,
        detector,
        test_domain: scope,
        n: group.len(),
        auroc_mean,
        auroc_se,
        aupr_mean,
        aupr_se,
        id_accuracy_mean,
        id_accuracy_se,
        single: group.len() == 1,
    })
}

/// Per (mode, detector): one row per test domain, then one over all domains.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Empty("records".into()));
    }
    let mut groups: BTreeMap<(Mode, DetectorKind), BTreeMap<usize, Vec<&EvalRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.mode, r.detector))
            .or_default()
            .entry(r.test_domain)
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((mode, detector), by_domain) in groups {
        for (domain, group) in &by_domain {
            out.push(summary_row(mode, detector, domain.to_string(), group)?);
        }
        let all: Vec<&EvalRecord> = by_domain.values().flatten().copied().collect();
        out.push(summary_row(mode, detector, "all".into(), &all)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    dataset: &'a str,
    test_domain: usize,
    ood_class: usize,
    seed: u64,
    mode: Mode,
    detector: DetectorKind,
    auroc: f64,
    aupr: f64,
    id_accuracy: f64,
}

#[derive(Serialize)]
struct TimingRow {
    test_domain: usize,
    ood_class: usize,
    seed: u64,
    mode: Mode,
    wall_time_seconds: f64,
}

/// Results CSV without timing columns, so identical configs give identical bytes.
pub fn results_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(ResultRow {
            dataset: &r.dataset,
            test_domain: r.test_domain,
            ood_class: r.ood_class,
            seed: r.seed,
            mode: r.mode,
            detector: r.detector,
            auroc: r.auroc,
            aupr: r.aupr,
            id_accuracy: r.id_accuracy,
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes results, summary, timings, the resolved config and per-cell logs.
pub fn write_outputs(out: &Path, cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<Vec<EvalRecord>> {
    fs::create_dir_all(out.join("logs"))?;
    let records: Vec<EvalRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    fs::write(out.join("results.csv"), results_csv(&records)?)?;
    fs::write(out.join("summary.csv"), summary_csv(&aggregate(&records)?)?)?;
    let mut w = csv::Writer::from_path(out.join("timings.csv"))?;
    for o in outcomes {
        w.serialize(TimingRow {
            test_domain: o.cell.test_domain,
            ood_class: o.cell.ood_class,
            seed: o.cell.seed,
            mode: o.cell.mode,
            wall_time_seconds: o.records.first().map_or(0.0, |r| r.wall_time_seconds),
        })?;
    }
    w.flush()?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    for o in outcomes {
        fs::write(out.join("logs").join(format!("{}.log", o.cell.label())), &o.log)?;
    }
    Ok(records)
}

/// One row per instance: the features, then `y` and `domain`.
pub fn write_dataset_csv(path: &Path, ds: &DomainDataset) -> Result<usize> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.input_dim).map(|j| format!("x{j}")).collect();
    header.extend(["y".into(), "domain".into()]);
    w.write_record(&header)?;
    for inst in &ds.instances {
        let mut row: Vec<String> = inst.x.iter().map(|v| v.to_string()).collect();
        row.push(inst.y.to_string());
        row.push(inst.domain.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(ds.len())
}

/// Human-readable table of the overall summary rows.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<8} {:>4} {:>15} {:>15} {:>15}",
        "mode", "detector", "n", "auroc", "aupr", "id_acc"
    );
    for r in rows.iter().filter(|r| r.test_domain == "all") {
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:>4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4}",
            r.mode.name(),
            r.detector.name(),
            r.n,
            r.auroc_mean,
            r.auroc_se,
            r.aupr_mean,
            r.aupr_se,
            r.id_accuracy_mean,
            r.id_accuracy_se
        );
    }
    s
}
