//! The ablation matrix runner: every (attribute, prefix, variant) cell is an
//! independent job whose samples are persisted as JSON lines, so an
//! interrupted run resumes cell by cell.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{load_bow, AttributeTarget, LinearDiscriminator, ObjectiveSign};
use crate::error::{Error, Result};
use crate::lm::TransformerLm;
use crate::metrics::corpus_dist;
use crate::scalar::Scalar;
use crate::steer::{generate, generate_ranked, SampleRecord, SteeringConfig, Variant};

use super::text_perplexity;
use super::weighted::{generate_weighted, WdOptions};

pub const CONFIG_FILE: &str = "config.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
const CELLS_DIR: &str = "cells";

/// Dimensions of an experiment. `attributes` are target labels, in the
/// order of the experiment's targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMatrix {
    pub prefixes: Vec<String>,
    pub attributes: Vec<String>,
    pub variants: Vec<Variant>,
    pub samples_per_cell: usize,
    pub base_seed: u64,
    /// Generated tokens per passage.
    pub length: usize,
}

impl RunMatrix {
    pub fn validate(&self) -> Result<()> {
        let empty = |what: &str| Err(Error::Config(format!("run matrix has no {what}")));
        if self.prefixes.is_empty() {
            return empty("prefixes");
        }
        if self.attributes.is_empty() {
            return empty("attributes");
        }
        if self.variants.is_empty() {
            return empty("variants");
        }
        if self.samples_per_cell == 0 {
            return empty("samples per cell");
        }
        if self.length == 0 {
            return Err(Error::Config("generation length must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a) {
                return Err(Error::Config(format!("attribute `{a}` appears twice")));
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.attributes.len() * self.prefixes.len() * self.variants.len()
    }
}

/// Decoding settings shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Used for bag-of-words targets; its seed is ignored.
    pub bow: SteeringConfig,
    /// Used for discriminator targets; its seed is ignored.
    pub discrim: SteeringConfig,
    pub wd: WdOptions,
    /// Parallel cell workers; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bow: SteeringConfig::bow_defaults(),
            discrim: SteeringConfig::discrim_defaults(),
            wd: WdOptions::default(),
            workers: 0,
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug)]
pub struct Experiment<S> {
    pub lm: TransformerLm<S>,
    /// Separately trained model used only for perplexity.
    pub evaluator: TransformerLm<S>,
    pub targets: Vec<AttributeTarget<S>>,
    pub matrix: RunMatrix,
    pub config: ExperimentConfig,
}

impl<S: Scalar> Experiment<S> {
    pub fn new(
        lm: TransformerLm<S>,
        evaluator: TransformerLm<S>,
        targets: Vec<AttributeTarget<S>>,
        matrix: RunMatrix,
        config: ExperimentConfig,
    ) -> Result<Self> {
        matrix.validate()?;
        let labels: Vec<String> = targets.iter().map(AttributeTarget::label).collect();
        if labels != matrix.attributes {
            return Err(Error::Config(format!(
                "matrix attributes {:?} do not match targets {labels:?}",
                matrix.attributes
            )));
        }
        config.bow.validate()?;
        config.discrim.validate()?;
        config.wd.validate()?;
        Ok(Self { lm, evaluator, targets, matrix, config })
    }
}

/// File-based description of an attribute model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttributeSpec {
    Bow {
        path: PathBuf,
        #[serde(default)]
        objective_sign: ObjectiveSign,
    },
    Discriminator {
        path: PathBuf,
        class: String,
        #[serde(default)]
        objective_sign: ObjectiveSign,
    },
}

/// On-disk experiment description; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub lm: PathBuf,
    pub evaluator: PathBuf,
    pub attributes: Vec<AttributeSpec>,
    pub prefixes: Vec<String>,
    pub variants: Vec<Variant>,
    pub samples_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub length: usize,
    #[serde(default)]
    pub config: ExperimentConfig,
}

impl ExperimentPlan {
    /// Loads every model the plan names; a missing artifact is reported by
    /// its path.
    pub fn resolve(&self, root: &Path) -> Result<Experiment<f32>> {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let load_lm = |p: &Path| {
            let path = abs(p);
            if !path.is_dir() {
                return Err(Error::MissingPath(path));
            }
            TransformerLm::<f32>::load(&path)
        };
        let lm = load_lm(&self.lm)?;
        let evaluator = load_lm(&self.evaluator)?;
        let mut targets = Vec::with_capacity(self.attributes.len());
        for spec in &self.attributes {
            targets.push(match spec {
                AttributeSpec::Bow { path, objective_sign } => {
                    AttributeTarget::bow(load_bow(&abs(path), lm.tokenizer())?, *objective_sign)
                }
                AttributeSpec::Discriminator { path, class, objective_sign } => {
                    let path = abs(path);
                    if !path.is_dir() {
                        return Err(Error::MissingPath(path));
                    }
                    let d = LinearDiscriminator::<f32>::load(&path)?;
                    let idx = d.class_index(class).ok_or_else(|| Error::InvalidField {
                        field: "class",
                        reason: format!("`{class}` is not one of {:?}", d.class_names),
                    })?;
                    AttributeTarget::discriminator(d, idx, *objective_sign)?
                }
            });
        }
        let matrix = RunMatrix {
            prefixes: self.prefixes.clone(),
            attributes: targets.iter().map(AttributeTarget::label).collect(),
            variants: self.variants.clone(),
            samples_per_cell: self.samples_per_cell,
            base_seed: self.base_seed,
            length: self.length,
        };
        Experiment::new(lm, evaluator, targets, matrix, self.config.clone())
    }
}

/// Ranking candidate summary kept with a ranked winner for re-ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub mean_attr_ll: Option<f64>,
    pub mean_dist: f64,
}

/// One persisted sample: the generation record plus its cell coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub attribute_index: usize,
    pub prefix_index: usize,
    pub sample_index: usize,
    pub prefix: String,
    /// Per-passage perplexity of the full text under the evaluator.
    pub perplexity: f64,
    /// Every sample a ranked variant chose from, in seed order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(flatten)]
    pub sample: SampleRecord,
}

/// Seed of sample `sample` in the cells of one (attribute, prefix) pair.
/// Independent of the variant, so variants are compared on paired seeds.
pub fn derive_seed(base: u64, attribute: usize, prefix: usize, sample: usize) -> u64 {
    let mut x = base;
    for part in [attribute as u64, prefix as u64, sample as u64] {
        x = splitmix64(x ^ splitmix64(part.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Cell {
    attribute: usize,
    prefix: usize,
    variant_slot: usize,
}

/// Summary statistics over a set of samples. Standard deviations use the
/// `n − 1` denominator (0 for a single sample); Dist scores pool every
/// generated continuation in the set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    pub attr_ll_mean: f64,
    pub attr_ll_std: f64,
    pub perplexity_mean: f64,
    pub perplexity_std: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
}

pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a ExperimentRecord>) -> Aggregate {
    let records: Vec<&ExperimentRecord> = records.into_iter().collect();
    let lls: Vec<f64> = records.iter().filter_map(|r| r.sample.mean_attr_ll).collect();
    let ppl: Vec<f64> = records.iter().map(|r| r.perplexity).collect();
    let gens: Vec<&[usize]> = records.iter().map(|r| r.sample.generated()).collect();
    let dist = corpus_dist(&gens);
    let (attr_ll_mean, attr_ll_std) = mean_std(&lls);
    let (perplexity_mean, perplexity_std) = mean_std(&ppl);
    Aggregate {
        samples: records.len(),
        attr_ll_mean,
        attr_ll_std,
        perplexity_mean,
        perplexity_std,
        dist1: dist.dist1,
        dist2: dist.dist2,
        dist3: dist.dist3,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub attribute: String,
    /// `None` for the row pooling every prefix.
    pub prefix_index: Option<usize>,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per (variant, attribute), pooled over prefixes, in matrix order.
    pub rows: Vec<ReportRow>,
    /// The same statistics per (variant, attribute, prefix).
    pub by_prefix: Vec<ReportRow>,
    /// Matrix and decoding settings the report was produced with.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn row(&self, variant: Variant, attribute: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant && r.attribute == attribute)
    }

    /// Recomputes the report from persisted records.
    pub fn from_records(matrix: &RunMatrix, records: &[ExperimentRecord], config: serde_json::Value) -> Self {
        let mut rows = Vec::new();
        let mut by_prefix = Vec::new();
        for (ai, attribute) in matrix.attributes.iter().enumerate() {
            for &variant in &matrix.variants {
                let of_cell = |r: &&ExperimentRecord| r.attribute_index == ai && r.sample.variant == variant;
                rows.push(ReportRow {
                    variant,
                    attribute: attribute.clone(),
                    prefix_index: None,
                    stats: aggregate(records.iter().filter(of_cell)),
                });
                for pi in 0..matrix.prefixes.len() {
                    by_prefix.push(ReportRow {
                        variant,
                        attribute: attribute.clone(),
                        prefix_index: Some(pi),
                        stats: aggregate(records.iter().filter(of_cell).filter(|r| r.prefix_index == pi)),
                    });
                }
            }
        }
        Self { rows, by_prefix, config }
    }

    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct CsvRow<'a> {
            variant: Variant,
            attribute: &'a str,
            prefix: String,
            samples: usize,
            attr_ll_mean: f64,
            attr_ll_std: f64,
            perplexity_mean: f64,
            perplexity_std: f64,
            dist1: f64,
            dist2: f64,
            dist3: f64,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain(&self.by_prefix) {
            let s = &r.stats;
            w.serialize(CsvRow {
                variant: r.variant,
                attribute: &r.attribute,
                prefix: r.prefix_index.map_or_else(|| "all".to_string(), |p| p.to_string()),
                samples: s.samples,
                attr_ll_mean: s.attr_ll_mean,
                attr_ll_std: s.attr_ll_std,
                perplexity_mean: s.perplexity_mean,
                perplexity_std: s.perplexity_std,
                dist1: s.dist1,
                dist2: s.dist2,
                dist3: s.dist3,
            })
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
    }

    pub fn to_markdown(&self) -> Result<String> {
        let mut out = String::from("# Experiment report\n\n");
        out.push_str("| Variant | Attribute | Attribute LL | Perplexity | Dist-1 | Dist-2 | Dist-3 | n |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let s = &r.stats;
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.2} ± {:.2} | {:.3} | {:.3} | {:.3} | {} |\n",
                r.variant,
                r.attribute,
                s.attr_ll_mean,
                s.perplexity_mean,
                s.perplexity_std,
                s.dist1,
                s.dist2,
                s.dist3,
                s.samples
            ));
        }
        if let Some(n) = self.config.pointer("/config/wd/candidates") {
            out.push_str(&format!(
                "\nWD with a discriminator reweights only the {n} most probable base tokens at each step.\n"
            ));
        }
        out.push_str("\n## Configuration\n\n```json\n");
        out.push_str(&serde_json::to_string_pretty(&self.config)?);
        out.push_str("\n```\n");
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    /// Every record, ordered by attribute, prefix, variant, and sample.
    pub records: Vec<ExperimentRecord>,
    /// Cells loaded from a previous run instead of being generated.
    pub resumed_cells: usize,
}

/// Runs every cell not already persisted under `out_dir`, then writes the
/// combined sample file and the report tables.
pub fn run_experiment<S: Scalar>(exp: &Experiment<S>, out_dir: &Path) -> Result<ExperimentOutcome> {
    let matrix = &exp.matrix;
    let snapshot = serde_json::json!({ "matrix": matrix, "config": exp.config });
    fs::create_dir_all(out_dir.join(CELLS_DIR))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let snapshot_text = serde_json::to_string_pretty(&snapshot)?;
    if config_path.exists() {
        let previous: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config_path)?)?;
        if previous != snapshot {
            return Err(Error::Config(format!(
                "{} belongs to a different experiment; use a fresh output directory",
                out_dir.display()
            )));
        }
    } else {
        write_atomic(&config_path, snapshot_text.as_bytes())?;
    }

    let mut cells = Vec::with_capacity(matrix.cell_count());
    for attribute in 0..matrix.attributes.len() {
        for prefix in 0..matrix.prefixes.len() {
            for variant_slot in 0..matrix.variants.len() {
                cells.push(Cell { attribute, prefix, variant_slot });
            }
        }
    }
    let mut done: BTreeMap<Cell, Vec<ExperimentRecord>> = BTreeMap::new();
    let mut todo = Vec::new();
    for &cell in &cells {
        match load_cell(exp, out_dir, cell) {
            Some(records) => {
                done.insert(cell, records);
            }
            None => todo.push(cell),
        }
    }
    let resumed_cells = done.len();
    if resumed_cells > 0 {
        log::info!("resuming: {resumed_cells} of {} cells already complete", cells.len());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<(Cell, Result<Vec<ExperimentRecord>>)>();
    let fresh = std::thread::scope(|scope| {
        // single consumer: persists each cell as soon as it completes
        let writer = scope.spawn(move || -> Result<Vec<(Cell, Vec<ExperimentRecord>)>> {
            let mut out = Vec::new();
            let mut first_err = None;
            for (cell, result) in rx {
                match result.and_then(|records| {
                    write_cell(out_dir, cell, &matrix.variants, &records)?;
                    Ok(records)
                }) {
                    Ok(records) => out.push((cell, records)),
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            first_err.map_or(Ok(out), Err)
        });
        pool.install(|| {
            todo.par_iter().for_each_with(tx, |tx, &cell| {
                let _ = tx.send((cell, run_cell(exp, cell)));
            })
        });
        writer.join().expect("report writer panicked")
    })?;
    done.extend(fresh);

    let records: Vec<ExperimentRecord> = done.into_values().flatten().collect();
    let report = EvalReport::from_records(matrix, &records, snapshot);
    let mut jsonl = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.push(b'\n');
    }
    write_atomic(&out_dir.join(SAMPLES_FILE), &jsonl)?;
    write_atomic(&out_dir.join(REPORT_JSON), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out_dir.join(REPORT_CSV), report.to_csv()?.as_bytes())?;
    write_atomic(&out_dir.join(REPORT_MD), report.to_markdown()?.as_bytes())?;
    Ok(ExperimentOutcome { report, records, resumed_cells })
}

fn run_cell<S: Scalar>(exp: &Experiment<S>, cell: Cell) -> Result<Vec<ExperimentRecord>> {
    let m = &exp.matrix;
    let target = &exp.targets[cell.attribute];
    let variant = m.variants[cell.variant_slot];
    let prefix = &m.prefixes[cell.prefix];
    let base_cfg = if target.is_bow() { &exp.config.bow } else { &exp.config.discrim };
    (0..m.samples_per_cell)
        .map(|sample_index| {
            let seed = derive_seed(m.base_seed, cell.attribute, cell.prefix, sample_index);
            let cfg = SteeringConfig { seed, objective_sign: target.objective_sign, ..base_cfg.clone() };
            let (sample, candidates) = match variant {
                Variant::B | Variant::BC => {
                    (generate(&exp.lm, prefix, m.length, Some(target), &cfg, variant)?, Vec::new())
                }
                Variant::BR | Variant::BCR => {
                    let ranked = generate_ranked(&exp.lm, prefix, m.length, target, &cfg, variant)?;
                    let candidates = ranked
                        .all
                        .iter()
                        .map(|s| Candidate { seed: s.seed, mean_attr_ll: s.mean_attr_ll, mean_dist: s.mean_dist })
                        .collect();
                    (ranked.best, candidates)
                }
                Variant::WD => {
                    (generate_weighted(&exp.lm, prefix, m.length, target, &exp.config.wd, seed)?, Vec::new())
                }
            };
            let perplexity = text_perplexity(&exp.evaluator, &sample.text)?;
            Ok(ExperimentRecord {
                attribute_index: cell.attribute,
                prefix_index: cell.prefix,
                sample_index,
                prefix: prefix.clone(),
                perplexity,
                candidates,
                sample,
            })
        })
        .collect()
}

fn cell_path(out_dir: &Path, cell: Cell, variants: &[Variant]) -> PathBuf {
    out_dir
        .join(CELLS_DIR)
        .join(format!("a{:03}-p{:03}-{}.jsonl", cell.attribute, cell.prefix, variants[cell.variant_slot]))
}

fn write_cell(out_dir: &Path, cell: Cell, variants: &[Variant], records: &[ExperimentRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(&cell_path(out_dir, cell, variants), &buf)
}

/// A completed cell from a previous run, or `None` when it has to be
/// (re)generated.
fn load_cell<S: Scalar>(exp: &Experiment<S>, out_dir: &Path, cell: Cell) -> Option<Vec<ExperimentRecord>> {
    let path = cell_path(out_dir, cell, &exp.matrix.variants);
    let file = fs::File::open(&path).ok()?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.ok()?;
        match serde_json::from_str::<ExperimentRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}: unreadable record ({e}); regenerating the cell", path.display());
                return None;
            }
        }
    }
    let variant = exp.matrix.variants[cell.variant_slot];
    let complete = records.len() == exp.matrix.samples_per_cell
        && records.iter().enumerate().all(|(i, r)| {
            r.sample_index == i
                && r.attribute_index == cell.attribute
                && r.prefix_index == cell.prefix
                && r.sample.variant == variant
        });
    complete.then_some(records)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
