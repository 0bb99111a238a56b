//! End-to-end orchestration: per-subject cluster, binarize, fit and landscape
//! stages with file intermediates, then cohort statistics and classification.
//!
//! Layout under the output directory:
//!
//! ```text
//! subjects/<id>/<source>/   per-subject intermediates, one directory per source
//! features.csv              cohort feature table
//! stats.csv                 group tests
//! classify/                 classifier reports and plot data
//! status.csv                stage ledger
//! outputs.csv               every emitted file with its SHA-256
//! ```
//!
//! Each per-subject stage writes `<stage>.json` holding the content key of its
//! inputs and its status. A stage whose key is unchanged and whose outputs are
//! present is not recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::{binarize_mean, select_network_units, BinaryStateSequence, StateSidecar};
use crate::cluster::{default_k_range, select_k_elbow, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::forest::{loocv, ClassifierReport, Dataset, ForestConfig};
use crate::ingest::{load_manifest, load_matrix, write_table, AtlasMapping, Layout, SubjectRecord};
use crate::landscape::{energy_series, extract_features, Source, DEFAULT_FRACTION, DEFAULT_WINDOW};
use crate::mem::{fit, FitConfig, MemModel, MemModelFile};
use crate::report::{content_key, csv_text, write_csv, write_file};
use crate::rng::SeedPath;
use crate::stats::{compare_groups, compare_pooled, GroupComparison};
use crate::table::{FeatureRow, FeatureTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_min: usize,
    /// Defaults to `min(12, R - 1)`.
    pub k_max: Option<usize>,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_min: 2, k_max: None, restarts: DEFAULT_RESTARTS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinarizeConfig {
    /// Drop constant units and continue instead of failing the subject.
    pub drop_degenerate_units: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub fraction: f64,
    pub window: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self { fraction: DEFAULT_FRACTION, window: DEFAULT_WINDOW }
    }
}

/// Which group tests the statistics stage reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestScope {
    /// Extreme values and transition magnitudes pooled over subjects, plus the
    /// per-subject transition count. Timepoints of one subject are not
    /// independent, so these p-values run well below nominal under the null.
    Pooled,
    /// One test per feature column on per-subject summaries.
    Subject,
    #[default]
    Both,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub scope: TestScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; the rayon default when absent.
    pub threads: Option<usize>,
    pub cluster: ClusterConfig,
    pub binarize: BinarizeConfig,
    pub fit: FitConfig,
    pub landscape: LandscapeConfig,
    pub stats: StatsConfig,
    pub forest: ForestConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            atlas: None,
            out: PathBuf::from("energyscape-out"),
            seed: 0,
            threads: None,
            cluster: ClusterConfig::default(),
            binarize: BinarizeConfig::default(),
            fit: FitConfig::default(),
            landscape: LandscapeConfig::default(),
            stats: StatsConfig::default(),
            forest: ForestConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.manifest.as_mut() {
            resolve(m);
        }
        if let Some(a) = cfg.atlas.as_mut() {
            resolve(a);
        }
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let manifest = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Validation("config field `manifest` is required".into()))?;
        if !manifest.is_file() {
            return Err(Error::MissingFile(manifest.clone()));
        }
        if let Some(a) = &self.atlas {
            if !a.is_file() {
                return Err(Error::MissingFile(a.clone()));
            }
        }
        if !(self.landscape.fraction > 0.0 && self.landscape.fraction <= 0.5) {
            return Err(Error::Validation(format!(
                "landscape.fraction {} outside (0, 0.5]",
                self.landscape.fraction
            )));
        }
        if self.landscape.window.is_multiple_of(2) {
            return Err(Error::Validation(format!("landscape.window {} must be odd and positive", self.landscape.window)));
        }
        if self.cluster.k_min < 2 || self.cluster.restarts == 0 {
            return Err(Error::Validation("cluster.k_min must be >= 2 and cluster.restarts >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be positive".into()));
        }
        if !(self.fit.tol > 0.0 && self.fit.learning_rate > 0.0) {
            return Err(Error::Validation("fit.tol and fit.learning_rate must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.fit.acceptance_threshold) {
            return Err(Error::Validation("fit.acceptance_threshold must lie in [-1, 1]".into()));
        }
        self.forest.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Cluster,
    Binarize,
    Fit,
    Landscape,
    Stats,
    Classify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Cluster => "cluster",
            Stage::Binarize => "binarize",
            Stage::Fit => "fit",
            Stage::Landscape => "landscape",
            Stage::Stats => "stats",
            Stage::Classify => "classify",
        }
    }

    const PER_SUBJECT: [Stage; 4] = [Stage::Cluster, Stage::Binarize, Stage::Fit, Stage::Landscape];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Cluster, Stage::Binarize, Stage::Fit, Stage::Landscape, Stage::Stats, Stage::Classify]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    /// Fit stopped before the gradient tolerance but passed acceptance.
    Nonconverged,
    Rejected,
    Skipped,
    Failed,
}

impl Status {
    fn usable(self) -> bool {
        matches!(self, Status::Ok | Status::Nonconverged)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Nonconverged => "nonconverged",
            Status::Rejected => "rejected",
            Status::Skipped => "skipped",
            Status::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    status: Status,
    detail: String,
}

/// Process exit code for an error: 2 validation, 3 every fit rejected,
/// 4 missing intermediate, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::AllFitsRejected(_) => 3,
        Error::MissingIntermediate(_) => 4,
        Error::Io { .. } | Error::NonConvergence { .. } => 1,
        _ => 2,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn f(v: f64) -> String {
    crate::report::fmt_f64(v)
}

/// One group test in the statistics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub source: Source,
    pub metric: String,
    /// `pooled` or `subject`.
    pub scope: &'static str,
    pub comparison: GroupComparison,
}

pub const STATS_HEADER: [&str; 10] =
    ["source", "metric", "scope", "u", "p", "method", "n_low", "n_high", "median_low", "median_high"];

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let c = &r.comparison;
            vec![
                r.source.to_string(),
                r.metric.clone(),
                r.scope.to_string(),
                f(c.test.u_statistic),
                f(c.test.p_value),
                c.test.method.as_str().to_string(),
                c.n_low.to_string(),
                c.n_high.to_string(),
                f(c.median_low),
                f(c.median_high),
            ]
        })
        .collect();
    csv_text(&STATS_HEADER, &body)
}

/// Per-subject extreme values and transition magnitudes backing pooled tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremeSamples {
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub transitions: Vec<f64>,
}

/// Group tests over a feature table. `extremes` supplies pooled samples per
/// `(subject, source)` and is required for the pooled scope.
pub fn group_tests(
    table: &FeatureTable,
    extremes: &BTreeMap<(String, Source), ExtremeSamples>,
    scope: TestScope,
) -> Result<Vec<StatsRow>> {
    let mut rows = Vec::new();
    for source in table.sources() {
        let sub = table.for_source(source);
        let labels: Vec<_> = sub.rows().iter().map(|r| r.label).collect();
        if !labels.iter().any(|l| l.is_positive()) || labels.iter().all(|l| l.is_positive()) {
            log::warn!("{source}: one label group is empty; no tests");
            continue;
        }
        if matches!(scope, TestScope::Pooled | TestScope::Both) {
            type Pick = fn(&ExtremeSamples) -> &Vec<f64>;
            let picks: [(&str, Pick); 3] = [
                ("top_values", |e| &e.top),
                ("bottom_values", |e| &e.bottom),
                ("transition_magnitudes", |e| &e.transitions),
            ];
            for (metric, pick) in picks {
                let samples = sub
                    .rows()
                    .iter()
                    .map(|r| {
                        extremes
                            .get(&(r.subject_id.clone(), source))
                            .map(|e| (r.label, pick(e).clone()))
                            .ok_or_else(|| {
                                Error::MissingIntermediate(PathBuf::from(format!(
                                    "subjects/{}/{source}/extremes.csv",
                                    r.subject_id
                                )))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                match compare_pooled(metric, &samples) {
                    Ok(c) => rows.push(StatsRow { source, metric: metric.into(), scope: "pooled", comparison: c }),
                    Err(Error::EmptyGroup(g)) => log::warn!("{source} {metric}: no pooled values in group {g}"),
                    Err(e) => return Err(e),
                }
            }
            if scope == TestScope::Pooled {
                let c = compare_groups(&sub, "n_transitions")?;
                rows.push(StatsRow { source, metric: "n_transitions".into(), scope: "subject", comparison: c });
            }
        }
        if matches!(scope, TestScope::Subject | TestScope::Both) {
            for col in sub.columns() {
                let c = compare_groups(&sub, col)?;
                rows.push(StatsRow { source, metric: col.clone(), scope: "subject", comparison: c });
            }
        }
    }
    Ok(rows)
}

/// A named feature set for classification.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    pub sources: Vec<Source>,
}

/// Each source alone, then high-order combined with each network present.
pub fn feature_sets(available: &[Source]) -> Vec<FeatureSet> {
    let mut sets: Vec<FeatureSet> =
        available.iter().map(|&s| FeatureSet { name: s.to_string(), sources: vec![s] }).collect();
    if available.contains(&Source::HighOrder) {
        for &s in available.iter().filter(|s| !s.is_high_order()) {
            sets.push(FeatureSet { name: format!("high_order+{s}"), sources: vec![Source::HighOrder, s] });
        }
    }
    sets
}

/// Subjects that have every source of the set.
pub fn restrict_to_complete(table: &FeatureTable, sources: &[Source]) -> FeatureTable {
    let mut out = FeatureTable::new(table.columns().to_vec());
    for r in table.rows() {
        let complete = sources
            .iter()
            .all(|&s| table.rows().iter().any(|o| o.subject_id == r.subject_id && o.source == s));
        if complete && sources.contains(&r.source) {
            out.push(r.clone()).expect("same columns");
        }
    }
    out
}

/// Forest seed for one feature set, derived from the global seed.
pub fn set_seed(global: u64, forest_seed: u64, set: &str) -> u64 {
    SeedPath::new(global).label("classify").index(forest_seed).label(set).seed()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutcome {
    pub set: FeatureSet,
    pub n_subjects: usize,
    pub report: std::result::Result<ClassifierReport, String>,
}

/// Derived seed for a subject's clustering.
fn cluster_seed(global: u64, subject: &str) -> u64 {
    SeedPath::new(global).label("cluster").label(subject).seed()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub n_subjects: usize,
    pub accepted_fits: usize,
    pub rejected_fits: usize,
    pub stats: Vec<StatsRow>,
    pub classify: Vec<ClassifyOutcome>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    records: Vec<SubjectRecord>,
    atlas: Option<(Vec<u8>, Vec<AtlasMapping>)>,
    series_bytes: Vec<Vec<u8>>,
    pool: rayon::ThreadPool,
}

type SignalLoader<'a> = dyn FnOnce() -> Result<(Vec<String>, Array2<f64>)> + 'a;

enum Outcome {
    Done(StageRecord),
    Cached,
}

impl Pipeline {
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let records = load_manifest(cfg.manifest.as_ref().expect("validated"))?;
        if records.is_empty() {
            return Err(Error::Validation("manifest lists no subjects".into()));
        }
        let series_bytes = records.iter().map(|r| read_bytes(&r.series_path)).collect::<Result<Vec<_>>>()?;
        let atlas = match &cfg.atlas {
            None => None,
            Some(path) => {
                let bytes = read_bytes(path)?;
                let mut maps = Vec::with_capacity(records.len());
                for r in &records {
                    let m = crate::ingest::load_atlas(path, &r.series).map_err(|e| match e {
                        Error::Validation(msg) => {
                            Error::Validation(format!("{} for subject {}: {msg}", path.display(), r.subject_id))
                        }
                        other => other,
                    })?;
                    m.validate_for_low_order()
                        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                    maps.push(m);
                }
                Some((bytes, maps))
            }
        };
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
        Ok(Self { cfg, records, atlas, series_bytes, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn sources(&self) -> Vec<Source> {
        if self.atlas.is_some() {
            Source::all().to_vec()
        } else {
            vec![Source::HighOrder]
        }
    }

    fn unit_dir(&self, subject: &str, source: Source) -> PathBuf {
        self.cfg.out.join("subjects").join(subject).join(source.to_string())
    }

    fn record_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{stage}.json"))
    }

    fn read_record(dir: &Path, stage: Stage) -> Result<Option<StageRecord>> {
        let p = Self::record_path(dir, stage);
        if !p.is_file() {
            return Ok(None);
        }
        let bytes = read_bytes(&p)?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| Error::Parse { path: p, line: e.line(), message: e.to_string() })
    }

    /// The upstream record, or `MissingIntermediate` when it was never produced.
    fn upstream(dir: &Path, stage: Stage) -> Result<StageRecord> {
        Self::read_record(dir, stage)?.ok_or_else(|| Error::MissingIntermediate(Self::record_path(dir, stage)))
    }

    fn require(path: PathBuf) -> Result<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingIntermediate(path))
        }
    }

    /// Run `compute` unless a record with the same key and all `outputs` exist.
    fn cached_stage(
        dir: &Path,
        stage: Stage,
        key: String,
        outputs: &[&str],
        compute: impl FnOnce() -> Result<(Status, String)>,
    ) -> Result<Outcome> {
        if let Some(prev) = Self::read_record(dir, stage)? {
            let present = !prev.status.usable() || outputs.iter().all(|o| dir.join(o).is_file());
            if prev.key == key && present {
                return Ok(Outcome::Cached);
            }
        }
        let (status, detail) = compute()?;
        let rec = StageRecord { key, status, detail };
        write_file(&Self::record_path(dir, stage), &json(&rec))?;
        Ok(Outcome::Done(rec))
    }

    fn skip_record(dir: &Path, stage: Stage, key: String, detail: String) -> Result<Outcome> {
        let rec = StageRecord { key, status: Status::Skipped, detail };
        write_file(&Self::record_path(dir, stage), &json(&rec))?;
        Ok(Outcome::Done(rec))
    }

    fn cluster_subject(&self, idx: usize) -> Result<Outcome> {
        let rec = &self.records[idx];
        let dir = self.unit_dir(&rec.subject_id, Source::HighOrder);
        let seed = cluster_seed(self.cfg.seed, &rec.subject_id);
        let cfg_bytes = json(&self.cfg.cluster);
        let key = content_key(&[b"cluster", &self.series_bytes[idx], &cfg_bytes, &seed.to_le_bytes()]);
        let outputs = ["cluster_wcss.csv", "cluster_assignment.csv", "cluster_series.csv"];
        Self::cached_stage(&dir, Stage::Cluster, key, &outputs, || {
            let r = rec.series.n_channels();
            let default_hi = *default_k_range(r).end();
            let hi = self.cfg.cluster.k_max.unwrap_or(default_hi).min(r.saturating_sub(1));
            let sel = match select_k_elbow(&rec.series, self.cfg.cluster.k_min..=hi, seed, self.cfg.cluster.restarts) {
                Ok(s) => s,
                Err(e @ Error::Io { .. }) => return Err(e),
                Err(e) => return Ok((Status::Failed, e.to_string())),
            };
            let wcss: Vec<Vec<String>> =
                sel.ks.iter().zip(&sel.wcss_curve).map(|(k, w)| vec![k.to_string(), f(*w)]).collect();
            write_csv(&dir.join(outputs[0]), &["k", "wcss"], &wcss)?;
            let assign: Vec<Vec<String>> = rec
                .series
                .channel_names()
                .iter()
                .zip(&sel.model.assignment)
                .map(|(c, a)| vec![c.clone(), a.to_string()])
                .collect();
            write_csv(&dir.join(outputs[1]), &["channel_name", "cluster_index"], &assign)?;
            let names: Vec<String> = (0..sel.chosen_k).map(|k| format!("cluster_{k}")).collect();
            write_table(dir.join(outputs[2]), &names, &sel.model.cluster_series)?;
            Ok((Status::Ok, format!("k={}", sel.chosen_k)))
        })
    }

    fn binarize_unit(&self, idx: usize, source: Source) -> Result<Outcome> {
        let rec = &self.records[idx];
        let dir = self.unit_dir(&rec.subject_id, source);
        let cfg_bytes = json(&self.cfg.binarize);
        let outputs = ["states.csv", "states.json"];
        let (key, signals): (String, Box<SignalLoader<'_>>) = match source {
            Source::HighOrder => {
                let up = Self::upstream(&dir, Stage::Cluster)?;
                if !up.status.usable() {
                    let key = content_key(&[b"binarize", up.key.as_bytes(), &cfg_bytes]);
                    return Self::skip_record(&dir, Stage::Binarize, key, "clustering failed".into());
                }
                let path = Self::require(dir.join("cluster_series.csv"))?;
                let bytes = read_bytes(&path)?;
                let key = content_key(&[b"binarize", &bytes, &cfg_bytes]);
                (
                    key,
                    Box::new(move || {
                        let m = load_matrix(&path, Layout::TimeRows)?;
                        Ok((m.channel_names().to_vec(), m.data().clone()))
                    }),
                )
            }
            Source::Network(network) => {
                let (atlas_bytes, maps) = self.atlas.as_ref().expect("network sources need an atlas");
                let key = content_key(&[
                    b"binarize",
                    &self.series_bytes[idx],
                    atlas_bytes,
                    network.as_str().as_bytes(),
                    &cfg_bytes,
                ]);
                let atlas = &maps[idx];
                (
                    key,
                    Box::new(move || {
                        let names: Vec<String> = atlas.members(network).iter().map(|s| s.to_string()).collect();
                        Ok((names, select_network_units(&rec.series, atlas, network.as_str())?))
                    }),
                )
            }
        };
        Self::cached_stage(&dir, Stage::Binarize, key, &outputs, || {
            let (mut names, mut data) = signals()?;
            let seq = loop {
                match binarize_mean(&data) {
                    Ok(seq) => break seq,
                    Err(Error::DegenerateColumn { column }) if self.cfg.binarize.drop_degenerate_units && data.ncols() > 1 => {
                        log::warn!("{} {source}: dropping constant unit {}", rec.subject_id, names[column]);
                        names.remove(column);
                        data = data.select(ndarray::Axis(1), &(0..data.ncols()).filter(|&j| j != column).collect::<Vec<_>>());
                    }
                    Err(e @ Error::Io { .. }) => return Err(e),
                    Err(e) => return Ok((Status::Failed, e.to_string())),
                }
            };
            let rows: Vec<Vec<String>> =
                seq.codes().iter().enumerate().map(|(t, c)| vec![t.to_string(), c.to_string()]).collect();
            write_csv(&dir.join(outputs[0]), &["t", "code"], &rows)?;
            write_file(&dir.join(outputs[1]), &json(&StateSidecar::new(names, seq.len())))?;
            Ok((Status::Ok, format!("units={}", seq.n_units())))
        })
    }

    fn load_states(dir: &Path) -> Result<(Vec<u8>, BinaryStateSequence)> {
        let states = Self::require(dir.join("states.csv"))?;
        let sidecar = Self::require(dir.join("states.json"))?;
        let bytes = read_bytes(&states)?;
        let side: StateSidecar = serde_json::from_slice(&read_bytes(&sidecar)?)
            .map_err(|e| Error::Parse { path: sidecar.clone(), line: e.line(), message: e.to_string() })?;
        let m = load_matrix(&states, Layout::TimeRows)?;
        let codes: Vec<u32> = m.channel(1).iter().map(|&c| c as u32).collect();
        let seq = BinaryStateSequence::from_codes(&codes, side.unit_names.len())?;
        let mut all = bytes;
        all.extend_from_slice(&read_bytes(&sidecar)?);
        Ok((all, seq))
    }

    fn fit_unit(&self, idx: usize, source: Source) -> Result<Outcome> {
        let rec = &self.records[idx];
        let dir = self.unit_dir(&rec.subject_id, source);
        let up = Self::upstream(&dir, Stage::Binarize)?;
        let cfg_bytes = json(&self.cfg.fit);
        if !up.status.usable() {
            let key = content_key(&[b"fit", up.key.as_bytes(), &cfg_bytes]);
            return Self::skip_record(&dir, Stage::Fit, key, "no binary states".into());
        }
        let (bytes, seq) = Self::load_states(&dir)?;
        let key = content_key(&[b"fit", &bytes, &cfg_bytes]);
        Self::cached_stage(&dir, Stage::Fit, key, &["model.json"], || {
            let (model, converged) = match fit(&seq, &self.cfg.fit) {
                Ok(m) => (m, true),
                Err(Error::NonConvergence { partial, .. }) => (*partial, false),
                Err(e @ Error::Io { .. }) => return Err(e),
                Err(e) => return Ok((Status::Failed, e.to_string())),
            };
            write_file(&dir.join("model.json"), &json(&model.to_file()))?;
            let d = model.diagnostics().expect("fitted model has diagnostics");
            let detail = format!("moment_correlation={} iterations={}", d.moment_correlation, d.iterations);
            let status = match (model.is_accepted(), converged) {
                (false, _) => Status::Rejected,
                (true, true) => Status::Ok,
                (true, false) => Status::Nonconverged,
            };
            Ok((status, detail))
        })
    }

    fn landscape_unit(&self, idx: usize, source: Source) -> Result<Outcome> {
        let rec = &self.records[idx];
        let dir = self.unit_dir(&rec.subject_id, source);
        let up = Self::upstream(&dir, Stage::Fit)?;
        let cfg_bytes = json(&self.cfg.landscape);
        let label = rec.wm_label.as_str().as_bytes();
        if !up.status.usable() {
            let key = content_key(&[b"landscape", up.key.as_bytes(), &cfg_bytes]);
            return Self::skip_record(&dir, Stage::Landscape, key, format!("fit {}", up.status.as_str()));
        }
        let (states_bytes, seq) = Self::load_states(&dir)?;
        let model_path = Self::require(dir.join("model.json"))?;
        let model_bytes = read_bytes(&model_path)?;
        let key = content_key(&[b"landscape", &states_bytes, &model_bytes, &cfg_bytes, label]);
        let outputs = ["features.csv", "energy.csv", "extremes.csv", "transitions.csv"];
        Self::cached_stage(&dir, Stage::Landscape, key, &outputs, || {
            let file: MemModelFile = serde_json::from_slice(&model_bytes)
                .map_err(|e| Error::Parse { path: model_path.clone(), line: e.line(), message: e.to_string() })?;
            let model = MemModel::from_file(file)?;
            let series = energy_series(&model, &seq, source)?;
            let feats = match extract_features(&series, self.cfg.landscape.fraction, self.cfg.landscape.window) {
                Ok(x) => x,
                Err(e @ Error::Io { .. }) => return Err(e),
                Err(e) => return Ok((Status::Failed, e.to_string())),
            };
            let mut table = FeatureTable::landscape();
            table.push(FeatureRow {
                subject_id: rec.subject_id.clone(),
                source,
                label: rec.wm_label,
                values: feats.feature_vector.to_vec(),
            })?;
            table.write(dir.join(outputs[0]))?;
            let energy: Vec<Vec<String>> =
                series.values.iter().enumerate().map(|(t, e)| vec![t.to_string(), f(*e)]).collect();
            write_csv(&dir.join(outputs[1]), &["t", "energy"], &energy)?;
            let ext: Vec<Vec<String>> = feats
                .top
                .iter()
                .zip(&feats.bottom)
                .enumerate()
                .map(|(i, (a, b))| vec![i.to_string(), f(*a), f(*b)])
                .collect();
            write_csv(&dir.join(outputs[2]), &["rank", "top", "bottom"], &ext)?;
            let tr: Vec<Vec<String>> =
                feats.transition_magnitudes.iter().enumerate().map(|(i, m)| vec![i.to_string(), f(*m)]).collect();
            write_csv(&dir.join(outputs[3]), &["index", "magnitude"], &tr)?;
            let env_path = dir.join("envelope.csv");
            match &feats.envelopes {
                Some(env) => {
                    let rows: Vec<Vec<String>> = (0..series.len())
                        .map(|t| vec![t.to_string(), f(env.lower[t]), f(env.upper[t]), f(series.values[t])])
                        .collect();
                    write_csv(&env_path, &["t", "lower", "upper", "energy"], &rows)?;
                }
                None => {
                    if env_path.exists() {
                        fs::remove_file(&env_path).map_err(|e| Error::io(&env_path, e))?;
                    }
                }
            }
            Ok((Status::Ok, format!("transitions={}", feats.n_transitions)))
        })
    }

    fn run_unit_stage(&self, stage: Stage, idx: usize, source: Source) -> Result<Outcome> {
        match stage {
            Stage::Cluster => self.cluster_subject(idx),
            Stage::Binarize => self.binarize_unit(idx, source),
            Stage::Fit => self.fit_unit(idx, source),
            Stage::Landscape => self.landscape_unit(idx, source),
            _ => unreachable!("cohort stages are not per subject"),
        }
    }

    fn units(&self, stage: Stage) -> Vec<(usize, Source)> {
        let sources = if stage == Stage::Cluster { vec![Source::HighOrder] } else { self.sources() };
        (0..self.records.len()).flat_map(|i| sources.iter().map(move |&s| (i, s))).collect()
    }

    /// Run the given per-subject stages in order for every subject and source,
    /// subjects in parallel.
    fn run_per_subject(&self, stages: &[Stage]) -> Result<()> {
        let results: Vec<Result<()>> = self.pool.install(|| {
            (0..self.records.len())
                .into_par_iter()
                .map(|i| {
                    for &stage in stages {
                        let sources = if stage == Stage::Cluster { vec![Source::HighOrder] } else { self.sources() };
                        for s in sources {
                            if let Outcome::Done(r) = self.run_unit_stage(stage, i, s)? {
                                log::info!("{} {s} {stage}: {} {}", self.records[i].subject_id, r.status.as_str(), r.detail);
                            }
                        }
                    }
                    Ok(())
                })
                .collect()
        });
        results.into_iter().collect()
    }

    fn features_path(&self) -> PathBuf {
        self.cfg.out.join("features.csv")
    }

    fn fit_counts(&self) -> Result<(usize, usize)> {
        let (mut ok, mut rejected) = (0, 0);
        for (i, s) in self.units(Stage::Fit) {
            if let Some(r) = Self::read_record(&self.unit_dir(&self.records[i].subject_id, s), Stage::Fit)? {
                match r.status {
                    Status::Ok | Status::Nonconverged => ok += 1,
                    Status::Rejected => rejected += 1,
                    _ => {}
                }
            }
        }
        Ok((ok, rejected))
    }

    /// Gather per-subject feature rows into the cohort table.
    fn assemble_features(&self) -> Result<FeatureTable> {
        let mut table = FeatureTable::landscape();
        for (i, s) in self.units(Stage::Landscape) {
            let dir = self.unit_dir(&self.records[i].subject_id, s);
            let Some(r) = Self::read_record(&dir, Stage::Landscape)? else {
                return Err(Error::MissingIntermediate(Self::record_path(&dir, Stage::Landscape)));
            };
            if r.status.usable() {
                let part = FeatureTable::read(Self::require(dir.join("features.csv"))?)?;
                for row in part.rows() {
                    table.push(row.clone())?;
                }
            }
        }
        table.write(self.features_path())?;
        Ok(table)
    }

    fn read_features(&self) -> Result<FeatureTable> {
        FeatureTable::read(Self::require(self.features_path())?)
    }

    fn load_extremes(&self, table: &FeatureTable) -> Result<BTreeMap<(String, Source), ExtremeSamples>> {
        let mut out = BTreeMap::new();
        for row in table.rows() {
            let dir = self.cfg.out.join("subjects").join(&row.subject_id).join(row.source.to_string());
            let ext = read_numeric(&Self::require(dir.join("extremes.csv"))?, 3)?;
            let tr = read_numeric(&Self::require(dir.join("transitions.csv"))?, 2)?;
            out.insert(
                (row.subject_id.clone(), row.source),
                ExtremeSamples {
                    top: ext.iter().map(|r| r[1]).collect(),
                    bottom: ext.iter().map(|r| r[2]).collect(),
                    transitions: tr.iter().map(|r| r[1]).collect(),
                },
            );
        }
        Ok(out)
    }

    pub fn run_stats(&self) -> Result<Vec<StatsRow>> {
        let table = self.read_features()?;
        let extremes = if self.cfg.stats.scope == TestScope::Subject { BTreeMap::new() } else { self.load_extremes(&table)? };
        let rows = group_tests(&table, &extremes, self.cfg.stats.scope)?;
        write_file(&self.cfg.out.join("stats.csv"), stats_csv(&rows).as_bytes())?;
        Ok(rows)
    }

    pub fn run_classify(&self) -> Result<Vec<ClassifyOutcome>> {
        let path = Self::require(self.features_path())?;
        let table = FeatureTable::read(&path)?;
        let dir = self.cfg.out.join("classify");
        let forest = &self.cfg.forest;
        let mut outcomes = Vec::new();
        for set in feature_sets(&table.sources()) {
            let sub = restrict_to_complete(&table, &set.sources);
            let cfg = ForestConfig { seed: set_seed(self.cfg.seed, forest.seed, &set.name), ..forest.clone() };
            let n_subjects = sub.for_source(set.sources[0]).rows().len();
            let report = self
                .pool
                .install(|| Dataset::from_table(&sub, &set.sources).and_then(|d| loocv(&d, &cfg)))
                .map_err(|e| {
                    log::warn!("classifier for {} failed: {e}", set.name);
                    e.to_string()
                });
            outcomes.push(ClassifyOutcome { set, n_subjects, report });
        }
        write_classify(&dir, &outcomes)?;
        Ok(outcomes)
    }

    fn status_ledger(&self) -> Result<()> {
        let mut rows = Vec::new();
        for (i, s) in self.units(Stage::Binarize) {
            let id = &self.records[i].subject_id;
            let dir = self.unit_dir(id, s);
            for stage in Stage::PER_SUBJECT {
                if stage == Stage::Cluster && !s.is_high_order() {
                    continue;
                }
                if let Some(r) = Self::read_record(&dir, stage)? {
                    rows.push(vec![id.clone(), s.to_string(), stage.to_string(), r.status.as_str().into(), r.detail]);
                }
            }
        }
        write_csv(&self.cfg.out.join("status.csv"), &["subject_id", "source", "stage", "status", "detail"], &rows)
    }

    /// Rewrite `status.csv` and `outputs.csv`.
    pub fn finalize(&self) -> Result<()> {
        self.status_ledger()?;
        write_output_manifest(&self.cfg.out)
    }

    fn check_fits(&self) -> Result<(usize, usize)> {
        let (ok, rejected) = self.fit_counts()?;
        if ok == 0 {
            return Err(Error::AllFitsRejected(format!("{rejected} fits rejected, none accepted")));
        }
        Ok((ok, rejected))
    }

    /// Execute one stage against existing intermediates.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let result = match stage {
            Stage::Stats => self.run_stats().map(|_| ()),
            Stage::Classify => self.run_classify().map(|_| ()),
            s => self.run_per_subject(&[s]).and_then(|_| match s {
                Stage::Fit => self.check_fits().map(|_| ()),
                Stage::Landscape => self.assemble_features().map(|_| ()),
                _ => Ok(()),
            }),
        };
        self.finalize_after(result)
    }

    fn finalize_after<T>(&self, result: Result<T>) -> Result<T> {
        match result {
            Ok(v) => {
                self.finalize()?;
                Ok(v)
            }
            Err(e @ (Error::AllFitsRejected(_) | Error::MissingIntermediate(_))) => {
                // flush what exists so the ledger explains the failure
                if self.cfg.out.is_dir() {
                    let _ = self.finalize();
                }
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    pub fn run_all(&self) -> Result<RunSummary> {
        let result = (|| {
            self.run_per_subject(&Stage::PER_SUBJECT)?;
            let (accepted_fits, rejected_fits) = self.check_fits()?;
            self.assemble_features()?;
            let stats = self.run_stats()?;
            let classify = self.run_classify()?;
            Ok(RunSummary { n_subjects: self.records.len(), accepted_fits, rejected_fits, stats, classify })
        })();
        self.finalize_after(result)
    }
}

/// Numeric rows of a headed CSV with exactly `width` columns.
fn read_numeric(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(Error::Parse { path: path.into(), line: i + 1, message: format!("expected {width} cells") });
            }
            cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { path: path.into(), line: i + 1, message: format!("bad number {c:?}") }))
                .collect()
        })
        .collect()
}

fn write_classify(dir: &Path, outcomes: &[ClassifyOutcome]) -> Result<()> {
    let mut summary = Vec::new();
    let mut metrics = Vec::new();
    let mut importances = Vec::new();
    let mut top_s = Vec::new();
    for o in outcomes {
        let name = &o.set.name;
        match &o.report {
            Err(msg) => summary.push(vec![name.clone(), o.n_subjects.to_string(), String::new(), String::new(), String::new(), String::new(), msg.clone()]),
            Ok(r) => {
                summary.push(vec![
                    name.clone(),
                    o.n_subjects.to_string(),
                    r.feature_names.len().to_string(),
                    f(r.mean_accuracy),
                    f(r.mean_f1),
                    f(r.mean_auc),
                    String::new(),
                ]);
                for (rep, m) in r.per_repetition.iter().enumerate() {
                    metrics.push(vec![name.clone(), rep.to_string(), f(m.accuracy), f(m.f1), f(m.auc)]);
                }
                for (rep, ranked) in r.importances.iter().enumerate() {
                    for (rank, fi) in ranked.iter().enumerate() {
                        importances.push(vec![name.clone(), rep.to_string(), (rank + 1).to_string(), fi.feature.clone(), f(fi.score)]);
                    }
                }
                for t in r.top_s_proportions.iter().flatten() {
                    top_s.push(vec![
                        name.clone(),
                        t.s.to_string(),
                        f(t.high_order_fraction),
                        f(t.low_order_fraction),
                        f(t.standard_error),
                        f(t.p_value),
                    ]);
                }
                write_file(&dir.join(format!("{name}.json")), &json(r))?;
            }
        }
    }
    write_csv(&dir.join("summary.csv"), &["set", "n_subjects", "n_features", "mean_accuracy", "mean_f1", "mean_auc", "error"], &summary)?;
    write_csv(&dir.join("metrics.csv"), &["set", "repetition", "accuracy", "f1", "auc"], &metrics)?;
    write_csv(&dir.join("importances.csv"), &["set", "repetition", "rank", "feature", "score"], &importances)?;
    write_csv(&dir.join("top_s.csv"), &["set", "s", "high_order_fraction", "low_order_fraction", "standard_error", "p_value"], &top_s)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub const OUTPUT_MANIFEST: &str = "outputs.csv";

/// `outputs.csv`: every file under `out` except itself, sorted, with size and
/// SHA-256.
pub fn write_output_manifest(out: &Path) -> Result<()> {
    use sha2::{Digest, Sha256};
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.retain(|p| p != Path::new(OUTPUT_MANIFEST));
    files.sort();
    let mut rows = Vec::with_capacity(files.len());
    for rel in files {
        let bytes = read_bytes(&out.join(&rel))?;
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        rows.push(vec![rel, bytes.len().to_string(), hex::encode(Sha256::digest(&bytes))]);
    }
    write_csv(&out.join(OUTPUT_MANIFEST), &["path", "bytes", "sha256"], &rows)
}

/// Load, validate and run everything.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<RunSummary> {
    Pipeline::open(cfg)?.run_all()
}

/// Load, validate and run a single stage.
pub fn run_stage(stage: Stage, cfg: PipelineConfig) -> Result<()> {
    Pipeline::open(cfg)?.run_stage(stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::WmLabel;
    use crate::synth::{write_cohort, SyntheticCohortSpec};

    fn small_cohort(dir: &Path) -> PipelineConfig {
        let spec = SyntheticCohortSpec { n_subjects_per_group: 3, series_length: 80, ..SyntheticCohortSpec::default() };
        let files = write_cohort(dir.join("data"), &spec).unwrap();
        PipelineConfig {
            manifest: Some(files.manifest),
            atlas: Some(files.atlas),
            out: dir.join("out"),
            seed: 3,
            cluster: ClusterConfig { restarts: 3, ..ClusterConfig::default() },
            forest: ForestConfig { n_trees: 10, n_repetitions: 2, ..ForestConfig::default() },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in ["cluster", "binarize", "fit", "landscape", "stats", "classify"] {
            assert_eq!(s.parse::<Stage>().unwrap().as_str(), s);
        }
        assert!("plot".parse::<Stage>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingFile("x".into())), 2);
        assert_eq!(exit_code(&Error::AllFitsRejected("x".into())), 3);
        assert_eq!(exit_code(&Error::MissingIntermediate("x".into())), 4);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig { seed: 9, atlas: Some("a.csv".into()), ..PipelineConfig::default() };
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<PipelineConfig>("sed = 1").is_err());
    }

    #[test]
    fn feature_set_layout() {
        let sets = feature_sets(&Source::all());
        assert_eq!(sets.len(), 9);
        assert_eq!(sets[5].name, "high_order+DMN");
        assert_eq!(feature_sets(&[Source::HighOrder]).len(), 1);
    }

    #[test]
    fn fit_stage_needs_binarize_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::open(small_cohort(dir.path())).unwrap();
        assert!(matches!(p.run_stage(Stage::Fit), Err(Error::MissingIntermediate(_))));
        assert!(matches!(p.run_stage(Stage::Stats), Err(Error::MissingIntermediate(_))));
    }

    #[test]
    fn stagewise_run_matches_stats_module() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cohort(dir.path());
        let p = Pipeline::open(cfg.clone()).unwrap();
        for s in [Stage::Cluster, Stage::Binarize, Stage::Fit, Stage::Landscape] {
            p.run_stage(s).unwrap();
        }
        let table = FeatureTable::read(cfg.out.join("features.csv")).unwrap();
        assert_eq!(table.sources(), Source::all().to_vec());
        let first = &p.records()[0].subject_id;
        assert!(cfg.out.join("subjects").join(first).join("DMN").join("features.csv").is_file());
        let rows = p.run_stats().unwrap();
        let direct = compare_groups(&table.for_source(Source::HighOrder), "n_transitions").unwrap();
        let from_stage = rows
            .iter()
            .find(|r| r.source == Source::HighOrder && r.metric == "n_transitions")
            .unwrap();
        assert_eq!(from_stage.comparison, direct);
        let text = fs::read_to_string(cfg.out.join("stats.csv")).unwrap();
        assert_eq!(text, stats_csv(&rows));
    }

    #[test]
    fn group_tests_subject_scope() {
        let mut t = FeatureTable::new(vec!["a".into()]);
        for i in 0..6 {
            let label = if i < 3 { WmLabel::Low } else { WmLabel::High };
            t.push(FeatureRow { subject_id: format!("s{i}"), source: Source::HighOrder, label, values: vec![i as f64] }).unwrap();
        }
        let rows = group_tests(&t, &BTreeMap::new(), TestScope::Subject).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].comparison.test.p_value - 0.1).abs() < 1e-15);
        assert!(matches!(group_tests(&t, &BTreeMap::new(), TestScope::Pooled), Err(Error::MissingIntermediate(_))));
    }

    #[test]
    fn missing_manifest_entry_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cohort(dir.path());
        fs::remove_file(dir.path().join("data/series/sub-02.csv")).unwrap();
        let err = Pipeline::open(cfg).err().unwrap();
        assert_eq!(exit_code(&err), 2);
    }
}
