//! Random-forest classifier with repeated leave-one-out evaluation.
//!
//! Class coding: `true` is the positive class (low working memory). Votes and
//! probabilities always refer to the positive class; exact 0.5 ties resolve to
//! the negative class.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::WmLabel;
use crate::landscape::Source;
use crate::rng::SeedPath;
use crate::stats::{mann_whitney_u, midranks};
use crate::table::FeatureTable;

pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_REPETITIONS: usize = 30;
pub const TUNE_TREES: [usize; 3] = [100, 200, 500];
pub const TUNE_DEPTHS: [Option<usize>; 3] = [Some(2), Some(3), None];
pub const TOP_S_RANGE: std::ops::RangeInclusive<usize> = 2..=10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subject_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    labels: Vec<bool>,
    feature_names: Vec<String>,
    tags: Vec<Source>,
}

impl Dataset {
    pub fn new(
        subject_ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        feature_names: Vec<String>,
        tags: Vec<Source>,
    ) -> Result<Self> {
        let p = feature_names.len();
        if subject_ids.len() != rows.len() || labels.len() != rows.len() {
            return Err(Error::Mismatch(format!(
                "{} subject ids, {} rows, {} labels",
                subject_ids.len(),
                rows.len(),
                labels.len()
            )));
        }
        if tags.len() != p {
            return Err(Error::Mismatch(format!("{} feature names but {} tags", p, tags.len())));
        }
        if p == 0 {
            return Err(Error::Validation("dataset has no features".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Validation(format!("duplicate feature name {dup:?}")));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(Error::Mismatch(format!("row {i} has {} values, expected {p}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} ({}) has a non-finite value", subject_ids[i])));
            }
        }
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Err(Error::DegenerateData("both classes must be present".into()));
        }
        Ok(Self { subject_ids, rows, labels, feature_names, tags })
    }

    /// One row per subject with the columns of each source side by side,
    /// named `<source>.<feature>`. Subjects appear in first-appearance order.
    pub fn from_table(table: &FeatureTable, sources: &[Source]) -> Result<Self> {
        let mut ids: Vec<&str> = Vec::new();
        for r in table.rows() {
            if !ids.contains(&r.subject_id.as_str()) {
                ids.push(&r.subject_id);
            }
        }
        let mut names = Vec::new();
        let mut tags = Vec::new();
        for &s in sources {
            for c in table.columns() {
                names.push(format!("{s}.{c}"));
                tags.push(s);
            }
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in &ids {
            let mut row = Vec::with_capacity(names.len());
            let mut label: Option<WmLabel> = None;
            for &s in sources {
                let r = table
                    .rows()
                    .iter()
                    .find(|r| r.subject_id == *id && r.source == s)
                    .ok_or_else(|| Error::Validation(format!("subject {id} has no {s} features")))?;
                if label.is_some_and(|l| l != r.label) {
                    return Err(Error::Validation(format!("subject {id} has inconsistent labels")));
                }
                label = Some(r.label);
                row.extend_from_slice(&r.values);
            }
            rows.push(row);
            labels.push(label.expect("at least one source").is_positive());
        }
        Self::new(ids.into_iter().map(str::to_string).collect(), rows, labels, names, tags)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn tags(&self) -> &[Source] {
        &self.tags
    }
}

/// Candidate features examined per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeaturesPerSplit {
    Sqrt,
    All,
    Count(usize),
}

impl FeaturesPerSplit {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            FeaturesPerSplit::Sqrt => ((n_features as f64).sqrt().floor() as usize).max(1),
            FeaturesPerSplit::All => n_features,
            FeaturesPerSplit::Count(k) => k.min(n_features),
        }
    }
}

impl fmt::Display for FeaturesPerSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaturesPerSplit::Sqrt => f.write_str("sqrt"),
            FeaturesPerSplit::All => f.write_str("all"),
            FeaturesPerSplit::Count(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for FeaturesPerSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(FeaturesPerSplit::Sqrt),
            "all" => Ok(FeaturesPerSplit::All),
            _ => s
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(FeaturesPerSplit::Count)
                .ok_or_else(|| Error::Validation(format!("features_per_split must be sqrt, all or a positive integer, got {s:?}"))),
        }
    }
}

impl Serialize for FeaturesPerSplit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FeaturesPerSplit::Count(k) => s.serialize_u64(*k as u64),
            other => s.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for FeaturesPerSplit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => FeaturesPerSplit::from_str(&k.to_string()),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub features_per_split: FeaturesPerSplit,
    pub seed: u64,
    pub n_repetitions: usize,
    pub bootstrap: bool,
    /// Choose `n_trees` and `max_depth` from the tuning grid inside each
    /// training fold by out-of-bag accuracy.
    pub tune: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            max_depth: None,
            features_per_split: FeaturesPerSplit::Sqrt,
            seed: 0,
            n_repetitions: DEFAULT_REPETITIONS,
            bootstrap: true,
            tune: false,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Validation("n_trees must be positive".into()));
        }
        if self.n_repetitions == 0 {
            return Err(Error::Validation("n_repetitions must be positive".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Validation("max_depth must be positive".into()));
        }
        if self.features_per_split == FeaturesPerSplit::Count(0) {
            return Err(Error::Validation("features_per_split must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf {
        positive_fraction: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Impurity decrease times node weight, relative to the root weight.
        weighted_decrease: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf_fraction(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { positive_fraction } => return *positive_fraction,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Hard vote for the positive class.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.leaf_fraction(x) > 0.5
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// `(feature, threshold)` of every split in preorder.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if let Node::Split { feature, threshold, left, right, .. } = &self.nodes[i] {
                out.push((*feature, *threshold));
                stack.push(*right);
                stack.push(*left);
            }
        }
        out
    }

    fn add_importance(&self, acc: &mut [f64]) {
        for n in &self.nodes {
            if let Node::Split { feature, weighted_decrease, .. } = n {
                acc[*feature] += weighted_decrease;
            }
        }
    }
}

fn gini(w: f64, w_pos: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let p = w_pos / w;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [bool],
    max_depth: Option<usize>,
    mtry: usize,
    total_weight: f64,
    nodes: Vec<Node>,
}

struct Candidate {
    decrease: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// Best threshold on one feature, or `None` when the feature is constant
    /// within the node.
    fn best_threshold(&self, sample: &[(usize, f64)], feature: usize, w: f64, w_pos: f64) -> Option<(f64, f64)> {
        let mut sorted: Vec<(f64, bool, f64)> =
            sample.iter().map(|&(r, wt)| (self.rows[r][feature], self.labels[r], wt)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let parent = gini(w, w_pos);
        let (mut wl, mut wl_pos) = (0.0, 0.0);
        let mut best: Option<(f64, f64)> = None;
        for k in 0..sorted.len() - 1 {
            let (v, y, wt) = sorted[k];
            wl += wt;
            if y {
                wl_pos += wt;
            }
            let next = sorted[k + 1].0;
            if next == v {
                continue;
            }
            let (wr, wr_pos) = (w - wl, w_pos - wl_pos);
            let child = (wl * gini(wl, wl_pos) + wr * gini(wr, wr_pos)) / w;
            let decrease = parent - child;
            if best.is_none_or(|(d, _)| decrease > d) {
                let mid = v + (next - v) / 2.0;
                let threshold = if mid < next { mid } else { v };
                best = Some((decrease, threshold));
            }
        }
        best
    }

    fn grow(&mut self, sample: Vec<(usize, f64)>, depth: usize, rng: &mut crate::rng::Rng) -> usize {
        let w: f64 = sample.iter().map(|s| s.1).sum();
        let w_pos: f64 = sample.iter().filter(|s| self.labels[s.0]).map(|s| s.1).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { positive_fraction: w_pos / w });
        let pure = w_pos == 0.0 || w_pos == w;
        if pure || self.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let p = self.rows[0].len();
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(rng);
        let mut best: Option<Candidate> = None;
        for (examined, &f) in order.iter().enumerate() {
            if examined >= self.mtry && best.is_some() {
                break;
            }
            if let Some((decrease, threshold)) = self.best_threshold(&sample, f, w, w_pos) {
                let better = match &best {
                    None => true,
                    Some(b) => decrease > b.decrease || (decrease == b.decrease && f < b.feature),
                };
                if better {
                    best = Some(Candidate { decrease, feature: f, threshold });
                }
            }
        }
        let Some(best) = best else {
            return id;
        };
        let (left, right): (Vec<_>, Vec<_>) =
            sample.into_iter().partition(|&(r, _)| self.rows[r][best.feature] <= best.threshold);
        let weighted_decrease = w * best.decrease / self.total_weight;
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
            weighted_decrease,
        };
        id
    }
}

/// Grow one CART tree on weighted rows.
fn grow_tree(
    data: &Dataset,
    sample: Vec<(usize, f64)>,
    max_depth: Option<usize>,
    mtry: usize,
    rng: &mut crate::rng::Rng,
) -> Tree {
    let total_weight = sample.iter().map(|s| s.1).sum();
    let mut g = Grower { rows: &data.rows, labels: &data.labels, max_depth, mtry, total_weight, nodes: Vec::new() };
    g.grow(sample, 0, rng);
    Tree { nodes: g.nodes }
}

/// Row counts of a bootstrap resample of size `n`.
pub fn bootstrap_counts(n: usize, rng: &mut crate::rng::Rng) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    train_rows: Vec<usize>,
    /// Bootstrap counts per tree, aligned with `train_rows`.
    in_bag: Vec<Vec<u32>>,
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Fraction of trees voting positive.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x)).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) > 0.5
    }

    /// Raw importance per feature: summed weighted impurity decrease,
    /// averaged over trees.
    pub fn importances(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_features];
        for t in &self.trees {
            t.add_importance(&mut acc);
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }

    /// Accuracy over training rows using only trees that did not see them.
    /// `None` when no row has an out-of-bag tree.
    pub fn oob_accuracy(&self, data: &Dataset) -> Option<f64> {
        let (mut correct, mut counted) = (0usize, 0usize);
        for (j, &r) in self.train_rows.iter().enumerate() {
            let (mut votes, mut trees) = (0usize, 0usize);
            for (t, bag) in self.trees.iter().zip(&self.in_bag) {
                if bag[j] == 0 {
                    trees += 1;
                    votes += usize::from(t.predict(&data.rows[r]));
                }
            }
            if trees > 0 {
                counted += 1;
                let pred = votes as f64 / trees as f64 > 0.5;
                correct += usize::from(pred == data.labels[r]);
            }
        }
        (counted > 0).then(|| correct as f64 / counted as f64)
    }
}

fn train_on(
    data: &Dataset,
    train_rows: &[usize],
    n_trees: usize,
    max_depth: Option<usize>,
    config: &ForestConfig,
    path: &SeedPath,
) -> Result<Forest> {
    let pos = train_rows.iter().filter(|&&r| data.labels[r]).count();
    if pos == 0 || pos == train_rows.len() {
        return Err(Error::DegenerateData("training rows contain a single class".into()));
    }
    if pos < 2 || train_rows.len() - pos < 2 {
        log::warn!("training set has fewer than 2 rows in one class");
    }
    let mtry = config.features_per_split.resolve(data.n_features());
    let built: Vec<(Tree, Vec<u32>)> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = path.clone().label("tree").index(t as u64).rng();
            let counts = if config.bootstrap {
                bootstrap_counts(train_rows.len(), &mut rng)
            } else {
                vec![1; train_rows.len()]
            };
            let sample: Vec<(usize, f64)> = train_rows
                .iter()
                .zip(&counts)
                .filter(|(_, &c)| c > 0)
                .map(|(&r, &c)| (r, c as f64))
                .collect();
            (grow_tree(data, sample, max_depth, mtry, &mut rng), counts)
        })
        .collect();
    let (trees, in_bag) = built.into_iter().unzip();
    Ok(Forest { trees, n_features: data.n_features(), train_rows: train_rows.to_vec(), in_bag })
}

/// Forest on every row of `data`, seeded from `config.seed`.
pub fn train_forest(data: &Dataset, config: &ForestConfig) -> Result<Forest> {
    config.validate()?;
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    train_on(data, &rows, config.n_trees, config.max_depth, config, &SeedPath::new(config.seed).label("forest"))
}

/// Train one fold, picking from the tuning grid by out-of-bag accuracy when
/// enabled (ties go to the earlier grid entry).
fn train_fold(data: &Dataset, rows: &[usize], config: &ForestConfig, path: SeedPath) -> Result<Forest> {
    if !config.tune {
        return train_on(data, rows, config.n_trees, config.max_depth, config, &path);
    }
    let mut best: Option<(f64, Forest)> = None;
    let mut g = 0u64;
    for &n_trees in &TUNE_TREES {
        for &depth in &TUNE_DEPTHS {
            let forest = train_on(data, rows, n_trees, depth, config, &path.clone().label("grid").index(g))?;
            g += 1;
            let score = forest.oob_accuracy(data).unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, forest));
            }
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Area under the ROC curve by the trapezoid rule over distinct thresholds.
pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count() as f64;
    let n_neg = truth.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if truth[idx[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        let (tpr, fpr) = (tp / n_pos, fp / n_neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// AUC as the normalized rank-sum statistic of the positive scores.
pub fn rank_auc(truth: &[bool], scores: &[f64]) -> Result<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count() as f64;
    let n_neg = truth.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let (ranks, _) = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    Ok((r_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Accuracy and positive-class F1 from hard predictions, AUC from scores.
pub fn metrics(predictions: &[(bool, bool, f64)]) -> Result<Metrics> {
    let truth: Vec<bool> = predictions.iter().map(|p| p.0).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.2).collect();
    let auc = roc_auc(&truth, &scores)?;
    let n = predictions.len() as f64;
    let correct = predictions.iter().filter(|p| p.0 == p.1).count() as f64;
    let tp = predictions.iter().filter(|p| p.0 && p.1).count() as f64;
    let fp = predictions.iter().filter(|p| !p.0 && p.1).count() as f64;
    let fn_ = predictions.iter().filter(|p| p.0 && !p.1).count() as f64;
    let f1 = if tp + fp == 0.0 {
        log::warn!("no positive predictions; F1 reported as 0");
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    Ok(Metrics { accuracy: correct / n, f1, auc })
}

/// Features sorted by descending score, ties by index.
pub fn rank_features(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Ranked `(feature name, score)` pairs for a fitted forest.
pub fn gini_importance(forest: &Forest, data: &Dataset) -> Vec<(String, f64)> {
    let scores = forest.importances();
    rank_features(&scores).into_iter().map(|i| (data.feature_names[i].clone(), scores[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopS {
    pub s: usize,
    pub high_order_fraction: f64,
    pub low_order_fraction: f64,
    /// Standard error of the high-order fraction over repetitions.
    pub standard_error: f64,
    /// Mann-Whitney p comparing the per-repetition high and low fractions.
    pub p_value: f64,
}

/// Share of high-order features among the top `S` of each ranking.
pub fn top_s_contribution(
    rankings: &[Vec<usize>],
    tags: &[Source],
    s_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<TopS>> {
    if rankings.is_empty() {
        return Err(Error::Validation("no importance rankings".into()));
    }
    let mut out = Vec::new();
    for s in s_range {
        if s == 0 || s > tags.len() {
            return Err(Error::Range(format!("S = {s} with {} features", tags.len())));
        }
        let high: Vec<f64> = rankings
            .iter()
            .map(|r| r[..s].iter().filter(|&&f| tags[f].is_high_order()).count() as f64 / s as f64)
            .collect();
        let low: Vec<f64> = high.iter().map(|h| 1.0 - h).collect();
        let n = high.len() as f64;
        let mean = high.iter().sum::<f64>() / n;
        let se = if high.len() > 1 {
            (high.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        out.push(TopS {
            s,
            high_order_fraction: mean,
            low_order_fraction: 1.0 - mean,
            standard_error: se,
            p_value: mann_whitney_u(&high, &low)?.p_value,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub feature_names: Vec<String>,
    pub per_repetition: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub mean_f1: f64,
    pub mean_auc: f64,
    /// Per repetition: features ranked by fold-averaged Gini importance.
    pub importances: Vec<Vec<RankedFeature>>,
    /// Present when the features mix high-order and low-order sources.
    pub top_s_proportions: Option<Vec<TopS>>,
}

impl ClassifierReport {
    /// Ranked feature indices per repetition.
    pub fn rankings(&self) -> Vec<Vec<usize>> {
        self.importances
            .iter()
            .map(|rep| {
                rep.iter()
                    .map(|r| self.feature_names.iter().position(|n| *n == r.feature).expect("known feature"))
                    .collect()
            })
            .collect()
    }
}

/// Repeated leave-one-out cross-validation.
pub fn loocv(data: &Dataset, config: &ForestConfig) -> Result<ClassifierReport> {
    config.validate()?;
    let n = data.n_rows();
    if n < 3 {
        return Err(Error::Validation(format!("LOOCV needs at least 3 rows, got {n}")));
    }
    let p = data.n_features();
    let mut per_repetition = Vec::with_capacity(config.n_repetitions);
    let mut importances = Vec::with_capacity(config.n_repetitions);
    let mut rankings = Vec::with_capacity(config.n_repetitions);
    for rep in 0..config.n_repetitions {
        let folds: Vec<(bool, f64, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|held| {
                let rows: Vec<usize> = (0..n).filter(|&r| r != held).collect();
                let path = SeedPath::new(config.seed).label("rep").index(rep as u64).label("fold").index(held as u64);
                let forest = train_fold(data, &rows, config, path)?;
                let prob = forest.predict_proba(&data.rows[held]);
                Ok((prob > 0.5, prob, forest.importances()))
            })
            .collect::<Result<_>>()?;
        let preds: Vec<(bool, bool, f64)> =
            folds.iter().zip(&data.labels).map(|((pred, prob, _), &t)| (t, *pred, *prob)).collect();
        per_repetition.push(metrics(&preds)?);
        let mut mean_imp = vec![0.0; p];
        for (_, _, imp) in &folds {
            for (m, v) in mean_imp.iter_mut().zip(imp) {
                *m += v;
            }
        }
        mean_imp.iter_mut().for_each(|v| *v /= n as f64);
        let ranking = rank_features(&mean_imp);
        importances.push(
            ranking
                .iter()
                .map(|&i| RankedFeature { feature: data.feature_names[i].clone(), score: mean_imp[i] })
                .collect(),
        );
        rankings.push(ranking);
    }
    let reps = per_repetition.len() as f64;
    let mixed = data.tags.iter().any(|t| t.is_high_order()) && data.tags.iter().any(|t| !t.is_high_order());
    let top_s_proportions = if mixed {
        let hi = (*TOP_S_RANGE.end()).min(p);
        Some(top_s_contribution(&rankings, &data.tags, *TOP_S_RANGE.start()..=hi)?)
    } else {
        None
    };
    Ok(ClassifierReport {
        feature_names: data.feature_names.clone(),
        mean_accuracy: per_repetition.iter().map(|m| m.accuracy).sum::<f64>() / reps,
        mean_f1: per_repetition.iter().map(|m| m.f1).sum::<f64>() / reps,
        mean_auc: per_repetition.iter().map(|m| m.auc).sum::<f64>() / reps,
        per_repetition,
        importances,
        top_s_proportions,
    })
}
