//! Synthetic data: exact and Gibbs samplers for pairwise models, and planted
//! two-group cohorts written in the ingest formats.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binarize::{check_capacity, BinaryStateSequence, MAX_UNITS};
use crate::error::{Error, Result};
use crate::ingest::{write_atlas, write_manifest, write_matrix, Network, SubjectRecord, TimeSeriesMatrix};
use crate::mem::MemModel;
use crate::rng::SeedPath;

/// I.i.d. draws from the enumerated Boltzmann distribution by inverse CDF.
pub fn exact_sample(model: &MemModel, n_samples: usize, seed: u64) -> Result<BinaryStateSequence> {
    check_capacity(model.n_units())?;
    let p = model.state_distribution();
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in &p {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;
    let last = cdf.len() - 1;
    let mut rng = SeedPath::new(seed).label("exact_sample").rng();
    let codes: Vec<u32> = (0..n_samples)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(last) as u32
        })
        .collect();
    BinaryStateSequence::from_codes(&codes, model.n_units())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One systematic single-site sweep, units in index order.
fn gibbs_sweep(model: &MemModel, x: &mut [u8], rng: &mut crate::rng::Rng) {
    let w = model.w();
    for i in 0..x.len() {
        let field: f64 = model.h()[i] + (0..x.len()).filter(|&j| x[j] == 1).map(|j| w[[i, j]]).sum::<f64>();
        x[i] = u8::from(rng.random::<f64>() < logistic(field));
    }
}

/// Single-site Gibbs chain recording one state every `thin` sweeps after
/// `burn_in` sweeps, started from a uniformly random state.
pub fn gibbs_sample(
    model: &MemModel,
    n_samples: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<BinaryStateSequence> {
    if thin == 0 {
        return Err(Error::Validation("thin must be at least 1".into()));
    }
    let n = model.n_units();
    let mut rng = SeedPath::new(seed).label("gibbs").rng();
    let mut x: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    for _ in 0..burn_in {
        gibbs_sweep(model, &mut x, &mut rng);
    }
    let mut states = Array2::zeros((n_samples, n));
    for t in 0..n_samples {
        for _ in 0..thin {
            gibbs_sweep(model, &mut x, &mut rng);
        }
        for (i, &v) in x.iter().enumerate() {
            states[[t, i]] = v;
        }
    }
    BinaryStateSequence::from_states(states)
}

/// How subject state sequences are drawn from the group model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Independent draws from the enumerated distribution.
    #[default]
    Exact,
    /// A Gibbs chain, `thin` sweeps per timepoint, so consecutive states are
    /// correlated.
    Gibbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub n_subjects_per_group: usize,
    pub n_units: usize,
    pub series_length: usize,
    /// Group B couplings are the base couplings times `1 + group_effect`.
    pub group_effect: f64,
    pub seed: u64,
    pub channels_per_unit: usize,
    /// Standard deviation of the spin couplings of the base model.
    pub coupling_sd: f64,
    pub signal_sd: f64,
    pub sampler: Sampler,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            n_subjects_per_group: 10,
            n_units: 6,
            series_length: 200,
            group_effect: 0.8,
            seed: 0,
            channels_per_unit: 3,
            coupling_sd: 0.3,
            signal_sd: 0.5,
            sampler: Sampler::Exact,
            burn_in: 100,
            thin: 1,
        }
    }
}

impl SyntheticCohortSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_subjects_per_group", self.n_subjects_per_group),
            ("n_units", self.n_units),
            ("series_length", self.series_length),
            ("channels_per_unit", self.channels_per_unit),
            ("thin", self.thin),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.n_units > MAX_UNITS {
            return Err(Error::Validation(format!("n_units {} exceeds {MAX_UNITS}", self.n_units)));
        }
        if self.series_length < 2 {
            return Err(Error::Validation("series_length must be at least 2".into()));
        }
        if self.n_units * self.channels_per_unit < 2 {
            return Err(Error::Validation("cohort needs at least 2 channels".into()));
        }
        if !(self.group_effect.is_finite() && self.group_effect > -1.0) {
            return Err(Error::Validation("group_effect must be finite and above -1".into()));
        }
        if !(self.coupling_sd.is_finite() && self.coupling_sd >= 0.0) || !(self.signal_sd.is_finite() && self.signal_sd > 0.0) {
            return Err(Error::Validation("coupling_sd must be nonnegative and signal_sd positive".into()));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.n_units)
            .flat_map(|u| (0..self.channels_per_unit).map(move |c| format!("u{u}_c{c}")))
            .collect()
    }

    /// Unit `k < 4` feeds canonical network `k`; remaining units are `other`.
    pub fn atlas_entries(&self) -> Vec<(String, Network)> {
        self.channel_names()
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let unit = j / self.channels_per_unit;
                (name, Network::CANONICAL.get(unit).copied().unwrap_or(Network::Other))
            })
            .collect()
    }
}

/// Model with spin couplings `J` scaled by `scale`. In 0/1 coordinates this
/// is `W = 4J` and `h_i = -1/2 sum_j W_ij`, so every unit has mean 1/2.
pub fn spin_symmetric_model(spin_upper: &[f64], n_units: usize, scale: f64) -> Result<MemModel> {
    let w_upper: Vec<f64> = spin_upper.iter().map(|j| 4.0 * scale * j).collect();
    let mut h = vec![0.0; n_units];
    let mut k = 0;
    for i in 0..n_units {
        for j in i + 1..n_units {
            h[i] -= 0.5 * w_upper[k];
            h[j] -= 0.5 * w_upper[k];
            k += 1;
        }
    }
    MemModel::from_upper(h, &w_upper)
}

/// Group A and group B generating models for a cohort.
pub fn cohort_models(spec: &SyntheticCohortSpec) -> Result<(MemModel, MemModel)> {
    spec.validate()?;
    let n = spec.n_units;
    let mut rng = SeedPath::new(spec.seed).label("cohort").label("base_model").rng();
    let dist = Normal::new(0.0, spec.coupling_sd).map_err(|e| Error::Validation(e.to_string()))?;
    let spin: Vec<f64> = (0..n * (n - 1) / 2).map(|_| dist.sample(&mut rng)).collect();
    Ok((spin_symmetric_model(&spin, n, 1.0)?, spin_symmetric_model(&spin, n, 1.0 + spec.group_effect)?))
}

/// Continuous channels from binary unit states: each unit drives
/// `channels_per_unit` channels of `N(+1, sd)` when active and `N(-1, sd)`
/// when inactive, with independent noise per channel.
pub fn continuous_from_states(
    seq: &BinaryStateSequence,
    spec: &SyntheticCohortSpec,
    rng: &mut crate::rng::Rng,
) -> Result<TimeSeriesMatrix> {
    let noise = Normal::new(0.0, spec.signal_sd).map_err(|e| Error::Validation(e.to_string()))?;
    let c = spec.channels_per_unit;
    let mut data = Array2::zeros((seq.len(), seq.n_units() * c));
    for (t, row) in seq.states().rows().into_iter().enumerate() {
        for (u, &x) in row.iter().enumerate() {
            let mean = if x == 1 { 1.0 } else { -1.0 };
            for k in 0..c {
                data[[t, u * c + k]] = mean + noise.sample(rng);
            }
        }
    }
    TimeSeriesMatrix::new(spec.channel_names(), data)
}

/// Ids are `sub-01...`; the first half (group A) has high span scores, the
/// second half (group B, the altered couplings) low ones.
pub fn build_cohort(spec: &SyntheticCohortSpec) -> Result<Vec<SubjectRecord>> {
    let (model_a, model_b) = cohort_models(spec)?;
    let total = 2 * spec.n_subjects_per_group;
    let width = total.to_string().len().max(2);
    let mut records = Vec::with_capacity(total);
    for s in 0..total {
        let group_b = s >= spec.n_subjects_per_group;
        let model = if group_b { &model_b } else { &model_a };
        let id = format!("sub-{:0width$}", s + 1);
        let path = SeedPath::new(spec.seed).label("cohort").label("subject").index(s as u64);
        let state_seed = path.clone().label("states").seed();
        let seq = match spec.sampler {
            Sampler::Exact => exact_sample(model, spec.series_length, state_seed)?,
            Sampler::Gibbs => gibbs_sample(model, spec.series_length, spec.burn_in, spec.thin, state_seed)?,
        };
        let mut rng = path.clone().label("signal").rng();
        let series = continuous_from_states(&seq, spec, &mut rng)?;
        let post = if group_b { rng.random_range(2..=5) } else { rng.random_range(6..=9) };
        let pre = rng.random_range(5..=9);
        records.push(SubjectRecord::new(id.clone(), PathBuf::from("series").join(format!("{id}.csv")), series, Some(pre), post)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortFiles {
    pub manifest: PathBuf,
    pub atlas: PathBuf,
    pub series: Vec<PathBuf>,
}

/// Write `manifest.csv`, `atlas.csv` and `series/<id>.csv` under `dir`.
pub fn write_cohort(dir: impl AsRef<Path>, spec: &SyntheticCohortSpec) -> Result<CohortFiles> {
    let dir = dir.as_ref();
    let records = build_cohort(spec)?;
    let mut rows = Vec::with_capacity(records.len());
    let mut series = Vec::with_capacity(records.len());
    for r in &records {
        let p = dir.join(&r.series_path);
        write_matrix(&p, &r.series)?;
        series.push(p);
        rows.push((r.subject_id.clone(), r.series_path.clone(), r.ssp_pre, r.ssp_post));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    let atlas = dir.join("atlas.csv");
    write_atlas(&atlas, &spec.atlas_entries())?;
    Ok(CohortFiles { manifest, atlas, series })
}
