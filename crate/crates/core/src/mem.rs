//! Pairwise maximum-entropy (Ising) model over binary unit states.
//!
//! The model assigns every state `x` the energy
//! `E(x) = -sum_{i<j} W_ij x_i x_j - sum_i h_i x_i` and the Boltzmann
//! probability `p(x) = exp(-E(x)) / Z`. All expectations are exact sums over
//! the `2^N` states, so `N` is capped at [`crate::binarize::MAX_UNITS`].
//!
//! Fitting maximizes the mean log-likelihood
//! `L = sum_i h_i <x_i>_data + sum_{i<j} W_ij <x_i x_j>_data - log Z`,
//! a concave function whose gradient is the gap between empirical and model
//! moments.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binarize::{check_capacity, BinaryStateSequence};
use crate::error::{Error, Result};

/// First- and second-order moments. `pair` is symmetric with the means on
/// its diagonal (`x_i^2 = x_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub pair: Array2<f64>,
}

impl Moments {
    pub fn n_units(&self) -> usize {
        self.mean.len()
    }

    /// Upper-triangle pair moments, row-major over `i < j`.
    pub fn pair_upper(&self) -> Vec<f64> {
        upper_triangle(&self.pair)
    }

    /// Means followed by upper-triangle pair moments.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend(self.pair_upper());
        v
    }
}

pub(crate) fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(m[[i, j]]);
        }
    }
    out
}

fn symmetric_from_upper(n: usize, upper: &[f64], diag: &[f64]) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    let mut k = 0;
    for i in 0..n {
        m[[i, i]] = diag.get(i).copied().unwrap_or(0.0);
        for j in i + 1..n {
            m[[i, j]] = upper[k];
            m[[j, i]] = upper[k];
            k += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Moments the fit targeted (after any clamping of degenerate values).
    pub empirical_mean: Vec<f64>,
    pub empirical_corr: Vec<f64>,
    pub model_mean: Vec<f64>,
    pub model_corr: Vec<f64>,
    pub moment_correlation: f64,
    pub max_moment_gap: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub accepted: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemModel {
    n_units: usize,
    h: Vec<f64>,
    w: Array2<f64>,
    log_partition: f64,
    fit: Option<FitDiagnostics>,
}

impl MemModel {
    /// `w` must be symmetric with a zero diagonal.
    pub fn new(h: Vec<f64>, w: Array2<f64>) -> Result<Self> {
        let n = h.len();
        check_capacity(n)?;
        if w.dim() != (n, n) {
            return Err(Error::Mismatch(format!("coupling matrix {:?} for {n} units", w.dim())));
        }
        for i in 0..n {
            if w[[i, i]] != 0.0 {
                return Err(Error::Validation(format!("coupling diagonal W[{i},{i}] is nonzero")));
            }
            for j in i + 1..n {
                if w[[i, j]] != w[[j, i]] {
                    return Err(Error::Validation(format!("coupling matrix asymmetric at ({i},{j})")));
                }
            }
        }
        if h.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite model parameter".into()));
        }
        let mut model = Self { n_units: n, h, w, log_partition: 0.0, fit: None };
        model.log_partition = log_sum_exp_neg(&model.all_energies());
        Ok(model)
    }

    /// Build from biases and the row-major upper triangle of `W`.
    pub fn from_upper(h: Vec<f64>, w_upper: &[f64]) -> Result<Self> {
        let n = h.len();
        if w_upper.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::Mismatch(format!(
                "{} upper-triangle couplings for {n} units",
                w_upper.len()
            )));
        }
        let w = symmetric_from_upper(n, w_upper, &[]);
        Self::new(h, w)
    }

    /// All-zero parameters: the uniform distribution.
    pub fn zeros(n_units: usize) -> Result<Self> {
        Self::new(vec![0.0; n_units], Array2::zeros((n_units, n_units)))
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_states(&self) -> usize {
        1 << self.n_units
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn w_upper(&self) -> Vec<f64> {
        upper_triangle(&self.w)
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.fit.as_ref()
    }

    /// Whether the model may feed feature extraction: either it was built
    /// directly from parameters, or its fit passed the acceptance criterion.
    pub fn is_accepted(&self) -> bool {
        self.fit.as_ref().is_none_or(|d| d.accepted)
    }

    /// Parameters as one vector: `h` followed by the upper triangle of `W`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.h.clone();
        p.extend(self.w_upper());
        p
    }

    pub fn from_params(n_units: usize, params: &[f64]) -> Result<Self> {
        if params.len() != n_params(n_units) {
            return Err(Error::Mismatch(format!(
                "{} parameters for {n_units} units",
                params.len()
            )));
        }
        Self::from_upper(params[..n_units].to_vec(), &params[n_units..])
    }

    pub fn energy(&self, code: u32) -> Result<f64> {
        if code as u64 >= 1u64 << self.n_units {
            return Err(Error::Range(format!(
                "state code {code} out of range for {} units",
                self.n_units
            )));
        }
        Ok(self.energy_unchecked(code))
    }

    fn energy_unchecked(&self, code: u32) -> f64 {
        let mut e = 0.0;
        for i in 0..self.n_units {
            if code >> i & 1 == 0 {
                continue;
            }
            e -= self.h[i];
            for j in i + 1..self.n_units {
                if code >> j & 1 == 1 {
                    e -= self.w[[i, j]];
                }
            }
        }
        e
    }

    /// Energies of every state, indexed by code.
    pub fn all_energies(&self) -> Vec<f64> {
        let n_states = self.n_states();
        let mut e = vec![0.0; n_states];
        for code in 1..n_states {
            let i = code.trailing_zeros() as usize;
            let rest = code & (code - 1);
            let mut v = e[rest] - self.h[i];
            let mut bits = rest;
            while bits != 0 {
                let j = bits.trailing_zeros() as usize;
                v -= self.w[[i, j]];
                bits &= bits - 1;
            }
            e[code] = v;
        }
        e
    }

    /// Boltzmann probabilities of every state, indexed by code.
    pub fn state_distribution(&self) -> Vec<f64> {
        let e = self.all_energies();
        let log_z = log_sum_exp_neg(&e);
        e.iter().map(|v| (-v - log_z).exp()).collect()
    }

    /// Exact model expectations by enumeration.
    pub fn model_moments(&self) -> Moments {
        moments_from_distribution(self.n_units, &self.state_distribution())
    }

    /// Mean log-likelihood of data summarised by `target` moments.
    pub fn log_likelihood(&self, target: &Moments) -> f64 {
        let mut l = -self.log_partition;
        for i in 0..self.n_units {
            l += self.h[i] * target.mean[i];
            for j in i + 1..self.n_units {
                l += self.w[[i, j]] * target.pair[[i, j]];
            }
        }
        l
    }

    pub fn to_file(&self) -> MemModelFile {
        MemModelFile {
            n_units: self.n_units,
            h: self.h.clone(),
            w_upper: self.w_upper(),
            log_partition: self.log_partition,
            diagnostics: self.fit.clone(),
        }
    }

    pub fn from_file(file: MemModelFile) -> Result<Self> {
        if file.h.len() != file.n_units {
            return Err(Error::Mismatch("bias vector length differs from n_units".into()));
        }
        let mut model = Self::from_upper(file.h, &file.w_upper)?;
        model.fit = file.diagnostics;
        Ok(model)
    }
}

/// Serialized form of a model. Field order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemModelFile {
    pub n_units: usize,
    pub h: Vec<f64>,
    pub w_upper: Vec<f64>,
    pub log_partition: f64,
    pub diagnostics: Option<FitDiagnostics>,
}

pub fn n_params(n_units: usize) -> usize {
    n_units + n_units * n_units.saturating_sub(1) / 2
}

/// `log sum_k exp(-e_k)` with max-subtraction.
fn log_sum_exp_neg(energies: &[f64]) -> f64 {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = energies.iter().map(|e| (min - e).exp()).sum();
    s.ln() - min
}

fn moments_from_distribution(n: usize, p: &[f64]) -> Moments {
    let mut mean = vec![0.0; n];
    let mut pair = Array2::zeros((n, n));
    let mut bits_buf = Vec::with_capacity(n);
    for (code, &pk) in p.iter().enumerate() {
        if code == 0 {
            continue;
        }
        bits_buf.clear();
        let mut bits = code;
        while bits != 0 {
            bits_buf.push(bits.trailing_zeros() as usize);
            bits &= bits - 1;
        }
        for (a, &i) in bits_buf.iter().enumerate() {
            mean[i] += pk;
            for &j in &bits_buf[a + 1..] {
                pair[[i, j]] += pk;
            }
        }
    }
    for i in 0..n {
        pair[[i, i]] = mean[i];
        for j in i + 1..n {
            pair[[j, i]] = pair[[i, j]];
        }
    }
    Moments { mean, pair }
}

/// `<x_i>` and `<x_i x_j>` averaged over timepoints.
pub fn empirical_moments(seq: &BinaryStateSequence) -> Moments {
    let n = seq.n_units();
    let t = seq.len() as f64;
    let states = seq.states();
    let mut mean = vec![0.0; n];
    let mut pair = Array2::<f64>::zeros((n, n));
    for row in states.rows() {
        for i in 0..n {
            if row[i] == 0 {
                continue;
            }
            mean[i] += 1.0;
            for j in i + 1..n {
                if row[j] == 1 {
                    pair[[i, j]] += 1.0;
                }
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    for i in 0..n {
        pair[[i, i]] = mean[i];
        for j in i + 1..n {
            pair[[i, j]] /= t;
            pair[[j, i]] = pair[[i, j]];
        }
    }
    Moments { mean, pair }
}

/// Pearson correlation; degenerate (zero-variance) inputs give 1 when the
/// vectors coincide within `tol` and 0 otherwise.
pub fn pearson(a: &[f64], b: &[f64], tol: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        let same = a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
        return if same { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Stop once every gradient component is at most this large.
    pub tol: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Pull degenerate empirical moments into the interior instead of failing.
    pub clamp_degenerate: bool,
    /// Fits with a moment correlation above this are accepted.
    pub acceptance_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 50_000,
            learning_rate: 0.1,
            clamp_degenerate: true,
            acceptance_threshold: 0.8,
        }
    }
}

/// Clamp means to `[1/(2T), 1 - 1/(2T)]` and pair moments to the interior of
/// their Frechet bounds by the same margin. Returns whether anything moved.
fn clamp_moments(m: &mut Moments, n_samples: usize) -> bool {
    let eps = 1.0 / (2.0 * n_samples as f64);
    let n = m.n_units();
    let mut moved = false;
    for i in 0..n {
        let c = m.mean[i].clamp(eps, 1.0 - eps);
        if c != m.mean[i] {
            log::warn!(
                "unit {i} has degenerate mean activation {}; clamped to {c}",
                m.mean[i]
            );
            m.mean[i] = c;
            moved = true;
        }
        m.pair[[i, i]] = m.mean[i];
    }
    for i in 0..n {
        for j in i + 1..n {
            let lo = (m.mean[i] + m.mean[j] - 1.0).max(0.0) + eps;
            let hi = m.mean[i].min(m.mean[j]) - eps;
            let v = m.pair[[i, j]];
            let c = if lo <= hi { v.clamp(lo, hi) } else { 0.5 * (lo + hi) };
            if c != v {
                log::warn!("pair ({i},{j}) moment {v} on the boundary; clamped to {c}");
                m.pair[[i, j]] = c;
                m.pair[[j, i]] = c;
                moved = true;
            }
        }
    }
    moved
}

/// Fit to the empirical moments of a state sequence.
pub fn fit(seq: &BinaryStateSequence, config: &FitConfig) -> Result<MemModel> {
    if seq.len() < 2 {
        return Err(Error::Validation(format!("fit needs T >= 2, got {}", seq.len())));
    }
    let mut target = empirical_moments(seq);
    let mut clamped = false;
    if config.clamp_degenerate {
        clamped = clamp_moments(&mut target, seq.len());
    } else if let Some((unit, &mean)) =
        target.mean.iter().enumerate().find(|(_, &m)| m == 0.0 || m == 1.0)
    {
        return Err(Error::DegenerateMoment { unit, mean });
    }
    fit_moments_inner(&target, config, clamped)
}

/// Fit directly to a set of target moments (e.g. exact moments of a known model).
pub fn fit_moments(target: &Moments, config: &FitConfig) -> Result<MemModel> {
    fit_moments_inner(target, config, false)
}

fn gradient(target: &Moments, model: &Moments) -> Vec<f64> {
    let n = target.n_units();
    let mut g = Vec::with_capacity(n_params(n));
    for i in 0..n {
        g.push(target.mean[i] - model.mean[i]);
    }
    for i in 0..n {
        for j in i + 1..n {
            g.push(target.pair[[i, j]] - model.pair[[i, j]]);
        }
    }
    g
}

/// Analytic gradient of the mean log-likelihood in parameter order.
pub fn log_likelihood_gradient(model: &MemModel, target: &Moments) -> Vec<f64> {
    gradient(target, &model.model_moments())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn fit_moments_inner(target: &Moments, config: &FitConfig, clamped: bool) -> Result<MemModel> {
    let n = target.n_units();
    check_capacity(n)?;
    if n == 0 {
        return Err(Error::Validation("cannot fit a model with zero units".into()));
    }
    let mut model = MemModel::zeros(n)?;
    let mut moments = model.model_moments();
    let mut grad = gradient(target, &moments);
    let mut ll = model.log_likelihood(target);
    let mut lr = config.learning_rate;
    let mut iterations = 0;

    // Nesterov-accelerated ascent with backtracking: a step from the
    // extrapolated point is kept only if it does not lower the likelihood;
    // otherwise momentum is dropped and, if that also fails, the step halves.
    let mut params = model.params();
    let mut prev = params.clone();
    let mut momentum_k = 0usize;
    while max_abs(&grad) > config.tol && iterations < config.max_iterations {
        iterations += 1;
        let beta = momentum_k as f64 / (momentum_k as f64 + 3.0);
        let look: Vec<f64> = params
            .iter()
            .zip(&prev)
            .map(|(p, q)| p + beta * (p - q))
            .collect();
        let look_grad = if momentum_k == 0 {
            grad.clone()
        } else {
            log_likelihood_gradient(&MemModel::from_params(n, &look)?, target)
        };
        let candidate: Vec<f64> = look.iter().zip(&look_grad).map(|(p, g)| p + lr * g).collect();
        let cand_model = MemModel::from_params(n, &candidate)?;
        let cand_ll = cand_model.log_likelihood(target);
        // differences below rounding noise of `ll` count as non-decreasing
        let slack = 8.0 * f64::EPSILON * ll.abs().max(1.0);
        if cand_ll >= ll - slack {
            debug_assert!(cand_ll >= ll - slack, "log-likelihood decreased on an accepted step");
            prev = std::mem::replace(&mut params, candidate);
            model = cand_model;
            moments = model.model_moments();
            grad = gradient(target, &moments);
            ll = cand_ll;
            momentum_k += 1;
        } else if momentum_k > 0 {
            momentum_k = 0;
            prev = params.clone();
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }

    let max_gap = max_abs(&grad);
    let converged = max_gap <= config.tol;
    let empirical = target.concatenated();
    let predicted = moments.concatenated();
    let moment_correlation = pearson(&predicted, &empirical, config.tol.max(1e-12));
    model.fit = Some(FitDiagnostics {
        empirical_mean: target.mean.clone(),
        empirical_corr: target.pair_upper(),
        model_mean: moments.mean.clone(),
        model_corr: moments.pair_upper(),
        moment_correlation,
        max_moment_gap: max_gap,
        log_likelihood: ll,
        iterations,
        converged,
        accepted: moment_correlation > config.acceptance_threshold,
        clamped,
    });
    if converged {
        Ok(model)
    } else {
        Err(Error::NonConvergence {
            iterations,
            max_gradient: max_gap,
            partial: Box::new(model),
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;
    use ndarray::array;
    use rand::Rng;

    fn random_model(n: usize, seed: u64, scale: f64) -> MemModel {
        let mut rng = SeedPath::new(seed).label("mem-test").rng();
        let p: Vec<f64> = (0..n_params(n)).map(|_| rng.random_range(-scale..scale)).collect();
        MemModel::from_params(n, &p).unwrap()
    }

    /// Energy evaluated term by term, independent of `all_energies`.
    fn direct_energy(m: &MemModel, x: &[u8]) -> f64 {
        let n = m.n_units();
        let mut e = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                e -= m.w()[[i, j]] * (x[i] * x[j]) as f64;
            }
            e -= m.h()[i] * x[i] as f64;
        }
        e
    }

    #[test]
    fn energy_examples() {
        let m = MemModel::from_upper(vec![0.5, -0.2], &[0.3]).unwrap();
        assert_eq!(m.energy(0).unwrap(), 0.0);
        assert_eq!(m.energy(1).unwrap(), -0.5);
        assert_eq!(m.energy(2).unwrap(), 0.2);
        assert!((m.energy(3).unwrap() - (-0.6)).abs() < 1e-15);
        assert!(matches!(m.energy(4), Err(Error::Range(_))));
    }

    #[test]
    fn enumerated_energies_match_direct_evaluation() {
        let m = random_model(6, 1, 1.5);
        let all = m.all_energies();
        for code in 0..64u32 {
            let x = crate::binarize::decode_state(code, 6);
            assert!((all[code as usize] - direct_energy(&m, &x)).abs() < 1e-12);
            assert!((m.energy(code).unwrap() - all[code as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_couplings_rejected() {
        assert!(MemModel::new(vec![0.0, 0.0], array![[0.0, 1.0], [0.5, 0.0]]).is_err());
        assert!(MemModel::new(vec![0.0, 0.0], array![[1.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(matches!(MemModel::zeros(21), Err(Error::Capacity { .. })));
    }

    #[test]
    fn uniform_and_single_unit_distributions() {
        let p = MemModel::zeros(4).unwrap().state_distribution();
        assert!(p.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let m = MemModel::from_upper(vec![3f64.ln()], &[]).unwrap();
        let p = m.state_distribution();
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn boltzmann_consistency() {
        let m = random_model(7, 2, 2.0);
        let p = m.state_distribution();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let e = m.all_energies();
        for (pk, ek) in p.iter().zip(&e) {
            assert!((pk.ln() + m.log_partition() + ek).abs() < 1e-9);
        }
        let argmax = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let argmin = (0..e.len()).min_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
        assert_eq!(argmax, argmin);
    }

    #[test]
    fn overflow_safe_distribution() {
        let m = MemModel::from_upper(vec![800.0, 800.0], &[900.0]).unwrap();
        let p = m.state_distribution();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_examples() {
        let m = MemModel::zeros(3).unwrap().model_moments();
        assert!(m.mean.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(m.pair_upper().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // states 00 and 11 have weights 1 and e^50; the other two weight 1 each
        let strong = MemModel::from_upper(vec![0.0, 0.0], &[50.0]).unwrap();
        let mm = strong.model_moments();
        let big = 50f64.exp();
        assert!((mm.pair[[0, 1]] - big / (big + 3.0)).abs() < 1e-15);
    }

    fn brute_moments(seq: &BinaryStateSequence) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (t, n) = seq.states().dim();
        let mut mean = vec![0.0; n];
        let mut pair = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..t {
                    s += (seq.states()[[r, i]] * seq.states()[[r, j]]) as f64;
                }
                pair[i][j] = s / t as f64;
            }
            mean[i] = pair[i][i];
        }
        (mean, pair)
    }

    #[test]
    fn empirical_moment_examples() {
        let zeros = BinaryStateSequence::from_codes(&[0, 0, 0], 3).unwrap();
        let m = empirical_moments(&zeros);
        assert!(m.mean.iter().chain(m.pair.iter()).all(|&v| v == 0.0));
        let ones = BinaryStateSequence::from_codes(&[7, 7], 3).unwrap();
        let m = empirical_moments(&ones);
        assert!(m.mean.iter().chain(m.pair.iter()).all(|&v| v == 1.0));

        let mut rng = SeedPath::new(3).rng();
        let codes: Vec<u32> = (0..50).map(|_| rng.random_range(0..64)).collect();
        let seq = BinaryStateSequence::from_codes(&codes, 6).unwrap();
        let m = empirical_moments(&seq);
        let (bm, bp) = brute_moments(&seq);
        for i in 0..6 {
            assert!((m.mean[i] - bm[i]).abs() < 1e-15);
            for j in 0..6 {
                assert!((m.pair[[i, j]] - bp[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let target = random_model(5, 100 + seed, 1.0).model_moments();
            let m = random_model(5, 200 + seed, 1.0);
            let g = log_likelihood_gradient(&m, &target);
            let p = m.params();
            let step = 1e-5;
            for k in 0..p.len() {
                let mut up = p.clone();
                let mut dn = p.clone();
                up[k] += step;
                dn[k] -= step;
                let lu = MemModel::from_params(5, &up).unwrap().log_likelihood(&target);
                let ld = MemModel::from_params(5, &dn).unwrap().log_likelihood(&target);
                let fd = (lu - ld) / (2.0 * step);
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-3), "k={k} fd={fd} g={}", g[k]);
            }
        }
    }

    #[test]
    fn independent_units_fit_closed_form() {
        let mut rng = SeedPath::new(5).rng();
        let probs = [0.3, 0.5, 0.65, 0.42];
        let codes: Vec<u32> = (0..4000)
            .map(|_| {
                probs
                    .iter()
                    .enumerate()
                    .fold(0u32, |c, (i, &p)| if rng.random::<f64>() < p { c | 1 << i } else { c })
            })
            .collect();
        let seq = BinaryStateSequence::from_codes(&codes, 4).unwrap();
        // Replace pair moments with products of means so the exact solution has W = 0.
        let mut target = empirical_moments(&seq);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    target.pair[[i, j]] = target.mean[i] * target.mean[j];
                }
            }
        }
        let model = fit_moments(&target, &FitConfig::default()).unwrap();
        for i in 0..4 {
            let m = target.mean[i];
            assert!((model.h()[i] - (m / (1.0 - m)).ln()).abs() < 1e-3);
        }
        assert!(model.w_upper().iter().all(|w| w.abs() < 1e-3));
        let d = model.diagnostics().unwrap();
        assert!(d.converged && d.accepted);
        assert!(d.max_moment_gap <= 1e-6);
    }

    #[test]
    fn fit_recovers_known_model_from_exact_moments() {
        let truth = random_model(5, 9, 1.0);
        let config = FitConfig { tol: 1e-10, ..FitConfig::default() };
        let model = fit_moments(&truth.model_moments(), &config).unwrap();
        let err = model
            .params()
            .iter()
            .zip(truth.params())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-4, "parameter error {err}");
        assert!(model.diagnostics().unwrap().moment_correlation > 0.999);
    }

    #[test]
    fn degenerate_unit_clamped_or_rejected() {
        let seq = BinaryStateSequence::from_codes(&[0, 1, 0, 1, 0, 1, 1, 0], 2).unwrap();
        let strict = FitConfig { clamp_degenerate: false, ..FitConfig::default() };
        assert!(matches!(fit(&seq, &strict), Err(Error::DegenerateMoment { unit: 1, .. })));
        let model = match fit(&seq, &FitConfig::default()) {
            Ok(m) => m,
            Err(Error::NonConvergence { partial, .. }) => *partial,
            Err(e) => panic!("{e}"),
        };
        let d = model.diagnostics().unwrap();
        assert!(d.clamped);
        assert!((d.empirical_mean[1] - 1.0 / 16.0).abs() < 1e-15);
        assert!(model.h().iter().all(|h| h.is_finite()));
    }

    #[test]
    fn non_convergence_carries_partial_model() {
        let truth = random_model(4, 12, 1.0);
        let config = FitConfig { max_iterations: 3, ..FitConfig::default() };
        match fit_moments(&truth.model_moments(), &config) {
            Err(Error::NonConvergence { iterations, partial, .. }) => {
                assert_eq!(iterations, 3);
                assert!(!partial.diagnostics().unwrap().converged);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn unit_permutation_is_equivariant() {
        let m = random_model(4, 21, 1.0);
        let perm = [2usize, 0, 3, 1];
        let h: Vec<f64> = perm.iter().map(|&i| m.h()[i]).collect();
        let mut w = Array2::zeros((4, 4));
        for a in 0..4 {
            for b in 0..4 {
                w[[a, b]] = m.w()[[perm[a], perm[b]]];
            }
        }
        let pm = MemModel::new(h, w).unwrap();
        for code in 0..16u32 {
            let mut permuted = 0u32;
            for (a, &src) in perm.iter().enumerate() {
                if code >> src & 1 == 1 {
                    permuted |= 1 << a;
                }
            }
            assert!((m.energy(code).unwrap() - pm.energy(permuted).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn serialized_form_round_trips() {
        let truth = random_model(4, 30, 1.0);
        let model = fit_moments(&truth.model_moments(), &FitConfig::default()).unwrap();
        let text = serde_json::to_string_pretty(&model.to_file()).unwrap();
        let back = MemModel::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.diagnostics(), model.diagnostics());
    }

    #[test]
    fn pearson_degenerate_cases() {
        assert_eq!(pearson(&[0.5], &[0.5], 1e-9), 1.0);
        assert_eq!(pearson(&[0.5, 0.5], &[0.1, 0.9], 1e-9), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], 0.0) - 1.0).abs() < 1e-15);
    }
}
