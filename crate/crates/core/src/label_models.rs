//! Label models: aggregate labeling-function votes into pseudolabels.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde_json::json;

use crate::data::{argmax, LabelMatrix, PseudoLabeling, ABSTAIN};
use crate::error::{Error, Result};

/// Rows per work unit for parallel E/M steps. Fixed so that reductions are
/// independent of the thread count.
const CHUNK_ROWS: usize = 1024;

/// Mode of the non-abstaining votes in each row, ties to the lowest class.
///
/// The soft label is the vote share per class. Rows where every labeling
/// function abstains get the abstain label and a uniform soft row.
pub fn majority_vote(labels: &LabelMatrix) -> PseudoLabeling {
    let c = labels.num_classes();
    let mut hard = Vec::with_capacity(labels.n());
    let mut soft = Vec::with_capacity(labels.n() * c);
    let mut counts = vec![0usize; c];
    for row in labels.rows() {
        counts.iter_mut().for_each(|x| *x = 0);
        for &v in row {
            if v != ABSTAIN {
                counts[v as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            hard.push(ABSTAIN);
            soft.extend(std::iter::repeat_n(1.0 / c as f64, c));
            continue;
        }
        let mut best = 0;
        for y in 1..c {
            if counts[y] > counts[best] {
                best = y;
            }
        }
        hard.push(best as i32);
        soft.extend(counts.iter().map(|&k| k as f64 / total as f64));
    }
    PseudoLabeling {
        hard,
        soft: Some(soft),
        num_classes: c,
    }
}

/// Empirical distribution of hard labels over covered examples.
pub fn class_marginals(p: &PseudoLabeling) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; p.num_classes];
    for &h in &p.hard {
        if h != ABSTAIN {
            counts[h as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Precondition(
            "class marginals need at least one covered example".into(),
        ));
    }
    Ok(counts.iter().map(|&k| k as f64 / total as f64).collect())
}

/// Class prior plus, for every labeling function, the probability of each
/// emitted value (classes, then abstain) given the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct DawidSkeneModel {
    pub class_prior: Vec<f64>,
    /// Flattened `m x C x (C+1)`; see [`DawidSkeneModel::confusion`].
    confusion: Vec<f64>,
    num_lfs: usize,
    num_classes: usize,
}

impl DawidSkeneModel {
    pub fn new(class_prior: Vec<f64>, confusion: Vec<f64>, num_lfs: usize) -> Result<Self> {
        let c = class_prior.len();
        if c < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        if confusion.len() != num_lfs * c * (c + 1) {
            return Err(Error::Dimension(format!(
                "confusion tensor has {} entries, expected {num_lfs}x{c}x{}",
                confusion.len(),
                c + 1
            )));
        }
        let model = Self {
            class_prior,
            confusion,
            num_lfs,
            num_classes: c,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let ok = |v: &[f64]| {
            v.iter().all(|&p| p >= 0.0 && p.is_finite())
                && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-8
        };
        if !ok(&self.class_prior) {
            return Err(Error::Domain(
                "class prior is not a probability vector".into(),
            ));
        }
        for (idx, row) in self
            .confusion
            .chunks_exact(self.num_classes + 1)
            .enumerate()
        {
            if !ok(row) {
                return Err(Error::Domain(format!(
                    "confusion row for LF {} class {} is not a probability vector",
                    idx / self.num_classes,
                    idx % self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn num_lfs(&self) -> usize {
        self.num_lfs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `P[LF k emits c | Y = y]`; `c == num_classes` is the abstain column.
    pub fn confusion(&self, k: usize, y: usize, c: usize) -> f64 {
        self.confusion[self.offset(k, y) + c]
    }

    pub fn confusion_row(&self, k: usize, y: usize) -> &[f64] {
        let o = self.offset(k, y);
        &self.confusion[o..o + self.num_classes + 1]
    }

    fn offset(&self, k: usize, y: usize) -> usize {
        (k * self.num_classes + y) * (self.num_classes + 1)
    }

    /// Deterministic key-sorted JSON document.
    pub fn to_json(&self) -> String {
        let c = self.num_classes;
        let confusion: Vec<Vec<Vec<f64>>> = (0..self.num_lfs)
            .map(|k| (0..c).map(|y| self.confusion_row(k, y).to_vec()).collect())
            .collect();
        let doc = json!({
            "class_prior": self.class_prior,
            "confusion": confusion,
            "confusion_columns": "classes 0..C-1 then abstain",
            "num_classes": c,
            "num_lfs": self.num_lfs,
        });
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    /// Per-row log joint `ln P[Y=y] + sum_k ln P[LF_k | Y=y]`.
    fn log_joint(&self, row: &[i32], out: &mut [f64]) {
        let c = self.num_classes;
        for (y, slot) in out.iter_mut().enumerate() {
            let mut lj = self.class_prior[y].ln();
            for (k, &v) in row.iter().enumerate() {
                let col = if v == ABSTAIN { c } else { v as usize };
                lj += self.confusion(k, y, col).ln();
            }
            *slot = lj;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DawidSkeneConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Only used to randomize the starting posteriors when majority vote
    /// gives no information to start from.
    pub seed: u64,
    /// Pseudo-count added to every confusion cell in each M-step.
    pub smoothing: f64,
}

impl Default for DawidSkeneConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            smoothing: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DawidSkeneFit {
    pub model: DawidSkeneModel,
    /// Mean per-example objective after each iteration: the log-likelihood
    /// plus the log-density of the Dirichlet prior implied by smoothing.
    /// EM never decreases it.
    pub objective_trace: Vec<f64>,
    /// Plain mean log-likelihood after each iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

pub fn dawid_skene_fit(labels: &LabelMatrix, cfg: &DawidSkeneConfig) -> Result<DawidSkeneModel> {
    dawid_skene_fit_traced(labels, cfg).map(|f| f.model)
}

/// EM for the Dawid-Skene model, abstains modeled as an extra emission.
/// Stops when the mean log-likelihood changes by less than `cfg.tol`.
pub fn dawid_skene_fit_traced(
    labels: &LabelMatrix,
    cfg: &DawidSkeneConfig,
) -> Result<DawidSkeneFit> {
    if cfg.max_iters == 0 {
        return Err(Error::Parameter("max_iters must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Parameter("tol must be positive".into()));
    }
    if !(cfg.smoothing >= 0.0) {
        return Err(Error::Parameter("smoothing must be non-negative".into()));
    }
    if labels.values().iter().all(|&v| v == ABSTAIN) {
        return Err(Error::Precondition(
            "Dawid-Skene needs at least one non-abstain vote".into(),
        ));
    }
    let c = labels.num_classes();
    let n = labels.n();

    let mut posteriors = majority_vote(labels)
        .soft
        .expect("majority vote has soft labels");
    let uniform = 1.0 / c as f64;
    if posteriors.iter().all(|&p| (p - uniform).abs() < 1e-12) {
        warn!("majority vote is uninformative on every row; starting EM from seeded random posteriors");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
        for row in posteriors.chunks_exact_mut(c) {
            row.iter_mut().for_each(|p| *p = gamma.sample(&mut rng));
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    for y in 0..c {
        let mass: f64 = posteriors.chunks_exact(c).map(|r| r[y]).sum();
        if mass == 0.0 {
            warn!(
                "class {y} receives no votes; its confusion rows fall back to the smoothed uniform"
            );
        }
    }

    let mut objective_trace: Vec<f64> = Vec::new();
    let mut log_likelihood_trace = Vec::new();
    let mut converged = false;
    let mut model = m_step(labels, &posteriors, cfg.smoothing);
    for _ in 0..cfg.max_iters {
        let ll = e_step(&model, labels, &mut posteriors);
        let mean_ll = ll / n as f64;
        let objective = mean_ll + log_prior_density(&model, cfg.smoothing) / n as f64;
        if let Some(&prev) = objective_trace.last() {
            debug_assert!(
                objective >= prev - 1e-9 * prev.abs().max(1.0),
                "EM objective decreased: {prev} -> {objective}"
            );
            if objective < prev {
                warn!("EM objective decreased by {:e}", prev - objective);
            }
        }
        objective_trace.push(objective);
        log_likelihood_trace.push(mean_ll);
        let len = log_likelihood_trace.len();
        if len >= 2
            && (log_likelihood_trace[len - 1] - log_likelihood_trace[len - 2]).abs() < cfg.tol
        {
            converged = true;
            break;
        }
        model = m_step(labels, &posteriors, cfg.smoothing);
    }
    Ok(DawidSkeneFit {
        model,
        objective_trace,
        log_likelihood_trace,
        converged,
    })
}

fn log_prior_density(model: &DawidSkeneModel, smoothing: f64) -> f64 {
    if smoothing == 0.0 {
        return 0.0;
    }
    smoothing * model.confusion.iter().map(|p| p.ln()).sum::<f64>()
}

fn m_step(labels: &LabelMatrix, posteriors: &[f64], smoothing: f64) -> DawidSkeneModel {
    let c = labels.num_classes();
    let m = labels.m();
    let width = c + m * c * (c + 1);
    let partials: Vec<Vec<f64>> = labels
        .values()
        .par_chunks(CHUNK_ROWS * m)
        .zip(posteriors.par_chunks(CHUNK_ROWS * c))
        .map(|(lab, post)| {
            let mut acc = vec![0.0; width];
            for (row, q) in lab.chunks_exact(m).zip(post.chunks_exact(c)) {
                for y in 0..c {
                    acc[y] += q[y];
                }
                for (k, &v) in row.iter().enumerate() {
                    let col = if v == ABSTAIN { c } else { v as usize };
                    for y in 0..c {
                        acc[c + (k * c + y) * (c + 1) + col] += q[y];
                    }
                }
            }
            acc
        })
        .collect();
    let mut totals = vec![0.0; width];
    for part in &partials {
        for (t, p) in totals.iter_mut().zip(part) {
            *t += p;
        }
    }
    let n = labels.n() as f64;
    let class_prior: Vec<f64> = totals[..c].iter().map(|&s| s / n).collect();
    let mut confusion = totals[c..].to_vec();
    for row in confusion.chunks_exact_mut(c + 1) {
        row.iter_mut().for_each(|x| *x += smoothing);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / (c + 1) as f64);
        }
    }
    DawidSkeneModel {
        class_prior,
        confusion,
        num_lfs: m,
        num_classes: c,
    }
}

/// Writes posteriors in place and returns the total log-likelihood.
fn e_step(model: &DawidSkeneModel, labels: &LabelMatrix, posteriors: &mut [f64]) -> f64 {
    let c = model.num_classes;
    let m = labels.m();
    let partials: Vec<f64> = labels
        .values()
        .par_chunks(CHUNK_ROWS * m)
        .zip(posteriors.par_chunks_mut(CHUNK_ROWS * c))
        .map(|(lab, post)| {
            let mut ll = 0.0;
            for (row, q) in lab.chunks_exact(m).zip(post.chunks_exact_mut(c)) {
                ll += normalized_posterior(model, row, q);
            }
            ll
        })
        .collect();
    partials.iter().sum()
}

/// Fills `q` with the posterior for one row; returns the row log-evidence.
fn normalized_posterior(model: &DawidSkeneModel, row: &[i32], q: &mut [f64]) -> f64 {
    model.log_joint(row, q);
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in q.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    q.iter_mut().for_each(|v| *v /= total);
    max + total.ln()
}

/// Posterior `P[Y | votes]` under a fitted model. All-abstain rows get the
/// abstain label and the class prior as their soft row.
pub fn dawid_skene_posteriors(
    model: &DawidSkeneModel,
    labels: &LabelMatrix,
) -> Result<PseudoLabeling> {
    if labels.m() != model.num_lfs || labels.num_classes() != model.num_classes {
        return Err(Error::Dimension(format!(
            "model has {} LFs and {} classes, label matrix has {} and {}",
            model.num_lfs,
            model.num_classes,
            labels.m(),
            labels.num_classes()
        )));
    }
    let c = model.num_classes;
    let mut soft = vec![0.0; labels.n() * c];
    let mut hard = vec![ABSTAIN; labels.n()];
    soft.par_chunks_mut(c)
        .zip(hard.par_iter_mut())
        .zip(labels.values().par_chunks(labels.m()))
        .for_each(|((q, h), row)| {
            if row.iter().all(|&v| v == ABSTAIN) {
                q.copy_from_slice(&model.class_prior);
            } else {
                normalized_posterior(model, row, q);
                *h = argmax(q) as i32;
            }
        });
    Ok(PseudoLabeling {
        hard,
        soft: Some(soft),
        num_classes: c,
    })
}
