//! Synthetic two-view data with class-conditional pseudolabel noise, and
//! Monte-Carlo checks of how noise, coverage and end-model error relate.
//!
//! The feature view is a pair of unit-variance spherical Gaussians centered
//! at `±(sep/2)·e₁` (class 1 on the positive side), so a linear classifier is
//! Bayes-optimal. Pseudolabels come from a second view that only interacts
//! with the features through the true label, unless `boundary_noise` is set,
//! in which case flips concentrate near the midplane `x₁ = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, LabelMatrix, PseudoLabeling, ABSTAIN};
use crate::end_model::{evaluate_predictions, train_rows, LinearModel, TrainConfig};
use crate::error::{Error, Result};
use crate::label_models::DawidSkeneModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoViewConfig {
    pub n: usize,
    /// `P[Y = 0 | Ŷ = 1]`
    pub alpha: f64,
    /// `P[Y = 1 | Ŷ = 0]`
    pub gamma: f64,
    pub abstain_rate: f64,
    /// `P[Y = 1]`
    pub class_prior: f64,
    pub view1_dim: usize,
    pub cluster_sep: f64,
    pub boundary_noise: bool,
    /// Decay length `τ` of the boundary flip probability
    /// `min(1, c_y·exp(-|x₁|/τ))`.
    pub boundary_scale: f64,
}

impl Default for TwoViewConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            alpha: 0.1,
            gamma: 0.1,
            abstain_rate: 0.0,
            class_prior: 0.5,
            view1_dim: 2,
            cluster_sep: 2.0,
            boundary_noise: false,
            boundary_scale: 0.5,
        }
    }
}

impl TwoViewConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("gamma", self.gamma)?;
        unit("abstain_rate", self.abstain_rate)?;
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::Domain(format!(
                "class_prior must be in (0, 1), got {}",
                self.class_prior
            )));
        }
        if self.alpha + self.gamma >= 1.0 {
            return Err(Error::Domain(format!(
                "alpha + gamma must be < 1, got {}",
                self.alpha + self.gamma
            )));
        }
        if self.n == 0 || self.view1_dim == 0 {
            return Err(Error::Parameter("n and view1_dim must be positive".into()));
        }
        if !(self.cluster_sep >= 0.0) || !(self.boundary_scale > 0.0) {
            return Err(Error::Parameter(
                "cluster_sep must be >= 0 and boundary_scale > 0".into(),
            ));
        }
        let q = self.pseudo_positive_rate();
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Domain(format!(
                "class_prior {} is unreachable with alpha {} and gamma {}: it must lie in [gamma, 1 - alpha]",
                self.class_prior, self.alpha, self.gamma
            )));
        }
        Ok(())
    }

    /// `P[Ŷ = 1 | Ŷ ≠ ∅]` implied by the prior and the noise rates.
    pub fn pseudo_positive_rate(&self) -> f64 {
        (self.class_prior - self.gamma) / (1.0 - self.alpha - self.gamma)
    }

    /// Forward flip rates `(P[Ŷ=1 | Y=0], P[Ŷ=0 | Y=1])` matching
    /// `(alpha, gamma)`.
    pub fn flip_rates(&self) -> (f64, f64) {
        let q = self.pseudo_positive_rate();
        let (pi1, pi0) = (self.class_prior, 1.0 - self.class_prior);
        (q * self.alpha / pi0, (1.0 - q) * self.gamma / pi1)
    }
}

#[derive(Debug, Clone)]
pub struct TwoViewSample {
    pub features: EmbeddingMatrix,
    pub pseudo: Vec<i32>,
    pub gold: Vec<u32>,
}

impl TwoViewSample {
    pub fn pseudolabeling(&self) -> PseudoLabeling {
        PseudoLabeling {
            hard: self.pseudo.clone(),
            soft: None,
            num_classes: 2,
        }
    }

    pub fn covered(&self) -> Vec<usize> {
        (0..self.pseudo.len())
            .filter(|&i| self.pseudo[i] != ABSTAIN)
            .collect()
    }
}

fn draw_features(rng: &mut ChaCha8Rng, y: u32, cfg: &TwoViewConfig, out: &mut Vec<f32>) {
    let half = cfg.cluster_sep / 2.0;
    for t in 0..cfg.view1_dim {
        let z: f64 = StandardNormal.sample(rng);
        let shift = if t == 0 {
            if y == 1 {
                half
            } else {
                -half
            }
        } else {
            0.0
        };
        out.push((z + shift) as f32);
    }
}

/// Draws a sample. Same config and seed give the same sample.
pub fn generate(cfg: &TwoViewConfig, seed: u64) -> Result<TwoViewSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(cfg.n * cfg.view1_dim);
    let mut pseudo = Vec::with_capacity(cfg.n);
    let mut gold = Vec::with_capacity(cfg.n);
    if cfg.boundary_noise {
        let (e0, e1) = cfg.flip_rates();
        if e0 > 1.0 || e1 > 1.0 {
            return Err(Error::Domain(format!(
                "noise rates need flip probabilities {e0}, {e1} above 1"
            )));
        }
        let c0 = calibrate_boundary(e0, cfg.cluster_sep / 2.0, cfg.boundary_scale);
        let c1 = calibrate_boundary(e1, cfg.cluster_sep / 2.0, cfg.boundary_scale);
        for _ in 0..cfg.n {
            let y = u32::from(rng.gen_bool(cfg.class_prior));
            let start = values.len();
            draw_features(&mut rng, y, cfg, &mut values);
            let x1 = values[start] as f64;
            let c = if y == 1 { c1 } else { c0 };
            let flip = rng.gen::<f64>() < (c * (-x1.abs() / cfg.boundary_scale).exp()).min(1.0);
            let yhat = if flip { 1 - y } else { y };
            let abstain = rng.gen::<f64>() < cfg.abstain_rate;
            pseudo.push(if abstain { ABSTAIN } else { yhat as i32 });
            gold.push(y);
        }
    } else {
        // Draw the pseudolabel first, then the true label given it; features
        // depend on the true label only.
        let q = cfg.pseudo_positive_rate();
        for _ in 0..cfg.n {
            let yhat = u32::from(rng.gen::<f64>() < q);
            let wrong = if yhat == 1 { cfg.alpha } else { cfg.gamma };
            let y = if rng.gen::<f64>() < wrong {
                1 - yhat
            } else {
                yhat
            };
            draw_features(&mut rng, y, cfg, &mut values);
            let abstain = rng.gen::<f64>() < cfg.abstain_rate;
            pseudo.push(if abstain { ABSTAIN } else { yhat as i32 });
            gold.push(y);
        }
    }
    Ok(TwoViewSample {
        features: EmbeddingMatrix::new(values, cfg.n, cfg.view1_dim)?,
        pseudo,
        gold,
    })
}

/// `E[min(1, c·exp(-|X|/τ))]` for `X ~ N(mean, 1)`, by Simpson's rule.
fn expected_flip(c: f64, mean: f64, tau: f64) -> f64 {
    const STEPS: usize = 8000;
    let (lo, hi) = (mean - 12.0, mean + 12.0);
    let h = (hi - lo) / STEPS as f64;
    let f = |x: f64| {
        let density = (-(x - mean) * (x - mean) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        density * (c * (-x.abs() / tau).exp()).min(1.0)
    };
    let mut acc = f(lo) + f(hi);
    for s in 1..STEPS {
        let w = if s % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + s as f64 * h);
    }
    acc * h / 3.0
}

/// Solves `expected_flip(c) = rate` for `c` by bisection.
fn calibrate_boundary(rate: f64, mean: f64, tau: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while expected_flip(hi, mean, tau) < rate {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_flip(mid, mean, tau) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Empirical `(α̂, γ̂)` over covered examples.
pub fn noise_params(pseudo: &[i32], gold: &[u32]) -> Result<(f64, f64)> {
    if pseudo.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} pseudolabels but {} gold labels",
            pseudo.len(),
            gold.len()
        )));
    }
    let (mut pos, mut false_pos, mut neg, mut false_neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pseudo.iter().zip(gold) {
        match p {
            1 => {
                pos += 1;
                false_pos += usize::from(g == 0);
            }
            0 => {
                neg += 1;
                false_neg += usize::from(g == 1);
            }
            ABSTAIN => {}
            other => {
                return Err(Error::Domain(format!(
                    "noise parameters are defined for binary labels, found {other}"
                )))
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Precondition(
            "alpha/gamma undefined: a pseudolabel class never occurs among covered examples".into(),
        ));
    }
    Ok((false_pos as f64 / pos as f64, false_neg as f64 / neg as f64))
}

/// Balanced error against true labels predicted from the balanced error
/// against pseudolabels: `(err_pseudo - (α+γ)/2) / (1 - α - γ)`.
pub fn balanced_error_bound(err_on_pseudo: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(alpha + gamma < 1.0) {
        return Err(Error::Domain(format!(
            "alpha + gamma must be < 1, got {}",
            alpha + gamma
        )));
    }
    Ok((err_on_pseudo - (alpha + gamma) / 2.0) / (1.0 - alpha - gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedErrorCheck {
    /// Balanced error of the classifier against true labels.
    pub measured: f64,
    /// Balanced error against pseudolabels on covered examples.
    pub measured_on_pseudo: f64,
    pub alpha_hat: f64,
    pub gamma_hat: f64,
    pub predicted: f64,
    pub gap: f64,
}

/// Draws a fresh sample and compares a fixed classifier's balanced error
/// on true labels against the value predicted from its pseudolabel error.
pub fn verify_balanced_error(
    cfg: &TwoViewConfig,
    classifier: &LinearModel,
    seed: u64,
) -> Result<BalancedErrorCheck> {
    if cfg.boundary_noise {
        return Err(Error::Precondition(
            "the balanced-error relation needs noise independent of the features; boundary_noise breaks that"
                .into(),
        ));
    }
    let sample = generate(cfg, seed)?;
    let pred = classifier.predict(&sample.features)?;
    let measured = evaluate_predictions(&pred, &sample.gold, 2)?.balanced_error;
    let covered = sample.covered();
    let cov_pred: Vec<usize> = covered.iter().map(|&i| pred[i]).collect();
    let cov_pseudo: Vec<u32> = covered.iter().map(|&i| sample.pseudo[i] as u32).collect();
    let measured_on_pseudo = evaluate_predictions(&cov_pred, &cov_pseudo, 2)?.balanced_error;
    let (alpha_hat, gamma_hat) = noise_params(&sample.pseudo, &sample.gold)?;
    let predicted = balanced_error_bound(measured_on_pseudo, alpha_hat, gamma_hat)?;
    Ok(BalancedErrorCheck {
        measured,
        measured_on_pseudo,
        alpha_hat,
        gamma_hat,
        predicted,
        gap: (measured - predicted).abs(),
    })
}

/// Two-class linear model with standard-normal weights and bias.
pub fn random_linear_classifier(dim: usize, seed: u64) -> LinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..2 * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let bias = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
    LinearModel::from_parts(2, weights, bias).expect("finite random parameters")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub coverage: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub coverage: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub mean_test_bal_err: f64,
    pub std: f64,
    /// `1 / (1 - α - γ)`
    pub noise_factor: f64,
    /// `1 / sqrt(n·P[Ŷ≠∅]·min_y P[Ŷ=y | Ŷ≠∅])`, averaged over seeds.
    pub sample_factor: f64,
    /// Product of the two factors above.
    pub bound_driver: f64,
}

/// For each `(coverage, α, γ)`: trains the end model on the covered
/// pseudolabeled sample and measures balanced error on a clean test sample,
/// averaged over `seeds`.
pub fn tradeoff_curve(
    base: &TwoViewConfig,
    family: &[TradeoffPoint],
    seeds: &[u64],
    train_cfg: &TrainConfig,
) -> Result<Vec<TradeoffRow>> {
    if seeds.is_empty() {
        return Err(Error::Parameter("need at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(family.len());
    for point in family {
        let cfg = TwoViewConfig {
            alpha: point.alpha,
            gamma: point.gamma,
            abstain_rate: 1.0 - point.coverage,
            ..*base
        };
        cfg.validate()?;
        if !(point.coverage > 0.0 && point.coverage <= 1.0) {
            return Err(Error::Domain(format!(
                "coverage must be in (0, 1], got {}",
                point.coverage
            )));
        }
        let clean = TwoViewConfig {
            alpha: 0.0,
            gamma: 0.0,
            abstain_rate: 0.0,
            boundary_noise: false,
            ..*base
        };
        let mut errs = Vec::with_capacity(seeds.len());
        let mut sample_factor = 0.0;
        for &seed in seeds {
            let sample = generate(&cfg, seed)?;
            let rows_idx = sample.covered();
            let labels: Vec<usize> = rows_idx
                .iter()
                .map(|&i| sample.pseudo[i] as usize)
                .collect();
            let model = train_rows(
                &sample.features,
                &rows_idx,
                &labels,
                2,
                &TrainConfig { seed, ..*train_cfg },
            )?
            .model;
            let test = generate(&clean, seed ^ 0x7e57_7e57_7e57_7e57)?;
            let pred = model.predict(&test.features)?;
            errs.push(evaluate_predictions(&pred, &test.gold, 2)?.balanced_error);

            let covered = rows_idx.len() as f64;
            let ones = labels.iter().filter(|&&y| y == 1).count() as f64;
            let min_share = (ones / covered).min(1.0 - ones / covered);
            sample_factor += 1.0 / (cfg.n as f64 * (covered / cfg.n as f64) * min_share).sqrt();
        }
        let k = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / k;
        let std = if errs.len() > 1 {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        let noise_factor = 1.0 / (1.0 - point.alpha - point.gamma);
        let sample_factor = sample_factor / k;
        rows.push(TradeoffRow {
            coverage: point.coverage,
            alpha: point.alpha,
            gamma: point.gamma,
            mean_test_bal_err: mean,
            std,
            noise_factor,
            sample_factor,
            bound_driver: noise_factor * sample_factor,
        });
    }
    Ok(rows)
}

pub fn write_tradeoff_csv<W: std::io::Write>(
    w: &mut W,
    rows: &[TradeoffRow],
) -> std::io::Result<()> {
    writeln!(w, "coverage,alpha,gamma,mean_test_bal_err,std,bound_driver")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.coverage, r.alpha, r.gamma, r.mean_test_bal_err, r.std, r.bound_driver
        )?;
    }
    Ok(())
}

/// Draws `(votes, true labels)` from a Dawid-Skene model.
pub fn sample_dawid_skene(
    model: &DawidSkeneModel,
    n: usize,
    seed: u64,
) -> Result<(LabelMatrix, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, m) = (model.num_classes(), model.num_lfs());
    let draw = |rng: &mut ChaCha8Rng, probs: &[f64]| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    };
    let mut values = Vec::with_capacity(n * m);
    let mut gold = Vec::with_capacity(n);
    for _ in 0..n {
        let y = draw(&mut rng, &model.class_prior);
        for k in 0..m {
            let v = draw(&mut rng, model.confusion_row(k, y));
            values.push(if v == c { ABSTAIN } else { v as i32 });
        }
        gold.push(y as u32);
    }
    Ok((LabelMatrix::new(values, n, m, c)?, gold))
}
