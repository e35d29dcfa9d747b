//! Multinomial logistic regression trained on a selected subset, plus
//! accuracy / balanced-error evaluation and the coverage sweep.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, PseudoLabeling, ABSTAIN};
use crate::error::{Error, Result};
use crate::graph::{knn_brute_force, symmetrize};
use crate::selectors::{
    cut_statistic_scores, entropy_scores, select_stratified, select_top_beta, NodeScores,
    ScoreMethod, ScoredSelection,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Standardize features with mean/std of the training subset.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            l2: 1e-4,
            epochs: 100,
            batch: 128,
            seed: 0,
            standardize: true,
        }
    }
}

/// Softmax-linear classifier. Inputs are shifted by `feature_mean` and
/// divided by `feature_scale` before the affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `C x d`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
            feature_mean: vec![0.0; dim],
            feature_scale: vec![1.0; dim],
        }
    }

    pub fn from_parts(num_classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != num_classes
            || num_classes == 0
            || !weights.len().is_multiple_of(num_classes)
        {
            return Err(Error::Dimension(format!(
                "{} weights and {} biases for {num_classes} classes",
                weights.len(),
                bias.len()
            )));
        }
        let dim = weights.len() / num_classes;
        let mut m = Self::zeros(num_classes, dim);
        m.weights = weights;
        m.bias = bias;
        if !m.is_finite() {
            return Err(Error::Domain("model parameters must be finite".into()));
        }
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn standardized(&self, row: &[f32], out: &mut [f64]) {
        for (t, o) in out.iter_mut().enumerate() {
            *o = (row[t] as f64 - self.feature_mean[t]) / self.feature_scale[t];
        }
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (y, o) in out.iter_mut().enumerate() {
            let w = &self.weights[y * self.dim..(y + 1) * self.dim];
            *o = self.bias[y] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Argmax class of every row, ties to the lowest class.
    pub fn predict(&self, emb: &EmbeddingMatrix) -> Result<Vec<usize>> {
        if emb.d() != self.dim {
            return Err(Error::Dimension(format!(
                "model expects dimension {}, embeddings have {}",
                self.dim,
                emb.d()
            )));
        }
        let mut x = vec![0.0; self.dim];
        let mut z = vec![0.0; self.num_classes];
        Ok((0..emb.n())
            .map(|i| {
                self.standardized(emb.row(i), &mut x);
                self.logits(&x, &mut z);
                crate::data::argmax(&z)
            })
            .collect())
    }
}

/// Mean softmax cross-entropy plus `l2/2 * ||W||^2` (bias unregularized),
/// with its gradient. `features` are already standardized, row-major.
pub fn loss_and_gradient(
    model: &LinearModel,
    features: &[f64],
    labels: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (c, d) = (model.num_classes, model.dim);
    let mut grad_w = vec![0.0; c * d];
    let mut grad_b = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for (x, &y) in features.chunks_exact(d).zip(labels) {
        model.logits(x, &mut z);
        let target = z[y];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        loss += max + total.ln() - target;
        for (k, v) in z.iter_mut().enumerate() {
            *v /= total;
            let g = *v - f64::from(k == y);
            grad_b[k] += g;
            for (gw, &xt) in grad_w[k * d..(k + 1) * d].iter_mut().zip(x) {
                *gw += g * xt;
            }
        }
    }
    let n = labels.len().max(1) as f64;
    loss /= n;
    grad_w.iter_mut().for_each(|g| *g /= n);
    grad_b.iter_mut().for_each(|g| *g /= n);
    loss += 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grad_w.iter_mut().zip(&model.weights) {
        *g += l2 * w;
    }
    (loss, grad_w, grad_b)
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub model: LinearModel,
    /// Full-subset objective after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains on the selected examples with their hard pseudolabels.
pub fn train(
    emb: &EmbeddingMatrix,
    selection: &ScoredSelection,
    p: &PseudoLabeling,
    cfg: &TrainConfig,
) -> Result<LinearModel> {
    let (rows, labels) = labeled_rows(&selection.selected, p)?;
    train_rows(emb, &rows, &labels, p.num_classes, cfg).map(|t| t.model)
}

/// Rows sorted ascending so training does not depend on selection order.
fn labeled_rows(selected: &[usize], p: &PseudoLabeling) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = selected.to_vec();
    rows.sort_unstable();
    let mut labels = Vec::with_capacity(rows.len());
    for &i in &rows {
        match p.hard.get(i) {
            Some(&h) if h != ABSTAIN => labels.push(h as usize),
            _ => {
                return Err(Error::Precondition(format!(
                    "selected example {i} has no pseudolabel"
                )))
            }
        }
    }
    Ok((rows, labels))
}

/// Mini-batch gradient descent from zero weights. Deterministic given
/// `cfg.seed`; returns final-epoch parameters.
pub fn train_rows(
    emb: &EmbeddingMatrix,
    rows: &[usize],
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    if rows.is_empty() {
        return Err(Error::Precondition(
            "cannot train on an empty selection".into(),
        ));
    }
    if rows.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows, {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::Parameter(format!(
            "invalid training config: lr {}, l2 {}, batch {}",
            cfg.lr, cfg.l2, cfg.batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        warn!("training subset holds a single class; the model degenerates to a constant");
    }
    let d = emb.d();
    let mut model = LinearModel::zeros(num_classes, d);
    if cfg.standardize {
        let (mean, scale) = feature_stats(emb, rows);
        model.feature_mean = mean;
        model.feature_scale = scale;
    }
    let mut features = vec![0.0; rows.len() * d];
    for (x, &r) in features.chunks_exact_mut(d).zip(rows) {
        model.standardized(emb.row(r), x);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch_x = Vec::with_capacity(cfg.batch * d);
    let mut batch_y = Vec::with_capacity(cfg.batch);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&features[i * d..(i + 1) * d]);
                batch_y.push(labels[i]);
            }
            let (_, gw, gb) = loss_and_gradient(&model, &batch_x, &batch_y, cfg.l2);
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g;
            }
        }
        epoch_loss.push(loss_and_gradient(&model, &features, labels, cfg.l2).0);
    }
    if !model.is_finite() {
        return Err(Error::Degenerate(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok(TrainTrace { model, epoch_loss })
}

fn feature_stats(emb: &EmbeddingMatrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = emb.d();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(emb.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &r in rows {
        for ((s, &v), m) in var.iter_mut().zip(emb.row(r)).zip(&mean) {
            let c = v as f64 - m;
            *s += c * c;
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean of the per-class error over classes present in the gold labels.
    pub balanced_error: f64,
    /// `P[pred != y | gold = y]`; `None` for classes absent from the gold labels.
    pub per_class_error: Vec<Option<f64>>,
    pub n_eval: usize,
}

pub fn evaluate(model: &LinearModel, emb: &EmbeddingMatrix, gold: &[u32]) -> Result<EvalReport> {
    if gold.len() != emb.n() {
        return Err(Error::Dimension(format!(
            "{} embeddings but {} gold labels",
            emb.n(),
            gold.len()
        )));
    }
    let pred = model.predict(emb)?;
    evaluate_predictions(&pred, gold, model.num_classes)
}

pub fn evaluate_predictions(
    pred: &[usize],
    gold: &[u32],
    num_classes: usize,
) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Precondition(
            "cannot evaluate on an empty split".into(),
        ));
    }
    if pred.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions but {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let mut totals = vec![0usize; num_classes];
    let mut wrong = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        let g = g as usize;
        if g >= num_classes {
            return Err(Error::Dimension(format!("gold label {g} out of range")));
        }
        totals[g] += 1;
        if p != g {
            wrong[g] += 1;
        }
    }
    let per_class_error: Vec<Option<f64>> = totals
        .iter()
        .zip(&wrong)
        .map(|(&t, &w)| (t > 0).then(|| w as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class_error.iter().flatten().copied().collect();
    let n = gold.len();
    Ok(EvalReport {
        accuracy: 1.0 - wrong.iter().sum::<usize>() as f64 / n as f64,
        balanced_error: present.iter().sum::<f64>() / present.len() as f64,
        per_class_error,
        n_eval: n,
    })
}

/// How examples are scored and selected in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub method: ScoreMethod,
    pub k: usize,
    pub symmetric_graph: bool,
    /// Per-class selection quotas; `None` means one global ranking.
    pub stratified_prior: Option<Vec<f64>>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            method: ScoreMethod::Cut,
            k: 20,
            symmetric_graph: false,
            stratified_prior: None,
        }
    }
}

/// Scores every covered example of `p` with the configured method.
pub fn score_examples(
    emb: &EmbeddingMatrix,
    p: &PseudoLabeling,
    cfg: &SelectorConfig,
) -> Result<NodeScores> {
    match cfg.method {
        ScoreMethod::Entropy => entropy_scores(p),
        ScoreMethod::Cut => {
            let mut g = knn_brute_force(emb, &p.covered(), cfg.k)?;
            if cfg.symmetric_graph {
                g = symmetrize(&g);
            }
            cut_statistic_scores(&g, p)
        }
    }
}

pub fn select(
    scores: &NodeScores,
    p: &PseudoLabeling,
    cfg: &SelectorConfig,
    beta: f64,
) -> Result<ScoredSelection> {
    match &cfg.stratified_prior {
        Some(prior) => select_stratified(scores, p, beta, prior),
        None => select_top_beta(scores, beta),
    }
}

pub const DEFAULT_BETAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Evaluation split with gold labels.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub gold: &'a [u32],
}

#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub train: &'a EmbeddingMatrix,
    pub pseudo: &'a PseudoLabeling,
    pub train_gold: Option<&'a [u32]>,
    pub val: Split<'a>,
    pub test: Option<Split<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub n_selected: usize,
    /// Pseudolabel accuracy on the selected subset (needs train gold).
    pub subset_label_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Test balanced error when a test split is given, else validation.
    pub balanced_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Row with the highest validation accuracy; ties go to the larger beta.
    pub best: usize,
}

impl SweepTable {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "beta,n_selected,subset_label_accuracy,val_accuracy,test_accuracy,balanced_error"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.beta,
                r.n_selected,
                opt(r.subset_label_accuracy),
                r.val_accuracy,
                opt(r.test_accuracy),
                r.balanced_error
            )?;
        }
        Ok(())
    }
}

/// Fraction of `selected` whose hard pseudolabel equals gold.
pub fn subset_label_accuracy(selected: &[usize], p: &PseudoLabeling, gold: &[u32]) -> Option<f64> {
    if selected.is_empty() {
        return None;
    }
    let right = selected
        .iter()
        .filter(|&&i| p.hard[i] >= 0 && p.hard[i] as u32 == gold[i])
        .count();
    Some(right as f64 / selected.len() as f64)
}

/// Score once, then select, train and evaluate at every coverage in `betas`.
pub fn beta_sweep(
    inputs: &SweepInputs<'_>,
    selector: &SelectorConfig,
    betas: &[f64],
    cfg: &TrainConfig,
) -> Result<SweepTable> {
    if betas.is_empty() {
        return Err(Error::Parameter("no beta values to sweep".into()));
    }
    let p = inputs.pseudo;
    if inputs.train.n() != p.len() {
        return Err(Error::Dimension(format!(
            "{} training embeddings but {} pseudolabels",
            inputs.train.n(),
            p.len()
        )));
    }
    if let Some(g) = inputs.train_gold {
        if g.len() != p.len() {
            return Err(Error::Dimension(format!(
                "{} training gold labels for {} examples",
                g.len(),
                p.len()
            )));
        }
    }
    let all_covered = betas.iter().all(|&b| b == 1.0) && selector.stratified_prior.is_none();
    let scores = if all_covered {
        // Nothing is dropped at beta = 1, so skip the graph (and the
        // single-class degenerate case).
        NodeScores {
            node_ids: p.covered(),
            values: vec![0.0; p.covered().len()],
            method: selector.method,
        }
    } else {
        score_examples(inputs.train, p, selector)?
    };

    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let sel = select(&scores, p, selector, beta)?;
        let subset_acc = inputs
            .train_gold
            .and_then(|g| subset_label_accuracy(&sel.selected, p, g));
        let model = train(inputs.train, &sel, p, cfg)?;
        let val = evaluate(&model, inputs.val.embeddings, inputs.val.gold)?;
        let test = inputs
            .test
            .map(|t| evaluate(&model, t.embeddings, t.gold))
            .transpose()?;
        rows.push(SweepRow {
            beta,
            n_selected: sel.len(),
            subset_label_accuracy: subset_acc,
            val_accuracy: val.accuracy,
            test_accuracy: test.as_ref().map(|t| t.accuracy),
            balanced_error: test
                .as_ref()
                .map_or(val.balanced_error, |t| t.balanced_error),
        });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.val_accuracy > b.val_accuracy || (r.val_accuracy == b.val_accuracy && r.beta > b.beta)
        {
            best = i;
        }
    }
    Ok(SweepTable { rows, best })
}
