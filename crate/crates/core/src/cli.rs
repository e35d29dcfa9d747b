//! Command-line driver: load inputs, build pseudolabels, score, select,
//! train and report.
//!
//! Every artifact embeds the resolved configuration: CSV files start with a
//! `# config: {...}` comment line, JSON documents carry a `config` key.
//! Output is byte-identical for a fixed seed regardless of thread count.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{create, load_embeddings, load_gold, load_label_matrix, PseudoLabeling};
use crate::end_model::{
    beta_sweep, score_examples, select, SelectorConfig, Split, SweepInputs, TrainConfig,
    DEFAULT_BETAS,
};
use crate::error::{Error, Result};
use crate::graph::{knn_brute_force, symmetrize};
use crate::label_models::{
    dawid_skene_fit, dawid_skene_posteriors, majority_vote, DawidSkeneConfig,
};
use crate::selectors::{relabel_by_neighbors, write_score_table, ScoreMethod};
use crate::synth::{
    random_linear_classifier, tradeoff_curve, verify_balanced_error, write_tradeoff_csv,
    TradeoffPoint, TwoViewConfig,
};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CUTSTAT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "cutstat",
    version,
    about = "Select trustworthy subsets of weakly labeled data",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric or degenerate input.\n\
                  Set CUTSTAT_THREADS to fix the number of worker threads (results do not depend on it)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score covered examples.
    ///
    /// Writes `example_index,score,rank,selected_at_<beta>...` with one row
    /// per covered example; lower scores are better and rank 1 is best.
    Score(ScoreArgs),
    /// Keep the best-scoring fraction of covered examples.
    ///
    /// Writes `example_index,pseudolabel` for the kept examples in example
    /// order. With --relabel, writes `example_index,pseudolabel` for every
    /// example after relabeling the worst fraction from its neighbors.
    Select(SelectArgs),
    /// Train and evaluate the end model at each coverage in --betas.
    ///
    /// Writes `beta,n_selected,subset_label_accuracy,val_accuracy,test_accuracy,balanced_error`
    /// and, with --summary, a JSON document naming the best beta.
    Sweep(SweepArgs),
    /// Check the noisy-label balanced-error relation and the coverage/noise
    /// tradeoff on synthetic two-view data.
    ///
    /// Writes a JSON report; exits with code 3 when the measured gap
    /// exceeds --tolerance.
    SynthVerify(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelModelKind {
    /// Majority vote, ties to the lowest class.
    Mv,
    /// Dawid-Skene EM.
    Ds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    Cut,
    Entropy,
}

impl From<SelectorKind> for ScoreMethod {
    fn from(s: SelectorKind) -> Self {
        match s {
            SelectorKind::Cut => ScoreMethod::Cut,
            SelectorKind::Entropy => ScoreMethod::Entropy,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PseudoArgs {
    /// Label matrix CSV (one example per line, -1 = abstain).
    #[arg(
        long,
        required_unless_present = "pseudolabels",
        conflicts_with = "pseudolabels"
    )]
    pub labels: Option<PathBuf>,
    /// Precomputed hard pseudolabels, one per line (-1 = abstain). No soft
    /// labels are available in this mode.
    #[arg(long)]
    pub pseudolabels: Option<PathBuf>,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
    #[arg(long, value_enum, default_value_t = LabelModelKind::Mv)]
    pub label_model: LabelModelKind,
    /// Dawid-Skene iteration cap.
    #[arg(long, default_value_t = 100)]
    pub ds_max_iters: usize,
    /// Dawid-Skene tolerance on the change in mean log-likelihood.
    #[arg(long, default_value_t = 1e-6)]
    pub ds_tol: f64,
    /// Write the fitted Dawid-Skene model as JSON.
    #[arg(long)]
    pub dump_model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectorArgs {
    #[arg(long, value_enum, default_value_t = SelectorKind::Cut)]
    pub selector: SelectorKind,
    /// Neighbors per node.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Use the union of neighbor relations instead of each node's own K.
    #[arg(long)]
    pub symmetric_graph: bool,
    /// Select per pseudolabel class with quotas from --prior.
    #[arg(long, requires = "prior")]
    pub stratified: bool,
    /// Class prior for stratified selection, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub prior: Option<Vec<f64>>,
    /// Write the neighbor graph as `src,dst,weight` CSV.
    #[arg(long)]
    pub dump_graph: Option<PathBuf>,
}

impl SelectorArgs {
    fn config(&self) -> SelectorConfig {
        SelectorConfig {
            method: self.selector.into(),
            k: self.k,
            symmetric_graph: self.symmetric_graph,
            stratified_prior: if self.stratified {
                self.prior.clone()
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    /// Embeddings (binary container or CSV).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub pseudo: PseudoArgs,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Coverages to mark in the selected_at columns.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub pseudo: PseudoArgs,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Fraction of covered examples to keep (or, with --relabel, to relabel).
    #[arg(long, default_value_t = 0.6)]
    pub beta: f64,
    /// Relabel the worst fraction by neighbor majority instead of dropping it.
    #[arg(long, conflicts_with = "stratified")]
    pub relabel: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    /// Training embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub pseudo: PseudoArgs,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Training gold labels, for subset pseudolabel accuracy.
    #[arg(long)]
    pub train_gold: Option<PathBuf>,
    #[arg(long)]
    pub val_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub val_gold: Option<PathBuf>,
    #[arg(long, requires = "test_gold")]
    pub test_embeddings: Option<PathBuf>,
    #[arg(long, requires = "test_embeddings")]
    pub test_gold: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Do not standardize features.
    #[arg(long)]
    pub raw_features: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sweep table CSV; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// JSON summary with the full table and the best beta.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200_000)]
    pub n: usize,
    /// P[Y = 0 | pseudolabel 1].
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// P[Y = 1 | pseudolabel 0].
    #[arg(long, default_value_t = 0.15)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub abstain_rate: f64,
    /// P[Y = 1].
    #[arg(long, default_value_t = 0.5)]
    pub class_prior: f64,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 2.0)]
    pub sep: f64,
    /// Largest accepted gap between measured and predicted balanced error.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    /// Tradeoff settings as coverage:alpha:gamma, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.5:0.05:0.05,1.0:0.3:0.3"
    )]
    pub tradeoff: Vec<String>,
    /// Sample size for each tradeoff setting.
    #[arg(long, default_value_t = 20_000)]
    pub tradeoff_n: usize,
    /// Seeds averaged per tradeoff setting.
    #[arg(long, default_value_t = 10)]
    pub tradeoff_seeds: u64,
    /// Skip the tradeoff table.
    #[arg(long)]
    pub no_tradeoff: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Tradeoff table CSV.
    #[arg(long)]
    pub tradeoff_out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        Error::Parameter(format!(
            "{THREADS_ENV} must be a non-negative integer, got {raw:?}"
        ))
    })?;
    // A pool that is already built (e.g. in tests) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Score(a) => cmd_score(a).map(|_| 0),
        Command::Select(a) => cmd_select(a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(a).map(|_| 0),
        Command::SynthVerify(a) => cmd_synth_verify(a),
    }
}

fn config_value<T: Serialize>(command: &str, args: &T) -> Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    if let Value::Object(map) = &mut v {
        map.insert("command".into(), Value::String(command.into()));
        map.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
    }
    v
}

fn config_line(config: &Value) -> String {
    format!("# config: {config}\n")
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(bytes)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("json serializes");
    s.push(b'\n');
    s
}

/// Builds pseudolabels from a label matrix or loads them directly.
pub fn build_pseudolabels(a: &PseudoArgs, seed: u64, n_expected: usize) -> Result<PseudoLabeling> {
    if a.num_classes < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes, got {}",
            a.num_classes
        )));
    }
    let p = if let Some(path) = &a.pseudolabels {
        load_hard_labels(path, a.num_classes)?
    } else {
        let path = a.labels.as_ref().expect("clap enforces one label source");
        let labels = load_label_matrix(path, a.num_classes)?;
        match a.label_model {
            LabelModelKind::Mv => majority_vote(&labels),
            LabelModelKind::Ds => {
                let cfg = DawidSkeneConfig {
                    max_iters: a.ds_max_iters,
                    tol: a.ds_tol,
                    seed,
                    ..Default::default()
                };
                let model = dawid_skene_fit(&labels, &cfg)?;
                if let Some(dump) = &a.dump_model {
                    let mut doc: Value = serde_json::from_str(&model.to_json())?;
                    doc["seed"] = json!(seed);
                    emit(Some(dump), &pretty(&doc))?;
                }
                dawid_skene_posteriors(&model, &labels)?
            }
        }
    };
    if p.len() != n_expected {
        return Err(Error::Dimension(format!(
            "{} pseudolabel rows but {n_expected} embedding rows",
            p.len()
        )));
    }
    Ok(p)
}

fn load_hard_labels(path: &Path, num_classes: usize) -> Result<PseudoLabeling> {
    let m = load_label_matrix(path, num_classes)?;
    if m.m() != 1 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected one label per line, found {} columns", m.m()),
        ));
    }
    PseudoLabeling::hard_only(m.values().to_vec(), num_classes)
}

fn dump_graph(
    emb: &crate::data::EmbeddingMatrix,
    p: &PseudoLabeling,
    s: &SelectorArgs,
) -> Result<()> {
    if let Some(path) = &s.dump_graph {
        let mut g = knn_brute_force(emb, &p.covered(), s.k)?;
        if s.symmetric_graph {
            g = symmetrize(&g);
        }
        g.write_csv(path)?;
    }
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let emb = load_embeddings(&a.embeddings)?;
    let p = build_pseudolabels(&a.pseudo, a.seed, emb.n())?;
    let sel_cfg = a.selector.config();
    let scores = score_examples(&emb, &p, &sel_cfg)?;
    let selections = a
        .betas
        .iter()
        .map(|&b| select(&scores, &p, &sel_cfg, b))
        .collect::<Result<Vec<_>>>()?;
    dump_graph(&emb, &p, &a.selector)?;
    let mut buf = config_line(&config_value("score", a)).into_bytes();
    write_score_table(&mut buf, &scores, &selections).expect("writing to memory");
    emit(a.out.as_deref(), &buf)
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let emb = load_embeddings(&a.embeddings)?;
    let p = build_pseudolabels(&a.pseudo, a.seed, emb.n())?;
    let sel_cfg = a.selector.config();
    let mut buf = config_line(&config_value("select", a)).into_bytes();
    writeln!(buf, "example_index,pseudolabel").expect("writing to memory");
    if a.relabel {
        if sel_cfg.method != ScoreMethod::Cut {
            return Err(Error::Parameter(
                "--relabel needs the cut selector's neighbor graph".into(),
            ));
        }
        let mut g = knn_brute_force(&emb, &p.covered(), a.selector.k)?;
        if a.selector.symmetric_graph {
            g = symmetrize(&g);
        }
        let scores = crate::selectors::cut_statistic_scores(&g, &p)?;
        let relabeled = relabel_by_neighbors(&g, &p, &scores, a.beta)?;
        for (i, h) in relabeled.hard.iter().enumerate() {
            writeln!(buf, "{i},{h}").expect("writing to memory");
        }
    } else {
        let scores = score_examples(&emb, &p, &sel_cfg)?;
        let sel = select(&scores, &p, &sel_cfg, a.beta)?;
        let mut rows = sel.selected.clone();
        rows.sort_unstable();
        for i in rows {
            writeln!(buf, "{i},{}", p.hard[i]).expect("writing to memory");
        }
    }
    dump_graph(&emb, &p, &a.selector)?;
    emit(a.out.as_deref(), &buf)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let (Some(val_emb_path), Some(val_gold_path)) = (&a.val_embeddings, &a.val_gold) else {
        return Err(Error::Parameter(
            "sweep needs validation gold labels: pass --val-embeddings and --val-gold".into(),
        ));
    };
    let emb = load_embeddings(&a.embeddings)?;
    let p = build_pseudolabels(&a.pseudo, a.seed, emb.n())?;
    let c = a.pseudo.num_classes;
    let train_gold = a
        .train_gold
        .as_deref()
        .map(|g| load_gold(g, c))
        .transpose()?;
    let val_emb = load_embeddings(val_emb_path)?;
    let val_gold = load_gold(val_gold_path, c)?;
    let test = match (&a.test_embeddings, &a.test_gold) {
        (Some(e), Some(g)) => Some((load_embeddings(e)?, load_gold(g, c)?)),
        _ => None,
    };
    for (name, e, g) in std::iter::once(("validation", &val_emb, &val_gold))
        .chain(test.as_ref().map(|(e, g)| ("test", e, g)))
    {
        if e.n() != g.len() {
            return Err(Error::Dimension(format!(
                "{name} split: {} embeddings but {} gold labels",
                e.n(),
                g.len()
            )));
        }
        if e.d() != emb.d() {
            return Err(Error::Dimension(format!(
                "{name} embeddings have dimension {}, training has {}",
                e.d(),
                emb.d()
            )));
        }
    }
    let inputs = SweepInputs {
        train: &emb,
        pseudo: &p,
        train_gold: train_gold.as_deref(),
        val: Split {
            embeddings: &val_emb,
            gold: &val_gold,
        },
        test: test.as_ref().map(|(e, g)| Split {
            embeddings: e,
            gold: g,
        }),
    };
    let train_cfg = TrainConfig {
        lr: a.lr,
        l2: a.l2,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        standardize: !a.raw_features,
    };
    let table = beta_sweep(&inputs, &a.selector.config(), &a.betas, &train_cfg)?;
    dump_graph(&emb, &p, &a.selector)?;

    let config = config_value("sweep", a);
    let mut buf = config_line(&config).into_bytes();
    table.write_csv(&mut buf).expect("writing to memory");
    emit(a.out.as_deref(), &buf)?;
    if let Some(path) = &a.summary {
        let doc = json!({
            "config": config,
            "rows": table.rows,
            "best": table.best_row(),
        });
        emit(Some(path), &pretty(&doc))?;
    }
    Ok(())
}

/// Checks the synth arguments before any work is done.
pub fn validate_synth_args(a: &SynthArgs) -> Result<Vec<TradeoffPoint>> {
    if !(a.alpha + a.gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "domain error: alpha + gamma must be < 1, got {}",
            a.alpha + a.gamma
        )));
    }
    let mut family = Vec::with_capacity(a.tradeoff.len());
    for spec in &a.tradeoff {
        let parts: Vec<&str> = spec.split(':').collect();
        let parsed: Vec<f64> = parts.iter().filter_map(|s| s.trim().parse().ok()).collect();
        if parts.len() != 3 || parsed.len() != 3 {
            return Err(Error::Parameter(format!(
                "tradeoff setting {spec:?} is not coverage:alpha:gamma"
            )));
        }
        if !(parsed[1] + parsed[2] < 1.0) {
            return Err(Error::Parameter(format!(
                "domain error: tradeoff setting {spec:?} has alpha + gamma >= 1"
            )));
        }
        family.push(TradeoffPoint {
            coverage: parsed[0],
            alpha: parsed[1],
            gamma: parsed[2],
        });
    }
    Ok(family)
}

fn cmd_synth_verify(a: &SynthArgs) -> Result<i32> {
    let family = validate_synth_args(a)?;
    let cfg = TwoViewConfig {
        n: a.n,
        alpha: a.alpha,
        gamma: a.gamma,
        abstain_rate: a.abstain_rate,
        class_prior: a.class_prior,
        view1_dim: a.dim,
        cluster_sep: a.sep,
        ..Default::default()
    };
    cfg.validate()?;
    let classifier = random_linear_classifier(a.dim, a.seed);
    let check = verify_balanced_error(&cfg, &classifier, a.seed)?;
    let passed = check.gap <= a.tolerance;

    let tradeoff = if a.no_tradeoff || family.is_empty() {
        None
    } else {
        let base = TwoViewConfig {
            n: a.tradeoff_n,
            ..cfg
        };
        let seeds: Vec<u64> = (0..a.tradeoff_seeds).map(|s| a.seed + s).collect();
        Some(tradeoff_curve(
            &base,
            &family,
            &seeds,
            &TrainConfig::default(),
        )?)
    };
    let config = config_value("synth-verify", a);
    if let (Some(rows), Some(path)) = (&tradeoff, &a.tradeoff_out) {
        let mut buf = config_line(&config).into_bytes();
        write_tradeoff_csv(&mut buf, rows).expect("writing to memory");
        emit(Some(path), &buf)?;
    }
    let doc = json!({
        "config": config,
        "check": check,
        "passed": passed,
        "tradeoff": tradeoff,
    });
    emit(a.out.as_deref(), &pretty(&doc))?;
    if passed {
        Ok(0)
    } else {
        eprintln!(
            "error: balanced-error gap {} exceeds tolerance {}",
            check.gap, a.tolerance
        );
        Ok(3)
    }
}
