//! Acceptance suite: one line per criterion, `PASS` or `FAIL` with the
//! measured quantities. Run a subset with
//! `cargo test --test acceptance -- 3 7`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use cutstat::data::{
    write_embeddings, write_gold, write_label_matrix, EmbeddingMatrix, LabelMatrix, ABSTAIN,
};
use cutstat::end_model::{
    beta_sweep, SelectorConfig, Split, SweepInputs, TrainConfig, DEFAULT_BETAS,
};
use cutstat::graph::{knn_brute_force, symmetrize};
use cutstat::label_models::{dawid_skene_fit_traced, DawidSkeneConfig, DawidSkeneModel};
use cutstat::selectors::{cut_statistic_scores, relabel_by_neighbors, select_top_beta};
use cutstat::synth::{
    generate, random_linear_classifier, sample_dawid_skene, tradeoff_curve, verify_balanced_error,
    TradeoffPoint, TwoViewConfig,
};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Outcome;

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, Criterion); 11] = [
        ("cut-statistic exactness", cut_statistic_exactness),
        ("kNN exactness", knn_exactness),
        ("balanced-error relation", balanced_error_verification),
        ("coverage/noise tradeoff", tradeoff),
        ("subset accuracy vs beta", subset_accuracy_curve),
        ("end-model gain", end_model_gain),
        ("relabel vs select", relabel_vs_select),
        ("Dawid-Skene recovery", dawid_skene_recovery),
        ("null calibration", null_calibration),
        ("performance", performance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (idx, (name, run)) in criteria.iter().enumerate() {
        let number = idx + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {number:>2} {verdict} {name}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn cut_statistic_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let n = rng.gen_range(12..=200);
        let d = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=4);
        let emb = random_points(&mut rng, n, d, inst % 3 == 0);
        let p = random_pseudo(&mut rng, n, c, 0.2);
        let covered = p.covered();
        let k = rng.gen_range(1..=10).min(covered.len() - 1);
        let labels: Vec<i32> = covered.iter().map(|&i| p.hard[i]).collect();

        let lists = oracle_knn(&emb, &covered, k);
        let g = knn_brute_force(&emb, &covered, k).unwrap();
        for (graph, oracle) in [
            (g.clone(), lists.clone()),
            (symmetrize(&g), oracle_symmetrize(&lists)),
        ] {
            let z = cut_statistic_scores(&graph, &p).unwrap();
            let expected = oracle_z(&oracle, &labels, c);
            for (a, b) in z.values.iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let chain = EmbeddingMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
    let p = cutstat::PseudoLabeling::hard_only(vec![1, 1, 0], 2).unwrap();
    let z = cut_statistic_scores(&knn_brute_force(&chain, &[0, 1, 2], 1).unwrap(), &p).unwrap();
    let fixture_ok =
        (z.values[0] + 0.5f64.sqrt()).abs() < 1e-12 && (z.values[2] - 0.5f64.sqrt()).abs() < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-10 && fixture_ok && secs < 10.0,
        format!(
            "max |Z - oracle| = {worst:.2e} over 200 instances x 2 graphs; chain Z = [{:.5}, {:.5}, {:.5}]; {secs:.2}s",
            z.values[0], z.values[1], z.values[2]
        ),
    )
}

fn knn_exactness() -> Outcome {
    let mut rng = seeded(2);
    let mut mismatches = 0;
    for inst in 0..100 {
        let n = rng.gen_range(3..=400);
        let d = rng.gen_range(1..=16);
        let emb = random_points(&mut rng, n, d, inst % 2 == 0);
        let covered: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < 0.85).collect();
        if covered.len() < 2 {
            continue;
        }
        let k = rng.gen_range(1..covered.len().min(25));
        let oracle = oracle_knn(&emb, &covered, k);
        let sym_oracle = oracle_symmetrize(&oracle);
        let g = knn_brute_force(&emb, &covered, k).unwrap();
        let s = symmetrize(&g);
        for (graph, expected) in [(&g, &oracle), (&s, &sym_oracle)] {
            for (i, exp) in expected.iter().enumerate() {
                let ids: Vec<usize> = exp.iter().map(|e| e.0).collect();
                let weights: Vec<f64> = exp.iter().map(|e| 1.0 / (1.0 + e.1.sqrt())).collect();
                if graph.neighbors(i) != ids.as_slice() || graph.weights(i) != weights.as_slice() {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{mismatches} neighbor lists differ from the full-sort oracle (100 instances, asymmetric and symmetrized)"),
    )
}

fn balanced_error_verification() -> Outcome {
    let settings = [
        (0.1, 0.15),
        (0.05, 0.05),
        (0.2, 0.1),
        (0.3, 0.3),
        (0.1, 0.45),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (s, &(alpha, gamma)) in settings.iter().enumerate() {
        let start = Instant::now();
        let cfg = TwoViewConfig {
            n: 200_000,
            alpha,
            gamma,
            abstain_rate: if s % 2 == 0 { 0.0 } else { 0.3 },
            view1_dim: 4,
            ..Default::default()
        };
        let clf = random_linear_classifier(cfg.view1_dim, 100 + s as u64);
        let check = verify_balanced_error(&cfg, &clf, s as u64).unwrap();
        let secs = start.elapsed().as_secs_f64();
        ok &= check.gap <= 0.01 && secs < 60.0;
        parts.push(format!(
            "({alpha},{gamma}): gold {:.4} predicted {:.4} gap {:.4}",
            check.measured, check.predicted, check.gap
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

fn tradeoff() -> Outcome {
    let base = TwoViewConfig {
        n: 20_000,
        cluster_sep: 2.0,
        view1_dim: 400,
        ..Default::default()
    };
    let family = [
        TradeoffPoint {
            coverage: 0.5,
            alpha: 0.05,
            gamma: 0.05,
        },
        TradeoffPoint {
            coverage: 1.0,
            alpha: 0.3,
            gamma: 0.3,
        },
    ];
    let seeds: Vec<u64> = (0..10).collect();
    let rows = tradeoff_curve(&base, &family, &seeds, &TrainConfig::default()).unwrap();
    let gap = rows[1].mean_test_bal_err - rows[0].mean_test_bal_err;
    Outcome::new(
        gap >= 0.02,
        format!(
            "test balanced error {:.4} (coverage 0.5, noise 0.05) vs {:.4} (coverage 1.0, noise 0.3), gap {gap:.4}, d = {}",
            rows[0].mean_test_bal_err, rows[1].mean_test_bal_err, base.view1_dim
        ),
    )
}

const FIXTURE_SEEDS: u64 = 5;
const FIXTURE_N: usize = 10_000;

/// Per-seed subset accuracy of cut-statistic selection and relabel accuracy
/// change, at every beta of the default grid.
fn fixture_curves() -> (Vec<f64>, Vec<f64>, f64) {
    let mut subset = vec![0.0; DEFAULT_BETAS.len()];
    let mut relabel_delta = vec![0.0; DEFAULT_BETAS.len()];
    let mut base_acc = 0.0;
    for seed in 0..FIXTURE_SEEDS {
        let s = generate(&boundary_fixture(FIXTURE_N), seed).unwrap();
        let p = s.pseudolabeling();
        let g = knn_brute_force(&s.features, &p.covered(), 20).unwrap();
        let z = cut_statistic_scores(&g, &p).unwrap();
        let acc0 = accuracy(&p.hard, &s.gold);
        base_acc += acc0 / FIXTURE_SEEDS as f64;
        for (b, &beta) in DEFAULT_BETAS.iter().enumerate() {
            let sel = select_top_beta(&z, beta).unwrap();
            let hard: Vec<i32> = sel.selected.iter().map(|&i| p.hard[i]).collect();
            let gold: Vec<u32> = sel.selected.iter().map(|&i| s.gold[i]).collect();
            subset[b] += accuracy(&hard, &gold) / FIXTURE_SEEDS as f64;
            let relabeled = relabel_by_neighbors(&g, &p, &z, beta).unwrap();
            relabel_delta[b] += (accuracy(&relabeled.hard, &s.gold) - acc0) / FIXTURE_SEEDS as f64;
        }
    }
    (subset, relabel_delta, base_acc)
}

fn beta_index(beta: f64) -> usize {
    DEFAULT_BETAS
        .iter()
        .position(|&b| (b - beta).abs() < 1e-12)
        .unwrap()
}

fn subset_accuracy_curve() -> Outcome {
    let (subset, _, _) = fixture_curves();
    let at_half = subset[beta_index(0.5)];
    let at_full = subset[beta_index(1.0)];
    let worst_rise = subset
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let curve: Vec<String> = subset.iter().map(|a| format!("{a:.4}")).collect();
    Outcome::new(
        at_half - at_full >= 0.05 && worst_rise <= 0.01,
        format!(
            "beta 0.5: {at_half:.4}, beta 1.0: {at_full:.4}; largest rise with beta {:+.4}; curve [{}]",
            worst_rise,
            curve.join(", ")
        ),
    )
}

fn end_model_gain() -> Outcome {
    let mut gain = 0.0;
    let mut best_betas = Vec::new();
    for seed in 0..FIXTURE_SEEDS {
        let cfg = boundary_fixture(FIXTURE_N);
        let s = generate(&cfg, seed).unwrap();
        let clean = TwoViewConfig {
            alpha: 0.0,
            gamma: 0.0,
            boundary_noise: false,
            ..cfg
        };
        let val = generate(&TwoViewConfig { n: 2_000, ..clean }, 1_000 + seed).unwrap();
        let test = generate(&TwoViewConfig { n: 10_000, ..clean }, 2_000 + seed).unwrap();
        let p = s.pseudolabeling();
        let inputs = SweepInputs {
            train: &s.features,
            pseudo: &p,
            train_gold: Some(&s.gold),
            val: Split {
                embeddings: &val.features,
                gold: &val.gold,
            },
            test: Some(Split {
                embeddings: &test.features,
                gold: &test.gold,
            }),
        };
        let table = beta_sweep(
            &inputs,
            &SelectorConfig::default(),
            &DEFAULT_BETAS,
            &TrainConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let best = table.best_row();
        let full = table.rows.last().unwrap();
        gain += (best.test_accuracy.unwrap() - full.test_accuracy.unwrap()) / FIXTURE_SEEDS as f64;
        best_betas.push(best.beta);
    }
    Outcome::new(
        gain >= 0.02,
        format!("mean test accuracy gain of best-validation beta over beta 1.0: {gain:+.4}; best betas {best_betas:?}"),
    )
}

fn relabel_vs_select() -> Outcome {
    let (subset, delta, base) = fixture_curves();
    let mut ok = true;
    let mut parts = Vec::new();
    for beta in [0.2, 0.3] {
        let b = beta_index(beta);
        ok &= delta[b] <= 0.0 && subset[b] >= 0.95;
        parts.push(format!(
            "beta {beta}: relabel change {:+.4}, selected subset accuracy {:.4}",
            delta[b], subset[b]
        ));
    }
    Outcome::new(
        ok,
        format!("full-set accuracy {base:.4}; {}", parts.join("; ")),
    )
}

fn random_ds_model(
    rng: &mut rand_chacha::ChaCha8Rng,
    m: usize,
    prior: Vec<f64>,
) -> DawidSkeneModel {
    let c = prior.len();
    let mut conf = Vec::with_capacity(m * c * (c + 1));
    for _ in 0..m {
        for y in 0..c {
            let abstain: f64 = rng.gen_range(0.05..0.4);
            let acc: f64 = rng.gen_range(0.6..0.9);
            let others: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(0.5..1.5)).collect();
            let total: f64 = others.iter().sum();
            let mut it = others.iter();
            for col in 0..c {
                conf.push(if col == y {
                    (1.0 - abstain) * acc
                } else {
                    (1.0 - abstain) * (1.0 - acc) * it.next().unwrap() / total
                });
            }
            conf.push(abstain);
        }
    }
    DawidSkeneModel::new(prior, conf, m).unwrap()
}

fn dawid_skene_recovery() -> Outcome {
    let mut rng = seeded(8);
    let mut ok = true;
    let mut parts = Vec::new();
    for prior in [vec![0.4, 0.6], vec![0.2, 0.3, 0.25, 0.25]] {
        let c = prior.len();
        let truth = random_ds_model(&mut rng, 5, prior);
        let (labels, _) = sample_dawid_skene(&truth, 10_000, c as u64).unwrap();
        let fit = dawid_skene_fit_traced(&labels, &DawidSkeneConfig::default()).unwrap();
        let mut worst = 0.0f64;
        for k in 0..5 {
            for y in 0..c {
                for col in 0..=c {
                    worst = worst
                        .max((fit.model.confusion(k, y, col) - truth.confusion(k, y, col)).abs());
                }
            }
        }
        let monotone = |t: &[f64]| t.windows(2).all(|w| w[1] >= w[0]);
        let obj_mono = monotone(&fit.objective_trace);
        let ll_mono = monotone(&fit.log_likelihood_trace);
        ok &= worst <= 0.05 && obj_mono && ll_mono;
        parts.push(format!(
            "C={c}: max confusion error {worst:.4}, {} iterations, log-likelihood monotone {ll_mono}, penalized objective monotone {obj_mono}",
            fit.log_likelihood_trace.len()
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

fn null_calibration() -> Outcome {
    let mut ok = true;
    let mut means = Vec::new();
    for seed in 0..3 {
        let mut rng = seeded(90 + seed);
        let n = 5_000;
        let emb = random_points(&mut rng, n, 8, false);
        let marginal = [0.3, 0.5, 0.2];
        let hard: Vec<i32> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < marginal[0] {
                    0
                } else if u < marginal[0] + marginal[1] {
                    1
                } else {
                    2
                }
            })
            .collect();
        let p = cutstat::PseudoLabeling::hard_only(hard, 3).unwrap();
        let g = knn_brute_force(&emb, &p.covered(), 20).unwrap();
        let z = cut_statistic_scores(&g, &p).unwrap();
        let mean = z.values.iter().sum::<f64>() / z.len() as f64;
        ok &= mean.abs() <= 0.1;
        means.push(format!("{mean:+.4}"));
    }
    Outcome::new(
        ok,
        format!("mean Z over 5000 nodes, 3 draws: [{}]", means.join(", ")),
    )
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn performance() -> Outcome {
    let n = 50_000;
    let cfg = TwoViewConfig {
        n,
        alpha: 0.2,
        gamma: 0.2,
        view1_dim: 128,
        cluster_sep: 3.0,
        ..Default::default()
    };
    let s = generate(&cfg, 10).unwrap();
    let clean = TwoViewConfig {
        alpha: 0.0,
        gamma: 0.0,
        n: 5_000,
        ..cfg
    };
    let val = generate(&clean, 11).unwrap();
    let test = generate(&clean, 12).unwrap();
    let p = s.pseudolabeling();
    let threads = rayon::current_num_threads();
    let start = Instant::now();
    let inputs = SweepInputs {
        train: &s.features,
        pseudo: &p,
        train_gold: Some(&s.gold),
        val: Split {
            embeddings: &val.features,
            gold: &val.gold,
        },
        test: Some(Split {
            embeddings: &test.features,
            gold: &test.gold,
        }),
    };
    let table = beta_sweep(
        &inputs,
        &SelectorConfig::default(),
        &DEFAULT_BETAS,
        &TrainConfig::default(),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rss = peak_rss_mb().unwrap_or(f64::NAN);
    Outcome::new(
        secs < 300.0 && table.rows.len() == 10 && rss.partial_cmp(&4096.0) != Some(std::cmp::Ordering::Greater),
        format!(
            "n = {n}, d = 128, K = 20, 10 betas: {secs:.1}s on {threads} thread(s), peak resident memory {rss:.0} MB"
        ),
    )
}

fn write_cli_fixture(dir: &Path) {
    let s = generate(&boundary_fixture(1_500), 77).unwrap();
    let mut rng = seeded(78);
    let n = s.gold.len();
    let mut votes = Vec::with_capacity(n * 3);
    for i in 0..n {
        for _ in 0..3 {
            let u: f64 = rng.gen();
            votes.push(if u < 0.2 {
                ABSTAIN
            } else if u < 0.3 {
                1 - s.pseudo[i]
            } else {
                s.pseudo[i]
            });
        }
    }
    write_label_matrix(
        &dir.join("labels.csv"),
        &LabelMatrix::new(votes, n, 3, 2).unwrap(),
    )
    .unwrap();
    std::fs::write(
        dir.join("pseudo.csv"),
        s.pseudo
            .iter()
            .map(|p| format!("{p}\n"))
            .collect::<String>(),
    )
    .unwrap();
    write_embeddings(&dir.join("train.bin"), &s.features).unwrap();
    write_gold(&dir.join("train_gold.csv"), &s.gold).unwrap();
    let clean = TwoViewConfig {
        alpha: 0.0,
        gamma: 0.0,
        boundary_noise: false,
        n: 500,
        ..boundary_fixture(500)
    };
    let val = generate(&clean, 79).unwrap();
    let test = generate(&clean, 80).unwrap();
    write_embeddings(&dir.join("val.bin"), &val.features).unwrap();
    write_gold(&dir.join("val_gold.csv"), &val.gold).unwrap();
    write_embeddings(&dir.join("test.bin"), &test.features).unwrap();
    write_gold(&dir.join("test_gold.csv"), &test.gold).unwrap();
}

/// Runs every command into `out` and returns the produced files' bytes.
fn run_all_commands(inputs: &Path, out: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    std::fs::create_dir_all(out).unwrap();
    let i = |f: &str| inputs.join(f).display().to_string();
    let o = |f: &str| out.join(f).display().to_string();
    let runs: Vec<Vec<String>> = vec![
        vec![
            "score",
            "--embeddings",
            &i("train.bin"),
            "--labels",
            &i("labels.csv"),
            "--label-model",
            "ds",
            "--dump-model",
            &o("ds.json"),
            "--dump-graph",
            &o("graph.csv"),
            "--seed",
            "3",
            "--out",
            &o("score_ds.csv"),
        ],
        vec![
            "score",
            "--embeddings",
            &i("train.bin"),
            "--labels",
            &i("labels.csv"),
            "--selector",
            "entropy",
            "--out",
            &o("score_entropy.csv"),
        ],
        vec![
            "score",
            "--embeddings",
            &i("train.bin"),
            "--pseudolabels",
            &i("pseudo.csv"),
            "--symmetric-graph",
            "--k",
            "10",
            "--out",
            &o("score_sym.csv"),
        ],
        vec![
            "select",
            "--embeddings",
            &i("train.bin"),
            "--labels",
            &i("labels.csv"),
            "--beta",
            "0.4",
            "--out",
            &o("select.csv"),
        ],
        vec![
            "select",
            "--embeddings",
            &i("train.bin"),
            "--labels",
            &i("labels.csv"),
            "--stratified",
            "--prior",
            "0.5,0.5",
            "--beta",
            "0.4",
            "--out",
            &o("select_strat.csv"),
        ],
        vec![
            "select",
            "--embeddings",
            &i("train.bin"),
            "--pseudolabels",
            &i("pseudo.csv"),
            "--relabel",
            "--beta",
            "0.3",
            "--out",
            &o("relabel.csv"),
        ],
        vec![
            "sweep",
            "--embeddings",
            &i("train.bin"),
            "--labels",
            &i("labels.csv"),
            "--label-model",
            "ds",
            "--train-gold",
            &i("train_gold.csv"),
            "--val-embeddings",
            &i("val.bin"),
            "--val-gold",
            &i("val_gold.csv"),
            "--test-embeddings",
            &i("test.bin"),
            "--test-gold",
            &i("test_gold.csv"),
            "--seed",
            "5",
            "--out",
            &o("sweep.csv"),
            "--summary",
            &o("sweep.json"),
        ],
        vec![
            "synth-verify",
            "--n",
            "20000",
            "--tradeoff-n",
            "2000",
            "--tradeoff-seeds",
            "2",
            "--seed",
            "4",
            "--out",
            &o("synth.json"),
            "--tradeoff-out",
            &o("tradeoff.csv"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for args in &runs {
        let status = Command::new(env!("CARGO_BIN_EXE_cutstat"))
            .args(args)
            .env("CUTSTAT_THREADS", threads.to_string())
            .status()
            .unwrap();
        assert!(status.success(), "command {args:?} failed with {status}");
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_cli_fixture(dir.path());
    // Same output paths each time: they are part of the embedded config.
    let out = dir.path().join("out");
    let a = run_all_commands(dir.path(), &out, 1);
    std::fs::remove_dir_all(&out).unwrap();
    let b = run_all_commands(dir.path(), &out, 4);
    std::fs::remove_dir_all(&out).unwrap();
    let c = run_all_commands(dir.path(), &out, 4);
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .zip(&c)
        .filter(|((x, y), z)| x != y || x != z)
        .map(|((x, _), _)| x.0.as_str())
        .collect();
    Outcome::new(
        differing.is_empty() && a.len() == 12,
        format!(
            "{} artifacts from 8 commands compared across 3 runs (1, 4, 4 threads); differing: {differing:?}",
            a.len()
        ),
    )
}
