//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion and then asserts it.
//!
//! Criteria 4, 5, 6 and 8 share one ablation run on the synthetic
//! acceptance dataset, built once per process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ciml::dataset::{generate_synthetic, make_splits, MultiViewDataset, OracleInfo, SyntheticSpec};
use ciml::evaluation::{
    accuracy_spread, compute_metrics, independence_audit, run_ablation_detailed, sufficiency_check, sweep,
    Metrics, ProbeConfig, SweepGrid, TrialOutcome, Variant,
};
use ciml::encoder::StochasticEncoding;
use ciml::info::{kl_to_standard_normal, MineProbe, MineProbeConfig};
use ciml::rng::{self, Rng};
use ciml::trainer::{self, FrozenNoise, Objective, PreparedData, TrainConfig};
use ciml::Mat;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

const ABLATION_TRIALS: usize = 5;
const SWEEP_TRIALS: usize = 3;

/// Tests run one at a time so their runtime gates see a quiet machine.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes past the test harness capture so passing criteria are logged too.
fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion:>2} {verdict} {name}: {detail}").unwrap();
    out.flush().unwrap();
}

/// Synthetic dataset with Bayes accuracy about 69% from the common factors
/// alone, 60% from the unique factors alone and 95% from both.
fn acceptance_spec() -> SyntheticSpec {
    SyntheticSpec {
        n: 2000,
        v: 2,
        m: 3,
        dim_common: 4,
        dim_unique: 4,
        view_dims: vec![16, 16],
        noise_std: 0.1,
        label_mix: vec![1.0, 0.85, 0.85],
        label_scale: 10.0,
        seed: 0,
    }
}

fn acceptance_config() -> TrainConfig {
    TrainConfig {
        dim_common: 2,
        dim_unique: 2,
        ..Default::default()
    }
}

struct Acceptance {
    dataset: MultiViewDataset,
    oracle: OracleInfo,
    runs: Vec<(Variant, Vec<TrialOutcome>)>,
    seconds: f64,
}

impl Acceptance {
    fn outcomes(&self, variant: Variant) -> &[TrialOutcome] {
        &self.runs.iter().find(|r| r.0 == variant).expect("variant present").1
    }

    fn mean_acc(&self, variant: Variant) -> f64 {
        let o = self.outcomes(variant);
        o.iter().map(|t| t.result.metrics.acc).sum::<f64>() / o.len() as f64
    }
}

fn acceptance() -> &'static Acceptance {
    static RUN: OnceLock<Acceptance> = OnceLock::new();
    RUN.get_or_init(|| {
        let (dataset, oracle) = generate_synthetic(&acceptance_spec()).unwrap();
        let start = Instant::now();
        let runs = run_ablation_detailed(&acceptance_config(), &dataset, ABLATION_TRIALS).unwrap();
        Acceptance {
            dataset,
            oracle,
            runs,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_01_closed_form_kl() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let rows = rng.random_range(1..20);
        let dims = rng.random_range(1..10);
        let mean = Mat::from_shape_fn((rows, dims), |_| rng.random_range(-3.0..3.0));
        let logvar = Mat::from_shape_fn((rows, dims), |_| rng.random_range(-4.0..4.0));
        let enc = StochasticEncoding::from_logvar(mean.clone(), &logvar).unwrap();
        let got = kl_to_standard_normal(&enc);
        let mut oracle = 0.0;
        for (m, lv) in mean.iter().zip(logvar.iter()) {
            let var = lv.exp();
            oracle += 0.5 * (var + m * m - 1.0 - lv);
        }
        oracle /= rows as f64;
        worst = worst.max((got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && seconds < 1.0;
    report(1, "closed-form KL", pass, &format!("max rel err {worst:.2e} (< 1e-8), {seconds:.3}s (< 1s)"));
    assert!(pass);
}

fn gaussian_pair(rho: f64, n: usize, seed: u64) -> (Mat, Mat) {
    let mut rng = Rng::seed_from_u64(seed);
    let mut a = Mat::zeros((n, 1));
    let mut b = Mat::zeros((n, 1));
    for r in 0..n {
        let x: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        a[[r, 0]] = x;
        b[[r, 0]] = rho * x + (1.0 - rho * rho).sqrt() * e;
    }
    (a, b)
}

#[test]
fn criterion_02_mine_gaussian_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let config = MineProbeConfig::default();
    let n = 10_000;
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, rho) in [0.3f64, 0.6, 0.9, 0.0].into_iter().enumerate() {
        let (a, b) = gaussian_pair(rho, n, 100 + k as u64);
        let (a_eval, b_eval) = gaussian_pair(rho, n, 200 + k as u64);
        let probe = MineProbe::fit(&a, &b, &config, k as u64).unwrap();
        let est = probe.estimate(&a_eval, &b_eval, config.eval_shuffles, k as u64).unwrap();
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let ok = if rho == 0.0 { est <= 0.05 } else { (est - truth).abs() <= 0.1 };
        pass &= ok;
        lines.push(format!("rho {rho}: {est:.4} vs {truth:.4}"));
    }
    let seconds = start.elapsed().as_secs_f64();
    pass &= seconds < 120.0;
    report(
        2,
        "MINE Gaussian oracle",
        pass,
        &format!("{} (±0.1, independent ≤ 0.05), {seconds:.1}s (< 120s)", lines.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_check() {
    let _serial = serial();
    let start = Instant::now();
    let spec = SyntheticSpec {
        n: 32,
        v: 2,
        m: 2,
        dim_common: 2,
        dim_unique: 2,
        view_dims: vec![4, 4],
        noise_std: 0.1,
        label_mix: vec![1.0, 0.5, 0.5],
        label_scale: 3.0,
        seed: 3,
    };
    let (ds, _) = generate_synthetic(&spec).unwrap();
    let config = TrainConfig {
        dim_common: 2,
        dim_unique: 2,
        hidden_dims: vec![6],
        head_hidden_dims: vec![6],
        mine_hidden_dims: vec![6],
        ..Default::default()
    };
    let splits = make_splits(&ds, 0.8, 5).unwrap();
    let mut state = trainer::init_state(&config, &ds, &splits).unwrap();
    // Move C off the cross-view mean so the alignment gradient is not zero.
    let mut perturb = Rng::seed_from_u64(9);
    for p in state.params.values_mut() {
        p.mapv_inplace(|x| x + 0.1 * perturb.random_range(-1.0..1.0));
    }
    let data = PreparedData::new(&ds, &splits, &state.standardizer);
    let positions: Vec<usize> = (0..splits.train.len()).collect();
    let noise = FrozenNoise::draw(
        &config,
        2,
        positions.len(),
        &mut rng::substream(1, rng::NOISE, 0),
        &mut rng::substream(1, rng::MINE_SHUFFLE, 0),
    );

    let h = 1e-6;
    let mut worst = BTreeMap::new();
    for objective in [Objective::Ce, Objective::Common, Objective::Unique, Objective::Total] {
        let (_, grads) = trainer::objective_and_grads(&state, &data, &positions, &noise, objective).unwrap();
        let mut max_err: f64 = 0.0;
        for (p, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let shape = g.dim();
                let at = (idx / shape.1, idx % shape.1);
                let eval = |d: f64| {
                    let mut s = state.clone();
                    s.params.values_mut()[p][at] += d;
                    trainer::objective_and_grads(&s, &data, &positions, &noise, objective).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[at];
                max_err = max_err.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
            }
        }
        worst.insert(format!("{objective:?}"), max_err);
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = worst.values().all(|&e| e < 1e-4) && seconds < 60.0;
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", ");
    report(3, "gradient check", pass, &format!("max rel err {detail} (< 1e-4), {seconds:.1}s (< 60s)"));
    assert!(pass);
}

#[test]
fn criterion_04_ablation_ordering() {
    let _serial = serial();
    let run = acceptance();
    let o = &run.oracle;
    let full = run.mean_acc(Variant::Full);
    let v1 = run.mean_acc(Variant::V1);
    let v2 = run.mean_acc(Variant::V2);
    let pass = full - v1 >= 5.0 && full - v2 >= 5.0 && run.seconds < 600.0;
    report(
        4,
        "ablation ordering",
        pass,
        &format!(
            "oracle common {:.1}% unique {:.1}% joint {:.1}%; CIML {full:.2}%, CIML-v1 {v1:.2}%, CIML-v2 {v2:.2}% \
             (margin ≥ 5 points), {:.0}s (< 600s)",
            100.0 * o.bayes_common,
            100.0 * o.bayes_unique,
            100.0 * o.bayes_joint,
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_independence_audit() {
    let _serial = serial();
    let run = acceptance();
    let start = Instant::now();
    let outcome = &run.outcomes(Variant::Full)[0];
    let probe = MineProbeConfig::default();
    let trained = independence_audit(&outcome.state, &run.dataset, &outcome.splits, &probe, 0).unwrap();
    let config = TrainConfig {
        seed: outcome.result.trial_seed,
        ..acceptance_config()
    };
    let fresh = trainer::init_state(&config, &run.dataset, &outcome.splits).unwrap();
    let untrained = independence_audit(&fresh, &run.dataset, &outcome.splits, &probe, 0).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let mut pass = seconds < 300.0;
    let mut lines = Vec::new();
    for ((name, t), (_, u)) in trained.entries().into_iter().zip(untrained.entries()) {
        pass &= t <= 0.1 && t <= 0.5 * u;
        lines.push(format!("{name} {t:.4} (untrained {u:.4})"));
    }
    report(
        5,
        "independence audit",
        pass,
        &format!("{} (≤ 0.1 and ≤ 50% of untrained), {seconds:.1}s (< 300s)", lines.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_06_convergence() {
    let _serial = serial();
    let run = acceptance();
    let mut pass = true;
    let mut lines = Vec::new();
    for (variant, outcomes) in &run.runs {
        for o in outcomes {
            let r = &o.history.records;
            let l1 = r[0].loss.total;
            let l50 = r[49].loss.total;
            let l100 = r[99].loss.total;
            pass &= l50 < l1;
            if *variant == Variant::Full {
                let drop = l1 - l100;
                pass &= (l50 - l100).abs() < 0.05 * drop;
                lines.push(format!("L1 {l1:.3} L50 {l50:.3} L100 {l100:.3}"));
            }
        }
    }
    report(
        6,
        "convergence",
        pass,
        &format!(
            "L50 < L1 on all {} runs; CIML trials {} (|L50 - L100| < 5% of L1 - L100)",
            run.runs.iter().map(|r| r.1.len()).sum::<usize>(),
            lines.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_beta_insensitivity() {
    let _serial = serial();
    let (dataset, _) = generate_synthetic(&acceptance_spec()).unwrap();
    let start = Instant::now();
    let grid = SweepGrid::Beta12 {
        beta1: vec![1e-6, 1e-4, 1e-2],
        beta2: vec![1e-6, 1e-4, 1e-2],
    };
    let cells = sweep(&acceptance_config(), &dataset, &grid, SWEEP_TRIALS).unwrap();
    let spread = accuracy_spread(&cells);
    let seconds = start.elapsed().as_secs_f64();
    let pass = spread < 3.0 && seconds < 1200.0;
    let accs = cells.iter().map(|c| format!("{:.2}", c.report.acc.mean)).collect::<Vec<_>>().join(" ");
    report(
        7,
        "beta insensitivity",
        pass,
        &format!("cell accuracies [{accs}], spread {spread:.2} points (< 3), {seconds:.0}s (< 1200s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_predictive_sufficiency() {
    let _serial = serial();
    let run = acceptance();
    let outcome = &run.outcomes(Variant::Full)[0];
    let s = sufficiency_check(&outcome.state, &run.dataset, &outcome.splits, &ProbeConfig::default()).unwrap();
    let pass = s.gap.abs() <= 0.15;
    report(
        8,
        "predictive sufficiency",
        pass,
        &format!(
            "CE(Z) {:.4}, CE(X) {:.4}, gap {:.4} nats (≤ 0.15)",
            s.ce_representation, s.ce_views, s.gap
        ),
    );
    assert!(pass);
}

/// Macro metrics from an explicit confusion matrix.
fn confusion_oracle(y_true: &[usize], y_pred: &[usize], m: usize) -> Metrics {
    let mut cm = vec![vec![0usize; m]; m];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm[t][p] += 1;
    }
    let n = y_true.len();
    let diag: usize = (0..m).map(|k| cm[k][k]).sum();
    let present: Vec<usize> = (0..m)
        .filter(|&k| (0..m).any(|j| cm[k][j] > 0 || cm[j][k] > 0))
        .collect();
    let (mut p_sum, mut f_sum, mut wp, mut wf) = (0.0, 0.0, 0.0, 0.0);
    for &k in &present {
        let tp = cm[k][k] as f64;
        let support: usize = (0..m).map(|j| cm[k][j]).sum();
        let predicted: usize = (0..m).map(|j| cm[j][k]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let f1 = if support + predicted == 0 {
            0.0
        } else {
            2.0 * tp / (support + predicted) as f64
        };
        p_sum += precision;
        f_sum += f1;
        let weight = support as f64 / n as f64;
        wp += weight * precision;
        wf += weight * f1;
    }
    let c = present.len() as f64;
    Metrics {
        acc: 100.0 * (diag as f64 / n as f64),
        precision: 100.0 * p_sum / c,
        f1: 100.0 * f_sum / c,
        weighted_precision: 100.0 * wp,
        weighted_f1: 100.0 * wf,
    }
}

#[test]
fn criterion_09_metric_oracle() {
    let _serial = serial();
    let mut rng = Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut cases = 0;
    for m in [2usize, 7, 21] {
        for _ in 0..1000 {
            let n = rng.random_range(1..200);
            let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let y_pred: Vec<usize> = y_true
                .iter()
                .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..m) })
                .collect();
            cases += 1;
            if compute_metrics(&y_true, &y_pred, m).unwrap() != confusion_oracle(&y_true, &y_pred, m) {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(9, "metric oracle", pass, &format!("{mismatches} mismatches in {cases} cases (exact)"));
    assert!(pass);
}

fn train_once(config: &Path, root: &Path) -> (String, f64) {
    let status = Command::new(env!("CARGO_BIN_EXE_ciml"))
        .arg("--output-root")
        .arg(root)
        .args(["train", "--out", "run", "--config"])
        .arg(config)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let history = std::fs::read_to_string(root.join("run/history.jsonl")).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("run/metrics.json")).unwrap()).unwrap();
    (history, metrics["acc"]["mean"].as_f64().unwrap())
}

#[test]
fn criterion_10_determinism() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = ciml::config::RunConfig {
        trials: 1,
        data: ciml::config::DataConfig {
            manifest: None,
            synthetic: Some(acceptance_spec()),
        },
        train: acceptance_config(),
        ..Default::default()
    };
    let path = dir.path().join("config.toml");
    std::fs::write(&path, config.to_toml().unwrap()).unwrap();
    let (h1, a1) = train_once(&path, &dir.path().join("a"));
    let (h2, a2) = train_once(&path, &dir.path().join("b"));
    let epochs = h1.lines().count();
    let pass = h1 == h2 && a1 == a2 && epochs == acceptance_config().epochs;
    report(
        10,
        "determinism",
        pass,
        &format!("{epochs} history lines identical: {}, test accuracy {a1:.2}% vs {a2:.2}%", h1 == h2),
    );
    assert!(pass);
}
