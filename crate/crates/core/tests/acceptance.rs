//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=C3,C5` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use evfuse::alignment::{instance_contrastive_loss, salience_and_anchors, token_step_similarity, top_k_indices};
use evfuse::checkpoint;
use evfuse::checks::run_module;
use evfuse::config::Config;
use evfuse::datagen::{generate, ingest, write_jsonl, IngestOptions};
use evfuse::fusion::{responsibility, Gate, GateConfig};
use evfuse::gradcheck::GradCheckOptions;
use evfuse::metrics::{compare_branches, dhr, format_scaled, scale_dhr, scale_mse, write_metrics_csv, Scaling};
use evfuse::model::{ModelConfig, Stage};
use evfuse::pipeline::run_training;
use evfuse::tensor::sigmoid;
use evfuse::{ParamGroup, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

type Criterion = (&'static str, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", cells.join(", "))
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for name in ["forecast", "ctr", "tok", "gate", "total"] {
        for seed in 0..20 {
            let opts = GradCheckOptions {
                max_entries_per_param: Some(6),
                seed,
                ..GradCheckOptions::default()
            };
            let r = run_module(name, seed, opts).expect("grad check runs");
            worst = worst.max(r.max_rel_err);
            if !r.passed {
                failures.push(format!("{name}/seed {seed}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "5 losses x 20 seeds, worst relative error {worst:.2e} (tol 1e-4), {:.1}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {failures:?}")
            }
        ),
    )
}

fn gate_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = GateConfig::default();
    let mut max_sum_err: f64 = 0.0;
    for _ in 0..50 {
        let mut store = ParamStore::new();
        let gate = Gate::new(&mut store, &mut rng, 8, cfg).unwrap();
        let mut tape = Tape::with_params(&store);
        let t = tape.constant(random_tensor(&mut rng, 1, 8));
        let s = tape.constant(random_tensor(&mut rng, 1, 8));
        let w = gate.weights(&mut tape, t, s).unwrap();
        for (a, b) in tape.value(w.text).data().iter().zip(tape.value(w.ts).data()) {
            max_sum_err = max_sum_err.max((a + b - 1.0).abs());
        }
    }
    let sum_ok = max_sum_err <= 1e-12;

    let at_zero = responsibility(&[0.0, 0.3, -0.2], &cfg).unwrap()[0] == 0.5;
    let (lo, hi) = (sigmoid(-cfg.clip), sigmoid(cfg.clip));
    let (mut monotone, mut invariant, mut bounded) = (true, true, true);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let deltas: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..2)))
            .collect();
        let r = responsibility(&deltas, &cfg).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]));
        monotone &= order.windows(2).all(|w| r[w[0]] <= r[w[1]]);
        bounded &= r.iter().all(|&x| x >= lo && x <= hi);
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = deltas.iter().map(|d| d * c).collect();
        let mean_abs = deltas.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
        if mean_abs >= cfg.eps && mean_abs * c >= cfg.eps {
            let rs = responsibility(&scaled, &cfg).unwrap();
            invariant &= r.iter().zip(&rs).all(|(a, b)| (a - b).abs() <= 1e-12);
        }
    }
    // two outliers in a batch of near-zero utilities saturate the clip
    let mut spiky = vec![0.0; 38];
    spiky.extend([1.0, -1.0]);
    let extreme = responsibility(&spiky, &cfg).unwrap();
    bounded &= extreme[38] == hi && extreme[39] == lo;
    verdict(
        sum_ok && at_zero && monotone && invariant && bounded,
        format!(
            "max |a_E + a_X - 1| = {max_sum_err:.1e}, r(0)=0.5 {at_zero}, monotone {monotone}, \
             rescale-invariant {invariant}, within [s(-6), s(6)] {bounded}"
        ),
    )
}

/// Scores of one trained desk-scale run on its test split.
struct Behavior {
    ts_mse: f64,
    full_mse: f64,
    open_informative: f64,
    open_uninformative: f64,
    open_all: f64,
}

impl Behavior {
    fn improvement_pct(&self) -> f64 {
        (self.ts_mse - self.full_mse) / self.ts_mse * 100.0
    }
}

fn behavior_run(rho: f64, kappa_over_sigma: f64, seed: u64) -> Behavior {
    let mut cfg = Config::desk();
    cfg.seed = seed;
    cfg.scenario.seed = seed;
    cfg.scenario.num_events = 1000;
    cfg.scenario.rho_signal = rho;
    cfg.scenario.kappa = kappa_over_sigma * cfg.scenario.sigma_noise;
    let data = generate(&cfg.scenario).unwrap();
    let run = run_training(&cfg, data, None, &Stage::ALL, None).unwrap();
    let model = &run.state.model;
    let test = &run.splits.test;
    let report = compare_branches(model, "test", test).unwrap();
    let (mut inf, mut n_inf, mut uninf, mut n_uninf) = (0.0, 0.0, 0.0, 0.0);
    for inst in test {
        let p = model.predict(&model.prepare(inst).unwrap()).unwrap();
        if inst.text_informative == Some(true) {
            inf += p.openness;
            n_inf += 1.0;
        } else {
            uninf += p.openness;
            n_uninf += 1.0;
        }
    }
    Behavior {
        ts_mse: report.ts.mse,
        full_mse: report.full.mse,
        open_informative: if n_inf > 0.0 { inf / n_inf } else { f64::NAN },
        open_uninformative: if n_uninf > 0.0 { uninf / n_uninf } else { f64::NAN },
        open_all: report.mean_text_gate,
    }
}

fn behavior_runs(rho: f64, kappa_over_sigma: f64) -> (Vec<Behavior>, Duration) {
    let start = Instant::now();
    let runs = (0..SEEDS).map(|s| behavior_run(rho, kappa_over_sigma, s)).collect();
    (runs, start.elapsed())
}

fn granger_gating() -> Verdict {
    let (runs, elapsed) = behavior_runs(0.5, 3.0);
    let improv: Vec<f64> = runs.iter().map(Behavior::improvement_pct).collect();
    let gaps: Vec<f64> = runs.iter().map(|b| b.open_informative - b.open_uninformative).collect();
    let (mi, mg) = (median(improv.clone()), median(gaps.clone()));
    let a = mi > 0.0;
    let b = mg >= 0.10;
    verdict(
        a && b,
        format!(
            "(a) {} median MSE improvement {mi:.2}% per seed {}; (b) {} median openness gap {mg:.4} per seed {}; {:.0}s",
            if a { "ok" } else { "FAILED" },
            fmt_list(&improv, 2),
            if b { "ok" } else { "FAILED" },
            fmt_list(&gaps, 4),
            elapsed.as_secs_f64()
        ),
    )
}

fn text_utility_extremes() -> Verdict {
    let (null, t0) = behavior_runs(0.0, 3.0);
    let gaps: Vec<f64> = null.iter().map(Behavior::improvement_pct).collect();
    let opens: Vec<f64> = null.iter().map(|b| b.open_all).collect();
    let (mgap, mopen) = (median(gaps.clone()), median(opens.clone()));
    let gap_ok = mgap.abs() <= 2.0;
    let open_ok = mopen <= 0.5;

    let (strong, t1) = behavior_runs(1.0, 5.0);
    let improv: Vec<f64> = strong.iter().map(Behavior::improvement_pct).collect();
    let mi = median(improv.clone());
    let strong_ok = mi >= 10.0;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    verdict(
        gap_ok && open_ok && strong_ok,
        format!(
            "rho=0: {} median MSE gap {mgap:.2}% per seed {}, {} median openness {mopen:.4} per seed {}; \
             rho=1 k/s=5: {} median improvement {mi:.2}% per seed {}; {:.0}s",
            mark(gap_ok),
            fmt_list(&gaps, 2),
            mark(open_ok),
            fmt_list(&opens, 4),
            mark(strong_ok),
            fmt_list(&improv, 2),
            (t0 + t1).as_secs_f64()
        ),
    )
}

/// Rank of each entry computed by counting, independent of any sort.
fn brute_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut picked: Vec<(usize, usize)> = (0..values.len())
        .map(|i| {
            let rank = (0..values.len())
                .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
                .count();
            (rank, i)
        })
        .filter(|&(rank, _)| rank < k)
        .collect();
    picked.sort_unstable();
    picked.into_iter().map(|(_, i)| i).collect()
}

fn alignment_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut topk_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        // coarse values force ties
        let values: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 4.0).collect();
        let k = rng.random_range(1..45);
        topk_ok &= top_k_indices(&values, k) == brute_top_k(&values, k);
    }

    let (mut p_err, mut sal_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let (m, l, f) = (rng.random_range(1..12), rng.random_range(1..12), 6);
        let mut tape = Tape::new();
        let ze = tape.constant(random_tensor(&mut rng, m, f));
        let zx = tape.constant(random_tensor(&mut rng, l, f));
        let (_, p) = token_step_similarity(&mut tape, ze, zx, 0.2).unwrap();
        let pv = tape.value(p);
        for i in 0..pv.rows() {
            p_err = p_err.max((pv.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let scorer = tape.constant(random_tensor(&mut rng, f, 1));
        let prof = salience_and_anchors(&mut tape, ze, scorer, 4).unwrap();
        sal_err = sal_err.max((tape.value(prof.scores).data().iter().sum::<f64>() - 1.0).abs());
    }

    let mut tape = Tape::new();
    let e1 = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
    let e2 = tape.constant(Tensor::row_vector(vec![0.0, 1.0]));
    let l = instance_contrastive_loss(&mut tape, &[e1, e2], &[e1, e2], 1.0).unwrap();
    let ctr = tape.item(l);
    let ctr_err = (ctr - (1.0 + (-1f64).exp()).ln()).abs();

    let pass = topk_ok && p_err <= 1e-12 && sal_err <= 1e-12 && ctr_err <= 1e-9;
    verdict(
        pass,
        format!(
            "top-K matches oracle on 1000 cases {topk_ok}; max |sum P - 1| {p_err:.1e}; \
             max |sum salience - 1| {sal_err:.1e}; L_ctr {ctr:.9} (error {ctr_err:.1e})"
        ),
    )
}

fn small_training_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        model: ModelConfig::small(),
        ..Config::default()
    };
    cfg.scenario.seed = seed;
    cfg.scenario.num_events = 120;
    cfg.scenario.lookback = 8;
    cfg.scenario.horizon = 8;
    cfg.train.batch_size = 16;
    cfg.train.stage1_stride = 4;
    cfg
}

fn stage_discipline() -> Verdict {
    let cfg = small_training_config(6);
    let data = generate(&cfg.scenario).unwrap();
    let whole = run_training(&cfg, data.clone(), None, &Stage::ALL, None).unwrap();
    let stages_audited: Vec<usize> = (1..=3)
        .filter(|&s| whole.log.audits.iter().any(|a| a.stage == s))
        .collect();
    let audits_ok = stages_audited == [1, 2, 3] && whole.log.audits.iter().all(|a| a.unchanged);
    let expected_frozen = [
        (1, ParamGroup::TextProjection),
        (2, ParamGroup::TsProjection),
        (1, ParamGroup::Gate),
        (2, ParamGroup::Gate),
    ];
    let covers = expected_frozen
        .iter()
        .all(|(s, g)| whole.log.audits.iter().any(|a| a.stage == *s && a.group == g.name()));

    let mut state = None;
    for _ in 0..6 {
        let run = run_training(&cfg, data.clone(), state, &Stage::ALL, Some(1)).unwrap();
        let bytes = checkpoint::to_bytes(&run.state).unwrap();
        state = Some(checkpoint::from_bytes(&bytes).unwrap());
    }
    let resumed = checkpoint::to_bytes(&state.unwrap()).unwrap();
    let resume_ok = resumed == checkpoint::to_bytes(&whole.state).unwrap();
    verdict(
        audits_ok && covers && resume_ok,
        format!(
            "{} audits, all unchanged {audits_ok}, stages audited {stages_audited:?}; \
             six one-epoch resumes equal uninterrupted training bitwise {resume_ok}",
            whole.log.audits.len()
        ),
    )
}

fn pipeline_metrics(dir: &std::path::Path, seed: u64) -> Vec<u8> {
    let mut cfg = Config::desk();
    cfg.seed = seed;
    cfg.scenario.seed = seed;
    cfg.scenario.num_events = 200;
    let data_path = dir.join("data.jsonl");
    write_jsonl(&data_path, &generate(&cfg.scenario).unwrap(), false).unwrap();
    let data = ingest(&data_path, IngestOptions::from_scenario(&cfg.scenario)).unwrap();
    let run = run_training(&cfg, data, None, &Stage::ALL, None).unwrap();
    let report = compare_branches(&run.state.model, "synthetic", &run.splits.test).unwrap();
    let out = dir.join("metrics.csv");
    write_metrics_csv(&out, &[report], Scaling::Raw).unwrap();
    std::fs::read(out).unwrap()
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let first = pipeline_metrics(a.path(), 11);
    let second = pipeline_metrics(b.path(), 11);
    verdict(
        first == second && !first.is_empty(),
        format!(
            "two generate/train/eval runs, {} bytes of metrics, identical {}; {:.0}s",
            first.len(),
            first == second,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn metric_conventions() -> Verdict {
    let mse = format_scaled(scale_mse(3.38e-4));
    let path = [1.1, 1.3, 1.2, 1.5];
    let mirrored: Vec<f64> = path.iter().map(|v| 2.0 - v).collect();
    let perfect = scale_dhr(dhr(&path, &path, 1.0).unwrap());
    let mirror = scale_dhr(dhr(&mirrored, &path, 1.0).unwrap());
    verdict(
        mse == "3.38" && perfect == 100.0 && mirror == 0.0,
        format!("3.38e-4 -> \"{mse}\"; DHR perfect {perfect:.1}, mirrored {mirror:.1}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("C1", "gradient integrity", gradient_integrity),
        ("C2", "gate algebra", gate_algebra),
        ("C3", "granger gating", granger_gating),
        ("C4", "text-utility extremes", text_utility_extremes),
        ("C5", "alignment correctness", alignment_correctness),
        ("C6", "stage discipline", stage_discipline),
        ("C7", "determinism", determinism),
        ("C8", "metric conventions", metric_conventions),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let v = check();
        println!("{id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
