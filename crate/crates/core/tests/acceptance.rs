//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fairlm::dataset::Dataset;
use fairlm::fairloss::{mmd2, sigmoid, KernelSpec};
use fairlm::harness::{
    gen_synthetic, points_to_csv, project_embeddings, recalibrate, sweep, sweep_with_models, transfer_experiment,
    Method, ParetoPoint, SweepConfig, SyntheticSpec,
};
use fairlm::metrics::{fpr, fpr_ratio, roc_auc, roc_auc_pairwise, roc_auc_ranked};
use fairlm::prompting::{scores_to_probs, wrap_prompt, PromptVariant, ScorePair, VariantKind};
use fairlm::training::{
    in_processing_loss, post_processing_loss, postprocess_predictions, predict_all, train_emfairening, train_head,
    Features, LinearModel, RemediationConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDAS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// brute-force oracles

fn fpr_oracle(preds: &[f64], labels: &[bool]) -> Option<f64> {
    let mut negatives = 0usize;
    let mut false_pos = 0usize;
    for i in 0..preds.len() {
        if !labels[i] {
            negatives += 1;
            if preds[i] >= 0.5 {
                false_pos += 1;
            }
        }
    }
    (negatives > 0).then(|| false_pos as f64 / negatives as f64)
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    total += 1.0;
                } else if scores[i] == scores[j] {
                    total += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

fn mmd_oracle(a: &[f64], b: &[f64], h: f64) -> f64 {
    let k = |u: f64, v: f64| (-(u - v) * (u - v) / (2.0 * h * h)).exp();
    let mut aa = 0.0;
    for &u in a {
        for &v in a {
            aa += k(u, v);
        }
    }
    let mut bb = 0.0;
    for &u in b {
        for &v in b {
            bb += k(u, v);
        }
    }
    let mut ab = 0.0;
    for &u in a {
        for &v in b {
            ab += k(u, v);
        }
    }
    let (m, n) = (a.len() as f64, b.len() as f64);
    aa / (m * m) + bb / (n * n) - 2.0 * ab / (m * n)
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    let mut checked = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        // coarse grid so ties and exact-threshold predictions occur
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0..=20) as f64 / 20.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let in_group: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let select = |want: bool| -> (Vec<f64>, Vec<bool>) {
            (0..n)
                .filter(|&i| in_group[i] == want)
                .map(|i| (preds[i], labels[i]))
                .unzip()
        };
        let (pg, lg) = select(true);
        let (pm, lm) = select(false);

        let got = fpr(&preds, &labels, 0.5).ok();
        if got != fpr_oracle(&preds, &labels) {
            mismatches.push(format!("seed {seed}: fpr {got:?}"));
        }
        let (fg, fm) = (fpr_oracle(&pg, &lg), fpr_oracle(&pm, &lm));
        let lib_ratio = match (fpr(&pg, &lg, 0.5), fpr(&pm, &lm, 0.5)) {
            (Ok(a), Ok(b)) => fpr_ratio(a, b).ok(),
            _ => None,
        };
        let oracle_ratio = match (fg, fm) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        if lib_ratio != oracle_ratio {
            mismatches.push(format!("seed {seed}: ratio {lib_ratio:?} vs {oracle_ratio:?}"));
        }
        let expected = auc_oracle(&preds, &labels).expect("both classes present");
        for (name, got) in [
            ("auc", roc_auc(&preds, &labels)),
            ("pairwise", roc_auc_pairwise(&preds, &labels)),
            ("ranked", roc_auc_ranked(&preds, &labels)),
        ] {
            match got {
                Ok(v) if (v - expected).abs() <= 1e-12 => {}
                other => mismatches.push(format!("seed {seed}: {name} {other:?} vs {expected}")),
            }
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "{checked} seeds x 200 instances, {} mismatches{}, {:.2}s (limit 10s)",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for m in 1..=50usize {
        for _ in 0..4 {
            let n = rng.random_range(1..=50usize);
            let a: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let h = rng.random_range(0.05..2.0);
            let got = mmd2(&a, &b, &KernelSpec::gaussian(h)).expect("valid input");
            worst = worst.max((got - mmd_oracle(&a, &b, h).max(0.0)).abs());
        }
    }
    let closed = 2.0 - 2.0 * (-0.5f64).exp();
    let singleton = mmd2(&[0.0], &[1.0], &KernelSpec::gaussian(1.0)).expect("valid input");
    let singleton_err = (singleton - closed).abs();
    let pass = worst <= 1e-10 && singleton_err <= 1e-9 && (singleton - 0.786939).abs() < 1e-6;
    outcome(
        pass,
        format!("max |mmd2 - double sum| = {worst:.2e} (tol 1e-10); singleton {singleton:.9} vs {closed:.9}"),
    )
}

struct GradInstance {
    rows: Vec<Vec<f64>>,
    labels: Vec<bool>,
    baseline: Vec<f64>,
    group: Vec<usize>,
    majority: Vec<usize>,
    lambda: f64,
    model: LinearModel,
}

fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.random_range(8..24usize);
    let d = rng.random_range(1..6usize);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let baseline: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    let split = negatives.len() / 2;
    let model = LinearModel {
        weights: (0..d).map(|_| rng.random_range(-0.8..0.8)).collect(),
        bias: rng.random_range(-0.5..0.5),
    };
    GradInstance {
        rows,
        labels,
        baseline,
        group: negatives[..split].to_vec(),
        majority: negatives[split..].to_vec(),
        lambda: rng.random_range(0.0..5.0),
        model,
    }
}

fn finite_difference(model: &LinearModel, f: impl Fn(&LinearModel) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::with_capacity(model.weights.len() + 1);
    for j in 0..=model.weights.len() {
        let mut plus = model.clone();
        let mut minus = model.clone();
        if j < model.weights.len() {
            plus.weights[j] += h;
            minus.weights[j] -= h;
        } else {
            plus.bias += h;
            minus.bias -= h;
        }
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let kernel = KernelSpec::gaussian(0.25);
    let mut worst_ip: f64 = 0.0;
    let mut worst_pp: f64 = 0.0;
    for seed in 0..100 {
        let inst = grad_instance(seed);
        let rows: Vec<&[f64]> = inst.rows.iter().map(|r| r.as_slice()).collect();
        let ip = |m: &LinearModel| {
            in_processing_loss(
                m,
                &rows,
                &inst.labels,
                &inst.group,
                &inst.majority,
                inst.lambda,
                &kernel,
            )
            .expect("loss")
        };
        let pp = |m: &LinearModel| {
            post_processing_loss(
                m,
                &rows,
                &inst.baseline,
                &inst.group,
                &inst.majority,
                inst.lambda,
                &kernel,
            )
            .expect("loss")
        };
        let a = ip(&inst.model);
        let mut analytic = a.grad_weights.clone();
        analytic.push(a.grad_bias);
        worst_ip = worst_ip.max(relative_error(
            &analytic,
            &finite_difference(&inst.model, |m| ip(m).terms.total),
        ));
        let a = pp(&inst.model);
        let mut analytic = a.grad_weights.clone();
        analytic.push(a.grad_bias);
        worst_pp = worst_pp.max(relative_error(
            &analytic,
            &finite_difference(&inst.model, |m| pp(m).terms.total),
        ));
    }
    let elapsed = start.elapsed();
    let pass = worst_ip < 1e-4 && worst_pp < 1e-4 && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "100 instances, max relative error in-processing {worst_ip:.2e}, post-processing {worst_pp:.2e} (tol 1e-4), {:.2}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4(dataset: &Dataset, spec: &SyntheticSpec, baseline: &HashMap<String, f64>) -> Outcome {
    let config = RemediationConfig::new(spec.pair());
    let em = match train_emfairening(baseline, dataset, fairlm::dataset::Split::Train, &config) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("train_emfairening failed: {e}")),
    };
    let zero_delta = em.model.delta.is_zero();
    let mut identical = true;
    for split in fairlm::dataset::Split::ALL {
        let preds = postprocess_predictions(&em.model, baseline, dataset, split, Features::Dataset).expect("predict");
        identical &= dataset.split(split).iter().all(|ex| preds[&ex.id] == baseline[&ex.id]);
    }
    let head = train_head(dataset, &config).expect("train head");
    let no_mmd = !head.loss_trace.is_empty() && head.loss_trace.iter().all(|r| r.terms.fairness.is_none());
    outcome(
        zero_delta && identical && no_mmd,
        format!(
            "zero delta: {zero_delta}, post-processed == baseline bitwise: {identical}, head trace ({} epochs) without MMD term: {no_mmd}",
            head.loss_trace.len()
        ),
    )
}

fn reduction(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        1.0 - after / before
    }
}

struct Runs {
    in_processing: Vec<ParetoPoint>,
    post_processing: Vec<ParetoPoint>,
    native: Vec<ParetoPoint>,
    transfer: Vec<ParetoPoint>,
    in_processing_time: Duration,
}

impl Runs {
    fn csv(&self) -> [String; 4] {
        [
            points_to_csv(&self.in_processing),
            points_to_csv(&self.post_processing),
            points_to_csv(&self.native),
            points_to_csv(&self.transfer),
        ]
    }
}

fn baseline_head(dataset: &Dataset, spec: &SyntheticSpec) -> HashMap<String, f64> {
    let head = train_head(dataset, &RemediationConfig::new(spec.pair())).expect("train head");
    predict_all(&head.model, dataset).expect("predict")
}

fn run_end_to_end(dataset: &Dataset, spec: &SyntheticSpec) -> Runs {
    let ip_config = SweepConfig::new(Method::InProcessing, spec.pair(), LAMBDAS.to_vec());
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let start = Instant::now();
    let ip = single
        .install(|| sweep_with_models(dataset, &ip_config, None))
        .expect("in-processing sweep");
    let in_processing_time = start.elapsed();

    let head = ip[0].model.model().expect("lambda 0 head");
    let baseline = predict_all(&head, dataset).expect("predict");
    let pp_config = SweepConfig::new(Method::PostProcessing, spec.pair(), LAMBDAS.to_vec());
    let post_processing = sweep(dataset, &pp_config, Some(&baseline)).expect("post-processing sweep");

    let target = recalibrate(&baseline, 0.7, 0.0);
    let table = project_embeddings(dataset, 8, 0.1, 11).expect("projection");
    let outcome = transfer_experiment(&baseline, &target, &table, dataset, &pp_config).expect("transfer");
    Runs {
        in_processing: ip.into_iter().map(|r| r.point).collect(),
        post_processing,
        native: outcome.native,
        transfer: outcome.transfer,
        in_processing_time,
    }
}

fn criterion_5(runs: &Runs) -> Outcome {
    let p = &runs.in_processing;
    let (zero, last) = (&p[0], &p[p.len() - 1]);
    let red = reduction(zero.unfairness, last.unfairness);
    let drop = zero.auc - last.auc;
    let pass = red >= 0.5 && drop <= 0.05 && runs.in_processing_time < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "unfairness {:.4} -> {:.4} at lambda {} ({:.1}% reduction, need >= 50%), AUC {:.4} -> {:.4} (drop {:.4}, limit 0.05), single-threaded {:.1}s (limit 120s)",
            zero.unfairness,
            last.unfairness,
            last.lambda,
            100.0 * red,
            zero.auc,
            last.auc,
            drop,
            runs.in_processing_time.as_secs_f64()
        ),
    )
}

fn best(points: &[ParetoPoint]) -> &ParetoPoint {
    points[1..]
        .iter()
        .min_by(|a, b| a.unfairness.total_cmp(&b.unfairness))
        .expect("at least one remediated point")
}

fn criterion_6(runs: &Runs) -> Outcome {
    let p = &runs.post_processing;
    let zero = &p[0];
    let b = best(p);
    let red = reduction(zero.unfairness, b.unfairness);
    let drop = zero.auc - b.auc;
    let endpoint = p[p.len() - 1].unfairness < zero.unfairness;
    outcome(
        red >= 0.5 && drop <= 0.05 && endpoint,
        format!(
            "best lambda {}: unfairness {:.4} -> {:.4} ({:.1}% reduction, need >= 50%), AUC drop {:.4} (limit 0.05); largest lambda below lambda 0: {endpoint}",
            b.lambda,
            zero.unfairness,
            b.unfairness,
            100.0 * red,
            drop
        ),
    )
}

fn criterion_7(runs: &Runs) -> Outcome {
    let t = &runs.transfer;
    let n = &runs.native;
    let b = best(t);
    let red = reduction(t[0].unfairness, b.unfairness);
    let mut degradation_ok = true;
    let mut pairs = Vec::new();
    for (tp, np) in t.iter().zip(n) {
        let dt = t[0].auc - tp.auc;
        let dn = n[0].auc - np.auc;
        degradation_ok &= dt >= dn;
        pairs.push(format!("{}: {dt:.5}>={dn:.5}", tp.lambda));
    }
    outcome(
        red >= 0.25 && degradation_ok,
        format!(
            "transfer best lambda {}: unfairness {:.4} -> {:.4} ({:.1}% reduction, need >= 25%); AUC degradation transfer vs native [{}]",
            b.lambda,
            t[0].unfairness,
            b.unfairness,
            100.0 * red,
            pairs.join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let base = "'first post!' Categorize the comment on the basis of toxicity. If the comment is toxic (harmful, malicious, derogatory, threat, insult, identity attack, etc.) output Yes, otherwise output No.";
    let pbf = format!("{base} Please be as fair as possible when making a decision");
    let pbf2sg = format!("{pbf} about comments about religious groups or that mention religion");
    let pbf2tg = format!("{pbf} about comments that mention Judaism or Jewish people");
    let mut golden_ok = true;
    for (kind, expected) in [
        (VariantKind::Base, base.to_string()),
        (VariantKind::Pbf, pbf),
        (VariantKind::Pbf2sg, pbf2sg),
        (VariantKind::Pbf2tg, pbf2tg),
    ] {
        let got = wrap_prompt("first post!", &PromptVariant::with_default_phrase(kind)).expect("wrap");
        golden_ok &= got == expected;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let yes = rng.random_range(-30.0..30.0);
        let no = rng.random_range(-30.0..30.0);
        let c = rng.random_range(-100.0..100.0);
        let (a, _) = scores_to_probs(ScorePair {
            yes_score: yes,
            no_score: no,
        })
        .expect("finite");
        let (b, _) = scores_to_probs(ScorePair {
            yes_score: yes + c,
            no_score: no + c,
        })
        .expect("finite");
        worst = worst.max((a - b).abs());
        // independent two-way softmax
        worst = worst.max((a - sigmoid(yes - no)).abs());
    }
    outcome(
        golden_ok && worst <= 1e-12,
        format!("golden strings match: {golden_ok}; max shift discrepancy {worst:.2e} (tol 1e-12)"),
    )
}

fn criterion_9(first: &Runs, dataset: &Dataset, spec: &SyntheticSpec) -> Outcome {
    let again = run_end_to_end(dataset, spec);
    let regenerated = gen_synthetic(spec).expect("fixture");
    let data_same = serde_json::to_vec(dataset).expect("json") == serde_json::to_vec(&regenerated).expect("json");
    let a = first.csv();
    let b = again.csv();
    let same: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x == y).collect();
    outcome(
        data_same && same.iter().all(|&s| s),
        format!(
            "dataset regenerated identically: {data_same}; CSV identical (in-processing, post-processing, native, transfer): {same:?}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "metrics match brute-force oracles", criterion_1()));
    results.push((2, "MMD matches double-sum oracle", criterion_2()));
    results.push((3, "loss gradients match finite differences", criterion_3()));

    let spec = SyntheticSpec::acceptance();
    let dataset = gen_synthetic(&spec).expect("acceptance fixture");
    let baseline = baseline_head(&dataset, &spec);
    results.push((4, "identity at lambda = 0", criterion_4(&dataset, &spec, &baseline)));

    let runs = run_end_to_end(&dataset, &spec);
    results.push((5, "in-processing remediation", criterion_5(&runs)));
    results.push((6, "post-processing remediation", criterion_6(&runs)));
    results.push((7, "transferred post-processing", criterion_7(&runs)));
    results.push((8, "prompt plumbing", criterion_8()));
    results.push((9, "determinism", criterion_9(&runs, &dataset, &spec)));

    let mut failed = 0;
    for (n, name, o) in &results {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} [{status}] {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
