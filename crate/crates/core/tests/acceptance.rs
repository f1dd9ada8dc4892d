//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protoclip::anchors::{build_anchor_set, AnchorConfig, AnchorSet};
use protoclip::curation::{curate, load_curation_csv, save_curation_csv, CurationConfig};
use protoclip::data::{
    load_archive, load_text_archive, save_archive, save_text_archive, Dataset, LabelVocabulary, LabeledExample, Split,
};
use protoclip::eval::{evaluate, operating_point, roc_auc, Embedder, EvalConfig, SensitivityRule};
use protoclip::loss::{bce_loss, distillation_loss, BatchTargets, LogitMode, LossConfig};
use protoclip::numerics::{derive_seed, l2_normalize, seeded_rng, Matrix};
use protoclip::pipeline::{run_experiment, ExperimentConfig};
use protoclip::synth::{generate, SynthConfig};
use protoclip::train::{batch_objective, fit, make_batches};
use protoclip::{ScoreSet, StudentHead};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bundled_benchmark() -> SynthConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/entangled-ptx.json");
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("bundled benchmark config parses")
}

fn random_unit(rng: &mut protoclip::numerics::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&v).unwrap()
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    let mut configs = 0;
    for case in 0..20u64 {
        let mut rng = seeded_rng(derive_seed(17, case));
        let d = 4 + (case as usize % 4);
        let d_in = if case % 5 == 4 { d + 3 } else { d };
        let h = 3 + (case as usize % 5);
        let c = 2 + (case as usize % 3);
        let n = 1 + (case as usize % 6);
        let lambda = [0.0, 1.0, 10.0][case as usize % 3];
        let mode = if case % 2 == 0 { LogitMode::ScaleByInverseTau } else { LogitMode::ScaleByTau };
        let cfg = LossConfig { distill_weight: lambda, logit_mode: mode, ..LossConfig::default() };

        let mut head = StudentHead::init_identity(d_in, d, h, case).unwrap();
        for t in head.trainable_mut() {
            t.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d_in)).collect();
        let teachers: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let anchors: Vec<Vec<f64>> = (0..c).map(|_| random_unit(&mut rng, d)).collect();
        let targets = BatchTargets::new((0..n).map(|_| rng.random_range(0..c)).collect(), c).unwrap();

        let (_, grads) = batch_objective(&head, &inputs, &teachers, &targets, &anchors, &cfg).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let step = 1e-5;
        for (ti, g) in analytic.iter().enumerate() {
            for (k, &g_k) in g.iter().enumerate() {
                let eval_at = |delta: f64| {
                    let mut h2 = head.clone();
                    h2.trainable_mut()[ti][k] += delta;
                    batch_objective(&h2, &inputs, &teachers, &targets, &anchors, &cfg).unwrap().0.total
                };
                let fd = (eval_at(step) - eval_at(-step)) / (2.0 * step);
                let scale = g_k.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((g_k - fd).abs() / scale);
            }
        }
        configs += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 30.0, format!("{configs} configs, max relative error {worst:.2e}, {secs:.1}s"))
}

fn identity_at_init() -> Outcome {
    let cfg = SynthConfig { n_train: 1500, n_test: 800, ..bundled_benchmark() };
    let (ds, text, _) = generate(&cfg).unwrap();
    let curated = curate(&ds, &CurationConfig::default()).unwrap();
    let anchors = build_anchor_set(&text, &curated.classes, &AnchorConfig::default()).unwrap();
    let head = StudentHead::init_identity(ds.input_dim(), ds.dim(), 256, 3).unwrap();
    let mut worst = 0.0_f64;
    for batch in make_batches(&ds, &curated, 128, 0).unwrap() {
        let (obj, _) = batch_objective(
            &head,
            &batch.inputs,
            &batch.teachers,
            &batch.targets,
            anchors.anchors(),
            &LossConfig::default(),
        )
        .unwrap();
        worst = worst.max(obj.distillation.abs());
    }
    let eval = EvalConfig::default();
    let student = evaluate(&ds, Embedder::Student(&head), &anchors, &eval).unwrap();
    let teacher = evaluate(&ds, Embedder::Teacher, &anchors, &eval).unwrap();
    let same =
        serde_json::to_string(&student).unwrap() == serde_json::to_string(&teacher).unwrap() && student == teacher;
    outcome(worst <= 1e-12 && same, format!("max step-0 L_dist {worst:.1e}, reports identical: {same}"))
}

fn loss_unit_values() -> Outcome {
    let z = Matrix::<f64>::zeros(4, 3);
    let y = BatchTargets::new(vec![0, 1, 2, 0], 3).unwrap().to_matrix();
    let (bce, _) = bce_loss(&z, &y).unwrap();
    let a = l2_normalize(&[0.3, -0.2, 0.9]).unwrap();
    let b = l2_normalize(&[-0.5, 0.1, 0.4]).unwrap();
    let (same, _) = distillation_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
    let anti: Vec<f64> = a.iter().map(|x| -x).collect();
    let (half, _) = distillation_loss(&[a.clone(), a.clone()], &[a.clone(), anti]).unwrap();
    let ok = (bce - std::f64::consts::LN_2).abs() <= 1e-12 && same.abs() <= 1e-12 && (half - 1.0).abs() <= 1e-12;
    outcome(ok, format!("BCE(Z=0) = {bce:.15}, L_dist(s=t) = {same:.1e}, L_dist(identical, antiparallel) = {half}"))
}

/// Independent predicate-by-predicate filter for the curated cohort.
fn brute_force_curation(
    ds: &Dataset,
    target: usize,
    background: &[usize],
) -> (BTreeSet<String>, Vec<BTreeSet<String>>) {
    let train: Vec<&LabeledExample> = ds.examples().iter().filter(|e| e.split == Split::Train).collect();
    let cohort = train.iter().filter(|e| e.labels[target]).map(|e| e.id.clone()).collect();
    let pools = background
        .iter()
        .map(|&b| {
            train
                .iter()
                .filter(|e| e.labels[b])
                .filter(|e| !e.labels[target])
                .filter(|e| background.iter().filter(|&&c| c != b).all(|&c| !e.labels[c]))
                .map(|e| e.id.clone())
                .collect()
        })
        .collect();
    (cohort, pools)
}

fn curation_oracle() -> Outcome {
    let mut failures = vec![];
    let mut capped = 0;
    for case in 0..500u64 {
        let mut rng = seeded_rng(derive_seed(99, case));
        let c = rng.random_range(2..=12);
        let n = rng.random_range(1..=2000);
        let names: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
        let rates: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.4)).collect();
        let mut examples: Vec<LabeledExample> = (0..n)
            .map(|i| LabeledExample {
                id: format!("x{i}"),
                labels: rates.iter().map(|&r| rng.random_bool(r)).collect(),
                teacher: vec![1.0, 0.0],
                feature: None,
                split: if rng.random_bool(0.8) { Split::Train } else { Split::Test },
            })
            .collect();
        examples[0].labels[0] = true;
        examples[0].split = Split::Train;
        let ds = Dataset::new(LabelVocabulary::new(names.clone()).unwrap(), 2, None, examples).unwrap();

        let target = rng.random_range(0..c);
        let background: Option<Vec<String>> = if rng.random_bool(0.3) {
            Some(
                names
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != target && rng.random_bool(0.6))
                    .map(|(_, n)| n.clone())
                    .collect(),
            )
        } else {
            None
        };
        let cap = if rng.random_bool(0.5) { rng.random_range(1..50) } else { 4000 };
        let cfg = CurationConfig { target: names[target].clone(), cap, seed: case, background: background.clone() };
        let bg_idx: Vec<usize> = match &background {
            Some(list) => (0..c).filter(|i| list.contains(&names[*i])).collect(),
            None => (0..c).filter(|&i| i != target).collect(),
        };
        let (cohort, pools) = brute_force_curation(&ds, target, &bg_idx);

        let out = match curate(&ds, &cfg) {
            Ok(out) => out,
            Err(e) => {
                if !cohort.is_empty() {
                    failures.push(format!("case {case}: unexpected error {e}"));
                }
                continue;
            }
        };
        let mut buckets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 1 + bg_idx.len()];
        let mut seen = BTreeSet::new();
        for e in &out.entries {
            if !seen.insert(e.id.clone()) {
                failures.push(format!("case {case}: {} appears twice", e.id));
            }
            buckets[e.bucket].insert(e.id.clone());
        }
        let axis: Vec<String> =
            std::iter::once(target).chain(bg_idx.iter().copied()).map(|i| names[i].clone()).collect();
        if out.classes != axis {
            failures.push(format!("case {case}: class axis {:?} != {:?}", out.classes, axis));
        }
        if buckets[0] != cohort {
            failures.push(format!("case {case}: target cohort differs"));
        }
        for (k, pool) in pools.iter().enumerate() {
            let got = &buckets[k + 1];
            let want = cap.min(pool.len());
            if got.len() != want || !got.is_subset(pool) {
                failures.push(format!(
                    "case {case}: bucket {} has {} of {} (cap {cap})",
                    axis[k + 1],
                    got.len(),
                    pool.len()
                ));
            }
            if pool.len() > cap {
                capped += 1;
            }
            for id in got {
                let ex = ds.get(id).unwrap();
                let own = bg_idx[k];
                if ex.labels[target] || !ex.labels[own] || bg_idx.iter().any(|&o| o != own && ex.labels[o]) {
                    failures.push(format!("case {case}: impure member {id}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        match failures.first() {
            None => format!("500 fuzzed datasets agree with the brute-force filter ({capped} capped buckets)"),
            Some(f) => format!("{} mismatches, first: {f}", failures.len()),
        },
    )
}

fn brute_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let example =
        roc_auc(&ScoreSet::from_pairs(vec![true, false, true, false], vec![0.9, 0.8, 0.3, 0.1]).unwrap()).unwrap();
    let mut worst = 0.0_f64;
    for case in 0..200u64 {
        let mut rng = seeded_rng(derive_seed(5, case));
        let n = rng.random_range(2..300);
        let levels = rng.random_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let auc = roc_auc(&ScoreSet::from_pairs(labels.clone(), scores.clone()).unwrap()).unwrap();
        worst = worst.max((auc - brute_auc(&labels, &scores)).abs());
    }
    outcome(
        example == 0.75 && worst <= 1e-12,
        format!("example AUC {example}, max deviation over 200 sets {worst:.1e}"),
    )
}

fn operating_point_sweep() -> Outcome {
    let mut failures = vec![];
    let targets = [0.1, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9, 0.95, 0.99, 1.0];
    for case in 0..300u64 {
        let mut rng = seeded_rng(derive_seed(11, case));
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..20)) / 10.0 - 1.0).collect();
        let set = ScoreSet::from_pairs(labels.clone(), scores.clone()).unwrap();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut last_spec = f64::INFINITY;
        for &target in &targets {
            let op = operating_point(&set, target, SensitivityRule::AtLeast).unwrap();
            let mut candidates: Vec<f64> = scores.clone();
            candidates.sort_by(f64::total_cmp);
            candidates.dedup();
            let best = candidates
                .iter()
                .copied()
                .filter(|&g| {
                    let tp = scores.iter().zip(&labels).filter(|(&s, &l)| l && s >= g).count() as f64;
                    tp / n_pos >= target
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let tn = scores.iter().zip(&labels).filter(|(&s, &l)| !l && s < best).count() as f64;
            let n_neg = labels.len() as f64 - n_pos;
            if op.threshold != best || op.sensitivity < target || (op.specificity - tn / n_neg).abs() > 1e-15 {
                failures.push(format!("case {case}, target {target}: γ {} vs sweep {best}", op.threshold));
            }
            if op.specificity > last_spec {
                failures.push(format!("case {case}: specificity rose from {last_spec} to {}", op.specificity));
            }
            last_spec = op.specificity;
        }
    }
    outcome(
        failures.is_empty(),
        match failures.first() {
            None => {
                format!("300 fuzzed sets x {} targets match the exhaustive sweep; specificity monotone", targets.len())
            }
            Some(f) => format!("{} mismatches, first: {f}", failures.len()),
        },
    )
}

struct BenchmarkRuns {
    with_distillation: protoclip::pipeline::ExperimentReport,
    without_distillation: protoclip::pipeline::ExperimentReport,
    secs: f64,
}

fn benchmark_runs() -> BenchmarkRuns {
    let started = Instant::now();
    let (ds, text, _) = generate(&bundled_benchmark()).unwrap();
    let base = ExperimentConfig::default();
    let with_distillation = run_experiment(&ds, &text, &base).unwrap();
    let mut no_dist = base.clone();
    no_dist.train.loss.distill_weight = 0.0;
    let without_distillation = run_experiment(&ds, &text, &no_dist).unwrap();
    BenchmarkRuns { with_distillation, without_distillation, secs: started.elapsed().as_secs_f64() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_direction(runs: &BenchmarkRuns) -> Outcome {
    let r = &runs.with_distillation;
    let base = r.baseline.target_auc().unwrap();
    let refined = r.refined_target_aucs();
    let agg = protoclip::eval::aggregate_runs(&refined).unwrap();
    let sd = agg.sd.unwrap_or(0.0);
    let gain = agg.mean - base;
    outcome(
        refined.len() == 5 && gain >= 0.05 && sd < 0.02 && runs.secs < 300.0,
        format!(
            "baseline {base:.4}, refined {:.4} ± {sd:.4} over {} seeds, gain {gain:+.4}, {:.1}s for both λ settings",
            agg.mean,
            refined.len(),
            runs.secs
        ),
    )
}

fn ablation_direction(runs: &BenchmarkRuns) -> Outcome {
    let on = &runs.with_distillation;
    let off = &runs.without_distillation;
    let auc_on = mean(&on.refined_target_aucs());
    let auc_off = mean(&off.refined_target_aucs());
    let dist = |r: &protoclip::pipeline::ExperimentReport| {
        mean(&r.runs.iter().map(|s| s.final_losses.distillation).collect::<Vec<_>>())
    };
    let (dist_on, dist_off) = (dist(on), dist(off));

    let confounder = on
        .baseline
        .findings
        .iter()
        .filter(|f| f.finding != on.baseline.target)
        .max_by_key(|f| f.cooccurrence_with_target.unwrap_or(0))
        .map(|f| f.finding.clone())
        .unwrap();
    let conf_base = on.baseline.finding(&confounder).and_then(|f| f.auc).unwrap();
    let improved = on
        .runs
        .iter()
        .filter(|r| r.report.finding(&confounder).and_then(|f| f.auc).is_some_and(|a| a > conf_base))
        .count();
    outcome(
        auc_on >= auc_off && dist_off > dist_on && improved >= 4,
        format!(
            "target AUC λ=1 {auc_on:.4} vs λ=0 {auc_off:.4}; final L_dist λ=1 {dist_on:.4} vs λ=0 {dist_off:.4}; \
             {confounder} AUC above baseline {conf_base:.4} in {improved}/{} seeds",
            on.runs.len()
        ),
    )
}

/// synth → archive → curate → anchors → train → eval through files.
fn file_pipeline(root: &Path) -> Vec<PathBuf> {
    let mut cfg = bundled_benchmark();
    cfg.n_train = 2000;
    cfg.n_test = 800;
    let (ds, text, _) = generate(&cfg).unwrap();
    let images = root.join("images");
    let prompts = root.join("prompts");
    save_archive(&ds, &images).unwrap();
    save_text_archive(&text, &prompts).unwrap();

    let ds = load_archive(&images).unwrap();
    let text = load_text_archive(&prompts).unwrap();
    let curated = curate(&ds, &CurationConfig::default()).unwrap();
    let curation_csv = root.join("curation.csv");
    save_curation_csv(&curated, &curation_csv).unwrap();
    let mut curated = load_curation_csv(&curation_csv).unwrap();
    let anchors_dir = root.join("anchors");
    build_anchor_set(&text, &curated.classes, &AnchorConfig::default()).unwrap().save(&anchors_dir).unwrap();
    let anchors = AnchorSet::load(&anchors_dir).unwrap();
    curated.align_to(anchors.classes()).unwrap();

    let train = protoclip::train::TrainConfig { epochs: 3, ..Default::default() };
    let (head, log) = fit(&ds, &curated, &anchors, &train, 7).unwrap();
    let ckpt = root.join("checkpoint");
    head.save(&ckpt, log.total_steps() as u64).unwrap();
    let (head, _) = StudentHead::load(&ckpt).unwrap();
    let report = evaluate(&ds, Embedder::Student(&head), &anchors, &EvalConfig::default()).unwrap();
    let report_path = root.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    fs::write(root.join("train_log.json"), serde_json::to_string_pretty(&log).unwrap()).unwrap();

    let mut files = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = file_pipeline(a.path());
    let files_b = file_pipeline(b.path());
    let mut differing: Vec<String> = vec![];
    if files_a != files_b {
        differing.push("file sets differ".into());
    }
    for f in &files_a {
        if fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap() {
            differing.push(f.display().to_string());
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} output files byte-identical across two runs", files_a.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_check()),
        ("identity at init", identity_at_init()),
        ("loss unit values", loss_unit_values()),
        ("curation oracle", curation_oracle()),
        ("AUC oracle", auc_oracle()),
        ("operating point", operating_point_sweep()),
    ];
    let runs = benchmark_runs();
    results.push(("synthetic direction-match", synthetic_direction(&runs)));
    results.push(("ablation and confounder direction-match", ablation_direction(&runs)));
    results.push(("determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
