//! Acceptance suite. Each test prints one `ACCEPTANCE <criterion>: PASS|FAIL`
//! line and then asserts. Run with `--nocapture` to see the lines, or
//! `--test-threads=1` to keep them in order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use seal_core::align::{
    combined_loss, feature_matrix, loss_and_gradients, predict, train, train_baseline, ScoringModel, SealModel, TargetBatch,
    TrainConfig,
};
use seal_core::dataio::{filter_conflicts, split_dataset, Dataset, Instance, LabelSchema, SplitSpec, CONTEXT_EXCLUSIVITY_RULE};
use seal_core::hyperopt::{gp_posterior, optimize, random_search, Dimension, GpHyper, GpModel, Scale, SearchSpace};
use seal_core::labels::{LabelEmbeddingTable, TargetEncoding, TemplateTable};
use seal_core::metrics::{f1, label_macro_f1, mcc, report, ConfusionCounts, MetricsReport};
use seal_core::nn::{relative_error, Matrix};
use seal_core::rng::rng_for;
use seal_core::signal::{fourier_resample, sliding_windows, FeatureVector, LabelTrack, Recording, SensorWindow};
use seal_core::synth::{bayes_oracle, generate, CoOccurrence, EmbeddingMode, SimilarPair, SynthSpec};

fn verdict(criterion: &str, pass: bool, detail: String) {
    println!("ACCEPTANCE {criterion}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

// Gradient exactness.

#[test]
fn gradient_exactness() {
    let start = Instant::now();
    let schema = LabelSchema::new(
        (0..3).map(|i| format!("Ctx{i}")).collect(),
        (0..4).map(|i| format!("Act{i}")).collect(),
        vec![],
    )
    .unwrap();
    let table = LabelEmbeddingTable::fallback(&TemplateTable::for_schema(&schema).unwrap(), &schema, 12, 1).unwrap();
    let cfg = TrainConfig { h2_prime: 24, h2: 16, h: 16, dropout: 0.0, ..TrainConfig::default() };
    let model = SealModel::new(&schema, table, 20, &cfg).unwrap();
    let (n, d) = (8, 20);
    let mut rng = rng_for(42, "acceptance/gradient");
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let enc: Vec<TargetEncoding> = (0..n)
        .map(|i| {
            let mut context = vec![0.0; 3];
            context[i % 3] = 1.0;
            let activities = (0..4).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            TargetEncoding { context, activities }
        })
        .collect();
    let t = TargetBatch::from_encodings(enc, 3, 4);
    let w = Matrix::from_vec(n, 4, vec![1.0; n * 4]).unwrap();
    let lambda = 0.8;

    let (_, analytic) = loss_and_gradients(&model, &x, &t, &w, lambda, false, &mut rng).unwrap();
    let loss = |m: &SealModel| combined_loss(&m.scores(&x).unwrap(), &t, &w, lambda).unwrap().0;
    let eps = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (ti, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params()[ti][i];
            probe.params_mut()[ti][i] = orig + eps;
            let plus = loss(&probe);
            probe.params_mut()[ti][i] = orig - eps;
            let minus = loss(&probe);
            probe.params_mut()[ti][i] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
            count += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "gradient-exactness",
        worst < 1e-5 && elapsed < Duration::from_secs(5),
        format!("max relative error {worst:.3e} over {count} parameters in {:.2} s", elapsed.as_secs_f64()),
    );
}

// Metric oracle equivalence.

/// Expands a table to prediction/target vectors.
fn expand(c: &ConfusionCounts) -> (Vec<bool>, Vec<bool>) {
    let mut p = vec![];
    let mut t = vec![];
    for (n, pv, tv) in [(c.tp, true, true), (c.fp, true, false), (c.fn_, false, true), (c.tn, false, false)] {
        for _ in 0..n {
            p.push(pv);
            t.push(tv);
        }
    }
    (p, t)
}

/// Pearson correlation of the 0/1 vectors; 0 when either is constant.
fn phi(p: &[bool], t: &[bool]) -> f64 {
    let n = p.len() as f64;
    let x: Vec<f64> = p.iter().map(|&b| f64::from(u8::from(b))).collect();
    let y: Vec<f64> = t.iter().map(|&b| f64::from(u8::from(b))).collect();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Dice overlap of the sets flagged `class` in each vector.
fn dice(p: &[bool], t: &[bool], class: bool) -> f64 {
    let both = p.iter().zip(t).filter(|(a, b)| **a == class && **b == class).count() as f64;
    let sizes = (p.iter().filter(|a| **a == class).count() + t.iter().filter(|b| **b == class).count()) as f64;
    if both == 0.0 {
        0.0
    } else {
        2.0 * both / sizes
    }
}

#[test]
fn metric_oracle_equivalence() {
    let mut rng = rng_for(7, "acceptance/metrics");
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let max = if i % 10 == 0 { 3 } else { 60 };
        let c = ConfusionCounts::new(
            rng.random_range(0..=max),
            rng.random_range(0..=max),
            rng.random_range(0..=max),
            rng.random_range(0..=max),
        );
        if c.total() == 0 {
            continue;
        }
        let (p, t) = expand(&c);
        worst = worst
            .max((mcc(&c) - phi(&p, &t)).abs())
            .max((f1(&c) - dice(&p, &t, true)).abs())
            .max((label_macro_f1(&c) - 0.5 * (dice(&p, &t, true) + dice(&p, &t, false))).abs());
    }
    let ex = ConfusionCounts::new(6, 1, 2, 3);
    let ex_ok = (mcc(&ex) - 0.47809).abs() < 5e-6 && (label_macro_f1(&ex) - 0.73333).abs() < 5e-6;
    verdict(
        "metric-oracle-equivalence",
        worst <= 1e-12 && ex_ok,
        format!(
            "max deviation {worst:.2e} over 10^4 tables; worked example MCC {:.5}, macro-F1 {:.5}",
            mcc(&ex),
            label_macro_f1(&ex)
        ),
    );
}

// Fourier resampling.

/// Resampling evaluated straight from the DFT definition, for signals with no
/// energy at or above the output Nyquist bin.
fn direct_resample(x: &[f64], k: usize) -> Vec<f64> {
    let t = x.len();
    let tf = t as f64;
    let max_f = (k.min(t) as i64 - 1) / 2;
    (0..k)
        .map(|j| {
            let mut acc = 0.0;
            for f in -max_f..=max_f {
                let (mut re, mut im) = (0.0, 0.0);
                for (s, &v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * f as f64 * s as f64 / tf;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                let b = 2.0 * std::f64::consts::PI * f as f64 * j as f64 / k as f64;
                acc += re * b.cos() - im * b.sin();
            }
            acc / tf
        })
        .collect()
}

fn window(data: Vec<Vec<f64>>) -> SensorWindow {
    SensorWindow {
        channels: (0..data.len()).map(|c| format!("c{c}")).collect(),
        data,
        start_s: 0.0,
        labels: BTreeSet::new(),
    }
}

#[test]
fn fourier_resampling() {
    let tau = 2.0 * std::f64::consts::PI;
    let mut rng = rng_for(3, "acceptance/fourier");
    let noise: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
    let same = fourier_resample(&window(vec![noise.clone()]), 120).unwrap();
    let identity = same.data[0].iter().zip(&noise).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let dc = fourier_resample(&window(vec![vec![2.5; 120]]), 50).unwrap();
    let dc_err = dc.data[0].iter().map(|v| (v - 2.5).abs()).fold(0.0, f64::max);

    let sine: Vec<f64> = (0..120).map(|t| (tau * 4.0 * t as f64 / 120.0).sin()).collect();
    let out = fourier_resample(&window(vec![sine.clone()]), 50).unwrap();
    let oracle = direct_resample(&sine, 50);
    let mut sine_err = 0.0f64;
    for (k, (v, o)) in out.data[0].iter().zip(&oracle).enumerate() {
        sine_err = sine_err.max((v - o).abs()).max((v - (tau * 4.0 * k as f64 / 50.0).sin()).abs());
    }
    let mix: Vec<f64> = (0..120)
        .map(|t| {
            let s = t as f64 / 120.0;
            0.3 + (tau * 2.0 * s).cos() - 0.7 * (tau * 11.0 * s + 0.4).sin() + 0.2 * (tau * 23.0 * s).cos()
        })
        .collect();
    let mix_out = fourier_resample(&window(vec![mix.clone()]), 50).unwrap();
    let mix_err = mix_out.data[0].iter().zip(direct_resample(&mix, 50)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let twelve = fourier_resample(&window(vec![noise; 12]), 50).unwrap();
    let shape = (twelve.data.len(), twelve.num_samples());
    verdict(
        "fourier-resampling",
        identity < 1e-9 && dc_err < 1e-9 && sine_err.max(mix_err) < 1e-6 && shape == (12, 50),
        format!("identity {identity:.1e}, DC {dc_err:.1e}, sinusoid {sine_err:.1e}, mixture {mix_err:.1e}, shape {shape:?}"),
    );
}

// Preprocessing conformance.

fn instance(id: usize, user: &str, labels: &[&str]) -> Instance {
    Instance {
        instance_id: format!("i{id}"),
        user_id: user.into(),
        features: FeatureVector::from_values(vec![id as f64]),
        targets: labels.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn preprocessing_conformance() {
    let rate = 40.0;
    let n = 240;
    let samples: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
    let track = LabelTrack { name: "Walking".into(), active: (0..n).map(|i| i < 61).collect() };
    let rec = Recording::new(rate, vec!["acc_x".into()], samples, vec![track]).unwrap();
    let w = sliding_windows(&rec, 3.0, 1.5).unwrap();
    let offsets: Vec<usize> = w.windows.iter().map(|x| (x.start_s * rate).round() as usize).collect();
    let windows_ok = offsets == [0, 60, 120]
        && w.windows.iter().all(|x| x.num_samples() == 120)
        && w.windows[0].labels.contains("Walking")
        && !w.windows[1].labels.contains("Walking");

    let schema = LabelSchema::new(
        vec!["On Table".into(), "In Pocket".into()],
        vec!["Sleeping".into(), "Running".into(), "Walking".into(), "Talking On Phone".into()],
        vec![],
    )
    .unwrap()
    .with_default_conflicts();
    let ds = |instances: Vec<Instance>| Dataset {
        schema: schema.clone(),
        feature_names: vec!["x".into()],
        instances,
        provenance: "acceptance".into(),
    };
    let sizes = |count: usize| {
        let d = ds((0..count).map(|i| instance(i, "u", &[])).collect());
        let s = split_dataset(&d, &SplitSpec::standard(9)).unwrap();
        [s.train.len(), s.validation.len(), s.test.len()]
    };
    let split_ok = sizes(10) == [6, 2, 2] && sizes(5) == [3, 1, 1];

    let (kept, rep) = filter_conflicts(&ds(vec![
        instance(0, "u", &["On Table", "In Pocket"]),
        instance(1, "u", &["Sleeping", "Running"]),
        instance(2, "u", &["Walking", "Talking On Phone"]),
    ]));
    let kept_ids: Vec<&str> = kept.instances.iter().map(|i| i.instance_id.as_str()).collect();
    let filter_ok = kept_ids == ["i2"]
        && rep.removed == 2
        && rep.per_rule.get(CONTEXT_EXCLUSIVITY_RULE) == Some(&1)
        && rep.per_rule.get("Sleeping + Running") == Some(&1);
    verdict(
        "preprocessing-conformance",
        windows_ok && split_ok && filter_ok,
        format!("window offsets {offsets:?}, split sizes {:?}/{:?}, kept {kept_ids:?}, report {:?}", sizes(10), sizes(5), rep.per_rule),
    );
}

// Separable-synth convergence and oracle dominance share one trained model.

struct ConvergenceRun {
    seal: MetricsReport,
    oracle: MetricsReport,
    elapsed: Duration,
    losses: Vec<f64>,
}

fn convergence_spec() -> SynthSpec {
    let mut spec = SynthSpec::basic(3, 6, 32, 2000, 0.05, 0);
    spec.embedding = EmbeddingMode::Informative { dim: 64, noise: 0.02 };
    spec.co_occurrence = vec![CoOccurrence { anchor: "Activity 0".into(), with: "Activity 3".into(), prob: 0.5 }];
    spec
}

fn convergence_run() -> &'static ConvergenceRun {
    static RUN: OnceLock<ConvergenceRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let spec = convergence_spec();
        let out = generate(&spec).unwrap();
        let split = split_dataset(&out.dataset, &SplitSpec::standard(spec.seed)).unwrap();
        let cfg = TrainConfig { epochs: 100, ..TrainConfig::default() };
        let start = Instant::now();
        let model = SealModel::new(&out.dataset.schema, out.embeddings.clone(), spec.feature_dim, &cfg).unwrap();
        let (model, history) = train(model, &split.train, &split.validation, &cfg).unwrap();
        let elapsed = start.elapsed();
        let x = feature_matrix(&split.test);
        let t = TargetBatch::from_dataset(&split.test).unwrap();
        let schema = &out.dataset.schema;
        let seal = report(&predict(&model, &x, &model.thresholds).unwrap(), &t.encodings, schema).unwrap();
        let oracle = report(&bayes_oracle(&out.truth, &x).unwrap().predictions, &t.encodings, schema).unwrap();
        ConvergenceRun { seal, oracle, elapsed, losses: history.epochs.iter().map(|e| e.train_loss).collect() }
    })
}

#[test]
fn separable_synth_convergence() {
    let run = convergence_run();
    let act = run.seal.activity_average.mcc;
    let ctx = run.seal.context_accuracy.unwrap_or(0.0);
    let decreasing = run.losses.windows(2).take(10).all(|w| w[1] < w[0]);
    verdict(
        "separable-synth-convergence",
        act >= 0.95 && ctx >= 0.98 && run.elapsed < Duration::from_secs(60) && decreasing,
        format!(
            "activity MCC {act:.4}, context accuracy {ctx:.4}, {:.1} s, loss decreasing over first 10 epochs: {decreasing}",
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn oracle_dominance() {
    let run = convergence_run();
    let mut worst = f64::NEG_INFINITY;
    let mut detail = vec![];
    for (s, o) in run.seal.per_label.iter().zip(&run.oracle.per_label) {
        assert_eq!(s.label, o.label);
        worst = worst.max(s.mcc - o.mcc);
        detail.push(format!("{} {:.3}/{:.3}", s.label, s.mcc, o.mcc));
    }
    verdict("oracle-dominance", worst <= 0.02, format!("max SEAL−oracle MCC {worst:.4}; {}", detail.join(", ")));
}

// Semantic advantage.

fn semantic_spec(seed: u64, informative: bool) -> SynthSpec {
    let n_act = 6;
    let mut s = SynthSpec::basic(3, n_act, 16, 5000, 0.1, seed);
    s.activities[0] = "Frequent".into();
    s.activities[1] = "Rare".into();
    s.activity_rates = vec![0.7 / (n_act - 2) as f64; n_act];
    s.activity_rates[0] = 0.2;
    s.activity_rates[1] = 0.01;
    s.similar_pairs = vec![SimilarPair { first: "Frequent".into(), second: "Rare".into(), cosine: 0.9 }];
    s.embedding = if informative { EmbeddingMode::Informative { dim: 32, noise: 0.02 } } else { EmbeddingMode::Uninformative { dim: 32 } };
    s
}

fn semantic_config() -> TrainConfig {
    TrainConfig { epochs: 60, h2_prime: 64, h2: 32, h: 32, ..TrainConfig::default() }
}

/// Median over seeds of SEAL − baseline rare-label MCC on the test split.
fn rare_gap(informative: bool) -> (f64, Vec<(f64, f64)>) {
    let cfg = semantic_config();
    let mut pairs = vec![];
    for seed in 0..5 {
        let spec = semantic_spec(seed, informative);
        let out = generate(&spec).unwrap();
        let split = split_dataset(&out.dataset, &SplitSpec::standard(seed)).unwrap();
        let x = feature_matrix(&split.test);
        let t = TargetBatch::from_dataset(&split.test).unwrap();
        let schema = &out.dataset.schema;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let seal = SealModel::new(schema, out.embeddings.clone(), spec.feature_dim, &cfg).unwrap();
        let (seal, _) = train(seal, &split.train, &split.validation, &cfg).unwrap();
        let (base, _) = train_baseline(&split.train, &split.validation, &cfg).unwrap();
        let rs = report(&predict(&seal, &x, &seal.thresholds).unwrap(), &t.encodings, schema).unwrap();
        let rb = report(&predict(&base, &x, &base.thresholds).unwrap(), &t.encodings, schema).unwrap();
        pairs.push((rs.label("Rare").unwrap().mcc, rb.label("Rare").unwrap().mcc));
    }
    let mut gaps: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    gaps.sort_by(f64::total_cmp);
    (gaps[2], pairs)
}

#[test]
fn semantic_advantage() {
    let (informative, pi) = rare_gap(true);
    let (control, pc) = rare_gap(false);
    let fmt = |p: &[(f64, f64)]| p.iter().map(|(a, b)| format!("{a:.2}/{b:.2}")).collect::<Vec<_>>().join(" ");
    verdict(
        "semantic-advantage",
        informative >= 0.05 && control.abs() <= 0.05,
        format!(
            "median rare-MCC gap informative {informative:.3} (seal/baseline {}), uninformative {control:.3} ({})",
            fmt(&pi),
            fmt(&pc)
        ),
    );
}

// Hyperopt sanity.

fn dense_posterior(x: &[Vec<f64>], y: &[f64], h: &GpHyper, q: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let k = |a: &[f64], b: &[f64]| {
        let r2: f64 = a.iter().zip(b).zip(&h.length_scales).map(|((p, q), l)| ((p - q) / l).powi(2)).sum();
        (-0.5 * r2).exp()
    };
    let kmat = DMatrix::from_fn(n, n, |i, j| k(&x[i], &x[j]) + if i == j { h.noise } else { 0.0 });
    let ys = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / sd));
    let kq = DVector::from_iterator(n, x.iter().map(|p| k(p, q)));
    let lu = kmat.lu();
    let alpha = lu.solve(&ys).unwrap();
    let w = lu.solve(&kq).unwrap();
    (mean + sd * kq.dot(&alpha), sd * sd * (1.0 - kq.dot(&w)))
}

#[test]
fn hyperopt_sanity() {
    let space = SearchSpace::new(vec![Dimension::new("x", 0.0, 1.0, Scale::Linear)]).unwrap();
    let f = |v: &[f64]| Ok((v[0] - 0.3).powi(2));
    let best = optimize(&space, f, 20, 0).unwrap().best.values[0];

    let mut gp_err = 0.0f64;
    for n in 1..=5 {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect();
        let y: Vec<f64> = x.iter().map(|p| p[0] * p[0]).collect();
        let gp = GpModel::fit(x.clone(), &y).unwrap();
        for q in [0.05, 0.33, 0.5, 0.71, 0.98] {
            let (m, v) = gp_posterior(&gp, &[q]);
            let (om, ov) = dense_posterior(&x, &y, gp.hyper(), &[q]);
            gp_err = gp_err.max((m - om).abs()).max((v - ov).abs());
        }
    }

    let (mut bo, mut rs) = (vec![], vec![]);
    for seed in 0..10 {
        bo.push(optimize(&space, f, 20, seed).unwrap().best.objective.unwrap());
        rs.push(random_search(&space, f, 20, seed).unwrap().best.objective.unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let (mb, mr) = (median(&mut bo), median(&mut rs));
    verdict(
        "hyperopt-sanity",
        (best - 0.3).abs() < 0.05 && gp_err < 1e-8 && mb <= mr,
        format!("best x {best:.4}, GP vs dense solve {gp_err:.1e}, median best BO {mb:.2e} vs random {mr:.2e}"),
    );
}

// Determinism through the command-line replay path.

fn seal_bin(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_seal")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_config.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |rel: &str| -> PathBuf { root.join(rel) };
    let s = |rel: &str| p(rel).to_string_lossy().into_owned();

    fs::write(p("rec_schema.json"), r#"{"contexts":["Indoors","Outdoors"],"activities":["Walking"]}"#).unwrap();
    let mut rec = String::from("t,acc_x,acc_y,acc_z,y_Indoors,y_Walking\n");
    for i in 0..400 {
        let t = i as f64 / 40.0;
        rec += &format!("{t},{},{},{},1,{}\n", (t * 5.0).sin(), (t * 2.0).cos(), t * 0.01, u8::from(t > 4.0));
    }
    fs::write(p("rec.csv"), rec).unwrap();
    fs::write(
        p("space.json"),
        r#"{"dims":[{"name":"lr","lower":0.0001,"upper":0.01,"scale":"log10"},{"name":"epochs","lower":1,"upper":3,"scale":"integer"}]}"#,
    )
    .unwrap();

    seal_bin(&["preprocess", "--schema", &s("rec_schema.json"), "--data", &s("rec.csv"), "--out", &s("pre")]);
    seal_bin(&["synth", "--out", &s("data"), "--seed", "11"]);
    let common = |cmd: &str, out: &str| -> Vec<String> {
        [cmd, "--schema", &s("data/schema.json"), "--data", &s("data/features.csv"), "--embeddings", &s("data/embeddings.jsonl")]
            .iter()
            .map(|x| x.to_string())
            .chain(["--out".into(), s(out), "--epochs".into(), "4".into(), "--seed".into(), "2".into()])
            .collect()
    };
    let run = |v: Vec<String>| seal_bin(&v.iter().map(String::as_str).collect::<Vec<_>>());
    run(common("train", "train"));
    run(common("compare", "compare"));
    let mut h = common("hyperopt", "hyperopt");
    h.extend(["--space".into(), s("space.json"), "--budget".into(), "3".into()]);
    run(h);
    let ck = s("train/checkpoint.json");
    seal_bin(&["evaluate", "--checkpoint", &ck, "--data", &s("data/features.csv"), "--out", &s("evaluate")]);
    seal_bin(&["predict", "--checkpoint", &ck, "--data", &s("data/features.csv"), "--out", &s("predict")]);
    seal_bin(&["export-embeddings", "--checkpoint", &ck, "--out", &s("export")]);

    let mut mismatched = vec![];
    let dirs = ["pre", "data", "train", "compare", "hyperopt", "evaluate", "predict", "export"];
    for dir in dirs {
        let again = format!("{dir}_replay");
        seal_bin(&["replay", "--config", &s(&format!("{dir}/run_config.json")), "--out", &s(&again)]);
        let (a, b) = (artifacts(&p(dir)), artifacts(&p(&again)));
        if a.is_empty() || a != b {
            mismatched.push(dir);
        }
    }
    verdict(
        "determinism",
        mismatched.is_empty(),
        format!("replayed {} commands, mismatched {mismatched:?}", dirs.len()),
    );
}
