use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seal_core::align::{
    export_label_embeddings, feature_matrix, train, train_baseline, Checkpoint, SealModel, TargetBatch, ThresholdPolicy,
    TrainConfig, TrainedModel, CHECKPOINT_FORMAT_VERSION,
};
use seal_core::dataio::{filter_conflicts, load_feature_dataset, split_dataset, write_feature_dataset, Dataset, Instance, LabelSchema, SplitSpec};
use seal_core::hyperopt::{read_history_csv, suggest, write_history_csv, SearchSpace, Trial, TrialStatus};
use seal_core::labels::{load_embedding_table, LabelEmbeddingTable, TemplateTable};
use seal_core::metrics::{report, MetricsReport};
use seal_core::signal::{extract_features, feature_names, fit_normalizer, load_recording_csv, sliding_windows, FeatureVector, Normalizer};
use seal_core::synth::{generate, SynthSpec};
use seal_core::Error;

use crate::args::{Command, EvaluateArgs, ExportArgs, HyperoptArgs, PartArg, PolicyArg, PredictArgs, PreprocessArgs, ReplayArgs, SynthArgs, TrainArgs};

pub const SNAPSHOT_FILE: &str = "run_config.json";
const SNAPSHOT_VERSION: u32 = 1;
pub const WINDOW_S: f64 = 3.0;
pub const STEP_S: f64 = 1.5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 3,
            Error::Schema(_) | Error::SchemaMismatch(_) => 4,
            Error::InvalidArgument(_) => 5,
            Error::Parse { .. } | Error::Format { .. } | Error::Json(_) => 6,
            Error::Numerical(_) => 7,
            Error::Dimension(_) => 8,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Debug, Serialize, Deserialize)]
struct RunConfig {
    snapshot_version: u32,
    #[serde(flatten)]
    command: Command,
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e }.into())
}

fn write_text(path: &Path, body: &str) -> Outcome {
    fs::write(path, body).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn write_snapshot(out: &Path, command: &Command) -> Outcome {
    create_dir(out)?;
    let snap = RunConfig { snapshot_version: SNAPSHOT_VERSION, command: command.clone() };
    let body = serde_json::to_string_pretty(&snap).map_err(Error::from)? + "\n";
    write_text(&out.join(SNAPSHOT_FILE), &body)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), message: e.to_string() }.into())
}

fn log(verbose: bool, msg: impl AsRef<str>) {
    if verbose {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn dispatch(command: Command, verbose: bool) -> Outcome {
    if let Command::Replay(r) = &command {
        return replay(r, verbose);
    }
    write_snapshot(&command.clone().out_mut().clone(), &command)?;
    match command {
        Command::Preprocess(a) => preprocess(&a, verbose),
        Command::Synth(a) => synth(&a, verbose),
        Command::Train(a) => train_cmd(&a, verbose),
        Command::Evaluate(a) => evaluate(&a, verbose),
        Command::Predict(a) => predict_cmd(&a, verbose),
        Command::Hyperopt(a) => hyperopt(&a, verbose),
        Command::ExportEmbeddings(a) => export(&a, verbose),
        Command::Compare(a) => compare(&a, verbose),
        Command::Replay(_) => unreachable!("handled above"),
    }
}

fn replay(r: &ReplayArgs, verbose: bool) -> Outcome {
    let snap: RunConfig = read_json(&r.config)?;
    if snap.snapshot_version != SNAPSHOT_VERSION {
        return Err(Failure::new(6, format!("{}: unsupported snapshot version {}", r.config.display(), snap.snapshot_version)));
    }
    let mut command = snap.command;
    if let Some(out) = &r.out {
        *command.out_mut() = out.clone();
    }
    log(verbose, format!("replaying `{}`", command.name()));
    dispatch(command, verbose)
}

fn preprocess(a: &PreprocessArgs, verbose: bool) -> Outcome {
    let schema = LabelSchema::from_json_file(&a.schema)?;
    let rec = load_recording_csv(&a.data, a.sample_rate)?;
    let windowing = sliding_windows(&rec, WINDOW_S, STEP_S)?;
    if windowing.too_short {
        return Err(Failure::new(5, format!("{}: recording is shorter than one {WINDOW_S} s window", a.data.display())));
    }
    let mut instances = Vec::with_capacity(windowing.windows.len());
    for (i, w) in windowing.windows.iter().enumerate() {
        if let Some(bad) = w.labels.iter().find(|l| !schema.contains(l)) {
            return Err(Error::SchemaMismatch(format!("recording label `{bad}` is not in the schema")).into());
        }
        instances.push(Instance {
            instance_id: format!("{}-w{i:05}", a.user),
            user_id: a.user.clone(),
            features: extract_features(w),
            targets: w.labels.clone(),
        });
    }
    let dataset = Dataset {
        schema,
        feature_names: feature_names(&rec.channels),
        instances,
        provenance: format!("recording:{}", a.data.display()),
    };
    dataset.validate()?;
    write_feature_dataset(&dataset, a.out.join("features.csv"))?;
    log(verbose, format!("{} windows, {} features", dataset.len(), dataset.feature_dim()));
    Ok(())
}

fn synth(a: &SynthArgs, verbose: bool) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_json_file(p)?,
        None => SynthSpec::basic(3, 6, 32, 2000, 0.05, 0),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let out = generate(&spec)?;
    out.write_to(&a.out)?;
    spec.to_json_file(a.out.join("spec.json"))?;
    log(verbose, format!("{} instances written to {}", out.dataset.len(), a.out.display()));
    Ok(())
}

/// Normalized split plus everything a checkpoint needs to redo it.
struct Prepared {
    schema: LabelSchema,
    raw_names: Vec<String>,
    normalizer: Normalizer,
    split: SplitSpec,
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn normalize(ds: &Dataset, norm: &Normalizer, names: &[String]) -> Outcome<Dataset> {
    let instances = ds
        .instances
        .iter()
        .map(|i| Ok(Instance { features: norm.apply(&i.features)?, ..i.clone() }))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Dataset {
        schema: ds.schema.clone(),
        feature_names: norm.kept_names(names),
        instances,
        provenance: ds.provenance.clone(),
    })
}

fn prepare(a: &TrainArgs, verbose: bool) -> Outcome<Prepared> {
    let schema = LabelSchema::from_json_file(&a.schema)?;
    let data = load_feature_dataset(&a.data, &schema)?;
    let (filtered, filter_report) = filter_conflicts(&data);
    log(verbose, format!("conflict filter removed {} of {} instances", filter_report.removed, data.len()));
    let split = SplitSpec::standard(a.seed);
    let parts = split_dataset(&filtered, &split)?;
    let train_vectors: Vec<FeatureVector> = parts.train.instances.iter().map(|i| i.features.clone()).collect();
    let normalizer = fit_normalizer(&train_vectors)?;
    let names = &filtered.feature_names;
    Ok(Prepared {
        train: normalize(&parts.train, &normalizer, names)?,
        validation: normalize(&parts.validation, &normalizer, names)?,
        test: normalize(&parts.test, &normalizer, names)?,
        raw_names: names.clone(),
        normalizer,
        split,
        schema,
    })
}

fn search_space(a: &TrainArgs) -> Outcome<SearchSpace> {
    let space = match &a.space {
        Some(p) => read_json::<SearchSpace>(p)?,
        None => SearchSpace::default(),
    };
    space.validate()?;
    Ok(space)
}

fn train_config(a: &TrainArgs) -> Outcome<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = a.threshold_policy {
        cfg.threshold_policy = match p {
            PolicyArg::Fixed => ThresholdPolicy::Fixed,
            PolicyArg::Tuned => ThresholdPolicy::Tuned,
        };
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    if a.strict_space {
        search_space(a)?.check_config(&cfg)?;
    }
    Ok(cfg)
}

fn embeddings(a: &TrainArgs, schema: &LabelSchema) -> Outcome<LabelEmbeddingTable> {
    Ok(match &a.embeddings {
        Some(p) => load_embedding_table(p, schema)?,
        None => LabelEmbeddingTable::fallback(&TemplateTable::for_schema(schema)?, schema, a.embedding_dim, a.seed)?,
    })
}

fn evaluate_on(model: &TrainedModel, ds: &Dataset) -> Outcome<MetricsReport> {
    let preds = model.predict(&feature_matrix(ds), model.thresholds())?;
    let targets = TargetBatch::from_dataset(ds)?;
    Ok(report(&preds, &targets.encodings, model.schema())?)
}

fn checkpoint(p: &Prepared, model: TrainedModel, cfg: &TrainConfig, history: &seal_core::align::History) -> Checkpoint {
    Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model,
        optimizer: Some(history.optimizer.clone()),
        normalizer: Some(p.normalizer.clone()),
        feature_names: p.raw_names.clone(),
        split: Some(p.split),
        config: cfg.clone(),
        best_epoch: Some(history.best_epoch),
    }
}

fn train_cmd(a: &TrainArgs, verbose: bool) -> Outcome {
    let cfg = train_config(a)?;
    let p = prepare(a, verbose)?;
    let table = embeddings(a, &p.schema)?;
    let model = SealModel::new(&p.schema, table, p.normalizer.output_dim(), &cfg)?;
    let (model, history) = train(model, &p.train, &p.validation, &cfg)?;
    log(verbose, format!("best epoch {} (val loss {:.6})", history.best_epoch, history.best_val_loss()));
    let ck = checkpoint(&p, TrainedModel::Seal(model), &cfg, &history);
    ck.save(a.out.join("checkpoint.json"))?;
    write_text(&a.out.join("history.csv"), &history.to_csv())?;
    if !p.test.is_empty() {
        evaluate_on(&ck.model, &p.test)?.write_files(&a.out, "test_metrics")?;
    }
    Ok(())
}

fn compare(a: &TrainArgs, verbose: bool) -> Outcome {
    let cfg = train_config(a)?;
    let p = prepare(a, verbose)?;
    let table = embeddings(a, &p.schema)?;
    let seal = SealModel::new(&p.schema, table, p.normalizer.output_dim(), &cfg)?;
    let (seal, seal_hist) = train(seal, &p.train, &p.validation, &cfg)?;
    let (base, base_hist) = train_baseline(&p.train, &p.validation, &cfg)?;
    let seal_ck = checkpoint(&p, TrainedModel::Seal(seal), &cfg, &seal_hist);
    let base_ck = checkpoint(&p, TrainedModel::Baseline(base), &cfg, &base_hist);
    seal_ck.save(a.out.join("seal_checkpoint.json"))?;
    base_ck.save(a.out.join("baseline_checkpoint.json"))?;
    let rs = evaluate_on(&seal_ck.model, &p.test)?;
    let rb = evaluate_on(&base_ck.model, &p.test)?;
    rs.write_files(&a.out, "seal_metrics")?;
    rb.write_files(&a.out, "baseline_metrics")?;
    let mut body = String::from("label,group,seal_mcc,baseline_mcc,seal_macro_f1,baseline_macro_f1\n");
    for (s, b) in rs.per_label.iter().zip(&rb.per_label) {
        let quote = if s.label.contains(',') { format!("\"{}\"", s.label) } else { s.label.clone() };
        body += &format!("{quote},{},{},{},{},{}\n", s.group, s.mcc, b.mcc, s.macro_f1, b.macro_f1);
    }
    for (name, s, b) in [
        ("context average", &rs.context_average, &rb.context_average),
        ("activity average", &rs.activity_average, &rb.activity_average),
    ] {
        body += &format!("{name},,{},{},{},{}\n", s.mcc, b.mcc, s.macro_f1, b.macro_f1);
    }
    write_text(&a.out.join("comparison.csv"), &body)?;
    log(
        verbose,
        format!("activity MCC: seal {:.4}, baseline {:.4}", rs.activity_average.mcc, rb.activity_average.mcc),
    );
    Ok(())
}

/// Loads a checkpoint and a feature CSV, checks they agree and normalizes.
fn load_for_inference(checkpoint: &Path, data: &Path, schema: Option<&PathBuf>) -> Outcome<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let model_schema = ck.model.schema().clone();
    if let Some(p) = schema {
        let given = LabelSchema::from_json_file(p)?;
        if given != model_schema {
            return Err(Error::SchemaMismatch(format!("{} differs from the checkpoint schema", p.display())).into());
        }
    }
    let ds = load_feature_dataset(data, &model_schema)?;
    if ds.feature_names != ck.feature_names {
        return Err(Error::Dimension(format!(
            "{} has {} feature columns that do not match the {} the checkpoint was trained on",
            data.display(),
            ds.feature_dim(),
            ck.feature_names.len()
        ))
        .into());
    }
    let ds = match &ck.normalizer {
        Some(n) => normalize(&ds, n, &ck.feature_names)?,
        None => ds,
    };
    Ok((ck, ds))
}

fn evaluate(a: &EvaluateArgs, verbose: bool) -> Outcome {
    let (ck, ds) = load_for_inference(&a.checkpoint, &a.data, a.schema.as_ref())?;
    let (filtered, _) = filter_conflicts(&ds);
    let part = match a.part {
        PartArg::All => filtered,
        part => {
            let spec = ck.split.ok_or_else(|| Failure::new(5, "checkpoint records no split; use --part all"))?;
            let s = split_dataset(&filtered, &spec)?;
            match part {
                PartArg::Train => s.train,
                PartArg::Validation => s.validation,
                _ => s.test,
            }
        }
    };
    let r = evaluate_on(&ck.model, &part)?;
    r.write_files(&a.out, "metrics")?;
    log(verbose, format!("{} instances, activity MCC {:.4}", r.instances, r.activity_average.mcc));
    Ok(())
}

fn predict_cmd(a: &PredictArgs, verbose: bool) -> Outcome {
    let (ck, ds) = load_for_inference(&a.checkpoint, &a.data, a.schema.as_ref())?;
    let preds = ck.model.predict(&feature_matrix(&ds), ck.model.thresholds())?;
    let schema = ck.model.schema();
    let path = a.out.join("predictions.csv");
    let to_err = |e: csv::Error| Failure::from(Error::Format { path: path.clone(), message: e.to_string() });
    let mut w = csv::Writer::from_path(&path).map_err(to_err)?;
    let mut header = vec!["instance_id".to_string(), "context".to_string()];
    header.extend(schema.activities.iter().cloned());
    header.extend(schema.labels().map(|l| format!("score_{l}")));
    w.write_record(&header).map_err(to_err)?;
    for (i, inst) in ds.instances.iter().enumerate() {
        let mut row = vec![inst.instance_id.clone(), schema.contexts[preds.context[i]].clone()];
        row.extend(preds.activities[i].iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        row.extend(preds.scores.row(i).iter().map(|s| s.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
    log(verbose, format!("{} predictions written", ds.len()));
    Ok(())
}

fn hyperopt(a: &HyperoptArgs, verbose: bool) -> Outcome {
    if a.budget == 0 {
        return Err(Failure::new(5, "--budget must be at least 1"));
    }
    let t = &a.train;
    let base = train_config(t)?;
    let space = search_space(t)?;
    let p = prepare(t, verbose)?;
    let table = embeddings(t, &p.schema)?;
    let history_path = t.out.join("history.csv");
    let mut history: Vec<Trial> = if history_path.exists() { read_history_csv(&history_path, &space)? } else { Vec::new() };
    if !history.is_empty() {
        log(verbose, format!("resuming from {} trials", history.len()));
    }
    while history.len() < a.budget {
        let values = suggest(&space, &history, t.seed)?;
        let objective = space.apply(&base, &values).map_err(Failure::from).and_then(|cfg| {
            cfg.validate()?;
            let model = SealModel::new(&p.schema, table.clone(), p.normalizer.output_dim(), &cfg)?;
            let (_, h) = train(model, &p.train, &p.validation, &cfg)?;
            Ok(h.best_val_loss())
        });
        let index = history.len();
        let trial = match objective {
            Ok(v) if v.is_finite() => Trial::completed(index, values, v),
            Ok(_) => Trial::failed(index, values),
            Err(f) => {
                log(verbose, format!("trial {index} failed: {}", f.message));
                Trial::failed(index, values)
            }
        };
        log(verbose, format!("trial {index}: {:?} -> {:?}", trial.values, trial.objective));
        history.push(trial);
        write_history_csv(&history_path, &space, &history)?;
    }
    let best = history
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .min_by(|x, y| x.objective.unwrap_or(f64::INFINITY).total_cmp(&y.objective.unwrap_or(f64::INFINITY)))
        .ok_or_else(|| Failure::new(7, "every trial failed"))?;
    let cfg = space.apply(&base, &best.values)?;
    let body = serde_json::to_string_pretty(&cfg).map_err(Error::from)? + "\n";
    write_text(&t.out.join("best_config.json"), &body)
}

fn export(a: &ExportArgs, verbose: bool) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    match &ck.model {
        TrainedModel::Seal(m) => {
            let t = export_label_embeddings(m, a.out.join("projected_embeddings.jsonl"))?;
            log(verbose, format!("{} projected label embeddings written", t.rows.len()));
            Ok(())
        }
        TrainedModel::Baseline(_) => Err(Failure::new(5, "the baseline model has no label embeddings to export")),
    }
}
