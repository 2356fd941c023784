use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use cbin_core::baselines::BaselineKind;
use cbin_core::data::DataError;
use cbin_core::experiment::{evaluate_task, grid_to_csv, train_model, train_retrain, ExperimentError, GridPoint, MethodModels};
use cbin_core::model::checkpoint::CheckpointError;
use cbin_core::training::TrainError;
use cbin_core::{Checkpoint, Dataset, Method, ModeChoice, Prepared, ResultsTable, TaskSuite};
use serde_json::{json, Value};

use crate::config::{task_from_names, ExperimentConfig, SplitName};

/// Directory that relative paths in a config file are resolved against.
fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.file_name().unwrap_or_default().to_os_string();
    tmp.push(".partial");
    let tmp = path.with_file_name(tmp);
    let result = fs::write(&tmp, contents).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::Train(TrainError::Diverged { .. }) => "diverged",
                ExperimentError::Train(_) => "train",
                ExperimentError::Data(_) | ExperimentError::EmptySplit(_) => "data",
                ExperimentError::MissingModel(_) => "missing_checkpoint",
                ExperimentError::Model(_) | ExperimentError::Inference(_) => "inference",
            };
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<CheckpointError>() {
            return "checkpoint";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "invalid_input"
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn split_rows(data: &Dataset, split: SplitName) -> Result<&[usize]> {
    let (rows, name) = match split {
        SplitName::Train => (&data.split.train, "train"),
        SplitName::Val => (&data.split.val, "val"),
        SplitName::Test => (&data.split.test, "test"),
    };
    ensure!(!rows.is_empty(), "the {name} split is empty");
    Ok(rows)
}

fn check_compatible(ckpt: &Checkpoint, data: &Dataset, path: &Path) -> Result<()> {
    let names = |v: &[cbin_core::VariableSpec]| v.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
    ensure!(
        names(ckpt.model.variables()) == names(&data.variables) && ckpt.model.feature_dim() == data.feature_dim(),
        "checkpoint {} does not match the configured dataset (variables {:?} with {} features vs {:?} with {})",
        path.display(),
        names(ckpt.model.variables()),
        ckpt.model.feature_dim(),
        names(&data.variables),
        data.feature_dim()
    );
    Ok(())
}

fn prepared_with(raw: &Dataset, ckpt: &Checkpoint) -> Prepared {
    let standardizer = ckpt.standardizer.clone().unwrap_or_else(|| raw.fit_standardizer());
    Prepared {
        data: raw.standardized(&standardizer),
        standardizer,
    }
}

fn with_hash_column(csv: &str, hash: &str) -> String {
    let mut lines = csv.lines();
    let mut out = String::new();
    if let Some(h) = lines.next() {
        let _ = writeln!(out, "config_hash,{h}");
    }
    for l in lines {
        let _ = writeln!(out, "{hash},{l}");
    }
    out
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<Value> {
    let cfg = load_config(config, seed)?;
    let base = config_dir(config);
    let out_dir = out.unwrap_or_else(|| base.join(&cfg.output_dir));
    let hash = cfg.hash();
    let raw = cfg.dataset(&base)?;
    let prepared = Prepared::new(&raw);
    let start = Instant::now();
    let (model, report) = train_model(&prepared, &cfg.architecture, &cfg.train)?;

    let mut log = String::new();
    for e in &report.epochs {
        let mut record = serde_json::to_value(e)?;
        record["config_hash"] = json!(hash);
        let _ = writeln!(log, "{record}");
    }
    let log_path = out_dir.join("train_log.jsonl");
    write_atomic(&log_path, log.as_bytes())?;

    let mut ckpt = Checkpoint::new(model);
    ckpt.standardizer = Some(prepared.standardizer.clone());
    for (k, v) in [
        ("label", cfg.label.clone()),
        ("config_hash", hash.clone()),
        ("seed", cfg.train.seed.to_string()),
        ("lambda_c", cfg.train.lambda_c.to_string()),
        ("inner_iters", cfg.train.inner_iters.to_string()),
    ] {
        ckpt.metadata.insert(k.into(), v);
    }
    let ckpt_path = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&ckpt_path).with_context(|| format!("writing {}", ckpt_path.display()))?;

    Ok(json!({
        "status": "ok",
        "command": "train",
        "config_hash": hash,
        "checkpoint": ckpt_path,
        "log": log_path,
        "epochs": report.epochs.len(),
        "final_joint_nll": report.joint_nll().last(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

pub struct InferRequest {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub targets: Vec<String>,
    pub mode: Option<ModeChoice>,
    pub baseline: Option<BaselineKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn infer(req: InferRequest) -> Result<Value> {
    let cfg = load_config(&req.config, req.seed)?;
    let base = config_dir(&req.config);
    let hash = cfg.hash();
    let ckpt = Checkpoint::load(&req.checkpoint).with_context(|| format!("loading checkpoint {}", req.checkpoint.display()))?;
    let raw = cfg.dataset(&base)?;
    check_compatible(&ckpt, &raw, &req.checkpoint)?;
    let prepared = prepared_with(&raw, &ckpt);
    let vars = &prepared.data.variables;
    let suite = if req.targets.is_empty() {
        cfg.suite.resolve(vars)?
    } else {
        TaskSuite {
            tasks: vec![task_from_names(&req.targets, None, vars)?],
        }
    };
    let rows = split_rows(&prepared.data, cfg.inference.split)?;
    let (xs, vs) = prepared.data.rows(rows);
    let mode = req.mode.unwrap_or(cfg.inference.mode);

    let is_cbin = ckpt.metadata.get("label").is_some_and(|l| l == "cbin");
    let method = match req.baseline {
        None if is_cbin => Method::Cbin,
        None => Method::Bin,
        Some(BaselineKind::PriorOnly) => Method::PriorOnly,
        Some(BaselineKind::RandomInit) => Method::RandomInit,
        Some(BaselineKind::Retrain) => Method::Retrain,
    };
    let retrain = match method {
        Method::Retrain => Some(train_retrain(&prepared, &suite, &cfg.architecture, &cfg.train)?),
        _ => None,
    };
    let models = MethodModels {
        bin: Some(&ckpt.model),
        cbin: Some(&ckpt.model),
        retrain: retrain.as_deref(),
    };

    let mut table = ResultsTable::default();
    let mut preds = String::from("config_hash,task,row,mode,iterations,final_loss");
    for v in vars {
        let _ = write!(preds, ",{}", v.name);
    }
    preds.push('\n');
    for (i, task) in suite.tasks.iter().enumerate() {
        let eval = evaluate_task(method, &models, i, task, &prepared, (&xs, &vs), &cfg.inference.options, mode, cfg.train.seed)?;
        for (s, row) in eval.samples.iter().zip(rows) {
            let loss = s.final_loss.map_or_else(String::new, |l| format!("{l}"));
            let _ = write!(preds, "{hash},{},{row},{},{},{loss}", eval.task, s.mode, s.iterations);
            for v in &s.values {
                let _ = write!(preds, ",{v}");
            }
            preds.push('\n');
        }
        table.cells.push(eval);
    }

    let out = req.out.unwrap_or_else(|| base.join(&cfg.output_dir).join("predictions.csv"));
    let stem = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let stats = out.with_file_name(format!("{stem}_stats.csv"));
    write_atomic(&out, preds.as_bytes())?;
    write_atomic(&stats, table.to_csv(&hash).as_bytes())?;
    let tasks: Vec<Value> = table
        .cells
        .iter()
        .map(|c| {
            json!({
                "task": c.task,
                "metric": c.metric,
                "value": c.value,
                "mean_iterations": c.mean_iterations,
                "mean_final_loss": c.mean_final_loss,
                "modes": distinct_modes(c),
            })
        })
        .collect();
    Ok(json!({
        "status": "ok",
        "command": "infer",
        "config_hash": hash,
        "method": method.label(),
        "predictions": out,
        "stats": stats,
        "tasks": tasks,
    }))
}

fn distinct_modes(c: &cbin_core::experiment::TaskEval) -> Vec<&str> {
    let mut modes: Vec<&str> = Vec::new();
    for s in &c.samples {
        if !modes.contains(&s.mode.as_str()) {
            modes.push(&s.mode);
        }
    }
    modes
}

pub struct SuiteRequest {
    pub config: PathBuf,
    pub checkpoints: Vec<String>,
    pub mode: Option<ModeChoice>,
    pub baselines: Vec<BaselineKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "po" | "prior_only" => Method::PriorOnly,
        "ri" | "random_init" => Method::RandomInit,
        "bin" => Method::Bin,
        "cbin" => Method::Cbin,
        "retrain" => Method::Retrain,
        other => bail!("unknown method `{other}`"),
    })
}

struct Loaded {
    path: PathBuf,
    role: Option<Method>,
    ckpt: Checkpoint,
}

impl Loaded {
    fn meta_f64(&self, key: &str) -> Result<f64> {
        self.ckpt
            .metadata
            .get(key)
            .with_context(|| format!("checkpoint {} has no `{key}` metadata", self.path.display()))?
            .parse()
            .with_context(|| format!("bad `{key}` in {}", self.path.display()))
    }

    fn default_role(&self) -> Method {
        match self.ckpt.metadata.get("label").map(String::as_str) {
            Some("cbin") => Method::Cbin,
            Some("bin") => Method::Bin,
            _ if self.meta_f64("lambda_c").is_ok_and(|l| l > 0.0) => Method::Cbin,
            _ => Method::Bin,
        }
    }
}

pub fn suite(req: SuiteRequest) -> Result<Value> {
    let cfg = load_config(&req.config, req.seed)?;
    let base = config_dir(&req.config);
    let hash = cfg.hash();
    let raw = cfg.dataset(&base)?;

    let mut loaded = Vec::new();
    for spec in &req.checkpoints {
        let (role, path) = match spec.split_once('=') {
            Some((r, p)) => (Some(parse_method(r)?), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        ensure!(
            matches!(role, None | Some(Method::Bin | Method::Cbin)),
            "checkpoint roles are `bin=` or `cbin=`, got `{spec}`"
        );
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        check_compatible(&ckpt, &raw, &path)?;
        loaded.push(Loaded { path, role, ckpt });
    }
    let prepared = match loaded.first() {
        Some(first) => {
            ensure!(
                loaded.iter().all(|l| l.ckpt.standardizer == first.ckpt.standardizer),
                "checkpoints were trained with different preprocessing"
            );
            prepared_with(&raw, &first.ckpt)
        }
        None => Prepared::new(&raw),
    };
    let pick = |m: Method| {
        loaded
            .iter()
            .find(|l| l.role == Some(m))
            .or_else(|| loaded.iter().find(|l| l.role.is_none() && l.default_role() == m))
            .map(|l| &l.ckpt.model)
    };

    let mut methods = cfg.suite.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
    methods.extend(req.baselines.iter().map(|b| match b {
        BaselineKind::PriorOnly => Method::PriorOnly,
        BaselineKind::RandomInit => Method::RandomInit,
        BaselineKind::Retrain => Method::Retrain,
    }));
    let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| methods.contains(m)).collect();

    let suite = cfg.suite.resolve(&prepared.data.variables)?;
    let retrain = if methods.contains(&Method::Retrain) {
        Some(train_retrain(&prepared, &suite, &cfg.architecture, &cfg.train)?)
    } else {
        None
    };
    let models = MethodModels {
        bin: pick(Method::Bin),
        cbin: pick(Method::Cbin),
        retrain: retrain.as_deref(),
    };
    let mode = req.mode.unwrap_or(cfg.inference.mode);
    let opts = &cfg.inference.options;
    let rows = split_rows(&prepared.data, cfg.inference.split)?;
    let (xs, vs) = prepared.data.rows(rows);
    let run = |methods: &[Method], models: &MethodModels, mode: ModeChoice| -> Result<ResultsTable> {
        let mut table = ResultsTable::default();
        for &method in methods {
            for (i, task) in suite.tasks.iter().enumerate() {
                table.cells.push(evaluate_task(method, models, i, task, &prepared, (&xs, &vs), opts, mode, cfg.train.seed)?);
            }
        }
        Ok(table)
    };
    let table = run(&methods, &models, mode)?;

    let mut grid = Vec::new();
    for l in &loaded {
        let one = MethodModels {
            bin: Some(&l.ckpt.model),
            ..Default::default()
        };
        let t = run(&[Method::Bin], &one, ModeChoice::General)?;
        let k = t.cells.len() as f64;
        grid.push(GridPoint {
            inner_iters: l.meta_f64("inner_iters")? as usize,
            lambda_c: l.meta_f64("lambda_c")?,
            mean_iterations: t.cells.iter().map(|c| c.mean_iterations).sum::<f64>() / k,
            metric: t.cells.iter().map(|c| c.value).sum::<f64>() / k,
        });
    }
    grid.sort_by(|a, b| a.lambda_c.total_cmp(&b.lambda_c).then(a.inner_iters.cmp(&b.inner_iters)));

    let out_dir = req.out.unwrap_or_else(|| base.join(&cfg.output_dir));
    let results = out_dir.join("results.csv");
    let wide = out_dir.join("table.csv");
    let grid_path = out_dir.join("grid.csv");
    write_atomic(&results, table.to_csv(&hash).as_bytes())?;
    write_atomic(&wide, with_hash_column(&table.to_wide_csv(), &hash).as_bytes())?;
    write_atomic(&grid_path, grid_to_csv(&grid, &hash).as_bytes())?;
    Ok(json!({
        "status": "ok",
        "command": "suite",
        "config_hash": hash,
        "methods": methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
        "results": results,
        "table": wide,
        "grid": grid_path,
    }))
}

pub fn gen_data(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Value> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        *cfg.dataset.seed_mut() = s;
    }
    let base = config_dir(config);
    let hash = cfg.hash();
    let data = cfg.dataset(&base)?;
    let mut split = vec![""; data.len()];
    for (name, rows) in [("train", &data.split.train), ("val", &data.split.val), ("test", &data.split.test)] {
        for &r in rows {
            split[r] = name;
        }
    }
    let mut text = String::from("split");
    for d in 1..=data.feature_dim() {
        let _ = write!(text, ",x{d}");
    }
    for v in &data.variables {
        let _ = write!(text, ",{}", v.name);
    }
    text.push('\n');
    for ((x, v), s) in data.x.iter().zip(&data.v).zip(&split) {
        text.push_str(s);
        for a in x.iter().chain(v) {
            let _ = write!(text, ",{a}");
        }
        text.push('\n');
    }
    let out = out.unwrap_or_else(|| base.join(&cfg.output_dir).join("data.csv"));
    write_atomic(&out, text.as_bytes())?;
    Ok(json!({
        "status": "ok",
        "command": "gen-data",
        "config_hash": hash,
        "rows": data.len(),
        "features": data.feature_dim(),
        "variables": data.variables.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(),
        "out": out,
    }))
}
