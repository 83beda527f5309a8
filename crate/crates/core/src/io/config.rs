//! Strict TOML run configuration.
//!
//! ```toml
//! [model]
//! name = "systemic_risk"
//! [model.params]
//! rho = 0.3
//!
//! [grid]      # T, N
//! [sampling]  # M, seed, antithetic
//! [training]  # E_Y, E_Z0, E_S, I, lr, decay, decay_every, p_T_weight, picard_tol, picard_max
//! [loop]      # K, delta, tolerance, warm_start
//! [output]    # dir, checkpoint_every
//! ```
//!
//! Every section except `model` is optional, as is every key except
//! `model.name`. Unknown keys are errors.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::models::{GrowthParams, ModelConfig, QuantileParams, SystemicRiskParams};
use crate::orchestrator::RunConfig;

const SECTIONS: [(&str, &[&str]); 6] = [
    ("model", &["name", "params"]),
    ("grid", &["T", "N"]),
    ("sampling", &["M", "seed", "antithetic"]),
    (
        "training",
        &["E_Y", "E_Z0", "E_S", "I", "lr", "decay", "decay_every", "p_T_weight", "picard_tol", "picard_max"],
    ),
    ("loop", &["K", "delta", "tolerance", "warm_start"]),
    ("output", &["dir", "checkpoint_every"]),
];

/// Output options that do not affect the numerics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Write a checkpoint every this many outer iterations (the final one is
    /// always written).
    pub checkpoint_every: Option<usize>,
}

/// A parsed configuration document.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub output: OutputConfig,
}

fn parse_error(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn section<'a>(doc: &'a Table, name: &str) -> Result<Option<&'a Table>> {
    match doc.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(parse_error(format!("`{name}` must be a table"))),
    }
}

fn take<T: DeserializeOwned>(table: Option<&Table>, section: &str, key: &str) -> Result<Option<T>> {
    table
        .and_then(|t| t.get(key))
        .map(|v| {
            v.clone()
                .try_into::<T>()
                .map_err(|e| parse_error(format!("{section}.{key}: {}", e.message())))
        })
        .transpose()
}

fn check_keys(table: &Table, prefix: &str, allowed: &[&str]) -> Result<()> {
    match table.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(parse_error(format!("unknown key `{prefix}.{k}`"))),
        None => Ok(()),
    }
}

/// Keys of a parameter struct, read off its serialized default.
fn param_keys<P: Serialize + Default>() -> Vec<String> {
    match Value::try_from(P::default()) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn params<P: Serialize + DeserializeOwned + Default>(table: Option<&Table>) -> Result<P> {
    let Some(t) = table else {
        return Ok(P::default());
    };
    let keys = param_keys::<P>();
    let allowed: Vec<&str> = keys.iter().map(String::as_str).collect();
    check_keys(t, "model.params", &allowed)?;
    Value::Table(t.clone())
        .try_into::<P>()
        .map_err(|e| parse_error(format!("model.params: {}", e.message())))
}

fn model_config(model: Option<&Table>) -> Result<ModelConfig> {
    let name: String = take(model, "model", "name")?.ok_or_else(|| parse_error("missing required key `model.name`"))?;
    let params_table = match model.and_then(|m| m.get("params")) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => return Err(parse_error("`model.params` must be a table")),
    };
    match name.as_str() {
        "systemic_risk" => Ok(ModelConfig::SystemicRisk(params::<SystemicRiskParams>(params_table)?)),
        "quantile_interaction" => Ok(ModelConfig::QuantileInteraction(params::<QuantileParams>(params_table)?)),
        "growth" => Ok(ModelConfig::Growth(params::<GrowthParams>(params_table)?)),
        other => Err(parse_error(format!(
            "model.name: unknown model `{other}` (expected systemic_risk, quantile_interaction or growth)"
        ))),
    }
}

/// Parses and validates a configuration document. Omitted keys take the
/// defaults of [`RunConfig::default`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| parse_error(e.message().to_string()))?;
    if let Some(k) = doc.keys().find(|k| !SECTIONS.iter().any(|(s, _)| s == k)) {
        return Err(parse_error(format!("unknown section `{k}`")));
    }
    let mut tables = Vec::with_capacity(SECTIONS.len());
    for (name, keys) in SECTIONS {
        let t = section(&doc, name)?;
        if let Some(t) = t {
            check_keys(t, name, keys)?;
        }
        tables.push(t);
    }
    let [model, grid, sampling, training, lp, output] = tables.try_into().expect("six sections");

    let mut run = RunConfig {
        model: model_config(model)?,
        ..RunConfig::default()
    };
    if let Some(v) = take(grid, "grid", "T")? {
        run.horizon = v;
    }
    if let Some(v) = take(grid, "grid", "N")? {
        run.steps = v;
    }
    if let Some(v) = take(sampling, "sampling", "M")? {
        run.paths = v;
    }
    if let Some(v) = take(sampling, "sampling", "seed")? {
        run.seed = v;
    }
    if let Some(v) = take(sampling, "sampling", "antithetic")? {
        run.antithetic = v;
    }
    let plan = &mut run.plan;
    if let Some(v) = take(training, "training", "E_Y")? {
        plan.epochs_y = v;
    }
    if let Some(v) = take(training, "training", "E_Z0")? {
        plan.epochs_z0 = v;
    }
    if let Some(v) = take(training, "training", "E_S")? {
        plan.epochs_s = v;
    }
    if let Some(v) = take(training, "training", "I")? {
        plan.batch = v;
    }
    if let Some(v) = take(training, "training", "lr")? {
        plan.adam.lr = v;
    }
    if let Some(v) = take(training, "training", "decay")? {
        plan.adam.decay = v;
    }
    if let Some(v) = take(training, "training", "decay_every")? {
        plan.adam.decay_every = v;
    }
    if let Some(v) = take(training, "training", "p_T_weight")? {
        plan.terminal_weight = Some(v);
    }
    if let Some(v) = take(training, "training", "picard_tol")? {
        plan.picard_tol = v;
    }
    if let Some(v) = take(training, "training", "picard_max")? {
        plan.picard_max = v;
    }
    if let Some(v) = take(lp, "loop", "K")? {
        run.outer_iterations = v;
    }
    if let Some(v) = take(lp, "loop", "delta")? {
        run.damping = v;
    }
    if let Some(v) = take(lp, "loop", "tolerance")? {
        run.tolerance = v;
    }
    if let Some(v) = take(lp, "loop", "warm_start")? {
        run.warm_start = v;
    }
    let output = OutputConfig {
        dir: take::<String>(output, "output", "dir")?.map(PathBuf::from),
        checkpoint_every: take(output, "output", "checkpoint_every")?,
    };
    if output.checkpoint_every == Some(0) {
        return Err(Error::Config("output.checkpoint_every must be positive".into()));
    }
    run.validate()?;
    Ok(ExperimentConfig { run, output })
}

fn model_document(model: &ModelConfig) -> Result<Table> {
    let params = match model {
        ModelConfig::SystemicRisk(p) => Value::try_from(p),
        ModelConfig::QuantileInteraction(p) => Value::try_from(p),
        ModelConfig::Growth(p) => Value::try_from(p),
    }
    .map_err(|e| parse_error(e.to_string()))?;
    let mut t = Table::new();
    t.insert("name".into(), Value::String(model.name().into()));
    t.insert("params".into(), params);
    Ok(t)
}

/// Writes every key explicitly, so the document pins the run even if
/// defaults change.
pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    let run = &cfg.run;
    let plan = &run.plan;
    let int = |v: u64| -> Result<Value> {
        i64::try_from(v)
            .map(Value::Integer)
            .map_err(|_| Error::Config(format!("{v} does not fit a TOML integer")))
    };
    let mut doc = Table::new();
    doc.insert("model".into(), Value::Table(model_document(&run.model)?));

    let mut grid = Table::new();
    grid.insert("T".into(), Value::Float(run.horizon));
    grid.insert("N".into(), int(run.steps as u64)?);
    doc.insert("grid".into(), Value::Table(grid));

    let mut sampling = Table::new();
    sampling.insert("M".into(), int(run.paths as u64)?);
    sampling.insert("seed".into(), int(run.seed)?);
    sampling.insert("antithetic".into(), Value::Boolean(run.antithetic));
    doc.insert("sampling".into(), Value::Table(sampling));

    let mut training = Table::new();
    training.insert("E_Y".into(), int(plan.epochs_y as u64)?);
    training.insert("E_Z0".into(), int(plan.epochs_z0 as u64)?);
    training.insert("E_S".into(), int(plan.epochs_s as u64)?);
    training.insert("I".into(), int(plan.batch as u64)?);
    training.insert("lr".into(), Value::Float(plan.adam.lr));
    training.insert("decay".into(), Value::Float(plan.adam.decay));
    training.insert("decay_every".into(), int(plan.adam.decay_every)?);
    if let Some(w) = plan.terminal_weight {
        training.insert("p_T_weight".into(), Value::Float(w));
    }
    training.insert("picard_tol".into(), Value::Float(plan.picard_tol));
    training.insert("picard_max".into(), int(plan.picard_max as u64)?);
    doc.insert("training".into(), Value::Table(training));

    let mut lp = Table::new();
    lp.insert("K".into(), int(run.outer_iterations as u64)?);
    lp.insert("delta".into(), Value::Float(run.damping));
    lp.insert("tolerance".into(), Value::Float(run.tolerance));
    lp.insert("warm_start".into(), Value::Boolean(run.warm_start));
    doc.insert("loop".into(), Value::Table(lp));

    let mut output = Table::new();
    if let Some(dir) = &cfg.output.dir {
        output.insert("dir".into(), Value::String(dir.to_string_lossy().into_owned()));
    }
    if let Some(k) = cfg.output.checkpoint_every {
        output.insert("checkpoint_every".into(), int(k as u64)?);
    }
    if !output.is_empty() {
        doc.insert("output".into(), Value::Table(output));
    }
    toml::to_string(&doc).map_err(|e| parse_error(e.to_string()))
}
