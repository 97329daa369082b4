//! Flat `key = value` run files.
//!
//! ```text
//! # comment
//! objective.kind = mlp
//! objective.layers = 784,32,10
//! harness.m = 8
//! operator.lambda = 0.1
//! ```
//!
//! Keys are dotted by section. Unknown or repeated keys are errors, missing
//! keys take defaults that depend on `objective.kind`. Relative data paths
//! resolve against the directory holding the file. [`render`] writes every
//! key, defaults included, in a fixed order so that a rendered file parses
//! back to the same config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{DataConfig, ExperimentConfig, ObjectiveConfig};
use crate::objectives::Activation;

/// Settings for the `grad-check` command.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    /// Number of seeded evaluation points.
    pub points: usize,
    /// Central-difference step; `None` picks one per objective.
    pub step: Option<f64>,
    /// Pass threshold on the mixed error; `None` picks one per objective.
    pub threshold: Option<f64>,
    /// Coordinates sampled per point (all of them when the objective is
    /// smaller).
    pub coords: usize,
    /// Samples per evaluation batch.
    pub batch: usize,
    /// Test fixture: perturb the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            points: 10,
            step: None,
            threshold: None,
            coords: 200,
            batch: 32,
            corrupt: false,
        }
    }
}

/// Everything one run file determines.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FileConfig {
    pub experiment: ExperimentConfig,
    pub grad_check: GradCheckSettings,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(v, _)| v)
    }

    fn parse<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }

    fn parse_opt<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(raw) if raw == "auto" => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}"))),
        }
    }
}

/// Parses run-file text. `base` anchors relative data paths.
pub fn parse(text: &str, base: Option<&Path>) -> Result<FileConfig> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let key = key.trim().to_string();
        if let Some((_, first)) = map.insert(key.clone(), (value.trim().to_string(), i + 1)) {
            return Err(Error::config(
                key,
                format!("repeated (first on line {first})"),
            ));
        }
    }
    let mut e = Entries { map };
    let config = build(&mut e, base)?;
    if let Some((key, (_, line))) = e.map.into_iter().next() {
        return Err(Error::config(key, format!("unknown key on line {line}")));
    }
    config.experiment.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path.parent())
}

fn resolve(base: Option<&Path>, raw: String) -> PathBuf {
    let p = PathBuf::from(raw);
    match base {
        Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
        _ => p,
    }
}

fn build(e: &mut Entries, base: Option<&Path>) -> Result<FileConfig> {
    let defaults = ExperimentConfig::default();
    let kind = e.take("objective.kind").unwrap_or_else(|| "mlp".into());
    let analytic = match kind.as_str() {
        "quadratic" | "rosenbrock" => true,
        "mlp" => false,
        other => {
            return Err(Error::config(
                "objective.kind",
                format!("expected quadratic, rosenbrock or mlp, got `{other}`"),
            ))
        }
    };

    let data_kind = e
        .take("data.kind")
        .unwrap_or_else(|| if analytic { "noise" } else { "mnist" }.into());
    let data = match data_kind.as_str() {
        "mnist" => {
            let (images, labels, limit) = match &defaults.data {
                DataConfig::Mnist {
                    images,
                    labels,
                    limit,
                } => (images.clone(), labels.clone(), *limit),
                _ => unreachable!(),
            };
            DataConfig::Mnist {
                images: e.take("data.images").map_or(images, |p| resolve(base, p)),
                labels: e.take("data.labels").map_or(labels, |p| resolve(base, p)),
                limit: e.parse("data.limit", limit)?,
            }
        }
        "blobs" => DataConfig::Blobs {
            features: e.parse("data.features", 2)?,
            classes: e.parse("data.classes", 2)?,
            samples: e.parse("data.samples", 1000)?,
        },
        "noise" => DataConfig::Noise {
            samples: e.parse("data.samples", 2048)?,
            scale: e.parse("data.noise_scale", 0.1)?,
        },
        other => {
            return Err(Error::config(
                "data.kind",
                format!("expected mnist, blobs or noise, got `{other}`"),
            ))
        }
    };

    let objective = match kind.as_str() {
        "quadratic" => ObjectiveConfig::Quadratic {
            dim: e.parse("objective.dim", 8)?,
            condition: e.parse("objective.condition", 100.0)?,
            init_scale: e.parse("objective.init_scale", 1.0)?,
        },
        "rosenbrock" => ObjectiveConfig::Rosenbrock {
            dim: e.parse("objective.dim", 10)?,
        },
        _ => {
            let default_layers = match &data {
                DataConfig::Blobs {
                    features, classes, ..
                } => vec![*features, 16, *classes],
                _ => vec![784, 32, 10],
            };
            let layers = match e.take("objective.layers") {
                None => default_layers,
                Some(raw) => raw
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|err| {
                        Error::config("objective.layers", format!("cannot parse `{raw}`: {err}"))
                    })?,
            };
            ObjectiveConfig::Mlp {
                layers,
                activation: e.parse("objective.activation", Activation::Tanh)?,
                init_scale: e.parse("objective.init_scale", 1.0)?,
            }
        }
    };

    let experiment = ExperimentConfig {
        objective,
        data,
        workers: e.parse("harness.m", defaults.workers)?,
        local_steps: e.parse("harness.local_steps", defaults.local_steps)?,
        local_lr: e.parse("harness.local_lr", defaults.local_lr)?,
        global_batch: e.parse("harness.global_batch", defaults.global_batch)?,
        epochs: e.parse("harness.epochs", defaults.epochs)?,
        aggregator: e.parse("harness.aggregator", defaults.aggregator)?,
        report_gradient: e.parse("harness.report_gradient", defaults.report_gradient)?,
        threads: e.parse("harness.threads", defaults.threads)?,
        record_wall_time: e.parse("harness.record_wall_time", defaults.record_wall_time)?,
        server_tau: e.parse("operator.tau", defaults.server_tau)?,
        lambda: e.parse("operator.lambda", defaults.lambda)?,
        use_lr_cap: e.parse("operator.lr_cap", defaults.use_lr_cap)?,
        seed: e.parse("seed", defaults.seed)?,
    };
    let g = GradCheckSettings::default();
    let grad_check = GradCheckSettings {
        points: e.parse("gradcheck.points", g.points)?,
        step: e.parse_opt("gradcheck.step")?,
        threshold: e.parse_opt("gradcheck.threshold")?,
        coords: e.parse("gradcheck.coords", g.coords)?,
        batch: e.parse("gradcheck.batch", g.batch)?,
        corrupt: e.parse("gradcheck.corrupt", g.corrupt)?,
    };
    if grad_check.points == 0 || grad_check.coords == 0 || grad_check.batch == 0 {
        return Err(Error::config(
            "gradcheck",
            "points, coords and batch must be positive",
        ));
    }
    Ok(FileConfig {
        experiment,
        grad_check,
    })
}

/// Every key with its effective value. Floats use the shortest form that
/// parses back exactly.
pub fn render(config: &FileConfig) -> String {
    let x = &config.experiment;
    let mut lines: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
    match &x.objective {
        ObjectiveConfig::Quadratic {
            dim,
            condition,
            init_scale,
        } => {
            put("objective.kind", "quadratic".into());
            put("objective.dim", dim.to_string());
            put("objective.condition", format!("{condition:?}"));
            put("objective.init_scale", format!("{init_scale:?}"));
        }
        ObjectiveConfig::Rosenbrock { dim } => {
            put("objective.kind", "rosenbrock".into());
            put("objective.dim", dim.to_string());
        }
        ObjectiveConfig::Mlp {
            layers,
            activation,
            init_scale,
        } => {
            put("objective.kind", "mlp".into());
            let l: Vec<String> = layers.iter().map(usize::to_string).collect();
            put("objective.layers", l.join(","));
            put("objective.activation", activation.to_string());
            put("objective.init_scale", format!("{init_scale:?}"));
        }
    }
    match &x.data {
        DataConfig::Mnist {
            images,
            labels,
            limit,
        } => {
            put("data.kind", "mnist".into());
            put("data.images", images.display().to_string());
            put("data.labels", labels.display().to_string());
            put("data.limit", limit.to_string());
        }
        DataConfig::Blobs {
            features,
            classes,
            samples,
        } => {
            put("data.kind", "blobs".into());
            put("data.features", features.to_string());
            put("data.classes", classes.to_string());
            put("data.samples", samples.to_string());
        }
        DataConfig::Noise { samples, scale } => {
            put("data.kind", "noise".into());
            put("data.samples", samples.to_string());
            put("data.noise_scale", format!("{scale:?}"));
        }
    }
    put("harness.m", x.workers.to_string());
    put("harness.local_steps", x.local_steps.to_string());
    put("harness.local_lr", format!("{:?}", x.local_lr));
    put("harness.global_batch", x.global_batch.to_string());
    put("harness.epochs", x.epochs.to_string());
    put("harness.aggregator", x.aggregator.to_string());
    put("harness.report_gradient", x.report_gradient.to_string());
    put("harness.threads", x.threads.to_string());
    put("harness.record_wall_time", x.record_wall_time.to_string());
    put("operator.tau", format!("{:?}", x.server_tau));
    put("operator.lambda", format!("{:?}", x.lambda));
    put("operator.lr_cap", x.use_lr_cap.to_string());
    put("seed", x.seed.to_string());
    let g = &config.grad_check;
    let auto = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |v| format!("{v:?}"));
    put("gradcheck.points", g.points.to_string());
    put("gradcheck.step", auto(g.step));
    put("gradcheck.threshold", auto(g.threshold));
    put("gradcheck.coords", g.coords.to_string());
    put("gradcheck.batch", g.batch.to_string());
    put("gradcheck.corrupt", g.corrupt.to_string());

    lines
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
