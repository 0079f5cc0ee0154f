use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::config::ExperimentConfig;
use super::metrics::Summary;
use super::output::emit_outputs;
use super::runner::run_experiment;
use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::par;

/// One `--vary key=v1,v2,...` axis. Values are parsed as JSON when they
/// parse, otherwise taken as strings.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl SweepAxis {
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, list) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--vary expects key=v1,v2,..., got {spec:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in --vary {spec:?}")));
        }
        let values: Vec<Value> = split_top_level(list)
            .into_iter()
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("no values in --vary {spec:?}")));
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }
}

/// Splits on commas that are not inside brackets or braces.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in s.char_indices() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(s[start..].trim());
    out.retain(|v| !v.is_empty());
    out
}

/// Sets `value` at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}

/// Cartesian product of the axes, in row-major order.
pub fn sweep_points(axes: &[SweepAxis]) -> Vec<Vec<(String, Value)>> {
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn label(point: &[(String, Value)]) -> String {
    let raw = point
        .iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect::<Vec<_>>()
        .join(",");
    let clean: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._,-".contains(c) { c } else { '_' })
        .collect();
    if clean.is_empty() {
        "base".into()
    } else {
        clean
    }
}

pub fn apply_point(base: &ExperimentConfig, point: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    for (k, val) in point {
        set_path(&mut v, k, val.clone())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub dir: PathBuf,
    pub settings: Vec<(String, Value)>,
    pub summary: Summary,
}

/// Runs every point (and a no-attack companion for attacked points, whose
/// final accuracy becomes the reference for `accuracy_drop`), writing each
/// into its own subdirectory of `out_dir` plus an index `sweep.json`.
pub fn sweep(base: &ExperimentConfig, axes: &[SweepAxis], out_dir: &Path) -> Result<Vec<SweepPoint>> {
    let points = sweep_points(axes);
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| apply_point(base, p)).collect::<Result<_>>()?;
    let results: Vec<Result<SweepPoint>> = par::map(&configs, |i, cfg| {
        let dir = out_dir.join(label(&points[i]));
        let mut outcome = run_experiment(cfg)?;
        if !matches!(cfg.attack.kind, AttackKind::None) {
            let clean_cfg = ExperimentConfig {
                attack: AttackSpec::none(),
                ..cfg.clone()
            };
            let clean = run_experiment(&clean_cfg)?;
            emit_outputs(&clean, &clean_cfg, &dir.join("no_attack"))?;
            outcome.summary = outcome.summary.clone().with_reference(clean.summary.final_accuracy);
        }
        emit_outputs(&outcome, cfg, &dir)?;
        Ok(SweepPoint {
            dir,
            settings: points[i].clone(),
            summary: outcome.summary,
        })
    });
    let out: Vec<SweepPoint> = results.into_iter().collect::<Result<_>>()?;
    let index = out_dir.join("sweep.json");
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&index, text + "\n").map_err(|e| Error::io(&index, e))?;
    Ok(out)
}
