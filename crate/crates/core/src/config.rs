//! Run configuration and its JSON schema.
//!
//! ```json
//! {
//!   "preset": {"name": "warped_circle", "radius": 1.0, "alpha": 0.3},
//!   "lambda": 0.5,
//!   "N": 128,
//!   "T_end": 20.0,
//!   "n": 2,
//!   "flow": "d-lambda",
//!   "step": {"mode": "adaptive", "cfl": 0.1, "dt_max": 0.001, "integrator": "rk4", "damping": 0.5},
//!   "n_snapshots": 100,
//!   "diagnostics_every": 1,
//!   "record_residuals": false,
//!   "seed": 0,
//!   "output": {"dir": "out", "snapshots": "snapshots.jsonl",
//!              "diagnostics": "diagnostics.csv", "svg_dir": "svg", "svg_every": 1}
//! }
//! ```
//!
//! `preset`, `lambda`, `N` and `T_end` are required. `preset` may also be a
//! bare name, which selects that preset's default parameters. A fixed step is
//! written `{"mode": "fixed", "dt": 1e-7}`. Everything else defaults as shown,
//! except `output.dir` and `output.svg_dir`, which default to unset. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{CurveError, Result};
use crate::flow::{FlowVariant, Integrator, StepMode, StepPolicy};
use crate::grid::MIN_NODES;
use crate::presets::PresetSpec;

pub const DEFAULT_N_SNAPSHOTS: usize = 100;
pub const DEFAULT_SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const DEFAULT_DIAGNOSTICS_FILE: &str = "diagnostics.csv";

/// Output locations. Relative file names resolve against `dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub dir: Option<PathBuf>,
    pub snapshots: PathBuf,
    pub diagnostics: PathBuf,
    pub svg_dir: Option<PathBuf>,
    /// Write an SVG frame for every `svg_every`-th snapshot.
    pub svg_every: usize,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            dir: None,
            snapshots: DEFAULT_SNAPSHOTS_FILE.into(),
            diagnostics: DEFAULT_DIAGNOSTICS_FILE.into(),
            svg_dir: None,
            svg_every: 1,
        }
    }
}

impl OutputPaths {
    fn under(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.as_deref().unwrap_or(base).join(p)
        }
    }

    /// Snapshot file, with `base` standing in for an unset `dir`.
    pub fn snapshots_path(&self, base: &Path) -> PathBuf {
        self.under(base, &self.snapshots)
    }

    pub fn diagnostics_path(&self, base: &Path) -> PathBuf {
        self.under(base, &self.diagnostics)
    }

    pub fn svg_path(&self, base: &Path) -> Option<PathBuf> {
        self.svg_dir.as_deref().map(|d| self.under(base, d))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub preset: PresetSpec,
    pub lambda: f64,
    /// Ambient dimension.
    pub dim: usize,
    pub nodes: usize,
    pub variant: FlowVariant,
    pub policy: StepPolicy,
    pub t_end: f64,
    pub n_snapshots: usize,
    pub output: OutputPaths,
    pub record_residuals: bool,
    pub seed: u64,
    /// Keep every k-th diagnostics record in memory and on disk.
    pub diagnostics_every: usize,
}

impl FlowConfig {
    /// Config with every optional field at its default.
    pub fn new(preset: PresetSpec, lambda: f64, nodes: usize, t_end: f64) -> Self {
        FlowConfig {
            preset,
            lambda,
            dim: 2,
            nodes,
            variant: FlowVariant::DLambda,
            policy: StepPolicy::default(),
            t_end,
            n_snapshots: DEFAULT_N_SNAPSHOTS,
            output: OutputPaths::default(),
            record_residuals: false,
            seed: 0,
            diagnostics_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(CurveError::config(
                "lambda",
                format!("lambda must be positive, got {}", self.lambda),
            ));
        }
        if self.nodes < MIN_NODES || self.nodes % 2 != 0 {
            return Err(CurveError::config(
                "N",
                format!("N must be even and >= {MIN_NODES}, got {}", self.nodes),
            ));
        }
        if self.dim < 2 {
            return Err(CurveError::config("n", format!("n must be >= 2, got {}", self.dim)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(CurveError::config(
                "T_end",
                format!("T_end must be finite and nonnegative, got {}", self.t_end),
            ));
        }
        if self.n_snapshots == 0 {
            return Err(CurveError::config("n_snapshots", "must be at least 1"));
        }
        if self.diagnostics_every == 0 {
            return Err(CurveError::config("diagnostics_every", "must be at least 1"));
        }
        if self.output.svg_every == 0 {
            return Err(CurveError::config("output.svg_every", "must be at least 1"));
        }
        self.policy.validate()?;
        self.preset.preset.validate()
    }
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    prefix: &'a str,
}

impl<'a> Fields<'a> {
    fn new(value: &'a Value, prefix: &'a str, allowed: &[&str]) -> Result<Self> {
        let map = value.as_object().ok_or_else(|| {
            CurveError::config(if prefix.is_empty() { "<root>" } else { prefix }, "expected an object")
        })?;
        let f = Fields { map, prefix };
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CurveError::config(f.path(k), "unknown key"));
        }
        Ok(f)
    }

    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn required(&self, key: &str) -> Result<&'a Value> {
        self.get(key)
            .ok_or_else(|| CurveError::config(self.path(key), "missing required field"))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |v| {
            v.as_f64()
                .ok_or_else(|| CurveError::config(self.path(key), "expected a number"))
        })
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key).map_or(Ok(default), |v| {
            v.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| CurveError::config(self.path(key), "expected a nonnegative integer"))
        })
    }

    fn str_opt(&self, key: &str) -> Result<Option<&'a str>> {
        self.get(key)
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| CurveError::config(self.path(key), "expected a string"))
            })
            .transpose()
    }
}

const TOP_KEYS: [&str; 13] = [
    "preset",
    "lambda",
    "N",
    "T_end",
    "n",
    "flow",
    "step",
    "n_snapshots",
    "diagnostics_every",
    "record_residuals",
    "seed",
    "output",
    "$schema",
];

pub fn parse_config(text: &str) -> Result<FlowConfig> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| CurveError::config("<root>", format!("invalid JSON: {e}")))?;
    let top = Fields::new(&root, "", &TOP_KEYS)?;

    let preset = PresetSpec::from_json(top.required("preset")?, "preset")?;
    let lambda = top
        .required("lambda")?
        .as_f64()
        .ok_or_else(|| CurveError::config("lambda", "expected a number"))?;
    let nodes = top
        .required("N")?
        .as_u64()
        .ok_or_else(|| CurveError::config("N", "expected a positive integer"))? as usize;
    let t_end = top
        .required("T_end")?
        .as_f64()
        .ok_or_else(|| CurveError::config("T_end", "expected a number"))?;

    let mut cfg = FlowConfig::new(preset, lambda, nodes, t_end);
    cfg.dim = top.usize_or("n", cfg.dim)?;
    if let Some(name) = top.str_opt("flow")? {
        cfg.variant = FlowVariant::parse(name).ok_or_else(|| {
            CurveError::config("flow", format!("unknown flow `{name}` (expected d-lambda or e-lambda)"))
        })?;
    }
    if let Some(step) = top.get("step") {
        cfg.policy = parse_policy(step)?;
    }
    cfg.n_snapshots = top.usize_or("n_snapshots", cfg.n_snapshots)?;
    cfg.diagnostics_every = top.usize_or("diagnostics_every", cfg.diagnostics_every)?;
    if let Some(v) = top.get("record_residuals") {
        cfg.record_residuals = v
            .as_bool()
            .ok_or_else(|| CurveError::config("record_residuals", "expected a boolean"))?;
    }
    if let Some(v) = top.get("seed") {
        cfg.seed = v
            .as_u64()
            .ok_or_else(|| CurveError::config("seed", "expected a nonnegative integer"))?;
    }
    if let Some(out) = top.get("output") {
        cfg.output = parse_output(out)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_policy(value: &Value) -> Result<StepPolicy> {
    let f = Fields::new(value, "step", &["mode", "dt", "cfl", "dt_max", "integrator", "damping"])?;
    let mut policy = StepPolicy::default();
    let mode = f.str_opt("mode")?.unwrap_or("adaptive");
    policy.mode = match mode {
        "adaptive" => {
            if f.get("dt").is_some() {
                return Err(CurveError::config("step.dt", "dt is only valid with mode \"fixed\""));
            }
            StepMode::AdaptiveCfl(f.f64_or("cfl", 0.1)?)
        }
        "fixed" => {
            if f.get("cfl").is_some() {
                return Err(CurveError::config("step.cfl", "cfl is only valid with mode \"adaptive\""));
            }
            StepMode::FixedDt(
                f.required("dt")?
                    .as_f64()
                    .ok_or_else(|| CurveError::config("step.dt", "expected a number"))?,
            )
        }
        other => {
            return Err(CurveError::config(
                "step.mode",
                format!("unknown mode `{other}` (expected adaptive or fixed)"),
            ))
        }
    };
    policy.dt_max = f.f64_or("dt_max", policy.dt_max)?;
    policy.damping = f.f64_or("damping", policy.damping)?;
    if let Some(name) = f.str_opt("integrator")? {
        policy.integrator = match name {
            "rk4" => Integrator::Rk4,
            "euler" => Integrator::Euler,
            other => {
                return Err(CurveError::config(
                    "step.integrator",
                    format!("unknown integrator `{other}` (expected rk4 or euler)"),
                ))
            }
        };
    }
    Ok(policy)
}

fn parse_output(value: &Value) -> Result<OutputPaths> {
    let f = Fields::new(
        value,
        "output",
        &["dir", "snapshots", "diagnostics", "svg_dir", "svg_every"],
    )?;
    let mut out = OutputPaths::default();
    out.dir = f.str_opt("dir")?.map(PathBuf::from);
    if let Some(s) = f.str_opt("snapshots")? {
        out.snapshots = s.into();
    }
    if let Some(s) = f.str_opt("diagnostics")? {
        out.diagnostics = s.into();
    }
    out.svg_dir = f.str_opt("svg_dir")?.map(PathBuf::from);
    out.svg_every = f.usize_or("svg_every", out.svg_every)?;
    Ok(out)
}

/// Renders `config` with every field explicit.
pub fn render_config(config: &FlowConfig) -> String {
    let step = match config.policy.mode {
        StepMode::AdaptiveCfl(cfl) => json!({"mode": "adaptive", "cfl": cfl}),
        StepMode::FixedDt(dt) => json!({"mode": "fixed", "dt": dt}),
    };
    let mut step = step.as_object().cloned().expect("object");
    step.insert("dt_max".into(), json!(config.policy.dt_max));
    step.insert("integrator".into(), json!(config.policy.integrator.name()));
    step.insert("damping".into(), json!(config.policy.damping));

    let path_str = |p: &Path| p.to_string_lossy().into_owned();
    let o = &config.output;
    let output = json!({
        "dir": o.dir.as_deref().map(path_str),
        "snapshots": path_str(&o.snapshots),
        "diagnostics": path_str(&o.diagnostics),
        "svg_dir": o.svg_dir.as_deref().map(path_str),
        "svg_every": o.svg_every,
    });

    let doc = json!({
        "preset": config.preset.to_json(),
        "lambda": config.lambda,
        "N": config.nodes,
        "T_end": config.t_end,
        "n": config.dim,
        "flow": config.variant.name(),
        "step": Value::Object(step),
        "n_snapshots": config.n_snapshots,
        "diagnostics_every": config.diagnostics_every,
        "record_residuals": config.record_residuals,
        "seed": config.seed,
        "output": output,
    });
    serde_json::to_string_pretty(&doc).expect("config serializes")
}
