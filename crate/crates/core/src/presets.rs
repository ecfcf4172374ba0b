//! Initial curves.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::error::{CurveError, Result};
use crate::grid::{CurveState, Grid, VectorField};

#[derive(Clone, Debug, PartialEq)]
pub enum Preset {
    /// `r (cos x, sin x)`
    Circle { radius: f64 },
    /// `(a cos x, b sin x)`
    Ellipse { a: f64, b: f64 },
    /// `r (cos u, sin u)` with `u = x + α sin x`, so `|f_x| = r (1 + α cos x)`.
    WarpedCircle { radius: f64, alpha: f64 },
    /// Circle with random low-mode radial and tangential Fourier noise.
    PerturbedCircle { radius: f64, amp: f64, modes: usize },
    /// Nonconvex `((b + cos kx) cos x, (b + cos kx) sin x)`.
    Flower { base: f64, lobes: usize },
}

pub const PRESET_NAMES: [&str; 5] = [
    "circle",
    "ellipse",
    "warped_circle",
    "perturbed_circle",
    "flower",
];

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Circle { .. } => "circle",
            Preset::Ellipse { .. } => "ellipse",
            Preset::WarpedCircle { .. } => "warped_circle",
            Preset::PerturbedCircle { .. } => "perturbed_circle",
            Preset::Flower { .. } => "flower",
        }
    }

    /// Preset with its documented default parameters.
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "circle" => Preset::Circle { radius: 1.0 },
            "ellipse" => Preset::Ellipse { a: 2.0, b: 1.0 },
            "warped_circle" => Preset::WarpedCircle {
                radius: 1.0,
                alpha: 0.3,
            },
            "perturbed_circle" => Preset::PerturbedCircle {
                radius: 1.0,
                amp: 0.1,
                modes: 3,
            },
            "flower" => Preset::Flower {
                base: 2.0,
                lobes: 3,
            },
            other => {
                return Err(CurveError::config(
                    "preset.name",
                    format!("unknown preset `{other}` (known: {})", PRESET_NAMES.join(", ")),
                ))
            }
        })
    }

    pub fn describe(name: &str) -> Option<&'static str> {
        Some(match name {
            "circle" => "circle {radius=1}: r(cos x, sin x)",
            "ellipse" => "ellipse {a=2, b=1}: (a cos x, b sin x)",
            "warped_circle" => {
                "warped_circle {radius=1, alpha=0.3}: r(cos u, sin u), u = x + alpha sin x, alpha in [0, 0.9)"
            }
            "perturbed_circle" => {
                "perturbed_circle {radius=1, amp=0.1, modes=3}: circle with seeded radial and tangential Fourier noise in modes 1..=modes"
            }
            "flower" => "flower {base=2, lobes=3}: ((base + cos(lobes x)) cos x, (base + cos(lobes x)) sin x), base > 1",
            _ => return None,
        })
    }

    fn params(&self) -> Vec<(&'static str, Value)> {
        match *self {
            Preset::Circle { radius } => vec![("radius", json!(radius))],
            Preset::Ellipse { a, b } => vec![("a", json!(a)), ("b", json!(b))],
            Preset::WarpedCircle { radius, alpha } => {
                vec![("radius", json!(radius)), ("alpha", json!(alpha))]
            }
            Preset::PerturbedCircle { radius, amp, modes } => vec![
                ("radius", json!(radius)),
                ("amp", json!(amp)),
                ("modes", json!(modes)),
            ],
            Preset::Flower { base, lobes } => vec![("base", json!(base)), ("lobes", json!(lobes))],
        }
    }

    fn set_param(&mut self, key: &str, value: &Value, path: &str) -> Result<()> {
        let num = || {
            value
                .as_f64()
                .ok_or_else(|| CurveError::config(path, "expected a number"))
        };
        let int = || {
            value
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| CurveError::config(path, "expected a nonnegative integer"))
        };
        match (self, key) {
            (Preset::Circle { radius }, "radius")
            | (Preset::WarpedCircle { radius, .. }, "radius")
            | (Preset::PerturbedCircle { radius, .. }, "radius") => *radius = num()?,
            (Preset::Ellipse { a, .. }, "a") => *a = num()?,
            (Preset::Ellipse { b, .. }, "b") => *b = num()?,
            (Preset::WarpedCircle { alpha, .. }, "alpha") => *alpha = num()?,
            (Preset::PerturbedCircle { amp, .. }, "amp") => *amp = num()?,
            (Preset::PerturbedCircle { modes, .. }, "modes") => *modes = int()?,
            (Preset::Flower { base, .. }, "base") => *base = num()?,
            (Preset::Flower { lobes, .. }, "lobes") => *lobes = int()?,
            (p, k) => {
                return Err(CurveError::config(
                    path,
                    format!("unknown parameter `{k}` for preset {}", p.name()),
                ))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CurveError::config(
                    format!("preset.{name}"),
                    format!("must be positive, got {v}"),
                ))
            }
        };
        match *self {
            Preset::Circle { radius } => positive(radius, "radius"),
            Preset::Ellipse { a, b } => positive(a, "a").and(positive(b, "b")),
            Preset::WarpedCircle { radius, alpha } => {
                positive(radius, "radius")?;
                if (0.0..0.9).contains(&alpha) {
                    Ok(())
                } else {
                    Err(CurveError::config(
                        "preset.alpha",
                        format!("alpha must lie in [0, 0.9), got {alpha}"),
                    ))
                }
            }
            Preset::PerturbedCircle { radius, amp, modes } => {
                positive(radius, "radius")?;
                if modes == 0 {
                    return Err(CurveError::config("preset.modes", "need at least one mode"));
                }
                // worst-case size of the noise in either |ρ - r|/r or |u' - 1|
                let worst = amp * std::f64::consts::SQRT_2 * harmonic(modes);
                if !(amp >= 0.0) || worst >= 0.9 {
                    return Err(CurveError::config(
                        "preset.amp",
                        format!("amp must satisfy 0 <= amp·√2·H(modes) < 0.9, got amp = {amp}"),
                    ));
                }
                Ok(())
            }
            Preset::Flower { base, lobes } => {
                if !(base > 1.0 && base.is_finite()) {
                    return Err(CurveError::config(
                        "preset.base",
                        format!("base must exceed 1, got {base}"),
                    ));
                }
                if lobes == 0 {
                    return Err(CurveError::config("preset.lobes", "need at least one lobe"));
                }
                Ok(())
            }
        }
    }
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// A preset plus its embedding into `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetSpec {
    pub preset: Preset,
    /// Amplitude of the out-of-plane lift `z = lift · sin 2x` (needs `n >= 3`).
    pub lift: f64,
}

impl PresetSpec {
    pub fn new(preset: Preset) -> Self {
        PresetSpec { preset, lift: 0.0 }
    }

    pub fn label(&self) -> String {
        let params: Vec<String> = self
            .preset
            .params()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let mut s = format!("{}({})", self.preset.name(), params.join(", "));
        if self.lift != 0.0 {
            s.push_str(&format!("+lift({})", self.lift));
        }
        s
    }

    /// Accepts either a bare name or `{"name": ..., <params>}`.
    pub fn from_json(value: &Value, path: &str) -> Result<Self> {
        match value {
            Value::String(name) => Ok(PresetSpec::new(Preset::default_for(name)?)),
            Value::Object(map) => {
                let name = map
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| CurveError::config(format!("{path}.name"), "missing preset name"))?;
                let mut spec = PresetSpec::new(Preset::default_for(name)?);
                for (k, v) in map {
                    let p = format!("{path}.{k}");
                    match k.as_str() {
                        "name" => {}
                        "lift" => {
                            spec.lift = v
                                .as_f64()
                                .ok_or_else(|| CurveError::config(p, "expected a number"))?
                        }
                        _ => spec.preset.set_param(k, v, &p)?,
                    }
                }
                spec.preset.validate()?;
                Ok(spec)
            }
            _ => Err(CurveError::config(path, "expected a preset name or object")),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("name".into(), json!(self.preset.name()));
        for (k, v) in self.preset.params() {
            map.insert(k.into(), v);
        }
        if self.lift != 0.0 {
            map.insert("lift".into(), json!(self.lift));
        }
        Value::Object(map)
    }
}

/// Instantiates `spec` on `nodes` grid points in `R^dim` at `t = 0`.
pub fn make_preset(spec: &PresetSpec, nodes: usize, dim: usize, seed: u64) -> Result<CurveState> {
    spec.preset.validate()?;
    let grid = Grid::new(nodes)?;
    if dim < 2 {
        return Err(CurveError::config(
            "n",
            format!("ambient dimension must be >= 2, got {dim}"),
        ));
    }
    if spec.lift != 0.0 && dim < 3 {
        return Err(CurveError::config("preset.lift", "lift needs n >= 3"));
    }
    let planar: Box<dyn Fn(f64) -> (f64, f64)> = match spec.preset {
        Preset::Circle { radius } => Box::new(move |x| (radius * x.cos(), radius * x.sin())),
        Preset::Ellipse { a, b } => Box::new(move |x| (a * x.cos(), b * x.sin())),
        Preset::WarpedCircle { radius, alpha } => Box::new(move |x| {
            let u = x + alpha * x.sin();
            (radius * u.cos(), radius * u.sin())
        }),
        Preset::PerturbedCircle { radius, amp, modes } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<[f64; 4]> = (0..modes)
                .map(|_| [0; 4].map(|_| rng.gen_range(-1.0..=1.0)))
                .collect();
            Box::new(move |x| {
                let mut rho = 1.0;
                let mut u = x;
                for (k, c) in coeffs.iter().enumerate() {
                    let kf = (k + 1) as f64;
                    let (s, co) = (kf * x).sin_cos();
                    rho += amp * (c[0] * co + c[1] * s) / kf;
                    u += amp * (c[2] * s + c[3] * co) / (kf * kf);
                }
                let r = radius * rho;
                (r * u.cos(), r * u.sin())
            })
        }
        Preset::Flower { base, lobes } => Box::new(move |x| {
            let rho = base + (lobes as f64 * x).cos();
            (rho * x.cos(), rho * x.sin())
        }),
    };
    let lift = spec.lift;
    let points = VectorField::from_fn(grid, dim, |x, p| {
        let (a, b) = planar(x);
        p[0] = a;
        p[1] = b;
        if dim >= 3 {
            p[2] = lift * (2.0 * x).sin();
        }
    });
    debug_assert!((grid.x(nodes - 1) - TAU).abs() > 0.0);
    CurveState::new(0.0, points)
}
