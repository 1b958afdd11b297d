//! JSON configuration of the box-rotation sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ilqr::{CostWeights, IlqrError, IlqrSettings};
use crate::lower::SolverSettings;
use crate::metrics::Thresholds;
use crate::model::{ContactKind, ContactModel, ModelError, State, SystemParams, Vec2};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed configuration: {0}")]
    Parse(#[from] serde_json::Error),
}

impl ConfigError {
    /// Dotted key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } | ConfigError::UnknownKey(key) => Some(key),
            _ => None,
        }
    }
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

fn nested(prefix: &str, e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidParameter { key, reason } => invalid(format!("{prefix}.{key}"), reason),
        other => invalid(prefix, other.to_string()),
    }
}

/// Diagonal cost weights of one contact model, expanded to the model's state
/// and control dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub q_theta: f64,
    /// Weight of every pusher position coordinate.
    pub q_pos: f64,
    /// Weight of every velocity coordinate, box and pushers.
    pub q_vel: f64,
    /// Weight of every control coordinate.
    pub r: f64,
    /// Signed-distance penalty.
    pub w: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            q_theta: 1.0,
            q_pos: 0.1,
            q_vel: 0.01,
            r: 1e-4,
            w: 10.0,
        }
    }
}

impl WeightConfig {
    pub fn build(&self, n_points: usize, goal: Vec<f64>) -> Result<CostWeights, IlqrError> {
        let mut q = vec![self.q_theta];
        q.extend(std::iter::repeat_n(self.q_pos, 2 * n_points));
        q.extend(std::iter::repeat_n(self.q_vel, 1 + 2 * n_points));
        CostWeights::new(q, vec![self.r; 2 * n_points], self.w, goal)
    }

    fn validate(&self, prefix: &str) -> Result<(), ConfigError> {
        for (name, v, strict) in [
            ("q_theta", self.q_theta, false),
            ("q_pos", self.q_pos, false),
            ("q_vel", self.q_vel, false),
            ("r", self.r, true),
            ("w", self.w, false),
        ] {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if !ok {
                let bound = if strict { "> 0" } else { ">= 0" };
                return Err(invalid(format!("{prefix}.{name}"), format!("must be finite and {bound}, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelWeights {
    pub point: WeightConfig,
    pub fdlc: WeightConfig,
}

impl ModelWeights {
    pub fn get(&self, kind: ContactKind) -> &WeightConfig {
        match kind {
            ContactKind::Point => &self.point,
            ContactKind::Fdlc => &self.fdlc,
        }
    }
}

fn default_kappa_stages() -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 1e-4;
    while k > 1e-8 * 1.0001 {
        out.push(k);
        k *= 0.316;
    }
    out.push(1e-8);
    out
}

/// Optimizer settings with the relaxation continuation used by the sweep.
pub fn default_optimizer() -> IlqrSettings {
    IlqrSettings {
        kappa_stages: default_kappa_stages(),
        ..IlqrSettings::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    pub models: Vec<ContactModel>,
    /// Goal angles (degrees).
    pub goals_deg: Vec<f64>,
    pub horizon: usize,
    pub step: f64,
    pub weights: ModelWeights,
    /// Initial force along +x on every pusher point (N).
    pub u_init: f64,
    /// Gap between the pushers and the face at the start (m).
    pub initial_gap: f64,
    pub thresholds: Thresholds,
    pub solver: SolverSettings,
    pub optimizer: IlqrSettings,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let params = SystemParams::box_rotation();
        Self {
            models: vec![ContactModel::point(), ContactModel::fdlc_default(&params)],
            params,
            goals_deg: vec![10.0, 20.0, 30.0, 40.0],
            horizon: 26,
            step: 0.05,
            weights: ModelWeights::default(),
            u_init: 1.0,
            initial_gap: 0.005,
            thresholds: Thresholds::default(),
            solver: SolverSettings::default(),
            optimizer: default_optimizer(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key=value` overrides in order. Values are read as JSON, falling
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(o, "override must have the form key=value"))?;
            let key = key.trim();
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| invalid("--set", e.to_string()))
    }

    pub fn model(&self, kind: ContactKind) -> Option<&ContactModel> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate().map_err(|e| nested("params", e))?;
        let mut seen = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            m.validate().map_err(|e| nested(&format!("models.{i}"), e))?;
            if seen.contains(&m.kind) {
                return Err(invalid(format!("models.{i}.kind"), format!("model `{}` listed twice", m.kind)));
            }
            seen.push(m.kind);
        }
        for (i, g) in self.goals_deg.iter().enumerate() {
            if !(g.is_finite() && g.abs() < 180.0) {
                return Err(invalid(format!("goals_deg.{i}"), format!("must lie in (-180, 180), got {g}")));
            }
        }
        if self.horizon < 2 {
            return Err(invalid("horizon", format!("must be >= 2, got {}", self.horizon)));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(invalid("step", format!("must be > 0, got {}", self.step)));
        }
        self.weights.point.validate("weights.point")?;
        self.weights.fdlc.validate("weights.fdlc")?;
        if !self.u_init.is_finite() {
            return Err(invalid("u_init", "must be finite"));
        }
        if !(self.initial_gap.is_finite() && self.initial_gap >= 0.0) {
            return Err(invalid("initial_gap", format!("must be >= 0, got {}", self.initial_gap)));
        }
        if !(self.thresholds.eps_reach.is_finite() && self.thresholds.eps_reach > 0.0) {
            return Err(invalid("thresholds.eps_reach", "must be > 0"));
        }
        if !(self.thresholds.f_min.is_finite() && self.thresholds.f_min >= 0.0) {
            return Err(invalid("thresholds.f_min", "must be >= 0"));
        }
        let s = &self.solver;
        if !(s.kappa_final > 0.0 && s.kappa_init >= s.kappa_final) {
            return Err(invalid("solver.kappa_final", "need 0 < kappa_final <= kappa_init"));
        }
        if !(s.kappa_factor > 0.0 && s.kappa_factor < 1.0) {
            return Err(invalid("solver.kappa_factor", "must lie in (0, 1)"));
        }
        if !(s.tol > 0.0) {
            return Err(invalid("solver.tol", "must be > 0"));
        }
        for (i, k) in self.optimizer.kappa_stages.iter().enumerate() {
            if !(k.is_finite() && *k > 0.0) {
                return Err(invalid(format!("optimizer.kappa_stages.{i}"), "must be > 0"));
            }
        }
        if !(self.optimizer.backtrack > 0.0 && self.optimizer.backtrack < 1.0) {
            return Err(invalid("optimizer.backtrack", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Resting start: box at zero, pushers `initial_gap` behind the `-x` face,
    /// line-contact points spread along the face.
    pub fn initial_state(&self, model: &ContactModel) -> State {
        let x = -self.params.half_side() - self.params.pusher_radius - self.initial_gap;
        let pos = match model.kind {
            ContactKind::Point => vec![Vec2::new(x, 0.0)],
            ContactKind::Fdlc => {
                let half = 0.5 * self.params.pusher_sep;
                vec![Vec2::new(x, -half), Vec2::new(x, half)]
            }
        };
        State::at_rest(0.0, pos)
    }

    /// Goal angle with the starting pusher positions and zero velocities.
    pub fn goal_state(&self, model: &ContactModel, goal_deg: f64) -> Vec<f64> {
        let mut g = self.initial_state(model).to_vec();
        g[0] = goal_deg.to_radians();
        g
    }

    pub fn cost_weights(&self, model: &ContactModel, goal_deg: f64) -> Result<CostWeights, IlqrError> {
        self.weights
            .get(model.kind)
            .build(model.n_points(), self.goal_state(model, goal_deg))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    *cur = value;
    Ok(())
}
