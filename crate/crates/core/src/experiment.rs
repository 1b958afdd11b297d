//! The box-rotation sweep: optimize every (model, goal) pair, evaluate,
//! compare, and persist the artifacts; plus replay of stored trajectories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::ilqr::{optimize, write_iteration_log_to, Dynamics, IlqrError, Trajectory};
use crate::lower::{ContactForce, SolveError};
use crate::metrics::{self, ComparisonRow, MetricsReport, MetricsRow};
use crate::model::{ContactKind, ContactModel, Control, State};
use crate::plot;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trajectory file does not match the schema: {0}")]
    SchemaMismatch(String),
    #[error("trajectory has {found} pusher points but the configured `{kind}` model has {expected}")]
    DimensionMismatch {
        kind: ContactKind,
        expected: usize,
        found: usize,
    },
    #[error("no `{0}` model in the configuration")]
    MissingModel(ContactKind),
    #[error("replay failed: {0}")]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Ilqr(#[from] IlqrError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stored form of an optimized trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub model: ContactModel,
    pub goal_deg: f64,
    pub step: f64,
    /// Relaxation the trajectory was solved at.
    pub kappa: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `[theta, p_1x, p_1y, ..., omega, v_1x, v_1y, ...]` per knot.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub forces: Vec<Vec<ContactForce>>,
}

impl TrajectoryFile {
    pub fn new(model: &ContactModel, goal_deg: f64, step: f64, traj: &Trajectory) -> Self {
        Self {
            model: model.clone(),
            goal_deg,
            step,
            kappa: traj.kappa,
            cost: traj.cost,
            iterations: traj.stats.iterations,
            converged: traj.stats.converged,
            states: traj.states.iter().map(State::to_vec).collect(),
            controls: traj.controls.iter().map(Control::to_vec).collect(),
            forces: traj.forces.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        // NaN is not valid JSON, so a hand-edited NaN fails here too
        let file: Self = serde_json::from_str(&text).map_err(|e| ExperimentError::SchemaMismatch(e.to_string()))?;
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<(), ExperimentError> {
        let n = self.model.n_points();
        let bad = |what: String| Err(ExperimentError::SchemaMismatch(what));
        if self.states.len() != self.controls.len() + 1 {
            return bad(format!("{} states for {} controls", self.states.len(), self.controls.len()));
        }
        for (t, x) in self.states.iter().enumerate() {
            if x.len() != State::dim(n) {
                return bad(format!("state {t} has {} entries, expected {}", x.len(), State::dim(n)));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return bad(format!("state {t} is not finite"));
            }
        }
        for (t, u) in self.controls.iter().enumerate() {
            if u.len() != 2 * n {
                return bad(format!("control {t} has {} entries, expected {}", u.len(), 2 * n));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return bad(format!("control {t} is not finite"));
            }
        }
        if !(self.step.is_finite() && self.step > 0.0 && self.kappa.is_finite() && self.kappa > 0.0) {
            return bad("step and kappa must be positive".into());
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.model.n_points()
    }
}

/// Outcome of one (model, goal) optimization.
#[derive(Debug)]
pub struct RunOutcome {
    pub kind: ContactKind,
    pub goal_deg: f64,
    pub result: Result<(Trajectory, MetricsReport), String>,
}

impl RunOutcome {
    pub fn name(&self) -> String {
        run_name(self.kind, self.goal_deg)
    }

    pub fn report(&self) -> Option<&MetricsReport> {
        self.result.as_ref().ok().map(|(_, r)| r)
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.result.as_ref().ok().map(|(t, _)| t)
    }
}

pub fn run_name(kind: ContactKind, goal_deg: f64) -> String {
    format!("{}_{}", kind.name(), goal_deg)
}

#[derive(Debug)]
pub struct RunBundle {
    pub runs: Vec<RunOutcome>,
    pub comparisons: Vec<ComparisonRow>,
    /// Written files relative to the output directory, sorted.
    pub files: Vec<PathBuf>,
}

impl RunBundle {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    pub fn get(&self, kind: ContactKind, goal_deg: f64) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.kind == kind && r.goal_deg == goal_deg)
    }
}

#[derive(Debug, Serialize)]
struct ManifestRun {
    name: String,
    model: ContactKind,
    goal_deg: f64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    runs: Vec<ManifestRun>,
    /// sha256 of every other file in the bundle.
    files: BTreeMap<String, String>,
}

/// Optimize one (model, goal) pair.
pub fn optimize_run(config: &ExperimentConfig, model: &ContactModel, goal_deg: f64) -> Result<(Trajectory, MetricsReport), String> {
    let x0 = config.initial_state(model);
    let weights = config.cost_weights(model, goal_deg).map_err(|e| e.to_string())?;
    let dynamics = Dynamics {
        params: config.params.clone(),
        model: model.clone(),
        step: config.step,
        solver: config.solver.clone(),
    };
    let mut u = Control::zeros(model.n_points());
    for f in &mut u.forces {
        f.x = config.u_init;
    }
    let u_init = vec![u; config.horizon];
    let traj = optimize(&x0, &weights, &u_init, &dynamics, &config.optimizer).map_err(|e| e.to_string())?;
    let report = metrics::evaluate_weighted(&traj, goal_deg.to_radians(), config.step, &config.thresholds, &weights);
    Ok((traj, report))
}

/// Optimize every (model, goal) pair without writing anything.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<RunOutcome>, ExperimentError> {
    config.validate()?;
    let jobs: Vec<(&ContactModel, f64)> = config
        .goals_deg
        .iter()
        .flat_map(|&g| config.models.iter().map(move |m| (m, g)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(m, g)| {
            let result = optimize_run(config, m, g);
            if let Err(e) = &result {
                log::warn!("{} failed: {e}", run_name(m.kind, g));
            } else {
                log::info!("{} done", run_name(m.kind, g));
            }
            RunOutcome {
                kind: m.kind,
                goal_deg: g,
                result,
            }
        })
        .collect())
}

/// Per-goal comparisons of every goal where both models succeeded.
pub fn comparisons(config: &ExperimentConfig, runs: &[RunOutcome]) -> Vec<ComparisonRow> {
    let find = |k: ContactKind, g: f64| runs.iter().find(|r| r.kind == k && r.goal_deg == g).and_then(RunOutcome::report);
    config
        .goals_deg
        .iter()
        .filter_map(|&g| {
            let p = find(ContactKind::Point, g)?;
            let f = find(ContactKind::Fdlc, g)?;
            let mut row = metrics::compare(p, f).ok()?;
            row.goal_deg = g;
            Some(row)
        })
        .collect()
}

/// Run the sweep and write the bundle to `out`. Per-run failures are recorded
/// in the manifest and do not stop the others.
pub fn run(config: &ExperimentConfig, out: &Path, verbose: bool) -> Result<RunBundle, ExperimentError> {
    let runs = sweep(config)?;
    let comparisons = comparisons(config, &runs);
    let files = write_bundle(config, out, &runs, &comparisons, verbose)?;
    Ok(RunBundle {
        runs,
        comparisons,
        files,
    })
}

struct Writer<'a> {
    root: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn put(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<(), ExperimentError> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.push(rel.to_path_buf());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, rel: impl AsRef<Path>, rows: &[T]) -> Result<(), ExperimentError> {
        let mut buf = Vec::new();
        metrics::write_csv(&mut buf, rows).map_err(|e| ExperimentError::Io {
            path: rel.as_ref().to_path_buf(),
            source: e.into(),
        })?;
        self.put(rel, &buf)
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.put(rel, text.as_bytes())
    }
}

fn write_bundle(
    config: &ExperimentConfig,
    out: &Path,
    runs: &[RunOutcome],
    comparisons: &[ComparisonRow],
    verbose: bool,
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut w = Writer {
        root: out,
        files: Vec::new(),
    };
    let mut manifest_runs = Vec::new();
    for r in runs {
        let name = r.name();
        match &r.result {
            Ok((traj, report)) => {
                let model = config.model(r.kind).expect("run of a configured model");
                let dir = PathBuf::from(&name);
                w.json(dir.join("trajectory.json"), &TrajectoryFile::new(model, r.goal_deg, config.step, traj))?;
                let row = MetricsRow {
                    goal_deg: r.goal_deg,
                    ..MetricsRow::from(report)
                };
                w.csv(dir.join("metrics.csv"), &[row])?;
                w.json(dir.join("metrics.json"), report)?;
                w.csv(dir.join("controls.csv"), &control_rows(traj, config.step))?;
                w.put(dir.join("forces.csv"), &force_csv(traj, config.step))?;
                w.csv(dir.join("travel.csv"), &travel_rows(traj, config.step))?;
                if verbose {
                    let mut buf = Vec::new();
                    write_iteration_log_to(&mut buf, &traj.stats).map_err(io_err(&dir))?;
                    w.put(dir.join("iterations.csv"), &buf)?;
                }
                manifest_runs.push(ManifestRun {
                    name,
                    model: r.kind,
                    goal_deg: r.goal_deg,
                    status: "ok",
                    error: None,
                    iterations: Some(traj.stats.iterations),
                    converged: Some(traj.stats.converged),
                });
            }
            Err(e) => manifest_runs.push(ManifestRun {
                name,
                model: r.kind,
                goal_deg: r.goal_deg,
                status: "failed",
                error: Some(e.clone()),
                iterations: None,
                converged: None,
            }),
        }
    }
    if !runs.is_empty() {
        w.csv("comparison.csv", comparisons)?;
        w.json("comparison.json", comparisons)?;
        for (rel, svg) in plot::render_all(out)? {
            w.put(rel, svg.as_bytes())?;
        }
    }
    let mut hashes = BTreeMap::new();
    for rel in &w.files {
        let bytes = fs::read(out.join(rel)).map_err(io_err(rel))?;
        hashes.insert(rel.to_string_lossy().replace('\\', "/"), hex::encode(Sha256::digest(&bytes)));
    }
    let manifest = Manifest {
        config,
        runs: manifest_runs,
        files: hashes,
    };
    w.json("manifest.json", &manifest)?;
    let mut files = w.files;
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlRow {
    pub t: usize,
    pub time: f64,
    /// Point index.
    pub point: usize,
    pub fx: f64,
    pub fy: f64,
}

fn control_rows(traj: &Trajectory, step: f64) -> Vec<ControlRow> {
    traj.controls
        .iter()
        .enumerate()
        .flat_map(|(t, u)| {
            u.forces.iter().enumerate().map(move |(i, f)| ControlRow {
                t,
                time: t as f64 * step,
                point: i,
                fx: f.x,
                fy: f.y,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TravelRow {
    pub t: usize,
    pub time: f64,
    pub theta_deg: f64,
    pub travel: f64,
}

fn travel_rows(traj: &Trajectory, step: f64) -> Vec<TravelRow> {
    metrics::travel_curve(&traj.states)
        .into_iter()
        .zip(&traj.states)
        .enumerate()
        .map(|(t, (d, x))| TravelRow {
            t,
            time: t as f64 * step,
            theta_deg: x.theta_box.to_degrees(),
            travel: d,
        })
        .collect()
}

fn force_csv(traj: &Trajectory, step: f64) -> Vec<u8> {
    let n = traj.forces.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "time".into(), "normal_total".into()];
    for i in 0..n {
        header.push(format!("normal_{i}"));
        header.push(format!("tangent_{i}"));
    }
    header.push("ground_torque".into());
    w.write_record(&header).expect("in-memory write");
    for (t, f) in traj.forces.iter().enumerate() {
        let mut rec = vec![t.to_string(), format!("{:?}", t as f64 * step)];
        rec.push(format!("{:?}", f.iter().map(|c| c.normal).sum::<f64>()));
        for c in f {
            rec.push(format!("{:?}", c.normal));
            rec.push(format!("{:?}", c.tangent));
        }
        rec.push(format!("{:?}", traj.ground_torque[t]));
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

#[derive(Debug)]
pub struct ReplayReport {
    pub trajectory: Trajectory,
    /// Largest infinity-norm difference between stored and replayed states.
    pub max_deviation: f64,
}

/// Re-simulate the stored controls of `path` with the configuration's
/// parameters and the matching contact model.
pub fn replay(path: &Path, config: &ExperimentConfig) -> Result<ReplayReport, ExperimentError> {
    config.validate()?;
    let file = TrajectoryFile::read(path)?;
    replay_file(&file, config)
}

pub fn replay_file(file: &TrajectoryFile, config: &ExperimentConfig) -> Result<ReplayReport, ExperimentError> {
    let kind = file.model.kind;
    let model = config.model(kind).ok_or(ExperimentError::MissingModel(kind))?;
    let n = model.n_points();
    if file.n_points() != n {
        return Err(ExperimentError::DimensionMismatch {
            kind,
            expected: n,
            found: file.n_points(),
        });
    }
    let x0 = State::from_slice(&file.states[0], n).map_err(|e| ExperimentError::SchemaMismatch(e.to_string()))?;
    let controls = file
        .controls
        .iter()
        .map(|u| Control::from_slice(u, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ExperimentError::SchemaMismatch(e.to_string()))?;
    let dynamics = Dynamics {
        params: config.params.clone(),
        model: model.clone(),
        step: file.step,
        solver: config.solver.clone(),
    };
    let weights = config.cost_weights(model, file.goal_deg)?;
    let trajectory = dynamics.simulate(&x0, &controls, file.kappa, &weights)?;
    let max_deviation = trajectory
        .states
        .iter()
        .zip(&file.states)
        .flat_map(|(a, b)| a.to_vec().into_iter().zip(b.iter().copied()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Ok(ReplayReport {
        trajectory,
        max_deviation,
    })
}
