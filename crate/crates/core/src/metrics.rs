//! Control effort, travel distance, goal tracking and contact persistence of
//! optimized trajectories, and the point-versus-line comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ilqr::{CostWeights, Trajectory};
use crate::model::{Control, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("reports belong to different goals ({point} vs {fdlc} rad)")]
    GoalMismatch { point: f64, fdlc: f64 },
}

/// Thresholds for reaching the goal and for counting a step as in contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Angle tolerance for the reach step (rad).
    pub eps_reach: f64,
    /// Smallest total normal force counted as contact (N).
    pub f_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_reach: 0.5_f64.to_radians(),
            f_min: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Goal angle (rad).
    pub goal: f64,
    /// `sum ||u_t||^2 h` (N^2 s).
    pub control_effort: f64,
    /// `sum u_t' R u_t h`, when weights were given.
    pub weighted_effort: Option<f64>,
    /// Path length per pusher point, averaged over the points (m).
    pub travel_distance: f64,
    /// `|theta(T) - goal|` (rad).
    pub tracking_error: f64,
    pub reach_step: Option<usize>,
    /// Share of the steps before `reach_step` (all steps if never reached)
    /// carrying at least `f_min` of total normal force.
    pub persistence_ratio: f64,
    /// Total normal force per step (N).
    pub force_series: Vec<f64>,
}

/// Flat form of [`MetricsReport`] for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub goal_deg: f64,
    pub control_effort: f64,
    pub weighted_effort: Option<f64>,
    pub travel_distance: f64,
    pub tracking_error_deg: f64,
    pub reach_step: Option<usize>,
    pub persistence_ratio: f64,
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            goal_deg: r.goal.to_degrees(),
            control_effort: r.control_effort,
            weighted_effort: r.weighted_effort,
            travel_distance: r.travel_distance,
            tracking_error_deg: r.tracking_error.to_degrees(),
            reach_step: r.reach_step,
            persistence_ratio: r.persistence_ratio,
        }
    }
}

pub fn control_effort(controls: &[Control], step: f64) -> f64 {
    controls
        .iter()
        .map(|u| u.forces.iter().map(|f| f.norm_squared()).sum::<f64>() * step)
        .sum()
}

pub fn weighted_effort(controls: &[Control], weights: &CostWeights, step: f64) -> f64 {
    controls
        .iter()
        .map(|u| {
            u.to_vec()
                .iter()
                .zip(weights.r.iter())
                .map(|(v, r)| r * v * v)
                .sum::<f64>()
                * step
        })
        .sum()
}

pub fn travel_distance(states: &[State]) -> f64 {
    let Some(first) = states.first() else {
        return 0.0;
    };
    let n = first.n_points();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = states
        .windows(2)
        .map(|w| {
            (0..n)
                .map(|i| (w[1].pusher_pos[i] - w[0].pusher_pos[i]).norm())
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

/// Cumulative travel distance after each step, starting at zero.
pub fn travel_curve(states: &[State]) -> Vec<f64> {
    let mut out = Vec::with_capacity(states.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in states.windows(2) {
        acc += travel_distance(w);
        out.push(acc);
    }
    out
}

pub fn reach_step(states: &[State], goal: f64, eps: f64) -> Option<usize> {
    states.iter().position(|x| (x.theta_box - goal).abs() <= eps)
}

pub fn persistence_ratio(force_series: &[f64], reach: Option<usize>, f_min: f64) -> f64 {
    let upto = reach.unwrap_or(force_series.len()).min(force_series.len());
    if upto == 0 {
        return 1.0;
    }
    let touching = force_series[..upto].iter().filter(|&&f| f >= f_min).count();
    touching as f64 / upto as f64
}

/// Metrics from raw series; `normal_totals[t]` is the total normal force over
/// step `t`.
pub fn evaluate_series(
    states: &[State],
    controls: &[Control],
    normal_totals: &[f64],
    goal: f64,
    step: f64,
    thresholds: &Thresholds,
) -> MetricsReport {
    let reach = reach_step(states, goal, thresholds.eps_reach);
    MetricsReport {
        goal,
        control_effort: control_effort(controls, step),
        weighted_effort: None,
        travel_distance: travel_distance(states),
        tracking_error: states.last().map_or(0.0, |x| (x.theta_box - goal).abs()),
        reach_step: reach,
        persistence_ratio: persistence_ratio(normal_totals, reach, thresholds.f_min),
        force_series: normal_totals.to_vec(),
    }
}

pub fn normal_totals(traj: &Trajectory) -> Vec<f64> {
    traj.forces.iter().map(|f| f.iter().map(|c| c.normal).sum()).collect()
}

pub fn evaluate(traj: &Trajectory, goal: f64, step: f64, thresholds: &Thresholds) -> MetricsReport {
    evaluate_series(&traj.states, &traj.controls, &normal_totals(traj), goal, step, thresholds)
}

/// Like [`evaluate`], also filling in the `R`-weighted effort.
pub fn evaluate_weighted(
    traj: &Trajectory,
    goal: f64,
    step: f64,
    thresholds: &Thresholds,
    weights: &CostWeights,
) -> MetricsReport {
    let mut r = evaluate(traj, goal, step, thresholds);
    r.weighted_effort = Some(weighted_effort(&traj.controls, weights, step));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub goal_deg: f64,
    pub effort_point: f64,
    pub effort_fdlc: f64,
    /// `fdlc / point`.
    pub effort_ratio: f64,
    pub distance_point: f64,
    pub distance_fdlc: f64,
    pub distance_ratio: f64,
    pub persistence_point: f64,
    pub persistence_fdlc: f64,
    pub persistence_ratio: f64,
    pub effort_fdlc_lower: bool,
    pub distance_fdlc_lower: bool,
    pub persistence_fdlc_not_lower: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den
    }
}

pub fn compare(point: &MetricsReport, fdlc: &MetricsReport) -> Result<ComparisonRow, MetricsError> {
    if (point.goal - fdlc.goal).abs() > 1e-12 {
        return Err(MetricsError::GoalMismatch {
            point: point.goal,
            fdlc: fdlc.goal,
        });
    }
    Ok(ComparisonRow {
        goal_deg: point.goal.to_degrees(),
        effort_point: point.control_effort,
        effort_fdlc: fdlc.control_effort,
        effort_ratio: ratio(fdlc.control_effort, point.control_effort),
        distance_point: point.travel_distance,
        distance_fdlc: fdlc.travel_distance,
        distance_ratio: ratio(fdlc.travel_distance, point.travel_distance),
        persistence_point: point.persistence_ratio,
        persistence_fdlc: fdlc.persistence_ratio,
        persistence_ratio: ratio(fdlc.persistence_ratio, point.persistence_ratio),
        effort_fdlc_lower: fdlc.control_effort < point.control_effort,
        distance_fdlc_lower: fdlc.travel_distance < point.travel_distance,
        persistence_fdlc_not_lower: fdlc.persistence_ratio >= point.persistence_ratio,
    })
}

/// Write serializable rows as CSV with a header taken from the field order.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vec2;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn still(theta: f64, p: Vec2) -> State {
        State::at_rest(theta, vec![p])
    }

    fn ctl(x: f64, y: f64) -> Control {
        Control {
            forces: vec![Vec2::new(x, y)],
        }
    }

    #[test]
    fn null_trajectory_at_goal() {
        let states = vec![still(0.0, Vec2::new(-0.02, 0.0)); 3];
        let controls = vec![ctl(0.0, 0.0); 2];
        let r = evaluate_series(&states, &controls, &[0.0, 0.0], 0.0, 0.05, &Thresholds::default());
        assert_eq!(r.control_effort, 0.0);
        assert_eq!(r.travel_distance, 0.0);
        assert_eq!(r.tracking_error, 0.0);
        assert_eq!(r.reach_step, Some(0));
        assert_eq!(r.persistence_ratio, 1.0);
    }

    #[test]
    fn effort_by_hand() {
        let e = control_effort(&[ctl(1.0, 0.0), ctl(0.0, 2.0)], 0.05);
        assert_relative_eq!(e, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn distance_by_hand() {
        let states = vec![
            still(0.0, Vec2::new(0.0, 0.0)),
            still(0.0, Vec2::new(0.003, 0.004)),
            still(0.0, Vec2::new(0.006, 0.008)),
        ];
        assert_relative_eq!(travel_distance(&states), 0.01, epsilon = 1e-15);
        let curve = travel_curve(&states);
        assert_relative_eq!(curve[1], 0.005, epsilon = 1e-15);
        assert_relative_eq!(curve[2], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn distance_is_averaged_over_points() {
        let a = State::at_rest(0.0, vec![Vec2::zeros(), Vec2::zeros()]);
        let b = State::at_rest(0.0, vec![Vec2::new(0.01, 0.0), Vec2::zeros()]);
        assert_relative_eq!(travel_distance(&[a, b]), 0.005, epsilon = 1e-15);
    }

    #[test]
    fn persistence_counts_only_before_reach() {
        assert_eq!(persistence_ratio(&[0.0, 1.0, 1.0, 0.0, 0.0], Some(3), 0.01), 2.0 / 3.0);
        assert_eq!(persistence_ratio(&[1.0, 1.0, 0.0, 0.0], None, 0.01), 0.5);
        assert_eq!(persistence_ratio(&[1.0, 1.0, 1.0], Some(3), 0.01), 1.0);
        assert_eq!(persistence_ratio(&[0.005, 1.0], None, 0.01), 0.5);
    }

    fn report(goal: f64, effort: f64, dist: f64, pers: f64) -> MetricsReport {
        MetricsReport {
            goal,
            control_effort: effort,
            weighted_effort: None,
            travel_distance: dist,
            tracking_error: 0.0,
            reach_step: None,
            persistence_ratio: pers,
            force_series: vec![],
        }
    }

    #[test]
    fn identical_reports_compare_even() {
        let r = report(0.3, 2.0, 0.1, 0.5);
        let c = compare(&r, &r).unwrap();
        assert_eq!((c.effort_ratio, c.distance_ratio, c.persistence_ratio), (1.0, 1.0, 1.0));
        assert!(!c.effort_fdlc_lower && !c.distance_fdlc_lower);
        assert!(c.persistence_fdlc_not_lower);
    }

    #[test]
    fn effort_ratio_by_hand() {
        let c = compare(&report(0.3, 2.0, 0.1, 0.5), &report(0.3, 1.0, 0.1, 0.5)).unwrap();
        assert_eq!(c.effort_ratio, 0.5);
        assert!(c.effort_fdlc_lower);
    }

    #[test]
    fn goal_mismatch_is_rejected() {
        let e = compare(&report(0.3, 1.0, 0.1, 0.5), &report(0.4, 1.0, 0.1, 0.5)).unwrap_err();
        assert!(matches!(e, MetricsError::GoalMismatch { .. }));
    }

    #[test]
    fn csv_header_is_stable() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[MetricsRow::from(&report(0.0, 1.0, 0.1, 0.5))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "goal_deg,control_effort,weighted_effort,travel_distance,tracking_error_deg,reach_step,persistence_ratio\n"
        ));
    }

    proptest! {
        #[test]
        fn effort_is_reversal_invariant_and_quadratic(
            us in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..20),
            s in 0.1..10.0f64,
        ) {
            let controls: Vec<Control> = us.iter().map(|&(x, y)| ctl(x, y)).collect();
            let e = control_effort(&controls, 0.05);
            let rev: Vec<Control> = controls.iter().rev().cloned().collect();
            prop_assert!((control_effort(&rev, 0.05) - e).abs() <= 1e-12 * (1.0 + e));
            let scaled: Vec<Control> = us.iter().map(|&(x, y)| ctl(s * x, s * y)).collect();
            prop_assert!((control_effort(&scaled, 0.05) - s * s * e).abs() <= 1e-9 * (1.0 + s * s * e));
        }

        #[test]
        fn distance_is_reversal_invariant_and_linear(
            ps in proptest::collection::vec((-0.1..0.1f64, -0.1..0.1f64), 2..20),
            s in 0.1..10.0f64,
        ) {
            let states: Vec<State> = ps.iter().map(|&(x, y)| still(0.0, Vec2::new(x, y))).collect();
            let d = travel_distance(&states);
            let rev: Vec<State> = states.iter().rev().cloned().collect();
            prop_assert!((travel_distance(&rev) - d).abs() <= 1e-12);
            let scaled: Vec<State> = ps.iter().map(|&(x, y)| still(0.0, Vec2::new(s * x, s * y))).collect();
            prop_assert!((travel_distance(&scaled) - s * d).abs() <= 1e-12 * (1.0 + s * d));
        }

        #[test]
        fn persistence_is_a_ratio(fs in proptest::collection::vec(0.0..1.0f64, 0..30), reach in proptest::option::of(0usize..30)) {
            let p = persistence_ratio(&fs, reach, 0.01);
            prop_assert!((0.0..=1.0).contains(&p));
            if fs.iter().all(|&f| f >= 0.01) {
                prop_assert_eq!(p, 1.0);
            }
        }
    }
}
