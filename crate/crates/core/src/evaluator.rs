//! Planning evaluation in a non-reactive simulation.
//!
//! A planned trajectory is anchored at the ego pose of the current frame,
//! resampled to simulator ticks and replayed against the logged agents. Five
//! binary or ratio subscores are combined into one gated aggregate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{integrate, wrap_angle, RelativeAction, Trajectory, Transform2};
use crate::obs_tokenizer::Image;
use crate::world_sim::collision::{first_ttc_violation, overlaps, OrientedBox};
use crate::world_sim::{Clip, Pose, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub history_frames: usize,
    pub horizon: usize,
    /// Simulated seconds after the anchor.
    pub duration: f64,
    pub ttc_horizon: f64,
    pub max_long_accel: f64,
    pub max_lat_accel: f64,
    pub max_yaw_rate: f64,
    /// Finite-difference stride for comfort, in seconds.
    pub comfort_stride: f64,
    /// Below this ground-truth progress (m) ego progress scores 1.
    pub min_progress: f64,
    /// Weights of TTC, comfort and progress inside the gated average.
    pub weights: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            history_frames: 4,
            horizon: 8,
            duration: 4.0,
            ttc_horizon: 1.0,
            max_long_accel: 4.0,
            max_lat_accel: 4.0,
            max_yaw_rate: 1.0,
            comfort_stride: 0.5,
            min_progress: 0.1,
            weights: [5.0, 2.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comf: f64,
    pub ep: f64,
}

/// `nc * dac * (w0*ttc + w1*comf + w2*ep) / sum(w)`.
pub fn pdms(s: &SubScores, weights: [f64; 3]) -> f64 {
    let total: f64 = weights.iter().sum();
    s.nc * s.dac * (weights[0] * s.ttc + weights[1] * s.comf + weights[2] * s.ep) / total
}

/// Ego poses at every simulator tick from the anchor over the simulated window.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub anchor_tick: usize,
    pub hz: f64,
    pub poses: Vec<Pose>,
}

/// Maps the trajectory (knots every `knot_dt` s, relative to the anchor)
/// into the map frame and linearly resamples it at the scenario tick rate.
pub fn rollout_nonreactive(
    traj: &Trajectory,
    scenario: &Scenario,
    anchor_tick: usize,
    knot_dt: f64,
    duration: f64,
) -> Result<Timeline> {
    let span = traj.len() as f64 * knot_dt;
    if span + 1e-9 < duration {
        return Err(invalid(format!(
            "trajectory covers {span} s, simulation needs {duration} s"
        )));
    }
    let ticks = (duration * scenario.hz).round() as usize;
    if anchor_tick + ticks >= scenario.ticks() {
        return Err(invalid("scenario log too short for the simulated window"));
    }
    let anchor = scenario.ego[anchor_tick].transform();
    let mut knots = vec![Transform2::IDENTITY];
    knots.extend(traj.poses.iter().copied());
    let poses = (0..=ticks)
        .map(|i| {
            let t = i as f64 / scenario.hz / knot_dt;
            let k = (t.floor() as usize).min(knots.len() - 2);
            let f = t - k as f64;
            let (a, b) = (&knots[k], &knots[k + 1]);
            let th = a.heading() + f * wrap_angle(b.heading() - a.heading());
            let local = Transform2::from_pose(a.x() + f * (b.x() - a.x()), a.y() + f * (b.y() - a.y()), th);
            Pose::from_transform(&(anchor * local))
        })
        .collect();
    Ok(Timeline {
        anchor_tick,
        hz: scenario.hz,
        poses,
    })
}

fn agent_slice<'a>(scenario: &'a Scenario, tl: &Timeline) -> impl Iterator<Item = (&'a [Pose], (f64, f64))> {
    let (a, n) = (tl.anchor_tick, tl.poses.len());
    scenario
        .agents
        .iter()
        .map(move |ag| (&ag.poses[a..a + n], (ag.length, ag.width)))
}

pub fn score_nc(tl: &Timeline, scenario: &Scenario) -> f64 {
    let ego = |p: &Pose| OrientedBox::new(*p, scenario.ego_length, scenario.ego_width);
    let hit = agent_slice(scenario, tl).any(|(poses, (l, w))| {
        tl.poses
            .iter()
            .zip(poses)
            .any(|(e, a)| overlaps(&ego(e), &OrientedBox::new(*a, l, w)))
    });
    if hit {
        0.0
    } else {
        1.0
    }
}

pub fn score_dac(tl: &Timeline, scenario: &Scenario) -> f64 {
    let road = &scenario.road;
    let inside = tl.poses.iter().all(|p| {
        OrientedBox::new(*p, scenario.ego_length, scenario.ego_width)
            .corners()
            .iter()
            .all(|c| road.project(c[0], c[1]).distance <= road.half_width)
    });
    if inside {
        1.0
    } else {
        0.0
    }
}

pub fn score_ttc(tl: &Timeline, scenario: &Scenario, cfg: &EvalConfig) -> f64 {
    let dims = (scenario.ego_length, scenario.ego_width);
    let bad = agent_slice(scenario, tl)
        .any(|(poses, d)| first_ttc_violation(&tl.poses, dims, poses, d, tl.hz, cfg.ttc_horizon, 0.0).is_some());
    if bad {
        0.0
    } else {
        1.0
    }
}

pub fn score_comf(tl: &Timeline, cfg: &EvalConfig) -> f64 {
    let s = ((cfg.comfort_stride * tl.hz).round() as usize).max(1);
    let dt = s as f64 / tl.hz;
    let p = &tl.poses;
    let vel = |i: usize| [(p[i + s].x - p[i].x) / dt, (p[i + s].y - p[i].y) / dt];
    let yaw_ok = (0..p.len().saturating_sub(s))
        .all(|i| (wrap_angle(p[i + s].theta - p[i].theta) / dt).abs() <= cfg.max_yaw_rate + 1e-9);
    let acc_ok = (0..p.len().saturating_sub(2 * s)).all(|i| {
        let (v1, v2) = (vel(i), vel(i + s));
        let a = [(v2[0] - v1[0]) / dt, (v2[1] - v1[1]) / dt];
        let (sn, cs) = p[i + s].theta.sin_cos();
        let long = a[0] * cs + a[1] * sn;
        let lat = -a[0] * sn + a[1] * cs;
        long.abs() <= cfg.max_long_accel + 1e-9 && lat.abs() <= cfg.max_lat_accel + 1e-9
    });
    if yaw_ok && acc_ok {
        1.0
    } else {
        0.0
    }
}

fn progress(road: &crate::world_sim::Road, poses: &[Pose]) -> f64 {
    let (a, b) = (poses[0], *poses.last().unwrap());
    road.project(b.x, b.y).s - road.project(a.x, a.y).s
}

pub fn score_ep(tl: &Timeline, scenario: &Scenario, cfg: &EvalConfig) -> f64 {
    let n = tl.poses.len();
    let gt = progress(&scenario.road, &scenario.ego[tl.anchor_tick..tl.anchor_tick + n]);
    if gt < cfg.min_progress {
        return 1.0;
    }
    (progress(&scenario.road, &tl.poses) / gt).clamp(0.0, 1.0)
}

pub fn score_all(tl: &Timeline, scenario: &Scenario, cfg: &EvalConfig) -> SubScores {
    SubScores {
        nc: score_nc(tl, scenario),
        dac: score_dac(tl, scenario),
        ttc: score_ttc(tl, scenario, cfg),
        comf: score_comf(tl, cfg),
        ep: score_ep(tl, scenario, cfg),
    }
}

/// Repeats the last history speed straight ahead.
pub fn baseline_constant_velocity(history: &[RelativeAction], horizon: usize) -> Result<Trajectory> {
    let last = history
        .last()
        .ok_or_else(|| invalid("constant velocity needs a history action"))?;
    let d = last.dx.hypot(last.dy);
    integrate(&vec![RelativeAction::new(d, 0.0, 0.0); horizon])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
    Theta,
}

/// Overwrites the chosen components of each predicted action with the last
/// history action's value, then integrates.
pub fn ablate_copy(components: &[Component], predicted: &[RelativeAction], history: &[RelativeAction]) -> Result<Trajectory> {
    let last = history
        .last()
        .ok_or_else(|| invalid("copy ablation needs a history action"))?;
    let actions: Vec<RelativeAction> = predicted
        .iter()
        .map(|a| {
            let mut a = *a;
            for c in components {
                match c {
                    Component::X => a.dx = last.dx,
                    Component::Y => a.dy = last.dy,
                    Component::Theta => a.dtheta = last.dtheta,
                }
            }
            a
        })
        .collect();
    integrate(&actions)
}

/// One held-out planning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub scenario: Scenario,
    /// Frames up to and including the current one.
    pub history_images: Vec<Image>,
    /// Known actions: one fewer than history frames.
    pub history_actions: Vec<RelativeAction>,
    pub future_actions: Vec<RelativeAction>,
    pub anchor_tick: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
}

impl EvalCase {
    pub fn from_clip(clip: &Clip, cfg: &EvalConfig) -> Result<Self> {
        let h = cfg.history_frames;
        if h == 0 || clip.actions.len() < h - 1 + cfg.horizon {
            return Err(invalid("clip too short for history plus horizon"));
        }
        Ok(Self {
            scenario: clip.scenario.clone(),
            history_images: clip.images[..h].to_vec(),
            history_actions: clip.actions[..h - 1].to_vec(),
            future_actions: clip.actions[h - 1..h - 1 + cfg.horizon].to_vec(),
            anchor_tick: (h - 1) * clip.stride,
            frame_dt: clip.stride as f64 / clip.scenario.hz,
        })
    }

    pub fn ground_truth(&self) -> Result<Trajectory> {
        integrate(&self.future_actions)
    }

    pub fn score(&self, traj: &Trajectory, cfg: &EvalConfig) -> Result<SubScores> {
        let tl = rollout_nonreactive(traj, &self.scenario, self.anchor_tick, self.frame_dt, cfg.duration)?;
        Ok(score_all(&tl, &self.scenario, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub seed: u64,
    pub scores: SubScores,
    pub pdms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub mean: SubScores,
    pub pdms: f64,
    pub cases: Vec<CaseScore>,
}

impl EvalReport {
    fn from_cases(name: &str, cases: Vec<CaseScore>) -> Self {
        let n = cases.len().max(1) as f64;
        let mut mean = SubScores::default();
        let mut total = 0.0;
        for c in &cases {
            mean.nc += c.scores.nc;
            mean.dac += c.scores.dac;
            mean.ttc += c.scores.ttc;
            mean.comf += c.scores.comf;
            mean.ep += c.scores.ep;
            total += c.pdms;
        }
        for v in [&mut mean.nc, &mut mean.dac, &mut mean.ttc, &mut mean.comf, &mut mean.ep] {
            *v /= n;
        }
        Self {
            name: name.to_string(),
            mean,
            pdms: total / n,
            cases,
        }
    }
}

/// Scores `planner` on every case. A failing case scores zero and keeps its error.
pub fn evaluate_planner<P>(name: &str, planner: P, cases: &[EvalCase], cfg: &EvalConfig) -> EvalReport
where
    P: Fn(&EvalCase) -> Result<Trajectory> + Sync,
{
    let scored: Vec<CaseScore> = cases
        .par_iter()
        .map(|case| match planner(case).and_then(|t| case.score(&t, cfg)) {
            Ok(s) => CaseScore {
                seed: case.scenario.seed,
                pdms: pdms(&s, cfg.weights),
                scores: s,
                error: None,
            },
            Err(e) => CaseScore {
                seed: case.scenario.seed,
                scores: SubScores::default(),
                pdms: 0.0,
                error: Some(e.to_string()),
            },
        })
        .collect();
    EvalReport::from_cases(name, scored)
}

/// Fixed-column plain-text table, one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
        "method", "NC", "DAC", "TTC", "Comf", "EP", "PDMS"
    );
    for r in reports {
        let m = &r.mean;
        out.push_str(&format!(
            "{:<width$} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}\n",
            r.name,
            100.0 * m.nc,
            100.0 * m.dac,
            100.0 * m.ttc,
            100.0 * m.comf,
            100.0 * m.ep,
            100.0 * r.pdms
        ));
    }
    out
}
