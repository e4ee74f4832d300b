//! Deterministic synthetic driving world.
//!
//! Roads are chained straights and arcs. The ego follows the centerline with
//! pure pursuit on a kinematic bicycle under a cruise, stop-and-go or
//! car-following speed profile. Background agents drive constant-speed logs
//! on the side lanes; a following ego has a slower lead in its own lane.
//! Observations are ego-centric top-down rasters with the ego not drawn.

pub mod collision;
mod render;
pub mod road;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driving_language::container::{write_raw, Manifest, RawRecord, SequenceEntry, MANIFEST_SCHEMA};
use crate::error::{invalid, Error, Result};
use crate::geometry::{relativize, RelativeAction, Transform2};
use crate::obs_tokenizer::Image;

use collision::{first_overlap, first_ttc_violation};
pub use render::render;
pub use road::{Pose, Road, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Simulator tick rate.
    pub sim_hz: f64,
    pub image_size: usize,
    pub meters_per_pixel: f64,
    /// Pixel row and column of the ego reference point.
    pub anchor_row: usize,
    pub anchor_col: usize,
    pub half_width: f64,
    pub lane_offset: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Probability that a road segment is an arc; 0 gives straight roads.
    pub turn_probability: f64,
    pub straight_length: (f64, f64),
    pub arc_angle: (f64, f64),
    pub wheelbase: f64,
    pub lookahead_min: f64,
    /// Lookahead grows by this many seconds of travel.
    pub lookahead_time: f64,
    pub substeps: usize,
    pub speed: (f64, f64),
    pub accel: f64,
    pub stop_probability: f64,
    pub stop_wait: (f64, f64),
    /// Share of the non-stopping scenarios that follow a slower lead vehicle.
    pub follow_probability: f64,
    /// Bumper-to-bumper gap once the ego has matched the lead's speed.
    pub follow_gap: (f64, f64),
    pub max_agents: usize,
    pub agent_speed: (f64, f64),
    pub oncoming_probability: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Clearance kept between generated agents and the logged ego.
    pub agent_margin: f64,
    pub agent_ttc_horizon: f64,
    pub offroad_shade: [f32; 3],
    pub road_shade: [f32; 3],
    pub agent_shade: [f32; 3],
    pub stop_line_shade: [f32; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sim_hz: 10.0,
            image_size: 32,
            meters_per_pixel: 1.25,
            anchor_row: 24,
            anchor_col: 16,
            half_width: 5.25,
            lane_offset: 3.5,
            min_radius: 35.0,
            max_radius: 120.0,
            turn_probability: 0.6,
            straight_length: (15.0, 50.0),
            arc_angle: (0.3, 1.2),
            wheelbase: 2.7,
            lookahead_min: 5.0,
            lookahead_time: 0.8,
            substeps: 10,
            speed: (5.0, 10.0),
            accel: 2.0,
            stop_probability: 0.5,
            stop_wait: (1.0, 3.0),
            follow_probability: 0.5,
            follow_gap: (6.0, 10.0),
            max_agents: 4,
            agent_speed: (3.0, 12.0),
            oncoming_probability: 0.3,
            vehicle_length: 4.5,
            vehicle_width: 2.0,
            agent_margin: 0.5,
            agent_ttc_horizon: 1.5,
            offroad_shade: [0.15, 0.35, 0.15],
            road_shade: [0.5, 0.5, 0.5],
            agent_shade: [0.9, 0.2, 0.15],
            stop_line_shade: [1.0, 1.0, 1.0],
        }
    }
}

fn check_range(name: &str, r: (f64, f64), min: f64) -> Result<()> {
    if !(r.0 >= min && r.1 >= r.0 && r.1.is_finite()) {
        return Err(invalid(format!("{name} range {r:?} invalid")));
    }
    Ok(())
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_hz > 0.0) || self.substeps == 0 {
            return Err(invalid("simulator rate and substeps must be positive"));
        }
        if self.image_size == 0 || self.anchor_row >= self.image_size || self.anchor_col >= self.image_size {
            return Err(invalid("ego anchor must lie inside the image"));
        }
        if !(self.meters_per_pixel > 0.0) || !(self.half_width > 0.0) || !(self.wheelbase > 0.0) {
            return Err(invalid("scale, road width and wheelbase must be positive"));
        }
        if !(self.min_radius >= 2.0 * self.wheelbase && self.min_radius > self.half_width + self.vehicle_width) {
            return Err(invalid(format!(
                "minimum radius {} too tight for wheelbase {} and half-width {}",
                self.min_radius, self.wheelbase, self.half_width
            )));
        }
        if self.max_radius < self.min_radius {
            return Err(invalid("max radius below min radius"));
        }
        check_range("straight length", self.straight_length, 1.0)?;
        check_range("arc angle", self.arc_angle, 0.0)?;
        check_range("speed", self.speed, 0.0)?;
        check_range("stop wait", self.stop_wait, 0.0)?;
        check_range("follow gap", self.follow_gap, 0.0)?;
        check_range("agent speed", self.agent_speed, 0.0)?;
        for (n, p) in [
            ("turn", self.turn_probability),
            ("stop", self.stop_probability),
            ("follow", self.follow_probability),
            ("oncoming", self.oncoming_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{n} probability {p} outside [0, 1]")));
            }
        }
        if !(self.accel > 0.0) {
            return Err(invalid("acceleration must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> collision::Dims {
        (self.vehicle_length, self.vehicle_width)
    }
}

/// Ego speed over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpeedProfile {
    Cruise { speed: f64 },
    /// Brake at `accel` to a standstill at `t_stop`, wait, then accelerate back.
    StopAndGo { speed: f64, accel: f64, t_stop: f64, wait: f64 },
    /// Brake at `accel` from `t_brake` until down to the lead's `target` speed.
    Follow { speed: f64, target: f64, accel: f64, t_brake: f64 },
}

impl SpeedProfile {
    pub fn speed(&self, t: f64) -> f64 {
        match *self {
            SpeedProfile::Cruise { speed } => speed,
            SpeedProfile::StopAndGo { speed, accel, t_stop, wait } => {
                let brake = speed / accel;
                if t < t_stop - brake {
                    speed
                } else if t < t_stop {
                    accel * (t_stop - t)
                } else if t < t_stop + wait {
                    0.0
                } else {
                    (accel * (t - t_stop - wait)).min(speed)
                }
            }
            SpeedProfile::Follow { speed, target, accel, t_brake } => {
                if t < t_brake {
                    speed
                } else {
                    (speed - accel * (t - t_brake)).max(target)
                }
            }
        }
    }

    /// Distance covered in `[t0, t1]`, `t0 <= t1`.
    /// Time by which the speed is settled for good, if it ever changes.
    fn settled(&self) -> f64 {
        match *self {
            SpeedProfile::Cruise { .. } => 0.0,
            SpeedProfile::StopAndGo { speed, accel, t_stop, wait } => t_stop + wait + speed / accel,
            SpeedProfile::Follow { speed, target, accel, t_brake } => t_brake + (speed - target) / accel,
        }
    }

    pub fn distance(&self, t0: f64, t1: f64) -> f64 {
        let n = (((t1 - t0) * 1000.0).ceil() as usize).max(1);
        let h = (t1 - t0) / n as f64;
        (0..n).map(|i| self.speed(t0 + (i as f64 + 0.5) * h) * h).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub length: f64,
    pub width: f64,
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub hz: f64,
    pub road: Road,
    pub profile: SpeedProfile,
    /// Arc length of the painted stop line, for stop-and-go scenarios.
    pub stop_line: Option<f64>,
    pub ego: Vec<Pose>,
    pub speeds: Vec<f64>,
    pub ego_length: f64,
    pub ego_width: f64,
    pub agents: Vec<AgentLog>,
}

/// Everything visible at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub ego: Pose,
    pub speed: f64,
    pub agents: Vec<(Pose, f64, f64)>,
}

impl Scenario {
    pub fn ticks(&self) -> usize {
        self.ego.len()
    }

    pub fn state_at(&self, tick: usize) -> WorldState {
        WorldState {
            ego: self.ego[tick],
            speed: self.speeds[tick],
            agents: self.agents.iter().map(|a| (a.poses[tick], a.length, a.width)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Scenario = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        s.road = s.road.restore().map_err(|e| Error::format(path, e.to_string()))?;
        if s.speeds.len() != s.ego.len() || s.agents.iter().any(|a| a.poses.len() != s.ego.len()) {
            return Err(Error::format(path, "scenario logs differ in length"));
        }
        Ok(s)
    }

    /// Ego motion between two ticks, expressed in the frame at `from`.
    pub fn ego_action(&self, from: usize, to: usize) -> RelativeAction {
        (self.ego[from].transform().inverse() * self.ego[to].transform()).to_action()
    }
}

const START_S: f64 = 40.0;

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

fn gen_road(rng: &mut ChaCha8Rng, cfg: &WorldConfig, length: f64) -> Result<Road> {
    // the ego starts on a straight so the first frames are settled
    let mut segs = vec![Segment {
        length: START_S + uniform(rng, (5.0, 20.0)),
        curvature: 0.0,
    }];
    let mut total = segs[0].length;
    while total < length {
        let seg = if rng.gen_bool(cfg.turn_probability) {
            let radius = uniform(rng, (cfg.min_radius, cfg.max_radius));
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Segment {
                length: radius * uniform(rng, cfg.arc_angle),
                curvature: sign / radius,
            }
        } else {
            Segment {
                length: uniform(rng, cfg.straight_length),
                curvature: 0.0,
            }
        };
        if seg.length > 0.0 {
            total += seg.length;
            segs.push(seg);
        }
    }
    Road::from_segments(&segs, cfg.half_width, 0.25)
}

fn gen_profile(rng: &mut ChaCha8Rng, cfg: &WorldConfig, duration: f64) -> SpeedProfile {
    let speed = uniform(rng, cfg.speed);
    if rng.gen_bool(cfg.stop_probability) {
        let wait = uniform(rng, cfg.stop_wait);
        // the braking, standstill or pull-away falls inside the log
        let t_stop = uniform(rng, (-wait - 0.5 * speed / cfg.accel, duration));
        SpeedProfile::StopAndGo {
            speed,
            accel: cfg.accel,
            t_stop,
            wait,
        }
    } else {
        if rng.gen_bool(cfg.follow_probability) && speed - 2.0 > 0.2 * speed {
            let target = uniform(rng, (0.2 * speed, speed - 2.0));
            let brake = (speed - target) / cfg.accel;
            SpeedProfile::Follow {
                speed,
                target,
                accel: cfg.accel,
                t_brake: uniform(rng, (-0.5 * brake, duration)),
            }
        } else {
            SpeedProfile::Cruise { speed }
        }
    }
}

/// Ego-lane lead for a following profile: constant speed, settling at a gap
/// drawn from `follow_gap`. Widens the gap until the log is conflict-free.
fn lead_log(rng: &mut ChaCha8Rng, road: &Road, ego: &[Pose], profile: &SpeedProfile, cfg: &WorldConfig) -> Option<AgentLog> {
    let SpeedProfile::Follow { target, .. } = *profile else {
        return None;
    };
    let gap = uniform(rng, cfg.follow_gap);
    // ego arc length once settled, minus what the lead covers by then
    let t = profile.settled().max(0.0);
    let base = START_S + cfg.vehicle_length + profile.distance(0.0, t) - target * t;
    (0..6).find_map(|k| {
        let poses = agent_log(road, base + gap + 2.0 * k as f64, 0.0, target, false, cfg.sim_hz, ego.len());
        (!conflicts(ego, &poses, cfg)).then_some(AgentLog {
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
            poses,
        })
    })
}

/// Pure pursuit on a kinematic bicycle along the road centerline.
fn drive(road: &Road, profile: &SpeedProfile, cfg: &WorldConfig, ticks: usize) -> (Vec<Pose>, Vec<f64>) {
    let start = road.point_at(START_S);
    let mut pose = start;
    let mut s_hint = START_S;
    let dt = 1.0 / (cfg.sim_hz * cfg.substeps as f64);
    let mut poses = Vec::with_capacity(ticks);
    let mut speeds = Vec::with_capacity(ticks);
    for tick in 0..ticks {
        let t0 = tick as f64 / cfg.sim_hz;
        poses.push(pose);
        speeds.push(profile.speed(t0));
        for k in 0..cfg.substeps {
            let t = t0 + (k as f64 + 0.5) * dt;
            let v = profile.speed(t);
            if v == 0.0 {
                continue;
            }
            let proj = road.project_around(pose.x, pose.y, s_hint, 20.0);
            s_hint = proj.s;
            let ld = cfg.lookahead_min.max(cfg.lookahead_time * v);
            let target = road.point_at(proj.s + ld);
            let (dx, dy) = (target.x - pose.x, target.y - pose.y);
            let alpha = dy.atan2(dx) - pose.theta;
            let dist = dx.hypot(dy);
            let steer = (2.0 * cfg.wheelbase * alpha.sin() / dist).atan();
            let (sin, cos) = pose.theta.sin_cos();
            pose = Pose::new(
                pose.x + v * cos * dt,
                pose.y + v * sin * dt,
                pose.theta + v * steer.tan() / cfg.wheelbase * dt,
            );
        }
    }
    (poses, speeds)
}

fn agent_log(road: &Road, s0: f64, lateral: f64, speed: f64, oncoming: bool, hz: f64, ticks: usize) -> Vec<Pose> {
    let dir = if oncoming { -1.0 } else { 1.0 };
    (0..ticks)
        .map(|i| {
            let s = s0 + dir * speed * i as f64 / hz;
            let p = road.offset_pose(s, lateral);
            let theta = if oncoming { p.theta + std::f64::consts::PI } else { p.theta };
            Pose::new(p.x, p.y, crate::geometry::wrap_angle(theta))
        })
        .collect()
}

fn conflicts(a: &[Pose], b: &[Pose], cfg: &WorldConfig) -> bool {
    let d = cfg.dims();
    first_overlap(a, d, b, d, cfg.agent_margin).is_some()
        || first_ttc_violation(a, d, b, d, cfg.sim_hz, cfg.agent_ttc_horizon, cfg.agent_margin).is_some()
}

/// Generates a scenario with `ticks` logged poses.
pub fn gen_scenario(seed: u64, cfg: &WorldConfig, ticks: usize) -> Result<Scenario> {
    cfg.validate()?;
    if ticks < 2 {
        return Err(invalid("a scenario needs at least two ticks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = (ticks - 1) as f64 / cfg.sim_hz;
    let profile = gen_profile(&mut rng, cfg, duration);
    let travel = cfg.speed.1 * duration;
    let road = gen_road(&mut rng, cfg, START_S + travel + 120.0)?;
    let (ego, speeds) = drive(&road, &profile, cfg, ticks);

    let stop_line = match profile {
        SpeedProfile::StopAndGo { t_stop, .. } => {
            let ahead = if t_stop >= 0.0 {
                profile.distance(0.0, t_stop)
            } else {
                -profile.distance(t_stop, 0.0)
            };
            Some(START_S + ahead + cfg.vehicle_length / 2.0 + 1.0)
        }
        SpeedProfile::Cruise { .. } | SpeedProfile::Follow { .. } => None,
    };

    let mut agents: Vec<AgentLog> = lead_log(&mut rng, &road, &ego, &profile, cfg).into_iter().collect();
    let n_agents = rng.gen_range(0..=cfg.max_agents).max(agents.len());
    for _ in 0..n_agents * 5 {
        if agents.len() >= n_agents {
            break;
        }
        let oncoming = rng.gen_bool(cfg.oncoming_probability);
        let lateral = if oncoming || rng.gen_bool(0.5) {
            cfg.lane_offset
        } else {
            -cfg.lane_offset
        };
        let s0 = START_S + uniform(&mut rng, (-20.0, 60.0));
        let speed = uniform(&mut rng, cfg.agent_speed);
        let poses = agent_log(&road, s0, lateral, speed, oncoming, cfg.sim_hz, ticks);
        if conflicts(&ego, &poses, cfg) || agents.iter().any(|a| conflicts(&a.poses, &poses, cfg)) {
            continue;
        }
        agents.push(AgentLog {
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
            poses,
        });
    }
    Ok(Scenario {
        seed,
        hz: cfg.sim_hz,
        road,
        profile,
        stop_line,
        ego,
        speeds,
        ego_length: cfg.vehicle_length,
        ego_width: cfg.vehicle_width,
        agents,
    })
}

/// Per-sequence seed derived from a dataset seed and an index.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generated clip: frames sampled from a scenario at the clip rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub scenario: Scenario,
    /// Simulator ticks between consecutive frames.
    pub stride: usize,
    pub images: Vec<Image>,
    pub actions: Vec<RelativeAction>,
    /// Ego poses at the frame ticks plus one past the last frame.
    pub poses: Vec<Transform2>,
}

pub fn frame_stride(cfg: &WorldConfig, hz: f64) -> Result<usize> {
    let ratio = cfg.sim_hz / hz;
    let stride = ratio.round();
    if !(hz > 0.0) || stride < 1.0 || (ratio - stride).abs() > 1e-9 {
        return Err(invalid(format!(
            "clip rate {hz} Hz must divide the simulator rate {} Hz",
            cfg.sim_hz
        )));
    }
    Ok(stride as usize)
}

pub fn make_clip(seed: u64, frames: usize, hz: f64, cfg: &WorldConfig) -> Result<Clip> {
    if frames == 0 {
        return Err(invalid("clip needs at least one frame"));
    }
    let stride = frame_stride(cfg, hz)?;
    let scenario = gen_scenario(seed, cfg, frames * stride + 1)?;
    clip_from_scenario(scenario, frames, stride, cfg)
}

/// Re-renders the clip of a stored scenario.
pub fn clip_from_scenario(scenario: Scenario, frames: usize, stride: usize, cfg: &WorldConfig) -> Result<Clip> {
    if frames == 0 || stride == 0 || frames * stride + 1 > scenario.ticks() {
        return Err(invalid(format!(
            "{frames} frames at stride {stride} do not fit a scenario of {} ticks",
            scenario.ticks()
        )));
    }
    let poses: Vec<Transform2> = (0..=frames).map(|k| scenario.ego[k * stride].transform()).collect();
    let actions = relativize(&poses)?;
    let images = (0..frames)
        .map(|k| render(&scenario.state_at(k * stride), &scenario, cfg))
        .collect();
    Ok(Clip {
        scenario,
        stride,
        images,
        actions,
        poses,
    })
}

/// `n_seq` clips of `frames` frames at `hz`, each from its own derived seed.
pub fn build_dataset(n_seq: usize, frames: usize, hz: f64, cfg: &WorldConfig, seed: u64) -> Result<Vec<Clip>> {
    if n_seq == 0 {
        return Err(invalid("dataset needs at least one sequence"));
    }
    (0..n_seq)
        .into_par_iter()
        .map(|i| make_clip(sequence_seed(seed, i as u64), frames, hz, cfg))
        .collect()
}

/// Writes raw records, scenario files and the manifest into `dir`.
pub fn write_dataset(dir: &Path, clips: &[Clip], hz: f64, cfg: &WorldConfig) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = clips.first().map(|c| c.images.len()).unwrap_or(0);
    let mut sequences = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("seq_{i:05}");
        let raw = format!("{name}.raw");
        write_raw(
            &dir.join(&raw),
            &RawRecord {
                images: clip.images.clone(),
                actions: clip.actions.clone(),
            },
        )?;
        clip.scenario.save(&dir.join(format!("{name}.scenario.json")))?;
        sequences.push(SequenceEntry {
            name,
            seed: clip.scenario.seed,
            raw,
            tokens: None,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA.to_string(),
        image_vocab: None,
        action_bins: None,
        patch: None,
        height: cfg.image_size as u32,
        width: cfg.image_size as u32,
        frames_per_seq: frames as u32,
        frame_rate_hz: hz,
        total_frames: (frames * clips.len()) as u64,
        codec: None,
        codebook: None,
        sequences,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::integrate;

    fn straight() -> WorldConfig {
        WorldConfig {
            turn_probability: 0.0,
            stop_probability: 0.0,
            follow_probability: 0.0,
            max_agents: 0,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let cfg = WorldConfig::default();
        assert_eq!(gen_scenario(9, &cfg, 61).unwrap(), gen_scenario(9, &cfg, 61).unwrap());
        assert_ne!(gen_scenario(9, &cfg, 61).unwrap(), gen_scenario(10, &cfg, 61).unwrap());
    }

    #[test]
    fn straight_cruise_moves_v_over_hz() {
        let cfg = straight();
        for seed in 0..5 {
            let clip = make_clip(seed, 16, 10.0, &cfg).unwrap();
            let SpeedProfile::Cruise { speed } = clip.scenario.profile else {
                panic!("expected cruise")
            };
            for a in &clip.actions {
                assert!((a.dx - speed / 10.0).abs() < 1e-9, "{a:?}");
                assert!(a.dy.abs() < 1e-9 && a.dtheta.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stop_gives_zero_actions() {
        let cfg = WorldConfig {
            stop_probability: 1.0,
            ..straight()
        };
        let mut seen = 0;
        for seed in 0..20 {
            let s = gen_scenario(seed, &cfg, 61).unwrap();
            for i in 0..60 {
                if s.speeds[i] == 0.0 && s.speeds[i + 1] == 0.0 {
                    let a = s.ego_action(i, i + 1);
                    assert_eq!(a, RelativeAction::new(0.0, 0.0, 0.0));
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn follower_settles_behind_its_lead() {
        let cfg = WorldConfig {
            follow_probability: 1.0,
            ..straight()
        };
        for seed in 0..20 {
            let s = gen_scenario(seed, &cfg, 101).unwrap();
            let SpeedProfile::Follow { target, .. } = s.profile else {
                panic!("expected following")
            };
            let lead = &s.agents[0].poses;
            let last = s.ticks() - 1;
            if s.profile.settled() < 9.0 {
                let gap = lead[last].x - s.ego[last].x - cfg.vehicle_length;
                assert!(gap >= cfg.follow_gap.0 - 0.1 && gap <= cfg.follow_gap.1 + 10.1, "seed {seed} gap {gap}");
                assert!((s.speeds[last] - target).abs() < 1e-9);
            }
            assert!(lead.iter().all(|p| p.y.abs() < 1e-9));
            // holding the initial speed runs into the lead
            let v0 = s.speeds[0];
            let held: Vec<Pose> = (0..=last).map(|i| Pose::new(s.ego[0].x + v0 * i as f64 / 10.0, 0.0, 0.0)).collect();
            if (0.0..6.0).contains(&s.profile.settled()) {
                assert!(first_overlap(&held, cfg.dims(), lead, cfg.dims(), 0.0).is_some(), "seed {seed}");
            }
        }
    }

    #[test]
    fn actions_reintegrate_to_log() {
        let cfg = WorldConfig::default();
        for seed in 0..10 {
            let clip = make_clip(seed, 12, 2.0, &cfg).unwrap();
            let traj = integrate(&clip.actions).unwrap();
            let base = clip.poses[0];
            for (p, want) in traj.poses.iter().zip(&clip.poses[1..]) {
                let got = base * *p;
                assert!((got.x() - want.x()).abs() < 1e-9 && (got.y() - want.y()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ego_stays_near_centerline_and_agents_clear() {
        let cfg = WorldConfig::default();
        for seed in 0..30 {
            let s = gen_scenario(seed, &cfg, 61).unwrap();
            for p in &s.ego {
                assert!(s.road.project(p.x, p.y).distance < 0.6, "seed {seed}");
            }
            for a in &s.agents {
                assert!(first_overlap(&s.ego, cfg.dims(), &a.poses, cfg.dims(), 0.0).is_none());
            }
        }
    }

    #[test]
    fn turns_make_nondegenerate_actions() {
        let cfg = WorldConfig::default();
        let clips = build_dataset(16, 12, 2.0, &cfg, 3).unwrap();
        let thetas: Vec<f64> = clips.iter().flat_map(|c| c.actions.iter().map(|a| a.dtheta)).collect();
        let spread = thetas.iter().cloned().fold(f64::MIN, f64::max) - thetas.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.05);
    }

    #[test]
    fn tight_radius_rejected() {
        let cfg = WorldConfig {
            min_radius: 3.0,
            ..Default::default()
        };
        assert!(gen_scenario(0, &cfg, 10).is_err());
        assert!(frame_stride(&cfg, 3.0).is_err());
    }

    #[test]
    fn dataset_written_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig::default();
        let clips = build_dataset(3, 4, 10.0, &cfg, 1).unwrap();
        let m = write_dataset(dir.path(), &clips, 10.0, &cfg).unwrap();
        assert_eq!(m.total_frames, 12);
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        let s = Scenario::load(&dir.path().join("seq_00001.scenario.json")).unwrap();
        assert_eq!(s.ego, clips[1].scenario.ego);
        assert_eq!(s.road.project(1.0, 2.0), clips[1].scenario.road.project(1.0, 2.0));
    }
}
