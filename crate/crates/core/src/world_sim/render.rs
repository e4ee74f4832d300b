use super::collision::OrientedBox;
use super::{Scenario, WorldConfig, WorldState};
use crate::obs_tokenizer::Image;

/// Ego-centric top-down raster. Pixel centres are classified as agent, stop
/// line, road or off-road; the ego sits at the anchor pixel facing up.
pub fn render(state: &WorldState, scenario: &Scenario, cfg: &WorldConfig) -> Image {
    let n = cfg.image_size;
    let m = cfg.meters_per_pixel;
    let mut img = Image::new(n, n);
    let corner = |r: f64, c: f64| ((cfg.anchor_row as f64 - r) * m).hypot((cfg.anchor_col as f64 - c) * m);
    let reach = [(0.0, 0.0), (0.0, n as f64), (n as f64, 0.0), (n as f64, n as f64)]
        .iter()
        .map(|&(r, c)| corner(r, c))
        .fold(0.0, f64::max);
    let road = &scenario.road;
    let window = road.window(state.ego.x, state.ego.y, reach + road.half_width + 1.0);
    let boxes: Vec<OrientedBox> = state
        .agents
        .iter()
        .map(|&(p, l, w)| OrientedBox::new(p, l, w))
        .collect();
    for r in 0..n {
        for c in 0..n {
            let forward = (cfg.anchor_row as f64 - r as f64) * m;
            let left = (cfg.anchor_col as f64 - c as f64) * m;
            let (x, y) = state.ego.to_map(forward, left);
            let shade = if boxes.iter().any(|b| b.contains(x, y)) {
                cfg.agent_shade
            } else {
                match window.map(|w| road.project_in(x, y, w)) {
                    Some(p) if p.distance <= road.half_width => match scenario.stop_line {
                        Some(s) if p.s >= s && p.s < s + m => cfg.stop_line_shade,
                        _ => cfg.road_shade,
                    },
                    _ => cfg.offroad_shade,
                }
            };
            img.set_pixel(r, c, shade);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::road::{Pose, Road, Segment};
    use super::super::{AgentLog, SpeedProfile};
    use super::*;
    use std::collections::HashSet;

    fn scene(agents: Vec<AgentLog>) -> Scenario {
        let road = Road::from_segments(&[Segment { length: 200.0, curvature: 0.0 }], 5.25, 0.5).unwrap();
        Scenario {
            seed: 0,
            hz: 10.0,
            road,
            profile: SpeedProfile::Cruise { speed: 5.0 },
            stop_line: None,
            ego: vec![Pose::new(50.0, 0.0, 0.0)],
            speeds: vec![5.0],
            ego_length: 4.5,
            ego_width: 2.0,
            agents,
        }
    }

    fn shades(img: &Image) -> HashSet<[u32; 3]> {
        (0..img.height)
            .flat_map(|r| (0..img.width).map(move |c| (r, c)))
            .map(|(r, c)| img.pixel(r, c).map(f32::to_bits))
            .collect()
    }

    #[test]
    fn empty_road_has_two_shades() {
        let cfg = WorldConfig::default();
        let s = scene(vec![]);
        let img = render(&s.state_at(0), &s, &cfg);
        assert_eq!(shades(&img).len(), 2);
        assert_eq!(img, render(&s.state_at(0), &s, &cfg));
        // road spans lateral |y| <= 5.25 m, i.e. columns 12..=20 at 1.25 m/px
        for c in 0..32 {
            let lat = (16.0 - c as f64) * 1.25;
            let want = if lat.abs() <= 5.25 { cfg.road_shade } else { cfg.offroad_shade };
            assert_eq!(img.pixel(5, c), want, "col {c}");
        }
    }

    #[test]
    fn agent_ahead_fills_expected_rows() {
        let cfg = WorldConfig::default();
        // 4.5 m box centred 12.5 m ahead: forward extent [10.25, 14.75]
        let agent = AgentLog {
            length: 4.5,
            width: 2.0,
            poses: vec![Pose::new(62.5, 0.0, 0.0)],
        };
        let s = scene(vec![agent]);
        let img = render(&s.state_at(0), &s, &cfg);
        let rows: Vec<usize> = (0..32).filter(|&r| img.pixel(r, 16) == cfg.agent_shade).collect();
        // forward of row r is (24 - r) * 1.25; inside for r in 13..=15
        assert_eq!(rows, vec![13, 14, 15]);
        let cols: Vec<usize> = (0..32).filter(|&c| img.pixel(14, c) == cfg.agent_shade).collect();
        assert_eq!(cols, vec![16]);
    }
}
