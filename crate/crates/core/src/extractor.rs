//! Mid-block crossing candidates from ego-vehicle scene logs.
//!
//! Seven predicates are applied to every pedestrian track, in order:
//! seen in front, seen on both sides, moving, crossing angle, ego roughly
//! straight, close enough, and paths intersecting (with slack and a
//! constant-velocity projection of the ego).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::par;
use crate::schema::{wrap_degrees, EgoPose, Frame, SceneLog, TrackedObject};

pub const N_CRITERIA: usize = 7;
pub const CRITERION_NAMES: [&str; N_CRITERIA] = [
    "front",
    "both_sides",
    "moving",
    "angle",
    "straight_ego",
    "distance",
    "intersecting",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriteriaConfig {
    pub angle_lo_deg: f64,
    pub angle_hi_deg: f64,
    pub heading_change_limit_deg: f64,
    pub max_distance_m: f64,
    pub slack_radius_m: f64,
    pub projection_s: f64,
    pub min_displacement_m: f64,
    pub min_mean_speed: f64,
    /// Object classes treated as pedestrians.
    pub classes: Vec<String>,
    pub enabled: [bool; N_CRITERIA],
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        Self {
            angle_lo_deg: 45.0,
            angle_hi_deg: 135.0,
            heading_change_limit_deg: 60.0,
            max_distance_m: 50.0,
            slack_radius_m: 3.0,
            projection_s: 5.0,
            min_displacement_m: 1.0,
            min_mean_speed: 0.3,
            classes: vec!["pedestrian".into()],
            enabled: [true; N_CRITERIA],
        }
    }
}

impl CriteriaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.angle_lo_deg && self.angle_lo_deg < self.angle_hi_deg && self.angle_hi_deg <= 180.0) {
            return Err(CoreError::Config("angle window must satisfy 0 < lo < hi <= 180".into()));
        }
        let limits = [
            self.heading_change_limit_deg,
            self.max_distance_m,
            self.slack_radius_m,
            self.projection_s,
            self.min_displacement_m,
            self.min_mean_speed,
        ];
        if limits.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CoreError::Config("criteria limits must be positive".into()));
        }
        Ok(())
    }
}

/// One observation of a track with the ego pose of the same frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub ego: EgoPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub points: Vec<TrackPoint>,
}

/// Group a scene's pedestrian observations by track, in first-seen order.
pub fn pedestrian_tracks(scene: &SceneLog, classes: &[String]) -> Vec<Track> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<TrackPoint>> = BTreeMap::new();
    for (i, f) in scene.frames.iter().enumerate() {
        for o in f.tracked.iter().filter(|o| classes.iter().any(|c| c == &o.class)) {
            let entry = by_id.entry(o.track_id.clone()).or_insert_with(|| {
                order.push(o.track_id.clone());
                Vec::new()
            });
            entry.push(TrackPoint {
                frame: i,
                t: f.t,
                x: o.x,
                y: o.y,
                ego: f.ego_pose,
            });
        }
    }
    order
        .into_iter()
        .map(|id| {
            let points = by_id.remove(&id).unwrap_or_default();
            Track { id, points }
        })
        .collect()
}

fn heading_vec(e: &EgoPose) -> (f64, f64) {
    let h = e.heading.to_radians();
    (h.cos(), h.sin())
}

/// `(forward, left)` offset of `(x, y)` in the ego frame.
pub fn ego_relative(e: &EgoPose, x: f64, y: f64) -> (f64, f64) {
    let (c, s) = heading_vec(e);
    let (dx, dy) = (x - e.x, y - e.y);
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Ahead of the ego (closed half-plane) in at least one frame.
pub fn criterion_1_front(track: &Track) -> bool {
    track.points.iter().any(|p| ego_relative(&p.ego, p.x, p.y).0 >= 0.0)
}

/// Strictly left of the ego axis in some frame and strictly right in another.
pub fn criterion_2_both_sides(track: &Track) -> bool {
    let sides = track.points.iter().map(|p| ego_relative(&p.ego, p.x, p.y).1);
    let (mut left, mut right) = (false, false);
    for s in sides {
        left |= s > 0.0;
        right |= s < 0.0;
    }
    left && right
}

fn displacement(track: &Track) -> Option<(f64, f64)> {
    let (a, b) = (track.points.first()?, track.points.last()?);
    Some((b.x - a.x, b.y - a.y))
}

/// Net displacement and mean path speed above their thresholds.
pub fn criterion_3_moving(track: &Track, cfg: &CriteriaConfig) -> bool {
    let pts = &track.points;
    if pts.len() < 2 {
        return false;
    }
    let (dx, dy) = displacement(track).unwrap_or_default();
    let path: f64 = pts.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
    let dt = pts[pts.len() - 1].t - pts[0].t;
    dx.hypot(dy) >= cfg.min_displacement_m && dt > 0.0 && path / dt >= cfg.min_mean_speed
}

/// Unsigned angle in degrees between two vectors.
pub fn angle_between(a: (f64, f64), b: (f64, f64)) -> f64 {
    let cross = a.0 * b.1 - a.1 * b.0;
    let dot = a.0 * b.0 + a.1 * b.1;
    cross.abs().atan2(dot).to_degrees()
}

/// Pedestrian and ego net displacements meet at an angle inside the window.
/// A stationary ego contributes its heading instead.
pub fn criterion_4_angle(track: &Track, cfg: &CriteriaConfig) -> bool {
    let (Some(ped), Some(a), Some(b)) = (displacement(track), track.points.first(), track.points.last()) else {
        return false;
    };
    if ped.0.hypot(ped.1) == 0.0 {
        return false;
    }
    let mut ego = (b.ego.x - a.ego.x, b.ego.y - a.ego.y);
    if ego.0.hypot(ego.1) < 1e-6 {
        ego = heading_vec(&a.ego);
    }
    let ang = angle_between(ped, ego);
    (cfg.angle_lo_deg..=cfg.angle_hi_deg).contains(&ang)
}

/// Largest absolute heading deviation from the first frame, following the
/// heading through wrap-around.
pub fn max_heading_change(poses: &[EgoPose]) -> f64 {
    let mut cum = 0.0f64;
    let mut worst = 0.0f64;
    for w in poses.windows(2) {
        cum += wrap_degrees(w[1].heading - w[0].heading);
        worst = worst.max(cum.abs());
    }
    worst
}

/// Ego heading never strays from its initial value by the limit or more.
pub fn criterion_5_straight_ego(scene: &SceneLog, cfg: &CriteriaConfig) -> bool {
    let poses: Vec<EgoPose> = scene.frames.iter().map(|f| f.ego_pose).collect();
    max_heading_change(&poses) < cfg.heading_change_limit_deg
}

/// Closest approach strictly below the distance limit.
pub fn criterion_6_distance(track: &Track, cfg: &CriteriaConfig) -> bool {
    track
        .points
        .iter()
        .map(|p| (p.x - p.ego.x).hypot(p.y - p.ego.y))
        .fold(f64::INFINITY, f64::min)
        < cfg.max_distance_m
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - u * vx).hypot(p.1 - a.1 - u * vy)
}

/// Observed ego positions followed by a constant-velocity projection from
/// the last two frames.
pub fn ego_path(scene: &SceneLog, projection_s: f64) -> Vec<(f64, f64)> {
    let mut path: Vec<(f64, f64)> = scene.frames.iter().map(|f| (f.ego_pose.x, f.ego_pose.y)).collect();
    if let [.., a, b] = scene.frames.as_slice() {
        let dt = b.t - a.t;
        if dt > 0.0 {
            let vx = (b.ego_pose.x - a.ego_pose.x) / dt;
            let vy = (b.ego_pose.y - a.ego_pose.y) / dt;
            path.push((b.ego_pose.x + vx * projection_s, b.ego_pose.y + vy * projection_s));
        }
    }
    path
}

/// Some pedestrian position lies within the slack radius of the ego path.
pub fn criterion_7_intersecting(track: &Track, scene: &SceneLog, cfg: &CriteriaConfig) -> bool {
    let path = ego_path(scene, cfg.projection_s);
    let near = |p: (f64, f64)| match path.as_slice() {
        [] => false,
        [only] => (p.0 - only.0).hypot(p.1 - only.1) <= cfg.slack_radius_m,
        segs => segs
            .windows(2)
            .any(|w| point_segment_distance(p, w[0], w[1]) <= cfg.slack_radius_m),
    };
    track.points.iter().any(|p| near((p.x, p.y)))
}

/// All seven predicates for one track.
pub fn evaluate_track(track: &Track, scene: &SceneLog, cfg: &CriteriaConfig) -> [bool; N_CRITERIA] {
    [
        criterion_1_front(track),
        criterion_2_both_sides(track),
        criterion_3_moving(track, cfg),
        criterion_4_angle(track, cfg),
        criterion_5_straight_ego(scene, cfg),
        criterion_6_distance(track, cfg),
        criterion_7_intersecting(track, scene, cfg),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePoint {
    pub t: f64,
    pub forward: f64,
    pub left: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvent {
    pub scene_id: String,
    pub track_id: String,
    pub first_frame: usize,
    pub last_frame: usize,
    pub flags: [bool; N_CRITERIA],
    pub global: Vec<TrackedObject>,
    pub times: Vec<f64>,
    pub ego_relative: Vec<RelativePoint>,
}

/// Tracks entering the funnel and surviving each criterion in turn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub tracks: usize,
    pub after: [usize; N_CRITERIA],
}

impl FunnelReport {
    pub fn merge(mut self, other: &FunnelReport) -> Self {
        self.tracks += other.tracks;
        for (a, b) in self.after.iter_mut().zip(other.after) {
            *a += b;
        }
        self
    }

    pub fn counts(&self) -> Vec<usize> {
        std::iter::once(self.tracks).chain(self.after).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.counts().windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,criterion,remaining\n0,tracks,");
        s.push_str(&format!("{}\n", self.tracks));
        for (i, n) in self.after.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", i + 1, CRITERION_NAMES[i], n));
        }
        s
    }
}

/// Candidate events of one scene plus its funnel.
pub fn extract(scene: &SceneLog, cfg: &CriteriaConfig) -> Result<(Vec<CandidateEvent>, FunnelReport)> {
    scene.validate()?;
    cfg.validate()?;
    let tracks = pedestrian_tracks(scene, &cfg.classes);
    let mut funnel = FunnelReport {
        tracks: tracks.len(),
        ..FunnelReport::default()
    };
    let mut events = Vec::new();
    for track in &tracks {
        let flags = evaluate_track(track, scene, cfg);
        let mut alive = true;
        for (k, ok) in flags.iter().enumerate() {
            alive &= *ok || !cfg.enabled[k];
            if alive {
                funnel.after[k] += 1;
            }
        }
        if alive {
            events.push(event(scene, track, flags));
        }
    }
    Ok((events, funnel))
}

fn event(scene: &SceneLog, track: &Track, flags: [bool; N_CRITERIA]) -> CandidateEvent {
    let pts = &track.points;
    CandidateEvent {
        scene_id: scene.id.clone(),
        track_id: track.id.clone(),
        first_frame: pts.first().map_or(0, |p| p.frame),
        last_frame: pts.last().map_or(0, |p| p.frame),
        flags,
        global: pts
            .iter()
            .map(|p| TrackedObject {
                track_id: track.id.clone(),
                class: "pedestrian".into(),
                x: p.x,
                y: p.y,
            })
            .collect(),
        times: pts.iter().map(|p| p.t).collect(),
        ego_relative: pts
            .iter()
            .map(|p| {
                let (forward, left) = ego_relative(&p.ego, p.x, p.y);
                RelativePoint { t: p.t, forward, left }
            })
            .collect(),
    }
}

/// Extract from many scenes in parallel; events keep scene order.
pub fn extract_all(scenes: &[SceneLog], cfg: &CriteriaConfig, jobs: usize) -> Result<(Vec<CandidateEvent>, FunnelReport)> {
    let per = par::try_map_indexed(scenes.len(), jobs, |i| extract(&scenes[i], cfg))?;
    let mut events = Vec::new();
    let mut funnel = FunnelReport::default();
    for (e, f) in per {
        events.extend(e);
        funnel = funnel.merge(&f);
    }
    Ok((events, funnel))
}

/// Hand-constructed scene with its expected crossing track, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene: SceneLog,
    pub crossing_track: Option<String>,
    pub note: &'static str,
}

/// Scene builder: ego and object positions as functions of time, sampled
/// at 10 Hz and rotated by `theta` degrees about the origin.
struct SceneSpec<'a> {
    id: String,
    seconds: f64,
    theta: f64,
    ego: &'a dyn Fn(f64) -> (f64, f64, f64),
    objects: Vec<(&'a str, &'a str, &'a dyn Fn(f64) -> Option<(f64, f64)>)>,
}

fn build(spec: SceneSpec<'_>) -> SceneLog {
    let (c, s) = (spec.theta.to_radians().cos(), spec.theta.to_radians().sin());
    let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    let n = (spec.seconds * 10.0).round() as usize;
    let frames = (0..=n)
        .map(|k| {
            let t = k as f64 / 10.0;
            let (ex, ey, eh) = (spec.ego)(t);
            let (ex, ey) = rot(ex, ey);
            let tracked = spec
                .objects
                .iter()
                .filter_map(|(id, class, f)| {
                    let (x, y) = f(t)?;
                    let (x, y) = rot(x, y);
                    Some(TrackedObject {
                        track_id: id.to_string(),
                        class: class.to_string(),
                        x,
                        y,
                    })
                })
                .collect();
            Frame {
                t,
                ego_pose: EgoPose {
                    x: ex,
                    y: ey,
                    heading: wrap_degrees(eh + spec.theta),
                },
                tracked,
            }
        })
        .collect();
    SceneLog {
        id: spec.id,
        frame_rate_hz: 10.0,
        frames,
    }
}

/// Forty scenes: twenty with exactly one mid-block crossing (some with
/// distractor tracks) and twenty without any.
pub fn labeled_suite() -> Vec<LabeledScene> {
    let mut out = Vec::new();
    for i in 0..20 {
        let f = i as f64;
        let speed = 3.0 + 0.2 * f;
        let ahead = 20.0 + f;
        let walk = 1.1 + 0.03 * f;
        let cross_angle = (60.0 + 3.0 * f).to_radians();
        let dir = if i % 2 == 0 { 1.0 } else { -1.0 };
        let ego = move |t: f64| (speed * t, 0.0, 0.0);
        let ped = move |t: f64| {
            let d = walk * t - 4.0;
            Some((ahead + d * cross_angle.cos(), dir * d * cross_angle.sin()))
        };
        let sidewalk = move |t: f64| Some((10.0 + 1.2 * t, 6.0));
        let car = move |t: f64| Some((ahead + 5.0, -4.0 + 2.0 * t));
        let mut objects: Vec<(&str, &str, &dyn Fn(f64) -> Option<(f64, f64)>)> = vec![("ped", "pedestrian", &ped)];
        if i % 3 == 0 {
            objects.push(("walker", "pedestrian", &sidewalk));
        }
        if i % 4 == 1 {
            objects.push(("car", "vehicle", &car));
        }
        out.push(LabeledScene {
            scene: build(SceneSpec {
                id: format!("pos-{i:02}"),
                seconds: 8.0 / walk,
                theta: 18.0 * f - 170.0,
                ego: &ego,
                objects,
            }),
            crossing_track: Some("ped".into()),
            note: "mid-block crossing ahead of the ego",
        });
    }

    for i in 0..20 {
        let f = i as f64;
        let theta = 17.0 * f - 160.0;
        let speed = 4.0;
        let straight = move |t: f64| (speed * t, 0.0, 0.0);
        // a quarter turn of radius 15 m over the scene
        let turning = move |t: f64| {
            let a = (t / 6.0).min(1.0) * PI / 2.0;
            (15.0 * a.sin(), 15.0 * (1.0 - a.cos()), a.to_degrees())
        };
        let slow = move |t: f64| (0.8 * t, 0.0, 0.0);
        let (note, ego, ped): (&'static str, &dyn Fn(f64) -> (f64, f64, f64), Box<dyn Fn(f64) -> Option<(f64, f64)>>) =
            match i % 7 {
                0 => ("crossing behind the ego", &straight, Box::new(move |t| Some((-15.0, 1.3 * t - 4.0)))),
                1 => ("stays on the left", &straight, Box::new(move |t| Some((20.0 + 0.1 * f, 3.0 + 0.8 * t)))),
                2 => ("standing at the kerb", &straight, Box::new(move |t| Some((25.0 + 0.02 * t, -4.0)))),
                3 => ("walking along the road", &straight, Box::new(move |t| Some((10.0 + 1.3 * t, 3.0 - 0.7 * t)))),
                4 => ("ego turning", &turning, Box::new(move |t| Some((12.0 + f * 0.1, 1.3 * t - 4.0)))),
                5 => ("crossing far away", &straight, Box::new(move |t| Some((80.0, 1.3 * t - 4.0)))),
                _ => ("crossing beyond the projected path", &slow, Box::new(move |t| Some((45.0, 1.3 * t - 4.0)))),
            };
        let ped_ref = ped.as_ref();
        let objects: Vec<(&str, &str, &dyn Fn(f64) -> Option<(f64, f64)>)> = vec![("ped", "pedestrian", ped_ref)];
        out.push(LabeledScene {
            scene: build(SceneSpec {
                id: format!("neg-{i:02}"),
                seconds: 6.5,
                theta,
                ego,
                objects,
            }),
            crossing_track: None,
            note,
        });
    }
    out
}

/// Precision and recall of `events` against the suite labels.
pub fn score_suite(suite: &[LabeledScene], events: &[CandidateEvent]) -> (f64, f64) {
    let truth: BTreeMap<(&str, &str), ()> = suite
        .iter()
        .filter_map(|s| s.crossing_track.as_deref().map(|t| ((s.scene.id.as_str(), t), ())))
        .collect();
    let tp = events
        .iter()
        .filter(|e| truth.contains_key(&(e.scene_id.as_str(), e.track_id.as_str())))
        .count() as f64;
    let precision = if events.is_empty() { 1.0 } else { tp / events.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { tp / truth.len() as f64 };
    (precision, recall)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(ego: impl Fn(f64) -> (f64, f64, f64), peds: Vec<(&str, Box<dyn Fn(f64) -> Option<(f64, f64)>>)>, secs: f64) -> SceneLog {
        let objects: Vec<(&str, &str, &dyn Fn(f64) -> Option<(f64, f64)>)> =
            peds.iter().map(|(id, f)| (*id, "pedestrian", f.as_ref())).collect();
        build(SceneSpec {
            id: "s".into(),
            seconds: secs,
            theta: 0.0,
            ego: &ego,
            objects,
        })
    }

    fn one(scene: &SceneLog) -> Track {
        pedestrian_tracks(scene, &["pedestrian".to_string()]).remove(0)
    }

    fn north(t: f64) -> (f64, f64, f64) {
        (0.0, 5.0 * t, 90.0)
    }

    #[test]
    fn front_half_plane_is_closed() {
        let behind = scene(north, vec![("p", Box::new(|_| Some((0.0, -10.0))))], 1.0);
        assert!(!criterion_1_front(&one(&behind)));
        let ahead = scene(north, vec![("p", Box::new(|t| Some((0.0, 20.0 + t))))], 1.0);
        assert!(criterion_1_front(&one(&ahead)));
        let abeam = scene(|_| (0.0, 0.0, 90.0), vec![("p", Box::new(|_| Some((4.0, 0.0))))], 0.0);
        assert!(criterion_1_front(&one(&abeam)));
    }

    #[test]
    fn both_sides() {
        let east = scene(north, vec![("p", Box::new(|t| Some((1.3 * t - 3.0, 25.0))))], 5.0);
        assert!(criterion_2_both_sides(&one(&east)));
        let left = scene(north, vec![("p", Box::new(|t| Some((-5.0 - t, 25.0))))], 5.0);
        assert!(!criterion_2_both_sides(&one(&left)));
        let single = scene(north, vec![("p", Box::new(|_| Some((-2.0, 25.0))))], 0.0);
        assert!(!criterion_2_both_sides(&one(&single)));
    }

    #[test]
    fn moving_thresholds() {
        let cfg = CriteriaConfig::default();
        let stand = scene(north, vec![("p", Box::new(|_| Some((3.0, 20.0))))], 5.0);
        assert!(!criterion_3_moving(&one(&stand), &cfg));
        let walk = scene(north, vec![("p", Box::new(|t| Some((1.3 * t, 20.0))))], 5.0);
        assert!(criterion_3_moving(&one(&walk), &cfg));
        let drift = scene(north, vec![("p", Box::new(|t| Some((0.1 * t, 20.0))))], 20.0);
        assert!(!criterion_3_moving(&one(&drift), &cfg));
    }

    #[test]
    fn crossing_angle() {
        let cfg = CriteriaConfig::default();
        let perp = scene(north, vec![("p", Box::new(|t| Some((1.3 * t, 20.0))))], 4.0);
        assert!(criterion_4_angle(&one(&perp), &cfg));
        let parallel = scene(north, vec![("p", Box::new(|t| Some((3.0, 20.0 + 1.3 * t))))], 4.0);
        assert!(!criterion_4_angle(&one(&parallel), &cfg));
        // 50 degrees off the ego's travel direction
        let a = 50f64.to_radians();
        let oblique = scene(north, vec![("p", Box::new(move |t| Some((t * (PI / 2.0 - a).cos(), 20.0 + t * (PI / 2.0 - a).sin()))))], 4.0);
        let ang = angle_between(displacement(&one(&oblique)).unwrap(), (0.0, 1.0));
        assert!((ang - 50.0).abs() < 1e-9);
        assert!(criterion_4_angle(&one(&oblique), &cfg));
    }

    #[test]
    fn ego_heading_change() {
        let cfg = CriteriaConfig::default();
        let straight = scene(north, vec![], 5.0);
        assert!(criterion_5_straight_ego(&straight, &cfg));
        let turn = scene(|t| (0.0, 0.0, 90.0 * t / 5.0), vec![], 5.0);
        assert!(!criterion_5_straight_ego(&turn, &cfg));
        let arc = scene(|t| (0.0, 0.0, 170.0 + 59.0 * t / 5.0), vec![], 5.0);
        assert!((max_heading_change(&arc.frames.iter().map(|f| f.ego_pose).collect::<Vec<_>>()) - 59.0).abs() < 1e-9);
        assert!(criterion_5_straight_ego(&arc, &cfg));
    }

    #[test]
    fn distance_is_strict() {
        let cfg = CriteriaConfig::default();
        let near = scene(|_| (0.0, 0.0, 0.0), vec![("p", Box::new(|_| Some((20.0, 0.0))))], 1.0);
        assert!(criterion_6_distance(&one(&near), &cfg));
        let far = scene(|_| (0.0, 0.0, 0.0), vec![("p", Box::new(|_| Some((80.0, 0.0))))], 1.0);
        assert!(!criterion_6_distance(&one(&far), &cfg));
        let edge = scene(|_| (0.0, 0.0, 0.0), vec![("p", Box::new(|_| Some((30.0, 40.0))))], 1.0);
        assert!(!criterion_6_distance(&one(&edge), &cfg));
    }

    #[test]
    fn path_intersection() {
        let cfg = CriteriaConfig::default();
        // pedestrian crosses x = 0 at y = 20 around t = 2.3; ego gets there at t = 4.
        let later = scene(north, vec![("p", Box::new(|t| Some((1.3 * t - 3.0, 20.0))))], 6.0);
        assert!(criterion_7_intersecting(&one(&later), &later, &cfg));
        // log ends with the ego at y = 10; projection at 5 m/s covers 25 m more.
        let projected = scene(north, vec![("p", Box::new(|t| Some((1.3 * t - 1.0, 30.0))))], 2.0);
        assert!(!criterion_7_intersecting(&one(&projected), &projected, &CriteriaConfig { projection_s: 1.0, ..cfg.clone() }));
        assert!(criterion_7_intersecting(&one(&projected), &projected, &cfg));
        let parallel = scene(north, vec![("p", Box::new(|t| Some((10.0, 1.3 * t))))], 6.0);
        assert!(!criterion_7_intersecting(&one(&parallel), &parallel, &cfg));
    }

    #[test]
    fn textbook_crossing_gives_one_event() {
        let s = scene(north, vec![("p", Box::new(|t| Some((1.3 * t - 4.0, 25.0))))], 6.0);
        let (events, funnel) = extract(&s, &CriteriaConfig::default()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(funnel.counts(), vec![1; 8]);
        assert_eq!(events[0].flags, [true; 7]);
        assert_eq!(events[0].ego_relative.len(), events[0].global.len());
    }

    #[test]
    fn walker_and_turning_ego_eliminated_in_order() {
        let turning = |t: f64| {
            let a = (t / 6.0).min(1.0) * PI / 2.0;
            (15.0 * a.sin(), 15.0 * (1.0 - a.cos()), a.to_degrees())
        };
        let s = scene(
            turning,
            vec![
                ("walker", Box::new(|t| Some((5.0 + 0.9 * t, -2.0 + 0.9 * t)))),
                ("crosser", Box::new(|t| Some((12.0, 1.3 * t - 4.0)))),
            ],
            6.0,
        );
        let cfg = CriteriaConfig::default();
        let (events, funnel) = extract(&s, &cfg).unwrap();
        assert!(events.is_empty());
        let tracks = pedestrian_tracks(&s, &cfg.classes);
        let walker = evaluate_track(&tracks[0], &s, &cfg);
        let crosser = evaluate_track(&tracks[1], &s, &cfg);
        assert_eq!(walker.iter().position(|f| !f), Some(3));
        assert_eq!(crosser.iter().position(|f| !f), Some(4));
        assert_eq!(funnel.counts()[4..], [1, 0, 0, 0]);
    }

    #[test]
    fn empty_scene() {
        let s = SceneLog {
            id: "e".into(),
            frame_rate_hz: 10.0,
            frames: vec![],
        };
        let (events, funnel) = extract(&s, &CriteriaConfig::default()).unwrap();
        assert!(events.is_empty());
        assert_eq!(funnel.counts(), vec![0; 8]);
    }

    #[test]
    fn disabled_criteria_pass_through() {
        let s = scene(north, vec![("p", Box::new(|_| Some((3.0, 20.0))))], 3.0);
        let mut cfg = CriteriaConfig::default();
        assert!(extract(&s, &cfg).unwrap().0.is_empty());
        cfg.enabled = [false; 7];
        assert_eq!(extract(&s, &cfg).unwrap().0.len(), 1);
    }

    #[test]
    fn bad_config_and_scene() {
        let cfg = CriteriaConfig {
            angle_lo_deg: 100.0,
            angle_hi_deg: 90.0,
            ..CriteriaConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut s = scene(north, vec![], 1.0);
        s.frames[1].t = 0.0;
        assert!(matches!(extract(&s, &CriteriaConfig::default()), Err(CoreError::Schema { .. })));
    }

    #[test]
    fn labeled_suite_is_separable() {
        let suite = labeled_suite();
        assert_eq!(suite.iter().filter(|s| s.crossing_track.is_some()).count(), 20);
        assert_eq!(suite.len(), 40);
        let scenes: Vec<SceneLog> = suite.iter().map(|s| s.scene.clone()).collect();
        let (events, funnel) = extract_all(&scenes, &CriteriaConfig::default(), 2).unwrap();
        for s in &suite {
            let found = events.iter().filter(|e| e.scene_id == s.scene.id).count();
            assert_eq!(found, usize::from(s.crossing_track.is_some()), "{} ({})", s.scene.id, s.note);
        }
        assert_eq!(score_suite(&suite, &events), (1.0, 1.0));
        assert!(funnel.is_monotone());
    }
}
