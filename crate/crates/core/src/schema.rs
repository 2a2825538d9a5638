//! Domain records and their JSONL files.
//!
//! Coordinates follow one canonical frame: `x` runs along the road, `y`
//! across it with `y = 0` at the departure curb. Head orientation `o` is in
//! degrees relative to the crossing direction, positive counter-clockwise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const SCHEMA_TAG: &str = "crosspath/1";
pub const TIMESTEP_S: f64 = 0.1;
pub const NO_VEHICLE: f64 = 999.0;
/// Width of the refuge between the two directions on a median road.
pub const MEDIAN_WIDTH_M: f64 = 2.0;
pub const CONTEXT_LEN: usize = 10;

const TIMESTEP_TOL: f64 = 1e-6;
const CURB_TOL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub o: f64,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadType {
    OneWay,
    TwoWay,
    TwoWayMedian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Snow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
}

impl RoadType {
    pub const ALL: [RoadType; 3] = [RoadType::OneWay, RoadType::TwoWay, RoadType::TwoWayMedian];

    pub fn name(self) -> &'static str {
        match self {
            RoadType::OneWay => "one_way",
            RoadType::TwoWay => "two_way",
            RoadType::TwoWayMedian => "two_way_median",
        }
    }
}

pub const SPEED_LEVELS: [f64; 3] = [30.0, 40.0, 50.0];
pub const LANE_LEVELS: [f64; 3] = [2.5, 2.75, 3.0];
pub const ARRIVAL_LEVELS: [f64; 3] = [530.0, 750.0, 1100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioContext {
    pub road_type: RoadType,
    pub speed_limit_kmh: f64,
    pub lane_width_m: f64,
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub arrival_rate_vph: f64,
    pub n_lanes: u32,
}

impl ScenarioContext {
    pub fn road_width(&self) -> f64 {
        let lanes = f64::from(self.n_lanes) * self.lane_width_m;
        match self.road_type {
            RoadType::TwoWayMedian => lanes + MEDIAN_WIDTH_M,
            _ => lanes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.speed_limit_kmh) {
            return Err(CoreError::schema("speed_limit_kmh", "must be positive"));
        }
        if !positive(self.lane_width_m) {
            return Err(CoreError::schema("lane_width_m", "must be positive"));
        }
        if !(self.arrival_rate_vph.is_finite() && self.arrival_rate_vph >= 0.0) {
            return Err(CoreError::schema("arrival_rate_vph", "must be non-negative"));
        }
        if self.n_lanes == 0 {
            return Err(CoreError::schema("n_lanes", "must be at least 1"));
        }
        Ok(())
    }

    /// Every combination of the enumerated levels (3·3·3·2·2·3 = 324).
    pub fn enumerated_grid(n_lanes: u32) -> Vec<ScenarioContext> {
        let mut out = Vec::with_capacity(324);
        for road_type in RoadType::ALL {
            for speed in SPEED_LEVELS {
                for lane in LANE_LEVELS {
                    for weather in [Weather::Clear, Weather::Snow] {
                        for time_of_day in [TimeOfDay::Day, TimeOfDay::Night] {
                            for arrival in ARRIVAL_LEVELS {
                                out.push(ScenarioContext {
                                    road_type,
                                    speed_limit_kmh: speed,
                                    lane_width_m: lane,
                                    weather,
                                    time_of_day,
                                    arrival_rate_vph: arrival,
                                    n_lanes,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Fixed-order context vector:
/// `[one_way, two_way, two_way_median, speed, lane, arrival, snow, night, 0, 0]`
/// with the numeric levels min-max scaled over their enumerated ranges.
pub fn encode_context(ctx: &ScenarioContext) -> [f64; CONTEXT_LEN] {
    let mut v = [0.0; CONTEXT_LEN];
    v[ctx.road_type as usize] = 1.0;
    v[3] = (ctx.speed_limit_kmh - SPEED_LEVELS[0]) / (SPEED_LEVELS[2] - SPEED_LEVELS[0]);
    v[4] = (ctx.lane_width_m - LANE_LEVELS[0]) / (LANE_LEVELS[2] - LANE_LEVELS[0]);
    v[5] = (ctx.arrival_rate_vph - ARRIVAL_LEVELS[0]) / (ARRIVAL_LEVELS[2] - ARRIVAL_LEVELS[0]);
    v[6] = f64::from(u8::from(ctx.weather == Weather::Snow));
    v[7] = f64::from(u8::from(ctx.time_of_day == TimeOfDay::Night));
    v
}

/// The six contextual variables and the encoded dimensions each one owns.
pub const CONTEXT_GROUPS: [(&str, &[usize]); 6] = [
    ("road_type", &[0, 1, 2]),
    ("speed_limit", &[3]),
    ("lane_width", &[4]),
    ("arrival_rate", &[5]),
    ("snow", &[6]),
    ("night", &[7]),
];

/// Human-readable level of group `group` in an encoded context vector.
pub fn describe_group(group: usize, encoded: &[f64]) -> String {
    let scaled = |i: usize, lo: f64, hi: f64| lo + encoded[i] * (hi - lo);
    match group {
        0 => {
            let best = (0..3)
                .max_by(|&a, &b| encoded[a].total_cmp(&encoded[b]))
                .unwrap_or(0);
            RoadType::ALL[best].name().to_string()
        }
        1 => format!("{}", scaled(3, SPEED_LEVELS[0], SPEED_LEVELS[2])),
        2 => format!("{}", scaled(4, LANE_LEVELS[0], LANE_LEVELS[2])),
        3 => format!("{}", scaled(5, ARRIVAL_LEVELS[0], ARRIVAL_LEVELS[2])),
        4 => if encoded[6] > 0.5 { "snow" } else { "clear" }.to_string(),
        5 => if encoded[7] > 0.5 { "night" } else { "day" }.to_string(),
        _ => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingInstance {
    pub id: String,
    pub points: Vec<TrajectoryPoint>,
    pub context: ScenarioContext,
}

impl CrossingInstance {
    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        let pts = &self.points;
        if pts.len() < 2 {
            return Err(CoreError::schema("points", "at least 2 points required"));
        }
        for (i, p) in pts.iter().enumerate() {
            if ![p.t, p.x, p.y, p.o, p.d].iter().all(|v| v.is_finite()) {
                return Err(CoreError::schema(format!("points[{i}]"), "non-finite value"));
            }
            if p.d < 0.0 {
                return Err(CoreError::schema(format!("points[{i}].d"), "negative distance"));
            }
            if !(-180.0..180.0).contains(&p.o) {
                return Err(CoreError::schema(format!("points[{i}].o"), "orientation outside [-180, 180)"));
            }
        }
        for (i, w) in pts.windows(2).enumerate() {
            if ((w[1].t - w[0].t) - TIMESTEP_S).abs() > TIMESTEP_TOL {
                return Err(CoreError::schema(
                    format!("points[{}].t", i + 1),
                    format!("non-uniform timestep ({:.3} s)", w[1].t - w[0].t),
                ));
            }
        }
        if pts[0].y.abs() > CURB_TOL {
            return Err(CoreError::schema("points[0].y", "crossing must start at the curb (y = 0)"));
        }
        let width = self.context.road_width();
        let last = pts[pts.len() - 1].y;
        if last < width - CURB_TOL {
            return Err(CoreError::schema(
                format!("points[{}].y", pts.len() - 1),
                format!("crossing ends at y = {last} short of road width {width}"),
            ));
        }
        Ok(())
    }

    /// Mirror an instance recorded in the opposite direction so that `y`
    /// starts at zero and increases. Canonical instances are left untouched.
    pub fn normalize_direction(&mut self) {
        let (Some(first), Some(last)) = (self.points.first(), self.points.last()) else {
            return;
        };
        if last.y >= first.y {
            return;
        }
        let y0 = first.y;
        for p in &mut self.points {
            p.y = y0 - p.y;
            p.o = wrap_degrees(-p.o);
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Wrap an angle in degrees to `[-180, 180)`.
pub fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    /// Degrees counter-clockwise from +x, in `[-180, 180)`.
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub track_id: String,
    pub class: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub ego_pose: EgoPose,
    pub tracked: Vec<TrackedObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLog {
    pub id: String,
    pub frame_rate_hz: f64,
    pub frames: Vec<Frame>,
}

impl SceneLog {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(CoreError::schema("frame_rate_hz", "must be positive"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let h = f.ego_pose.heading;
            if !(-180.0..180.0).contains(&h) {
                return Err(CoreError::schema(
                    format!("frames[{i}].ego_pose.heading"),
                    "heading outside [-180, 180)",
                ));
            }
            if !(f.t.is_finite() && f.ego_pose.x.is_finite() && f.ego_pose.y.is_finite()) {
                return Err(CoreError::schema(format!("frames[{i}]"), "non-finite value"));
            }
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(CoreError::schema(
                    format!("frames[{}].t", i + 1),
                    "timestamps must be strictly increasing",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

/// Records with a validity check applied on read.
pub trait Record: Serialize + DeserializeOwned {
    fn check(&mut self) -> Result<()>;
}

impl Record for CrossingInstance {
    fn check(&mut self) -> Result<()> {
        self.normalize_direction();
        self.validate()
    }
}

impl Record for SceneLog {
    fn check(&mut self) -> Result<()> {
        self.validate()
    }
}

/// Read a versioned JSONL stream. An empty stream is an empty collection.
pub fn read_jsonl<T: Record, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let header: Header = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
                line: lineno,
                message: format!("expected schema header: {e}"),
            })?;
            if header.schema != SCHEMA_TAG {
                return Err(CoreError::SchemaVersion {
                    expected: SCHEMA_TAG.into(),
                    found: header.schema,
                });
            }
            header_seen = true;
            continue;
        }
        let mut rec: T = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        rec.check().map_err(|e| match e {
            CoreError::Schema { field, message } => CoreError::Schema {
                field,
                message: format!("line {lineno}: {message}"),
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    let wrap = |e: serde_json::Error| CoreError::State(format!("serialization failed: {e}"));
    let io = |e: std::io::Error| CoreError::io("<stream>", e);
    let header = serde_json::to_string(&Header {
        schema: SCHEMA_TAG.into(),
    })
    .map_err(wrap)?;
    writeln!(writer, "{header}").map_err(io)?;
    for r in records {
        writeln!(writer, "{}", serde_json::to_string(r).map_err(wrap)?).map_err(io)?;
    }
    writer.flush().map_err(io)
}

pub fn read_jsonl_file<T: Record>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_jsonl(f)
}

pub fn write_jsonl_file<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_jsonl(BufWriter::new(f), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ctx(road_type: RoadType, speed: f64, lane: f64, snow: bool, night: bool, arrival: f64) -> ScenarioContext {
        ScenarioContext {
            road_type,
            speed_limit_kmh: speed,
            lane_width_m: lane,
            weather: if snow { Weather::Snow } else { Weather::Clear },
            time_of_day: if night { TimeOfDay::Night } else { TimeOfDay::Day },
            arrival_rate_vph: arrival,
            n_lanes: 2,
        }
    }

    fn straight(width: f64, n: usize) -> Vec<TrajectoryPoint> {
        (0..n)
            .map(|k| TrajectoryPoint {
                t: k as f64 * 0.1,
                x: 0.0,
                y: width * k as f64 / (n - 1) as f64,
                o: 10.0,
                d: 30.0,
            })
            .collect()
    }

    #[test]
    fn encode_minimum_levels() {
        let v = encode_context(&ctx(RoadType::OneWay, 30.0, 2.5, false, false, 530.0));
        assert_eq!(v, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_maximum_levels() {
        let v = encode_context(&ctx(RoadType::TwoWayMedian, 50.0, 3.0, true, true, 1100.0));
        assert_eq!(v, [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_middle_levels() {
        let v = encode_context(&ctx(RoadType::TwoWay, 40.0, 2.75, false, true, 750.0));
        assert_eq!(&v[..3], &[0.0, 1.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-12);
        assert!((v[4] - 0.5).abs() < 1e-12);
        assert!((v[5] - 0.3860).abs() < 1e-4);
        assert_eq!(v[7], 1.0);
    }

    #[test]
    fn encoding_is_injective_over_grid() {
        let grid = ScenarioContext::enumerated_grid(2);
        assert_eq!(grid.len(), 324);
        let mut keys: Vec<Vec<u64>> = grid
            .iter()
            .map(|c| encode_context(c).iter().map(|v| v.to_bits()).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 324);
    }

    #[test]
    fn road_width_includes_median() {
        let mut c = ctx(RoadType::TwoWay, 30.0, 3.0, false, false, 530.0);
        assert_eq!(c.road_width(), 6.0);
        c.road_type = RoadType::TwoWayMedian;
        assert_eq!(c.road_width(), 6.0 + MEDIAN_WIDTH_M);
    }

    #[test]
    fn uneven_timestep_is_rejected() {
        let mut inst = CrossingInstance {
            id: "a".into(),
            points: straight(5.0, 40),
            context: ctx(RoadType::OneWay, 30.0, 2.5, false, false, 530.0),
        };
        inst.validate().unwrap();
        inst.points[5].t += 0.1;
        let err = inst.validate().unwrap_err();
        assert!(err.to_string().contains("non-uniform timestep"), "{err}");
    }

    #[test]
    fn short_crossing_is_rejected() {
        let inst = CrossingInstance {
            id: "a".into(),
            points: straight(4.0, 40),
            context: ctx(RoadType::OneWay, 30.0, 2.5, false, false, 530.0),
        };
        match inst.validate() {
            Err(CoreError::Schema { field, .. }) => assert_eq!(field, "points[39].y"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reverse_crossing_is_mirrored() {
        let mut pts = straight(5.0, 30);
        pts.iter_mut().for_each(|p| p.y = 5.0 - p.y);
        let mut inst = CrossingInstance {
            id: "r".into(),
            points: pts,
            context: ctx(RoadType::OneWay, 30.0, 2.5, false, false, 530.0),
        };
        inst.check().unwrap();
        assert_eq!(inst.points[0].y, 0.0);
        assert_eq!(inst.points[29].y, 5.0);
        assert_eq!(inst.points[3].o, -10.0);
    }

    #[test]
    fn empty_stream_is_empty() {
        let v: Vec<CrossingInstance> = read_jsonl(&b""[..]).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{{\"schema\":\"{SCHEMA_TAG}\"}}\n{{not json\n");
        match read_jsonl::<CrossingInstance, _>(text.as_bytes()) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_schema_tag() {
        let r = read_jsonl::<CrossingInstance, _>(&b"{\"schema\":\"crosspath/9\"}\n"[..]);
        assert!(matches!(r, Err(CoreError::SchemaVersion { .. })));
    }

    #[test]
    fn wrap_degrees_range() {
        assert_eq!(wrap_degrees(180.0), -180.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        assert_eq!(wrap_degrees(725.0), 5.0);
    }

    #[test]
    fn scene_timestamps_must_increase() {
        let frame = |t| Frame {
            t,
            ego_pose: EgoPose {
                x: 0.0,
                y: 0.0,
                heading: 0.0,
            },
            tracked: vec![],
        };
        let mut s = SceneLog {
            id: "s".into(),
            frame_rate_hz: 10.0,
            frames: vec![frame(0.0), frame(0.1)],
        };
        s.validate().unwrap();
        s.frames.push(frame(0.1));
        assert!(s.validate().is_err());
    }
}
