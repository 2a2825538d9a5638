//! Seeded synthetic crossing scenarios at 10 Hz.
//!
//! A participant waits at the curb until the gap to the next vehicle in the
//! near lane exceeds their critical gap, then walks across. Forward speed is
//! the participant's base speed shaped by the scenario: a constant speed
//! factor, a progress-dependent hurry/slow-down profile driven by traffic
//! speed and volume, an optional pause on the median, and occasional
//! hesitations whose hazard rises in snow and at night. Lateral drift is an
//! Ornstein–Uhlenbeck velocity. Head orientation swings toward oncoming
//! traffic with an amplitude that grows as vehicles get close.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::par;
use crate::schema::{
    wrap_degrees, write_jsonl, CrossingInstance, RoadType, ScenarioContext, TimeOfDay, TrajectoryPoint, Weather,
    ARRIVAL_LEVELS, LANE_LEVELS, MEDIAN_WIDTH_M, NO_VEHICLE, SPEED_LEVELS, TIMESTEP_S,
};
use crate::seed::derive;

/// Crossing is complete once `y` is within this of the far curb.
const FINISH_SLACK: f64 = 1e-9;
/// Extra simulated traffic before the participant arrives and after the
/// latest possible finish, so every vehicle near the crossing exists.
const TRAFFIC_MARGIN_S: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAssignment {
    /// Cycle through shuffled copies of the full factorial grid.
    Grid,
    /// Draw each variable independently from `mixture`.
    Mixture,
}

/// Relative weights over the levels of each contextual variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextMixture {
    pub road_type: [f64; 3],
    pub speed_limit: [f64; 3],
    pub lane_width: [f64; 3],
    pub weather: [f64; 2],
    pub time_of_day: [f64; 2],
    pub arrival_rate: [f64; 3],
}

impl Default for ContextMixture {
    fn default() -> Self {
        Self {
            road_type: [1.0; 3],
            speed_limit: [1.0; 3],
            lane_width: [1.0; 3],
            weather: [1.0; 2],
            time_of_day: [1.0; 2],
            arrival_rate: [1.0; 3],
        }
    }
}

impl ContextMixture {
    fn validate(&self) -> Result<()> {
        let rows: [&[f64]; 6] = [
            &self.road_type,
            &self.speed_limit,
            &self.lane_width,
            &self.weather,
            &self.time_of_day,
            &self.arrival_rate,
        ];
        for r in rows {
            if r.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || r.iter().sum::<f64>() <= 0.0 {
                return Err(CoreError::Config("mixture weights must be non-negative with a positive sum".into()));
            }
        }
        Ok(())
    }
}

/// Context-free behaviour of participants and traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorParams {
    pub base_speed_mean: f64,
    pub base_speed_std: f64,
    pub base_speed_min: f64,
    pub base_speed_max: f64,
    /// Relative spread of a participant's speed between scenarios.
    pub scenario_speed_jitter: f64,
    pub critical_gap_mean: f64,
    pub critical_gap_std: f64,
    /// Time constant of the lag between target and actual speed, seconds.
    pub speed_lag_s: f64,
    /// OU noise on the relative forward speed.
    pub speed_noise: f64,
    pub lateral_theta: f64,
    pub lateral_sigma: f64,
    pub heading_noise_deg: f64,
    pub heading_base_amp_deg: f64,
    pub heading_proximity_amp_deg: f64,
    pub heading_freq_hz: f64,
    /// Hesitations per second of walking in clear daylight.
    pub hesitation_hazard: f64,
    pub hesitation_min_s: f64,
    pub hesitation_max_s: f64,
    /// Speed factor while hesitating.
    pub hesitation_speed: f64,
    pub median_pause_min_s: f64,
    pub median_pause_max_s: f64,
    /// Relative spread of vehicle speeds around the limit.
    pub vehicle_speed_cv: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            base_speed_mean: 1.3,
            base_speed_std: 0.15,
            base_speed_min: 0.6,
            base_speed_max: 2.2,
            scenario_speed_jitter: 0.04,
            critical_gap_mean: 4.0,
            critical_gap_std: 0.8,
            speed_lag_s: 0.3,
            speed_noise: 0.03,
            lateral_theta: 1.0,
            lateral_sigma: 0.06,
            heading_noise_deg: 3.0,
            heading_base_amp_deg: 15.0,
            heading_proximity_amp_deg: 45.0,
            heading_freq_hz: 0.4,
            hesitation_hazard: 0.0,
            hesitation_min_s: 0.8,
            hesitation_max_s: 2.0,
            hesitation_speed: 0.1,
            median_pause_min_s: 0.5,
            median_pause_max_s: 2.0,
            vehicle_speed_cv: 0.08,
        }
    }
}

/// How strongly the scenario shapes behaviour. All zeros makes every
/// trajectory statistic independent of the context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectSizes {
    /// Relative cruising-speed change at the highest speed limit.
    pub speed_limit_speed: f64,
    /// Relative cruising-speed change in snow.
    pub snow_speed: f64,
    /// Second-half speed change driven by the speed limit (scaled to ±1).
    pub profile_speed_limit: f64,
    /// Second-half speed change driven by the arrival rate (scaled to ±1).
    pub profile_arrival: f64,
    /// Extra lateral-noise multiple in snow (1 doubles it).
    pub snow_noise: f64,
    /// Extra lateral-noise multiple at night.
    pub night_noise: f64,
    /// Added hesitation hazard in snow, per second.
    pub snow_hesitation: f64,
    /// Added hesitation hazard at night, per second.
    pub night_hesitation: f64,
    /// Probability of pausing on the median of a median road.
    pub median_pause_prob: f64,
}

impl Default for EffectSizes {
    fn default() -> Self {
        Self {
            speed_limit_speed: 0.10,
            snow_speed: 0.0,
            profile_speed_limit: 0.2,
            profile_arrival: 0.2,
            snow_noise: 0.3,
            night_noise: 0.3,
            snow_hesitation: 0.08,
            night_hesitation: 0.06,
            median_pause_prob: 0.7,
        }
    }
}

impl EffectSizes {
    pub fn none() -> Self {
        Self {
            speed_limit_speed: 0.0,
            snow_speed: 0.0,
            profile_speed_limit: 0.0,
            profile_arrival: 0.0,
            snow_noise: 0.0,
            night_noise: 0.0,
            snow_hesitation: 0.0,
            night_hesitation: 0.0,
            median_pause_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_participants: usize,
    pub scenarios_per_participant: usize,
    pub n_lanes: u32,
    pub assignment: ContextAssignment,
    pub mixture: ContextMixture,
    pub behavior: BehaviorParams,
    pub effects: EffectSizes,
    pub vehicles: bool,
    pub max_wait_s: f64,
    pub max_crossing_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_participants: 100,
            scenarios_per_participant: 30,
            n_lanes: 2,
            assignment: ContextAssignment::Grid,
            mixture: ContextMixture::default(),
            behavior: BehaviorParams::default(),
            effects: EffectSizes::default(),
            vehicles: true,
            max_wait_s: 600.0,
            max_crossing_s: 60.0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_instances(&self) -> usize {
        self.n_participants * self.scenarios_per_participant
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.behavior;
        let e = &self.effects;
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.n_lanes == 0 {
            return fail("n_lanes must be at least 1");
        }
        if !(b.base_speed_mean > 0.0) || !(b.base_speed_min > 0.0) || b.base_speed_min > b.base_speed_max {
            return fail("base speed mean and bounds must be positive and ordered");
        }
        let non_negative = [
            b.base_speed_std,
            b.scenario_speed_jitter,
            b.critical_gap_std,
            b.speed_lag_s,
            b.speed_noise,
            b.lateral_theta,
            b.lateral_sigma,
            b.heading_noise_deg,
            b.hesitation_hazard,
            b.hesitation_min_s,
            b.median_pause_min_s,
            b.vehicle_speed_cv,
            e.snow_noise,
            e.night_noise,
            e.snow_hesitation,
            e.night_hesitation,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("scales, rates and durations must be non-negative");
        }
        if b.hesitation_max_s < b.hesitation_min_s || b.median_pause_max_s < b.median_pause_min_s {
            return fail("duration ranges must be ordered");
        }
        if !(0.0..=1.0).contains(&e.median_pause_prob) || !(0.0..=1.0).contains(&b.hesitation_speed) {
            return fail("probabilities and speed factors must lie in [0, 1]");
        }
        if !(self.max_wait_s > 0.0 && self.max_crossing_s > 0.0) {
            return fail("time limits must be positive");
        }
        self.mixture.validate()
    }
}

/// One simulated vehicle: passes `x = 0` at `arrival` moving with signed
/// velocity `vx` along lane centre `y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vehicle {
    pub arrival: f64,
    pub vx: f64,
    pub y: f64,
}

impl Vehicle {
    pub fn x_at(&self, t: f64) -> f64 {
        self.vx * (t - self.arrival)
    }
}

/// All vehicles on every lane of one scenario.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VehicleStream {
    /// Per lane, ordered by arrival.
    pub lanes: Vec<Vec<Vehicle>>,
}

/// Lane centres and travel directions (+1 towards +x).
pub fn lane_layout(ctx: &ScenarioContext) -> Vec<(f64, f64)> {
    let n = ctx.n_lanes as usize;
    let near = match ctx.road_type {
        RoadType::OneWay => n,
        _ => n.div_ceil(2),
    };
    (0..n)
        .map(|j| {
            let mut y = (j as f64 + 0.5) * ctx.lane_width_m;
            if ctx.road_type == RoadType::TwoWayMedian && j >= near {
                y += MEDIAN_WIDTH_M;
            }
            (y, if j < near { 1.0 } else { -1.0 })
        })
        .collect()
}

impl VehicleStream {
    /// Poisson arrivals at `arrival_rate_vph` per lane over `[t0, t1]`.
    pub fn simulate(ctx: &ScenarioContext, t0: f64, t1: f64, speed_cv: f64, rng: &mut ChaCha8Rng) -> Self {
        let rate = ctx.arrival_rate_vph / 3600.0;
        let base = ctx.speed_limit_kmh / 3.6;
        let lanes = lane_layout(ctx)
            .into_iter()
            .map(|(y, dir)| {
                let mut out = Vec::new();
                if rate <= 0.0 {
                    return out;
                }
                let gap = Exp::new(rate).expect("positive rate");
                let mut t = t0;
                loop {
                    t += gap.sample(rng);
                    if t > t1 {
                        break;
                    }
                    let z: f64 = StandardNormal.sample(rng);
                    let v = base * (1.0 + speed_cv * z).clamp(0.5, 1.5);
                    out.push(Vehicle {
                        arrival: t,
                        vx: dir * v,
                        y,
                    });
                }
                out
            })
            .collect();
        Self { lanes }
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.iter().all(Vec::is_empty)
    }

    /// Distance from `(x, y)` to the nearest vehicle at time `t`, capped at
    /// the no-vehicle sentinel.
    pub fn nearest(&self, t: f64, x: f64, y: f64) -> f64 {
        self.lanes
            .iter()
            .flatten()
            .map(|v| (v.x_at(t) - x).hypot(v.y - y))
            .fold(NO_VEHICLE, f64::min)
    }

    /// Arrivals in lane `lane` strictly after `t`.
    pub fn next_arrival(&self, lane: usize, t: f64) -> Option<f64> {
        self.lanes.get(lane)?.iter().map(|v| v.arrival).find(|&a| a > t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Participant {
    pub base_speed: f64,
    pub critical_gap: f64,
}

fn participant(cfg: &GeneratorConfig, p: usize) -> Participant {
    let b = &cfg.behavior;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, "participant"));
    rng.set_stream(p as u64);
    let z1: f64 = StandardNormal.sample(&mut rng);
    let z2: f64 = StandardNormal.sample(&mut rng);
    Participant {
        base_speed: (b.base_speed_mean + b.base_speed_std * z1).clamp(b.base_speed_min, b.base_speed_max),
        critical_gap: (b.critical_gap_mean + b.critical_gap_std * z2).max(0.0),
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn context_for(cfg: &GeneratorConfig, i: usize, rng: &mut ChaCha8Rng) -> ScenarioContext {
    match cfg.assignment {
        ContextAssignment::Grid => {
            let grid = ScenarioContext::enumerated_grid(cfg.n_lanes);
            let cycle = i / grid.len();
            let mut order: Vec<usize> = (0..grid.len()).collect();
            let mut crng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, "grid"));
            crng.set_stream(cycle as u64);
            order.shuffle(&mut crng);
            grid[order[i % grid.len()]].clone()
        }
        ContextAssignment::Mixture => {
            let m = &cfg.mixture;
            ScenarioContext {
                road_type: RoadType::ALL[pick(&m.road_type, rng)],
                speed_limit_kmh: SPEED_LEVELS[pick(&m.speed_limit, rng)],
                lane_width_m: LANE_LEVELS[pick(&m.lane_width, rng)],
                weather: [Weather::Clear, Weather::Snow][pick(&m.weather, rng)],
                time_of_day: [TimeOfDay::Day, TimeOfDay::Night][pick(&m.time_of_day, rng)],
                arrival_rate_vph: ARRIVAL_LEVELS[pick(&m.arrival_rate, rng)],
                n_lanes: cfg.n_lanes,
            }
        }
    }
}

fn smoothstep(u: f64, lo: f64, hi: f64) -> f64 {
    let s = ((u - lo) / (hi - lo)).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Scenario-dependent speed shaping, separated for testing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedModel {
    pub cruise: f64,
    /// Relative change reached over the second half of the crossing.
    pub profile: f64,
}

impl SpeedModel {
    pub fn new(ctx: &ScenarioContext, e: &EffectSizes, base: f64) -> Self {
        let s = (ctx.speed_limit_kmh - SPEED_LEVELS[0]) / (SPEED_LEVELS[2] - SPEED_LEVELS[0]);
        let a = (ctx.arrival_rate_vph - ARRIVAL_LEVELS[0]) / (ARRIVAL_LEVELS[2] - ARRIVAL_LEVELS[0]);
        let snow = f64::from(u8::from(ctx.weather == Weather::Snow));
        Self {
            cruise: base * (1.0 + e.speed_limit_speed * s + e.snow_speed * snow),
            profile: e.profile_speed_limit * (2.0 * s - 1.0) + e.profile_arrival * (2.0 * a - 1.0),
        }
    }

    /// Target speed at crossing progress `u ∈ [0, 1]`.
    pub fn at(&self, u: f64) -> f64 {
        self.cruise * (1.0 + self.profile * smoothstep(u, 0.35, 0.65))
    }
}

enum Gait {
    Walk,
    Hesitate(f64),
    Pause(f64),
}

/// Generate instance `i` of the corpus.
pub fn generate_instance(cfg: &GeneratorConfig, i: usize) -> Result<CrossingInstance> {
    let spp = cfg.scenarios_per_participant.max(1);
    let (p, s) = (i / spp, i % spp);
    let who = participant(cfg, p);
    let b = &cfg.behavior;
    let e = &cfg.effects;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);

    let ctx = context_for(cfg, i, &mut rng);
    let width = ctx.road_width();
    let snow = ctx.weather == Weather::Snow;
    let night = ctx.time_of_day == TimeOfDay::Night;

    let horizon = cfg.max_wait_s + cfg.max_crossing_s + TRAFFIC_MARGIN_S;
    let traffic = if cfg.vehicles {
        VehicleStream::simulate(&ctx, -TRAFFIC_MARGIN_S, horizon, b.vehicle_speed_cv, &mut rng)
    } else {
        VehicleStream::default()
    };

    // gap acceptance on the near lane
    let mut start = 0.0;
    if !traffic.is_empty() {
        let mut k = 0u64;
        loop {
            start = k as f64 * TIMESTEP_S;
            if start > cfg.max_wait_s {
                return Err(CoreError::Generation(format!(
                    "instance {i}: no acceptable gap within {} s",
                    cfg.max_wait_s
                )));
            }
            let gap = traffic.next_arrival(0, start).map_or(f64::INFINITY, |a| a - start);
            if gap >= who.critical_gap {
                break;
            }
            k += 1;
        }
    }

    let jitter: f64 = StandardNormal.sample(&mut rng);
    let base = who.base_speed * (1.0 + b.scenario_speed_jitter * jitter).max(0.1);
    let speed = SpeedModel::new(&ctx, e, base);
    let noise_mult = (1.0 + e.snow_noise * f64::from(u8::from(snow))) * (1.0 + e.night_noise * f64::from(u8::from(night)));
    let hazard = b.hesitation_hazard
        + e.snow_hesitation * f64::from(u8::from(snow))
        + e.night_hesitation * f64::from(u8::from(night));
    let p_hesitate = 1.0 - (-hazard * TIMESTEP_S).exp();
    let median_y = (ctx.road_type == RoadType::TwoWayMedian)
        .then(|| ctx.n_lanes.div_ceil(2) as f64 * ctx.lane_width_m);
    let will_pause = median_y.is_some() && rng.random_bool(e.median_pause_prob);
    let pause_len = rng.random_range(b.median_pause_min_s..=b.median_pause_max_s);
    let phase = rng.random_range(0.0..2.0 * PI);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sqrt_dt = TIMESTEP_S.sqrt();
    let lag = if b.speed_lag_s > 0.0 { (TIMESTEP_S / b.speed_lag_s).min(1.0) } else { 1.0 };

    let (mut x, mut y, mut vx) = (0.0f64, 0.0f64, 0.0f64);
    let mut speed_eps = 0.0f64;
    let mut v = speed.at(0.0);
    let mut gait = Gait::Walk;
    let mut paused = false;
    let mut points = Vec::new();
    let max_steps = (cfg.max_crossing_s / TIMESTEP_S).ceil() as usize;

    for k in 0..=max_steps {
        let t = k as f64 * TIMESTEP_S;
        let d = traffic.nearest(start + t, x, y);
        let side = match ctx.road_type {
            RoadType::OneWay => 1.0,
            _ if y < width / 2.0 => 1.0,
            _ => -1.0,
        };
        let amp = b.heading_base_amp_deg + b.heading_proximity_amp_deg * (-d / 30.0).exp();
        let swing = 0.5 * (1.0 - (2.0 * PI * b.heading_freq_hz * t + phase).cos());
        let o_noise: f64 = b.heading_noise_deg * unit.sample(&mut rng);
        points.push(TrajectoryPoint {
            t,
            x,
            y,
            o: wrap_degrees(side * amp * swing + o_noise),
            d,
        });
        if y >= width - FINISH_SLACK {
            return Ok(CrossingInstance {
                id: format!("p{p:03}-s{s:02}"),
                points,
                context: ctx,
            });
        }

        if let (Some(m), false) = (median_y, paused) {
            if will_pause && y >= m {
                paused = true;
                gait = Gait::Pause(pause_len);
            }
        }
        gait = match gait {
            Gait::Walk if p_hesitate > 0.0 && rng.random_bool(p_hesitate) => {
                Gait::Hesitate(rng.random_range(b.hesitation_min_s..=b.hesitation_max_s))
            }
            Gait::Hesitate(left) | Gait::Pause(left) if left <= TIMESTEP_S / 2.0 => Gait::Walk,
            Gait::Hesitate(left) => Gait::Hesitate(left - TIMESTEP_S),
            Gait::Pause(left) => Gait::Pause(left - TIMESTEP_S),
            g => g,
        };
        let factor = match gait {
            Gait::Walk => 1.0,
            Gait::Hesitate(_) => b.hesitation_speed,
            Gait::Pause(_) => 0.0,
        };
        if b.speed_noise > 0.0 {
            speed_eps += -speed_eps * TIMESTEP_S + b.speed_noise * sqrt_dt * unit.sample(&mut rng);
        }
        let target = speed.at((y / width).clamp(0.0, 1.0)) * (1.0 + speed_eps).max(0.0) * factor;
        v += (target - v) * lag;
        y += v.max(0.0) * TIMESTEP_S;
        if b.lateral_sigma > 0.0 {
            vx += -b.lateral_theta * vx * TIMESTEP_S + b.lateral_sigma * noise_mult * sqrt_dt * unit.sample(&mut rng);
        }
        x += vx * TIMESTEP_S;
    }
    Err(CoreError::Generation(format!(
        "instance {i}: crossing not finished within {} s",
        cfg.max_crossing_s
    )))
}

pub fn generate(cfg: &GeneratorConfig, jobs: usize) -> Result<Vec<CrossingInstance>> {
    cfg.validate()?;
    par::try_map_indexed(cfg.n_instances(), jobs, |i| generate_instance(cfg, i))
}

/// SHA-256 of the canonical JSONL encoding.
pub fn corpus_checksum(instances: &[CrossingInstance]) -> Result<String> {
    let mut bytes = Vec::new();
    write_jsonl(&mut bytes, instances)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const BENCHMARK_INSTANCES: usize = 3000;

/// The fixed configuration behind the benchmark corpus.
pub fn benchmark_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        n_participants: 100,
        scenarios_per_participant: 30,
        ..GeneratorConfig::default()
    }
}

/// The reference corpus and its checksum.
pub fn benchmark_corpus(seed: u64, jobs: usize) -> Result<(Vec<CrossingInstance>, String)> {
    let instances = generate(&benchmark_config(seed), jobs)?;
    let sum = corpus_checksum(&instances)?;
    Ok((instances, sum))
}
