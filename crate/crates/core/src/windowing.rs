//! Turning crossing instances into fixed-shape training samples.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::schema::{encode_context, CrossingInstance, TrajectoryPoint, NO_VEHICLE, TIMESTEP_S};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Xy,
    Xyo,
    Xyd,
    Xyod,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Xy, Variant::Xyo, Variant::Xyd, Variant::Xyod];

    pub fn n_features(self) -> usize {
        match self {
            Variant::Xy => 2,
            Variant::Xyo | Variant::Xyd => 3,
            Variant::Xyod => 4,
        }
    }

    /// Column holding the distance-to-vehicle channel, if any.
    pub fn distance_column(self) -> Option<usize> {
        match self {
            Variant::Xyd => Some(2),
            Variant::Xyod => Some(3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Xy => "xy",
            Variant::Xyo => "xyo",
            Variant::Xyd => "xyd",
            Variant::Xyod => "xyod",
        }
    }
}

impl FromStr for Variant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowMode {
    TimeBased { t1_s: f64, t2_s: f64 },
    DistanceBased { p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub mode: WindowMode,
    pub variant: Variant,
    pub stride_steps: usize,
}

/// Seconds to whole 0.1 s steps; `None` unless positive and on the grid.
pub fn seconds_to_steps(s: f64) -> Option<usize> {
    let steps = (s / TIMESTEP_S).round();
    (s > 0.0 && (steps * TIMESTEP_S - s).abs() < 1e-9).then_some(steps as usize)
}

impl WindowingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride_steps == 0 {
            return Err(CoreError::Config("stride must be at least 1 step".into()));
        }
        match self.mode {
            WindowMode::TimeBased { t1_s, t2_s } => {
                if seconds_to_steps(t1_s).is_none() || seconds_to_steps(t2_s).is_none() {
                    return Err(CoreError::Config(format!(
                        "t1 = {t1_s}, t2 = {t2_s}: both must be positive multiples of 0.1 s"
                    )));
                }
            }
            WindowMode::DistanceBased { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(CoreError::Config(format!("p = {p} must lie in (0, 1)")));
                }
            }
        }
        Ok(())
    }
}

/// The six data types compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "D_3")]
    D3,
    #[serde(rename = "D_5")]
    D5,
    #[serde(rename = "D_7")]
    D7,
    #[serde(rename = "T_1_1")]
    T11,
    #[serde(rename = "T_1_2")]
    T12,
    #[serde(rename = "T_2_1")]
    T21,
}

impl DataType {
    pub const ALL: [DataType; 6] = [
        DataType::D3,
        DataType::D5,
        DataType::D7,
        DataType::T11,
        DataType::T12,
        DataType::T21,
    ];
    pub const TIME_BASED: [DataType; 3] = [DataType::T11, DataType::T12, DataType::T21];

    pub fn mode(self) -> WindowMode {
        match self {
            DataType::D3 => WindowMode::DistanceBased { p: 0.3 },
            DataType::D5 => WindowMode::DistanceBased { p: 0.5 },
            DataType::D7 => WindowMode::DistanceBased { p: 0.7 },
            DataType::T11 => WindowMode::TimeBased { t1_s: 1.0, t2_s: 1.0 },
            DataType::T12 => WindowMode::TimeBased { t1_s: 1.0, t2_s: 2.0 },
            DataType::T21 => WindowMode::TimeBased { t1_s: 2.0, t2_s: 1.0 },
        }
    }

    pub fn spec(self, variant: Variant, stride_steps: usize) -> WindowingSpec {
        WindowingSpec {
            mode: self.mode(),
            variant,
            stride_steps,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::D3 => "D_3",
            DataType::D5 => "D_5",
            DataType::D7 => "D_7",
            DataType::T11 => "T_1_1",
            DataType::T12 => "T_1_2",
            DataType::T21 => "T_2_1",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataType {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        DataType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown data type `{s}`")))
    }
}

/// One windowed training unit in raw (metre/degree) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub instance_id: String,
    /// Index of the first input step within the instance.
    pub start_step: usize,
    pub n_features: usize,
    /// `[input_len × n_features]`, row-major.
    pub input: Vec<f64>,
    pub context: Vec<f64>,
    /// `[output_len × 2]` (x, y); padded rows are zero.
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SequenceSample {
    pub fn input_len(&self) -> usize {
        self.input.len() / self.n_features
    }

    pub fn output_len(&self) -> usize {
        self.mask.len()
    }

    pub fn input_row(&self, t: usize) -> &[f64] {
        &self.input[t * self.n_features..(t + 1) * self.n_features]
    }

    /// Pad (masked) or cut the target to `steps` rows, e.g. to match a
    /// model trained on a corpus with a different longest remainder.
    pub fn with_output_len(mut self, steps: usize) -> Self {
        self.target.resize(2 * steps, 0.0);
        self.mask.resize(steps, false);
        self
    }
}

/// Feature matrix for `points` under `variant`, columns in (x, y, o, d) order.
pub fn select_features(points: &[TrajectoryPoint], variant: Variant) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len() * variant.n_features());
    for p in points {
        out.extend_from_slice(&[p.x, p.y]);
        match variant {
            Variant::Xy => {}
            Variant::Xyo => out.push(p.o),
            Variant::Xyd => out.push(p.d),
            Variant::Xyod => out.extend_from_slice(&[p.o, p.d]),
        }
    }
    out
}

fn xy(points: &[TrajectoryPoint]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Number of sliding windows: `floor((n − (in + out)) / stride) + 1`, or 0.
pub fn time_window_count(n: usize, in_steps: usize, out_steps: usize, stride: usize) -> usize {
    let span = in_steps + out_steps;
    if n < span || stride == 0 {
        0
    } else {
        (n - span) / stride + 1
    }
}

pub fn window_time_based(
    instance: &CrossingInstance,
    t1_s: f64,
    t2_s: f64,
    stride: usize,
    variant: Variant,
) -> Result<Vec<SequenceSample>> {
    let bad = || CoreError::Config(format!("t1 = {t1_s}, t2 = {t2_s} are not positive multiples of 0.1 s"));
    let t_in = seconds_to_steps(t1_s).ok_or_else(bad)?;
    let t_out = seconds_to_steps(t2_s).ok_or_else(bad)?;
    if stride == 0 {
        return Err(CoreError::Config("stride must be at least 1 step".into()));
    }
    let pts = &instance.points;
    let context = encode_context(&instance.context).to_vec();
    let count = time_window_count(pts.len(), t_in, t_out, stride);
    Ok((0..count)
        .map(|w| {
            let i = w * stride;
            SequenceSample {
                instance_id: instance.id.clone(),
                start_step: i,
                n_features: variant.n_features(),
                input: select_features(&pts[i..i + t_in], variant),
                context: context.clone(),
                target: xy(&pts[i + t_in..i + t_in + t_out]),
                mask: vec![true; t_out],
            }
        })
        .collect())
}

/// First step whose `y` reaches `p` of the road width.
pub fn distance_split_index(instance: &CrossingInstance, p: f64) -> Option<usize> {
    let threshold = p * instance.context.road_width();
    instance.points.iter().position(|pt| pt.y >= threshold)
}

/// Split one crossing at fraction `p` of the road width; the target is
/// padded with masked rows up to `pad_to` steps.
pub fn split_distance_based(
    instance: &CrossingInstance,
    p: f64,
    variant: Variant,
    pad_to: usize,
) -> Result<SequenceSample> {
    let n = instance.points.len();
    let k = distance_split_index(instance, p).unwrap_or(n);
    if k == 0 || k >= n {
        return Err(CoreError::DegenerateSplit {
            instance: instance.id.clone(),
            index: k,
            len: n,
        });
    }
    let remaining = n - k;
    if remaining > pad_to {
        return Err(CoreError::Config(format!(
            "instance {} has {remaining} target steps, more than the padding length {pad_to}",
            instance.id
        )));
    }
    let mut target = xy(&instance.points[k..]);
    target.resize(2 * pad_to, 0.0);
    let mut mask = vec![true; remaining];
    mask.resize(pad_to, false);
    Ok(SequenceSample {
        instance_id: instance.id.clone(),
        start_step: 0,
        n_features: variant.n_features(),
        input: select_features(&instance.points[..k], variant),
        context: encode_context(&instance.context).to_vec(),
        target,
        mask,
    })
}

/// All samples of a corpus under one windowing spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedCorpus {
    pub spec: WindowingSpec,
    pub samples: Vec<SequenceSample>,
    /// Longest input sequence (equal for all samples in time-based mode).
    pub input_len: usize,
    pub output_len: usize,
    /// Instances skipped because their distance split was degenerate.
    pub dropped: Vec<String>,
}

pub fn window_corpus(instances: &[CrossingInstance], spec: &WindowingSpec) -> Result<WindowedCorpus> {
    spec.validate()?;
    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    let (input_len, output_len) = match spec.mode {
        WindowMode::TimeBased { t1_s, t2_s } => {
            for inst in instances {
                samples.extend(window_time_based(inst, t1_s, t2_s, spec.stride_steps, spec.variant)?);
            }
            (
                seconds_to_steps(t1_s).unwrap_or(0),
                seconds_to_steps(t2_s).unwrap_or(0),
            )
        }
        WindowMode::DistanceBased { p } => {
            let pad_to = instances
                .iter()
                .filter_map(|inst| {
                    let n = inst.points.len();
                    distance_split_index(inst, p).filter(|&k| k > 0 && k < n).map(|k| n - k)
                })
                .max()
                .unwrap_or(0);
            for inst in instances {
                match split_distance_based(inst, p, spec.variant, pad_to) {
                    Ok(s) => samples.push(s),
                    Err(CoreError::DegenerateSplit { instance, .. }) => dropped.push(instance),
                    Err(e) => return Err(e),
                }
            }
            let input_len = samples.iter().map(SequenceSample::input_len).max().unwrap_or(0);
            (input_len, pad_to)
        }
    };
    Ok(WindowedCorpus {
        spec: *spec,
        samples,
        input_len,
        output_len,
        dropped,
    })
}

/// Sample counts per data type, one row each.
pub fn count_table(
    instances: &[CrossingInstance],
    variant: Variant,
    stride: usize,
) -> Result<Vec<(DataType, usize)>> {
    DataType::ALL
        .into_iter()
        .map(|dt| Ok((dt, window_corpus(instances, &dt.spec(variant, stride))?.samples.len())))
        .collect()
}

/// Per-feature min-max scaling fitted on training samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Column whose `NO_VEHICLE` sentinel is clipped to the fitted maximum.
    pub sentinel_column: Option<usize>,
}

impl NormalizationParams {
    /// Fit on `samples`. Coordinates (columns 0 and 1) also cover the
    /// valid target rows, so inputs and targets share one scale.
    pub fn fit<'a, I>(samples: I, variant: Variant) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SequenceSample>,
    {
        let f = variant.n_features();
        let sentinel = variant.distance_column();
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        let mut seen = false;
        let mut note = |j: usize, v: f64| {
            if Some(j) == sentinel && v >= NO_VEHICLE {
                return;
            }
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        };
        for s in samples {
            if s.n_features != f {
                return Err(CoreError::State(format!(
                    "sample has {} features, variant {} needs {f}",
                    s.n_features,
                    variant.name()
                )));
            }
            seen = true;
            for row in s.input.chunks(f) {
                for (j, &v) in row.iter().enumerate() {
                    note(j, v);
                }
            }
            for (row, &valid) in s.target.chunks(2).zip(&s.mask) {
                if valid {
                    note(0, row[0]);
                    note(1, row[1]);
                }
            }
        }
        if !seen {
            return Err(CoreError::State("cannot fit normalization on an empty training set".into()));
        }
        for j in 0..f {
            if !min[j].is_finite() {
                // only sentinels observed
                min[j] = NO_VEHICLE;
                max[j] = NO_VEHICLE;
            }
        }
        Ok(Self {
            min,
            max,
            sentinel_column: sentinel,
        })
    }

    pub fn is_fitted(&self) -> bool {
        !self.min.is_empty() && self.min.len() == self.max.len()
    }

    fn ensure(&self) -> Result<()> {
        if self.is_fitted() {
            Ok(())
        } else {
            Err(CoreError::State("normalization parameters are not fitted".into()))
        }
    }

    fn scale(&self, j: usize, v: f64) -> f64 {
        if self.sentinel_column == Some(j) && v >= NO_VEHICLE {
            return 1.0;
        }
        let (lo, hi) = (self.min[j], self.max[j]);
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    fn unscale(&self, j: usize, u: f64) -> f64 {
        let (lo, hi) = (self.min[j], self.max[j]);
        if hi > lo {
            lo + u * (hi - lo)
        } else {
            lo
        }
    }

    /// Scale one value of feature column `j` into `[0, 1]`.
    pub fn apply(&self, j: usize, v: f64) -> Result<f64> {
        self.ensure()?;
        Ok(self.scale(j, v))
    }

    pub fn invert(&self, j: usize, u: f64) -> Result<f64> {
        self.ensure()?;
        Ok(self.unscale(j, u))
    }

    pub fn normalize(&self, s: &SequenceSample) -> Result<NormalizedSample> {
        self.ensure()?;
        if s.n_features != self.min.len() {
            return Err(CoreError::State(format!(
                "sample has {} features, normalization fitted on {}",
                s.n_features,
                self.min.len()
            )));
        }
        let f = s.n_features;
        let input = s
            .input
            .iter()
            .enumerate()
            .map(|(i, &v)| self.scale(i % f, v))
            .collect();
        let mut target = Vec::with_capacity(s.target.len());
        let mut mask = Vec::with_capacity(s.target.len());
        for (row, &valid) in s.target.chunks(2).zip(&s.mask) {
            let w = f64::from(u8::from(valid));
            target.push(if valid { self.scale(0, row[0]) } else { 0.0 });
            target.push(if valid { self.scale(1, row[1]) } else { 0.0 });
            mask.extend_from_slice(&[w, w]);
        }
        Ok(NormalizedSample {
            input,
            input_len: s.input_len(),
            context: s.context.clone(),
            target,
            mask,
            raw_target: s.target.clone(),
        })
    }

    /// Map normalized `(x, y)` pairs back to metres.
    pub fn denormalize_xy(&self, flat: &[f64]) -> Result<Vec<f64>> {
        self.ensure()?;
        Ok(flat
            .iter()
            .enumerate()
            .map(|(i, &u)| self.unscale(i % 2, u))
            .collect())
    }
}

/// A sample scaled into `[0, 1]` and laid out for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub input: Vec<f64>,
    pub input_len: usize,
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    /// One weight per target entry (1 valid, 0 padded).
    pub mask: Vec<f64>,
    /// Target in metres, for error reporting.
    pub raw_target: Vec<f64>,
}

/// Instance-level held-out test set plus `k` validation folds over the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub test: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

pub const DEFAULT_FOLDS: usize = 8;
pub const TEST_FRACTION: f64 = 0.2;

pub fn make_splits(ids: &[String], seed: u64, k: usize) -> Result<DatasetSplit> {
    let mut unique: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() != ids.len() {
        return Err(CoreError::Split("instance ids must be unique".into()));
    }
    if unique.len() < 10 {
        return Err(CoreError::Split(format!("need at least 10 instances, got {}", unique.len())));
    }
    if k < 2 {
        return Err(CoreError::Split(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n_test = (unique.len() as f64 * TEST_FRACTION).round() as usize;
    let pool = unique.split_off(n_test);
    if pool.len() < k {
        return Err(CoreError::Split(format!("{} pool instances cannot fill {k} folds", pool.len())));
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in pool.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    let mut test = unique;
    test.sort();
    folds.iter_mut().for_each(|f| f.sort());
    Ok(DatasetSplit { seed, test, folds })
}

impl DatasetSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// All train/validation pool ids.
    pub fn pool(&self) -> BTreeSet<&str> {
        self.folds.iter().flatten().map(String::as_str).collect()
    }

    pub fn fold_train(&self, k: usize) -> BTreeSet<&str> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().map(String::as_str))
            .collect()
    }

    pub fn fold_val(&self, k: usize) -> BTreeSet<&str> {
        self.folds[k].iter().map(String::as_str).collect()
    }

    pub fn test_set(&self) -> BTreeSet<&str> {
        self.test.iter().map(String::as_str).collect()
    }
}

/// Samples whose instance id belongs to `ids`, in corpus order.
pub fn select<'a>(samples: &'a [SequenceSample], ids: &BTreeSet<&str>) -> Vec<&'a SequenceSample> {
    samples.iter().filter(|s| ids.contains(s.instance_id.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{RoadType, ScenarioContext, TimeOfDay, Weather};

    fn instance(n: usize, width: f64) -> CrossingInstance {
        CrossingInstance {
            id: format!("i{n}"),
            points: (0..n)
                .map(|k| TrajectoryPoint {
                    t: k as f64 * 0.1,
                    x: 0.01 * k as f64,
                    y: width * k as f64 / (n - 1) as f64,
                    o: 5.0,
                    d: 40.0 - k as f64 * 0.1,
                })
                .collect(),
            context: ScenarioContext {
                road_type: RoadType::OneWay,
                speed_limit_kmh: 30.0,
                lane_width_m: width / 2.0,
                weather: Weather::Clear,
                time_of_day: TimeOfDay::Day,
                arrival_rate_vph: 530.0,
                n_lanes: 2,
            },
        }
    }

    #[test]
    fn thirty_steps_give_eleven_windows() {
        let s = window_time_based(&instance(30, 5.0), 1.0, 1.0, 1, Variant::Xy).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[10].start_step, 10);
        assert!(s.iter().all(|w| w.mask.iter().all(|&m| m)));
    }

    #[test]
    fn exact_length_gives_one_window() {
        assert_eq!(window_time_based(&instance(20, 5.0), 1.0, 1.0, 1, Variant::Xy).unwrap().len(), 1);
        assert!(window_time_based(&instance(19, 5.0), 1.0, 1.0, 1, Variant::Xy).unwrap().is_empty());
    }

    #[test]
    fn distance_split_at_threshold() {
        // 51 points over 6 m, 0.12 m per step: y first reaches 1.8 m at step 15
        let inst = instance(51, 6.0);
        assert_eq!(distance_split_index(&inst, 0.3), Some(15));
        let s = split_distance_based(&inst, 0.3, Variant::Xyod, 40).unwrap();
        assert_eq!(s.input_len(), 15);
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 36);
        assert_eq!(s.output_len(), 40);
        assert!(s.target[72..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_split() {
        let mut inst = instance(30, 5.0);
        for p in &mut inst.points {
            p.y = 5.0;
        }
        assert!(matches!(
            split_distance_based(&inst, 0.5, Variant::Xy, 30),
            Err(CoreError::DegenerateSplit { index: 0, .. })
        ));
    }

    #[test]
    fn feature_selection() {
        let p = [TrajectoryPoint {
            t: 0.0,
            x: 1.0,
            y: 2.0,
            o: 15.0,
            d: 20.0,
        }];
        assert_eq!(select_features(&p, Variant::Xyd), vec![1.0, 2.0, 20.0]);
        assert_eq!(select_features(&p, Variant::Xyod), vec![1.0, 2.0, 15.0, 20.0]);
        assert_eq!(select_features(&p, Variant::Xyo), vec![1.0, 2.0, 15.0]);
    }

    #[test]
    fn normalization_midpoint_and_constant() {
        let mut s = window_time_based(&instance(30, 6.0), 1.0, 1.0, 1, Variant::Xyod).unwrap();
        s.truncate(1);
        let n = NormalizationParams::fit(s.iter(), Variant::Xyod).unwrap();
        // y spans [0, 6 * 19/29]; orientation is constant
        let ymax = 6.0 * 19.0 / 29.0;
        assert!((n.apply(1, ymax / 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(n.apply(2, 5.0).unwrap(), 0.5);
        assert_eq!(n.apply(3, NO_VEHICLE).unwrap(), 1.0);
        assert_eq!(n.apply(0, -100.0).unwrap(), 0.0);
    }

    #[test]
    fn unfitted_params_are_a_state_error() {
        let n = NormalizationParams::default();
        assert!(matches!(n.apply(0, 1.0), Err(CoreError::State(_))));
    }

    #[test]
    fn splits_for_one_hundred() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i:03}")).collect();
        let s = make_splits(&ids, 3, 8).unwrap();
        assert_eq!(s.test.len(), 20);
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10; 8]);
        assert_eq!(s, make_splits(&ids, 3, 8).unwrap());
        assert_ne!(s, make_splits(&ids, 4, 8).unwrap());
    }

    #[test]
    fn too_few_instances() {
        let ids: Vec<String> = (0..9).map(|i| i.to_string()).collect();
        assert!(matches!(make_splits(&ids, 0, 8), Err(CoreError::Split(_))));
    }

    #[test]
    fn data_type_names_round_trip() {
        for dt in DataType::ALL {
            assert_eq!(dt.name().parse::<DataType>().unwrap(), dt);
            assert_eq!(serde_json::to_string(&dt).unwrap(), format!("\"{}\"", dt.name()));
        }
    }
}
