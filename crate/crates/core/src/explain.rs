//! Shapley attribution of the contextual variables to per-instance error.
//!
//! `v(S)` is the instance's RMSE in metres, averaged over a background set,
//! with the context fields outside `S` taken from each background sample.
//! A positive `Φ` means the feature's actual value raises the error.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crosspath_numkit::Tensor;

use crate::error::{CoreError, Result};
use crate::model::{train, Batch, ModelArtifact, ModelConfig, ModelKind, Network};
use crate::par;
use crate::schema::{describe_group, CONTEXT_GROUPS};
use crate::seed::TrainSeeds;
use crate::windowing::{NormalizationParams, NormalizedSample};

/// Largest player count accepted by exact enumeration.
pub const MAX_PLAYERS: usize = 12;
pub const DEFAULT_BACKGROUND: usize = 100;

/// Exact Shapley values from a table of `v` indexed by subset bitmask.
pub fn shapley_from_table(n: usize, table: &[f64]) -> Result<Vec<f64>> {
    if n > MAX_PLAYERS {
        return Err(CoreError::Size(format!("{n} players exceed the enumeration limit of {MAX_PLAYERS}")));
    }
    if table.len() != 1 << n {
        return Err(CoreError::Size(format!("value table has {} entries, expected {}", table.len(), 1usize << n)));
    }
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for s in 0..table.len() {
            if s & bit == 0 {
                *p += weight[s.count_ones() as usize] * (table[s | bit] - table[s]);
            }
        }
    }
    Ok(phi)
}

/// Exact Shapley values of the game `v`, evaluating each subset once.
pub fn shapley_exact<F>(n: usize, mut v: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<f64>,
{
    if n > MAX_PLAYERS {
        return Err(CoreError::Size(format!("{n} players exceed the enumeration limit of {MAX_PLAYERS}")));
    }
    let table = (0..1usize << n).map(&mut v).collect::<Result<Vec<_>>>()?;
    shapley_from_table(n, &table)
}

/// What counts as one player.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// The six contextual variables (road type as one player).
    #[default]
    Variables,
    /// Each non-padding encoded context dimension separately.
    Encoded,
}

impl Attribution {
    pub fn groups(self) -> Vec<(String, Vec<usize>)> {
        match self {
            Attribution::Variables => CONTEXT_GROUPS
                .iter()
                .map(|(name, dims)| (name.to_string(), dims.to_vec()))
                .collect(),
            Attribution::Encoded => {
                const NAMES: [&str; 8] = [
                    "one_way",
                    "two_way",
                    "two_way_median",
                    "speed_limit",
                    "lane_width",
                    "arrival_rate",
                    "snow",
                    "night",
                ];
                NAMES.iter().enumerate().map(|(i, n)| (n.to_string(), vec![i])).collect()
            }
        }
    }

    fn describe(self, group: usize, encoded: &[f64]) -> String {
        match self {
            Attribution::Variables => describe_group(group, encoded),
            Attribution::Encoded => format!("{}", encoded[group]),
        }
    }
}

/// Per-row `(x, y)` predictions in metres for a batch of context vectors.
pub trait ContextPredictor {
    fn predict(&self, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

impl<F> ContextPredictor for F
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    fn predict(&self, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self(contexts)
    }
}

/// A trained aux network with one instance's sequence already encoded, so
/// only the context head runs per evaluation.
pub struct EncodedInstance<'a> {
    net: &'a Network,
    norm: &'a NormalizationParams,
    h_last: Vec<f64>,
}

impl<'a> EncodedInstance<'a> {
    pub fn new(net: &'a Network, norm: &'a NormalizationParams, sample: &NormalizedSample) -> Result<Self> {
        if net.config.kind != ModelKind::Aux {
            return Err(CoreError::Config("attribution needs an aux network".into()));
        }
        let batch = Batch::from_samples(&[sample], net.config.input_features)?;
        let h = net.encode(&batch)?;
        Ok(Self {
            net,
            norm,
            h_last: h.row(0).to_vec(),
        })
    }
}

impl ContextPredictor for EncodedInstance<'_> {
    fn predict(&self, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let rows = contexts.len();
        let hs = self.h_last.len();
        let h = Tensor::new(vec![rows, hs], self.h_last.repeat(rows))?;
        let c = Tensor::from_rows(contexts)?;
        let out = self.net.head(&h, &c)?;
        (0..rows).map(|r| self.norm.denormalize_xy(out.row(r))).collect()
    }
}

/// Root mean squared error over the valid entries of one prediction.
pub fn instance_rmse(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let (mut sq, mut n) = (0.0, 0.0);
    for ((p, t), w) in pred.iter().zip(target).zip(mask) {
        sq += w * (p - t) * (p - t);
        n += w;
    }
    if n <= 0.0 {
        return Err(CoreError::State("instance has no valid target entries".into()));
    }
    Ok((sq / n).sqrt())
}

/// Error of one instance as a function of which context groups it keeps.
pub struct ValueFunction<'b, P> {
    pub predictor: P,
    pub context: Vec<f64>,
    /// Ground truth in metres.
    pub target: Vec<f64>,
    pub mask: Vec<f64>,
    pub background: &'b [Vec<f64>],
    pub groups: Vec<Vec<usize>>,
}

impl<'b, P: ContextPredictor> ValueFunction<'b, P> {
    pub fn new(
        predictor: P,
        context: Vec<f64>,
        target: Vec<f64>,
        mask: Vec<f64>,
        background: &'b [Vec<f64>],
        groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if background.is_empty() {
            return Err(CoreError::Config("background set is empty".into()));
        }
        if groups.len() > MAX_PLAYERS {
            return Err(CoreError::Size(format!("{} players exceed the enumeration limit", groups.len())));
        }
        let width = context.len();
        if background.iter().any(|b| b.len() != width) || groups.iter().flatten().any(|&d| d >= width) {
            return Err(CoreError::Config("background and groups must match the context width".into()));
        }
        Ok(Self {
            predictor,
            context,
            target,
            mask,
            background,
            groups,
        })
    }

    pub fn players(&self) -> usize {
        self.groups.len()
    }

    /// Mean RMSE over the background with groups outside `subset` replaced.
    pub fn value(&self, subset: usize) -> Result<f64> {
        let contexts: Vec<Vec<f64>> = self
            .background
            .iter()
            .map(|b| {
                let mut c = self.context.clone();
                for (g, dims) in self.groups.iter().enumerate() {
                    if subset & (1 << g) == 0 {
                        for &d in dims {
                            c[d] = b[d];
                        }
                    }
                }
                c
            })
            .collect();
        let preds = self.predictor.predict(&contexts)?;
        let mut total = 0.0;
        for p in &preds {
            total += instance_rmse(p, &self.target, &self.mask)?;
        }
        Ok(total / preds.len() as f64)
    }

    pub fn table(&self) -> Result<Vec<f64>> {
        (0..1usize << self.players()).map(|s| self.value(s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: String,
    pub start_step: usize,
    pub features: Vec<String>,
    /// Human-readable value of each feature for this instance.
    pub feature_values: Vec<String>,
    pub phi: Vec<f64>,
    pub v_full: f64,
    pub v_empty: f64,
}

impl Explanation {
    pub fn efficiency_gap(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - (self.v_full - self.v_empty)).abs()
    }

    pub fn phi_of(&self, feature: &str) -> Option<f64> {
        self.features.iter().position(|f| f == feature).map(|i| self.phi[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub background_size: usize,
    pub seed: u64,
    pub attribution: Attribution,
    pub jobs: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            background_size: DEFAULT_BACKGROUND,
            seed: 0,
            attribution: Attribution::Variables,
            jobs: 0,
        }
    }
}

/// Seeded subsample of context vectors (all of them when fewer exist).
pub fn draw_background(pool: &[NormalizedSample], size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pool.len(), size.min(pool.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].context.clone()).collect()
}

/// Explanation of one normalized instance under a trained aux model.
pub fn explain_instance(
    net: &Network,
    norm: &NormalizationParams,
    sample: &NormalizedSample,
    id: (&str, usize),
    background: &[Vec<f64>],
    attribution: Attribution,
) -> Result<Explanation> {
    let groups = attribution.groups();
    let vf = ValueFunction::new(
        EncodedInstance::new(net, norm, sample)?,
        sample.context.clone(),
        sample.raw_target.clone(),
        sample.mask.clone(),
        background,
        groups.iter().map(|(_, d)| d.clone()).collect(),
    )?;
    let table = vf.table()?;
    let phi = shapley_from_table(vf.players(), &table)?;
    Ok(Explanation {
        instance_id: id.0.to_string(),
        start_step: id.1,
        features: groups.iter().map(|(n, _)| n.clone()).collect(),
        feature_values: (0..groups.len()).map(|g| attribution.describe(g, &sample.context)).collect(),
        phi,
        v_full: table[table.len() - 1],
        v_empty: table[0],
    })
}

/// Explain every instance against a seeded background drawn from
/// `background_pool` (normalized with the artifact's parameters).
pub fn explain_corpus(
    artifact: &ModelArtifact,
    instances: &[(String, usize, NormalizedSample)],
    background_pool: &[NormalizedSample],
    cfg: &ExplainConfig,
) -> Result<Vec<Explanation>> {
    let background = draw_background(background_pool, cfg.background_size, cfg.seed);
    if background.is_empty() {
        return Err(CoreError::Config("background set is empty".into()));
    }
    par::try_map_indexed(instances.len(), cfg.jobs, |i| {
        let (id, start, s) = &instances[i];
        explain_instance(
            &artifact.network,
            &artifact.normalization,
            s,
            (id, *start),
            &background,
            cfg.attribution,
        )
    })
}

/// Long-format summary for beeswarm plots.
pub fn summary_csv(explanations: &[Explanation]) -> String {
    let mut s = String::from("instance_id,start_step,feature,feature_value,phi\n");
    for e in explanations {
        for ((f, v), p) in e.features.iter().zip(&e.feature_values).zip(&e.phi) {
            s.push_str(&format!("{},{},{},{},{}\n", e.instance_id, e.start_step, f, v, p));
        }
    }
    s
}

/// Mean `Φ` of `feature` over explanations whose value equals `value`.
pub fn mean_phi_where(explanations: &[Explanation], feature: &str, value: &str) -> Option<f64> {
    let picked: Vec<f64> = explanations
        .iter()
        .filter_map(|e| {
            let i = e.features.iter().position(|f| f == feature)?;
            (e.feature_values[i] == value).then(|| e.phi[i])
        })
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

fn keep_only(context: &[f64], groups: &[Vec<usize>], subset: usize) -> Vec<f64> {
    let mut c = context.to_vec();
    for (g, dims) in groups.iter().enumerate() {
        if subset & (1 << g) == 0 {
            for &d in dims {
                c[d] = 0.0;
            }
        }
    }
    c
}

/// The literal definition: one network per subset, trained with the
/// excluded context fields zeroed. Returns `table[instance][subset]`.
/// Costs `2^players` trainings, so meant for tiny configurations.
pub fn retrain_tables(
    config: &ModelConfig,
    train_set: &[NormalizedSample],
    norm: &NormalizationParams,
    seeds: TrainSeeds,
    groups: &[Vec<usize>],
    instances: &[NormalizedSample],
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    if groups.len() > MAX_PLAYERS {
        return Err(CoreError::Size(format!("{} players exceed the enumeration limit", groups.len())));
    }
    let per_subset = par::try_map_indexed(1usize << groups.len(), jobs, |s| {
        let mask = |x: &NormalizedSample| NormalizedSample {
            context: keep_only(&x.context, groups, s),
            ..x.clone()
        };
        let tr: Vec<_> = train_set.iter().map(mask).collect();
        let mut net = Network::build(config, seeds.init)?;
        train(&mut net, &tr, &[], norm, seeds)?;
        let ev: Vec<_> = instances.iter().map(mask).collect();
        let preds = net.predict_normalized(&ev)?;
        preds
            .iter()
            .zip(&ev)
            .map(|(p, x)| instance_rmse(&norm.denormalize_xy(p)?, &x.raw_target, &x.mask))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok((0..instances.len())
        .map(|i| per_subset.iter().map(|col| col[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_guard() {
        assert!(matches!(shapley_exact(13, |_| Ok(0.0)), Err(CoreError::Size(_))));
        assert!(shapley_exact(12, |_| Ok(0.0)).is_ok());
        assert!(matches!(shapley_from_table(3, &[0.0; 4]), Err(CoreError::Size(_))));
    }

    #[test]
    fn unanimity_game_on_two_of_three() {
        let phi = shapley_exact(3, |s| Ok(f64::from(u8::from(s & 0b011 == 0b011)))).unwrap();
        assert_eq!(phi, vec![0.5, 0.5, 0.0]);
    }

    /// Prediction = sum of weighted context entries in every coordinate,
    /// target all zeros: the error is |w·c|.
    fn linear(w: Vec<f64>) -> impl Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        move |cs: &[Vec<f64>]| Ok(cs.iter().map(|c| vec![c.iter().zip(&w).map(|(a, b)| a * b).sum(); 2]).collect())
    }

    #[test]
    fn value_function_on_a_linear_toy() {
        let bg = vec![vec![0.0, 0.0]];
        let vf = ValueFunction::new(
            linear(vec![2.0, 3.0]),
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            &bg,
            vec![vec![0], vec![1]],
        )
        .unwrap();
        assert_eq!(vf.table().unwrap(), vec![0.0, 2.0, 3.0, 5.0]);
        let phi = shapley_from_table(2, &vf.table().unwrap()).unwrap();
        assert_eq!(phi, vec![2.0, 3.0]);
    }

    #[test]
    fn background_of_self_is_constant() {
        let ctx = vec![0.3, 0.7, 1.0];
        let bg = vec![ctx.clone()];
        let vf = ValueFunction::new(
            linear(vec![1.0, -2.0, 0.5]),
            ctx,
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            &bg,
            vec![vec![0], vec![1, 2]],
        )
        .unwrap();
        let t = vf.table().unwrap();
        assert!(t.iter().all(|v| *v == t[0]));
    }

    #[test]
    fn empty_background_rejected() {
        let r = ValueFunction::new(linear(vec![1.0]), vec![0.0], vec![0.0, 0.0], vec![1.0, 1.0], &[], vec![vec![0]]);
        assert!(matches!(r, Err(CoreError::Config(_))));
    }

    #[test]
    fn encoded_groups_are_singletons() {
        let g = Attribution::Encoded.groups();
        assert_eq!(g.len(), 8);
        assert_eq!(Attribution::Variables.groups().len(), 6);
    }

    #[test]
    fn background_draw_is_seeded() {
        let pool: Vec<NormalizedSample> = (0..50)
            .map(|i| NormalizedSample {
                input: vec![],
                input_len: 0,
                context: vec![i as f64],
                target: vec![],
                mask: vec![],
                raw_target: vec![],
            })
            .collect();
        let a = draw_background(&pool, 10, 4);
        assert_eq!(a.len(), 10);
        assert_eq!(a, draw_background(&pool, 10, 4));
        assert_ne!(a, draw_background(&pool, 10, 5));
        assert_eq!(draw_background(&pool, 80, 4).len(), 50);
    }
}
