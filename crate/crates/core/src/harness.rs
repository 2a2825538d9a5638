//! Grid search with k-fold cross-validation, one-shot test evaluation and
//! the paired aux/vanilla comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{evaluate, train, ModelArtifact, ModelConfig, ModelKind, Network, TrainingHistory};
use crate::par;
use crate::schema::{CrossingInstance, CONTEXT_LEN};
use crate::seed::SeedPlan;
use crate::windowing::{
    make_splits, select, window_corpus, DataType, DatasetSplit, NormalizationParams, NormalizedSample,
    SequenceSample, Variant, WindowingSpec, DEFAULT_FOLDS,
};

/// Candidate values per hyperparameter axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpace {
    pub batch_size: Vec<usize>,
    pub dropout: Vec<f64>,
    pub nodes: Vec<usize>,
    pub lstm_layers: Vec<usize>,
    pub dense_layers: Vec<usize>,
    pub data_types: Vec<DataType>,
    pub variants: Vec<Variant>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            batch_size: vec![32, 64, 128],
            dropout: vec![0.0, 0.2, 0.5],
            nodes: vec![10, 50, 100],
            lstm_layers: vec![1, 2, 3],
            dense_layers: vec![1, 2, 3],
            data_types: DataType::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl GridSpace {
    /// Small slice for continuous integration: two dense depths, batch 32,
    /// single-layer LSTM with 10 nodes, no dropout.
    pub fn ci_slice() -> Self {
        Self {
            batch_size: vec![32],
            dropout: vec![0.0],
            nodes: vec![10],
            lstm_layers: vec![1],
            dense_layers: vec![1, 2],
            data_types: DataType::TIME_BASED.to_vec(),
            variants: vec![Variant::Xyod],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = self.batch_size.is_empty()
            || self.dropout.is_empty()
            || self.nodes.is_empty()
            || self.lstm_layers.is_empty()
            || self.dense_layers.is_empty()
            || self.data_types.is_empty()
            || self.variants.is_empty();
        if empty {
            return Err(CoreError::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    /// The Cartesian product for one model kind, in enumeration order.
    /// Vanilla networks have no dense axis.
    pub fn configs(&self, kind: ModelKind, variant: Variant, output_steps: usize, base: &TrainingSettings) -> Vec<ModelConfig> {
        let dense: &[usize] = match kind {
            ModelKind::Aux => &self.dense_layers,
            ModelKind::Vanilla => &[0],
        };
        let mut out = Vec::new();
        for &batch_size in &self.batch_size {
            for &dropout in &self.dropout {
                for &nodes in &self.nodes {
                    for &lstm_layers in &self.lstm_layers {
                        for &dense_layers in dense {
                            let mut c = match kind {
                                ModelKind::Aux => ModelConfig::aux(variant.n_features(), CONTEXT_LEN, output_steps),
                                ModelKind::Vanilla => ModelConfig::vanilla(variant.n_features(), output_steps),
                            };
                            c.batch_size = batch_size;
                            c.dropout = dropout;
                            c.nodes = nodes;
                            c.lstm_layers = lstm_layers;
                            c.dense_layers = dense_layers;
                            c.epochs = base.epochs;
                            c.learning_rate = base.learning_rate;
                            if kind == ModelKind::Aux {
                                c.secondary_loss_weight = base.secondary_loss_weight;
                            }
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Settings shared by every trained model of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub secondary_loss_weight: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            secondary_loss_weight: crate::model::DEFAULT_SECONDARY_WEIGHT,
        }
    }
}

/// Short stable name of a configuration, used for seeds and file names.
pub fn config_label(c: &ModelConfig) -> String {
    let mut s = format!("{}-l{}", c.kind, c.lstm_layers);
    if c.kind == ModelKind::Aux {
        s.push_str(&format!("-d{}", c.dense_layers));
    }
    s.push_str(&format!("-n{}-dr{}-b{}", c.nodes, c.dropout, c.batch_size));
    s
}

/// Experiment description, loadable from TOML or JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Crossing JSONL; the benchmark corpus when absent.
    pub dataset: Option<PathBuf>,
    pub corpus_seed: u64,
    /// Master seed for splits, initialization, shuffling and dropout.
    pub seed: u64,
    pub grid: GridSpace,
    pub training: TrainingSettings,
    pub stride_steps: usize,
    pub folds: usize,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            corpus_seed: 7,
            seed: 7,
            grid: GridSpace::default(),
            training: TrainingSettings::default(),
            stride_steps: 1,
            folds: DEFAULT_FOLDS,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reduced run: the CI grid slice at 15 epochs.
    pub fn ci(seed: u64) -> Self {
        Self {
            seed,
            grid: GridSpace::ci_slice(),
            training: TrainingSettings {
                epochs: 15,
                ..TrainingSettings::default()
            },
            stride_steps: 15,
            ..Self::default()
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if json {
            serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.stride_steps == 0 || self.training.epochs == 0 {
            return Err(CoreError::Config("stride_steps and epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(CoreError::Config("need at least 2 folds".into()));
        }
        Ok(())
    }
}

/// Windowed samples of one data type with an instance-level split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub data_type: Option<DataType>,
    pub spec: WindowingSpec,
    pub samples: Vec<SequenceSample>,
    pub output_len: usize,
    pub split: DatasetSplit,
}

impl Dataset {
    /// Window `instances` and split their ids. Every data type built from
    /// the same corpus and seed shares the same split.
    pub fn build(instances: &[CrossingInstance], spec: WindowingSpec, split_seed: u64, folds: usize) -> Result<Self> {
        let corpus = window_corpus(instances, &spec)?;
        let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
        let split = make_splits(&ids, split_seed, folds)?;
        Ok(Self {
            data_type: None,
            spec,
            samples: corpus.samples,
            output_len: corpus.output_len,
            split,
        })
    }

    pub fn for_type(instances: &[CrossingInstance], dt: DataType, variant: Variant, stride: usize, split_seed: u64, folds: usize) -> Result<Self> {
        let mut ds = Self::build(instances, dt.spec(variant, stride), split_seed, folds)?;
        ds.data_type = Some(dt);
        Ok(ds)
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn name(&self) -> String {
        let dt = self.data_type.map_or_else(|| "custom".to_string(), |d| d.name().to_string());
        format!("{dt}/{}", self.spec.variant.name())
    }

    fn prepare(&self, train_ids: &std::collections::BTreeSet<&str>, other: &std::collections::BTreeSet<&str>) -> Result<Prepared> {
        let tr = select(&self.samples, train_ids);
        if tr.is_empty() {
            return Err(CoreError::Split(format!("{}: no training samples", self.name())));
        }
        let norm = NormalizationParams::fit(tr.iter().copied(), self.variant())?;
        let train = tr.iter().map(|s| norm.normalize(s)).collect::<Result<Vec<_>>>()?;
        let other = select(&self.samples, other)
            .into_iter()
            .map(|s| norm.normalize(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { norm, train, other })
    }

    /// Fold `k`: normalization fitted on its training part only.
    pub fn fold(&self, k: usize) -> Result<Prepared> {
        self.prepare(&self.split.fold_train(k), &self.split.fold_val(k))
    }

    /// Whole train/validation pool against the held-out test set.
    fn pool_and_test(&self) -> Result<Prepared> {
        self.prepare(&self.split.pool(), &self.split.test_set())
    }

    /// Raw test samples, for inspection after final evaluation.
    pub fn test_samples(&self) -> Vec<&SequenceSample> {
        select(&self.samples, &self.split.test_set())
    }

    pub fn pool_samples(&self) -> Vec<&SequenceSample> {
        select(&self.samples, &self.split.pool())
    }
}

/// Normalized training samples plus a held-out part (validation or test).
#[derive(Clone, Debug)]
pub struct Prepared {
    pub norm: NormalizationParams,
    pub train: Vec<NormalizedSample>,
    pub other: Vec<NormalizedSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub train_rmse: f64,
    pub val_loss: f64,
    pub val_rmse: f64,
    #[serde(skip)]
    pub history: TrainingHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub label: String,
    /// Position in grid enumeration order.
    pub index: usize,
    pub config: ModelConfig,
    pub parameters: usize,
    pub mean_val_loss: f64,
    pub std_val_loss: f64,
    pub mean_val_rmse: f64,
    pub std_val_rmse: f64,
    pub mean_train_loss: f64,
    pub mean_train_rmse: f64,
    pub folds: Vec<FoldResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn run_fold(config: &ModelConfig, fold: usize, data: &Prepared, plan: &SeedPlan) -> Result<FoldResult> {
    let label = config_label(config);
    let seeds = plan.training(&format!("{label}/fold{fold}"));
    let mut net = Network::build(config, seeds.init)?;
    let history = train(&mut net, &data.train, &data.other, &data.norm, seeds).map_err(|e| CoreError::Fold {
        fold,
        source: Box::new(e),
    })?;
    let best = history.best().cloned().ok_or_else(|| CoreError::State("no epochs recorded".into()))?;
    Ok(FoldResult {
        fold,
        best_epoch: history.best_epoch,
        train_loss: best.train_loss,
        train_rmse: best.train_rmse,
        val_loss: best.val_loss.unwrap_or(f64::NAN),
        val_rmse: best.val_rmse.unwrap_or(f64::NAN),
        history,
    })
}

fn summarize(index: usize, config: &ModelConfig, folds: Vec<FoldResult>) -> CvResult {
    let col = |f: fn(&FoldResult) -> f64| folds.iter().map(f).collect::<Vec<_>>();
    let (mean_val_loss, std_val_loss) = mean_std(&col(|f| f.val_loss));
    let (mean_val_rmse, std_val_rmse) = mean_std(&col(|f| f.val_rmse));
    CvResult {
        label: config_label(config),
        index,
        config: config.clone(),
        parameters: config.parameter_count(),
        mean_val_loss,
        std_val_loss,
        mean_val_rmse,
        std_val_rmse,
        mean_train_loss: mean_std(&col(|f| f.train_loss)).0,
        mean_train_rmse: mean_std(&col(|f| f.train_rmse)).0,
        folds,
    }
}

fn prepare_folds(ds: &Dataset, jobs: usize) -> Result<Vec<Prepared>> {
    par::try_map_indexed(ds.split.k(), jobs, |k| ds.fold(k))
}

/// Train one model per fold, each validated on its own fold only.
pub fn cross_validate(config: &ModelConfig, ds: &Dataset, plan: &SeedPlan, jobs: usize) -> Result<CvResult> {
    config.validate()?;
    let folds = prepare_folds(ds, jobs)?;
    let results = par::try_map_indexed(folds.len(), jobs, |k| run_fold(config, k, &folds[k], plan))?;
    Ok(summarize(0, config, results))
}

/// Cross-validated leaderboard for one model kind and dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub kind: ModelKind,
    pub seed: u64,
    /// Sorted best first.
    pub leaderboard: Vec<CvResult>,
    pub test: Option<TestResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub label: String,
    pub test_loss: f64,
    pub test_rmse: f64,
    pub test_samples: usize,
}

impl ExperimentReport {
    pub fn best(&self) -> &CvResult {
        &self.leaderboard[0]
    }

    pub fn leaderboard_csv(&self) -> String {
        let mut s = String::from(
            "rank,label,kind,lstm_layers,dense_layers,nodes,dropout,batch_size,parameters,\
             mean_val_loss,std_val_loss,mean_val_rmse,std_val_rmse,mean_train_loss,mean_train_rmse\n",
        );
        for (r, c) in self.leaderboard.iter().enumerate() {
            let k = &c.config;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r + 1,
                c.label,
                k.kind,
                k.lstm_layers,
                k.dense_layers,
                k.nodes,
                k.dropout,
                k.batch_size,
                c.parameters,
                c.mean_val_loss,
                c.std_val_loss,
                c.mean_val_rmse,
                c.std_val_rmse,
                c.mean_train_loss,
                c.mean_train_rmse
            ));
        }
        s
    }
}

fn rank(results: &mut [CvResult]) {
    results.sort_by(|a, b| {
        a.mean_val_loss
            .total_cmp(&b.mean_val_loss)
            .then(a.parameters.cmp(&b.parameters))
            .then(a.index.cmp(&b.index))
    });
}

/// Cross-validate every configuration of `configs`. Config/fold pairs are
/// independent work units; results merge in enumeration order.
pub fn grid_search_configs(
    configs: &[ModelConfig],
    ds: &Dataset,
    plan: &SeedPlan,
    jobs: usize,
) -> Result<ExperimentReport> {
    let kind = configs
        .first()
        .map(|c| c.kind)
        .ok_or_else(|| CoreError::Config("empty grid".into()))?;
    if configs.iter().any(|c| c.kind != kind) {
        return Err(CoreError::Config("one report covers one model kind".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let folds = prepare_folds(ds, jobs)?;
    let k = folds.len();
    let flat = par::try_map_indexed(configs.len() * k, jobs, |u| run_fold(&configs[u / k], u % k, &folds[u % k], plan))?;
    let mut it = flat.into_iter();
    let mut leaderboard: Vec<CvResult> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| summarize(i, c, it.by_ref().take(k).collect()))
        .collect();
    rank(&mut leaderboard);
    Ok(ExperimentReport {
        dataset: ds.name(),
        kind,
        seed: plan.master,
        leaderboard,
        test: None,
    })
}

pub fn grid_search(
    space: &GridSpace,
    kind: ModelKind,
    ds: &Dataset,
    settings: &TrainingSettings,
    plan: &SeedPlan,
    jobs: usize,
) -> Result<ExperimentReport> {
    space.validate()?;
    let configs = space.configs(kind, ds.variant(), ds.output_len, settings);
    grid_search_configs(&configs, ds, plan, jobs)
}

/// A model retrained on the whole pool and scored once on the test set.
#[derive(Clone, Debug)]
pub struct FinalModel {
    pub artifact: ModelArtifact,
    pub history: TrainingHistory,
    pub test: TestResult,
}

/// Retrain the report's best configuration on the full pool (all epochs,
/// no early selection) and evaluate it on the test set. A report can be
/// evaluated only once.
pub fn final_eval(report: &mut ExperimentReport, ds: &Dataset, plan: &SeedPlan) -> Result<FinalModel> {
    if report.test.is_some() {
        return Err(CoreError::Protocol(format!(
            "{} {}: test set already used for this report",
            report.dataset, report.kind
        )));
    }
    let config = report.best().config.clone();
    let data = ds.pool_and_test()?;
    let (artifact, history) = fit_prepared(&config, ds, &data, plan)?;
    let (test_loss, test_rmse) = evaluate(&artifact.network, &data.other, &data.norm)?;
    let test = TestResult {
        label: config_label(&config),
        test_loss,
        test_rmse,
        test_samples: data.other.len(),
    };
    report.test = Some(test.clone());
    Ok(FinalModel { artifact, history, test })
}

fn fit_prepared(config: &ModelConfig, ds: &Dataset, data: &Prepared, plan: &SeedPlan) -> Result<(ModelArtifact, TrainingHistory)> {
    let label = config_label(config);
    let seeds = plan.training(&format!("{label}/final"));
    let mut net = Network::build(config, seeds.init)?;
    let history = train(&mut net, &data.train, &[], &data.norm, seeds)?;
    let artifact = ModelArtifact {
        network: net,
        normalization: data.norm.clone(),
        windowing: ds.spec,
        provenance: serde_json::json!({
            "dataset": ds.name(),
            "label": label,
            "seed": plan.master,
            "split_seed": ds.split.seed,
            "test_instances": ds.split.test.len(),
        }),
    };
    Ok((artifact, history))
}

/// Train `config` on the whole train/validation pool for all its epochs,
/// leaving the test set untouched.
pub fn train_on_pool(config: &ModelConfig, ds: &Dataset, plan: &SeedPlan) -> Result<(ModelArtifact, TrainingHistory)> {
    config.validate()?;
    let data = ds.prepare(&ds.split.pool(), &std::collections::BTreeSet::new())?;
    fit_prepared(config, ds, &data, plan)
}

/// Relative RMSE reduction of aux over vanilla, in percent.
pub fn improvement_pct(aux_rmse: f64, vanilla_rmse: f64) -> f64 {
    100.0 * (vanilla_rmse - aux_rmse) / vanilla_rmse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub aux_label: String,
    pub vanilla_label: String,
    pub aux_rmse: f64,
    pub vanilla_rmse: f64,
    pub improvement_pct: f64,
}

/// Everything produced by a paired comparison on one dataset.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub row: ComparisonRow,
    pub aux: ExperimentReport,
    pub vanilla: ExperimentReport,
    pub aux_model: FinalModel,
    pub vanilla_model: FinalModel,
}

/// Search both kinds on identical splits and seeds, then score each
/// winner on the test set.
pub fn compare_aux_vanilla(
    ds: &Dataset,
    space: &GridSpace,
    settings: &TrainingSettings,
    plan: &SeedPlan,
    jobs: usize,
) -> Result<Comparison> {
    let mut aux = grid_search(space, ModelKind::Aux, ds, settings, plan, jobs)?;
    let mut vanilla = grid_search(space, ModelKind::Vanilla, ds, settings, plan, jobs)?;
    let aux_model = final_eval(&mut aux, ds, plan)?;
    let vanilla_model = final_eval(&mut vanilla, ds, plan)?;
    let row = ComparisonRow {
        dataset: ds.name(),
        aux_label: aux_model.test.label.clone(),
        vanilla_label: vanilla_model.test.label.clone(),
        aux_rmse: aux_model.test.test_rmse,
        vanilla_rmse: vanilla_model.test.test_rmse,
        improvement_pct: improvement_pct(aux_model.test.test_rmse, vanilla_model.test.test_rmse),
    };
    Ok(Comparison {
        row,
        aux,
        vanilla,
        aux_model,
        vanilla_model,
    })
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("dataset,aux_label,vanilla_label,aux_rmse_m,vanilla_rmse_m,improvement_pct\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dataset, r.aux_label, r.vanilla_label, r.aux_rmse, r.vanilla_rmse, r.improvement_pct
        ));
    }
    s
}
