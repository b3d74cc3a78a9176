//! End-to-end orchestration of one synthetic world: data generation,
//! reward-model datasets, policy pre-training, annotator calibration and
//! preference optimization, plus the manifest that pins all of it down.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    filter_pairs, generate_catalog_with, partition_products, split_by_products, CatalogConfig, ClickRecord,
    ModelKind, PairSample, PairThresholds, Product, PromptBuilder, PromptFields,
};
use crate::dims::{DESCRIPTION_LEN, VOCAB_SIZE};
use crate::numerics::{cosine, softmax, OptimizerConfig};
use crate::oracle::{calibrate_threshold, draw_clicks, OracleConfig, OracleParams};
use crate::policy::{
    pretrain, Description, DescriptionConfig, DescriptionSpace, PolicyConfig, PolicyContext, PolicyParams, PretrainConfig,
    PretrainReport,
};
use crate::prefopt::{
    evaluate_policy, run_optimization, DpoConfig, EpochInputs, EvalSet, PairJudge, PolicyScore, RmJudge, Strategy,
    TrajectoryRow,
};
use crate::renderer::{ProductMask, Renderer, RendererConfig};
use crate::reward::{pair_accuracy, train_rm, RewardConfig, RewardParams, RmEpochRow, RmExample, RmTrainConfig};
use crate::{seeds, Error, Result};

/// Historical creatives: tokens drawn from `softmax(cos(row_v, Sᵀf) / T)`
/// with a per-creative temperature `T` log-uniform in the given range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickLogConfig {
    pub backgrounds_per_product: usize,
    pub mean_exposures: u64,
    pub min_temperature: f64,
    pub max_temperature: f64,
    /// Each creative repeats between 1 and this many proposal draws.
    pub max_motifs: usize,
}

impl Default for ClickLogConfig {
    fn default() -> Self {
        Self {
            backgrounds_per_product: 8,
            mean_exposures: 2000,
            min_temperature: 0.1,
            max_temperature: 2.0,
            max_motifs: DESCRIPTION_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub products: usize,
    pub test_fraction: f64,
    pub catalog: CatalogConfig,
    pub oracle: OracleConfig,
    pub clicks: ClickLogConfig,
    pub renderer: RendererConfig,
    pub descriptions: DescriptionConfig,
    pub train_thresholds: PairThresholds,
    pub test_thresholds: PairThresholds,
    /// Attribute selection for reward-model prompts.
    pub rm_prompt_fields: PromptFields,
    pub reward_model: RewardConfig,
    pub reward_training: RmTrainConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    /// Match rate the annotator threshold is calibrated to on the
    /// pre-trained policy's held-out greedy outputs.
    pub target_match_rate: f64,
    pub prefopt: DpoConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            products: 640,
            test_fraction: 0.2,
            catalog: CatalogConfig {
                noise_scale: 0.3,
                ..CatalogConfig::default()
            },
            oracle: OracleConfig::default(),
            clicks: ClickLogConfig::default(),
            renderer: RendererConfig::default(),
            descriptions: DescriptionConfig {
                rank: 4,
                residual_scale: 0.1,
                normalize_rows: true,
            },
            train_thresholds: PairThresholds::TRAIN,
            test_thresholds: PairThresholds::TEST,
            rm_prompt_fields: PromptFields::default(),
            reward_model: RewardConfig::default(),
            reward_training: RmTrainConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig {
                epochs: 1,
                optimizer: OptimizerConfig::adam(0.001),
                ..PretrainConfig::default()
            },
            target_match_rate: 0.842,
            prefopt: DpoConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.products < 2 {
            return Err(Error::Config("need at least two products".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.clicks.backgrounds_per_product < 2 {
            return Err(Error::Config("need at least two backgrounds per product".into()));
        }
        if !(self.clicks.min_temperature > 0.0 && self.clicks.min_temperature <= self.clicks.max_temperature) {
            return Err(Error::Config("invalid historical temperature range".into()));
        }
        if !(self.target_match_rate > 0.0 && self.target_match_rate <= 1.0) {
            return Err(Error::Config(format!("target match rate {}", self.target_match_rate)));
        }
        self.prefopt.validate()
    }
}

/// Oracle parameters as recorded in a manifest. The style matrix is
/// regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSnapshot {
    pub seed: u64,
    pub compatibility_gain: f64,
    pub annotator_threshold: f64,
    pub category_base_logodds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub world_seed: u64,
    pub config: WorldConfig,
    pub oracle: OracleSnapshot,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentManifest {
    pub fn new(config: &WorldConfig, oracle: &OracleParams) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            world_seed: config.seed,
            config: config.clone(),
            oracle: OracleSnapshot {
                seed: config.seed,
                compatibility_gain: oracle.compatibility_gain,
                annotator_threshold: oracle.annotator_threshold,
                category_base_logodds: oracle.category_base_logodds.clone(),
            },
            artifacts: BTreeMap::new(),
        }
    }
}

/// Everything derived from a world seed before any training.
pub struct World {
    pub config: WorldConfig,
    pub catalog: Vec<Product>,
    pub oracle: OracleParams,
    pub space: DescriptionSpace,
    pub renderer: Renderer,
    /// Builder for policy prompts (all attributes).
    pub policy_prompts: PromptBuilder,
    /// Builder for reward-model prompts (configured attributes).
    pub rm_prompts: PromptBuilder,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    /// Policy context per product id.
    pub contexts: Vec<PolicyContext>,
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let catalog = generate_catalog_with(seed, config.products, &config.catalog);
        let oracle = OracleParams::generate(seed, &config.oracle)?;
        let space = DescriptionSpace::with_config(seed, &config.descriptions)?;
        let renderer = Renderer::new(seed, &config.renderer)?;
        let policy_prompts = PromptBuilder::new(seed, config.catalog.categories);
        let rm_prompts = PromptBuilder::new(seed, config.catalog.categories).with_fields(config.rm_prompt_fields);
        let ids: Vec<u32> = catalog.iter().map(|p| p.id).collect();
        let (train, test) = partition_products(&ids, config.test_fraction, seed);
        let contexts = catalog
            .iter()
            .map(|p| {
                let q = policy_prompts.question_for(ModelKind::Prompt, p.id);
                Ok(PolicyContext {
                    image_feature: p.image_feature.clone(),
                    prompt_embedding: policy_prompts.build(q, p)?.embedding,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            catalog,
            oracle,
            space,
            renderer,
            policy_prompts,
            rm_prompts,
            train_ids: train.into_iter().collect(),
            test_ids: test.into_iter().collect(),
            contexts,
        })
    }

    /// Rebuilds the world recorded in `manifest`, including its annotator
    /// threshold. Fails if the regenerated oracle disagrees with the snapshot.
    pub fn from_manifest(manifest: &ExperimentManifest) -> Result<Self> {
        let mut world = Self::build(&manifest.config)?;
        let snap = &manifest.oracle;
        if snap.seed != manifest.config.seed
            || snap.compatibility_gain != world.oracle.compatibility_gain
            || snap.category_base_logodds != world.oracle.category_base_logodds
        {
            return Err(Error::Evaluation("manifest oracle snapshot does not match its world seed".into()));
        }
        world.oracle = world.oracle.clone().with_threshold(snap.annotator_threshold)?;
        Ok(world)
    }

    pub fn product(&self, id: u32) -> Result<&Product> {
        self.catalog
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("unknown product {id}")))
    }

    fn historical_description(&self, product: &Product, rng: &mut impl Rng) -> Result<Description> {
        let c = &self.config.clicks;
        let t = (c.min_temperature.ln() + rng.random::<f64>() * (c.max_temperature / c.min_temperature).ln()).exp();
        let ideal = self.oracle.ideal_direction(product)?;
        let scores: Vec<f64> = (0..VOCAB_SIZE)
            .map(|v| cosine(self.space.table().row(v), &ideal).unwrap_or(0.0) / t)
            .collect();
        let probs = softmax(&scores)?;
        let draw = |rng: &mut dyn rand::RngCore| -> u32 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            (VOCAB_SIZE - 1) as u32
        };
        let motifs: Vec<u32> = (0..rng.random_range(1..=c.max_motifs.max(1))).map(|_| draw(rng)).collect();
        let tokens: Vec<u32> = (0..DESCRIPTION_LEN)
            .map(|_| motifs[rng.random_range(0..motifs.len())])
            .collect();
        self.space.describe(&tokens)
    }

    /// Click logs for every product, `backgrounds_per_product` creatives
    /// each, exposures uniform around the configured mean.
    pub fn click_records(&self) -> Result<Vec<ClickRecord>> {
        let c = &self.config.clicks;
        let lo = (c.mean_exposures / 25).max(1);
        let hi = (2 * c.mean_exposures).saturating_sub(lo).max(lo);
        let mut out = Vec::with_capacity(self.catalog.len() * c.backgrounds_per_product);
        for product in &self.catalog {
            let mut rng = seeds::rng(seeds::derive_indexed(self.config.seed, "clicks/product", product.id as u64));
            for _ in 0..c.backgrounds_per_product {
                let d = self.historical_description(product, &mut rng)?;
                let exposures = rng.random_range(lo..=hi);
                let ctr = self.oracle.true_ctr(product, &d.embedding)?;
                let clicks = draw_clicks(exposures, ctr, &mut rng)?;
                out.push(ClickRecord::new(product.id, d.tokens, exposures, clicks)?);
            }
        }
        Ok(out)
    }

    /// True CTR of a logged creative under `oracle`.
    pub fn record_ctr(&self, oracle: &OracleParams, record: &ClickRecord) -> Result<f64> {
        let d = self.space.describe(&record.background_tokens)?;
        oracle.true_ctr(self.product(record.product_id)?, &d.embedding)
    }

    /// Filtered, product-disjoint `(train, test)` pairs labeled by `oracle`.
    pub fn pairs_with(&self, records: &[ClickRecord], oracle: &OracleParams) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
        let failure = RefCell::new(None);
        let ctr_of = |r: &ClickRecord| match self.record_ctr(oracle, r) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e.to_string());
                f64::NAN
            }
        };
        let all = filter_pairs(records, self.config.train_thresholds, ctr_of);
        if let Some(msg) = failure.into_inner() {
            return Err(Error::Evaluation(msg));
        }
        let test_ids = self.test_ids.iter().copied().collect();
        split_by_products(&all, self.config.train_thresholds, self.config.test_thresholds, &test_ids)
    }

    pub fn pairs(&self, records: &[ClickRecord]) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
        self.pairs_with(records, &self.oracle)
    }

    pub fn render_seed(&self, product_id: u32) -> u64 {
        seeds::derive_indexed(self.config.seed, "render/product", product_id as u64)
    }

    pub fn render(&self, product: &Product, tokens: &[u32]) -> Result<Vec<f64>> {
        let d = self.space.describe(tokens)?;
        self.renderer
            .render(product, &ProductMask::for_product(product.id), &d.embedding, self.render_seed(product.id))
    }

    /// Reward-model view of pairs, prompts built with `prompts`.
    pub fn rm_examples_with(&self, pairs: &[PairSample], prompts: &PromptBuilder) -> Result<Vec<RmExample>> {
        pairs
            .iter()
            .map(|pair| {
                let product = self.product(pair.product_id)?;
                let q = prompts.question_for(ModelKind::Reward, product.id);
                Ok(RmExample::new(
                    self.render(product, &pair.left.background_tokens)?,
                    self.render(product, &pair.right.background_tokens)?,
                    prompts.build(q, product)?.embedding,
                    pair.label,
                    [pair.true_ctrs.0, pair.true_ctrs.1],
                ))
            })
            .collect()
    }

    pub fn rm_examples(&self, pairs: &[PairSample]) -> Result<Vec<RmExample>> {
        self.rm_examples_with(pairs, &self.rm_prompts)
    }

    pub fn train_reward(&self, train: &[RmExample], test: &[RmExample]) -> Result<(RewardParams, Vec<RmEpochRow>)> {
        let init = RewardParams::init(self.config.reward_model.clone(), seeds::derive(self.config.seed, "reward/params"));
        train_rm(init, train, test, &self.config.reward_training, seeds::derive(self.config.seed, "reward/train"))
    }

    pub fn initial_policy(&self) -> PolicyParams {
        PolicyParams::init(self.config.policy.clone(), seeds::derive(self.config.seed, "policy/params"))
    }

    fn with_contexts(&self, ids: &[u32]) -> Result<Vec<(Product, PolicyContext)>> {
        ids.iter()
            .map(|&id| Ok((self.product(id)?.clone(), self.contexts[id as usize].clone())))
            .collect()
    }

    pub fn pretrain_policy(&self, policy: PolicyParams) -> Result<(PolicyParams, PretrainReport)> {
        pretrain(
            policy,
            &self.with_contexts(&self.train_ids)?,
            &self.oracle,
            &self.space,
            &self.config.pretrain,
            seeds::derive(self.config.seed, "policy/pretrain"),
        )
    }

    fn test_products(&self) -> Result<(Vec<Product>, Vec<PolicyContext>)> {
        Ok(self.with_contexts(&self.test_ids)?.into_iter().unzip())
    }

    /// Compatibilities of the policy's greedy outputs on held-out products.
    pub fn heldout_compatibilities(&self, policy: &PolicyParams) -> Result<Vec<f64>> {
        self.test_ids
            .iter()
            .map(|&id| {
                let d = self.space.describe(&policy.greedy(&self.contexts[id as usize].features())?)?;
                self.oracle.compatibility(self.product(id)?, &d.embedding)
            })
            .collect()
    }

    /// Sets the annotator threshold so `policy` hits the target match rate
    /// on held-out products; returns the threshold.
    pub fn calibrate(&mut self, policy: &PolicyParams) -> Result<f64> {
        let tau = calibrate_threshold(&self.heldout_compatibilities(policy)?, self.config.target_match_rate)?;
        self.oracle = self.oracle.clone().with_threshold(tau)?;
        Ok(tau)
    }

    pub fn score(&self, policy: &PolicyParams) -> Result<PolicyScore> {
        let (products, contexts) = self.test_products()?;
        evaluate_policy(
            policy,
            &EvalSet {
                oracle: &self.oracle,
                space: &self.space,
                products: &products,
                contexts: &contexts,
            },
        )
    }

    pub fn optimize(
        &self,
        policy: PolicyParams,
        reward: &RewardParams,
        strategy: Strategy,
    ) -> Result<(PolicyParams, Vec<TrajectoryRow>)> {
        let judge = RmJudge {
            reward,
            renderer: &self.renderer,
            prompts: &self.rm_prompts,
        };
        self.optimize_with_judge(policy, &judge, strategy)
    }

    /// Preference optimization with an arbitrary pair judge.
    pub fn optimize_with_judge(
        &self,
        policy: PolicyParams,
        judge: &dyn PairJudge,
        strategy: Strategy,
    ) -> Result<(PolicyParams, Vec<TrajectoryRow>)> {
        let inputs = EpochInputs {
            catalog: &self.catalog,
            contexts: &self.contexts,
            train_ids: &self.train_ids,
            prompts: &self.policy_prompts,
            space: &self.space,
            judge,
        };
        let (products, contexts) = self.test_products()?;
        let eval = EvalSet {
            oracle: &self.oracle,
            space: &self.space,
            products: &products,
            contexts: &contexts,
        };
        let config = self.config.prefopt.clone().with_strategy(strategy);
        run_optimization(policy, &inputs, &eval, &config, seeds::derive(self.config.seed, "prefopt"))
    }
}

/// Held-out pair accuracy of one reward-model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmStudyRow {
    pub seed: u64,
    pub point_weight: f64,
    pub attributes: bool,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub pair_accuracy: f64,
    /// Accuracy of the same architecture with zeroed heads.
    pub zero_head_accuracy: f64,
}

/// Trains one reward model per `(point_weight, attributes)` cell.
pub fn rm_ablation(config: &WorldConfig, cells: &[(f64, bool)]) -> Result<Vec<RmStudyRow>> {
    let world = World::build(config)?;
    let records = world.click_records()?;
    let (train_pairs, test_pairs) = world.pairs(&records)?;
    let mut rows = Vec::with_capacity(cells.len());
    for &(point_weight, attributes) in cells {
        let fields = if attributes {
            PromptFields::default()
        } else {
            PromptFields::none()
        };
        let prompts = PromptBuilder::new(config.seed, config.catalog.categories).with_fields(fields);
        let train = world.rm_examples_with(&train_pairs, &prompts)?;
        let test = world.rm_examples_with(&test_pairs, &prompts)?;
        let mut cell_world_cfg = config.reward_training.clone();
        cell_world_cfg.loss.point_weight = point_weight;
        let init = RewardParams::init(config.reward_model.clone(), seeds::derive(config.seed, "reward/params"));
        let zero = RewardParams::init(
            RewardConfig {
                zero_heads: true,
                ..config.reward_model.clone()
            },
            seeds::derive(config.seed, "reward/params"),
        );
        let (_, report) = train_rm(init, &train, &test, &cell_world_cfg, seeds::derive(config.seed, "reward/train"))?;
        rows.push(RmStudyRow {
            seed: config.seed,
            point_weight,
            attributes,
            train_pairs: train.len(),
            test_pairs: test.len(),
            pair_accuracy: report.last().expect("report has a row per epoch").pair_accuracy,
            zero_head_accuracy: pair_accuracy(&zero, &test)?,
        });
    }
    Ok(rows)
}

/// Trajectories of every strategy from a shared pre-trained policy and
/// reward model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationStudy {
    pub seed: u64,
    pub annotator_threshold: f64,
    pub reward_accuracy: f64,
    pub untrained_score: PolicyScore,
    pub pretrained_score: PolicyScore,
    pub trajectories: Vec<(Strategy, Vec<TrajectoryRow>)>,
}

impl OptimizationStudy {
    pub fn final_row(&self, strategy: Strategy) -> Option<&TrajectoryRow> {
        self.trajectories
            .iter()
            .find(|(s, _)| *s == strategy)
            .and_then(|(_, rows)| rows.last())
    }
}

pub fn optimization_study(config: &WorldConfig, strategies: &[Strategy]) -> Result<OptimizationStudy> {
    let mut world = World::build(config)?;
    let records = world.click_records()?;
    let (train_pairs, test_pairs) = world.pairs(&records)?;
    let train = world.rm_examples(&train_pairs)?;
    let test = world.rm_examples(&test_pairs)?;
    let (reward, rm_report) = world.train_reward(&train, &test)?;

    let untrained = world.initial_policy();
    let (policy, _) = world.pretrain_policy(untrained.clone())?;
    let tau = world.calibrate(&policy)?;
    let untrained_score = world.score(&untrained)?;
    let pretrained_score = world.score(&policy)?;

    let mut trajectories = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let (_, rows) = world.optimize(policy.clone(), &reward, s)?;
        trajectories.push((s, rows));
    }
    Ok(OptimizationStudy {
        seed: config.seed,
        annotator_threshold: tau,
        reward_accuracy: rm_report.last().expect("report has a row per epoch").pair_accuracy,
        untrained_score,
        pretrained_score,
        trajectories,
    })
}

/// Mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            products: 40,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn record_count_and_determinism() {
        let cfg = WorldConfig {
            products: 512,
            ..WorldConfig::default()
        };
        let world = World::build(&cfg).unwrap();
        let records = world.click_records().unwrap();
        assert_eq!(records.len(), 4096);
        assert_eq!(records, World::build(&cfg).unwrap().click_records().unwrap());
    }

    #[test]
    fn pairs_are_product_disjoint_and_test_pairs_are_strict() {
        let world = World::build(&small()).unwrap();
        let records = world.click_records().unwrap();
        let (train, test) = world.pairs(&records).unwrap();
        assert!(!train.is_empty() && !test.is_empty());
        for p in &test {
            assert!(p.left.exposures >= 1000 && p.right.exposures >= 1000);
            assert!(world.test_ids.contains(&p.product_id));
        }
        for p in &train {
            assert!(world.train_ids.contains(&p.product_id));
        }
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
