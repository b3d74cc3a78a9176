//! One function per subcommand. Every command works inside an experiment
//! directory described by its manifest and skips work whose outputs the
//! manifest already records, unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use adgen_core::catalog::{ClickRecord, PairLabel, PairSample};
use adgen_core::experiment::{rm_ablation, ExperimentManifest, World, WorldConfig};
use adgen_core::numerics::{load_checkpoint, save_checkpoint};
use adgen_core::policy::{PolicyParams, PretrainReport};
use adgen_core::prefopt::{PolicyScore, Strategy};
use adgen_core::reward::{pair_accuracy, RewardConfig, RewardParams, RmExample};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::{ablation_cells, build_report};
use crate::store::{
    json_bytes, load_config, load_manifest, read_json, read_jsonl, read_text, write_atomic, write_csv, write_json,
    write_jsonl, MANIFEST_FILE,
};

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct CommonOptions {
    pub config: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Wrote { dir: PathBuf, artifacts: Vec<String> },
    UpToDate { dir: PathBuf },
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Wrote { dir, artifacts } => {
                write!(f, "wrote {} in {}", artifacts.join(", "), dir.display())
            }
            Outcome::UpToDate { dir } => write!(f, "{} is up to date", dir.display()),
        }
    }
}

struct Experiment {
    dir: PathBuf,
    manifest: ExperimentManifest,
}

impl Experiment {
    fn path(&self, name: &str) -> CliResult<PathBuf> {
        self.manifest
            .artifacts
            .get(name)
            .map(|rel| self.dir.join(rel))
            .ok_or_else(|| CliError::Missing(format!("artifact `{name}` is not recorded in the manifest")))
    }

    fn has_all(&self, names: &[String]) -> bool {
        names.iter().all(|n| self.path(n).is_ok_and(|p| p.is_file()))
    }

    fn write_artifact(&mut self, name: &str, file: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.dir.join(file), bytes)?;
        self.manifest.artifacts.insert(name.to_string(), file.to_string());
        Ok(())
    }

    fn save(&self) -> CliResult<()> {
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }

    fn world(&self) -> CliResult<World> {
        Ok(World::from_manifest(&self.manifest)?)
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Locates the manifest, checks flags against it and, when `--out` names
/// another directory, copies the recorded artifacts there first.
fn open_experiment(opts: &CommonOptions) -> CliResult<Experiment> {
    let manifest_path = match (&opts.manifest, &opts.out) {
        (Some(m), _) => m.clone(),
        (None, Some(out)) => out.join(MANIFEST_FILE),
        (None, None) => PathBuf::from(MANIFEST_FILE),
    };
    let src_dir = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    if !manifest_path.is_file() {
        return Err(CliError::Missing(format!(
            "no manifest at {}; run gen-data first",
            manifest_path.display()
        )));
    }
    let manifest = load_manifest(&manifest_path)?;
    if let Some(seed) = opts.seed.filter(|&s| s != manifest.world_seed) {
        return Err(CliError::Config(format!(
            "--seed {seed} disagrees with the manifest's world seed {}",
            manifest.world_seed
        )));
    }
    if let Some(path) = &opts.config {
        if load_config(path)? != manifest.config {
            return Err(CliError::Config(format!(
                "{} differs from the manifest's configuration; regenerate with gen-data",
                path.display()
            )));
        }
    }
    let dir = opts.out.clone().unwrap_or_else(|| src_dir.clone());
    let exp = Experiment { dir, manifest };
    if !same_dir(&src_dir, &exp.dir) {
        for rel in exp.manifest.artifacts.values() {
            let (from, to) = (src_dir.join(rel), exp.dir.join(rel));
            write_atomic(&to, &fs::read(&from).map_err(|e| CliError::io(&from, e))?)?;
        }
        exp.save()?;
    }
    Ok(exp)
}

const DATA_ARTIFACTS: [(&str, &str); 4] = [
    ("catalog", "catalog.json"),
    ("clicks", "clicks.jsonl"),
    ("pairs_train", "pairs_train.jsonl"),
    ("pairs_test", "pairs_test.jsonl"),
];

/// Generates the catalog, click logs and filtered pairs of a fresh world.
pub fn gen_data(opts: &CommonOptions, products: Option<usize>, exposures_per_image: Option<u64>) -> CliResult<Outcome> {
    let mut config = match (&opts.manifest, &opts.config) {
        (Some(_), Some(_)) => return Err(CliError::Config("pass either --manifest or --config, not both".into())),
        (Some(m), None) => load_manifest(m)?.config,
        (None, Some(c)) => load_config(c)?,
        (None, None) => WorldConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(n) = products {
        config.products = n;
    }
    if let Some(n) = exposures_per_image {
        config.clicks.mean_exposures = n;
    }
    config.validate()?;
    let dir = opts.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let manifest_path = dir.join(MANIFEST_FILE);
    if !opts.force && manifest_path.is_file() {
        let existing = Experiment {
            dir: dir.clone(),
            manifest: load_manifest(&manifest_path)?,
        };
        if existing.manifest.config != config {
            return Err(CliError::Config(format!(
                "{} holds a different experiment; pass --force to replace it",
                dir.display()
            )));
        }
        let names: Vec<String> = DATA_ARTIFACTS.iter().map(|(n, _)| n.to_string()).collect();
        if existing.has_all(&names) {
            return Ok(Outcome::UpToDate { dir });
        }
    }

    let world = World::build(&config)?;
    let records = world.click_records()?;
    let (train, test) = world.pairs(&records)?;
    log::info!(
        "{} click records, {} training pairs, {} held-out pairs",
        records.len(),
        train.len(),
        test.len()
    );
    let mut exp = Experiment {
        dir: dir.clone(),
        manifest: ExperimentManifest::new(&config, &world.oracle),
    };
    exp.write_artifact("catalog", DATA_ARTIFACTS[0].1, &json_bytes(&world.catalog)?)?;
    write_jsonl(&dir.join(DATA_ARTIFACTS[1].1), &records)?;
    exp.manifest.artifacts.insert("clicks".into(), DATA_ARTIFACTS[1].1.into());
    for (name, file, items) in [("pairs_train", DATA_ARTIFACTS[2].1, &train), ("pairs_test", DATA_ARTIFACTS[3].1, &test)] {
        write_jsonl(&dir.join(file), items)?;
        exp.manifest.artifacts.insert(name.into(), file.into());
    }
    exp.save()?;
    Ok(Outcome::Wrote {
        dir,
        artifacts: DATA_ARTIFACTS.iter().map(|(_, f)| f.to_string()).collect(),
    })
}

fn load_pairs(exp: &Experiment, name: &str) -> CliResult<Vec<PairSample>> {
    read_jsonl(&exp.path(name)?)
}

fn reward_examples(exp: &Experiment, world: &World, name: &str) -> CliResult<Vec<RmExample>> {
    let pairs = load_pairs(exp, name)?;
    if pairs.is_empty() {
        return Err(CliError::Config(format!("`{name}` holds no pairs; enlarge the world")));
    }
    Ok(world.rm_examples(&pairs)?)
}

fn load_reward(exp: &Experiment, config: &RewardConfig) -> CliResult<RewardParams> {
    let mut params = RewardParams::init(config.clone(), 0);
    load_checkpoint(&mut params, &read_text(&exp.path("reward")?)?)?;
    Ok(params)
}

fn load_policy(exp: &Experiment, world: &World, name: &str) -> CliResult<PolicyParams> {
    let mut params = world.initial_policy();
    load_checkpoint(&mut params, &read_text(&exp.path(name)?)?)?;
    Ok(params)
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn train_rm(opts: &CommonOptions) -> CliResult<Outcome> {
    let mut exp = open_experiment(opts)?;
    if !opts.force && exp.has_all(&owned(&["reward", "rm_report"])) {
        return Ok(Outcome::UpToDate { dir: exp.dir });
    }
    let world = exp.world()?;
    let train = reward_examples(&exp, &world, "pairs_train")?;
    let test = reward_examples(&exp, &world, "pairs_test")?;
    let (reward, report) = world.train_reward(&train, &test)?;
    if let Some(last) = report.last() {
        log::info!("held-out pair accuracy {:.4}", last.pair_accuracy);
    }
    exp.write_artifact("reward", "reward.json", save_checkpoint(&reward)?.as_bytes())?;
    write_csv(&exp.dir.join("rm_report.csv"), &report)?;
    exp.manifest.artifacts.insert("rm_report".into(), "rm_report.csv".into());
    exp.save()?;
    Ok(Outcome::Wrote {
        dir: exp.dir,
        artifacts: owned(&["reward.json", "rm_report.csv"]),
    })
}

/// Held-out evaluation of a reward checkpoint against a zero-head baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmEvaluation {
    pub seed: u64,
    pub test_pairs: usize,
    pub pair_accuracy: f64,
    /// Recount of correct predictions, pair by pair.
    pub recounted_pair_accuracy: f64,
    pub zero_head_pair_accuracy: f64,
    /// Standard deviation of a fair-coin accuracy over the test pairs.
    pub chance_sigma: f64,
    pub zero_head_within_3_sigma: bool,
    pub beats_zero_head: bool,
}

fn recount_accuracy(reward: &RewardParams, examples: &[RmExample]) -> CliResult<f64> {
    let mut hits = 0usize;
    for ex in examples {
        let out = reward.compare_pair(&ex.left_image, &ex.right_image, &ex.prompt_embedding)?;
        let left_wins = out.p[0] >= out.p[1];
        if left_wins == (ex.label()? == PairLabel::LeftHigher) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub fn eval_rm(opts: &CommonOptions, ablation: bool) -> CliResult<Outcome> {
    let mut exp = open_experiment(opts)?;
    let mut outputs = owned(&["rm_eval"]);
    if ablation {
        outputs.push("rm_ablation".into());
    }
    if !opts.force && exp.has_all(&outputs) {
        return Ok(Outcome::UpToDate { dir: exp.dir });
    }
    let world = exp.world()?;
    let reward = load_reward(&exp, &world.config.reward_model)?;
    let test = reward_examples(&exp, &world, "pairs_test")?;
    let accuracy = pair_accuracy(&reward, &test)?;
    let recounted = recount_accuracy(&reward, &test)?;
    if accuracy != recounted {
        return Err(CliError::Invariant(format!(
            "pair accuracy {accuracy} disagrees with its recount {recounted}"
        )));
    }
    let zero = RewardParams::init(
        RewardConfig {
            zero_heads: true,
            ..world.config.reward_model.clone()
        },
        0,
    );
    let zero_accuracy = pair_accuracy(&zero, &test)?;
    let sigma = 0.5 / (test.len() as f64).sqrt();
    let evaluation = RmEvaluation {
        seed: world.config.seed,
        test_pairs: test.len(),
        pair_accuracy: accuracy,
        recounted_pair_accuracy: recounted,
        zero_head_pair_accuracy: zero_accuracy,
        chance_sigma: sigma,
        zero_head_within_3_sigma: (zero_accuracy - 0.5).abs() <= 3.0 * sigma,
        beats_zero_head: accuracy > zero_accuracy,
    };
    exp.write_artifact("rm_eval", "rm_eval.json", &json_bytes(&evaluation)?)?;
    let mut written = owned(&["rm_eval.json"]);
    if ablation {
        let rows = rm_ablation(&world.config, &ablation_cells(&world.config))?;
        write_csv(&exp.dir.join("rm_ablation.csv"), &rows)?;
        exp.manifest.artifacts.insert("rm_ablation".into(), "rm_ablation.csv".into());
        written.push("rm_ablation.csv".into());
    }
    exp.save()?;
    Ok(Outcome::Wrote {
        dir: exp.dir,
        artifacts: written,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub annotator_threshold: f64,
    pub target_match_rate: f64,
    pub untrained: PolicyScore,
    pub pretrained: PolicyScore,
    pub report: PretrainReport,
}

fn is_optimization_artifact(name: &str) -> bool {
    name.starts_with("trajectory_") || (name.starts_with("policy_") && name != "policy_pretrained")
}

/// Pre-trains the policy, calibrates the annotator threshold on it and
/// records the threshold in the manifest.
pub fn pretrain_policy(opts: &CommonOptions) -> CliResult<Outcome> {
    let mut exp = open_experiment(opts)?;
    if !opts.force && exp.has_all(&owned(&["policy_pretrained", "pretrain_report"])) {
        return Ok(Outcome::UpToDate { dir: exp.dir });
    }
    let mut world = exp.world()?;
    let untrained = world.initial_policy();
    let (policy, report) = world.pretrain_policy(untrained.clone())?;
    let tau = world.calibrate(&policy)?;
    let summary = PretrainSummary {
        annotator_threshold: tau,
        target_match_rate: world.config.target_match_rate,
        untrained: world.score(&untrained)?,
        pretrained: world.score(&policy)?,
        report,
    };
    log::info!(
        "annotator threshold {tau:.4}; pre-trained CTR {:.5}, match rate {:.3}",
        summary.pretrained.mean_oracle_ctr,
        summary.pretrained.match_rate
    );
    exp.manifest.oracle.annotator_threshold = tau;
    exp.manifest.artifacts.retain(|name, _| !is_optimization_artifact(name));
    exp.write_artifact("policy_pretrained", "policy_pretrained.json", save_checkpoint(&policy)?.as_bytes())?;
    exp.write_artifact("pretrain_report", "pretrain.json", &json_bytes(&summary)?)?;
    exp.save()?;
    Ok(Outcome::Wrote {
        dir: exp.dir,
        artifacts: owned(&["policy_pretrained.json", "pretrain.json"]),
    })
}

/// Runs preference optimization for each strategy (all four when empty).
pub fn optimize(opts: &CommonOptions, strategies: &[Strategy]) -> CliResult<Outcome> {
    let mut exp = open_experiment(opts)?;
    let strategies = if strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        strategies.to_vec()
    };
    let pending: Vec<Strategy> = strategies
        .into_iter()
        .filter(|s| {
            opts.force || !exp.has_all(&[format!("trajectory_{}", s.name()), format!("policy_{}", s.name())])
        })
        .collect();
    if pending.is_empty() {
        return Ok(Outcome::UpToDate { dir: exp.dir });
    }
    let world = exp.world()?;
    let reward = load_reward(&exp, &world.config.reward_model)?;
    let start = load_policy(&exp, &world, "policy_pretrained")?;
    let mut written = Vec::new();
    for strategy in pending {
        log::info!("optimizing with {}", strategy.name());
        let (policy, rows) = world.optimize(start.clone(), &reward, strategy)?;
        let (csv_file, ckpt_file) = (
            format!("trajectory_{}.csv", strategy.name()),
            format!("policy_{}.json", strategy.name()),
        );
        write_csv(&exp.dir.join(&csv_file), &rows)?;
        exp.manifest
            .artifacts
            .insert(format!("trajectory_{}", strategy.name()), csv_file.clone());
        exp.write_artifact(&format!("policy_{}", strategy.name()), &ckpt_file, save_checkpoint(&policy)?.as_bytes())?;
        written.extend([csv_file, ckpt_file]);
    }
    exp.save()?;
    Ok(Outcome::Wrote {
        dir: exp.dir,
        artifacts: written,
    })
}

/// Seeds used by `report` when none are given: five consecutive seeds
/// starting at the manifest's world seed.
pub fn default_report_seeds(world_seed: u64) -> Vec<u64> {
    (0..5).map(|i| world_seed + i).collect()
}

/// Multi-seed study written under `report/`.
pub fn report(opts: &CommonOptions, seeds: Option<Vec<u64>>) -> CliResult<Outcome> {
    let mut exp = open_experiment(opts)?;
    let seeds = seeds.unwrap_or_else(|| default_report_seeds(exp.manifest.world_seed));
    if seeds.is_empty() {
        return Err(CliError::Config("report needs at least one seed".into()));
    }
    let names = owned(&["report_summary", "report_rm", "report_trajectories"]);
    if !opts.force && exp.has_all(&names) {
        let previous: crate::report::Summary = read_json(&exp.path("report_summary")?)?;
        if previous.seeds == seeds {
            return Ok(Outcome::UpToDate { dir: exp.dir });
        }
    }
    let report = build_report(&exp.manifest.config, &seeds)?;
    exp.write_artifact("report_summary", "report/summary.json", &json_bytes(&report.summary)?)?;
    write_csv(&exp.dir.join("report/rm_ablation.csv"), &report.rm_rows)?;
    write_csv(&exp.dir.join("report/trajectories.csv"), &report.trajectory_records())?;
    exp.manifest
        .artifacts
        .insert("report_rm".into(), "report/rm_ablation.csv".into());
    exp.manifest
        .artifacts
        .insert("report_trajectories".into(), "report/trajectories.csv".into());
    exp.save()?;
    Ok(Outcome::Wrote {
        dir: exp.dir,
        artifacts: owned(&["report/summary.json", "report/rm_ablation.csv", "report/trajectories.csv"]),
    })
}

/// Reads the click log of an experiment directory.
pub fn read_click_log(dir: &Path) -> CliResult<Vec<ClickRecord>> {
    let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
    let exp = Experiment {
        dir: dir.to_path_buf(),
        manifest,
    };
    read_jsonl(&exp.path("clicks")?)
}
