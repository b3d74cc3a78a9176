//! Multi-seed study: reward-model ablation grid, preference-optimization
//! trajectories per strategy, and the directional checks summarized over
//! seeds.

use adgen_core::experiment::{mean_and_stderr, optimization_study, rm_ablation, OptimizationStudy, RmStudyRow, WorldConfig};
use adgen_core::prefopt::{Strategy, TrajectoryRow};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// A mean over seeds, always carried with the seeds it was taken over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub stderr: f64,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

impl SeedStat {
    pub fn new(seeds: &[u64], values: Vec<f64>) -> Self {
        let (mean, stderr) = mean_and_stderr(&values);
        Self {
            mean,
            stderr,
            seeds: seeds.to_vec(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmCellSummary {
    pub point_weight: f64,
    pub attributes: bool,
    pub pair_accuracy: SeedStat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub final_match_rate: SeedStat,
    pub final_ctr: SeedStat,
    /// Final minus starting mean oracle CTR.
    pub ctr_lift: SeedStat,
}

/// Final match rates of one seed and whether they follow
/// pcpo ≥ each single ablation ≥ dpo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOrdering {
    pub seed: u64,
    pub dpo: f64,
    pub pcpo_no_visual: f64,
    pub pcpo_no_textual: f64,
    pub pcpo: f64,
    pub pcpo_above_dpo: bool,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checks {
    /// Trained reward model at least five points above chance on average.
    pub rm_above_chance: bool,
    pub rm_beats_zero_head: bool,
    pub point_loss_helps: bool,
    pub attributes_help: bool,
    pub dpo_ctr_lift: bool,
    pub pcpo_ctr_lift: bool,
    /// Mean ordering holds and pcpo beats dpo on at least four in five seeds.
    pub match_rate_divergence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub rm_cells: Vec<RmCellSummary>,
    pub rm_zero_head: SeedStat,
    pub annotator_threshold: SeedStat,
    pub pretrained_ctr: SeedStat,
    pub pretrained_match_rate: SeedStat,
    pub strategies: Vec<StrategySummary>,
    pub ordering: Vec<SeedOrdering>,
    pub pcpo_above_dpo_seeds: usize,
    pub checks: Checks,
}

impl Summary {
    pub fn strategy(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }

    pub fn rm_cell(&self, point_weight: f64, attributes: bool) -> Option<&RmCellSummary> {
        self.rm_cells
            .iter()
            .find(|c| c.point_weight == point_weight && c.attributes == attributes)
    }
}

/// One trajectory row tagged with its seed and strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub epoch: usize,
    pub mean_oracle_ctr: f64,
    pub match_rate: f64,
    pub tuples_built: usize,
    pub skipped: usize,
    pub mean_dpo_loss: f64,
    pub mean_pcpo_loss: f64,
}

impl TrajectoryRecord {
    fn new(seed: u64, strategy: Strategy, row: &TrajectoryRow) -> Self {
        Self {
            seed,
            strategy,
            epoch: row.epoch,
            mean_oracle_ctr: row.mean_oracle_ctr,
            match_rate: row.match_rate,
            tuples_built: row.tuples_built,
            skipped: row.skipped,
            mean_dpo_loss: row.mean_dpo_loss,
            mean_pcpo_loss: row.mean_pcpo_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Summary,
    pub rm_rows: Vec<RmStudyRow>,
    pub studies: Vec<OptimizationStudy>,
}

impl Report {
    pub fn trajectory_records(&self) -> Vec<TrajectoryRecord> {
        self.studies
            .iter()
            .flat_map(|study| {
                study.trajectories.iter().flat_map(move |(strategy, rows)| {
                    rows.iter().map(move |row| TrajectoryRecord::new(study.seed, *strategy, row))
                })
            })
            .collect()
    }
}

/// Point-loss weight used for the "on" side of the ablation grid.
pub fn point_loss_on_weight(config: &WorldConfig) -> f64 {
    let w = config.reward_training.loss.point_weight;
    if w > 0.0 {
        w
    } else {
        0.5
    }
}

/// The four reward-model ablation cells: point loss on/off × attributes on/off.
pub fn ablation_cells(config: &WorldConfig) -> Vec<(f64, bool)> {
    let on = point_loss_on_weight(config);
    vec![(on, true), (on, false), (0.0, true), (0.0, false)]
}

pub fn build_report(config: &WorldConfig, seeds: &[u64]) -> CliResult<Report> {
    let cells = ablation_cells(config);
    let mut rm_rows = Vec::new();
    let mut studies = Vec::new();
    for &seed in seeds {
        let seeded = config.clone().with_seed(seed);
        log::info!("seed {seed}: reward-model ablation");
        rm_rows.extend(rm_ablation(&seeded, &cells)?);
        log::info!("seed {seed}: preference optimization");
        studies.push(optimization_study(&seeded, &Strategy::ALL)?);
    }
    let summary = summarize(seeds, &cells, &rm_rows, &studies);
    Ok(Report {
        summary,
        rm_rows,
        studies,
    })
}

/// Per-seed ordering check on final match rates.
pub fn seed_ordering(study: &OptimizationStudy) -> Option<SeedOrdering> {
    let rate = |s| study.final_row(s).map(|r| r.match_rate);
    let (dpo, nv, nt, pcpo) = (
        rate(Strategy::Dpo)?,
        rate(Strategy::PcpoNoVisual)?,
        rate(Strategy::PcpoNoTextual)?,
        rate(Strategy::Pcpo)?,
    );
    Some(SeedOrdering {
        seed: study.seed,
        dpo,
        pcpo_no_visual: nv,
        pcpo_no_textual: nt,
        pcpo,
        pcpo_above_dpo: pcpo > dpo,
        pass: pcpo >= nv && pcpo >= nt && nv >= dpo && nt >= dpo,
    })
}

pub fn summarize(seeds: &[u64], cells: &[(f64, bool)], rm_rows: &[RmStudyRow], studies: &[OptimizationStudy]) -> Summary {
    let rm_cells: Vec<RmCellSummary> = cells
        .iter()
        .map(|&(point_weight, attributes)| {
            let values = seeds
                .iter()
                .filter_map(|&seed| {
                    rm_rows
                        .iter()
                        .find(|r| r.seed == seed && r.point_weight == point_weight && r.attributes == attributes)
                        .map(|r| r.pair_accuracy)
                })
                .collect();
            RmCellSummary {
                point_weight,
                attributes,
                pair_accuracy: SeedStat::new(seeds, values),
            }
        })
        .collect();
    let first_cell = cells.first().copied();
    let rm_zero_head = SeedStat::new(
        seeds,
        seeds
            .iter()
            .filter_map(|&seed| {
                rm_rows
                    .iter()
                    .find(|r| r.seed == seed && Some((r.point_weight, r.attributes)) == first_cell)
                    .map(|r| r.zero_head_accuracy)
            })
            .collect(),
    );
    let per_study = |f: &dyn Fn(&OptimizationStudy) -> f64| SeedStat::new(seeds, studies.iter().map(f).collect());
    let strategies: Vec<StrategySummary> = Strategy::ALL
        .iter()
        .map(|&strategy| {
            let finals: Vec<(f64, f64, f64)> = studies
                .iter()
                .filter_map(|study| {
                    let rows = &study.trajectories.iter().find(|(s, _)| *s == strategy)?.1;
                    let (first, last) = (rows.first()?, rows.last()?);
                    Some((last.match_rate, last.mean_oracle_ctr, last.mean_oracle_ctr - first.mean_oracle_ctr))
                })
                .collect();
            StrategySummary {
                strategy,
                final_match_rate: SeedStat::new(seeds, finals.iter().map(|f| f.0).collect()),
                final_ctr: SeedStat::new(seeds, finals.iter().map(|f| f.1).collect()),
                ctr_lift: SeedStat::new(seeds, finals.iter().map(|f| f.2).collect()),
            }
        })
        .collect();
    let ordering: Vec<SeedOrdering> = studies.iter().filter_map(seed_ordering).collect();
    let pcpo_above_dpo_seeds = ordering.iter().filter(|o| o.pcpo_above_dpo).count();

    let cell_mean = |w: f64, a: bool| {
        rm_cells
            .iter()
            .find(|c| c.point_weight == w && c.attributes == a)
            .map_or(f64::NAN, |c| c.pair_accuracy.mean)
    };
    let mean_of = |s: Strategy, f: fn(&StrategySummary) -> f64| {
        strategies.iter().find(|x| x.strategy == s).map_or(f64::NAN, f)
    };
    let on = cells.first().map_or(0.5, |c| c.0);
    let trained = cell_mean(on, true);
    let match_of = |s| mean_of(s, |x| x.final_match_rate.mean);
    let (dpo, pcpo) = (match_of(Strategy::Dpo), match_of(Strategy::Pcpo));
    let between = |v: f64| v >= dpo && v <= pcpo;
    let checks = Checks {
        rm_above_chance: trained >= 0.55,
        rm_beats_zero_head: trained > rm_zero_head.mean,
        point_loss_helps: trained >= cell_mean(0.0, true),
        attributes_help: trained >= cell_mean(on, false),
        dpo_ctr_lift: mean_of(Strategy::Dpo, |x| x.ctr_lift.mean) > 0.0,
        pcpo_ctr_lift: mean_of(Strategy::Pcpo, |x| x.ctr_lift.mean) > 0.0,
        match_rate_divergence: pcpo > dpo
            && between(match_of(Strategy::PcpoNoVisual))
            && between(match_of(Strategy::PcpoNoTextual))
            && pcpo_above_dpo_seeds * 5 >= ordering.len() * 4
            && !ordering.is_empty(),
    };
    Summary {
        seeds: seeds.to_vec(),
        epochs: studies
            .first()
            .and_then(|s| s.trajectories.first())
            .map_or(0, |(_, rows)| rows.len().saturating_sub(1)),
        rm_cells,
        rm_zero_head,
        annotator_threshold: per_study(&|s| s.annotator_threshold),
        pretrained_ctr: per_study(&|s| s.pretrained_score.mean_oracle_ctr),
        pretrained_match_rate: per_study(&|s| s.pretrained_score.match_rate),
        strategies,
        ordering,
        pcpo_above_dpo_seeds,
        checks,
    }
}
