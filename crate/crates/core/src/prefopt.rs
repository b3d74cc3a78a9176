//! Preference optimization of the description policy against a frozen
//! reference.
//!
//! With `Δ(y | c) = log π_θ(y | c) − log π_ref(y | c)`:
//!
//! ```text
//! L_DPO  = −log σ(β·Δ(y⁺ | c) − β·Δ(y⁻ | c))
//! L_PCPO = mean over mismatched ĉ of −log σ(β·Δ(y⁺ | c) − β·Δ(y⁺ | ĉ))
//! L      = L_DPO + L_PCPO
//! ```
//!
//! Each epoch samples two descriptions per product, renders both with a
//! shared seed, lets a judge pick the winner, collects all tuples and then
//! makes one pass of updates over them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ModelKind, Product, PromptBuilder};
use crate::dims::IMAGE_DIM;
use crate::numerics::{
    collect_grads, log_sigmoid, Module, Optimizer, OptimizerConfig, Tape, Tensor, Var,
};
use crate::oracle::{MatchJudgement, OracleParams};
use crate::policy::{freeze_reference, Description, DescriptionSpace, FrozenPolicy, PolicyContext, PolicyParams};
use crate::renderer::{ProductMask, Renderer};
use crate::reward::RewardParams;
use crate::{seeds, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    Visual,
    Textual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchedContext {
    pub kind: MismatchKind,
    pub context: PolicyContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub product_id: u32,
    pub context: PolicyContext,
    pub y_plus: Vec<u32>,
    pub y_minus: Vec<u32>,
    pub mismatched: Vec<MismatchedContext>,
}

/// Which mismatch strategies feed the product-centric term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchFlags {
    pub use_visual: bool,
    pub use_textual: bool,
}

impl MismatchFlags {
    pub fn allows(&self, kind: MismatchKind) -> bool {
        match kind {
            MismatchKind::Visual => self.use_visual,
            MismatchKind::Textual => self.use_textual,
        }
    }

    pub fn any(&self) -> bool {
        self.use_visual || self.use_textual
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Dpo,
    Pcpo,
    PcpoNoVisual,
    PcpoNoTextual,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Dpo, Strategy::Pcpo, Strategy::PcpoNoVisual, Strategy::PcpoNoTextual];

    pub fn flags(self) -> MismatchFlags {
        let (use_visual, use_textual) = match self {
            Strategy::Dpo => (false, false),
            Strategy::Pcpo => (true, true),
            Strategy::PcpoNoVisual => (false, true),
            Strategy::PcpoNoTextual => (true, false),
        };
        MismatchFlags { use_visual, use_textual }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dpo => "dpo",
            Strategy::Pcpo => "pcpo",
            Strategy::PcpoNoVisual => "pcpo-no-visual",
            Strategy::PcpoNoTextual => "pcpo-no-textual",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown strategy {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub products_per_epoch: usize,
    pub use_visual: bool,
    pub use_textual: bool,
    pub mask_fraction: f64,
    pub sample_temperature: f64,
    pub resample_limit: usize,
    pub optimizer: OptimizerConfig,
    /// Tuples per gradient step within the epoch's single pass.
    pub batch_size: usize,
    /// Re-freeze the reference from the live policy after every epoch.
    pub refresh_reference: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            epochs: 5,
            products_per_epoch: 512,
            use_visual: true,
            use_textual: true,
            mask_fraction: 0.75,
            sample_temperature: 1.5,
            resample_limit: 5,
            optimizer: OptimizerConfig::sgd(1.0),
            batch_size: 512,
            refresh_reference: false,
        }
    }
}

impl DpoConfig {
    pub fn flags(&self) -> MismatchFlags {
        MismatchFlags {
            use_visual: self.use_visual,
            use_textual: self.use_textual,
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        let f = strategy.flags();
        self.use_visual = f.use_visual;
        self.use_textual = f.use_textual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::Config(format!("mask fraction {} outside (0, 1)", self.mask_fraction)));
        }
        if !(self.sample_temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.sample_temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `−log σ(β·(Δ⁺ − Δ⁻))` from the four sequence log-probabilities.
pub fn dpo_loss_from_logps(beta: f64, policy_plus: f64, ref_plus: f64, policy_minus: f64, ref_minus: f64) -> f64 {
    -log_sigmoid(beta * (policy_plus - ref_plus) - beta * (policy_minus - ref_minus))
}

/// `−log σ(β·(a − b) + β·offset)` recorded on the tape, where `a` and `b`
/// are policy log-probabilities and `offset` folds in the reference terms.
fn contrast_on_tape(tape: &mut Tape, a: Var, b: Var, offset: f64, beta: f64) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let c = tape.leaf(Tensor::scalar(offset)?);
    let d = tape.add(d, c)?;
    let z = tape.scale(d, beta)?;
    let ls = tape.log_sigmoid(z)?;
    tape.neg(ls)
}

pub fn dpo_loss(policy: &PolicyParams, reference: &FrozenPolicy, tuple: &PreferenceTuple, beta: f64) -> Result<f64> {
    let c = tuple.context.features();
    Ok(dpo_loss_from_logps(
        beta,
        policy.log_prob(&c, &tuple.y_plus)?,
        reference.log_prob(&c, &tuple.y_plus)?,
        policy.log_prob(&c, &tuple.y_minus)?,
        reference.log_prob(&c, &tuple.y_minus)?,
    ))
}

pub fn dpo_loss_on_tape(
    policy: &PolicyParams,
    tape: &mut Tape,
    vars: &[Var],
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    beta: f64,
) -> Result<Var> {
    let c = tuple.context.features();
    let plus = policy.log_prob_on_tape(tape, vars, &c, &tuple.y_plus)?;
    let minus = policy.log_prob_on_tape(tape, vars, &c, &tuple.y_minus)?;
    let offset = reference.log_prob(&c, &tuple.y_minus)? - reference.log_prob(&c, &tuple.y_plus)?;
    contrast_on_tape(tape, plus, minus, offset, beta)
}

fn selected<'a>(tuple: &'a PreferenceTuple, flags: Option<MismatchFlags>) -> Vec<&'a MismatchedContext> {
    tuple
        .mismatched
        .iter()
        .filter(|m| flags.is_none_or(|f| f.allows(m.kind)))
        .collect()
}

/// Product-centric term over every mismatched context of the tuple.
pub fn pcpo_loss(policy: &PolicyParams, reference: &FrozenPolicy, tuple: &PreferenceTuple, beta: f64) -> Result<f64> {
    pcpo_loss_over(policy, reference, tuple, &selected(tuple, None), beta)
}

fn pcpo_loss_over(
    policy: &PolicyParams,
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    contexts: &[&MismatchedContext],
    beta: f64,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Config("product-centric loss needs a mismatched context".into()));
    }
    let c = tuple.context.features();
    let (p_true, r_true) = (policy.log_prob(&c, &tuple.y_plus)?, reference.log_prob(&c, &tuple.y_plus)?);
    let mut total = 0.0;
    for m in contexts {
        let cm = m.context.features();
        total += dpo_loss_from_logps(
            beta,
            p_true,
            r_true,
            policy.log_prob(&cm, &tuple.y_plus)?,
            reference.log_prob(&cm, &tuple.y_plus)?,
        );
    }
    Ok(total / contexts.len() as f64)
}

pub fn pcpo_loss_on_tape(
    policy: &PolicyParams,
    tape: &mut Tape,
    vars: &[Var],
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    beta: f64,
) -> Result<Var> {
    pcpo_on_tape_over(policy, tape, vars, reference, tuple, &selected(tuple, None), beta)
}

fn pcpo_on_tape_over(
    policy: &PolicyParams,
    tape: &mut Tape,
    vars: &[Var],
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    contexts: &[&MismatchedContext],
    beta: f64,
) -> Result<Var> {
    if contexts.is_empty() {
        return Err(Error::Config("product-centric loss needs a mismatched context".into()));
    }
    let c = tuple.context.features();
    let plus = policy.log_prob_on_tape(tape, vars, &c, &tuple.y_plus)?;
    let r_true = reference.log_prob(&c, &tuple.y_plus)?;
    let mut terms = Vec::with_capacity(contexts.len());
    for m in contexts {
        let cm = m.context.features();
        let other = policy.log_prob_on_tape(tape, vars, &cm, &tuple.y_plus)?;
        let offset = reference.log_prob(&cm, &tuple.y_plus)? - r_true;
        terms.push(contrast_on_tape(tape, plus, other, offset, beta)?);
    }
    let sum = tape.add_all(&terms)?;
    tape.scale(sum, 1.0 / contexts.len() as f64)
}

/// `(L_DPO, L_PCPO)` with the second term absent when no enabled mismatch
/// context is attached.
pub fn loss_components(
    policy: &PolicyParams,
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    beta: f64,
    flags: MismatchFlags,
) -> Result<(f64, Option<f64>)> {
    let dpo = dpo_loss(policy, reference, tuple, beta)?;
    let contexts = selected(tuple, Some(flags));
    let pcpo = if contexts.is_empty() {
        None
    } else {
        Some(pcpo_loss_over(policy, reference, tuple, &contexts, beta)?)
    };
    Ok((dpo, pcpo))
}

pub fn total_loss(
    policy: &PolicyParams,
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    beta: f64,
    flags: MismatchFlags,
) -> Result<f64> {
    let (dpo, pcpo) = loss_components(policy, reference, tuple, beta, flags)?;
    Ok(match pcpo {
        Some(p) => dpo + p,
        None => dpo,
    })
}

/// Records the total loss and returns `(total, dpo, pcpo)`.
pub fn total_loss_on_tape(
    policy: &PolicyParams,
    tape: &mut Tape,
    vars: &[Var],
    reference: &FrozenPolicy,
    tuple: &PreferenceTuple,
    beta: f64,
    flags: MismatchFlags,
) -> Result<(Var, Var, Option<Var>)> {
    let dpo = dpo_loss_on_tape(policy, tape, vars, reference, tuple, beta)?;
    let contexts = selected(tuple, Some(flags));
    if contexts.is_empty() {
        return Ok((dpo, dpo, None));
    }
    let pcpo = pcpo_on_tape_over(policy, tape, vars, reference, tuple, &contexts, beta)?;
    Ok((tape.add(dpo, pcpo)?, dpo, Some(pcpo)))
}

/// Zeroes `floor(mask_fraction · d_f)` randomly chosen image components.
pub fn make_visual_mismatch(context: &PolicyContext, mask_fraction: f64, seed: u64) -> Result<PolicyContext> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Config(format!("mask fraction {mask_fraction} outside (0, 1)")));
    }
    let dim = context.image_feature.len();
    let count = (mask_fraction * dim as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.shuffle(&mut seeds::rng(seed));
    let mut out = context.clone();
    for &i in &idx[..count] {
        out.image_feature[i] = 0.0;
    }
    Ok(out)
}

/// Swaps in the attributes of a uniformly chosen other product, keeping the
/// image features. Returns the new context and the donor id.
pub fn make_textual_mismatch(
    context: &PolicyContext,
    product_id: u32,
    catalog: &[Product],
    prompts: &PromptBuilder,
    seed: u64,
) -> Result<(PolicyContext, u32)> {
    let donors: Vec<&Product> = catalog.iter().filter(|p| p.id != product_id).collect();
    if donors.is_empty() {
        return Err(Error::Config("textual mismatch needs at least two products".into()));
    }
    let donor = donors[seeds::rng(seed).random_range(0..donors.len())];
    let question = prompts.question_for(ModelKind::Prompt, product_id);
    let prompt = prompts.build(question, donor)?;
    Ok((
        PolicyContext {
            image_feature: context.image_feature.clone(),
            prompt_embedding: prompt.embedding,
        },
        donor.id,
    ))
}

/// Decides which of two descriptions of one product is better. Returns the
/// two-way preference `p`, compared as `p[0] > p[1]`.
pub trait PairJudge {
    fn judge(&self, product: &Product, first: &Description, second: &Description, render_seed: u64) -> Result<[f64; 2]>;
}

/// Renders both descriptions with a shared seed and asks the reward model.
pub struct RmJudge<'a> {
    pub reward: &'a RewardParams,
    pub renderer: &'a Renderer,
    /// Builder for the reward model's prompts.
    pub prompts: &'a PromptBuilder,
}

impl PairJudge for RmJudge<'_> {
    fn judge(&self, product: &Product, first: &Description, second: &Description, render_seed: u64) -> Result<[f64; 2]> {
        let mask = ProductMask::for_product(product.id);
        let a = self.renderer.render(product, &mask, &first.embedding, render_seed)?;
        let b = self.renderer.render(product, &mask, &second.embedding, render_seed)?;
        let q = self.prompts.question_for(ModelKind::Reward, product.id);
        let prompt = self.prompts.build(q, product)?;
        Ok(self.reward.compare_pair(&a, &b, &prompt.embedding)?.p)
    }
}

/// Ground-truth judge: prefers the description with the higher true CTR.
pub struct OracleJudge<'a> {
    pub oracle: &'a OracleParams,
}

impl PairJudge for OracleJudge<'_> {
    fn judge(&self, product: &Product, first: &Description, second: &Description, _render_seed: u64) -> Result<[f64; 2]> {
        let a = self.oracle.true_ctr(product, &first.embedding)?;
        let b = self.oracle.true_ctr(product, &second.embedding)?;
        Ok(if a > b {
            [1.0, 0.0]
        } else if b > a {
            [0.0, 1.0]
        } else {
            [0.5, 0.5]
        })
    }
}

/// Everything an epoch reads besides the models.
pub struct EpochInputs<'a> {
    /// Donor pool for textual mismatches; indexed by product id.
    pub catalog: &'a [Product],
    /// Policy context per product, indexed by product id.
    pub contexts: &'a [PolicyContext],
    /// Products an epoch draws from.
    pub train_ids: &'a [u32],
    /// Builder for the policy's prompts.
    pub prompts: &'a PromptBuilder,
    pub space: &'a DescriptionSpace,
    pub judge: &'a dyn PairJudge,
}

/// How a tuple's winner was decided.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDecision {
    pub product_id: u32,
    pub p: [f64; 2],
    /// The first sample won (`p[0] > p[1]`); otherwise the else branch ran.
    pub first_won: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub tuples_built: usize,
    pub skipped: usize,
    pub else_branch: usize,
    pub mean_dpo_loss: f64,
    /// Zero when no product-centric term was active.
    pub mean_pcpo_loss: f64,
    pub decisions: Vec<LabelDecision>,
}

fn epoch_products(train_ids: &[u32], count: usize, seed: u64) -> Vec<u32> {
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut seeds::stream(seed, "prefopt/products"));
    ids.truncate(count);
    ids.sort_unstable();
    ids
}

/// Samples two distinct descriptions, resampling the second up to
/// `resample_limit` times on collision.
fn sample_pair(policy: &PolicyParams, context: &[f64], config: &DpoConfig, seed: u64) -> Result<Option<(Vec<u32>, Vec<u32>)>> {
    let first = policy.sample(context, config.sample_temperature, seeds::derive_indexed(seed, "sample", 0))?;
    for attempt in 0..=config.resample_limit {
        let second = policy.sample(context, config.sample_temperature, seeds::derive_indexed(seed, "sample", attempt as u64 + 1))?;
        if second != first {
            return Ok(Some((first, second)));
        }
    }
    Ok(None)
}

/// Builds this epoch's tuples in product-id order.
pub fn build_tuples(
    policy: &PolicyParams,
    inputs: &EpochInputs,
    config: &DpoConfig,
    seed: u64,
) -> Result<(Vec<PreferenceTuple>, EpochStats)> {
    let ids = epoch_products(inputs.train_ids, config.products_per_epoch, seed);
    let mut stats = EpochStats::default();
    let mut tuples = Vec::with_capacity(ids.len());
    for id in ids {
        let product = inputs
            .catalog
            .get(id as usize)
            .filter(|p| p.id == id)
            .ok_or_else(|| Error::Config(format!("product {id} not in catalog order")))?;
        let context = &inputs.contexts[id as usize];
        let features = context.features();
        let item_seed = seeds::derive_indexed(seed, "prefopt/item", id as u64);
        let Some((y1, y2)) = sample_pair(policy, &features, config, item_seed)? else {
            stats.skipped += 1;
            continue;
        };
        let (d1, d2) = (inputs.space.describe(&y1)?, inputs.space.describe(&y2)?);
        let p = inputs
            .judge
            .judge(product, &d1, &d2, seeds::derive_indexed(seed, "prefopt/render", id as u64))?;
        let first_won = p[0] > p[1];
        let (y_plus, y_minus) = if first_won { (y1, y2) } else { (y2, y1) };
        if !first_won {
            stats.else_branch += 1;
        }
        stats.decisions.push(LabelDecision {
            product_id: id,
            p,
            first_won,
        });

        let mut mismatched = Vec::new();
        if config.use_visual {
            mismatched.push(MismatchedContext {
                kind: MismatchKind::Visual,
                context: make_visual_mismatch(context, config.mask_fraction, seeds::derive(item_seed, "visual"))?,
            });
        }
        if config.use_textual {
            let (ctx, _) = make_textual_mismatch(context, id, inputs.catalog, inputs.prompts, seeds::derive(item_seed, "textual"))?;
            mismatched.push(MismatchedContext {
                kind: MismatchKind::Textual,
                context: ctx,
            });
        }
        tuples.push(PreferenceTuple {
            product_id: id,
            context: context.clone(),
            y_plus,
            y_minus,
            mismatched,
        });
    }
    stats.tuples_built = tuples.len();
    Ok((tuples, stats))
}

/// One pass of mini-batch updates over `tuples` in order. Returns the mean
/// DPO and product-centric losses seen during the pass.
pub fn update_on_tuples(
    policy: &mut PolicyParams,
    optimizer: &mut Optimizer,
    reference: &FrozenPolicy,
    tuples: &[PreferenceTuple],
    config: &DpoConfig,
) -> Result<(f64, f64)> {
    let flags = config.flags();
    let (mut dpo_sum, mut pcpo_sum, mut pcpo_count) = (0.0, 0.0, 0usize);
    for batch in tuples.chunks(config.batch_size) {
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape);
        let mut totals = Vec::with_capacity(batch.len());
        for tuple in batch {
            let (total, dpo, pcpo) = total_loss_on_tape(policy, &mut tape, &vars, reference, tuple, config.beta, flags)?;
            dpo_sum += tape.item(dpo);
            if let Some(p) = pcpo {
                pcpo_sum += tape.item(p);
                pcpo_count += 1;
            }
            totals.push(total);
        }
        let sum = tape.add_all(&totals)?;
        let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
        let grads = collect_grads(&tape.backward(loss)?, &vars);
        optimizer.step(&mut policy.tensors_mut(), &grads)?;
    }
    let n = tuples.len().max(1) as f64;
    Ok((dpo_sum / n, if pcpo_count == 0 { 0.0 } else { pcpo_sum / pcpo_count as f64 }))
}

/// One epoch: build tuples with the current policy, then update on them.
pub fn run_epoch(
    policy: &mut PolicyParams,
    optimizer: &mut Optimizer,
    reference: &FrozenPolicy,
    inputs: &EpochInputs,
    config: &DpoConfig,
    seed: u64,
) -> Result<EpochStats> {
    config.validate()?;
    let (tuples, mut stats) = build_tuples(policy, inputs, config, seed)?;
    let (dpo, pcpo) = update_on_tuples(policy, optimizer, reference, &tuples, config)?;
    stats.mean_dpo_loss = dpo;
    stats.mean_pcpo_loss = pcpo;
    Ok(stats)
}

/// Held-out products on which greedy outputs are scored by the oracle.
pub struct EvalSet<'a> {
    pub oracle: &'a OracleParams,
    pub space: &'a DescriptionSpace,
    pub products: &'a [Product],
    /// Policy context per entry of `products`.
    pub contexts: &'a [PolicyContext],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub mean_oracle_ctr: f64,
    pub match_rate: f64,
    pub mean_compatibility: f64,
}

pub fn evaluate_policy(policy: &PolicyParams, eval: &EvalSet) -> Result<PolicyScore> {
    if eval.products.is_empty() || eval.products.len() != eval.contexts.len() {
        return Err(Error::Config("evaluation needs one context per product".into()));
    }
    let (mut ctr, mut matches, mut kappa) = (0.0, 0usize, 0.0);
    for (product, ctx) in eval.products.iter().zip(eval.contexts) {
        let d = eval.space.describe(&policy.greedy(&ctx.features())?)?;
        ctr += eval.oracle.true_ctr(product, &d.embedding)?;
        kappa += eval.oracle.compatibility(product, &d.embedding)?;
        if eval.oracle.annotate_match(product, &d.embedding)? == MatchJudgement::Match {
            matches += 1;
        }
    }
    let n = eval.products.len() as f64;
    Ok(PolicyScore {
        mean_oracle_ctr: ctr / n,
        match_rate: matches as f64 / n,
        mean_compatibility: kappa / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub mean_oracle_ctr: f64,
    pub match_rate: f64,
    pub tuples_built: usize,
    pub skipped: usize,
    pub mean_dpo_loss: f64,
    pub mean_pcpo_loss: f64,
}

/// Runs `config.epochs` epochs. Row 0 scores the starting policy.
pub fn run_optimization(
    mut policy: PolicyParams,
    inputs: &EpochInputs,
    eval: &EvalSet,
    config: &DpoConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<TrajectoryRow>)> {
    config.validate()?;
    if config.epochs == 0 {
        return Err(Error::Config("optimization needs at least one epoch".into()));
    }
    let mut reference = freeze_reference(&policy);
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &policy.tensors())?;
    let start = evaluate_policy(&policy, eval)?;
    let mut rows = vec![TrajectoryRow {
        epoch: 0,
        mean_oracle_ctr: start.mean_oracle_ctr,
        match_rate: start.match_rate,
        tuples_built: 0,
        skipped: 0,
        mean_dpo_loss: 0.0,
        mean_pcpo_loss: 0.0,
    }];
    for epoch in 1..=config.epochs {
        let stats = run_epoch(
            &mut policy,
            &mut optimizer,
            &reference,
            inputs,
            config,
            seeds::derive_indexed(seed, "prefopt/epoch", epoch as u64),
        )?;
        if config.refresh_reference {
            reference = freeze_reference(&policy);
        }
        let score = evaluate_policy(&policy, eval)?;
        log::info!(
            "epoch {epoch}: ctr {:.5} match {:.3} tuples {} skipped {}",
            score.mean_oracle_ctr,
            score.match_rate,
            stats.tuples_built,
            stats.skipped
        );
        rows.push(TrajectoryRow {
            epoch,
            mean_oracle_ctr: score.mean_oracle_ctr,
            match_rate: score.match_rate,
            tuples_built: stats.tuples_built,
            skipped: stats.skipped,
            mean_dpo_loss: stats.mean_dpo_loss,
            mean_pcpo_loss: stats.mean_pcpo_loss,
        });
    }
    Ok((policy, rows))
}

/// Visual mismatch of an image-feature vector of the default width.
pub fn visual_mask_count(mask_fraction: f64) -> usize {
    (mask_fraction * IMAGE_DIM as f64).floor() as usize
}
