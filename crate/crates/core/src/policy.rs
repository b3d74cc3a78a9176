//! Background-description generator.
//!
//! A single-layer recurrent cell over fixed-length token sequences:
//!
//! ```text
//! h_t = tanh(W_c·c + W_e·emb(y_{t−1}) + W_h·h_{t−1} + b)
//! p(y_t | y_<t, c) = softmax(W_o·h_t + b_o)
//! ```
//!
//! with `h_0 = 0` and a learned start embedding in place of `emb(y_0)`.
//! Sequence log-probabilities are computed twice, once in plain arithmetic
//! and once on a [`Tape`] for gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dims::{CONTEXT_DIM, DESCRIPTION_LEN, IMAGE_DIM, VOCAB_SIZE};
use crate::numerics::{
    collect_grads, cosine, softmax, Module, Optimizer, OptimizerConfig, Tape, Tensor, Var,
};
use crate::oracle::OracleParams;
use crate::catalog::Product;
use crate::{seeds, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub length: usize,
    pub context_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            embed_dim: 16,
            hidden: 32,
            length: DESCRIPTION_LEN,
            context_dim: IMAGE_DIM + CONTEXT_DIM,
        }
    }
}

impl PolicyConfig {
    /// Small enough to enumerate every sequence.
    pub fn toy() -> Self {
        Self {
            vocab: 4,
            embed_dim: 3,
            hidden: 5,
            length: 2,
            context_dim: 4,
        }
    }
}

/// What the policy conditions on: product image features and the embedded
/// instruct prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    pub image_feature: Vec<f64>,
    pub prompt_embedding: Vec<f64>,
}

impl PolicyContext {
    pub fn features(&self) -> Vec<f64> {
        let mut out = self.image_feature.clone();
        out.extend_from_slice(&self.prompt_embedding);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub token_embedding: Tensor,
    pub start: Tensor,
    pub w_context: Tensor,
    pub w_input: Tensor,
    pub w_state: Tensor,
    pub b_hidden: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Module for PolicyParams {
    const KIND: &'static str = "policy";

    fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("token_embedding", &self.token_embedding),
            ("start", &self.start),
            ("w_context", &self.w_context),
            ("w_input", &self.w_input),
            ("w_state", &self.w_state),
            ("b_hidden", &self.b_hidden),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.token_embedding,
            &mut self.start,
            &mut self.w_context,
            &mut self.w_input,
            &mut self.w_state,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

fn add_in_place(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

impl PolicyParams {
    /// Seeded init with `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = seeds::stream(seed, "policy/init");
        let c = &config;
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            token_embedding: Tensor::randn(&[c.vocab, c.embed_dim], 1.0, &mut rng),
            start: Tensor::randn(&[c.embed_dim], 1.0, &mut rng),
            w_context: Tensor::randn(&[c.hidden, c.context_dim], s(c.context_dim), &mut rng),
            w_input: Tensor::randn(&[c.hidden, c.embed_dim], s(c.embed_dim), &mut rng),
            w_state: Tensor::randn(&[c.hidden, c.hidden], s(c.hidden), &mut rng),
            b_hidden: Tensor::zeros(&[c.hidden]),
            w_out: Tensor::randn(&[c.vocab, c.hidden], s(c.hidden), &mut rng),
            b_out: Tensor::zeros(&[c.vocab]),
            config,
        }
    }

    /// Every step distribution is uniform: zero output weights and biases.
    pub fn uniform(config: PolicyConfig, seed: u64) -> Self {
        let mut p = Self::init(config, seed);
        p.w_out = Tensor::zeros(p.w_out.shape());
        p.b_out = Tensor::zeros(p.b_out.shape());
        p
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.config.context_dim {
            return Err(Error::Dimension(format!(
                "policy context of length {} (expected {})",
                context.len(),
                self.config.context_dim
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.config.length {
            return Err(Error::Dimension(format!(
                "description of length {} (expected {})",
                tokens.len(),
                self.config.length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Vocabulary {
                token: bad,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn next_hidden(&self, drive: &[f64], input: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = drive.to_vec();
        add_in_place(&mut out, &self.w_input.matvec(input).expect("checked shapes"));
        add_in_place(&mut out, &self.w_state.matvec(h).expect("checked shapes"));
        add_in_place(&mut out, self.b_hidden.data());
        tanh_in_place(&mut out);
        out
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.w_out.matvec(h).expect("checked shapes");
        add_in_place(&mut out, self.b_out.data());
        out
    }

    /// Runs the recurrence, handing the logits for `y_t` to `visit`. Given
    /// tokens are teacher-forced; past them, `visit` picks the next token or
    /// stops the walk by returning `None`.
    fn run(&self, context: &[f64], tokens: &[u32], mut visit: impl FnMut(usize, &[f64]) -> Option<u32>) {
        let drive = self.w_context.matvec(context).expect("checked context");
        let mut h = vec![0.0; self.config.hidden];
        let mut input = self.start.data().to_vec();
        for t in 0..self.config.length {
            h = self.next_hidden(&drive, &input, &h);
            let logits = self.logits(&h);
            let next = match tokens.get(t) {
                Some(&tok) => {
                    visit(t, &logits);
                    tok
                }
                None => match visit(t, &logits) {
                    Some(tok) => tok,
                    None => return,
                },
            };
            input = self.token_embedding.row(next as usize).to_vec();
        }
    }

    /// `Σ_t log p(y_t | y_<t, c)` without recording gradients.
    pub fn log_prob(&self, context: &[f64], tokens: &[u32]) -> Result<f64> {
        self.check_context(context)?;
        self.check_tokens(tokens)?;
        let mut total = 0.0;
        self.run(context, tokens, |t, logits| {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += logits[tokens[t] as usize] - lse;
            None
        });
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("sequence log-probability {total}")));
        }
        Ok(total)
    }

    /// Per-step probabilities of the realized tokens.
    pub fn step_probabilities(&self, context: &[f64], tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        self.check_tokens(tokens)?;
        let mut out = Vec::with_capacity(tokens.len());
        let mut err = None;
        self.run(context, tokens, |t, logits| {
            match softmax(logits) {
                Ok(p) => out.push(p[tokens[t] as usize]),
                Err(e) => err = Some(e),
            }
            None
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Records the sequence log-probability on `tape`. `vars` are this
    /// module's parameters as bound by [`Module::bind`].
    pub fn log_prob_on_tape(&self, tape: &mut Tape, vars: &[Var], context: &[f64], tokens: &[u32]) -> Result<Var> {
        self.check_context(context)?;
        self.check_tokens(tokens)?;
        let [emb, start, w_c, w_e, w_h, b_h, w_o, b_o] = vars else {
            return Err(Error::Dimension(format!("expected 8 policy variables, got {}", vars.len())));
        };
        let c = tape.leaf(Tensor::vector(context.to_vec())?);
        let drive = tape.matvec(*w_c, c)?;
        let mut h: Option<Var> = None;
        let mut input = *start;
        let mut terms = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let e = tape.matvec(*w_e, input)?;
            let mut pre = tape.add(drive, e)?;
            if let Some(prev) = h {
                let r = tape.matvec(*w_h, prev)?;
                pre = tape.add(pre, r)?;
            }
            pre = tape.add(pre, *b_h)?;
            let hidden = tape.tanh(pre)?;
            let o = tape.matvec(*w_o, hidden)?;
            let logits = tape.add(o, *b_o)?;
            let lsm = tape.log_softmax(logits)?;
            terms.push(tape.index(lsm, tok as usize)?);
            input = tape.row(*emb, tok as usize)?;
            h = Some(hidden);
        }
        tape.add_all(&terms)
    }

    /// Ancestral sampling at `temperature`.
    pub fn sample(&self, context: &[f64], temperature: f64, seed: u64) -> Result<Vec<u32>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        self.check_context(context)?;
        let mut rng = seeds::rng(seed);
        let mut out = Vec::with_capacity(self.config.length);
        self.run(context, &[], |_, logits| {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs = softmax(&scaled).expect("finite logits");
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            out.push(pick as u32);
            Some(pick as u32)
        });
        Ok(out)
    }

    /// Zero-temperature limit: argmax at every step, ties to the lowest id.
    pub fn greedy(&self, context: &[f64]) -> Result<Vec<u32>> {
        self.check_context(context)?;
        let mut out = Vec::with_capacity(self.config.length);
        self.run(context, &[], |_, logits| {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            out.push(best as u32);
            Some(best as u32)
        });
        Ok(out)
    }
}

/// Immutable snapshot of a policy, used as the preference-optimization
/// reference.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenPolicy {
    params: PolicyParams,
}

impl FrozenPolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn log_prob(&self, context: &[f64], tokens: &[u32]) -> Result<f64> {
        self.params.log_prob(context, tokens)
    }
}

pub fn freeze_reference(params: &PolicyParams) -> FrozenPolicy {
    FrozenPolicy { params: params.clone() }
}

/// Fixed, non-trainable token table that turns descriptions into the
/// embeddings seen by the renderer and the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionSpace {
    table: Tensor,
}

/// A generated background description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub tokens: Vec<u32>,
    pub embedding: Vec<f64>,
}

/// Shape of the token embedding table: `rank` latent style factors mixed
/// into `d_c` dimensions, plus isotropic residual. `rank = d_c` with zero
/// residual is an unstructured Gaussian table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptionConfig {
    pub rank: usize,
    pub residual_scale: f64,
    /// Rescale every token embedding to norm `√d_c`.
    pub normalize_rows: bool,
}

impl Default for DescriptionConfig {
    fn default() -> Self {
        Self {
            rank: CONTEXT_DIM,
            residual_scale: 0.0,
            normalize_rows: false,
        }
    }
}

impl DescriptionSpace {
    /// Unstructured Gaussian table.
    pub fn new(seed: u64) -> Self {
        Self {
            table: Tensor::randn(&[VOCAB_SIZE, CONTEXT_DIM], 1.0, &mut seeds::stream(seed, "description/embedding")),
        }
    }

    pub fn with_config(seed: u64, config: &DescriptionConfig) -> Result<Self> {
        if config.rank == 0 || config.rank > CONTEXT_DIM {
            return Err(Error::Config(format!("style rank {} outside 1..={CONTEXT_DIM}", config.rank)));
        }
        if !(config.residual_scale >= 0.0 && config.residual_scale.is_finite()) {
            return Err(Error::Config(format!("residual scale {}", config.residual_scale)));
        }
        if config.rank == CONTEXT_DIM && config.residual_scale == 0.0 && !config.normalize_rows {
            return Ok(Self::new(seed));
        }
        let mut rng = seeds::stream(seed, "description/embedding");
        let factors = Tensor::randn(&[VOCAB_SIZE, config.rank], 1.0, &mut rng);
        let basis = Tensor::randn(&[config.rank, CONTEXT_DIM], (config.rank as f64).sqrt().recip(), &mut rng);
        let residual = Tensor::randn(&[VOCAB_SIZE, CONTEXT_DIM], config.residual_scale, &mut rng);
        let mut data = vec![0.0; VOCAB_SIZE * CONTEXT_DIM];
        for v in 0..VOCAB_SIZE {
            for c in 0..CONTEXT_DIM {
                let mixed: f64 = (0..config.rank).map(|r| factors.row(v)[r] * basis.row(r)[c]).sum();
                data[v * CONTEXT_DIM + c] = mixed + residual.row(v)[c];
            }
            if config.normalize_rows {
                let row = &mut data[v * CONTEXT_DIM..(v + 1) * CONTEXT_DIM];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let k = (CONTEXT_DIM as f64).sqrt() / norm;
                    row.iter_mut().for_each(|x| *x *= k);
                }
            }
        }
        Ok(Self {
            table: Tensor::new(vec![VOCAB_SIZE, CONTEXT_DIM], data)?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn describe(&self, tokens: &[u32]) -> Result<Description> {
        if tokens.len() != DESCRIPTION_LEN {
            return Err(Error::Dimension(format!(
                "description of length {} (expected {DESCRIPTION_LEN})",
                tokens.len()
            )));
        }
        let mut embedding = vec![0.0; CONTEXT_DIM];
        for &t in tokens {
            if t as usize >= VOCAB_SIZE {
                return Err(Error::Vocabulary {
                    token: t,
                    vocab: VOCAB_SIZE,
                });
            }
            add_in_place(&mut embedding, self.table.row(t as usize));
        }
        let n = tokens.len() as f64;
        embedding.iter_mut().for_each(|x| *x /= n);
        Ok(Description {
            tokens: tokens.to_vec(),
            embedding,
        })
    }

    /// Uniformly random description.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Description {
        let tokens: Vec<u32> = (0..DESCRIPTION_LEN).map(|_| rng.random_range(0..VOCAB_SIZE as u32)).collect();
        self.describe(&tokens).expect("tokens drawn in range")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub targets_per_product: usize,
    /// Minimum compatibility a target must reach.
    pub target_threshold: f64,
    /// Temperature of the token proposal `∝ exp(cos(row_v, Sᵀf) / T)`.
    pub proposal_temperature: f64,
    pub max_attempts: usize,
    /// Fraction of products whose targets are held out for NLL tracking.
    pub heldout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            optimizer: OptimizerConfig::adam(0.01),
            batch_size: 32,
            targets_per_product: 4,
            target_threshold: 0.5,
            proposal_temperature: 0.15,
            max_attempts: 200,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-sequence NLL over each epoch's updates.
    pub epoch_losses: Vec<f64>,
    /// Held-out mean NLL before training (entry 0) and after each epoch.
    pub heldout_nll: Vec<f64>,
    pub skipped_products: Vec<u32>,
    pub examples: usize,
}

/// Compatible targets for one product, drawn by rejection from a proposal
/// that favors tokens aligned with the product's ideal direction.
pub fn compatible_targets(
    oracle: &OracleParams,
    space: &DescriptionSpace,
    product: &Product,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<Description>> {
    let ideal = oracle.ideal_direction(product)?;
    let scores: Vec<f64> = (0..VOCAB_SIZE)
        .map(|v| cosine(space.table().row(v), &ideal).unwrap_or(0.0) / config.proposal_temperature)
        .collect();
    let probs = softmax(&scores)?;
    let mut rng = seeds::rng(seed);
    let mut out = Vec::new();
    for _ in 0..config.max_attempts {
        if out.len() == config.targets_per_product {
            break;
        }
        let tokens: Vec<u32> = (0..DESCRIPTION_LEN)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i as u32;
                    }
                }
                (VOCAB_SIZE - 1) as u32
            })
            .collect();
        let d = space.describe(&tokens)?;
        if oracle.compatibility(product, &d.embedding)? >= config.target_threshold {
            out.push(d);
        }
    }
    Ok(out)
}

fn mean_nll(params: &PolicyParams, examples: &[(Vec<f64>, Vec<u32>)]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ctx, tokens) in examples {
        total -= params.log_prob(ctx, tokens)?;
    }
    Ok(total / examples.len() as f64)
}

/// Maximum-likelihood training on oracle-compatible descriptions.
///
/// `products` pairs each product with its policy context. Products without
/// any compatible target are skipped with a warning.
pub fn pretrain(
    mut params: PolicyParams,
    products: &[(Product, PolicyContext)],
    oracle: &OracleParams,
    space: &DescriptionSpace,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(PolicyParams, PretrainReport)> {
    if products.is_empty() {
        return Err(Error::Config("pre-training needs at least one product".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..products.len()).collect();
    order.shuffle(&mut seeds::stream(seed, "pretrain/heldout"));
    let n_held = ((products.len() as f64) * config.heldout_fraction).round() as usize;
    let held: std::collections::BTreeSet<usize> = order[..n_held.min(products.len())].iter().copied().collect();

    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, (product, ctx)) in products.iter().enumerate() {
        let targets = compatible_targets(
            oracle,
            space,
            product,
            config,
            seeds::derive_indexed(seed, "pretrain/targets", product.id as u64),
        )?;
        if targets.is_empty() {
            log::warn!("no compatible pre-training target for product {}; skipped", product.id);
            report.skipped_products.push(product.id);
            continue;
        }
        let features = ctx.features();
        let bucket = if held.contains(&i) { &mut heldout } else { &mut train };
        bucket.extend(targets.into_iter().map(|d| (features.clone(), d.tokens)));
    }
    report.examples = train.len();
    report.heldout_nll.push(mean_nll(&params, &heldout)?);

    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params.tensors())?;
    let mut rng = seeds::stream(seed, "pretrain/order");
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        idx.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in idx.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let mut terms = Vec::with_capacity(batch.len());
            for &j in batch {
                let (ctx, tokens) = &train[j];
                terms.push(params.log_prob_on_tape(&mut tape, &vars, ctx, tokens)?);
            }
            let total = tape.add_all(&terms)?;
            epoch_total -= tape.item(total);
            let loss = tape.scale(total, -1.0 / batch.len() as f64)?;
            let grads = collect_grads(&tape.backward(loss)?, &vars);
            optimizer.step(&mut params.tensors_mut(), &grads)?;
        }
        report.epoch_losses.push(if train.is_empty() { 0.0 } else { epoch_total / train.len() as f64 });
        report.heldout_nll.push(mean_nll(&params, &heldout)?);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use approx::assert_abs_diff_eq;

    fn toy_context(seed: u64) -> Vec<f64> {
        let mut rng = seeds::rng(seed);
        (0..PolicyConfig::toy().context_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn log_prob_matches_product_of_step_probabilities() {
        let p = PolicyParams::init(PolicyConfig::default(), 1);
        let ctx = vec![0.3; p.config.context_dim];
        let y = p.sample(&ctx, 1.0, 5).unwrap();
        let lp = p.log_prob(&ctx, &y).unwrap();
        let prod: f64 = p.step_probabilities(&ctx, &y).unwrap().iter().product();
        assert_abs_diff_eq!(lp.exp(), prod, epsilon = 1e-12);
        assert!(lp <= 0.0);
    }

    #[test]
    fn toy_distribution_sums_to_one() {
        let p = PolicyParams::init(PolicyConfig::toy(), 3);
        let ctx = toy_context(1);
        let mut total = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                total += p.log_prob(&ctx, &[a, b]).unwrap().exp();
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let p = PolicyParams::init(PolicyConfig::default(), 2);
        let ctx: Vec<f64> = (0..p.config.context_dim).map(|i| (i as f64).cos()).collect();
        let y = p.sample(&ctx, 1.0, 9).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let v = p.log_prob_on_tape(&mut tape, &vars, &ctx, &y).unwrap();
        assert_abs_diff_eq!(tape.item(v), p.log_prob(&ctx, &y).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = PolicyParams::init(PolicyConfig::toy(), 4);
        let ctx = toy_context(2);
        let y = vec![2, 1];
        let report = grad_check(
            |tape, vars| p.log_prob_on_tape(tape, vars, &ctx, &y),
            &p.tensors().into_iter().cloned().collect::<Vec<_>>(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn invalid_tokens_rejected() {
        let p = PolicyParams::init(PolicyConfig::toy(), 1);
        let ctx = toy_context(1);
        assert!(matches!(p.log_prob(&ctx, &[4, 0]), Err(Error::Vocabulary { token: 4, vocab: 4 })));
        assert!(p.log_prob(&ctx, &[0]).is_err());
        assert!(p.sample(&ctx, 0.0, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_greedy_is_the_mode() {
        let p = PolicyParams::init(PolicyConfig::toy(), 6);
        let ctx = toy_context(3);
        assert_eq!(p.sample(&ctx, 1.0, 42).unwrap(), p.sample(&ctx, 1.0, 42).unwrap());
        let greedy = p.greedy(&ctx).unwrap();
        // Near-zero temperature reproduces the greedy path.
        assert_eq!(p.sample(&ctx, 1e-6, 7).unwrap(), greedy);
    }

    #[test]
    fn uniform_policy_token_frequencies() {
        let p = PolicyParams::uniform(PolicyConfig::default(), 1);
        let ctx = vec![0.1; p.config.context_dim];
        let v = p.config.vocab;
        let mut counts = vec![0u64; v];
        let n = 10_000u64;
        for s in 0..n {
            let y = p.sample(&ctx, 1.0, s).unwrap();
            counts[y[0] as usize] += 1;
        }
        let pr = 1.0 / v as f64;
        let sigma = (n as f64 * pr * (1.0 - pr)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * pr).abs() <= 3.0 * sigma + 1.0);
        }
    }

    #[test]
    fn frozen_copy_is_independent() {
        let mut live = PolicyParams::init(PolicyConfig::toy(), 7);
        let frozen = freeze_reference(&live);
        let ctx = toy_context(4);
        let before = live.log_prob(&ctx, &[1, 3]).unwrap();
        assert_eq!(frozen.params(), &live);

        let mut tape = Tape::new();
        let vars = live.bind(&mut tape);
        let lp = live.log_prob_on_tape(&mut tape, &vars, &ctx, &[1, 3]).unwrap();
        let grads = collect_grads(&tape.backward(lp).unwrap(), &vars);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &live.tensors()).unwrap();
        opt.step(&mut live.tensors_mut(), &grads).unwrap();

        assert_ne!(frozen.params(), &live);
        assert_eq!(frozen.log_prob(&ctx, &[1, 3]).unwrap(), before);
    }

    #[test]
    fn description_embedding_is_token_mean() {
        let space = DescriptionSpace::new(1);
        let tokens = [0, 1, 2, 3, 4, 5, 6, 7];
        let d = space.describe(&tokens).unwrap();
        for j in 0..CONTEXT_DIM {
            let m: f64 = tokens.iter().map(|&t| space.table().at(t as usize, j)).sum::<f64>() / 8.0;
            assert_abs_diff_eq!(d.embedding[j], m, epsilon = 1e-15);
        }
        assert!(space.describe(&[0; 3]).is_err());
        assert!(space.describe(&[64; 8]).is_err());
    }
}
