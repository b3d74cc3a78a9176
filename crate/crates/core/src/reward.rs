//! Pairwise two-head reward model.
//!
//! Both images go through one shared linear vision encoder, the prompt
//! embedding through a linear text encoder. The concatenation
//! `[vision(I1); vision(I2); text(C)]` feeds a two-layer tanh trunk whose
//! output `h` drives a comparison head `p = softmax(W_cls·h + b_cls)` and a
//! CTR regression head `W_ctr·h + b_ctr`.
//!
//! The training objective is `λ1·L_CE + λ2·L_Point` where the cross-entropy
//! is summed over the batch and the squared regression error is averaged.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::PairLabel;
use crate::dims::{CONTEXT_DIM, IMAGE_DIM};
use crate::numerics::{
    collect_grads, softmax, Module, Optimizer, OptimizerConfig, Tape, Tensor, Var,
};
use crate::{seeds, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub vision_dim: usize,
    pub hidden: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Start both heads at zero so the untrained model outputs `[0.5, 0.5]`.
    pub zero_heads: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            vision_dim: 16,
            hidden: 32,
            image_dim: IMAGE_DIM,
            text_dim: CONTEXT_DIM,
            zero_heads: false,
        }
    }
}

impl RewardConfig {
    pub fn toy() -> Self {
        Self {
            vision_dim: 3,
            hidden: 4,
            image_dim: 3,
            text_dim: 2,
            zero_heads: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub config: RewardConfig,
    pub w_vision: Tensor,
    pub b_vision: Tensor,
    pub w_text: Tensor,
    pub b_text: Tensor,
    pub w_trunk1: Tensor,
    pub b_trunk1: Tensor,
    pub w_trunk2: Tensor,
    pub b_trunk2: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub w_ctr: Tensor,
    pub b_ctr: Tensor,
}

impl Module for RewardParams {
    const KIND: &'static str = "reward";

    fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_vision", &self.w_vision),
            ("b_vision", &self.b_vision),
            ("w_text", &self.w_text),
            ("b_text", &self.b_text),
            ("w_trunk1", &self.w_trunk1),
            ("b_trunk1", &self.b_trunk1),
            ("w_trunk2", &self.w_trunk2),
            ("b_trunk2", &self.b_trunk2),
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
            ("w_ctr", &self.w_ctr),
            ("b_ctr", &self.b_ctr),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_vision,
            &mut self.b_vision,
            &mut self.w_text,
            &mut self.b_text,
            &mut self.w_trunk1,
            &mut self.b_trunk1,
            &mut self.w_trunk2,
            &mut self.b_trunk2,
            &mut self.w_cls,
            &mut self.b_cls,
            &mut self.w_ctr,
            &mut self.b_ctr,
        ]
    }
}

/// `p` sums to one; `ctr_hat` is the regression head's raw output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardOutput {
    pub p: [f64; 2],
    pub ctr_hat: [f64; 2],
}

impl RewardOutput {
    /// Predicted winning side; ties go to the left image.
    pub fn predicted(&self) -> PairLabel {
        if self.p[1] > self.p[0] {
            PairLabel::RightHigher
        } else {
            PairLabel::LeftHigher
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmLossConfig {
    pub ce_weight: f64,
    pub point_weight: f64,
}

impl Default for RmLossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            point_weight: 0.5,
        }
    }
}

/// One training or evaluation pair as the reward model sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmExample {
    pub left_image: Vec<f64>,
    pub right_image: Vec<f64>,
    pub prompt_embedding: Vec<f64>,
    /// One-hot comparison target.
    pub target: [f64; 2],
    /// True CTRs of the left and right image.
    pub ctr_target: [f64; 2],
}

impl RmExample {
    pub fn new(
        left_image: Vec<f64>,
        right_image: Vec<f64>,
        prompt_embedding: Vec<f64>,
        label: PairLabel,
        ctr_target: [f64; 2],
    ) -> Self {
        Self {
            left_image,
            right_image,
            prompt_embedding,
            target: label.one_hot(),
            ctr_target,
        }
    }

    pub fn label(&self) -> Result<PairLabel> {
        match self.target {
            [1.0, 0.0] => Ok(PairLabel::LeftHigher),
            [0.0, 1.0] => Ok(PairLabel::RightHigher),
            t => Err(Error::Label(format!("target {t:?} is not one-hot"))),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            left_image: self.right_image.clone(),
            right_image: self.left_image.clone(),
            prompt_embedding: self.prompt_embedding.clone(),
            target: [self.target[1], self.target[0]],
            ctr_target: [self.ctr_target[1], self.ctr_target[0]],
        }
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = w.matvec(x)?;
    for (o, bi) in out.iter_mut().zip(b.data()) {
        *o += bi;
    }
    Ok(out)
}

impl RewardParams {
    /// Seeded init with `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(config: RewardConfig, seed: u64) -> Self {
        let mut rng = seeds::stream(seed, "reward/init");
        let c = &config;
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        let mut params = Self {
            w_vision: Tensor::randn(&[c.vision_dim, c.image_dim], s(c.image_dim), &mut rng),
            b_vision: Tensor::zeros(&[c.vision_dim]),
            w_text: Tensor::randn(&[c.vision_dim, c.text_dim], s(c.text_dim), &mut rng),
            b_text: Tensor::zeros(&[c.vision_dim]),
            w_trunk1: Tensor::randn(&[c.hidden, 3 * c.vision_dim], s(3 * c.vision_dim), &mut rng),
            b_trunk1: Tensor::zeros(&[c.hidden]),
            w_trunk2: Tensor::randn(&[c.hidden, c.hidden], s(c.hidden), &mut rng),
            b_trunk2: Tensor::zeros(&[c.hidden]),
            w_cls: Tensor::randn(&[2, c.hidden], s(c.hidden), &mut rng),
            b_cls: Tensor::zeros(&[2]),
            w_ctr: Tensor::randn(&[2, c.hidden], s(c.hidden), &mut rng),
            b_ctr: Tensor::zeros(&[2]),
            config,
        };
        if params.config.zero_heads {
            params.w_cls = Tensor::zeros(&[2, params.config.hidden]);
            params.w_ctr = Tensor::zeros(&[2, params.config.hidden]);
        }
        params
    }

    fn check_inputs(&self, left: &[f64], right: &[f64], prompt: &[f64]) -> Result<()> {
        let c = &self.config;
        if left.len() != c.image_dim || right.len() != c.image_dim || prompt.len() != c.text_dim {
            return Err(Error::Dimension(format!(
                "reward inputs of lengths {}, {}, {} (expected {}, {}, {})",
                left.len(),
                right.len(),
                prompt.len(),
                c.image_dim,
                c.image_dim,
                c.text_dim
            )));
        }
        Ok(())
    }

    /// `[vision(I1); vision(I2); text(C)]`.
    pub fn build_rm_input(&self, left: &[f64], right: &[f64], prompt: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(left, right, prompt)?;
        let mut out = affine(&self.w_vision, &self.b_vision, left)?;
        out.extend(affine(&self.w_vision, &self.b_vision, right)?);
        out.extend(affine(&self.w_text, &self.b_text, prompt)?);
        Ok(out)
    }

    /// Trunk output `h`.
    pub fn hidden(&self, left: &[f64], right: &[f64], prompt: &[f64]) -> Result<Vec<f64>> {
        let x = self.build_rm_input(left, right, prompt)?;
        let mut h = affine(&self.w_trunk1, &self.b_trunk1, &x)?;
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut h = affine(&self.w_trunk2, &self.b_trunk2, &h)?;
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok(h)
    }

    pub fn compare_pair(&self, left: &[f64], right: &[f64], prompt: &[f64]) -> Result<RewardOutput> {
        let h = self.hidden(left, right, prompt)?;
        let p = softmax(&affine(&self.w_cls, &self.b_cls, &h)?)?;
        let c = affine(&self.w_ctr, &self.b_ctr, &h)?;
        Ok(RewardOutput {
            p: [p[0], p[1]],
            ctr_hat: [c[0], c[1]],
        })
    }

    /// Records `(comparison logits, ctr_hat)` for one pair.
    fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], ex: &RmExample) -> Result<(Var, Var)> {
        self.check_inputs(&ex.left_image, &ex.right_image, &ex.prompt_embedding)?;
        let [wv, bv, wt, bt, w1, b1, w2, b2, wc, bc, wr, br] = vars else {
            return Err(Error::Dimension(format!("expected 12 reward variables, got {}", vars.len())));
        };
        let encode = |tape: &mut Tape, w: Var, b: Var, x: &[f64]| -> Result<Var> {
            let x = tape.leaf(Tensor::vector(x.to_vec())?);
            let m = tape.matvec(w, x)?;
            tape.add(m, b)
        };
        let e1 = encode(tape, *wv, *bv, &ex.left_image)?;
        let e2 = encode(tape, *wv, *bv, &ex.right_image)?;
        let et = encode(tape, *wt, *bt, &ex.prompt_embedding)?;
        let x = tape.concat(&[e1, e2, et])?;
        let a1 = tape.matvec(*w1, x)?;
        let a1 = tape.add(a1, *b1)?;
        let h1 = tape.tanh(a1)?;
        let a2 = tape.matvec(*w2, h1)?;
        let a2 = tape.add(a2, *b2)?;
        let h = tape.tanh(a2)?;
        let lc = tape.matvec(*wc, h)?;
        let logits = tape.add(lc, *bc)?;
        let lr = tape.matvec(*wr, h)?;
        let ctr = tape.add(lr, *br)?;
        Ok((logits, ctr))
    }

    /// `λ1·Σ_i −t_iᵀ log p_i + λ2·(1/N)·Σ_i ‖ctr_hat_i − t̂_i‖²` on a tape.
    pub fn rm_loss_on_tape(&self, tape: &mut Tape, vars: &[Var], batch: &[RmExample], cfg: &RmLossConfig) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Config("empty reward-model batch".into()));
        }
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut point_terms = Vec::with_capacity(batch.len());
        for ex in batch {
            ex.label()?;
            let (logits, ctr) = self.forward_on_tape(tape, vars, ex)?;
            let lsm = tape.log_softmax(logits)?;
            let t = tape.leaf(Tensor::vector(ex.target.to_vec())?);
            ce_terms.push(tape.dot(t, lsm)?);
            let target = tape.leaf(Tensor::vector(ex.ctr_target.to_vec())?);
            let diff = tape.sub(ctr, target)?;
            point_terms.push(tape.dot(diff, diff)?);
        }
        let ce = tape.add_all(&ce_terms)?;
        let ce = tape.scale(ce, -cfg.ce_weight)?;
        let point = tape.add_all(&point_terms)?;
        let point = tape.scale(point, cfg.point_weight / batch.len() as f64)?;
        tape.add(ce, point)
    }

    /// Loss value computed without a tape.
    pub fn rm_loss(&self, batch: &[RmExample], cfg: &RmLossConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty reward-model batch".into()));
        }
        let (mut ce, mut point) = (0.0, 0.0);
        for ex in batch {
            let label = ex.label()?;
            let out = self.compare_pair(&ex.left_image, &ex.right_image, &ex.prompt_embedding)?;
            ce -= out.p[label.index()].ln();
            point += (out.ctr_hat[0] - ex.ctr_target[0]).powi(2) + (out.ctr_hat[1] - ex.ctr_target[1]).powi(2);
        }
        Ok(cfg.ce_weight * ce + cfg.point_weight * point / batch.len() as f64)
    }

    pub fn predict(&self, ex: &RmExample) -> Result<PairLabel> {
        Ok(self
            .compare_pair(&ex.left_image, &ex.right_image, &ex.prompt_embedding)?
            .predicted())
    }
}

/// Fraction of pairs whose predicted side matches the label.
pub fn pair_accuracy_from(predicted: &[PairLabel], labels: &[PairLabel]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn pair_accuracy(params: &RewardParams, examples: &[RmExample]) -> Result<f64> {
    let predicted = examples.iter().map(|ex| params.predict(ex)).collect::<Result<Vec<_>>>()?;
    let labels = examples.iter().map(RmExample::label).collect::<Result<Vec<_>>>()?;
    pair_accuracy_from(&predicted, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmTrainConfig {
    pub loss: RmLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Autoencoder warm start for both encoders.
    pub pretrain_encoders: bool,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            loss: RmLossConfig::default(),
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(0.003),
            pretrain_encoders: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub pair_accuracy: f64,
}

/// Mini-batch training. Each epoch reshuffles the pairs and flips each
/// pair's left/right placement with probability one half. Row 0 of the
/// report describes the model before any update.
pub fn train_rm(
    mut params: RewardParams,
    train: &[RmExample],
    heldout: &[RmExample],
    config: &RmTrainConfig,
    seed: u64,
) -> Result<(RewardParams, Vec<RmEpochRow>)> {
    if train.is_empty() {
        return Err(Error::Config("reward model needs training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if config.pretrain_encoders {
        pretrain_encoders(&mut params, train, seeds::derive(seed, "reward/autoencoder"))?;
    }
    let heldout_accuracy = |p: &RewardParams| -> Result<f64> {
        if heldout.is_empty() {
            Ok(f64::NAN)
        } else {
            pair_accuracy(p, heldout)
        }
    };
    let mut rows = vec![RmEpochRow {
        epoch: 0,
        train_loss: params.rm_loss(train, &config.loss)? / train.len() as f64,
        pair_accuracy: heldout_accuracy(&params)?,
    }];
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params.tensors())?;
    let mut rng = seeds::stream(seed, "reward/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<RmExample> = chunk
                .iter()
                .map(|&i| {
                    if rng.random::<bool>() {
                        train[i].swapped()
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let loss = params.rm_loss_on_tape(&mut tape, &vars, &batch, &config.loss)?;
            total += tape.item(loss);
            let grads = collect_grads(&tape.backward(loss)?, &vars);
            optimizer.step(&mut params.tensors_mut(), &grads)?;
        }
        rows.push(RmEpochRow {
            epoch,
            train_loss: total / train.len() as f64,
            pair_accuracy: heldout_accuracy(&params)?,
        });
    }
    Ok((params, rows))
}

/// Fits both encoders as linear autoencoders of the training images and
/// prompts; the decoders are discarded.
pub fn pretrain_encoders(params: &mut RewardParams, examples: &[RmExample], seed: u64) -> Result<()> {
    let images: Vec<&[f64]> = examples
        .iter()
        .flat_map(|e| [e.left_image.as_slice(), e.right_image.as_slice()])
        .collect();
    let prompts: Vec<&[f64]> = examples.iter().map(|e| e.prompt_embedding.as_slice()).collect();
    let (w, b) = fit_autoencoder(&params.w_vision, &params.b_vision, &images, seeds::derive(seed, "vision"))?;
    params.w_vision = w;
    params.b_vision = b;
    let (w, b) = fit_autoencoder(&params.w_text, &params.b_text, &prompts, seeds::derive(seed, "text"))?;
    params.w_text = w;
    params.b_text = b;
    Ok(())
}

fn fit_autoencoder(w: &Tensor, b: &Tensor, data: &[&[f64]], seed: u64) -> Result<(Tensor, Tensor)> {
    let (code, dim) = (w.rows(), w.cols());
    let mut rng = seeds::rng(seed);
    let mut params = vec![
        w.clone(),
        b.clone(),
        Tensor::randn(&[dim, code], 1.0 / (code as f64).sqrt(), &mut rng),
        Tensor::zeros(&[dim]),
    ];
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &params.iter().collect::<Vec<_>>())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..5 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.leaf(Tensor::vector(data[i].to_vec())?);
                let z = tape.matvec(vars[0], x)?;
                let z = tape.add(z, vars[1])?;
                let r = tape.matvec(vars[2], z)?;
                let r = tape.add(r, vars[3])?;
                let d = tape.sub(r, x)?;
                terms.push(tape.dot(d, d)?);
            }
            let s = tape.add_all(&terms)?;
            let loss = tape.scale(s, 1.0 / chunk.len() as f64)?;
            let grads = collect_grads(&tape.backward(loss)?, &vars);
            opt.step(&mut params.iter_mut().collect::<Vec<_>>(), &grads)?;
        }
    }
    let mut it = params.into_iter();
    Ok((it.next().expect("four tensors"), it.next().expect("four tensors")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn random_example(rng: &mut impl Rng, c: &RewardConfig) -> RmExample {
        let label = if rng.random::<bool>() { PairLabel::LeftHigher } else { PairLabel::RightHigher };
        RmExample::new(
            random_vec(rng, c.image_dim),
            random_vec(rng, c.image_dim),
            random_vec(rng, c.text_dim),
            label,
            [rng.random::<f64>() * 0.3, rng.random::<f64>() * 0.3],
        )
    }

    #[test]
    fn zero_inputs_give_zero_features() {
        let p = RewardParams::init(RewardConfig::default(), 1);
        let x = p.build_rm_input(&[0.0; IMAGE_DIM], &[0.0; IMAGE_DIM], &[0.0; CONTEXT_DIM]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        assert!(p.build_rm_input(&[0.0; 3], &[0.0; IMAGE_DIM], &[0.0; CONTEXT_DIM]).is_err());
    }

    #[test]
    fn swapping_images_permutes_blocks() {
        let p = RewardParams::init(RewardConfig::default(), 2);
        let mut rng = seeds::rng(2);
        let ex = random_example(&mut rng, &p.config);
        let a = p.build_rm_input(&ex.left_image, &ex.right_image, &ex.prompt_embedding).unwrap();
        let b = p.build_rm_input(&ex.right_image, &ex.left_image, &ex.prompt_embedding).unwrap();
        let d = p.config.vision_dim;
        assert_eq!(a[..d], b[d..2 * d]);
        assert_eq!(a[d..2 * d], b[..d]);
        assert_eq!(a[2 * d..], b[2 * d..]);
    }

    #[test]
    fn zero_heads_are_uniform() {
        let cfg = RewardConfig {
            zero_heads: true,
            ..RewardConfig::default()
        };
        let p = RewardParams::init(cfg, 3);
        let mut rng = seeds::rng(3);
        let ex = random_example(&mut rng, &p.config);
        let out = p.compare_pair(&ex.left_image, &ex.right_image, &ex.prompt_embedding).unwrap();
        assert_eq!(out.p, [0.5, 0.5]);
        assert_eq!(out.predicted(), PairLabel::LeftHigher);
    }

    #[test]
    fn closed_form_losses() {
        let cfg = RewardConfig {
            zero_heads: true,
            ..RewardConfig::default()
        };
        let p = RewardParams::init(cfg, 4);
        let mut rng = seeds::rng(4);
        let ex = random_example(&mut rng, &p.config);
        let ce_only = RmLossConfig {
            ce_weight: 1.0,
            point_weight: 0.0,
        };
        assert_abs_diff_eq!(p.rm_loss(&[ex.clone()], &ce_only).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);

        // Zero heads predict ctr_hat = 0; aim the target 0.1 away on the left.
        let mut off = ex.clone();
        off.ctr_target = [-0.1, 0.0];
        let point_only = RmLossConfig {
            ce_weight: 0.0,
            point_weight: 0.5,
        };
        assert_abs_diff_eq!(p.rm_loss(&[off], &point_only).unwrap(), 0.005, epsilon = 1e-15);

        let mut exact = ex;
        exact.ctr_target = [0.0, 0.0];
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let v = p.rm_loss_on_tape(&mut tape, &vars, &[exact], &point_only).unwrap();
        assert_eq!(tape.item(v), 0.0);
    }

    #[test]
    fn non_one_hot_label_rejected() {
        let p = RewardParams::init(RewardConfig::default(), 5);
        let mut rng = seeds::rng(5);
        let mut ex = random_example(&mut rng, &p.config);
        ex.target = [0.5, 0.5];
        assert!(matches!(p.rm_loss(&[ex], &RmLossConfig::default()), Err(Error::Label(_))));
    }

    #[test]
    fn tape_loss_matches_plain_loss_and_gradients_check() {
        let p = RewardParams::init(RewardConfig::toy(), 6);
        let mut rng = seeds::rng(6);
        let batch: Vec<RmExample> = (0..3).map(|_| random_example(&mut rng, &p.config)).collect();
        let cfg = RmLossConfig::default();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let v = p.rm_loss_on_tape(&mut tape, &vars, &batch, &cfg).unwrap();
        assert_abs_diff_eq!(tape.item(v), p.rm_loss(&batch, &cfg).unwrap(), epsilon = 1e-12);

        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let report = grad_check(|t, vs| p.rm_loss_on_tape(t, vs, &batch, &cfg), &params, 1e-6, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn separable_world_is_learned() {
        // Labels are the sign of a fixed linear score difference with a margin;
        // CTR targets follow a steep logistic of the same score.
        let mut rng = seeds::rng(8);
        let direction = random_vec(&mut rng, IMAGE_DIM);
        let score = |x: &[f64]| x.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>();
        let mut make = |n: usize| -> Vec<RmExample> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let (l, r) = (random_vec(&mut rng, IMAGE_DIM), random_vec(&mut rng, IMAGE_DIM));
                let (sl, sr) = (score(&l), score(&r));
                if (sl - sr).abs() < 0.5 {
                    continue;
                }
                let label = if sl > sr { PairLabel::LeftHigher } else { PairLabel::RightHigher };
                let ctr = |s: f64| crate::numerics::sigmoid(5.0 * s) * 0.2;
                out.push(RmExample::new(l, r, random_vec(&mut rng, CONTEXT_DIM), label, [ctr(sl), ctr(sr)]));
            }
            out
        };
        let (train, test) = (make(1000), make(400));
        let init = RewardParams::init(RewardConfig::default(), 8);
        let (_, rows) = train_rm(init, &train, &test, &RmTrainConfig::default(), 8).unwrap();
        let acc = rows.last().unwrap().pair_accuracy;
        assert!(acc > 0.9, "held-out accuracy {acc}");
    }

    #[test]
    fn accuracy_arithmetic() {
        use PairLabel::*;
        let labels = [LeftHigher, RightHigher, LeftHigher, LeftHigher];
        let pred = [LeftHigher, RightHigher, RightHigher, LeftHigher];
        assert_eq!(pair_accuracy_from(&pred, &labels).unwrap(), 0.75);
        assert_eq!(pair_accuracy_from(&labels, &labels).unwrap(), 1.0);
        assert!(pair_accuracy_from(&[], &[]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let p = RewardParams::init(RewardConfig::default(), 7);
        let mut rng = seeds::rng(7);
        let train: Vec<RmExample> = (0..20).map(|_| random_example(&mut rng, &p.config)).collect();
        let cfg = RmTrainConfig {
            epochs: 2,
            optimizer: OptimizerConfig::sgd(0.0),
            ..RmTrainConfig::default()
        };
        let (trained, rows) = train_rm(p.clone(), &train, &train, &cfg, 1).unwrap();
        assert_eq!(trained, p);
        assert_eq!(rows.len(), 3);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn label(b: bool) -> PairLabel {
        if b {
            PairLabel::LeftHigher
        } else {
            PairLabel::RightHigher
        }
    }

    proptest! {
        #[test]
        fn accuracy_is_a_fraction_and_complements_under_flip(
            pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200),
        ) {
            let predicted: Vec<PairLabel> = pairs.iter().map(|p| label(p.0)).collect();
            let labels: Vec<PairLabel> = pairs.iter().map(|p| label(p.1)).collect();
            let acc = pair_accuracy_from(&predicted, &labels).unwrap();
            let hits = pairs.iter().filter(|p| p.0 == p.1).count();
            prop_assert_eq!(acc, hits as f64 / pairs.len() as f64);
            let flipped: Vec<PairLabel> = predicted.iter().map(|p| p.flipped()).collect();
            let back = pair_accuracy_from(&flipped, &labels).unwrap();
            prop_assert!((acc + back - 1.0).abs() < 1e-12);
        }
    }
}
