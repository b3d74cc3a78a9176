//! Feature-space inpainting renderer.
//!
//! Starting from seeded Gaussian noise, each DDIM step
//!
//! ```text
//! x_t = √ᾱ_t · (x_{t+1} − √(1−ᾱ_{t+1})·ε) / √ᾱ_{t+1} + √(1−ᾱ_t)·ε
//! ```
//!
//! is followed by the product blend `(1−M)⊗x_t + M⊗x_o`, so the product
//! components of every latent equal the product features exactly. The noise
//! prediction is the linear pull `ε = γ·(x − lift(e))` toward the lifted
//! description embedding `e`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::Product;
use crate::dims::{CONTEXT_DIM, IMAGE_DIM};
use crate::numerics::Tensor;
use crate::{seeds, Error, Result};

pub const MASKED_COMPONENTS: usize = IMAGE_DIM / 2;

/// `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Schedule(format!("alpha_bar[0] = {} (expected 1)", alpha_bar[0])));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar must decrease strictly within (0, 1]; step {} has {} after {}",
                    t + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// `ᾱ_t = cos²((t/T)·(π/2)·0.95)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("zero steps".into()));
        }
        let t_max = steps as f64;
        Self::new(
            (0..=steps)
                .map(|t| {
                    let c = (t as f64 / t_max * std::f64::consts::FRAC_PI_2 * 0.95).cos();
                    if t == 0 {
                        1.0
                    } else {
                        c * c
                    }
                })
                .collect(),
        )
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// One DDIM update from `x_{t+1}` to `x_t` given the predicted noise.
pub fn ddim_update(x_next: &[f64], eps: &[f64], alpha_bar_t: f64, alpha_bar_next: f64) -> Vec<f64> {
    let (sa_t, sa_n) = (alpha_bar_t.sqrt(), alpha_bar_next.sqrt());
    let (sb_t, sb_n) = ((1.0 - alpha_bar_t).sqrt(), (1.0 - alpha_bar_next).sqrt());
    x_next
        .iter()
        .zip(eps)
        .map(|(&x, &e)| sa_t * (x - sb_n * e) / sa_n + sb_t * e)
        .collect()
}

/// `ε = γ·(x − target)`.
pub fn toy_denoiser(x: &[f64], target: &[f64], gamma: f64) -> Vec<f64> {
    x.iter().zip(target).map(|(a, b)| gamma * (a - b)).collect()
}

/// Binary product mask; `true` marks product components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductMask {
    bits: Vec<bool>,
}

impl ProductMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Fixed choice of [`MASKED_COMPONENTS`] components for a product id.
    pub fn for_product(product_id: u32) -> Self {
        let mut idx: Vec<usize> = (0..IMAGE_DIM).collect();
        idx.shuffle(&mut seeds::rng(seeds::derive_indexed(0, "renderer/mask", product_id as u64)));
        let mut bits = vec![false; IMAGE_DIM];
        for &i in &idx[..MASKED_COMPONENTS] {
            bits[i] = true;
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Indices of background (unmasked) components.
    pub fn background_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// `(1−M)⊗x + M⊗x_o`.
pub fn blend(x: &[f64], product: &[f64], mask: &ProductMask) -> Result<Vec<f64>> {
    if x.len() != product.len() || x.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "blend of lengths {}, {} with mask {}",
            x.len(),
            product.len(),
            mask.len()
        )));
    }
    Ok(x.iter()
        .zip(product)
        .zip(&mask.bits)
        .map(|((&a, &p), &m)| if m { p } else { a })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub steps: usize,
    pub gamma: f64,
    /// Standard deviation of the lift matrix entries.
    pub lift_scale: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            gamma: 0.5,
            lift_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Renderer {
    schedule: Schedule,
    /// `d_f × d_c`.
    lift: Tensor,
    gamma: f64,
}

impl Renderer {
    pub fn new(seed: u64, config: &RendererConfig) -> Result<Self> {
        let lift = Tensor::randn(&[IMAGE_DIM, CONTEXT_DIM], config.lift_scale, &mut seeds::stream(seed, "renderer/lift"));
        Self::with_parts(Schedule::cosine(config.steps)?, lift, config.gamma)
    }

    pub fn with_parts(schedule: Schedule, lift: Tensor, gamma: f64) -> Result<Self> {
        if lift.rank() != 2 || lift.rows() != IMAGE_DIM {
            return Err(Error::Dimension(format!("lift of shape {:?}", lift.shape())));
        }
        if !gamma.is_finite() {
            return Err(Error::NonFinite(format!("gamma {gamma}")));
        }
        Ok(Self { schedule, lift, gamma })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `lift · e`, the latent a description pulls the background toward.
    pub fn lift(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.lift.matvec(embedding)
    }

    /// Step from `x_{t+1}` to `x_t` for `t` in `0..T`.
    pub fn ddim_step(&self, t: usize, x_next: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        if t >= self.schedule.steps() {
            return Err(Error::Schedule(format!("step {t} outside 0..{}", self.schedule.steps())));
        }
        let ab = self.schedule.alpha_bar();
        let eps = toy_denoiser(x_next, target, self.gamma);
        Ok(ddim_update(x_next, &eps, ab[t], ab[t + 1]))
    }

    /// Every post-blend latent `x_{T−1}, …, x_0`; the last entry is `I_g`.
    pub fn render_trace(
        &self,
        product: &Product,
        mask: &ProductMask,
        embedding: &[f64],
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let target = self.lift(embedding)?;
        let mut rng = seeds::rng(seed);
        let mut x: Vec<f64> = (0..IMAGE_DIM).map(|_| rng.sample(StandardNormal)).collect();
        let mut trace = Vec::with_capacity(self.schedule.steps());
        for t in (0..self.schedule.steps()).rev() {
            x = blend(&self.ddim_step(t, &x, &target)?, &product.image_feature, mask)?;
            trace.push(x.clone());
        }
        Ok(trace)
    }

    pub fn render(&self, product: &Product, mask: &ProductMask, embedding: &[f64], seed: u64) -> Result<Vec<f64>> {
        let mut trace = self.render_trace(product, mask, embedding, seed)?;
        Ok(trace.pop().expect("schedule has at least one step"))
    }
}
