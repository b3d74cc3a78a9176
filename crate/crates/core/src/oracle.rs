//! Hidden ground-truth click world.
//!
//! A product's ideal background direction is `Sᵀ·f` for a hidden style
//! matrix `S` and the product's image features `f`. A background with
//! embedding `e` has compatibility `κ = cos(Sᵀf, e)` and true CTR
//! `σ(b_cat + w·κ)`. Clicks are binomial draws at that rate and a simulated
//! annotator accepts a background when `κ ≥ τ`.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{PairLabel, Product};
use crate::dims::{CATEGORIES, CONTEXT_DIM, IMAGE_DIM};
use crate::numerics::{cosine, sigmoid, Tensor};
use crate::{seeds, Error, Result};

/// Distribution the oracle parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub categories: u32,
    pub compatibility_gain: f64,
    pub base_logodds_mean: f64,
    pub base_logodds_std: f64,
    /// Placeholder until calibration against a policy.
    pub annotator_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            categories: CATEGORIES,
            compatibility_gain: 2.0,
            base_logodds_mean: -2.5,
            base_logodds_std: 0.5,
            annotator_threshold: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub category_base_logodds: Vec<f64>,
    pub compatibility_gain: f64,
    /// `d_f × d_c`.
    pub style: Tensor,
    pub annotator_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickOutcome {
    pub exposures: u64,
    pub clicks: u64,
    pub true_ctr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchJudgement {
    Match,
    Mismatch,
}

impl OracleParams {
    pub fn new(
        category_base_logodds: Vec<f64>,
        compatibility_gain: f64,
        style: Tensor,
        annotator_threshold: f64,
    ) -> Result<Self> {
        if category_base_logodds.is_empty() || category_base_logodds.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("base log-odds must be finite and non-empty".into()));
        }
        if !(compatibility_gain > 0.0 && compatibility_gain.is_finite()) {
            return Err(Error::Config(format!("compatibility gain {compatibility_gain} must be positive")));
        }
        if style.rank() != 2 || style.rows() != IMAGE_DIM || style.cols() != CONTEXT_DIM {
            return Err(Error::Dimension(format!("style matrix of shape {:?}", style.shape())));
        }
        check_threshold(annotator_threshold)?;
        Ok(Self {
            category_base_logodds,
            compatibility_gain,
            style,
            annotator_threshold,
        })
    }

    /// Draws base rates and the style matrix from the world seed.
    pub fn generate(seed: u64, config: &OracleConfig) -> Result<Self> {
        let mut rng = seeds::stream(seed, "oracle/style");
        let style = Tensor::randn(&[IMAGE_DIM, CONTEXT_DIM], 1.0, &mut rng);
        let base = Normal::new(config.base_logodds_mean, config.base_logodds_std)
            .map_err(|e| Error::Config(format!("base log-odds distribution: {e}")))?;
        let mut rng = seeds::stream(seed, "oracle/base");
        let category_base_logodds = (0..config.categories.max(1)).map(|_| base.sample(&mut rng)).collect();
        Self::new(category_base_logodds, config.compatibility_gain, style, config.annotator_threshold)
    }

    pub fn with_threshold(mut self, tau: f64) -> Result<Self> {
        check_threshold(tau)?;
        self.annotator_threshold = tau;
        Ok(self)
    }

    /// Copy with `delta` added to one category's base log-odds.
    pub fn with_category_shift(&self, category: u32, delta: f64) -> Result<Self> {
        let mut out = self.clone();
        let slot = out
            .category_base_logodds
            .get_mut(category as usize)
            .ok_or_else(|| Error::Config(format!("unknown category {category}")))?;
        *slot += delta;
        Ok(out)
    }

    fn base(&self, product: &Product) -> Result<f64> {
        self.category_base_logodds
            .get(product.category as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown category {}", product.category)))
    }

    /// `Sᵀ·f`, the background direction this product is most compatible with.
    pub fn ideal_direction(&self, product: &Product) -> Result<Vec<f64>> {
        self.style.t_matvec(&product.image_feature)
    }

    /// `κ = cos(Sᵀf, e)`.
    pub fn compatibility(&self, product: &Product, background: &[f64]) -> Result<f64> {
        if background.len() != CONTEXT_DIM {
            return Err(Error::Dimension(format!(
                "background embedding of length {} (expected {CONTEXT_DIM})",
                background.len()
            )));
        }
        let ideal = self.ideal_direction(product)?;
        cosine(&ideal, background).ok_or_else(|| {
            Error::DegenerateInput(format!("zero-norm vector in compatibility for product {}", product.id))
        })
    }

    pub fn ctr_from_compatibility(&self, product: &Product, kappa: f64) -> Result<f64> {
        Ok(sigmoid(self.base(product)? + self.compatibility_gain * kappa))
    }

    pub fn true_ctr(&self, product: &Product, background: &[f64]) -> Result<f64> {
        let kappa = self.compatibility(product, background)?;
        self.ctr_from_compatibility(product, kappa)
    }

    /// `clicks ~ Binomial(exposures, true_ctr)` from a seeded stream.
    pub fn simulate_clicks(
        &self,
        product: &Product,
        background: &[f64],
        exposures: u64,
        seed: u64,
    ) -> Result<ClickOutcome> {
        let true_ctr = self.true_ctr(product, background)?;
        let clicks = draw_clicks(exposures, true_ctr, &mut seeds::rng(seed))?;
        Ok(ClickOutcome {
            exposures,
            clicks,
            true_ctr,
        })
    }

    pub fn annotate_match(&self, product: &Product, background: &[f64]) -> Result<MatchJudgement> {
        let kappa = self.compatibility(product, background)?;
        Ok(if kappa >= self.annotator_threshold {
            MatchJudgement::Match
        } else {
            MatchJudgement::Mismatch
        })
    }

    /// Side with the larger true CTR.
    pub fn pairwise_label(&self, product: &Product, left: &[f64], right: &[f64]) -> Result<PairLabel> {
        let (a, b) = (self.true_ctr(product, left)?, self.true_ctr(product, right)?);
        PairLabel::from_values(a, b).ok_or(Error::Tie(a))
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if tau > -1.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("annotator threshold {tau} outside (-1, 1)")))
    }
}

pub fn draw_clicks<R: Rng + ?Sized>(exposures: u64, ctr: f64, rng: &mut R) -> Result<u64> {
    if exposures == 0 {
        return Ok(0);
    }
    let dist = Binomial::new(exposures, ctr)
        .map_err(|e| Error::Evaluation(format!("binomial({exposures}, {ctr}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Threshold `τ` such that a fraction `target_rate` of `kappas` satisfies
/// `κ ≥ τ` (up to ties and rounding to whole items).
pub fn calibrate_threshold(kappas: &[f64], target_rate: f64) -> Result<f64> {
    if kappas.is_empty() {
        return Err(Error::DegenerateInput("no compatibilities to calibrate on".into()));
    }
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(Error::Config(format!("target match rate {target_rate} outside (0, 1]")));
    }
    let mut sorted = kappas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = (((1.0 - target_rate) * n as f64).round() as usize).min(n - 1);
    Ok(sorted[idx].clamp(-1.0 + 1e-9, 1.0 - 1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::generate_catalog;
    use approx::assert_abs_diff_eq;

    fn world() -> (OracleParams, Vec<Product>) {
        let params = OracleParams::generate(3, &OracleConfig::default()).unwrap();
        (params, generate_catalog(3, 16, 8))
    }

    fn orthogonal_to(v: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; v.len()];
        u[0] = v[1];
        u[1] = -v[0];
        u
    }

    #[test]
    fn zero_compatibility_at_zero_base_is_half() {
        let (mut params, catalog) = world();
        let p = &catalog[0];
        params.category_base_logodds[p.category as usize] = 0.0;
        let bg = orthogonal_to(&params.ideal_direction(p).unwrap());
        assert_abs_diff_eq!(params.compatibility(p, &bg).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(params.true_ctr(p, &bg).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn scale_invariance_and_known_value() {
        let (mut params, catalog) = world();
        let p = &catalog[1];
        let bg: Vec<f64> = (0..CONTEXT_DIM).map(|i| (i as f64 * 0.7).sin()).collect();
        let scaled: Vec<f64> = bg.iter().map(|x| 3.0 * x).collect();
        assert_eq!(params.true_ctr(p, &bg).unwrap(), params.true_ctr(p, &scaled).unwrap());

        params.category_base_logodds[p.category as usize] = 1.0;
        params.compatibility_gain = 2.0;
        let ctr = params.ctr_from_compatibility(p, 0.5).unwrap();
        assert_abs_diff_eq!(ctr, 0.8807970779778824, epsilon = 1e-15);
    }

    #[test]
    fn zero_background_is_degenerate() {
        let (params, catalog) = world();
        let err = params.true_ctr(&catalog[0], &[0.0; CONTEXT_DIM]);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn click_simulation() {
        let (mut params, catalog) = world();
        let p = &catalog[2];
        let bg: Vec<f64> = (0..CONTEXT_DIM).map(|i| i as f64 - 7.5).collect();
        assert_eq!(params.simulate_clicks(p, &bg, 0, 1).unwrap().clicks, 0);
        assert_eq!(
            params.simulate_clicks(p, &bg, 5000, 9).unwrap(),
            params.simulate_clicks(p, &bg, 5000, 9).unwrap()
        );

        params.category_base_logodds[p.category as usize] = 0.0;
        let half = orthogonal_to(&params.ideal_direction(p).unwrap());
        let out = params.simulate_clicks(p, &half, 100_000, 4).unwrap();
        assert!((out.clicks as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn annotator_extremes() {
        let (params, catalog) = world();
        let params = params.with_threshold(0.3).unwrap();
        let p = &catalog[4];
        let ideal = params.ideal_direction(p).unwrap();
        let negated: Vec<f64> = ideal.iter().map(|x| -x).collect();
        assert_eq!(params.annotate_match(p, &ideal).unwrap(), MatchJudgement::Match);
        assert_eq!(params.annotate_match(p, &negated).unwrap(), MatchJudgement::Mismatch);
        assert!(params.clone().with_threshold(1.0).is_err());
    }

    #[test]
    fn pairwise_label_and_ties() {
        let (params, catalog) = world();
        let p = &catalog[5];
        let ideal = params.ideal_direction(p).unwrap();
        let side = orthogonal_to(&ideal);
        // Mix toward the ideal direction with cosines about 0.9 and 0.1.
        let mix = |c: f64| -> Vec<f64> {
            let (ni, ns) = (crate::numerics::norm(&ideal), crate::numerics::norm(&side));
            let s = (1.0 - c * c).sqrt();
            ideal.iter().zip(&side).map(|(a, b)| c * a / ni + s * b / ns).collect()
        };
        let (hi, lo) = (mix(0.9), mix(0.1));
        assert_eq!(params.pairwise_label(p, &hi, &lo).unwrap(), PairLabel::LeftHigher);
        assert_eq!(params.pairwise_label(p, &lo, &hi).unwrap(), PairLabel::RightHigher);
        let shifted = params.with_category_shift(p.category, 2.0).unwrap();
        assert_eq!(shifted.pairwise_label(p, &hi, &lo).unwrap(), PairLabel::LeftHigher);
        assert!(matches!(params.pairwise_label(p, &hi, &hi), Err(Error::Tie(_))));
    }

    #[test]
    fn calibration_hits_target_rate() {
        let kappas: Vec<f64> = (0..1000).map(|i| (i as f64 / 999.0) * 1.8 - 0.9).collect();
        let tau = calibrate_threshold(&kappas, 0.842).unwrap();
        let rate = kappas.iter().filter(|&&k| k >= tau).count() as f64 / 1000.0;
        assert_abs_diff_eq!(rate, 0.842, epsilon = 1e-3);
        assert!(calibrate_threshold(&[], 0.5).is_err());
    }
}
