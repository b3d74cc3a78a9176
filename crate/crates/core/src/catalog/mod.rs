//! Synthetic product universe, instruct-prompt serialization and pairwise
//! click datasets.

mod clicks;
mod prompt;

pub use clicks::{
    filter_pairs, partition_products, relative_ctr_difference, split_by_products,
    split_train_test, ClickRecord, PairLabel, PairSample, PairThresholds,
};
pub use prompt::{
    InstructPrompt, ModelKind, PromptBuilder, PromptFields, PromptVocab, Template,
    TemplateRegistry,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dims::{IMAGE_DIM, NUM_ATTRS, TITLE_MAX_LEN, VOCAB_SIZE};
use crate::seeds;

/// A product: category, tokenized title, numeric attributes and the
/// features of its transparent-background image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: u32,
    pub category: u32,
    pub title: Vec<u32>,
    /// Price, rating, log review count, discount; all quantized to one
    /// decimal so their textual form is exact.
    pub numeric_attrs: Vec<f64>,
    pub image_feature: Vec<f64>,
}

/// Shape of the generated product distribution.
///
/// Image features are `mean_scale·μ + category_scale·c_k + noise_scale·ε`
/// with a catalog-wide direction `μ`, one centroid `c_k` per category and
/// per-product noise `ε`, all standard normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogConfig {
    pub categories: u32,
    pub mean_scale: f64,
    pub category_scale: f64,
    pub noise_scale: f64,
    /// Probability that a title token comes from the category's own pool.
    pub title_affinity: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            categories: crate::dims::CATEGORIES,
            mean_scale: 1.0,
            category_scale: 1.0,
            noise_scale: 0.6,
            title_affinity: 0.75,
        }
    }
}

impl CatalogConfig {
    pub fn with_categories(categories: u32) -> Self {
        Self {
            categories,
            ..Self::default()
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Generates `count` products with ids `0..count` using the default
/// distribution and `categories` categories.
pub fn generate_catalog(seed: u64, count: usize, categories: u32) -> Vec<Product> {
    generate_catalog_with(seed, count, &CatalogConfig::with_categories(categories))
}

/// Generates a catalog. Categories are dealt round-robin and shuffled, so
/// each category receives `count / K` or `count / K + 1` products.
pub fn generate_catalog_with(seed: u64, count: usize, config: &CatalogConfig) -> Vec<Product> {
    let k = config.categories.max(1) as usize;
    let mut shared = seeds::stream(seed, "catalog/shared");
    let draw = |rng: &mut seeds::StreamRng| -> Vec<f64> {
        (0..IMAGE_DIM).map(|_| rng.sample(StandardNormal)).collect()
    };
    let mean = draw(&mut shared);
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| draw(&mut shared)).collect();

    let mut categories: Vec<u32> = (0..count).map(|i| (i % k) as u32).collect();
    categories.shuffle(&mut seeds::stream(seed, "catalog/categories"));

    let pool = (VOCAB_SIZE / k).max(1);
    (0..count)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive_indexed(seed, "catalog/product", i as u64));
            let category = categories[i];
            let c = category as usize;

            let title_len = rng.random_range(3..=TITLE_MAX_LEN);
            let title = (0..title_len)
                .map(|_| {
                    if rng.random::<f64>() < config.title_affinity {
                        ((c * pool + rng.random_range(0..pool)) % VOCAB_SIZE) as u32
                    } else {
                        rng.random_range(0..VOCAB_SIZE) as u32
                    }
                })
                .collect();

            let log_price = Normal::<f64>::new(2.5 + 0.25 * c as f64, 0.4).expect("valid normal");
            let rating = Normal::<f64>::new(4.2, 0.4).expect("valid normal");
            let numeric_attrs = vec![
                quantize(log_price.sample(&mut rng).exp()),
                quantize(rating.sample(&mut rng).clamp(1.0_f64, 5.0)),
                quantize(rng.random_range(1.0..5.0)),
                quantize(rng.random_range(0.0..0.5)),
            ];
            debug_assert_eq!(numeric_attrs.len(), NUM_ATTRS);

            let image_feature = (0..IMAGE_DIM)
                .map(|d| {
                    config.mean_scale * mean[d]
                        + config.category_scale * centroids[c][d]
                        + config.noise_scale * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();

            Product {
                id: i as u32,
                category,
                title,
                numeric_attrs,
                image_feature,
            }
        })
        .collect()
}
