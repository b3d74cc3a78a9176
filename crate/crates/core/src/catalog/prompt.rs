use serde::{Deserialize, Serialize};

use super::Product;
use crate::dims::{CONTEXT_DIM, NUM_ATTRS, VOCAB_SIZE};
use crate::numerics::Tensor;
use crate::{seeds, Error, Result};

const BUILTIN_TEMPLATES: &str = include_str!("templates.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Background-description generation (prompt model).
    Prompt,
    /// Left/right CTR comparison (reward model).
    Reward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Title,
    Category,
    Attributes,
}

/// A symbolic instruction: which model it addresses and the order in which
/// product fields are spliced into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: u32,
    pub model: ModelKind,
    pub layout: Vec<Field>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub templates: Vec<Template>,
}

impl TemplateRegistry {
    /// The bundled registry: 8 prompt-model and 13 reward-model instructions.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TEMPLATES).expect("bundled template registry is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(json)?;
        for (i, t) in reg.templates.iter().enumerate() {
            if t.id as usize != i {
                return Err(Error::Config(format!(
                    "template ids must be 0..n in order; entry {i} has id {}",
                    t.id
                )));
            }
        }
        Ok(reg)
    }

    pub fn get(&self, id: u32) -> Result<&Template> {
        self.templates.get(id as usize).ok_or(Error::Registry(id))
    }

    pub fn ids_for(&self, model: ModelKind) -> Vec<u32> {
        self.templates
            .iter()
            .filter(|t| t.model == model)
            .map(|t| t.id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Which product attributes are spliced into prompts. `caption` controls the
/// title; `extra` controls category and numeric attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFields {
    pub caption: bool,
    pub extra: bool,
}

impl Default for PromptFields {
    fn default() -> Self {
        Self {
            caption: true,
            extra: true,
        }
    }
}

impl PromptFields {
    pub fn none() -> Self {
        Self {
            caption: false,
            extra: false,
        }
    }

    fn includes(&self, field: Field) -> bool {
        match field {
            Field::Title => self.caption,
            Field::Category | Field::Attributes => self.extra,
        }
    }
}

/// Token layout of serialized prompts:
/// control markers, digits, question ids, categories, then title tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptVocab {
    pub questions: u32,
    pub categories: u32,
}

impl PromptVocab {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const FIELD_TITLE: u32 = 2;
    pub const FIELD_CATEGORY: u32 = 3;
    /// One marker per numeric attribute.
    pub const FIELD_ATTR: u32 = 4;
    const DIGITS: u32 = Self::FIELD_ATTR + NUM_ATTRS as u32;
    const DOT: u32 = Self::DIGITS + 10;
    const MINUS: u32 = Self::DOT + 1;
    const QUESTION_BASE: u32 = Self::MINUS + 1;

    fn question(&self, q: u32) -> u32 {
        Self::QUESTION_BASE + q
    }

    fn category(&self, c: u32) -> u32 {
        Self::QUESTION_BASE + self.questions + c
    }

    fn title(&self, t: u32) -> u32 {
        Self::QUESTION_BASE + self.questions + self.categories + t
    }

    pub fn size(&self) -> usize {
        (Self::QUESTION_BASE + self.questions + self.categories) as usize + VOCAB_SIZE
    }

    fn number(&self, v: f64, out: &mut Vec<u32>) {
        for ch in format!("{v:.1}").chars() {
            out.push(match ch {
                '.' => Self::DOT,
                '-' => Self::MINUS,
                d => Self::DIGITS + d.to_digit(10).expect("formatted float is decimal"),
            });
        }
    }
}

/// Instruct prompt: the question id, its deterministic token serialization
/// and the mean token embedding of that serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructPrompt {
    pub question_id: u32,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f64>,
}

/// Expands templates with product attributes and embeds the result with a
/// fixed, seeded token table.
#[derive(Clone, Debug)]
pub struct PromptBuilder {
    registry: TemplateRegistry,
    vocab: PromptVocab,
    table: Tensor,
    fields: PromptFields,
}

impl PromptBuilder {
    pub fn new(seed: u64, categories: u32) -> Self {
        Self::with_registry(seed, categories, TemplateRegistry::builtin())
    }

    pub fn with_registry(seed: u64, categories: u32, registry: TemplateRegistry) -> Self {
        let vocab = PromptVocab {
            questions: registry.len() as u32,
            categories,
        };
        let mut rng = seeds::stream(seed, "prompt/embedding");
        let table = Tensor::randn(&[vocab.size(), CONTEXT_DIM], 1.0, &mut rng);
        Self {
            registry,
            vocab,
            table,
            fields: PromptFields::default(),
        }
    }

    /// Same builder with a different attribute selection.
    pub fn with_fields(mut self, fields: PromptFields) -> Self {
        self.fields = fields;
        self
    }

    pub fn fields(&self) -> PromptFields {
        self.fields
    }

    pub fn registry(&self) -> &TemplateRegistry {
        &self.registry
    }

    pub fn vocab(&self) -> PromptVocab {
        self.vocab
    }

    /// Deterministic template expansion.
    pub fn serialize(&self, question_id: u32, product: &Product) -> Result<Vec<u32>> {
        let template = self.registry.get(question_id)?;
        let v = &self.vocab;
        let mut out = vec![PromptVocab::BOS, v.question(question_id)];
        for &field in &template.layout {
            if !self.fields.includes(field) {
                continue;
            }
            match field {
                Field::Title => {
                    out.push(PromptVocab::FIELD_TITLE);
                    out.extend(product.title.iter().map(|&t| v.title(t)));
                }
                Field::Category => {
                    out.push(PromptVocab::FIELD_CATEGORY);
                    out.push(v.category(product.category));
                }
                Field::Attributes => {
                    for (i, &a) in product.numeric_attrs.iter().enumerate() {
                        out.push(PromptVocab::FIELD_ATTR + i as u32);
                        v.number(a, &mut out);
                    }
                }
            }
        }
        out.push(PromptVocab::EOS);
        Ok(out)
    }

    pub fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let mut acc = vec![0.0; CONTEXT_DIM];
        for &t in tokens {
            for (a, x) in acc.iter_mut().zip(self.table.row(t as usize)) {
                *a += x;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.into_iter().map(|x| x / n).collect()
    }

    pub fn build(&self, question_id: u32, product: &Product) -> Result<InstructPrompt> {
        let tokens = self.serialize(question_id, product)?;
        let embedding = self.embed(&tokens);
        Ok(InstructPrompt {
            question_id,
            tokens,
            embedding,
        })
    }

    /// Template assigned to a product for a given model: templates of that
    /// kind are cycled by product id.
    pub fn question_for(&self, model: ModelKind, product_id: u32) -> u32 {
        let ids = self.registry.ids_for(model);
        ids[product_id as usize % ids.len()]
    }
}
