//! Fixed sizes of the simulated world.

/// Title and background-description token vocabulary.
pub const VOCAB_SIZE: usize = 64;
pub const CATEGORIES: u32 = 8;
/// Width of product image features and rendered images.
pub const IMAGE_DIM: usize = 16;
/// Width of prompt and description embeddings.
pub const CONTEXT_DIM: usize = 16;
/// Tokens per generated background description.
pub const DESCRIPTION_LEN: usize = 8;
pub const TITLE_MAX_LEN: usize = 6;
pub const NUM_ATTRS: usize = 4;
