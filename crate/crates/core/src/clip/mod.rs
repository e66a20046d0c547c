//! Toy dual-encoder model, its dataset and training loop.

mod data;
mod model;
mod text;
mod train;

pub use data::{
    caption, class_balanced_batches, class_index, class_name, class_parts, generate_dataset, mask_contrast,
    normalize_pixels, render, ShapesDataset, ShapesSplit, COLORS, IMAGE_SIZE, NUM_CLASSES, SHAPES,
};
pub use model::{
    is_buffer, BnMode, Bound, Capture, ClipModel, Encoder, Fp, ImageOutput, LayerHook, LayerInfo, LayerKind,
    ModelConfig, Variant, BN_EPS, MAX_LOGIT_SCALE,
};
pub use text::{calibration_texts, class_prompts, prompt_set, Tokenizer, END, MAX_LEN, PAD, TEMPLATES, UNK};
pub use train::{
    classify_embeddings, clip_loss, encode_image, encode_text, lr_at, pretrain_clip, tokenize_all, zero_shot_classify,
    PretrainConfig, PretrainReport, ZeroShotResult, ENCODE_CHUNK,
};
