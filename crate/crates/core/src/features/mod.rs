//! Dense per-pixel ViT features via strided overlap accumulation.

mod extract;
mod map;
mod vit;
mod weights;

pub use extract::{
    dense_backward, extract_with_offsets, reflect101, strided_dense_extract, strided_dense_extract_full,
    view_offsets, DenseExtraction, View,
};
pub use map::DenseFeatureMap;
pub use vit::{
    inject_lora, make_toy_backbone, patchify, sincos_position, LoraAdapter, ProjectionTarget, TokenGrid,
    VitBackbone, VitCache, VitConfig,
};
pub use weights::{backbone_from_tensors, backbone_to_tensors, load_backbone, load_backbone_or_toy, TensorFile};

/// The backbone type consumed by extraction and test-time optimization.
pub type BackboneHandle = VitBackbone;
