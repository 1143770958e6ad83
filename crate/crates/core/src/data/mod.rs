//! Synthetic paired phantoms, PGM image files, dataset manifests and the
//! checkpoint container.

mod checkpoint;
mod manifest;
mod phantom;
mod pgm;

pub use checkpoint::{
    fnv1a64, load_checkpoint, save_checkpoint, Checkpoint, LossRecord, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use manifest::{
    generate_dataset, load_split, read_manifest, write_manifest, DatasetSpec, ManifestRecord,
    Split,
};
pub use phantom::{edge_map, edge_iou, generate_phantom_pair, modality_map, PairedSample};
pub use pgm::{decode_pgm, encode_pgm, load_image_pgm, save_image_pgm};
