//! Synthetic source tasks, severity-graded corruptions and ordered test
//! streams.

mod corrupt;
mod io;
mod stream;
mod task;

pub use corrupt::{
    apply_corruption, apply_with_strength, feature_std, CorruptionKind, CorruptionSpec,
    CONTRAST_LEVELS, NOISE_LEVELS, ROTATION_DEGREES,
};
pub(crate) use io::Reader;
pub use io::{
    decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use stream::{make_stream, Batch, Stream, StreamOrder, StreamSpec};
pub use task::{gen_source, Dataset, SourceTask};
