//! Config files, checkpoints and run-record directories.

mod checkpoint;
mod config;
mod records;

pub use checkpoint::{
    checkpoint_digest, load_checkpoint, read_manifest, save_checkpoint, Manifest, ParamEntry, SlotEntry, BLOB,
    MANIFEST,
};
pub use config::{load_config, write_echo, RunConfig};
pub use records::{
    append_jsonl, latest_checkpoint, read_record, DirSink, RunHeader, CHECKPOINT_DIR, LOSSES_FILE, RUN_FILE,
    STAGES_FILE, TIMINGS_FILE, VOCAB_FILE,
};
