//! Protocol files, the synthetic corpus generator, and checkpoints.

mod checkpoint;
mod protocol;
mod synth;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use protocol::{attack_map, format_protocol, parse_protocol, parse_protocol_str, write_protocol, Trial};
pub use synth::{
    attacks, plan, render, synth_corpus, ArtifactDetector, ArtifactRanges, Artifacts, Attack, Planned, Split,
    SynthConfig, SynthOutput, HARMONIC_CEILING_HZ,
};
