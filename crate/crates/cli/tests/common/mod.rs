#![allow(dead_code)]

use std::path::Path;

use equidiff_cli::RunConfig;

/// A model and corpus small enough to train in well under a second.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 3

[model]
d_model = 16
channels = 8
layers = 2
gat_heads = 2

[diffusion]
steps = 20

[train]
steps = 12
batch = 4
log_every = 5
probe_scenes = 8

[synth]
scenes_per_class = 4
"#,
    )
    .expect("tiny config parses")
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}
