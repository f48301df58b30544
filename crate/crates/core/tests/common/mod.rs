#![allow(dead_code)]

pub mod props;

use std::path::{Path, PathBuf};

use halleval::runner::{BackendKind, RunConfig, RunConfigFile};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Replay-backed config over one of the bundled synthetic datasets.
pub fn replay_config(dataset: &str, replay: &str, template: &str, output_dir: &Path) -> RunConfig {
    let root = fixtures().join(dataset);
    RunConfigFile {
        dataset: Some(root.join("items.jsonl")),
        template: Some(template.into()),
        backend: Some(BackendKind::Replay),
        replay_fixture: Some(root.join(replay)),
        api_key_env: None,
        output_dir: Some(output_dir.to_path_buf()),
        concurrency: Some(4),
        ..Default::default()
    }
    .resolve()
    .expect("fixture config resolves")
}
