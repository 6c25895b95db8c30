//! Dataset directory: `clip_XXXX.tyc` files plus a `manifest.json` index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{read_clip, write_clip, VideoClip};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub clips: Vec<String>,
    /// Free-form generator settings, echoed for provenance.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:04}.tyc")
}

pub fn write_dataset(dir: impl AsRef<Path>, clips: &[VideoClip], generator: Option<serde_json::Value>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = clip_file_name(i);
        write_clip(dir.join(&name), clip)?;
        names.push(name);
    }
    let manifest = DatasetManifest { clips: names, generator };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<VideoClip>> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.clips.is_empty() {
        return Err(Error::Format(format!("dataset {} lists no clips", dir.display())));
    }
    manifest.clips.iter().map(|name| read_clip(dir.join(name))).collect()
}
