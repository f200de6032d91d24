//! On-disk cache of prepared examples keyed by (seed, window, k, vocab hash).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::example::{prepare_example, PrepareOptions, PreparedExample};
use crate::corpus::{Dialogue, Vocab};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub seed: u64,
    pub window: usize,
    pub keywords_k: usize,
    pub vocab_hash: String,
    /// Which split the entry holds (`train`, `dev`, ...).
    pub part: String,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        format!(
            "prep-{}-s{}-w{}-k{}-{}.json",
            self.part, self.seed, self.window, self.keywords_k, self.vocab_hash
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: CacheKey,
    examples: Vec<PreparedExample>,
}

pub fn cache_path(dir: &Path, key: &CacheKey) -> PathBuf {
    dir.join(key.file_name())
}

/// Returns cached examples when the key matches, else prepares and stores them.
pub fn load_or_prepare(
    dir: &Path,
    key: &CacheKey,
    dialogues: &[Dialogue],
    vocab: &Vocab,
    opts: &PrepareOptions,
) -> Result<Vec<PreparedExample>> {
    let path = cache_path(dir, key);
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(file) = serde_json::from_slice::<CacheFile>(&bytes) {
            if file.key == *key {
                return Ok(file.examples);
            }
        }
        log::warn!("ignoring stale cache {}", path.display());
    }
    let examples = dialogues
        .iter()
        .map(|d| prepare_example(d, vocab, opts))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir)?;
    let file = CacheFile { key: key.clone(), examples };
    fs::write(&path, serde_json::to_vec(&file)?)?;
    Ok(file.examples)
}
