use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_phantom_pair, load_image_pgm, save_image_pgm, PairedSample};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of a dataset manifest. Paths are relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub difficulty: f64,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 40,
            seed: 0,
            height: 64,
            width: 64,
            difficulty: 0.5,
            val_count: 0,
            test_count: 8,
        }
    }
}

impl DatasetSpec {
    /// Split of sample `i`: training first, then validation, then test.
    pub fn split_of(&self, i: usize) -> Split {
        let train = self.count.saturating_sub(self.val_count + self.test_count);
        if i < train {
            Split::Train
        } else if i < train + self.val_count {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Generate every sample in memory.
    pub fn samples(&self) -> Result<Vec<PairedSample>> {
        (0..self.count)
            .map(|i| {
                let mut s = generate_phantom_pair(
                    derive_seed(self.seed, &[i as u64]),
                    (self.height, self.width),
                    self.difficulty,
                )?;
                s.id = format!("{i:05}");
                s.split = self.split_of(i);
                Ok(s)
            })
            .collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest records serialize");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let r = serde_json::from_str(line.trim()).map_err(|e| Error::Parse {
                offset,
                message: format!("manifest record: {e}"),
            })?;
            records.push(r);
        }
        offset += line.len();
    }
    Ok(records)
}

/// Write a phantom dataset as PGM pairs plus `manifest.jsonl` under `dir`.
pub fn generate_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Vec<ManifestRecord>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(spec.count);
    for s in spec.samples()? {
        let source = PathBuf::from("images").join(format!("{}_source.pgm", s.id));
        let target = PathBuf::from("images").join(format!("{}_target.pgm", s.id));
        save_image_pgm(&s.source, dir.join(&source))?;
        save_image_pgm(&s.target, dir.join(&target))?;
        records.push(ManifestRecord {
            id: s.id,
            split: s.split,
            source,
            target,
        });
    }
    write_manifest(dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Load every pair of `split` listed in the manifest at `path`.
pub fn load_split(path: impl AsRef<Path>, split: Split) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let source = load_image_pgm(base.join(&r.source))?;
            let target = load_image_pgm(base.join(&r.target))?;
            if source.dims() != target.dims() {
                return Err(Error::Corrupt(format!(
                    "pair {} has source {:?} and target {:?}",
                    r.id,
                    source.dims(),
                    target.dims()
                )));
            }
            Ok(PairedSample {
                id: r.id,
                split: r.split,
                source,
                target,
            })
        })
        .collect()
}
