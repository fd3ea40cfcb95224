//! Datasets on disk: one directory per pair plus a `manifest.csv` listing
//! `filename,class,split` rows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cli::container::{self, Container};
use crate::error::{invalid, Error, Result};
use crate::grid_field::ScalarImage;
use crate::synth_data::{Dataset, SynthPair};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "filename,class,split";

pub const MOVING: &str = "moving.bin";
pub const FIXED: &str = "fixed.bin";
pub const MOVING_LABELS: &str = "moving_labels.bin";
pub const FIXED_LABELS: &str = "fixed_labels.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid("split", format!("expected train or test, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Pair directory, relative to the manifest.
    pub filename: String,
    pub class: usize,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        text += &format!("{},{},{}\n", e.filename, e.class, e.split);
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("manifest must start with `{MANIFEST_HEADER}`")));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [filename, class, split] = cols[..] else {
                return Err(Error::Format(format!("manifest row needs three columns: {line:?}")));
            };
            Ok(ManifestEntry {
                filename: filename.to_string(),
                class: class
                    .parse()
                    .map_err(|_| Error::Format(format!("class id {class:?} is not an integer")))?,
                split: split.parse()?,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

/// A pair as loaded from its directory; label images are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFiles {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
    pub moving_labels: Option<ScalarImage>,
    pub fixed_labels: Option<ScalarImage>,
}

pub fn load_image(path: &Path) -> Result<ScalarImage> {
    container::load_one(path)?.to_image()
}

fn load_optional(path: PathBuf) -> Result<Option<ScalarImage>> {
    if path.exists() {
        load_image(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_pair(dir: &Path) -> Result<PairFiles> {
    Ok(PairFiles {
        moving: load_image(&dir.join(MOVING))?,
        fixed: load_image(&dir.join(FIXED))?,
        moving_labels: load_optional(dir.join(MOVING_LABELS))?,
        fixed_labels: load_optional(dir.join(FIXED_LABELS))?,
    })
}

pub fn pair_dir_name(index: usize) -> String {
    format!("pair_{index:04}")
}

/// Writes the images, label maps and ground-truth fields of `pair`.
pub fn save_pair(dir: &Path, pair: &SynthPair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let one = |name: &str, c: Container| container::save(&dir.join(name), &[c]);
    one(MOVING, Container::from_image(&pair.moving))?;
    one(FIXED, Container::from_image(&pair.fixed))?;
    one(MOVING_LABELS, Container::from_image(&pair.moving_labels))?;
    one(FIXED_LABELS, Container::from_image(&pair.fixed_labels))?;
    one("velocity.bin", Container::from_field(&pair.velocity))?;
    one("displacement.bin", Container::from_field(pair.phi.displacement()))
}

/// Writes every pair and the manifest into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.pairs.len());
    for pair in &data.pairs {
        let name = pair_dir_name(pair.index);
        save_pair(&dir.join(&name), pair)?;
        entries.push(ManifestEntry {
            filename: name,
            class: pair.class.id(),
            split: if pair.is_train() { Split::Train } else { Split::Test },
        });
    }
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                filename: "a".into(),
                class: 3,
                split: Split::Test,
            },
            ManifestEntry {
                filename: "b".into(),
                class: 0,
                split: Split::Train,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST);
        write_manifest(&path, &entries).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "filename,class,split\na,3,test\nb,0,train\n"
        );
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn malformed_manifests() {
        assert!(parse_manifest("a,0,train\n").is_err());
        assert!(parse_manifest("filename,class,split\na,x,train\n").is_err());
        assert!(parse_manifest("filename,class,split\na,1,val\n").is_err());
        assert!(parse_manifest("filename,class,split\na,1\n").is_err());
        assert_eq!(parse_manifest("filename,class,split\n").unwrap(), vec![]);
    }
}
