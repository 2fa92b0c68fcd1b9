//! Image collections described by a tab-separated manifest:
//! `path<TAB>subject<TAB>camera<TAB>split`, paths relative to the manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{CarlError, Result};
use crate::io::image::{read_image, SpectralImage};
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject: String,
    pub camera: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Corpus {
            root: root.into(),
            entries,
        }
    }

    /// Reads a manifest and checks that every entry resolves to a file.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Corpus> {
        let manifest = manifest.as_ref();
        let text = std::fs::read_to_string(manifest).map_err(|e| CarlError::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(text.as_bytes());
        let malformed = |line: u64, reason: String| CarlError::Malformed {
            path: manifest.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != 4 {
                return Err(malformed(line, format!("expected 4 tab-separated fields, found {}", record.len())));
            }
            let split = record[3].parse().map_err(|e| malformed(line, e))?;
            let entry = ManifestEntry {
                path: PathBuf::from(&record[0]),
                subject: record[1].to_string(),
                camera: record[2].to_string(),
                split,
            };
            let full = root.join(&entry.path);
            if !full.is_file() {
                return Err(malformed(line, format!("{} does not exist", full.display())));
            }
            entries.push(entry);
        }
        Ok(Corpus { root, entries })
    }

    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            let path = e.path.to_str().ok_or_else(|| CarlError::validation("manifest paths must be UTF-8"))?;
            for field in [path, &e.subject, &e.camera] {
                if field.contains(['\t', '\n']) {
                    return Err(CarlError::validation(format!("manifest field {field:?} contains a tab or newline")));
                }
            }
            out.push_str(&format!("{path}\t{}\t{}\t{}\n", e.subject, e.camera, e.split));
        }
        std::fs::write(manifest, out).map_err(|e| CarlError::io(manifest, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<SpectralImage> {
        read_image(self.path_of(entry))
    }

    /// Images of one split in manifest order.
    pub fn read_split(&self, split: Split) -> Result<Vec<SpectralImage>> {
        self.split(split).into_iter().map(|e| self.read(e)).collect()
    }

    /// Entry indices of `split` in a per-epoch shuffled order.
    pub fn epoch_order(&self, split: Split, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect();
        idx.shuffle(&mut Streams::new(seed).stream(Purpose::Data, epoch));
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::write_image;

    fn tiny() -> SpectralImage {
        SpectralImage::new(1, 1, vec![500.0], vec![0.5], None).unwrap()
    }

    fn entry(path: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            subject: "s0".into(),
            camera: "hsi".into(),
            split,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.csp", "b.csp", "c.csp"] {
            write_image(dir.path().join(name), &tiny()).unwrap();
        }
        let corpus = Corpus::new(
            dir.path(),
            vec![entry("a.csp", Split::Train), entry("b.csp", Split::Test), entry("c.csp", Split::Train)],
        );
        let path = dir.path().join("manifest.tsv");
        corpus.save(&path).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.split(Split::Train).len(), 2);
        assert_eq!(back.read_split(Split::Test).unwrap().len(), 1);
    }

    #[test]
    fn epoch_order_is_deterministic() {
        let corpus = Corpus::new("x", (0..20).map(|i| entry(&format!("{i}"), Split::Train)).collect());
        assert_eq!(corpus.epoch_order(Split::Train, 1, 0), corpus.epoch_order(Split::Train, 1, 0));
        assert_ne!(corpus.epoch_order(Split::Train, 1, 0), corpus.epoch_order(Split::Train, 1, 1));
        let mut o = corpus.epoch_order(Split::Train, 1, 3);
        o.sort_unstable();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path().join("a.csp"), &tiny()).unwrap();
        let path = dir.path().join("m.tsv");
        for bad in ["a.csp\ts0\thsi\tholdout\n", "missing.csp\ts0\thsi\ttrain\n", "a.csp\ts0\ttrain\n"] {
            std::fs::write(&path, bad).unwrap();
            assert!(matches!(Corpus::load(&path), Err(CarlError::Malformed { .. })), "{bad:?}");
        }
        assert!(matches!(Corpus::load(dir.path().join("nope.tsv")), Err(CarlError::Io { .. })));
    }
}
