//! Corpus ingestion, speaker-disjoint splits, synthetic data and file formats.

pub mod checkpoint;
pub mod features;
pub mod synth;
pub mod wav;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::HOP;
use crate::error::{Error, Result};

pub use wav::{read_wav, write_wav};

/// Ordered phoneme symbols. CTC class `i + 1` is symbol `i`; class 0 is blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    symbols: Vec<String>,
}

pub const BLANK: &str = "<blank>";

impl Inventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<_> = symbols.iter().collect();
        if unique.len() != symbols.len() {
            return Err(Error::Data("phoneme inventory has duplicate symbols".into()));
        }
        if symbols.iter().any(|s| s == BLANK || s.is_empty() || s.contains(char::is_whitespace)) {
            return Err(Error::Data("phoneme inventory contains the blank or a malformed symbol".into()));
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    /// Parses a line of space-separated symbols.
    pub fn parse_line(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace()
            .map(|s| {
                self.index(s)
                    .ok_or_else(|| Error::Data(format!("symbol `{s}` is not in the phoneme inventory")))
            })
            .collect()
    }

    pub fn format_line(&self, seq: &[usize]) -> String {
        seq.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Non-aligned phoneme sequence (inventory indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript(pub Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// 16 kHz mono samples in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub transcript: Transcript,
    /// One inventory index per 160-sample frame.
    pub aligned: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.samples.len() / HOP
    }

    pub fn validate(&self) -> Result<()> {
        if self.speaker.is_empty() {
            return Err(Error::Data(format!("utterance {} has an empty speaker id", self.id)));
        }
        if let Some(a) = &self.aligned {
            if a.len() != self.frames() {
                return Err(Error::Data(format!(
                    "utterance {}: {} aligned labels for {} frames",
                    self.id,
                    a.len(),
                    self.frames()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inventory: Inventory,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn speakers(&self) -> Vec<String> {
        self.utterances
            .iter()
            .map(|u| u.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn has_alignments(&self) -> bool {
        !self.utterances.is_empty() && self.utterances.iter().all(|u| u.aligned.is_some())
    }

    pub fn total_samples(&self) -> usize {
        self.utterances.iter().map(|u| u.samples.len()).sum()
    }

    /// Utterances whose speaker is in `speakers`.
    pub fn subset(&self, speakers: &BTreeSet<String>) -> Dataset {
        Dataset {
            inventory: self.inventory.clone(),
            utterances: self
                .utterances
                .iter()
                .filter(|u| speakers.contains(&u.speaker))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio: PathBuf,
    pub speaker: String,
    pub transcript: PathBuf,
    pub alignment: Option<PathBuf>,
    pub split: Split,
}

/// Tab-separated utterance list:
/// `utt_id  audio  speaker  transcript  alignment|-  split`, with a header line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

const MANIFEST_HEADER: &str = "utt_id\taudio\tspeaker\ttranscript\talignment\tsplit";
pub const INVENTORY_FILE: &str = "phones.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if n == 0 && line.starts_with("utt_id") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected 6 tab-separated fields, found {}", n + 1, f.len()),
                });
            }
            records.push(ManifestRecord {
                id: f[0].to_string(),
                audio: f[1].into(),
                speaker: f[2].to_string(),
                transcript: f[3].into(),
                alignment: (f[4] != "-").then(|| f[4].into()),
                split: Split::parse(f[5])?,
            });
        }
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for r in &self.records {
            let align = r.alignment.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.audio.display(),
                r.speaker,
                r.transcript.display(),
                align,
                r.split
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.speaker.clone()).collect()
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    /// Reads every listed utterance. The inventory comes from `phones.txt`
    /// next to the manifest.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let inventory = Inventory::load(&self.root.join(INVENTORY_FILE))?;
        let mut utterances = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let samples = read_wav(&self.root.join(&r.audio))?;
            let tpath = self.root.join(&r.transcript);
            let ttext = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
            let transcript = Transcript(inventory.parse_line(ttext.lines().next().unwrap_or(""))?);
            if transcript.0.is_empty() {
                return Err(Error::Data(format!("utterance {} has an empty transcript", r.id)));
            }
            let aligned = match &r.alignment {
                Some(a) => {
                    let apath = self.root.join(a);
                    let atext = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
                    Some(inventory.parse_line(atext.lines().next().unwrap_or(""))?)
                }
                None => None,
            };
            let utt = Utterance {
                id: r.id.clone(),
                speaker: r.speaker.clone(),
                samples,
                transcript,
                aligned,
            };
            utt.validate()?;
            utterances.push(utt);
        }
        Ok(Dataset { inventory, utterances })
    }
}

/// Partitions speakers (not utterances) into train/dev/test by `ratios`.
///
/// Dev and test each receive at least one speaker; the assignment depends
/// only on the sorted speaker set and `seed`.
pub fn make_splits(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<[Manifest; 3]> {
    let mut speakers: Vec<String> = manifest.speakers().into_iter().collect();
    let n = speakers.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 speakers to split, found {n}")));
    }
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || total <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let n_dev = ((n as f64 * ratios[1] / total).round() as usize).max(1);
    let n_test = ((n as f64 * ratios[2] / total).round() as usize).max(1);
    if n_dev + n_test >= n {
        return Err(Error::Data(format!(
            "{n} speakers cannot fill a train split after {n_dev} dev and {n_test} test speakers"
        )));
    }
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assign = BTreeMap::new();
    for (i, s) in speakers.into_iter().enumerate() {
        let split = if i < n_dev {
            Split::Dev
        } else if i < n_dev + n_test {
            Split::Test
        } else {
            Split::Train
        };
        assign.insert(s, split);
    }
    let relabel = |split: Split| Manifest {
        root: manifest.root.clone(),
        records: manifest
            .records
            .iter()
            .filter(|r| assign[&r.speaker] == split)
            .map(|r| ManifestRecord { split, ..r.clone() })
            .collect(),
    };
    Ok([relabel(Split::Train), relabel(Split::Dev), relabel(Split::Test)])
}

/// Writes a dataset as `wav/`, `phn/`, `ali/`, `phones.txt` and `manifest.tsv`
/// under `dir`, every record marked `train`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Manifest> {
    for sub in ["wav", "phn", "ali"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    data.inventory.save(&dir.join(INVENTORY_FILE))?;
    let mut records = Vec::new();
    for u in &data.utterances {
        let audio = PathBuf::from(format!("wav/{}.wav", u.id));
        write_wav(&dir.join(&audio), &u.samples)?;
        let transcript = PathBuf::from(format!("phn/{}.phn", u.id));
        let tpath = dir.join(&transcript);
        fs::write(&tpath, format!("{}\n", data.inventory.format_line(&u.transcript.0)))
            .map_err(|e| Error::io(&tpath, e))?;
        let alignment = match &u.aligned {
            Some(a) => {
                let rel = PathBuf::from(format!("ali/{}.ali", u.id));
                let apath = dir.join(&rel);
                fs::write(&apath, format!("{}\n", data.inventory.format_line(a))).map_err(|e| Error::io(&apath, e))?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: u.id.clone(),
            audio,
            speaker: u.speaker.clone(),
            transcript,
            alignment,
            split: Split::Train,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
