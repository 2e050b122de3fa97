use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        Split::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    path: String,
    label: String,
    split: String,
}

/// Clip list with string labels. Relative paths resolve against
/// `base_dir`, normally the directory holding the CSV.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Data(format!("duplicate manifest path {}", r.path)));
            }
            if r.label.is_empty() {
                return Err(Error::Data(format!("empty label for {}", r.path)));
            }
        }
        Ok(())
    }

    /// Sorted unique labels; a label's position is its class index.
    pub fn vocabulary(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Class index of every row, in row order.
    pub fn label_indices(&self) -> Vec<usize> {
        let vocab = self.vocabulary();
        self.rows
            .iter()
            .map(|r| vocab.binary_search(&r.label).expect("label in vocabulary"))
            .collect()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The same manifest with every path resolved to an absolute one, so
    /// it can be written anywhere.
    pub fn with_absolute_paths(&self) -> Result<Self> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let p = std::path::absolute(self.resolve(r))?;
                Ok(ManifestRow {
                    path: p.to_string_lossy().into_owned(),
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, PathBuf::new())
    }

    pub fn is_split(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.split.is_some())
    }

    pub fn is_unsplit(&self) -> bool {
        self.rows.iter().all(|r| r.split.is_none())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Data(format!(
                "manifest header must be path,label,split, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("manifest row {}: {e}", i + 2)))?;
            let split = match rec.split.trim() {
                "" => None,
                s => Some(s.parse()?),
            };
            rows.push(ManifestRow {
                path: rec.path,
                label: rec.label,
                split,
            });
        }
        Self::new(rows, base_dir)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["path", "label", "split"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            let split = r.split.map(Split::as_str).unwrap_or("");
            w.write_record([r.path.as_str(), r.label.as_str(), split])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Split sizes for `n` items by largest remainder; ties go to the earlier
/// split. When `n` is at least the number of splits, every split gets at
/// least one item.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if n >= ratios.len() {
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..counts.len())
                .max_by_key(|&i| (counts[i], usize::MAX - i))
                .unwrap();
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    counts
}

/// Assigns train/val/test per clip, separately within each class, after a
/// seeded shuffle. Every class needs at least 3 clips.
pub fn split_stratified(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|&r| r.is_nan() || r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.rows.iter().enumerate() {
        by_class.entry(&r.label).or_default().push(i);
    }
    let mut out = manifest.clone();
    let mut rng = rng_from_seed(seed);
    for (label, mut idx) in by_class {
        if idx.len() < 3 {
            return Err(Error::Data(format!(
                "class {label} has {} clips; stratified splitting needs at least 3",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &ratios);
        let mut it = idx.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(count) {
                out.rows[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

/// Emotion encoded by the sixth character of an EmoDB file name.
pub fn emodb_emotion(file_name: &str) -> Option<&'static str> {
    Some(match file_name.chars().nth(5)? {
        'W' => "anger",
        'L' => "boredom",
        'E' => "disgust",
        'A' => "fear",
        'F' => "happiness",
        'T' => "sadness",
        'N' => "neutral",
        _ => return None,
    })
}

/// Manifest for a directory of EmoDB `.wav` files, plus the names that
/// carried no recognizable emotion code.
pub fn emodb_manifest(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<String>)> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for name in names {
        match emodb_emotion(&name) {
            Some(label) => rows.push(ManifestRow {
                path: name,
                label: label.into(),
                split: None,
            }),
            None => rejects.push(name),
        }
    }
    if rows.is_empty() {
        log::warn!("no EmoDB clips found in {}", dir.display());
    }
    Ok((Manifest::new(rows, dir)?, rejects))
}
