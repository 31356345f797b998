//! Dataset records, vocabulary construction, tokenization, and manifest I/O.
//!
//! Manifests are JSON Lines, one record per line:
//! `{"id": int, "image": str, "captions": [str], "split": "train"|"val"|"test"}`.
//! The `image` field is either a filesystem path or a `synthetic:` URI that
//! embeds the procedural render spec, so synthetic manifests round-trip
//! without touching disk.

pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, RenderSpec, SyntheticSpec};

/// Reserved token id for padding positions.
pub const PAD_ID: usize = 0;
/// Reserved token id for out-of-vocabulary words.
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Where a record's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Path(String),
    Synthetic(RenderSpec),
}

impl ImageSource {
    fn to_manifest_string(&self) -> String {
        match self {
            ImageSource::Path(p) => p.clone(),
            ImageSource::Synthetic(spec) => {
                format!("synthetic:{}", serde_json::to_string(spec).unwrap())
            }
        }
    }

    fn from_manifest_string(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(json) => Ok(ImageSource::Synthetic(serde_json::from_str(json)?)),
            None => Ok(ImageSource::Path(s.to_string())),
        }
    }

    /// Load pixels as a `(3, h, w)` tensor in `[-0.5, 0.5]`.
    pub fn load(&self, base_dir: Option<&Path>) -> Result<Array3<f64>> {
        let rgb = match self {
            ImageSource::Synthetic(spec) => spec.render(),
            ImageSource::Path(p) => {
                let path = match base_dir {
                    Some(dir) => dir.join(p),
                    None => Path::new(p).to_path_buf(),
                };
                image::open(&path)
                    .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?
                    .to_rgb8()
            }
        };
        let (w, h) = rgb.dimensions();
        let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0 - 0.5;
            }
        }
        Ok(out)
    }
}

/// One image of one person, with its caption(s).
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub identity_id: u32,
    pub image: ImageSource,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: u32,
    image: String,
    captions: Vec<String>,
    split: Split,
}

/// Word inventory with reserved padding and unknown ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
    /// Embedding dimension V associated with this vocabulary.
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    min_count: usize,
    dim: usize,
}

impl Vocabulary {
    /// Number of indexed words U (excluding padding and unknown).
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    /// Total table width including the two reserved ids.
    pub fn table_size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        if id >= 2 {
            self.words.get(id - 2).map(String::as_str)
        } else {
            None
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            words: self.words.clone(),
            min_count: self.min_count,
            dim: self.dim,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Vocabulary::from_words(file.words, file.min_count, file.dim))
    }

    pub fn from_words(words: Vec<String>, min_count: usize, dim: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + 2))
            .collect();
        Vocabulary {
            words,
            index,
            min_count,
            dim,
        }
    }
}

/// Integer-encoded caption. `ids` holds only the `valid_len` real tokens;
/// padded views extend with [`PAD_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

impl TokenizedCaption {
    pub fn valid_len(&self) -> usize {
        self.ids.len()
    }

    /// Ids padded to `n_max` with [`PAD_ID`].
    pub fn padded(&self, n_max: usize) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.resize(n_max, PAD_ID);
        out
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Count unique words over the training captions and index every word with
/// count >= `min_count`. Indexing order is by descending count, then
/// alphabetical, so builds are deterministic.
pub fn build_vocabulary(records: &[DatasetRecord], min_count: usize, dim: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for rec in records {
        for cap in &rec.captions {
            for w in normalize_words(cap) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::data("empty training corpus"));
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words = entries
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .map(|(w, _)| w)
        .collect();
    Ok(Vocabulary::from_words(words, min_count, dim))
}

/// Map a raw caption to token ids, truncating at `n_max`.
pub fn tokenize(text: &str, vocab: &Vocabulary, n_max: usize) -> Result<TokenizedCaption> {
    assert!(n_max >= 1, "n_max must be >= 1");
    let mut tokens = normalize_words(text);
    if tokens.is_empty() {
        return Err(Error::data("empty caption after tokenization"));
    }
    tokens.truncate(n_max);
    let ids = tokens.iter().map(|w| vocab.id_of(w)).collect();
    Ok(TokenizedCaption { ids, tokens })
}

/// Inverse of [`tokenize`] for in-vocabulary captions.
pub fn detokenize(caption: &TokenizedCaption, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, &id) in caption.ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match vocab.word_of(id) {
            Some(w) => out.push_str(w),
            None => {
                let _ = write!(out, "<unk>");
            }
        }
    }
    out
}

/// Write records as a JSON Lines manifest.
pub fn save_manifest(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = ManifestLine {
            id: rec.identity_id,
            image: rec.image.to_manifest_string(),
            captions: rec.captions.clone(),
            split: rec.split,
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Load a manifest and split it, enforcing identity disjointness across
/// splits and the existence of referenced image files.
pub fn load_dataset(
    manifest_path: &Path,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let file = std::fs::File::open(manifest_path)
        .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", manifest_path.display())))?;
    let base_dir = manifest_path.parent().map(Path::to_path_buf);
    let mut splits: HashMap<Split, HashSet<u32>> = HashMap::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("manifest line {}: {e}", lineno + 1)))?;
        if parsed.captions.is_empty() {
            return Err(Error::data(format!(
                "manifest line {}: record for identity {} has no captions",
                lineno + 1,
                parsed.id
            )));
        }
        let image = ImageSource::from_manifest_string(&parsed.image)?;
        if let ImageSource::Path(p) = &image {
            let full = match &base_dir {
                Some(dir) => dir.join(p),
                None => Path::new(p).to_path_buf(),
            };
            if !full.exists() {
                return Err(Error::data(format!("missing image file: {}", full.display())));
            }
        }
        splits.entry(parsed.split).or_default().insert(parsed.id);
        let rec = DatasetRecord {
            identity_id: parsed.id,
            image,
            captions: parsed.captions,
            split: parsed.split,
        };
        match parsed.split {
            Split::Train => train.push(rec),
            Split::Val => val.push(rec),
            Split::Test => test.push(rec),
        }
    }
    let empty = HashSet::new();
    let pairs = [
        (Split::Train, Split::Val),
        (Split::Train, Split::Test),
        (Split::Val, Split::Test),
    ];
    for (a, b) in pairs {
        let sa = splits.get(&a).unwrap_or(&empty);
        let sb = splits.get(&b).unwrap_or(&empty);
        if let Some(id) = sa.intersection(sb).min() {
            return Err(Error::data(format!(
                "identity {id} appears in both {a:?} and {b:?} splits"
            )));
        }
    }
    Ok((train, val, test))
}

/// Distinct identities of a record list, sorted ascending.
pub fn identity_set(records: &[DatasetRecord]) -> Vec<u32> {
    let mut ids: Vec<u32> = records
        .iter()
        .map(|r| r.identity_id)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u32, captions: &[&str], split: Split) -> DatasetRecord {
        DatasetRecord {
            identity_id: id,
            image: ImageSource::Path(format!("img_{id}.png")),
            captions: captions.iter().map(|s| s.to_string()).collect(),
            split,
        }
    }

    #[test]
    fn vocab_counts_unique_words() {
        let recs = vec![
            record(0, &["a red shirt"], Split::Train),
            record(1, &["a red bag"], Split::Train),
        ];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        assert_eq!(v.num_words(), 4);
        for w in ["a", "red", "shirt", "bag"] {
            assert!(v.contains(w), "missing {w}");
        }
    }

    #[test]
    fn vocab_min_count_threshold() {
        let recs = vec![
            record(0, &["a red shirt"], Split::Train),
            record(1, &["a red bag"], Split::Train),
        ];
        let v = build_vocabulary(&recs, 2, 8).unwrap();
        assert_eq!(v.num_words(), 2);
        assert!(v.contains("a") && v.contains("red"));
        assert_eq!(v.id_of("shirt"), UNK_ID);
        assert_eq!(v.id_of("bag"), UNK_ID);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let err = build_vocabulary(&[], 1, 8).unwrap_err();
        assert!(err.to_string().contains("empty training corpus"));
    }

    #[test]
    fn vocab_ids_are_contiguous_and_reserved_ids_never_collide() {
        let recs = vec![record(0, &["one two three four five"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let mut seen: Vec<usize> = (0..v.num_words())
            .map(|i| v.id_of(v.word_of(i + 2).unwrap()))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (2..2 + v.num_words()).collect::<Vec<_>>());
    }

    #[test]
    fn tokenize_basic_and_oov() {
        let recs = vec![record(0, &["a red shirt"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let t = tokenize("A red shirt.", &v, 64).unwrap();
        assert_eq!(t.valid_len(), 3);
        assert_eq!(t.ids, vec![v.id_of("a"), v.id_of("red"), v.id_of("shirt")]);
        let o = tokenize("a cerulean shirt", &v, 64).unwrap();
        assert_eq!(o.ids[1], UNK_ID);
    }

    #[test]
    fn tokenize_truncates_at_n_max() {
        let recs = vec![record(0, &["w"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let long = vec!["w"; 100].join(" ");
        let t = tokenize(&long, &v, 64).unwrap();
        assert_eq!(t.valid_len(), 64);
    }

    #[test]
    fn tokenize_rejects_empty() {
        let recs = vec![record(0, &["word"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let err = tokenize("... !!", &v, 64).unwrap_err();
        assert!(err.to_string().contains("empty caption after tokenization"));
    }

    #[test]
    fn tokenize_detokenize_round_trip() {
        let recs = vec![record(0, &["a red shirt and blue pants"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let t = tokenize("a red shirt and blue pants", &v, 64).unwrap();
        let text = detokenize(&t, &v);
        let t2 = tokenize(&text, &v, 64).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn padded_positions_are_pad_id() {
        let recs = vec![record(0, &["a b"], Split::Train)];
        let v = build_vocabulary(&recs, 1, 8).unwrap();
        let t = tokenize("a b", &v, 8).unwrap();
        let p = t.padded(8);
        assert_eq!(p.len(), 8);
        assert!(p[2..].iter().all(|&id| id == PAD_ID));
    }

    #[test]
    fn manifest_rejects_identity_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            DatasetRecord {
                image: ImageSource::Synthetic(RenderSpec::example()),
                ..record(5, &["a"], Split::Train)
            },
            DatasetRecord {
                image: ImageSource::Synthetic(RenderSpec::example()),
                ..record(5, &["b"], Split::Test)
            },
        ];
        save_manifest(&recs, &path).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("identity 5"));
    }

    #[test]
    fn manifest_rejects_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&[record(1, &["a"], Split::Train)], &path).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("missing image file"));
    }
}
