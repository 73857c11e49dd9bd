//! Corpus plumbing: dataset generation, tokenizer, top-k vocabulary, caption
//! encoding, and batching with pad masks.

mod netpbm;
mod scenes;

pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use scenes::{build_scene, Color, SceneObject, Shape, SyntheticScene};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

// ----- tokenizer -------------------------------------------------------------

/// Lowercase, split on whitespace, strip characters outside [a-z0-9], drop
/// empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .filter_map(|word| {
            let cleaned: String = word
                .chars()
                .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
                .collect();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

// ----- vocabulary ------------------------------------------------------------

/// Top-k token table with four reserved ids (PAD, START, END, UNK).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Count token frequencies over the given captions and keep the `k` most
    /// frequent (frequency descending, then token ascending); ids 4.. follow
    /// that order.
    pub fn build<S: AsRef<str>>(captions: &[S], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("build_vocabulary: k must be >= 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in captions {
            for token in tokenize(caption.as_ref()) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::contract(
                "build_vocabulary: no tokens in the training captions",
            ));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);

        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(token, _)| token));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(id, token)| (token.clone(), id))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Token id, falling back to UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    /// One "token<TAB>id" line per entry, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let (token, id) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: expected token<TAB>id", line_no + 1),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: bad id {id:?}", line_no + 1),
            })?;
            if id != line_no {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("line {}: ids must be dense and in order", line_no + 1),
                });
            }
            id_to_token.push(token.to_string());
        }
        if id_to_token.len() < RESERVED_TOKENS.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "vocabulary shorter than the reserved prefix".into(),
            });
        }
        for (id, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if id_to_token[id] != *reserved {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("reserved id {id} must be {reserved}"),
                });
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(id, token)| (token.clone(), id))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// [START] + token ids (OOV -> UNK) + [END], right-padded with PAD to t_max;
/// over-long captions are truncated before END.
pub fn encode_caption(vocab: &Vocabulary, text: &str, t_max: usize) -> Result<Vec<usize>> {
    if t_max < 3 {
        return Err(Error::contract("encode_caption: t_max must be >= 3"));
    }
    let mut tokens = tokenize(text);
    tokens.truncate(t_max - 2);
    let mut row = Vec::with_capacity(t_max);
    row.push(START_ID);
    row.extend(tokens.iter().map(|t| vocab.id(t)));
    row.push(END_ID);
    row.resize(t_max, PAD_ID);
    Ok(row)
}

/// Effective length of an encoded row: positions up to and including END.
pub fn effective_length(row: &[usize]) -> Result<usize> {
    let end = row
        .iter()
        .position(|&id| id == END_ID)
        .ok_or_else(|| Error::contract("encoded row has no END"))?;
    Ok(end + 1)
}

/// Surface tokens for decoded ids (reserved ids excluded by decoding).
pub fn ids_to_tokens(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    ids.iter().map(|&id| vocab.token(id).map(String::from)).collect()
}

// ----- manifests ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub id: u64,
    pub image: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// One record per line in data-interchange object notation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Load and validate: five captions per record and image files present
    /// (relative to the manifest's directory).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into());
        let mut records = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    detail: format!("line {}: {e}", line_no + 1),
                })?;
            if record.captions.len() != 5 {
                return Err(Error::Data(format!(
                    "{}: record {} has {} captions, expected exactly 5",
                    path.display(),
                    record.id,
                    record.captions.len()
                )));
            }
            let image_path = root.join(&record.image);
            if !image_path.is_file() {
                return Err(Error::Data(format!(
                    "{}: record {} names missing image {}",
                    path.display(),
                    record.id,
                    image_path.display()
                )));
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: empty manifest", path.display())));
        }
        Ok(DatasetManifest { split, records })
    }
}

// ----- dataset generation ---------------------------------------------------------

/// Images per split; splits are disjoint by scene id.
#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Render the whole corpus under `out_dir`: images/ plus one manifest per
/// split. Returns the manifest paths in (train, val, test) order.
pub fn generate_dataset(
    corpus_seed: u64,
    counts: SplitCounts,
    side: usize,
    out_dir: &Path,
) -> Result<[PathBuf; 3]> {
    if side < 16 {
        return Err(Error::Config(format!(
            "image side {side} is too small to render (minimum 16)"
        )));
    }
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Config("every split count must be >= 1".into()));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut next_id = 0u64;
    let mut paths = Vec::with_capacity(3);
    for (split, count) in [
        ("train", counts.train),
        ("val", counts.val),
        ("test", counts.test),
    ] {
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let id = next_id;
            next_id += 1;
            let (scene, captions) = build_scene(corpus_seed, id);
            let rel = format!("images/{split}_{id:06}.ppm");
            write_ppm(&out_dir.join(&rel), side, side, &scene.render(side))?;
            records.push(ManifestRecord {
                id,
                image: rel,
                captions,
            });
        }
        let manifest = DatasetManifest {
            split: split.into(),
            records,
        };
        let path = out_dir.join(format!("{split}.jsonl"));
        manifest.save(&path)?;
        paths.push(path);
    }
    Ok([paths.remove(0), paths.remove(0), paths.remove(0)])
}

// ----- loading and batching ----------------------------------------------------------

/// A manifest pulled fully into memory: image tensors, encoded caption rows,
/// and tokenized references for scoring.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub ids: Vec<u64>,
    /// One [3 x side x side] tensor per record, pixel values in [0,1].
    pub images: Vec<Tensor>,
    /// Five encoded rows per record.
    pub rows: Vec<[Vec<usize>; 5]>,
    /// Tokenized reference captions per record.
    pub references: Vec<Vec<Vec<String>>>,
    pub side: usize,
    pub t_max: usize,
}

/// Decode a PPM file into a [3 x side x side] tensor scaled to [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let (width, height, rgb) = read_ppm(path)?;
    if width != height {
        return Err(Error::Data(format!(
            "{}: image must be square, got {width}x{height}",
            path.display()
        )));
    }
    let side = width;
    let mut values = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                values[(c * side + y) * side + x] = rgb[(y * side + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, side, side], values)
}

pub fn load_corpus(
    manifest: &DatasetManifest,
    root: &Path,
    vocab: &Vocabulary,
    t_max: usize,
) -> Result<LoadedCorpus> {
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut rows = Vec::new();
    let mut references = Vec::new();
    let mut side = None;
    for record in &manifest.records {
        let image = load_image(&root.join(&record.image))?;
        let this_side = image.shape()[1];
        match side {
            None => side = Some(this_side),
            Some(s) if s != this_side => {
                return Err(Error::Data(format!(
                    "record {}: image side {this_side} differs from {s}",
                    record.id
                )))
            }
            _ => {}
        }
        let encoded: Vec<Vec<usize>> = record
            .captions
            .iter()
            .map(|c| encode_caption(vocab, c, t_max))
            .collect::<Result<_>>()?;
        let encoded: [Vec<usize>; 5] = encoded
            .try_into()
            .map_err(|_| Error::Data(format!("record {} lacks 5 captions", record.id)))?;
        ids.push(record.id);
        images.push(image);
        rows.push(encoded);
        references.push(record.captions.iter().map(|c| tokenize(c)).collect());
    }
    Ok(LoadedCorpus {
        ids,
        images,
        rows,
        references,
        side: side.expect("manifest loads reject the empty case"),
        t_max,
    })
}

/// One training batch: each example is an (image, caption) pair.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B x 3 x side x side]
    pub images: Tensor,
    /// B encoded rows of width t_max.
    pub tokens: Vec<Vec<usize>>,
    /// Effective lengths (through END) per row.
    pub lengths: Vec<usize>,
    /// Corpus record index per example.
    pub record_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy example `i` back out as a [3 x side x side] tensor.
    pub fn example_image(&self, i: usize) -> Tensor {
        let shape = self.images.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let stride = c * h * w;
        let values = self.images.values()[i * stride..(i + 1) * stride].to_vec();
        Tensor::new(vec![c, h, w], values).expect("slice length matches shape")
    }
}

/// Expand every (image, caption) pair, shuffle deterministically, and cut
/// into batches; the final partial batch is kept.
pub fn make_batches(corpus: &LoadedCorpus, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("make_batches: batch size must be >= 1"));
    }
    let mut pairs: Vec<(usize, usize)> = (0..corpus.images.len())
        .flat_map(|r| (0..5).map(move |c| (r, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }

    let side = corpus.side;
    let stride = 3 * side * side;
    let mut batches = Vec::new();
    for chunk in pairs.chunks(batch_size) {
        let mut values = Vec::with_capacity(chunk.len() * stride);
        let mut tokens = Vec::with_capacity(chunk.len());
        let mut lengths = Vec::with_capacity(chunk.len());
        let mut record_indices = Vec::with_capacity(chunk.len());
        for &(record, caption) in chunk {
            values.extend_from_slice(corpus.images[record].values());
            let row = corpus.rows[record][caption].clone();
            lengths.push(effective_length(&row)?);
            tokens.push(row);
            record_indices.push(record);
        }
        batches.push(Batch {
            images: Tensor::new(vec![chunk.len(), 3, side, side], values)?,
            tokens,
            lengths,
            record_indices,
        });
    }
    Ok(batches)
}
