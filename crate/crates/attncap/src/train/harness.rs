//! Post-training drivers: greedy-decode evaluation, single-image captioning
//! with trace export, attention heatmaps, model comparison, and the
//! vocab/epoch/image-count sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, generate_dataset, ids_to_tokens, DatasetManifest, LoadedCorpus, SplitCounts, Vocabulary,
};
use crate::decoder::{greedy_decode_attention, greedy_decode_vanilla, AttentionTrace};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::metrics::{corpus_evaluate, CorpusScores, EvalPair, EvalReport};
use crate::parallel;
use crate::tensor::{Tape, Tensor};
use crate::train::checkpoint::{self, Checkpoint};
use crate::train::{train, AlphaStats, Model, TrainConfig};

// ----- decoding -------------------------------------------------------------

/// Greedy-decode one image; attention models also return the trace.
pub fn decode_image(model: &Model, image: &Tensor, max_len: usize) -> Result<(Vec<usize>, Option<AttentionTrace>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let image_var = tape.constant(image.clone());
    let grid = encode(model.encoder_config(), vars.encoder(), &mut tape, image_var)?;
    match &vars {
        crate::train::ModelVars::Attention(v) => {
            let (tokens, trace) =
                greedy_decode_attention(&mut tape, v, &grid, model.hidden_dim(), max_len)?;
            Ok((tokens, Some(trace)))
        }
        crate::train::ModelVars::Vanilla(v) => {
            let tokens =
                greedy_decode_vanilla(&mut tape, v, grid.global, model.hidden_dim(), max_len)?;
            Ok((tokens, None))
        }
    }
}

/// Greedy-decode every image of a corpus in order, pooling attention checks.
/// The length cap is the caption content budget: t_max minus START and END.
pub fn decode_corpus(model: &Model, corpus: &LoadedCorpus) -> Result<(Vec<Vec<usize>>, AlphaStats)> {
    let max_len = corpus.t_max - 2;
    let decoded: Vec<Result<(Vec<usize>, Option<AttentionTrace>)>> =
        parallel::map(&corpus.images, |image| decode_image(model, image, max_len));
    let mut tokens = Vec::with_capacity(decoded.len());
    let mut alpha = AlphaStats::default();
    for item in decoded {
        let (ids, trace) = item?;
        if let Some(trace) = &trace {
            for step in &trace.steps {
                alpha.absorb(step);
            }
        }
        tokens.push(ids);
    }
    Ok((tokens, alpha))
}

// ----- evaluation ------------------------------------------------------------

/// Decode a whole split and score it against all five references.
pub fn evaluate(ckpt: &Checkpoint, corpus: &LoadedCorpus, vocab: &Vocabulary) -> Result<EvalReport> {
    if vocab.size() != ckpt.vocab_size {
        return Err(Error::contract(format!(
            "vocabulary size {} does not match the checkpoint's {}",
            vocab.size(),
            ckpt.vocab_size
        )));
    }
    if ckpt.config.input_side() != corpus.side {
        return Err(Error::Data(format!(
            "checkpoint expects {0}x{0} images but the corpus is {1}x{1}",
            ckpt.config.input_side(),
            corpus.side
        )));
    }
    let (decoded, _alpha) = decode_corpus(&ckpt.model, corpus)?;
    let pairs: Vec<EvalPair> = decoded
        .into_iter()
        .zip(corpus.ids.iter().zip(&corpus.references))
        .map(|(ids, (&id, references))| {
            Ok(EvalPair {
                id,
                candidate: ids_to_tokens(vocab, &ids)?,
                references: references.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let config_echo = serde_json::to_value(&ckpt.config).map_err(|e| Error::Format {
        path: "<config>".into(),
        detail: e.to_string(),
    })?;
    corpus_evaluate(&ckpt.model.kind().to_string(), config_echo, &pairs)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

// ----- captioning ---------------------------------------------------------------

/// Caption file written next to a caption: the decoded tokens plus the
/// attention trace, enough to render heatmaps later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub tokens: Vec<String>,
    pub grid_side: usize,
    pub trace: AttentionTrace,
}

/// Greedy-decode one image to a space-joined caption; attention models also
/// return the trace bundle.
pub fn caption_image(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    image: &Tensor,
) -> Result<(String, Option<TraceFile>)> {
    if vocab.size() != ckpt.vocab_size {
        return Err(Error::contract(format!(
            "vocabulary size {} does not match the checkpoint's {}",
            vocab.size(),
            ckpt.vocab_size
        )));
    }
    let side = ckpt.config.input_side();
    if image.shape() != [3, side, side] {
        return Err(Error::Data(format!(
            "image shape {:?} does not match the encoder's expected [3, {side}, {side}]",
            image.shape()
        )));
    }
    let (ids, trace) = decode_image(&ckpt.model, image, ckpt.config.t_max - 2)?;
    let tokens = ids_to_tokens(vocab, &ids)?;
    let caption = tokens.join(" ");
    let bundle = trace.map(|trace| TraceFile {
        tokens,
        grid_side: ckpt.config.grid_side,
        trace,
    });
    Ok((caption, bundle))
}

pub fn write_trace(trace: &TraceFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(trace).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

// ----- attention heatmaps ----------------------------------------------------------

/// Render each attention step as a grayscale PGM named <index>_<token>.pgm:
/// the g x g weights min-max normalized to [0,255] (constant maps to 128)
/// and nearest-neighbor upscaled.
pub fn export_attention_maps(
    trace: &AttentionTrace,
    tokens: &[String],
    grid_side: usize,
    upscale: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if trace.steps.is_empty() {
        return Err(Error::contract("export_attention_maps: empty trace"));
    }
    if trace.steps.len() != tokens.len() {
        return Err(Error::contract(format!(
            "trace has {} steps but {} tokens were given",
            trace.steps.len(),
            tokens.len()
        )));
    }
    if upscale == 0 {
        return Err(Error::contract("export_attention_maps: upscale must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let side = grid_side * upscale;
    let mut paths = Vec::with_capacity(tokens.len());
    for (index, (alpha, token)) in trace.steps.iter().zip(tokens).enumerate() {
        if alpha.len() != grid_side * grid_side {
            return Err(Error::contract(format!(
                "step {index}: {} weights do not fill a {grid_side}x{grid_side} grid",
                alpha.len()
            )));
        }
        let lo = alpha.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gray: Vec<u8> = alpha
            .iter()
            .map(|&w| {
                if hi > lo {
                    ((w - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    128
                }
            })
            .collect();
        let mut pixels = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                pixels[y * side + x] = gray[(y / upscale) * grid_side + (x / upscale)];
            }
        }
        let path = out_dir.join(format!("{index}_{token}.pgm"));
        data::write_pgm(&path, side, side, &pixels)?;
        paths.push(path);
    }
    Ok(paths)
}

// ----- comparison -------------------------------------------------------------------

/// Per-metric win/loss/tie tally (model A's perspective).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWins {
    pub metric: String,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

/// A sentence where BLEU-4 and WER rank the two models oppositely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRow {
    pub id: u64,
    pub bleu4_a: f64,
    pub bleu4_b: f64,
    pub wer_a: f64,
    pub wer_b: f64,
}

/// Side-by-side corpus metrics plus per-sentence tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model_a: String,
    pub model_b: String,
    pub corpus_a: CorpusScores,
    pub corpus_b: CorpusScores,
    pub wins: Vec<MetricWins>,
    pub disagreements: Vec<DisagreementRow>,
}

/// Compare two evaluation reports over the same sentences.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ComparisonReport> {
    let ids_a: Vec<u64> = a.per_sentence.iter().map(|s| s.id).collect();
    let ids_b: Vec<u64> = b.per_sentence.iter().map(|s| s.id).collect();
    if ids_a != ids_b {
        return Err(Error::contract(
            "comparison requires both reports to cover the same split in the same order",
        ));
    }

    // (name, extractor, higher-is-better)
    type Getter = fn(&crate::metrics::SentenceScores) -> f64;
    let metrics: [(&str, Getter, bool); 7] = [
        ("bleu1", |s| s.bleu1, true),
        ("bleu2", |s| s.bleu2, true),
        ("bleu3", |s| s.bleu3, true),
        ("bleu4", |s| s.bleu4, true),
        ("gleu", |s| s.gleu, true),
        ("meteor", |s| s.meteor, true),
        ("wer", |s| s.wer, false),
    ];
    let wins = metrics
        .iter()
        .map(|(name, get, higher_better)| {
            let mut tally = MetricWins {
                metric: name.to_string(),
                a_wins: 0,
                b_wins: 0,
                ties: 0,
            };
            for (sa, sb) in a.per_sentence.iter().zip(&b.per_sentence) {
                let (va, vb) = (get(sa), get(sb));
                let a_better = if *higher_better { va > vb } else { va < vb };
                let b_better = if *higher_better { vb > va } else { vb < va };
                if a_better {
                    tally.a_wins += 1;
                } else if b_better {
                    tally.b_wins += 1;
                } else {
                    tally.ties += 1;
                }
            }
            tally
        })
        .collect();

    let disagreements = a
        .per_sentence
        .iter()
        .zip(&b.per_sentence)
        .filter(|(sa, sb)| {
            let bleu_prefers_a = sa.bleu4 > sb.bleu4;
            let bleu_prefers_b = sb.bleu4 > sa.bleu4;
            let wer_prefers_a = sa.wer < sb.wer;
            let wer_prefers_b = sb.wer < sa.wer;
            (bleu_prefers_a && wer_prefers_b) || (bleu_prefers_b && wer_prefers_a)
        })
        .map(|(sa, sb)| DisagreementRow {
            id: sa.id,
            bleu4_a: sa.bleu4,
            bleu4_b: sb.bleu4,
            wer_a: sa.wer,
            wer_b: sb.wer,
        })
        .collect();

    Ok(ComparisonReport {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        corpus_a: a.corpus.clone(),
        corpus_b: b.corpus.clone(),
        wins,
        disagreements,
    })
}

// ----- sweep ---------------------------------------------------------------------------

/// One sweep setting with its test-split corpus metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vocab_cap: usize,
    pub epochs: usize,
    pub images: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub gleu: f64,
    pub meteor: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

/// Train/evaluate the cross-product of vocabulary caps, epoch counts, and
/// training-image counts. Each (cap, images) cell trains once to the largest
/// epoch count; the per-epoch checkpoints provide the smaller ones.
pub fn sweep(
    base: &TrainConfig,
    vocab_caps: &[usize],
    epoch_counts: &[usize],
    image_counts: &[usize],
    corpus_seed: u64,
    work_dir: &Path,
) -> Result<SweepSummary> {
    if vocab_caps.is_empty() || epoch_counts.is_empty() || image_counts.is_empty() {
        return Err(Error::Config("sweep axes must be nonempty".into()));
    }
    if epoch_counts.contains(&0) {
        return Err(Error::Config("sweep epoch counts must be positive".into()));
    }
    let max_epochs = *epoch_counts.iter().max().expect("nonempty");

    // Evaluated cells keyed by (cap, epochs, images), filled per training run.
    let mut cells: Vec<((usize, usize, usize), CorpusScores)> = Vec::new();
    for &images in image_counts {
        let data_dir = work_dir.join(format!("data_{images}"));
        generate_dataset(
            corpus_seed,
            SplitCounts {
                train: images,
                val: 1,
                test: (images / 5).max(1),
            },
            base.input_side(),
            &data_dir,
        )?;
        let train_manifest = DatasetManifest::load(&data_dir.join("train.jsonl"))?;
        let test_manifest = DatasetManifest::load(&data_dir.join("test.jsonl"))?;
        let captions: Vec<String> = train_manifest
            .records
            .iter()
            .flat_map(|r| r.captions.clone())
            .collect();
        for &cap in vocab_caps {
            let vocab = Vocabulary::build(&captions, cap)?;
            let config = TrainConfig {
                vocab_cap: cap,
                epochs: max_epochs,
                ..base.clone()
            };
            let train_corpus = data::load_corpus(&train_manifest, &data_dir, &vocab, config.t_max)?;
            let test_corpus = data::load_corpus(&test_manifest, &data_dir, &vocab, config.t_max)?;
            let run_dir = work_dir.join(format!("run_k{cap}_n{images}"));
            let outcome = train(&config, &train_corpus, None, &vocab, &run_dir)?;
            for &epochs in epoch_counts {
                let ckpt = checkpoint::load(&outcome.checkpoint_paths[epochs - 1])?;
                let report = evaluate(&ckpt, &test_corpus, &vocab)?;
                cells.push(((cap, epochs, images), report.corpus));
            }
        }
    }

    let mut rows = Vec::new();
    for &cap in vocab_caps {
        for &epochs in epoch_counts {
            for &images in image_counts {
                let corpus = &cells
                    .iter()
                    .find(|(key, _)| *key == (cap, epochs, images))
                    .expect("every cell was evaluated")
                    .1;
                rows.push(SweepRow {
                    vocab_cap: cap,
                    epochs,
                    images,
                    bleu1: corpus.bleu1,
                    bleu2: corpus.bleu2,
                    bleu3: corpus.bleu3,
                    bleu4: corpus.bleu4,
                    gleu: corpus.gleu,
                    meteor: corpus.meteor,
                    wer: corpus.wer,
                });
            }
        }
    }
    Ok(SweepSummary { rows })
}

pub fn write_summary(summary: &SweepSummary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
