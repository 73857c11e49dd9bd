//! Command-line surface: dataset generation, vocabulary building, training,
//! evaluation, captioning, heatmap export, sweeps, and model comparison.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use attncap::data::{self, DatasetManifest, LoadedCorpus, SplitCounts, Vocabulary};
use attncap::error::{Error, Result};
use attncap::train::harness::{self, ComparisonReport};
use attncap::train::{checkpoint, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "attncap",
    version,
    about = "Train and probe two tiny image captioners: a fixed-vector baseline and a soft-attention model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic captioned-shapes corpus (train/val/test).
    GenData(GenDataArgs),
    /// Build a capped vocabulary from a split's captions.
    BuildVocab(BuildVocabArgs),
    /// Train a model, checkpointing every epoch.
    Train(TrainArgs),
    /// Greedy-decode a split and score it against all references.
    Evaluate(EvaluateArgs),
    /// Caption a single image (attention models also write a trace file).
    Caption(CaptionArgs),
    /// Render a trace file's attention weights as PGM heatmaps.
    AttentionMaps(AttentionMapsArgs),
    /// Train/evaluate a vocab-cap x epochs x image-count cross-product.
    Sweep(SweepArgs),
    /// Evaluate two checkpoints on one split and tabulate wins per metric.
    Compare(CompareArgs),
}

// ----- shared config plumbing ---------------------------------------------------

/// Training-configuration layering: defaults, then --config file, then flags.
/// Flag values use the same syntax as file values, so both go through one
/// parser.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// UTF-8 `key = value` file; keys equal the flag names below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model kind: vanilla or attention.
    #[arg(long)]
    model: Option<String>,
    /// Word-embedding width.
    #[arg(long)]
    embed_dim: Option<String>,
    /// LSTM hidden width.
    #[arg(long)]
    hidden_dim: Option<String>,
    /// Annotation-vector width D.
    #[arg(long)]
    feature_dim: Option<String>,
    /// Attention MLP width A.
    #[arg(long)]
    attn_dim: Option<String>,
    /// Vocabulary cap k.
    #[arg(long)]
    vocab_cap: Option<String>,
    /// Optimizer step size.
    #[arg(long)]
    learning_rate: Option<String>,
    /// Examples per gradient step.
    #[arg(long)]
    batch_size: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<String>,
    /// Doubly-stochastic penalty coefficient.
    #[arg(long)]
    lambda: Option<String>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Seed for parameter initialization.
    #[arg(long)]
    param_seed: Option<String>,
    /// Seed for per-epoch shuffling.
    #[arg(long)]
    shuffle_seed: Option<String>,
    /// Maximum encoded caption length (incl. START/END).
    #[arg(long)]
    t_max: Option<String>,
    /// Encoder stage widths as a comma list, e.g. 8,16,32.
    #[arg(long)]
    channels: Option<String>,
    /// Encoder output grid side g.
    #[arg(long)]
    grid_side: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        let overrides: [(&str, &Option<String>); 16] = [
            ("model", &self.model),
            ("embed-dim", &self.embed_dim),
            ("hidden-dim", &self.hidden_dim),
            ("feature-dim", &self.feature_dim),
            ("attn-dim", &self.attn_dim),
            ("vocab-cap", &self.vocab_cap),
            ("learning-rate", &self.learning_rate),
            ("batch-size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lambda", &self.lambda),
            ("optimizer", &self.optimizer),
            ("param-seed", &self.param_seed),
            ("shuffle-seed", &self.shuffle_seed),
            ("t-max", &self.t_max),
            ("channels", &self.channels),
            ("grid-side", &self.grid_side),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                config.set_key(key, value)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn load_corpus_for(
    manifest_path: &Path,
    vocab: &Vocabulary,
    t_max: usize,
) -> Result<LoadedCorpus> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    data::load_corpus(&manifest, root, vocab, t_max)
}

// ----- gen-data ------------------------------------------------------------------

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for manifests and images.
    #[arg(long)]
    out: PathBuf,
    /// Training images.
    #[arg(long, default_value_t = 500)]
    train: usize,
    /// Validation images.
    #[arg(long, default_value_t = 100)]
    val: usize,
    /// Test images.
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 48)]
    side: usize,
    /// Seed for scenes and captions.
    #[arg(long, default_value_t = 17)]
    corpus_seed: u64,
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let counts = SplitCounts {
        train: args.train,
        val: args.val,
        test: args.test,
    };
    let manifests = data::generate_dataset(args.corpus_seed, counts, args.side, &args.out)?;
    for path in &manifests {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ----- build-vocab ------------------------------------------------------------------

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Manifest whose captions feed the vocabulary.
    #[arg(long)]
    manifest: PathBuf,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
    /// Cap on non-reserved tokens.
    #[arg(long, default_value_t = 200)]
    k: usize,
}

fn run_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let captions: Vec<&str> = manifest
        .records
        .iter()
        .flat_map(|r| r.captions.iter().map(String::as_str))
        .collect();
    let vocab = Vocabulary::build(&captions, args.k)?;
    vocab.save(&args.out)?;
    println!("wrote {} ({} tokens)", args.out.display(), vocab.size());
    Ok(())
}

// ----- train ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training-split manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional validation-split manifest (adds val BLEU-4 to the run log).
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Vocabulary TSV.
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.config.build()?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let train_corpus = load_corpus_for(&args.manifest, &vocab, config.t_max)?;
    let val_corpus = args
        .val_manifest
        .as_deref()
        .map(|path| load_corpus_for(path, &vocab, config.t_max))
        .transpose()?;
    let outcome = train(&config, &train_corpus, val_corpus.as_ref(), &vocab, &args.out)?;
    for row in &outcome.run_log.rows {
        match row.val_bleu4 {
            Some(b4) => println!(
                "epoch {} train_loss {:.6} val_bleu4 {:.6}",
                row.epoch, row.train_loss, b4
            ),
            None => println!("epoch {} train_loss {:.6}", row.epoch, row.train_loss),
        }
    }
    println!(
        "wrote {} checkpoints under {}",
        outcome.checkpoint_paths.len(),
        args.out.display()
    );
    Ok(())
}

// ----- evaluate -----------------------------------------------------------------------

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split manifest to decode.
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary TSV (must match the checkpoint).
    #[arg(long)]
    vocab: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,
}

fn print_corpus_line(label: &str, c: &attncap::metrics::CorpusScores) {
    println!(
        "{label}: bleu1 {:.4} bleu2 {:.4} bleu3 {:.4} bleu4 {:.4} gleu {:.4} meteor {:.4} wer {:.4}",
        c.bleu1, c.bleu2, c.bleu3, c.bleu4, c.gleu, c.meteor, c.wer
    );
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let corpus = load_corpus_for(&args.manifest, &vocab, ckpt.config.t_max)?;
    let report = harness::evaluate(&ckpt, &corpus, &vocab)?;
    harness::write_report(&report, &args.out)?;
    print_corpus_line(&report.model, &report.corpus);
    println!("wrote {}", args.out.display());
    Ok(())
}

// ----- caption -----------------------------------------------------------------------

#[derive(Args, Debug)]
struct CaptionArgs {
    /// Checkpoint to decode with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary TSV (must match the checkpoint).
    #[arg(long)]
    vocab: PathBuf,
    /// PPM image to caption.
    #[arg(long)]
    image: PathBuf,
    /// Trace JSON path (attention models only); defaults to
    /// <image>.trace.json.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

fn run_caption(args: &CaptionArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let image = data::load_image(&args.image)?;
    let (caption, trace) = harness::caption_image(&ckpt, &vocab, &image)?;
    println!("{caption}");
    if let Some(trace) = trace {
        let trace_out = args.trace_out.clone().unwrap_or_else(|| {
            let mut s = args.image.as_os_str().to_owned();
            s.push(".trace.json");
            PathBuf::from(s)
        });
        harness::write_trace(&trace, &trace_out)?;
        eprintln!("wrote {}", trace_out.display());
    }
    Ok(())
}

// ----- attention-maps ------------------------------------------------------------------

#[derive(Args, Debug)]
struct AttentionMapsArgs {
    /// Trace JSON produced by `caption`.
    #[arg(long)]
    trace: PathBuf,
    /// Output directory for the PGM heatmaps.
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbor scale factor per grid cell.
    #[arg(long, default_value_t = 8)]
    upscale: usize,
}

fn run_attention_maps(args: &AttentionMapsArgs) -> Result<()> {
    let bundle = harness::read_trace(&args.trace)?;
    let paths = harness::export_attention_maps(
        &bundle.trace,
        &bundle.tokens,
        bundle.grid_side,
        args.upscale,
        &args.out,
    )?;
    println!("wrote {} heatmaps under {}", paths.len(), args.out.display());
    Ok(())
}

// ----- sweep -------------------------------------------------------------------------

#[derive(Args, Debug)]
struct SweepArgs {
    /// Working directory: datasets, runs, and sweep.json land here.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary caps, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "50,200")]
    vocab_caps: Vec<usize>,
    /// Epoch counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "5,15")]
    epoch_counts: Vec<usize>,
    /// Training-image counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "300")]
    image_counts: Vec<usize>,
    /// Seed for the generated sweep datasets.
    #[arg(long, default_value_t = 17)]
    corpus_seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.config.build()?;
    let summary = harness::sweep(
        &base,
        &args.vocab_caps,
        &args.epoch_counts,
        &args.image_counts,
        args.corpus_seed,
        &args.out,
    )?;
    let path = args.out.join("sweep.json");
    harness::write_summary(&summary, &path)?;
    println!("k epochs images bleu1 bleu2 bleu3 bleu4 gleu meteor wer");
    for r in &summary.rows {
        println!(
            "{} {} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            r.vocab_cap, r.epochs, r.images, r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.gleu, r.meteor,
            r.wer
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

// ----- compare ---------------------------------------------------------------------------

#[derive(Args, Debug)]
struct CompareArgs {
    /// First checkpoint (reported as model A).
    #[arg(long)]
    checkpoint_a: PathBuf,
    /// Second checkpoint (reported as model B).
    #[arg(long)]
    checkpoint_b: PathBuf,
    /// Split both checkpoints are decoded on.
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary TSV shared by both checkpoints.
    #[arg(long)]
    vocab: PathBuf,
    /// Comparison JSON output path.
    #[arg(long)]
    out: PathBuf,
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let ckpt_a = checkpoint::load(&args.checkpoint_a)?;
    let ckpt_b = checkpoint::load(&args.checkpoint_b)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if ckpt_a.config.t_max != ckpt_b.config.t_max {
        return Err(Error::contract(
            "checkpoints disagree on t-max; decode lengths would differ",
        ));
    }
    let corpus = load_corpus_for(&args.manifest, &vocab, ckpt_a.config.t_max)?;
    let report_a = harness::evaluate(&ckpt_a, &corpus, &vocab)?;
    let report_b = harness::evaluate(&ckpt_b, &corpus, &vocab)?;
    let comparison = compare_and_write(&report_a, &report_b, &args.out)?;
    print_corpus_line(&format!("a ({})", comparison.model_a), &comparison.corpus_a);
    print_corpus_line(&format!("b ({})", comparison.model_b), &comparison.corpus_b);
    for tally in &comparison.wins {
        println!(
            "{}: a {} b {} ties {}",
            tally.metric, tally.a_wins, tally.b_wins, tally.ties
        );
    }
    println!("disagreements (bleu4 vs wer): {}", comparison.disagreements.len());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn compare_and_write(
    a: &attncap::metrics::EvalReport,
    b: &attncap::metrics::EvalReport,
    out: &Path,
) -> Result<ComparisonReport> {
    let comparison = harness::compare_reports(a, b)?;
    let mut text = serde_json::to_string_pretty(&comparison).map_err(|e| Error::Format {
        path: out.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(comparison)
}

// ----- entry -----------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::BuildVocab(args) => run_build_vocab(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Caption(args) => run_caption(args),
        Command::AttentionMaps(args) => run_attention_maps(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Compare(args) => run_compare(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
