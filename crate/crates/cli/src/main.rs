//! Batch command-line surface: corpus generation, LM and net training,
//! decoding, scoring, augmentation, and the pipeline baseline.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Logging
//! goes to stderr, controlled by the `ENTMARK_LOG` environment variable;
//! data goes to files or stdout only.

mod commands;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "entmark", version, about = "End-to-end entity extraction with inline marker characters")]
struct Cli {
    /// Cap on worker threads (default: all cores). Results do not depend
    /// on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus operations.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Language-model operations.
    Lm {
        #[command(subcommand)]
        cmd: LmCmd,
    },
    /// Train the acoustic model (two-phase schedule: asr, then ner).
    Train(TrainArgs),
    /// Beam-search decoding to n-best JSONL.
    Decode(DecodeArgs),
    /// Score hypotheses against a reference manifest.
    Eval(EvalArgs),
    /// Annotate plain transcripts with the rule-based text NER.
    Augment(AugmentArgs),
    /// Write the built-in default rule set as JSON.
    Rules(RulesArgs),
    /// Line-based transcript transforms.
    Transform(TransformArgs),
    /// Pipeline baseline: masked ASR decode, then rule-based annotation.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a corpus: manifest, feature files, alphabet, resolved spec.
    Gen(CorpusGenArgs),
    /// Write the built-in default corpus spec as JSON.
    Spec(CorpusSpecArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Corpus spec JSON document.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CorpusSpecArgs {
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LmCmd {
    /// Train an n-gram model on a corpus manifest and save it in the
    /// ARPA-style text format.
    Train(LmTrainArgs),
}

#[derive(Args)]
struct LmTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// N-gram order.
    #[arg(long)]
    order: usize,
    /// Train on tagged transcripts (markers as tokens).
    #[arg(long, conflicts_with = "plain")]
    tagged: bool,
    /// Train on plain transcripts.
    #[arg(long)]
    plain: bool,
    /// Star-transform the tagged transcripts first (implies --tagged).
    #[arg(long, conflicts_with = "plain")]
    starred: bool,
    /// Which split to train on.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Asr,
    Ner,
}

#[derive(Args)]
struct TrainArgs {
    /// Training phase: asr (plain targets) or ner (tagged targets).
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Star-transform the ner targets and add the star to the alphabet.
    #[arg(long)]
    starred: bool,
    /// Extra tagged manifest mixed into ner training (augmented data).
    #[arg(long)]
    augment: Option<PathBuf>,
    /// Relative weight of the augmented data (1.0 mixes all of it once).
    #[arg(long, default_value_t = 1.0)]
    augment_weight: f64,
    /// Net configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Corpus manifest (train and dev splits are used).
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to extend; required for --phase ner.
    #[arg(long, required_if_eq("phase", "ner"))]
    from: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// ARPA-style language model; required unless --greedy.
    #[arg(long, required_unless_present = "greedy")]
    lm: Option<PathBuf>,
    /// Greedy best-path decoding (no fusion).
    #[arg(long)]
    greedy: bool,
    /// LM weight.
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Word-bonus weight.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 64)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    n_best: usize,
    /// Per-frame log-probability pruning floor.
    #[arg(long)]
    prune: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Category,
    Catvalue,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference manifest.
    #[arg(long)]
    r#ref: PathBuf,
    /// Hypothesis n-best JSONL (from decode or pipeline).
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Category)]
    mode: ModeArg,
    /// Include word/character error rates.
    #[arg(long)]
    wer: bool,
    /// System label for the printed table.
    #[arg(long, default_value = "e2e")]
    system: String,
    /// Write the full JSON report here (stdout table is always printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Rule set JSON; built-in default when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RulesArgs {
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    /// Star-transform tagged sentences (one per line).
    #[arg(long, conflicts_with = "encode")]
    star: bool,
    /// Encode JSONL records {"words": [...], "entities": [...]} into
    /// tagged sentences.
    #[arg(long)]
    encode: bool,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// ASR checkpoint (marker symbols, if any, are masked).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Rule set JSON; built-in default when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Plain-text language model; greedy ASR decode when omitted.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 64)]
    beam: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ENTMARK_LOG"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            std::process::exit(2);
        }
    }
    let result = match cli.command {
        Command::Corpus { cmd } => match cmd {
            CorpusCmd::Gen(a) => commands::corpus_gen(a),
            CorpusCmd::Spec(a) => commands::corpus_spec(a),
        },
        Command::Lm { cmd } => match cmd {
            LmCmd::Train(a) => commands::lm_train(a),
        },
        Command::Train(a) => commands::train(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Augment(a) => commands::augment(a),
        Command::Rules(a) => commands::rules(a),
        Command::Transform(a) => commands::transform(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

