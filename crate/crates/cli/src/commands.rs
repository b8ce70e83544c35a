//! Implementations behind the subcommands. Every run that produces
//! artifacts also writes its resolved configuration next to them.

use crate::{
    AugmentArgs, CorpusGenArgs, CorpusSpecArgs, DecodeArgs, EvalArgs, LmTrainArgs, ModeArg,
    PhaseArg, PipelineArgs, RulesArgs, SplitArg, TrainArgs, TransformArgs,
};
use anyhow::{bail, Context, Result};
use entmark::alphabet::{
    self, lm_tokens, star_transform, Alphabet, Entity, ParsePolicy, TaggedTranscript,
};
use entmark::augment::{annotate, augment_corpus, RuleSet};
use entmark::corpus::{
    self, generate_corpus, read_manifest, write_corpus, CorpusSpec, ManifestRecord, Split,
};
use entmark::decoder::{
    beam_search, mask_to_base, write_nbest, DecoderConfig, Hypothesis, NBestRecord,
};
use entmark::eval::{pair_manifest_nbest, score};
use entmark::lm::{load_lm, save_lm, train_ngram, NgramLm};
use entmark::net::{
    build_samples, extend_output_layer, load_checkpoint, save_checkpoint, train as train_net,
    Checkpoint, Net, NetConfig, Phase, TrainOptions, TrainSample,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// The CLI trains in single precision.
type F = f32;

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Asr => Phase::Asr,
            PhaseArg::Ner => Phase::Ner,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).with_context(|| format!("writing {what} {}", path.display()))?;
    Ok(())
}

fn read_manifest_ctx(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn split_records(records: &[ManifestRecord], split: Split) -> Vec<ManifestRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn load_rules(path: &Option<PathBuf>) -> Result<RuleSet> {
    match path {
        Some(p) => read_json(p, "rule set"),
        None => Ok(RuleSet::default()),
    }
}

pub fn corpus_spec(args: CorpusSpecArgs) -> Result<()> {
    let spec = CorpusSpec::default();
    match &args.out {
        Some(path) => write_json(path, &spec, "corpus spec")?,
        None => println!("{}", serde_json::to_string_pretty(&spec).expect("serializable")),
    }
    Ok(())
}

pub fn corpus_gen(args: CorpusGenArgs) -> Result<()> {
    let mut spec: CorpusSpec = read_json(&args.spec, "corpus spec")?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().context("validating corpus spec")?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let utts = generate_corpus(&spec)?;
    write_corpus(&args.out, &utts).context("writing corpus")?;
    let alphabet = Alphabet::build(&spec.base_chars(), false, false)?;
    alphabet.save(&args.out.join("alphabet.txt"))?;
    write_json(&args.out.join("spec.json"), &spec, "resolved corpus spec")?;
    log::info!(
        "wrote {} utterances ({} symbols) to {}",
        utts.len(),
        alphabet.size(),
        args.out.display()
    );
    Ok(())
}

pub fn lm_train(args: LmTrainArgs) -> Result<()> {
    if !args.tagged && !args.plain && !args.starred {
        bail!("one of --tagged, --plain or --starred is required");
    }
    let records = read_manifest_ctx(&args.manifest)?;
    let records = split_records(&records, args.split.into());
    if records.is_empty() {
        bail!("no records in the requested split of {}", args.manifest.display());
    }
    let texts: Vec<Vec<String>> = records
        .iter()
        .map(|r| -> Result<Vec<String>> {
            if args.plain {
                Ok(lm_tokens(&r.plain))
            } else if args.starred {
                let t = TaggedTranscript::parse(&r.tagged, ParsePolicy::Strict)
                    .with_context(|| format!("utterance {}", r.id))?;
                Ok(lm_tokens(&star_transform(&t).canonical()))
            } else {
                Ok(lm_tokens(&r.tagged))
            }
        })
        .collect::<Result<_>>()?;
    let lm = train_ngram(&texts, args.order)?;
    save_lm(&lm, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    log::info!(
        "trained order-{} model on {} sentences -> {}",
        args.order,
        texts.len(),
        args.out.display()
    );
    Ok(())
}

/// Resolved training run, written next to the checkpoint.
#[derive(Serialize, Deserialize)]
struct ResolvedTrainConfig {
    phase: Phase,
    starred: bool,
    augment: Option<PathBuf>,
    augment_weight: f64,
    manifest: PathBuf,
    from: Option<PathBuf>,
    net: NetConfig,
}

fn mix_augmented(
    gold: &mut Vec<ManifestRecord>,
    augment: &Option<PathBuf>,
    weight: f64,
) -> Result<()> {
    let Some(path) = augment else { return Ok(()) };
    if weight < 0.0 {
        bail!("--augment-weight must be >= 0");
    }
    let extra = read_manifest_ctx(path)?;
    let extra = split_records(&extra, Split::Train);
    let take = (extra.len() as f64 * weight).floor() as usize;
    for i in 0..take {
        gold.push(extra[i % extra.len()].clone());
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let phase: Phase = args.phase.into();
    let mut net_cfg: NetConfig = read_json(&args.config, "net config")?;
    if let Some(seed) = args.seed {
        net_cfg.seed = seed;
    }
    let records = read_manifest_ctx(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let mut train_records = split_records(&records, Split::Train);
    let dev_records = split_records(&records, Split::Dev);
    if train_records.is_empty() {
        bail!("manifest {} has no train split", args.manifest.display());
    }
    if phase == Phase::Asr && args.augment.is_some() {
        bail!("--augment only applies to --phase ner");
    }
    mix_augmented(&mut train_records, &args.augment, args.augment_weight)?;

    let (mut net, alphabet): (Net<F>, Alphabet) = match phase {
        Phase::Asr => {
            let alphabet = Alphabet::load(&dir.join("alphabet.txt"))
                .with_context(|| format!("loading alphabet from {}", dir.display()))?;
            let probe = corpus::load_record_features(&dir, &train_records[0])?;
            net_cfg.feature_dim = probe.dim();
            net_cfg.output_size = alphabet.size();
            (Net::init(net_cfg.clone())?, alphabet)
        }
        Phase::Ner => {
            let from = args.from.as_ref().expect("clap enforces --from for ner");
            let ckpt: Checkpoint<F> = load_checkpoint(from)
                .with_context(|| format!("loading checkpoint {}", from.display()))?;
            let extended_alphabet =
                Alphabet::build(&ckpt.alphabet.base_chars(), args.starred, true)?;
            let mut net = extend_output_layer(&ckpt.net, &ckpt.alphabet, &extended_alphabet)?;
            net_cfg.feature_dim = net.config().feature_dim;
            net_cfg.output_size = extended_alphabet.size();
            net.update_training_params(&net_cfg);
            net_cfg = net.config().clone();
            (net, extended_alphabet)
        }
    };

    let train_set = build_samples(&dir, &train_records, phase, args.starred)?;
    let dev_set = build_samples(&dir, &dev_records, phase, args.starred)?;
    let opts = TrainOptions {
        phase,
        seed: net_cfg.seed,
        threads: None,
        eval_dev: true,
    };
    let history = train_net(&mut net, &train_set, &dev_set, &alphabet, &opts)?;

    let ckpt = Checkpoint {
        net,
        alphabet,
        phase,
        epoch: history.len(),
        history: history.clone(),
    };
    save_checkpoint(&args.out, &ckpt)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let stats_path = args.out.with_extension("stats.jsonl");
    let mut stats = std::fs::File::create(&stats_path)
        .with_context(|| format!("writing {}", stats_path.display()))?;
    for record in &history {
        writeln!(stats, "{}", serde_json::to_string(record).expect("serializable"))?;
    }
    write_json(
        &args.out.with_extension("config.json"),
        &ResolvedTrainConfig {
            phase,
            starred: args.starred,
            augment: args.augment.clone(),
            augment_weight: args.augment_weight,
            manifest: args.manifest.clone(),
            from: args.from.clone(),
            net: net_cfg,
        },
        "resolved train config",
    )?;
    if let Some(last) = history.last() {
        log::info!(
            "finished: loss {:.4} dev_cer {:?} dev_f {:?}",
            last.train_loss,
            last.dev_cer,
            last.dev_f_category
        );
    }
    Ok(())
}

fn decode_records<G: Fn(&TrainSample) -> Result<Vec<Hypothesis>> + Sync>(
    samples: &[TrainSample],
    decode_one: G,
) -> Result<Vec<NBestRecord>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(NBestRecord {
                id: s.id.clone(),
                nbest: decode_one(s).with_context(|| format!("decoding {}", s.id))?,
            })
        })
        .collect()
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let ckpt: Checkpoint<F> = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let records = read_manifest_ctx(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let records = split_records(&records, args.split.into());
    let samples = build_samples(&dir, &records, Phase::Asr, false)?;
    let lm = args
        .lm
        .as_ref()
        .map(|p| load_lm(p).with_context(|| format!("loading LM {}", p.display())))
        .transpose()?;
    let cfg = DecoderConfig {
        alpha: args.alpha,
        beta: args.beta,
        beam_width: args.beam,
        n_best: args.n_best,
        prune_threshold: args.prune,
    };
    let out = decode_records(&samples, |s| {
        let lattice = ckpt.net.forward(&s.features.convert::<F>())?;
        match (&lm, args.greedy) {
            (Some(lm), false) => Ok(beam_search(&lattice, lm, &ckpt.alphabet, &cfg)?),
            _ => {
                let ids = entmark::ctc::greedy_decode(&lattice);
                let tagged = alphabet::from_ids(&ids, &ckpt.alphabet)?;
                let ctc_logp = -entmark::ctc::ctc_loss(&lattice, &ids)?
                    .loss_value() as f64;
                Ok(vec![Hypothesis {
                    wc: alphabet::word_count(&tagged),
                    q: ctc_logp,
                    ctc_logp,
                    lm_logp: 0.0,
                    tagged,
                }])
            }
        }
    })?;
    write_nbest(&args.out, &out)?;
    log::info!("decoded {} utterances -> {}", out.len(), args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let refs = read_manifest_ctx(&args.r#ref)?;
    let refs = refs
        .into_iter()
        .filter(|r| r.source == corpus::Source::Gold)
        .collect::<Vec<_>>();
    let hyps = entmark::decoder::read_nbest(&args.hyp)
        .with_context(|| format!("reading hypotheses {}", args.hyp.display()))?;
    // Score exactly the utterances the hypothesis file covers; every
    // hypothesis id must exist in the manifest (the pairing checks).
    let ref_subset: Vec<ManifestRecord> = refs
        .iter()
        .filter(|r| hyps.iter().any(|h| h.id == r.id))
        .cloned()
        .collect();
    let inputs = pair_manifest_nbest(&ref_subset, &hyps)?;
    let mut report = score(&inputs)?;
    if !args.wer {
        report.wer = None;
        report.cer = None;
    }
    let mut splits: Vec<&str> = ref_subset.iter().map(|r| r.split.as_str()).collect();
    splits.sort_unstable();
    splits.dedup();
    let corpus_label = if splits.len() == 1 { splits[0] } else { "mixed" };
    let headline = match args.mode {
        ModeArg::Category => ("category", &report.category),
        ModeArg::Catvalue => ("cat+value", &report.cat_value),
    };
    println!("{}", report.table(&args.system, corpus_label));
    println!(
        "{}: P={:.4} R={:.4} F={:.4} (value accuracy {:.4})",
        headline.0, headline.1.precision, headline.1.recall, headline.1.f_measure, report.value_accuracy
    );
    if let Some(path) = &args.out {
        write_json(path, &report, "eval report")?;
    }
    Ok(())
}

pub fn augment(args: AugmentArgs) -> Result<()> {
    let records = read_manifest_ctx(&args.manifest)?;
    let rules = load_rules(&args.rules)?;
    let out = augment_corpus(&records, &rules)?;
    corpus::write_manifest(&args.out, &out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    log::info!("annotated {} records -> {}", out.len(), args.out.display());
    Ok(())
}

pub fn rules(args: RulesArgs) -> Result<()> {
    let rules = RuleSet::default();
    match &args.out {
        Some(path) => write_json(path, &rules, "rule set")?,
        None => println!("{}", serde_json::to_string_pretty(&rules).expect("serializable")),
    }
    Ok(())
}

/// One line of `transform --encode` input.
#[derive(Deserialize)]
struct EncodeRecord {
    words: Vec<String>,
    entities: Vec<EncodeEntity>,
}

#[derive(Deserialize)]
struct EncodeEntity {
    category: entmark::alphabet::Category,
    start: usize,
    end: usize,
}

pub fn transform(args: TransformArgs) -> Result<()> {
    if !args.star && !args.encode {
        bail!("one of --star or --encode is required");
    }
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let transformed = if args.star {
            let t = TaggedTranscript::parse(line, ParsePolicy::Strict)
                .with_context(|| format!("line {} of {}", i + 1, args.input.display()))?;
            star_transform(&t).canonical()
        } else {
            let rec: EncodeRecord = serde_json::from_str(line)
                .with_context(|| format!("line {} of {}", i + 1, args.input.display()))?;
            let entities: Vec<Entity> = rec
                .entities
                .iter()
                .map(|e| Entity::from_span(e.category, &rec.words, e.start, e.end))
                .collect();
            alphabet::encode(&rec.words, &entities)
                .with_context(|| format!("line {} of {}", i + 1, args.input.display()))?
                .canonical()
        };
        out.push_str(&transformed);
        out.push('\n');
    }
    std::fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

pub fn pipeline(args: PipelineArgs) -> Result<()> {
    let ckpt: Checkpoint<F> = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let rules = load_rules(&args.rules)?;
    let records = read_manifest_ctx(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let records = split_records(&records, args.split.into());
    let samples = build_samples(&dir, &records, Phase::Asr, false)?;
    let lm: Option<NgramLm> = args
        .lm
        .as_ref()
        .map(|p| load_lm(p).with_context(|| format!("loading LM {}", p.display())))
        .transpose()?;
    let cfg = DecoderConfig {
        alpha: args.alpha,
        beta: args.beta,
        beam_width: args.beam,
        n_best: 1,
        prune_threshold: None,
    };
    let out = decode_records(&samples, |s| {
        let lattice = ckpt.net.forward(&s.features.convert::<F>())?;
        let lattice = mask_to_base(&lattice, &ckpt.alphabet);
        let (plain, q) = match &lm {
            Some(lm) => {
                let hyp = beam_search(&lattice, lm, &ckpt.alphabet, &cfg)?
                    .into_iter()
                    .next()
                    .expect("beam search returns at least one hypothesis");
                (hyp.tagged, hyp.q)
            }
            None => {
                let ids = entmark::ctc::greedy_decode(&lattice);
                (alphabet::from_ids(&ids, &ckpt.alphabet)?, 0.0)
            }
        };
        let tagged = annotate(&plain, &rules)?.canonical();
        let wc = alphabet::word_count(&tagged);
        Ok(vec![Hypothesis {
            tagged,
            q,
            ctc_logp: 0.0,
            lm_logp: 0.0,
            wc,
        }])
    })?;
    write_nbest(&args.out, &out)?;
    log::info!(
        "pipeline decoded {} utterances -> {}",
        out.len(),
        args.out.display()
    );
    Ok(())
}
