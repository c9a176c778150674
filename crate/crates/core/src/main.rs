use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use embreg::config::{apply_overrides, load_config, parse_override_args};
use embreg::corpus::{
    detokenize, generate_synthetic_task, load_text_corpus, save_text_corpus, tokenize, wer, Dataset, Split,
    SyntheticTaskSpec, WerReport,
};
use embreg::decoding::{beam_search, DecodeConfig};
use embreg::embedding::{load_embeddings, save_embeddings, train_embeddings_logged, EmbedTrainConfig, Vocab};
use embreg::objectives::TrainMode;
use embreg::rnnlm::{frame, lm_train, LmCheckpoint, LmConfig};
use embreg::seq2seq::Checkpoint;
use embreg::train::{asr_train, RunConfig};
use embreg::{Error, Result};

#[derive(Parser)]
#[command(name = "embreg", version, about = "Embedding-regularized sequence-to-sequence recognizer toolkit")]
struct Cli {
    /// Suppress progress lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/dev sets and text corpus.
    GenData {
        /// JSON task spec; defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Spec overrides, e.g. `--noise_sigma 0.3`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Train word embeddings on a text corpus.
    EmbedTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// skipgram or cbow.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Train the recognizer (baseline, reg or fused).
    AsrTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl, dev.jsonl and corpus.txt.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// baseline, reg or fused.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Dotted config overrides, e.g. `--optim.lr 0.5`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Train the recurrent language model.
    LmTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Beam-search decode a dataset with a trained checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset in JSON lines.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        length_norm: bool,
        /// Include per-step top-5 tokens.
        #[arg(long)]
        verbose: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word error rate between reference and hypothesis files.
    EvalWer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
}

fn emit(v: impl Serialize) {
    println!("{}", serde_json::to_string(&v).expect("serializable"));
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn configured<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    let base = match path {
        Some(p) => load_config(p)?,
        None => T::default(),
    };
    apply_overrides(base, &parse_override_args(overrides)?)
}

fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn corpus_vocab(lines: &[String]) -> Vocab {
    Vocab::from_corpus(lines.iter().map(String::as_str))
}

fn gen_data(spec: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let spec: SyntheticTaskSpec = configured(spec, overrides)?;
    let task = generate_synthetic_task(&spec)?;
    std::fs::create_dir_all(out)?;
    task.train.save(out.join("train.jsonl"))?;
    task.dev.save(out.join("dev.jsonl"))?;
    save_text_corpus(&task.text, out.join("corpus.txt"))?;
    let frames: usize = task.train.utterances.iter().map(|u| u.features.rows()).sum();
    emit(json!({
        "train_utterances": task.train.len(),
        "dev_utterances": task.dev.len(),
        "text_sentences": task.text.len(),
        "vocab_size": corpus_vocab(&task.text).len(),
        "mean_train_frames": frames as f64 / task.train.len().max(1) as f64,
        "out": out,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn embed_train(
    corpus: &Path,
    mode: Option<&str>,
    dim: Option<usize>,
    config: Option<&Path>,
    out: &Path,
    overrides: &[String],
    quiet: bool,
) -> Result<()> {
    let mut cfg: EmbedTrainConfig = configured(config, overrides)?;
    if let Some(m) = mode {
        cfg.mode = m.parse()?;
    }
    if let Some(d) = dim {
        cfg.dim = d;
    }
    cfg.validate()?;
    let lines = load_text_corpus(corpus)?;
    let vocab = corpus_vocab(&lines);
    let ids: Vec<Vec<usize>> = lines.iter().map(|l| tokenize(&vocab, l)).collect();
    let table = train_embeddings_logged(&ids, vocab.len(), &cfg, &mut |epoch, lr| {
        if !quiet {
            emit(json!({"epoch": epoch, "lr": lr}));
        }
    })?;
    save_embeddings(&vocab, &table, out)?;
    emit(json!({
        "vocab_size": vocab.len(),
        "dim": table.dim(),
        "vocab_hash": vocab.hash(),
        "table_hash": table.hash(),
        "out": out,
    }));
    Ok(())
}

fn asr_train_cmd(
    config: Option<&Path>,
    data: &Path,
    embeddings: Option<&Path>,
    mode: Option<&str>,
    out: &Path,
    overrides: &[String],
    quiet: bool,
) -> Result<()> {
    let mut run: RunConfig = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        run.mode = m.parse()?;
    }
    let pairs = parse_override_args(overrides)?;
    let mut run = apply_overrides(run, &pairs)?;
    let explicit = |key: &str| pairs.iter().any(|(k, _)| k == key);
    let requested = (run.reg.lambda, run.fusion.lambda_f);
    run = run.normalized();
    if (explicit("reg.lambda") && requested.0 != run.reg.lambda)
        || (explicit("fusion.lambda_f") && requested.1 != run.fusion.lambda_f)
    {
        warn(&format!(
            "mode {} sets lambda = {} and lambda_f = {}",
            run.mode, run.reg.lambda, run.fusion.lambda_f
        ));
    }

    let lines = load_text_corpus(data.join("corpus.txt"))?;
    let vocab = corpus_vocab(&lines);
    run.model.vocab_size = vocab.len();
    run.validate()?;

    let table = match (run.mode, embeddings) {
        (TrainMode::Baseline, Some(_)) => {
            warn("baseline mode ignores --embeddings");
            None
        }
        (TrainMode::Baseline, None) => None,
        (m, None) => return Err(Error::Config(format!("mode {m} needs --embeddings"))),
        (_, Some(p)) => {
            let (evocab, table) = load_embeddings(p)?;
            if evocab.hash() != vocab.hash() {
                return Err(Error::Config("embedding vocabulary differs from the corpus vocabulary".into()));
            }
            run.check_table(&table)?;
            Some(table)
        }
    };
    let hash_before = table.as_ref().map(|t| t.hash());

    let train = Dataset::load(Split::Train, data.join("train.jsonl"))?.encode(&vocab);
    let dev = Dataset::load(Split::Dev, data.join("dev.jsonl"))?.encode(&vocab);
    let report = asr_train(&train, &dev, table.as_ref(), &run, &mut |line| {
        if !quiet {
            emit(line);
        }
    })?;
    let hash_after = table.as_ref().map(|t| t.hash());
    if hash_before != hash_after {
        return Err(Error::Contract("embedding table changed during training".into()));
    }
    let ckpt = Checkpoint::new(&report.model, &vocab, run.mode, run.fusion, hash_after.clone());
    ckpt.save(out)?;
    emit(json!({
        "mode": run.mode.to_string(),
        "best_epoch": report.best_epoch,
        "best_dev_token_error": report.best_dev_error,
        "table_hash": hash_after,
        "checkpoint_hash": file_hash(out)?,
        "out": out,
    }));
    Ok(())
}

fn lm_train_cmd(corpus: &Path, config: Option<&Path>, out: &Path, overrides: &[String], quiet: bool) -> Result<()> {
    let mut cfg: LmConfig = configured(config, overrides)?;
    let lines = load_text_corpus(corpus)?;
    let vocab = corpus_vocab(&lines);
    cfg.vocab_size = vocab.len();
    let framed: Vec<Vec<usize>> = lines.iter().map(|l| frame(&tokenize(&vocab, l))).collect();
    let report = lm_train(&framed, &cfg)?;
    if !quiet {
        for (epoch, ppl) in report.perplexity_log.iter().enumerate() {
            emit(json!({"epoch": epoch, "perplexity": ppl}));
        }
    }
    LmCheckpoint::new(&report.lm, &vocab, report.perplexity_log.clone()).save(out)?;
    emit(json!({
        "vocab_hash": vocab.hash(),
        "final_perplexity": report.perplexity_log.last(),
        "out": out,
    }));
    Ok(())
}

#[derive(Serialize)]
struct TopToken {
    token: String,
    log_prob: f64,
}

#[derive(Serialize)]
struct DecodeLine {
    utterance_id: String,
    tokens: Vec<usize>,
    text: String,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top5: Option<Vec<Vec<TopToken>>>,
}

struct DecodeArgs<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    embeddings: Option<&'a Path>,
    beam: Option<usize>,
    max_len: Option<usize>,
    lm: Option<&'a Path>,
    lm_weight: Option<f64>,
    length_norm: bool,
    verbose: bool,
    out: &'a Path,
}

fn decode_cmd(a: DecodeArgs<'_>) -> Result<()> {
    let ckpt = Checkpoint::load(a.checkpoint)?;
    let (model, vocab) = ckpt.restore()?;
    let mut cfg = DecodeConfig {
        mode: ckpt.mode.into(),
        fusion: ckpt.fusion,
        length_norm: a.length_norm,
        trace: a.verbose,
        ..DecodeConfig::default()
    };
    if let Some(b) = a.beam {
        cfg.beam = b;
    }
    if let Some(m) = a.max_len {
        cfg.max_len = m;
    }
    cfg.lm_weight = match (a.lm, a.lm_weight) {
        (None, Some(w)) if w > 0.0 => {
            warn("--lm-weight without --lm is ignored");
            0.0
        }
        (None, _) => 0.0,
        (Some(_), w) => w.unwrap_or(cfg.lm_weight),
    };
    cfg.validate()?;

    let table = match ckpt.mode {
        TrainMode::Fused => {
            let p = a
                .embeddings
                .ok_or_else(|| Error::Config("fused checkpoint needs --embeddings".into()))?;
            let (evocab, table) = load_embeddings(p)?;
            if evocab.hash() != ckpt.vocab_hash {
                return Err(Error::Config("embedding vocabulary differs from the checkpoint".into()));
            }
            if ckpt.table_hash.as_deref().is_some_and(|h| h != table.hash()) {
                return Err(Error::Config("embedding table differs from the one used in training".into()));
            }
            Some(table)
        }
        _ => None,
    };
    let lm = match a.lm {
        None => None,
        Some(p) => {
            let lc = LmCheckpoint::load(p)?;
            if lc.vocab_hash != ckpt.vocab_hash {
                return Err(Error::Config("LM vocabulary hash differs from the recognizer's".into()));
            }
            Some(lc.restore()?.0)
        }
    };

    let data = Dataset::load(Split::Test, a.data)?;
    let mut w = BufWriter::new(File::create(a.out)?);
    for u in &data.utterances {
        let hyps = beam_search(&model, &u.features, table.as_ref(), lm.as_ref(), &cfg)?;
        let best = hyps.first().ok_or_else(|| Error::Contract("beam search returned nothing".into()))?;
        let words = best.words().to_vec();
        let top5 = a.verbose.then(|| {
            best.trace
                .iter()
                .map(|step| {
                    step.iter()
                        .map(|&(t, lp)| TopToken { token: vocab.token(t).unwrap_or("?").to_string(), log_prob: lp })
                        .collect()
                })
                .collect()
        });
        let line = DecodeLine {
            utterance_id: u.id.clone(),
            text: detokenize(&vocab, &words),
            tokens: words,
            score: best.score,
            top5,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    emit(json!({"utterances": data.len(), "out": a.out}));
    Ok(())
}

/// Reads transcripts: JSON lines with `utterance_id` and `text` are keyed
/// by id, anything else is taken line by line.
fn read_transcripts(path: &Path) -> Result<Vec<(Option<String>, String)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Option<serde_json::Value> = serde_json::from_str(&line).ok();
        match parsed.as_ref().and_then(|v| v.as_object()) {
            Some(o) => {
                let text = o
                    .get("text")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: "missing \"text\"".into() })?;
                let id = o.get("utterance_id").and_then(|t| t.as_str()).map(str::to_string);
                out.push((id, text.to_string()));
            }
            None => out.push((None, line)),
        }
    }
    Ok(out)
}

fn eval_wer(reference: &Path, hyp: &Path) -> Result<()> {
    let refs = read_transcripts(reference)?;
    let hyps = read_transcripts(hyp)?;
    let keyed = refs.iter().all(|r| r.0.is_some()) && hyps.iter().all(|h| h.0.is_some());
    let words = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
    let mut reports = Vec::with_capacity(refs.len());
    if keyed && !refs.is_empty() {
        let by_id: HashMap<&str, &str> =
            hyps.iter().map(|(id, t)| (id.as_deref().expect("keyed"), t.as_str())).collect();
        for (id, text) in &refs {
            let id = id.as_deref().expect("keyed");
            let h = by_id.get(id).ok_or_else(|| Error::Data(format!("no hypothesis for {id}")))?;
            reports.push(wer(&words(text), &words(h))?);
        }
    } else {
        if refs.len() != hyps.len() {
            return Err(Error::Data(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
        }
        for ((_, r), (_, h)) in refs.iter().zip(&hyps) {
            reports.push(wer(&words(r), &words(h))?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Data("reference file is empty".into()));
    }
    emit(WerReport::merge(reports));
    Ok(())
}

/// `--quiet` given after the subcommand lands among the overrides.
fn take_quiet(overrides: &mut Vec<String>) -> bool {
    let before = overrides.len();
    overrides.retain(|a| a != "--quiet");
    overrides.len() != before
}

fn run(cli: Cli) -> Result<()> {
    let mut quiet = cli.quiet;
    let mut cmd = cli.cmd;
    match &mut cmd {
        Cmd::GenData { overrides, .. }
        | Cmd::EmbedTrain { overrides, .. }
        | Cmd::AsrTrain { overrides, .. }
        | Cmd::LmTrain { overrides, .. } => quiet |= take_quiet(overrides),
        Cmd::Decode { .. } | Cmd::EvalWer { .. } => {}
    }
    match cmd {
        Cmd::GenData { spec, out, overrides } => gen_data(spec.as_deref(), &out, &overrides),
        Cmd::EmbedTrain { corpus, mode, dim, config, out, overrides } => {
            embed_train(&corpus, mode.as_deref(), dim, config.as_deref(), &out, &overrides, quiet)
        }
        Cmd::AsrTrain { config, data, embeddings, mode, out, overrides } => asr_train_cmd(
            config.as_deref(),
            &data,
            embeddings.as_deref(),
            mode.as_deref(),
            &out,
            &overrides,
            quiet,
        ),
        Cmd::LmTrain { corpus, config, out, overrides } => {
            lm_train_cmd(&corpus, config.as_deref(), &out, &overrides, quiet)
        }
        Cmd::Decode { checkpoint, data, embeddings, beam, max_len, lm, lm_weight, length_norm, verbose, out } => {
            decode_cmd(DecodeArgs {
                checkpoint: &checkpoint,
                data: &data,
                embeddings: embeddings.as_deref(),
                beam,
                max_len,
                lm: lm.as_deref(),
                lm_weight,
                length_norm,
                verbose,
                out: &out,
            })
        }
        Cmd::EvalWer { reference, hyp } => eval_wer(&reference, &hyp),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
