//! The `synlm` command line.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use synlm_core::beam::{parse, BeamConfig, PlmScorer};
use synlm_core::eval::{
    eval_item, eval_pair, pair_accuracy, perplexity_joint, perplexity_words, summarize_suite, BeamScorer, MinimalPair,
    PrefixScorer, SuiteItem, WordScorer,
};
use synlm_core::model::{Model, Variant};
use synlm_core::synthdata::{agreement_grammar, agreement_pairs, clause_chain_grammar, sample_corpus, toy_grammar};
use synlm_core::tensor::Float;
use synlm_core::transitions::{oracle, reconstruct, ActionSequence};
use synlm_core::vocab::{build_ngram_vocab, build_token_vocab, JointActionVocab};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, read_text, read_trees, render_oracles, render_trees, sig9, write_text};
use crate::selftest;
use crate::train::{prepare, train, TrainConfig, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "synlm", version, about = "Joint sentence and constituency-parse language models")]
pub struct Cli {
    /// Seed for every random choice (overrides a training config's seed when given).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for training, evaluation and beam search.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Score in float64 (weights are stored as float32).
    #[arg(long, global = true)]
    pub float64: bool,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Copy, Serialize)]
pub struct BeamArgs {
    #[arg(long, default_value_t = 100)]
    pub action_beam: usize,
    #[arg(long, default_value_t = 10)]
    pub word_beam: usize,
    #[arg(long, default_value_t = 5)]
    pub fast_track: usize,
    #[arg(long, default_value_t = 16)]
    pub max_struct_per_word: usize,
}

impl BeamArgs {
    fn config(&self) -> Result<BeamConfig> {
        let c = BeamConfig {
            action_beam: self.action_beam,
            word_beam: self.word_beam,
            fast_track: self.fast_track,
            max_struct_per_word: self.max_struct_per_word,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grammar {
    Agreement,
    Toy,
    ClauseChain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the action sequence of every tree, one per line.
    Oracle {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build token, joint-action and n-gram vocabularies.
    Vocab {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and keep the best-dev checkpoint.
    Train {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Parse sentences with word-synchronous beam search.
    Parse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "sentences")]
        sentence: Option<String>,
        /// One whitespace-tokenized sentence per line.
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Surprisal (bits) of a continuation given a prefix.
    Surprisal {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prefix: String,
        #[arg(long)]
        continuation: String,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a suite of surprisal inequalities.
    EvalSuite {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Keep only the first N items.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimal-pair accuracy.
    EvalPairs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        beam: BeamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity per word (gold parses for joint models).
    EvalPpl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every variant.
    Gradcheck {
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all built-in oracle checks.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a synthetic treebank and, optionally, minimal pairs.
    Synthdata {
        #[arg(long, value_enum)]
        grammar: Grammar,
        #[arg(long)]
        n: usize,
        /// Clauses per sentence for the clause-chain grammar.
        #[arg(long, default_value_t = 10)]
        clauses: usize,
        #[arg(long)]
        out: PathBuf,
        /// Agreement minimal pairs disjoint from the sampled sentences.
        #[arg(long, requires = "pairs")]
        pairs_out: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Collects output records and writes them to a file or stdout.
struct Output {
    path: Option<PathBuf>,
    text: String,
}

impl Output {
    fn new(path: Option<&Path>) -> Self {
        Output {
            path: path.map(Path::to_path_buf),
            text: String::new(),
        }
    }

    fn record<T: Serialize>(&mut self, r: &T) -> Result<()> {
        self.text.push_str(&serde_json::to_string(r)?);
        self.text.push('\n');
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match &self.path {
            Some(p) => write_text(p, &self.text),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(self.text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|e| Error::Data(format!("stdout: {e}")))
            }
        }
    }
}

fn meta(command: &str, config: Value) -> Value {
    json!({ "type": "meta", "command": command, "version": env!("CARGO_PKG_VERSION"), "config": config })
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn load(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((ck, digest))
}

/// Exact word scorer or beam marginal scorer, depending on the variant.
fn with_scorer<F: Float, R>(
    model: &Model<F>,
    vocab: &JointActionVocab,
    beam: BeamConfig,
    f: impl FnOnce(&(dyn PrefixScorer + Sync)) -> Result<R>,
) -> Result<R> {
    if model.variant().is_joint() {
        let plm = PlmScorer::new(model, vocab)?;
        f(&BeamScorer {
            scorer: &plm,
            config: beam,
        })
    } else {
        f(&WordScorer {
            model,
            tokens: vocab.tokens(),
        })
    }
}

macro_rules! dispatch {
    ($ck:expr, $f64:expr, |$m:ident| $body:expr) => {
        if $f64 {
            let $m = &$ck.model.cast::<f64>();
            $body
        } else {
            let $m = &$ck.model;
            $body
        }
    };
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("synlm: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    pool.install(|| run_command(cli))
}

fn run_command(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Oracle { trees, out } => {
            let ts = read_trees(trees)?;
            let oracles: Vec<ActionSequence> = ts.iter().map(oracle).collect();
            for (i, (o, t)) in oracles.iter().zip(&ts).enumerate() {
                if reconstruct(o)? != *t {
                    return Err(Error::Data(format!("tree {} does not survive the oracle round trip", i + 1)));
                }
            }
            write_text(out, &render_oracles(&oracles))?;
            let mut o = Output::new(None);
            o.record(&meta("oracle", json!({ "trees": trees })))?;
            o.record(&json!({ "type": "summary", "sentences": oracles.len(),
                "actions": oracles.iter().map(|s| s.len() - 1).sum::<usize>() }))?;
            o.finish()
        }
        Command::Vocab {
            trees,
            dev,
            min_count,
            out_dir,
        } => {
            let ts = read_trees(trees)?;
            let ds = dev.as_deref().map(read_trees).transpose()?.unwrap_or_default();
            let tokens = build_token_vocab(&ts, *min_count)?;
            let joint = JointActionVocab::from_trees(tokens.clone(), ts.iter().chain(&ds));
            let oracles: Vec<ActionSequence> = ts.iter().chain(&ds).map(oracle).collect();
            let ngrams = build_ngram_vocab(&oracles);
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            write_text(&out_dir.join("tokens.vocab"), &tokens.to_lines())?;
            write_text(&out_dir.join("joint.vocab"), &joint.to_lines())?;
            write_text(&out_dir.join("ngrams.vocab"), &ngrams.to_lines())?;
            let mut o = Output::new(None);
            o.record(&meta("vocab", json!({ "trees": trees, "dev": dev, "min_count": min_count })))?;
            o.record(&json!({ "type": "summary", "tokens": tokens.len(), "joint": joint.len(), "ngrams": ngrams.len() }))?;
            o.finish()
        }
        Command::Train {
            variant,
            trees,
            dev,
            config,
            out,
            metrics,
        } => {
            let mut tc = match config {
                Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            let ts = read_trees(trees)?;
            let ds = dev.as_deref().map(read_trees).transpose()?.unwrap_or_default();
            let data = prepare(*variant, &ts, &ds, tc.min_count)?;
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                metrics: metrics.clone(),
            };
            let report = train(&data, &tc, &outputs)?;
            let mut o = Output::new(None);
            o.record(&meta("train", json!({ "variant": variant, "trees": trees, "dev": dev, "train": tc })))?;
            o.record(&json!({
                "type": "summary",
                "epochs": report.epochs,
                "steps": report.steps,
                "best_epoch": report.best_epoch,
                "best_dev_loss": report.best_dev_loss,
                "parameters": report.best.parameter_count(),
            }))?;
            o.finish()
        }
        Command::Parse {
            ckpt,
            sentence,
            sentences,
            beam,
            out,
        } => {
            let (ck, digest) = load(ckpt)?;
            if !ck.model.variant().is_joint() {
                return Err(Error::Usage(format!("parsing needs a joint model, not {}", ck.model.variant())));
            }
            let list: Vec<Vec<String>> = match (sentence, sentences) {
                (Some(s), None) => vec![tokens(s)],
                (None, Some(p)) => read_text(p)?.lines().filter(|l| !l.trim().is_empty()).map(tokens).collect(),
                _ => return Err(Error::Usage("give --sentence or --sentences".into())),
            };
            let bc = beam.config()?;
            let mut o = Output::new(out.as_deref());
            o.record(&meta("parse", json!({ "ckpt_sha256": digest, "beam": bc, "float64": cli.float64 })))?;
            let results: Vec<Value> = dispatch!(ck, cli.float64, |m| {
                let scorer = PlmScorer::new(m, &ck.vocab)?;
                list.par_iter()
                    .map(|words| {
                        if words.is_empty() {
                            return Err(Error::Data("empty sentence".into()));
                        }
                        let p = parse(&scorer, words, &bc)?;
                        Ok(json!({ "sentence": words.join(" "), "tree": p.tree.to_string(), "logp": sig9(p.logp) }))
                    })
                    .collect::<Result<Vec<_>>>()?
            });
            for r in &results {
                o.record(r)?;
            }
            o.finish()
        }
        Command::Surprisal {
            ckpt,
            prefix,
            continuation,
            beam,
            out,
        } => {
            let (ck, digest) = load(ckpt)?;
            let (p, c) = (tokens(prefix), tokens(continuation));
            if c.is_empty() {
                return Err(Error::Usage("--continuation must not be empty".into()));
            }
            let bc = beam.config()?;
            let words: Vec<&str> = p.iter().chain(&c).map(String::as_str).collect();
            let lps = dispatch!(ck, cli.float64, |m| with_scorer(m, &ck.vocab, bc, |s| Ok(s.prefix_logprobs(&words)?))?);
            let before = if p.is_empty() { 0.0 } else { lps[p.len() - 1] };
            let bits = -(lps[words.len() - 1] - before) / std::f64::consts::LN_2;
            let mut o = Output::new(out.as_deref());
            o.record(&meta("surprisal", json!({ "ckpt_sha256": digest, "float64": cli.float64 })))?;
            o.record(&json!({ "prefix": prefix, "continuation": continuation,
                "surprisal_bits": sig9(bits), "beam_config": bc }))?;
            o.finish()
        }
        Command::EvalSuite {
            ckpt,
            suite,
            limit,
            beam,
            out,
        } => {
            let (ck, digest) = load(ckpt)?;
            let mut items: Vec<SuiteItem> = read_jsonl(suite)?;
            items.truncate(limit.unwrap_or(usize::MAX));
            for it in &items {
                it.validate()?;
            }
            let bc = beam.config()?;
            let results = dispatch!(ck, cli.float64, |m| with_scorer(m, &ck.vocab, bc, |s| {
                Ok(items.par_iter().map(|it| eval_item(s, it)).collect::<Result<Vec<_>, _>>()?)
            })?);
            let unknown: usize = results.iter().map(|r| r.unknown_words).sum();
            if unknown > 0 {
                log::warn!("{unknown} suite tokens are outside the vocabulary");
            }
            let summary = summarize_suite(&results);
            let mut o = Output::new(out.as_deref());
            o.record(&meta("eval-suite", json!({ "ckpt_sha256": digest, "suite": suite, "limit": limit,
                "beam": bc, "float64": cli.float64 })))?;
            for r in &results {
                let mut r = r.clone();
                r.conditions.iter_mut().for_each(|c| {
                    c.left = sig9(c.left);
                    c.right = sig9(c.right);
                });
                r.regions.values_mut().for_each(|v| *v = sig9(*v));
                o.record(&r)?;
            }
            o.record(&json!({ "type": "summary", "items": summary.items, "passed": summary.passed,
                "micro_accuracy": sig9(summary.micro_accuracy), "macro_accuracy": sig9(summary.macro_accuracy),
                "per_suite": summary.per_suite.iter().map(|(k, v)| (k.clone(), sig9(*v))).collect::<std::collections::BTreeMap<_, _>>() }))?;
            o.finish()
        }
        Command::EvalPairs {
            ckpt,
            pairs,
            limit,
            beam,
            out,
        } => {
            let (ck, digest) = load(ckpt)?;
            let mut ps: Vec<MinimalPair> = read_jsonl(pairs)?;
            ps.truncate(limit.unwrap_or(usize::MAX));
            let bc = beam.config()?;
            let results = dispatch!(ck, cli.float64, |m| with_scorer(m, &ck.vocab, bc, |s| {
                Ok(ps.par_iter().map(|p| eval_pair(s, p)).collect::<Result<Vec<_>, _>>()?)
            })?);
            let mut o = Output::new(out.as_deref());
            o.record(&meta("eval-pairs", json!({ "ckpt_sha256": digest, "pairs": pairs, "limit": limit,
                "beam": bc, "float64": cli.float64 })))?;
            for r in &results {
                o.record(&json!({ "pair_id": r.pair_id, "logp_grammatical": sig9(r.logp_grammatical),
                    "logp_ungrammatical": sig9(r.logp_ungrammatical), "correct": r.correct }))?;
            }
            o.record(&json!({ "type": "summary", "pairs": results.len(),
                "correct": results.iter().filter(|r| r.correct).count(), "accuracy": sig9(pair_accuracy(&results)) }))?;
            o.finish()
        }
        Command::EvalPpl { ckpt, trees, out } => {
            let (ck, digest) = load(ckpt)?;
            let ts = read_trees(trees)?;
            let ppl = dispatch!(ck, cli.float64, |m| {
                if m.variant().is_joint() {
                    let gold: Vec<_> = ts.iter().map(|t| oracle(t).into_inner()).collect();
                    perplexity_joint(m, &ck.vocab, &gold)?
                } else {
                    let sents: Vec<Vec<String>> = ts
                        .iter()
                        .map(|t| t.words().into_iter().map(str::to_string).collect())
                        .collect();
                    perplexity_words(m, ck.vocab.tokens(), &sents)?
                }
            });
            let mut o = Output::new(out.as_deref());
            o.record(&meta("eval-ppl", json!({ "ckpt_sha256": digest, "trees": trees, "float64": cli.float64,
                "mode": if ck.model.variant().is_joint() { "gold-parse" } else { "words" } })))?;
            o.record(&json!({ "type": "summary", "nll": sig9(ppl.nll), "words": ppl.words, "perplexity": sig9(ppl.perplexity) }))?;
            o.finish()
        }
        Command::Gradcheck { variant, tolerance, out } => {
            let variants: Vec<Variant> = match variant {
                Some(v) => vec![*v],
                None => Variant::ALL.to_vec(),
            };
            let checks = variants
                .par_iter()
                .map(|&v| selftest::gradient(v, seed, *tolerance))
                .collect::<Result<Vec<_>>>()?;
            report_checks("gradcheck", json!({ "seed": seed, "tolerance": tolerance }), &checks, out.as_deref())
        }
        Command::Selftest { out } => {
            let checks = selftest::run_all(seed)?;
            report_checks("selftest", json!({ "seed": seed }), &checks, out.as_deref())
        }
        Command::Synthdata {
            grammar,
            n,
            clauses,
            out,
            pairs_out,
            pairs,
        } => {
            let g = match grammar {
                Grammar::Agreement => agreement_grammar(seed),
                Grammar::Toy => toy_grammar(seed),
                Grammar::ClauseChain => clause_chain_grammar(*clauses, seed),
            };
            let ts = sample_corpus(&g, *n)?;
            write_text(out, &render_trees(&ts))?;
            let mut o = Output::new(None);
            o.record(&meta("synthdata", json!({ "grammar": grammar, "n": n, "clauses": clauses, "seed": seed, "pairs": pairs })))?;
            if let (Some(p), Some(k)) = (pairs_out, pairs) {
                if *grammar != Grammar::Agreement {
                    return Err(Error::Usage("minimal pairs are only defined for the agreement grammar".into()));
                }
                let seen: BTreeSet<Vec<String>> = ts
                    .iter()
                    .map(|t| t.words().into_iter().map(str::to_string).collect())
                    .collect();
                let mp = agreement_pairs(*k, seed.wrapping_add(1), &seen)?;
                write_text(p, &crate::io::to_jsonl(&mp)?)?;
            }
            o.record(&json!({ "type": "summary", "trees": ts.len() }))?;
            o.finish()
        }
    }
}

fn report_checks(command: &str, config: Value, checks: &[selftest::Check], out: Option<&Path>) -> Result<()> {
    let mut o = Output::new(out);
    o.record(&meta(command, config))?;
    for c in checks {
        o.record(c)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.check.as_str()).collect();
    o.record(&json!({ "type": "summary", "checks": checks.len(), "failed": failed }))?;
    o.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}
