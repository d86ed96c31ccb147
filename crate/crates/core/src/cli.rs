//! The `sense-lm` binary: every operation behind one entry point.
//!
//! Exit codes: 0 on success (including `--help`/`--version`), 1 on usage
//! errors, 2 on runtime errors. All artifacts land at paths named by flags;
//! nothing else is written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::checkpoint::Checkpoint;
use crate::config::FullConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    cluster_columns, dendrogram_json, export_vectors, fine_tune_eval, frozen_probe,
    inventory_labels, parse_sense_examples, parse_wic_examples, predict_supersenses, wic_eval,
    FtConfig, ProbeConfig,
};
use crate::lexicon::{Lexicon, SenseMembershipMatrix, SupersenseInventory};
use crate::masker::{apply_plan, plan_masking, MaskPlan, MaskPolicy};
use crate::model::ModelParams;
use crate::objective::OovMode;
use crate::rng::CounterRng;
use crate::textpipe::{build_vocab, tokenize, EncodedSequence, Vocab};
use crate::trainer::{condition_for_grad_check, grad_check, train, GradCheckReport, TrainJob};

/// Printed by `--version`; a unit test keeps the format number in sync with
/// the checkpoint header constant.
const VERSION_STRING: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format v1)");

#[derive(Parser, Debug)]
#[command(
    name = "sense-lm",
    version = VERSION_STRING,
    about = "Sense-aware masked language model: pretraining, tagging and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker-thread cap for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

/// Artifact flags shared by every command that loads a checkpoint.
#[derive(Args, Debug)]
struct ArtifactArgs {
    /// Model checkpoint (.sblm).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file written by build-vocab.
    #[arg(long)]
    vocab: PathBuf,
    /// Supersense inventory TSV (name<TAB>pos per line).
    #[arg(long)]
    inventory: PathBuf,
    /// Word-to-supersenses lexicon TSV.
    #[arg(long)]
    lexicon: PathBuf,
    /// Stopword list, one word per line.
    #[arg(long)]
    stoplist: PathBuf,
    /// Proceed even if the checkpoint was trained on different artifacts.
    #[arg(long)]
    force: bool,
}

/// Grid flags shared by finetune and wic.
#[derive(Args, Debug)]
struct GridArgs {
    /// Comma-separated learning-rate grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5e-6, 1e-5, 2e-5, 3e-5, 5e-5])]
    lrs: Vec<f64>,
    /// Comma-separated batch-size grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32])]
    batch_sizes: Vec<usize>,
    /// Fine-tuning epochs per grid point.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Fraction of the training set held out for model selection.
    #[arg(long, default_value_t = 0.2)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl GridArgs {
    fn to_config(&self) -> FtConfig {
        FtConfig {
            lrs: self.lrs.clone(),
            batch_sizes: self.batch_sizes.clone(),
            epochs: self.epochs,
            dev_fraction: self.dev_fraction,
            probe: ProbeConfig {
                seed: self.seed,
                ..ProbeConfig::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportWhat {
    /// Supersense embedding columns, labeled by inventory names.
    Senses,
    /// Word embedding columns, labeled by vocabulary tokens.
    Words,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine a WordPiece vocabulary from a corpus file.
    BuildVocab {
        /// Corpus: one sentence per line, UTF-8.
        #[arg(long)]
        corpus: PathBuf,
        /// Total vocabulary size, special tokens included.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and save the supersense membership matrix for a vocabulary.
    BuildLexicon {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        stoplist: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain from a config file; writes checkpoints and losses.csv.
    Pretrain {
        /// key=value run configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        stoplist: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint's artifact hashes do not match.
        #[arg(long)]
        force: bool,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        /// Config naming the architecture to check (d_w/d_s explicit).
        #[arg(long)]
        config: PathBuf,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Maximum tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Matrix scale applied before checking; see condition_for_grad_check.
        #[arg(long, default_value_t = 14.0)]
        condition_scale: f64,
    },
    /// Tag raw text with per-word supersense distributions.
    Tag {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Text to tag; mutually exclusive with --input.
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        /// File of sentences to tag, one per line.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output TSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Senses reported per word.
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Train a linear probe on frozen features and report accuracy.
    Probe {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Training examples: sentence<TAB>word_index<TAB>supersense.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Fine-tune encoder plus head over a hyperparameter grid.
    Finetune {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Word-in-context pair classification.
    Wic {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Pairs: sentence_a<TAB>sentence_b<TAB>word<TAB>label.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Agglomerative clustering of the supersense embedding columns.
    Cluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        /// Dendrogram JSON output path; merge table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embedding columns as a labeled TSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        /// Needed when exporting word vectors.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ExportWhat::Senses)]
        what: ExportWhat,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse argv and run; the process exit code follows the command contract.
pub fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {}", e);
                ExitCode::from(2)
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::BuildVocab { corpus, size, out } => cmd_build_vocab(&corpus, size, &out),
        Command::BuildLexicon {
            lexicon,
            stoplist,
            inventory,
            vocab,
            out,
        } => cmd_build_lexicon(&lexicon, &stoplist, &inventory, &vocab, &out),
        Command::Pretrain {
            config,
            corpus,
            vocab,
            inventory,
            lexicon,
            stoplist,
            out,
            resume,
            force,
        } => cmd_pretrain(
            &config,
            &corpus,
            &vocab,
            &inventory,
            &lexicon,
            &stoplist,
            &out,
            resume.as_deref(),
            force,
            threads,
        ),
        Command::GradCheck {
            config,
            eps,
            tol,
            samples,
            seed,
            condition_scale,
        } => cmd_grad_check(&config, eps, tol, samples, seed, condition_scale),
        Command::Tag {
            artifacts,
            text,
            input,
            out,
            top,
        } => cmd_tag(&artifacts, text.as_deref(), input.as_deref(), out.as_deref(), top),
        Command::Probe {
            artifacts,
            train,
            test,
            lr,
            epochs,
            batch_size,
            seed,
        } => cmd_probe(&artifacts, &train, &test, lr, epochs, batch_size, seed),
        Command::Finetune {
            artifacts,
            train,
            test,
            grid,
        } => cmd_finetune(&artifacts, &train, &test, &grid),
        Command::Wic {
            artifacts,
            train,
            test,
            grid,
        } => cmd_wic(&artifacts, &train, &test, &grid),
        Command::Cluster {
            checkpoint,
            inventory,
            out,
        } => cmd_cluster(&checkpoint, &inventory, out.as_deref()),
        Command::Export {
            checkpoint,
            inventory,
            vocab,
            what,
            out,
        } => cmd_export(&checkpoint, &inventory, vocab.as_deref(), what, &out),
    }
}

// ---------------------------------------------------------------------------
// Shared loading.

struct World {
    vocab: Vocab,
    inventory: SupersenseInventory,
    lexicon: Lexicon,
    membership: SenseMembershipMatrix,
}

fn load_world(
    vocab: &Path,
    inventory: &Path,
    lexicon: &Path,
    stoplist: &Path,
) -> Result<World> {
    let vocab = Vocab::load(vocab)?;
    let inventory = SupersenseInventory::load(inventory)?;
    let lexicon = Lexicon::parse(lexicon, stoplist, &inventory)?;
    let membership = SenseMembershipMatrix::build(&lexicon, &vocab);
    Ok(World {
        vocab,
        inventory,
        lexicon,
        membership,
    })
}

fn load_checkpoint_world(a: &ArtifactArgs) -> Result<(Checkpoint, World)> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let world = load_world(&a.vocab, &a.inventory, &a.lexicon, &a.stoplist)?;
    ckpt.verify_artifacts(
        world.vocab.content_hash(),
        world.lexicon.content_hash(),
        a.force,
    )?;
    // --force waives provenance, never shape.
    if ckpt.params.config.d_w != world.vocab.len()
        || ckpt.params.config.d_s != world.inventory.len()
    {
        return Err(Error::Compat(format!(
            "checkpoint is sized {}x{} but the artifacts hold {} words and {} senses",
            ckpt.params.config.d_w,
            ckpt.params.config.d_s,
            world.vocab.len(),
            world.inventory.len()
        )));
    }
    Ok((ckpt, world))
}

fn read_corpus(vocab: &Vocab, path: &Path, n_max: usize) -> Result<Vec<EncodedSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let mut seq = tokenize(vocab, line);
        seq.truncate_to(n_max);
        if !seq.is_empty() {
            out.push(seq);
        }
    }
    Ok(out)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(|e| Error::io(path, e)),
        None => {
            print!("{}", content);
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Commands.

fn cmd_build_vocab(corpus: &Path, size: usize, out: &Path) -> Result<()> {
    let vocab = build_vocab(corpus, size, None)?;
    vocab.save(out)?;
    println!(
        "vocab\t{} tokens\thash {:016x}\t{}",
        vocab.len(),
        vocab.content_hash(),
        out.display()
    );
    Ok(())
}

fn cmd_build_lexicon(
    lexicon: &Path,
    stoplist: &Path,
    inventory: &Path,
    vocab: &Path,
    out: &Path,
) -> Result<()> {
    let world = load_world(vocab, inventory, lexicon, stoplist)?;
    world.membership.save(out)?;
    println!(
        "membership\t{} senses x {} words\t{} entries\tlexicon hash {:016x}\t{}",
        world.membership.n_senses(),
        world.membership.n_words(),
        world.membership.nnz(),
        world.lexicon.content_hash(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    config: &Path,
    corpus: &Path,
    vocab: &Path,
    inventory: &Path,
    lexicon: &Path,
    stoplist: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
    threads: usize,
) -> Result<()> {
    let mut cfg = FullConfig::load(config)?;
    let world = load_world(vocab, inventory, lexicon, stoplist)?;
    cfg.resolve_dims(world.vocab.len(), world.inventory.len());
    let corpus = read_corpus(&world.vocab, corpus, cfg.model.n_max)?;
    let vocab_hash = world.vocab.content_hash();
    let lexicon_hash = world.lexicon.content_hash();

    let resume_ckpt = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.verify_artifacts(vocab_hash, lexicon_hash, force)?;
            Some(ckpt)
        }
        None => None,
    };
    let start = resume_ckpt.as_ref().map_or(0, |c| c.step);

    let job = TrainJob {
        corpus: &corpus,
        lexicon: &world.lexicon,
        membership: &world.membership,
        config: &cfg,
        vocab_hash,
        lexicon_hash,
        out_dir: Some(out),
        threads,
        resume: resume_ckpt,
    };
    let outcome = train(&job)?;
    if let Some(row) = outcome.rows.last() {
        println!("last\t{}", row.csv());
    }
    println!(
        "trained\tsteps {}..{}\tseed {}\t{}",
        start,
        outcome.checkpoint.step,
        cfg.train.seed,
        out.join("final.sblm").display()
    );
    Ok(())
}

/// Self-contained synthetic world for gradient checking, sized to the
/// config: a vocabulary of `d_w` tokens (two of them sub-word pieces so the
/// multi-token path is exercised), a lexicon giving every word one to three
/// senses, and a handful of random sentences.
fn gradcheck_world(
    d_w: usize,
    d_s: usize,
    n_max: usize,
    seed: u64,
) -> Result<(Lexicon, SenseMembershipMatrix, Vec<EncodedSequence>)> {
    let origin = PathBuf::from("<grad-check>");
    if d_w < 10 {
        return Err(Error::Config(format!(
            "grad-check needs d_w of at least 10, got {}",
            d_w
        )));
    }
    let pos = ["noun", "verb", "adj", "adv"];
    let mut inv_text = String::new();
    for i in 0..d_s {
        let _ = writeln!(inv_text, "{}.g{:02}\t{}", pos[i % 4], i, pos[i % 4]);
    }
    let inventory = SupersenseInventory::parse(&inv_text, &origin)?;

    // Specials, one head/continuation piece pair for the out-of-vocabulary
    // word "zebra", then whole words.
    let mut tokens: Vec<String> = vec!["[PAD]".into(), "[UNK]".into(), "[MASK]".into()];
    tokens.push("zeb".into());
    tokens.push("##ra".into());
    let n_words = d_w - tokens.len();
    for i in 0..n_words {
        tokens.push(format!("word{:03}", i));
    }
    let vocab = Vocab::from_tokens(tokens, &origin)?;

    let mut lex_text = String::from("zebra\t");
    lex_text.push_str(&inventory.name(0).to_string());
    lex_text.push('\n');
    for i in 0..n_words {
        let n_senses = i % 3 + 1;
        let names: Vec<&str> = (0..n_senses)
            .map(|k| inventory.name(((i + k) % d_s) as u16))
            .collect();
        let _ = writeln!(lex_text, "word{:03}\t{}", i, names.join(","));
    }
    let lexicon = Lexicon::parse_strings(
        &lex_text,
        &origin,
        "",
        &inventory,
        crate::lexicon::LemmaRules::default(),
    )?;
    let membership = SenseMembershipMatrix::build(&lexicon, &vocab);

    let mut seqs = Vec::new();
    let mut rng = CounterRng::derive(seed, &[0x6763_7770]);
    for s in 0..4 {
        let mut words: Vec<String> = Vec::new();
        for _ in 0..8 {
            words.push(format!("word{:03}", rng.below(n_words)));
        }
        if s % 2 == 0 {
            words.push("zebra".to_string());
        }
        let mut seq = tokenize(&vocab, &words.join(" "));
        seq.truncate_to(n_max);
        seqs.push(seq);
    }
    Ok((lexicon, membership, seqs))
}

fn print_grad_report(mode: OovMode, report: &GradCheckReport) {
    println!("mode\t{}", mode.name());
    println!("tensor\tchecked\tmax_rel\tanalytic\tnumeric");
    for g in &report.groups {
        println!(
            "{}\t{}\t{:.3e}\t{:.6e}\t{:.6e}",
            g.name, g.checked, g.max_rel, g.analytic, g.numeric
        );
    }
    println!(
        "{}\tmax_rel {:.3e}\ttol {:.1e}\t{}",
        mode.name(),
        report.max_rel,
        report.tol,
        if report.passed() { "PASS" } else { "FAIL" }
    );
}

/// Plan and apply masking for a checking batch. A dense mask rate keeps the
/// coverage broad; the seed offset walks until at least one multi-token word
/// carries whole-word sense supervision, so the average-embedding path is
/// provably on the loss surface being differentiated.
fn gradcheck_batch(
    seqs: &[EncodedSequence],
    lexicon: &Lexicon,
    whole_word: bool,
    seed: u64,
) -> Result<(Vec<EncodedSequence>, Vec<MaskPlan>)> {
    let policy = MaskPolicy {
        mask_rate: 0.5,
        whole_word,
        ..MaskPolicy::default()
    };
    for offset in 0..64u64 {
        let plans: Vec<MaskPlan> = seqs
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                plan_masking(seq, lexicon, &policy, seed.wrapping_add(offset * 131 + i as u64))
            })
            .collect::<Result<_>>()?;
        let covers_multi = !whole_word
            || plans.iter().flat_map(|p| p.targets.iter()).any(|t| {
                t.gold_ids.len() > 1 && !t.allowed.is_empty()
            });
        if covers_multi {
            let masked = seqs
                .iter()
                .zip(plans.iter())
                .map(|(seq, plan)| apply_plan(seq, plan))
                .collect::<Result<Vec<_>>>()?;
            return Ok((masked, plans));
        }
    }
    Err(Error::Contract(
        "could not draw a masking plan covering a multi-token word".into(),
    ))
}

fn cmd_grad_check(
    config: &Path,
    eps: f64,
    tol: f64,
    samples: usize,
    seed: u64,
    condition_scale: f64,
) -> Result<()> {
    let cfg = FullConfig::load(config)?;
    cfg.model.validate()?;
    let (lexicon, membership, seqs) =
        gradcheck_world(cfg.model.d_w, cfg.model.d_s, cfg.model.n_max, seed)?;

    let mut params = ModelParams::<f64>::init(&cfg.model, seed)?;
    condition_for_grad_check(&mut params, condition_scale, seed);

    let mut all_pass = true;
    for mode in [OovMode::SixtyKNoOov, OovMode::AverageEmbedding] {
        let whole_word = mode == OovMode::AverageEmbedding;
        let (masked, plans) = gradcheck_batch(&seqs, &lexicon, whole_word, seed)?;
        let report = grad_check(
            &params,
            &membership,
            &masked,
            &plans,
            mode,
            cfg.train.sense_weight,
            eps,
            tol,
            samples,
            seed,
        )?;
        print_grad_report(mode, &report);
        all_pass &= report.passed();
    }
    if !all_pass {
        return Err(Error::Contract(
            "gradient check exceeded tolerance; see report above".into(),
        ));
    }
    Ok(())
}

fn cmd_tag(
    a: &ArtifactArgs,
    text: Option<&str>,
    input: Option<&Path>,
    out: Option<&Path>,
    top: usize,
) -> Result<()> {
    let (ckpt, world) = load_checkpoint_world(a)?;
    let source = match (text, input) {
        (Some(t), None) => t.to_string(),
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        _ => {
            return Err(Error::Config(
                "tag needs exactly one of --text or --input".into(),
            ));
        }
    };
    let mut report = String::new();
    for (lineno, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let preds = predict_supersenses(&ckpt.params, &world.membership, &world.vocab, line)?;
        for p in preds {
            let mut order: Vec<usize> = (0..p.dist.len()).collect();
            order.sort_by(|&x, &y| p.dist[y].total_cmp(&p.dist[x]).then(x.cmp(&y)));
            let _ = write!(report, "{}\t{}", lineno + 1, p.surface);
            for &s in order.iter().take(top.max(1)) {
                let _ = write!(report, "\t{}\t{:.6}", world.inventory.name(s as u16), p.dist[s]);
            }
            report.push('\n');
        }
    }
    write_or_print(out, &report)
}

fn cmd_probe(
    a: &ArtifactArgs,
    train: &Path,
    test: &Path,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let (ckpt, world) = load_checkpoint_world(a)?;
    let load = |path: &Path| -> Result<Vec<_>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_sense_examples(&text, path, &world.inventory)
    };
    let train_set = load(train)?;
    let test_set = load(test)?;
    let cfg = ProbeConfig {
        lr,
        epochs,
        batch_size,
        seed,
    };
    let out = frozen_probe(
        &ckpt.params,
        &world.membership,
        &world.vocab,
        &world.lexicon,
        &train_set,
        &test_set,
        world.inventory.len(),
        &cfg,
    )?;
    println!("test_accuracy\t{:.6}", out.accuracy);
    println!("train_accuracy\t{:.6}", out.train_accuracy);
    println!("gold_outside_allowed\t{}", out.gold_outside_allowed);
    Ok(())
}

fn cmd_finetune(a: &ArtifactArgs, train: &Path, test: &Path, grid: &GridArgs) -> Result<()> {
    let (ckpt, world) = load_checkpoint_world(a)?;
    let load = |path: &Path| -> Result<Vec<_>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_sense_examples(&text, path, &world.inventory)
    };
    let train_set = load(train)?;
    let test_set = load(test)?;
    let out = fine_tune_eval(
        &ckpt.params,
        &world.membership,
        &world.vocab,
        &world.lexicon,
        &train_set,
        &test_set,
        world.inventory.len(),
        &grid.to_config(),
    )?;
    println!("lr\tbatch_size\tbest_epoch\tdev_accuracy");
    for r in &out.runs {
        println!("{}\t{}\t{}\t{:.6}", r.lr, r.batch_size, r.best_epoch, r.dev_accuracy);
    }
    println!(
        "selected\tlr {}\tbatch_size {}\tepoch {}",
        out.selected.lr, out.selected.batch_size, out.selected.best_epoch
    );
    println!("test_accuracy\t{:.6}", out.accuracy);
    println!("gold_outside_allowed\t{}", out.gold_outside_allowed);
    Ok(())
}

fn cmd_wic(a: &ArtifactArgs, train: &Path, test: &Path, grid: &GridArgs) -> Result<()> {
    let (ckpt, world) = load_checkpoint_world(a)?;
    let load = |path: &Path| -> Result<Vec<_>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_wic_examples(&text, path)
    };
    let train_set = load(train)?;
    let test_set = load(test)?;
    let out = wic_eval(
        &ckpt.params,
        &world.membership,
        &world.vocab,
        &train_set,
        &test_set,
        &grid.to_config(),
    )?;
    println!("lr\tbatch_size\tbest_epoch\tdev_accuracy");
    for r in &out.runs {
        println!("{}\t{}\t{}\t{:.6}", r.lr, r.batch_size, r.best_epoch, r.dev_accuracy);
    }
    println!(
        "selected\tlr {}\tbatch_size {}\tepoch {}",
        out.selected.lr, out.selected.batch_size, out.selected.best_epoch
    );
    println!("test_accuracy\t{:.6}", out.accuracy);
    println!("majority_baseline\t{:.6}", out.majority_baseline);
    println!("skipped\ttrain {}\ttest {}", out.skipped_train, out.skipped_test);
    Ok(())
}

fn load_checkpoint_and_inventory(
    checkpoint: &Path,
    inventory: &Path,
) -> Result<(Checkpoint, SupersenseInventory)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let inventory = SupersenseInventory::load(inventory)?;
    if ckpt.params.config.d_s != inventory.len() {
        return Err(Error::Compat(format!(
            "checkpoint has {} supersenses but the inventory lists {}",
            ckpt.params.config.d_s,
            inventory.len()
        )));
    }
    Ok((ckpt, inventory))
}

fn cmd_cluster(checkpoint: &Path, inventory: &Path, out: Option<&Path>) -> Result<()> {
    let (ckpt, inventory) = load_checkpoint_and_inventory(checkpoint, inventory)?;
    let merges = cluster_columns(ckpt.params.sense_embed.view())?;
    let labels = inventory_labels(&inventory);
    println!("merge\ta\tb\tdistance\tsize");
    for (i, m) in merges.iter().enumerate() {
        println!("{}\t{}\t{}\t{:.6}\t{}", i, m.a, m.b, m.distance, m.size);
    }
    if let Some(path) = out {
        std::fs::write(path, dendrogram_json(&merges, &labels)).map_err(|e| Error::io(path, e))?;
        println!("dendrogram\t{}", path.display());
    }
    Ok(())
}

fn cmd_export(
    checkpoint: &Path,
    inventory: &Path,
    vocab: Option<&Path>,
    what: ExportWhat,
    out: &Path,
) -> Result<()> {
    let (ckpt, inventory) = load_checkpoint_and_inventory(checkpoint, inventory)?;
    let (matrix, labels): (&Array2<f32>, Vec<String>) = match what {
        ExportWhat::Senses => (&ckpt.params.sense_embed, inventory_labels(&inventory)),
        ExportWhat::Words => {
            let path = vocab.ok_or_else(|| {
                Error::Config("exporting word vectors needs --vocab".into())
            })?;
            let vocab = Vocab::load(path)?;
            if vocab.len() != ckpt.params.config.d_w {
                return Err(Error::Compat(format!(
                    "checkpoint has {} words but the vocabulary lists {}",
                    ckpt.params.config.d_w,
                    vocab.len()
                )));
            }
            let labels = (0..vocab.len() as u32).map(|i| vocab.token(i).to_string()).collect();
            (&ckpt.params.word_embed, labels)
        }
    };
    export_vectors(matrix.view(), &labels, out)?;
    println!(
        "exported\t{} vectors of dim {}\t{}",
        matrix.ncols(),
        matrix.nrows(),
        out.display()
    );
    Ok(())
}
