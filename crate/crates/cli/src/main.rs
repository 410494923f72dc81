//! `edr`: train, decode, rerank and evaluate encoder-decoder-reconstructor
//! translation models.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edr::beam::{greedy_decode, max_output_len};
use edr::bleu::bleu_ids;
use edr::config::RunConfig;
use edr::corpus::{read_lines, ParallelCorpus};
use edr::encoder_decoder::ModelDims;
use edr::evaluation::{evaluate, ORACLE_DEPTHS};
use edr::gradcheck::GradCheckConfig;
use edr::reconstructor::sample_reconstruction;
use edr::rerank::{translate_all, write_kbest, KBEST_HEADER};
use edr::synth::{gen_synthetic, SyntheticData, Task};
use edr::trainer::{
    check_gradients, gradcheck_batch, gradcheck_model, metrics_tsv, train, Stage, TrainState, METRICS_HEADER,
};
use edr::vocab::Vocabulary;
use edr::{Error, Model, Result};

const MODEL_FILE: &str = "model.edrc";
const SRC_VOCAB: &str = "src.vocab";
const TGT_VOCAB: &str = "tgt.vocab";
const METRICS_FILE: &str = "metrics.tsv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "edr", version, about = "Encoder-decoder-reconstructor translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    config: ConfigFlags,
}

/// Settings shared by every subcommand. Each overrides the same key in the
/// `--config` file, which overrides the built-in default.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Plain-text `key = value` file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda: Option<String>,
    #[arg(long, global = true)]
    epochs_stage1: Option<String>,
    #[arg(long, global = true)]
    epochs_stage2: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    rho: Option<String>,
    #[arg(long, global = true)]
    eps: Option<String>,
    #[arg(long, global = true)]
    clip_norm: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    embed: Option<String>,
    #[arg(long, global = true)]
    hidden: Option<String>,
    #[arg(long, global = true)]
    dropout: Option<String>,
    /// Longest training sentence in tokens.
    #[arg(long, global = true)]
    max_len: Option<String>,
    #[arg(long, global = true)]
    checkpoint_every: Option<String>,
    #[arg(long, global = true)]
    raw_sum_loss: bool,
    #[arg(long, global = true)]
    val_size: Option<String>,
    /// 32 or 64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// 1, 2 or both.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[arg(long, global = true)]
    beam: Option<String>,
    #[arg(long, global = true)]
    normalize_lik: bool,
    #[arg(long, global = true)]
    normalize_rec: bool,
    #[arg(long, global = true)]
    max_len_factor: Option<String>,
    #[arg(long, global = true)]
    vocab_size: Option<String>,
    /// greedy or stochastic.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true, alias = "buckets")]
    bucket_width: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let opts = [
            ("lambda", &self.lambda),
            ("epochs_stage1", &self.epochs_stage1),
            ("epochs_stage2", &self.epochs_stage2),
            ("batch_size", &self.batch_size),
            ("rho", &self.rho),
            ("eps", &self.eps),
            ("clip_norm", &self.clip_norm),
            ("seed", &self.seed),
            ("embed", &self.embed),
            ("hidden", &self.hidden),
            ("dropout", &self.dropout),
            ("max_len", &self.max_len),
            ("checkpoint_every", &self.checkpoint_every),
            ("val_size", &self.val_size),
            ("precision", &self.precision),
            ("stage", &self.stage),
            ("beam", &self.beam),
            ("max_len_factor", &self.max_len_factor),
            ("vocab_size", &self.vocab_size),
            ("mode", &self.mode),
            ("bucket_width", &self.bucket_width),
            ("jobs", &self.jobs),
        ];
        let mut out: Vec<(&'static str, String)> = opts
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect();
        for (k, on) in [
            ("raw_sum_loss", self.raw_sum_loss),
            ("normalize_lik", self.normalize_lik),
            ("normalize_rec", self.normalize_rec),
        ] {
            if on {
                out.push((k, "true".into()));
            }
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            c.set(k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic parallel corpus as train/dev/test `.src`/`.tgt` files.
    GenData {
        /// copy, reverse, lexsub or lengthvar.
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        /// Number of content symbols.
        #[arg(long, default_value_t = 20)]
        symbols: usize,
        #[arg(long, default_value_t = 1)]
        min_tokens: usize,
        #[arg(long, default_value_t = 8)]
        max_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a model directory.
    Train(TrainArgs),
    /// Translate one sentence per line, optionally writing k-best lists.
    Translate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        kbest_out: Option<PathBuf>,
    },
    /// Teacher-forced log P(y|x) and log R(x|s) per sentence pair.
    Score {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// BLEU, oracle BLEU, length buckets and attention coverage on a test set.
    Evaluate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Summary TSV; defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-length-bucket BLEU CSV.
        #[arg(long)]
        buckets_out: Option<PathBuf>,
        /// 1-best translations.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Regenerate each source from the decoder states of its greedy translation.
    Reconstruct {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare tape gradients with central finite differences on a toy model.
    Gradcheck {
        /// Embedding and hidden sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [8, 12])]
        dims: Vec<usize>,
        /// Source and target vocabulary size.
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
    },
    /// BLEU and mean output length at several beam widths.
    SweepBeam {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100])]
        beams: Vec<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long, requires = "train_tgt")]
    train_src: Option<PathBuf>,
    #[arg(long, requires = "train_src")]
    train_tgt: Option<PathBuf>,
    #[arg(long, requires = "dev_tgt")]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
    /// Generate training data for this task instead of reading files.
    #[arg(long, conflicts_with = "train_src")]
    task: Option<Task>,
    /// Number of generated training pairs; `val_size` more are generated for validation.
    #[arg(long, default_value_t = 2000)]
    gen: usize,
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn io_err(path: Option<&Path>) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(path.unwrap_or(Path::new("<stdout>")), e)
}

struct Loaded {
    model: Model,
    src: Vocabulary,
    tgt: Vocabulary,
}

fn load_model_dir(dir: &Path) -> Result<Loaded> {
    let state = TrainState::load(&dir.join(MODEL_FILE))?;
    let src = Vocabulary::load(&dir.join(SRC_VOCAB))?;
    let tgt = Vocabulary::load(&dir.join(TGT_VOCAB))?;
    let d = state.model.dims;
    if src.size() != d.src_vocab || tgt.size() != d.tgt_vocab {
        return Err(Error::Data(format!(
            "vocabulary sizes {}/{} do not match the checkpoint's {}/{}",
            src.size(),
            tgt.size(),
            d.src_vocab,
            d.tgt_vocab
        )));
    }
    Ok(Loaded {
        model: state.model,
        src,
        tgt,
    })
}

fn encode_lines(lines: &[String], vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    lines
        .iter()
        .enumerate()
        .map(|(n, l)| {
            if l.trim().is_empty() {
                Err(Error::Data(format!("empty sentence on line {}", n + 1)))
            } else {
                Ok(vocab.encode(l))
            }
        })
        .collect()
}

/// Test-time corpus: nothing is dropped for length.
fn load_pairs(l: &Loaded, src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    ParallelCorpus::load(src, tgt, &l.src, &l.tgt, usize::MAX)
}

fn gen_data(
    task: Task,
    counts: [usize; 3],
    symbols: usize,
    lengths: (usize, usize),
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = gen_synthetic(task, counts.iter().sum(), symbols, lengths, seed)?;
    let (train, rest) = data.split_at(counts[0]);
    let (dev, test) = rest.split_at(counts[1]);
    for (stem, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        if !part.is_empty() {
            let (s, t) = part.write(out, stem)?;
            eprintln!("wrote {} pairs to {} and {}", part.len(), s.display(), t.display());
        }
    }
    Ok(())
}

fn write_metrics(dir: &Path, prefix: &str, state: &TrainState) -> Result<()> {
    let body = metrics_tsv(&state.metrics);
    let text = if prefix.is_empty() {
        body
    } else {
        format!("{prefix}{}", body.strip_prefix(&format!("{METRICS_HEADER}\n")).unwrap_or(&body))
    };
    let path = dir.join(METRICS_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let t = &cfg.train;
    let dir = &args.model_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_string()).map_err(|e| Error::io(&config_path, e))?;

    let (train_data, dev_data) = match (&args.task, &args.train_src, &args.train_tgt) {
        (Some(task), _, _) => {
            let data = gen_synthetic(*task, args.gen + t.val_size, 20, (1, 8), t.seed)?;
            let (tr, dev) = data.split_at(args.gen);
            (tr, Some(dev))
        }
        (None, Some(s), Some(g)) => {
            let tr = SyntheticData {
                source: read_lines(s)?,
                target: read_lines(g)?,
            };
            let dev = match (&args.dev_src, &args.dev_tgt) {
                (Some(s), Some(g)) => Some(SyntheticData {
                    source: read_lines(s)?,
                    target: read_lines(g)?,
                }),
                _ => None,
            };
            (tr, dev)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give --train-src/--train-tgt or --task".into(),
            ))
        }
    };

    let resume = cfg.stage == Stage::Two;
    let (src_vocab, tgt_vocab) = if resume {
        (Vocabulary::load(&dir.join(SRC_VOCAB))?, Vocabulary::load(&dir.join(TGT_VOCAB))?)
    } else {
        let (s, g) = train_data.vocabularies(cfg.vocab_size)?;
        s.save(&dir.join(SRC_VOCAB))?;
        g.save(&dir.join(TGT_VOCAB))?;
        (s, g)
    };
    let corpus = train_data.corpus(&src_vocab, &tgt_vocab, t.max_len)?;
    let dev = match dev_data {
        Some(d) if !d.is_empty() => {
            ParallelCorpus::from_lines(&d.source, &d.target, &src_vocab, &tgt_vocab, usize::MAX)?
        }
        _ => ParallelCorpus::default(),
    };
    eprintln!("training on {} pairs, validating on {}", corpus.len(), dev.len());

    let model_path = dir.join(MODEL_FILE);
    let (state, prefix) = if resume {
        let metrics_path = dir.join(METRICS_FILE);
        let prefix = fs::read_to_string(&metrics_path).unwrap_or_else(|_| format!("{METRICS_HEADER}\n"));
        (TrainState::load(&model_path)?, prefix)
    } else {
        (TrainState::new(t, src_vocab.size(), tgt_vocab.size())?, String::new())
    };
    let state = train(state, &corpus, &dev, t, cfg.stage, |s, row| {
        eprintln!("{}", row.to_tsv());
        s.save(&model_path)?;
        write_metrics(dir, &prefix, s)
    })?;
    state.save(&model_path)?;
    write_metrics(dir, &prefix, &state)?;
    eprintln!("saved {} after {} updates", model_path.display(), state.updates);
    Ok(())
}

fn cmd_translate(model_dir: &Path, input: &Path, output: Option<&Path>, kbest: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let l = load_model_dir(model_dir)?;
    let sources = encode_lines(&read_lines(input)?, &l.src)?;
    let results = translate_all(&l.model, &sources, &cfg.decode_options())?;
    let mut out = open_output(output)?;
    for r in &results {
        writeln!(out, "{}", l.tgt.decode_line(&r[0].hypothesis.tokens)).map_err(io_err(output))?;
    }
    out.flush().map_err(io_err(output))?;
    if let Some(p) = kbest {
        let mut w = open_output(Some(p))?;
        writeln!(w, "{KBEST_HEADER}").map_err(io_err(Some(p)))?;
        for (i, r) in results.iter().enumerate() {
            write_kbest(&mut w, i + 1, r, &l.tgt).map_err(io_err(Some(p)))?;
        }
        w.flush().map_err(io_err(Some(p)))?;
    }
    Ok(())
}

fn cmd_score(model_dir: &Path, src: &Path, tgt: &Path, output: Option<&Path>) -> Result<()> {
    let l = load_model_dir(model_dir)?;
    let corpus = load_pairs(&l, src, tgt)?;
    let mut out = open_output(output)?;
    writeln!(out, "sent_id\tlog_lik\tlog_rec").map_err(io_err(output))?;
    for (i, p) in corpus.pairs.iter().enumerate() {
        let s = l.model.score_pair(&p.source, &p.target)?;
        let rec = match l.model.gamma {
            Some(_) => l.model.reconstruction_score(&p.source, &s.states)?,
            None => f64::NAN,
        };
        writeln!(out, "{}\t{}\t{}", i + 1, s.log_lik, rec).map_err(io_err(output))?;
    }
    out.flush().map_err(io_err(output))
}

fn cmd_evaluate(
    model_dir: &Path,
    src: &Path,
    tgt: &Path,
    output: Option<&Path>,
    buckets_out: Option<&Path>,
    hyp_out: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let l = load_model_dir(model_dir)?;
    let corpus = load_pairs(&l, src, tgt)?;
    let r = evaluate(&l.model, &corpus, &cfg.decode_options(), &ORACLE_DEPTHS, cfg.bucket_width)?;
    let mut out = open_output(output)?;
    write!(out, "{}", r.to_tsv()).map_err(io_err(output))?;
    out.flush().map_err(io_err(output))?;
    if let Some(p) = buckets_out {
        fs::write(p, r.lengths.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = hyp_out {
        let mut w = open_output(Some(p))?;
        for o in &r.outputs {
            writeln!(w, "{}", l.tgt.decode_line(o)).map_err(io_err(Some(p)))?;
        }
        w.flush().map_err(io_err(Some(p)))?;
    }
    Ok(())
}

fn cmd_reconstruct(model_dir: &Path, input: &Path, output: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let l = load_model_dir(model_dir)?;
    let g = l.model.require_gamma()?;
    let sources = encode_lines(&read_lines(input)?, &l.src)?;
    let mut out = open_output(output)?;
    for (i, s) in sources.iter().enumerate() {
        let h = greedy_decode(&l.model, s, cfg.max_len_factor)?;
        let max_len = max_output_len(s.len(), cfg.max_len_factor);
        let rec = sample_reconstruction(&l.model.store, g, &h.states, cfg.mode, cfg.train.seed ^ i as u64, max_len)?;
        writeln!(out, "{}", l.src.decode_line(&rec)).map_err(io_err(output))?;
    }
    out.flush().map_err(io_err(output))
}

fn cmd_gradcheck(dims: &[usize], vocab: usize, pairs: usize, cfg: &RunConfig) -> Result<()> {
    if dims.len() != 2 {
        return Err(Error::InvalidArgument("--dims takes EMBED,HIDDEN".into()));
    }
    let d = ModelDims {
        src_vocab: vocab,
        tgt_vocab: vocab,
        embed: dims[0],
        hidden: dims[1],
    };
    let mut model = gradcheck_model(d, cfg.train.seed)?;
    let batch = gradcheck_batch(&d, pairs, cfg.train.seed)?;
    let gc = GradCheckConfig {
        seed: cfg.train.seed,
        ..Default::default()
    };
    let report = check_gradients(&mut model, &batch, cfg.train.lambda, &gc)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradCheckFailed(report.failures().join(", ")))
    }
}

fn cmd_sweep_beam(model_dir: &Path, src: &Path, tgt: &Path, beams: &[usize], output: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let l = load_model_dir(model_dir)?;
    let corpus = load_pairs(&l, src, tgt)?;
    let sources: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.target.clone()).collect();
    let mut out = open_output(output)?;
    writeln!(out, "beam\tbleu\tmean_len\tlength_ratio").map_err(io_err(output))?;
    for &beam in beams {
        let mut o = cfg.decode_options();
        o.beam = beam;
        let results = translate_all(&l.model, &sources, &o)?;
        let cands: Vec<Vec<usize>> = results.iter().map(|r| r[0].hypothesis.tokens.clone()).collect();
        let b = bleu_ids(&cands, &refs)?;
        let mean_len = b.candidate_len as f64 / cands.len() as f64;
        writeln!(out, "{beam}\t{}\t{mean_len}\t{}", b.bleu, b.length_ratio()).map_err(io_err(output))?;
    }
    out.flush().map_err(io_err(output))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.resolve()?;
    eprint!("# effective configuration\n{cfg}");
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    }
    match &cli.command {
        Command::GenData {
            task,
            train,
            dev,
            test,
            symbols,
            min_tokens,
            max_tokens,
            out,
        } => gen_data(*task, [*train, *dev, *test], *symbols, (*min_tokens, *max_tokens), cfg.train.seed, out),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Translate {
            model_dir,
            input,
            output,
            kbest_out,
        } => cmd_translate(model_dir, input, output.as_deref(), kbest_out.as_deref(), &cfg),
        Command::Score {
            model_dir,
            src,
            tgt,
            output,
        } => cmd_score(model_dir, src, tgt, output.as_deref()),
        Command::Evaluate {
            model_dir,
            src,
            tgt,
            output,
            buckets_out,
            hyp_out,
        } => cmd_evaluate(model_dir, src, tgt, output.as_deref(), buckets_out.as_deref(), hyp_out.as_deref(), &cfg),
        Command::Reconstruct {
            model_dir,
            input,
            output,
        } => cmd_reconstruct(model_dir, input, output.as_deref(), &cfg),
        Command::Gradcheck { dims, vocab, pairs } => cmd_gradcheck(dims, *vocab, *pairs, &cfg),
        Command::SweepBeam {
            model_dir,
            src,
            tgt,
            beams,
            output,
        } => cmd_sweep_beam(model_dir, src, tgt, beams, output.as_deref(), &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind() as u8)
        }
    }
}
