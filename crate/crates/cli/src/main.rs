//! `crnnet`: synthesise corpora, build complication tables, train, evaluate
//! and compare runs.

mod settings;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crnnet::corpus::{
    build_complication_table, generate_synthetic_corpus, read_corpus, split_dataset, write_corpus, CodeDictionary,
    ComplicationTable, CorpusConfig, EhrDocument, PlantedPair, Split, SplitRatio, TokenDictionary,
    DEFAULT_MIN_SUPPORT, DEFAULT_OR_THRESHOLD,
};
use crnnet::generator::CandidateActivation;
use crnnet::metrics::{parse_report, read_predictions, write_predictions, MetricReport, REPORT_COLUMNS};
use crnnet::model::{sha256_hex, Checkpoint, ModelConfig};
use crnnet::numerics::AdamConfig;
use crnnet::trainer::{train, TrainConfig, TrainData, TrainReport};

use settings::Settings;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CODES_FILE: &str = "codes.dict";
pub const TOKENS_FILE: &str = "tokens.dict";
pub const TABLE_FILE: &str = "complications.txt";
pub const SPLIT_FILE: &str = "splits.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.txt";

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<crnnet::Error> for CliError {
    fn from(e: crnnet::Error) -> Self {
        use crnnet::Error as E;
        let code = match e {
            E::Config(_) => 2,
            E::Data(_) | E::Dictionary(_) => 3,
            E::Compatibility(_) => 4,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "crnnet", version, about = "Complication-aware EHR code path generation")]
struct Cli {
    /// Flat `key = value` file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a corpus with planted complication pairs.
    GenData(GenDataArgs),
    /// Rebuild the complication table from the train split of a corpus.
    BuildTable(BuildTableArgs),
    /// Pretrain and adversarially train a model.
    Train(TrainArgs),
    /// Decode a split and score it, or score an existing prediction file.
    Eval(EvalArgs),
    /// Side-by-side view of metric tables and train reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    codes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Number of planted complication pairs.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    pair_prob: Option<f64>,
    #[arg(long)]
    or_threshold: Option<f64>,
    #[arg(long)]
    min_support: Option<u64>,
}

#[derive(Args)]
struct BuildTableArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to complications.txt inside the corpus directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    or_threshold: Option<f64>,
    #[arg(long)]
    min_support: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Existing output directory for the checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    /// Adversarial (or, under --no-arl, supervised) epochs after pretraining.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    no_copy: bool,
    #[arg(long)]
    no_arl: bool,
    /// `standard` (300/100) or `desk`.
    #[arg(long)]
    dims: Option<String>,
    /// Generator LSTM candidate activation: `relu` or `tanh`.
    #[arg(long)]
    candidate: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Existing output directory for predictions and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required_unless_present = "from_predictions")]
    checkpoint: Option<PathBuf>,
    /// `train`, `validation` or `test`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Score this prediction file instead of decoding.
    #[arg(long, conflicts_with = "checkpoint")]
    from_predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric tables written by `eval`.
    #[arg(long, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Train reports written by `train`.
    #[arg(long, num_args = 1..)]
    train_report: Vec<PathBuf>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crnnet: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&settings, a),
        Command::BuildTable(a) => build_table(&settings, a),
        Command::Train(a) => train_cmd(&settings, a),
        Command::Eval(a) => eval(&settings, a),
        Command::Report(a) => report(a),
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("input file {} does not exist", path.display())))
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    require_file(path)?;
    Ok(BufReader::new(File::open(path)?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> crnnet::Result<()>) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn gen_data(s: &Settings, a: GenDataArgs) -> CliResult<()> {
    require_dir(&a.out, "output")?;
    let docs = s.pick(a.docs, "docs", 2000)?;
    let codes = s.pick(a.codes, "codes", 20)?;
    let seed = s.pick(a.seed, "seed", 0)?;
    let mut cfg = CorpusConfig::desk(docs, codes, seed);
    cfg.vocab_size = s.pick(a.vocab, "vocab", cfg.vocab_size)?;
    cfg.top_k = s.pick(a.top_k, "top_k", cfg.top_k)?;
    let pairs = s.pick(a.pairs, "pairs", cfg.planted.len())?;
    let prob = s.pick(a.pair_prob, "pair_prob", 0.9)?;
    if 2 * pairs > codes {
        return Err(CliError::config(format!("{pairs} disjoint pairs need at least {} codes", 2 * pairs)));
    }
    let half = codes / 2;
    cfg.planted = (0..pairs)
        .map(|i| PlantedPair {
            anchor: i,
            complication: half + i,
            probability: prob,
        })
        .collect();
    let or_threshold = s.pick(a.or_threshold, "or_threshold", DEFAULT_OR_THRESHOLD)?;
    let min_support = s.pick(a.min_support, "min_support", DEFAULT_MIN_SUPPORT)?;

    let corpus = generate_synthetic_corpus(&cfg)?;
    let split = split_dataset(corpus.documents.len(), SplitRatio::default(), seed)?;
    let table = build_complication_table(
        Split::select(&corpus.documents, &split.train),
        codes,
        or_threshold,
        min_support,
    )?;
    write_file(&a.out.join(CORPUS_FILE), |w| write_corpus(&corpus.documents, w))?;
    write_file(&a.out.join(CODES_FILE), |w| corpus.codes.write(w))?;
    write_file(&a.out.join(TOKENS_FILE), |w| corpus.tokens.write(w))?;
    write_file(&a.out.join(TABLE_FILE), |w| table.write(w))?;
    write_file(&a.out.join(SPLIT_FILE), |w| split.write(w))?;
    eprintln!(
        "wrote {} documents, {} complication pairs to {}",
        corpus.documents.len(),
        table.len(),
        a.out.display()
    );
    Ok(())
}

/// A corpus directory as written by `gen-data`.
struct CorpusDir {
    documents: Vec<EhrDocument>,
    codes: CodeDictionary,
    tokens: TokenDictionary,
    split: Split,
    /// SHA-256 of the two dictionary files.
    fingerprint: String,
}

impl CorpusDir {
    fn load(dir: &Path) -> CliResult<Self> {
        require_dir(dir, "corpus")?;
        let codes_bytes = std::fs::read(dir.join(CODES_FILE)).map_err(|_| missing(dir, CODES_FILE))?;
        let tokens_bytes = std::fs::read(dir.join(TOKENS_FILE)).map_err(|_| missing(dir, TOKENS_FILE))?;
        let codes = CodeDictionary::read(&codes_bytes[..])?;
        let tokens = TokenDictionary::read(&tokens_bytes[..])?;
        let documents = read_corpus(open(&dir.join(CORPUS_FILE))?)?;
        for (i, d) in documents.iter().enumerate() {
            d.validate(tokens.len(), codes.num_codes())
                .map_err(|e| CliError::from(crnnet::Error::Data(format!("document {i}: {e}"))))?;
        }
        let split = Split::read(open(&dir.join(SPLIT_FILE))?, documents.len())?;
        Ok(CorpusDir {
            documents,
            codes,
            tokens,
            split,
            fingerprint: sha256_hex(&[&codes_bytes, &tokens_bytes]),
        })
    }

    fn table(&self, dir: &Path) -> CliResult<ComplicationTable> {
        Ok(ComplicationTable::read(open(&dir.join(TABLE_FILE))?, self.codes.num_codes())?)
    }

    fn ids(&self, name: &str) -> CliResult<&[usize]> {
        match name {
            "train" => Ok(&self.split.train),
            "validation" => Ok(&self.split.validation),
            "test" => Ok(&self.split.test),
            other => Err(CliError::config(format!("unknown split `{other}`"))),
        }
    }
}

fn missing(dir: &Path, file: &str) -> CliError {
    CliError::config(format!("input file {} does not exist", dir.join(file).display()))
}

fn build_table(s: &Settings, a: BuildTableArgs) -> CliResult<()> {
    let corpus = CorpusDir::load(&a.corpus)?;
    let or_threshold = s.pick(a.or_threshold, "or_threshold", DEFAULT_OR_THRESHOLD)?;
    let min_support = s.pick(a.min_support, "min_support", DEFAULT_MIN_SUPPORT)?;
    let table = build_complication_table(
        Split::select(&corpus.documents, &corpus.split.train),
        corpus.codes.num_codes(),
        or_threshold,
        min_support,
    )?;
    let out = a.out.unwrap_or_else(|| a.corpus.join(TABLE_FILE));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        require_dir(parent, "output")?;
    }
    write_file(&out, |w| table.write(w))?;
    eprintln!("wrote {} complication pairs to {}", table.len(), out.display());
    Ok(())
}

fn parse_candidate(raw: &str) -> CliResult<CandidateActivation> {
    match raw {
        "relu" => Ok(CandidateActivation::Relu),
        "tanh" => Ok(CandidateActivation::Tanh),
        other => Err(CliError::config(format!("unknown candidate activation `{other}`"))),
    }
}

fn train_cmd(s: &Settings, a: TrainArgs) -> CliResult<()> {
    require_dir(&a.out, "output")?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        max_iterations: s.pick(a.epochs, "epochs", defaults.max_iterations)?,
        batch_size: s.pick(a.batch_size, "batch_size", defaults.batch_size)?,
        adam: AdamConfig {
            learning_rate: s.pick(a.lr, "lr", defaults.adam.learning_rate)?,
            ..defaults.adam
        },
        pretrain_epochs: s.pick(a.pretrain_epochs, "pretrain_epochs", defaults.pretrain_epochs)?,
        max_len: s.pick(a.max_len, "max_len", defaults.max_len)?,
        seed: s.pick(a.seed, "seed", defaults.seed)?,
        no_copy: s.switch(a.no_copy, "no_copy")?,
        no_arl: s.switch(a.no_arl, "no_arl")?,
        lambda: s.pick(a.lambda, "lambda", defaults.lambda)?,
        clip_norm: s.pick(a.clip_norm, "clip_norm", defaults.clip_norm)?,
    };
    let corpus = CorpusDir::load(&a.corpus)?;
    let table = corpus.table(&a.corpus)?;
    let (vocab, codes) = (corpus.tokens.len(), corpus.codes.num_codes());
    let mut model_cfg = match s.pick(a.dims, "dims", "standard".to_string())?.as_str() {
        "standard" => ModelConfig::standard(vocab, codes),
        "desk" => ModelConfig::desk(vocab, codes),
        other => return Err(CliError::config(format!("unknown dims preset `{other}`"))),
    };
    if let Some(raw) = s.maybe(a.candidate, "candidate")? {
        model_cfg.generator.candidate = parse_candidate(&raw)?;
    }

    let data = TrainData {
        documents: &corpus.documents,
        split: &corpus.split,
        table: &table,
    };
    let (model, mut report) = train(model_cfg, &cfg, data)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::from_model(&model, &corpus.fingerprint, !cfg.no_arl);
    write_file(&ckpt_path, |w| ckpt.write(w))?;
    report.checkpoint = Some(ckpt_path.display().to_string());
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError {
        code: 1,
        message: e.to_string(),
    })?;
    std::fs::write(a.out.join(TRAIN_REPORT_FILE), json + "\n")?;
    eprintln!(
        "{}: best validation jaccard {:.4} at epoch {} ({:.1}s)",
        report.ablation, report.best_val_jaccard, report.best_epoch, report.wall_clock_secs
    );
    Ok(())
}

fn eval(s: &Settings, a: EvalArgs) -> CliResult<()> {
    require_dir(&a.out, "output")?;
    let corpus = CorpusDir::load(&a.corpus)?;
    let table = corpus.table(&a.corpus)?;
    let num_codes = corpus.codes.num_codes();
    let records = match (&a.from_predictions, &a.checkpoint) {
        (Some(path), _) => read_predictions(open(path)?)?,
        (None, Some(path)) => {
            let ckpt = Checkpoint::read(open(path)?)?;
            if ckpt.corpus != corpus.fingerprint {
                return Err(crnnet::Error::Compatibility(format!(
                    "checkpoint was trained on corpus {} but {} has fingerprint {}",
                    ckpt.corpus,
                    a.corpus.display(),
                    corpus.fingerprint
                ))
                .into());
            }
            let g = &ckpt.config.generator;
            if g.num_codes != num_codes || g.encoder.vocab_size != corpus.tokens.len() {
                return Err(crnnet::Error::Compatibility("checkpoint dimensions do not match the corpus".into()).into());
            }
            let model = ckpt.into_model(0)?;
            let split = s.pick(a.split, "split", "test".to_string())?;
            let max_len = s.pick(a.max_len, "max_len", TrainConfig::default().max_len)?;
            model.predict(&corpus.documents, corpus.ids(&split)?, &table, max_len)?
        }
        (None, None) => return Err(CliError::config("eval needs --checkpoint or --from-predictions")),
    };
    for r in &records {
        if r.pred.iter().chain(&r.gold).any(|&c| c >= num_codes) {
            return Err(crnnet::Error::Data(format!("record {} uses a code outside the dictionary", r.doc)).into());
        }
    }
    let report = MetricReport::compute(&records, &table, num_codes)?;
    write_file(&a.out.join(PREDICTIONS_FILE), |w| write_predictions(w, &records))?;
    std::fs::write(a.out.join(METRICS_FILE), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn report(a: ReportArgs) -> CliResult<()> {
    if a.metrics.is_empty() && a.train_report.is_empty() {
        return Err(CliError::config("report needs --metrics or --train-report inputs"));
    }
    let mut out = String::new();
    if !a.metrics.is_empty() {
        let mut tables = Vec::new();
        for p in &a.metrics {
            require_file(p)?;
            tables.push(parse_report(&std::fs::read_to_string(p)?)?);
        }
        out.push_str(&format!("{:<16}", "metric"));
        for p in &a.metrics {
            out.push_str(&format!(" {:>12}", run_label(p)));
        }
        out.push('\n');
        for col in REPORT_COLUMNS {
            out.push_str(&format!("{col:<16}"));
            for t in &tables {
                match t.get(col) {
                    Some(Some(v)) => out.push_str(&format!(" {v:>12.6}")),
                    Some(None) => out.push_str(&format!(" {:>12}", "NA")),
                    None => return Err(crnnet::Error::Data(format!("metric table lacks `{col}`")).into()),
                }
            }
            out.push('\n');
        }
    }
    for p in &a.train_report {
        require_file(p)?;
        let r: TrainReport = serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| crnnet::Error::Data(format!("{}: {e}", p.display())))?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!(
            "# {} ({}): best validation jaccard {:.6} at epoch {}\n",
            run_label(p),
            r.ablation,
            r.best_val_jaccard,
            r.best_epoch
        ));
        out.push_str("epoch phase        mle          pg           disc         val_jaccard\n");
        for e in &r.epochs {
            let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{:<5} {:<12} {:<12.6} {:<12} {:<12} {:.6}\n",
                e.epoch,
                serde_json::to_value(e.phase).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                e.generator_mle,
                opt(e.generator_pg),
                opt(e.discriminator),
                e.val_jaccard
            ));
        }
    }
    match a.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// The parent directory name, which is how runs are usually laid out.
fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
