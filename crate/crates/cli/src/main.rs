mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use mmlir::augment::{augment_kb, AugmentedDocument, DictionaryLinker, DocId, RawDocument};
use mmlir::datagen::{generate_samples, QaSample, RuleParaphraser, TemplateGenerator, TypeMap};
use mmlir::encoder::{encode_query, DocFlags, EmbeddingProvider, EncoderParams, FileProvider, QueryInput, QueryMode};
use mmlir::eval::{
    build_distractor_map, encode_corpus, evaluate_rankings, rank_samples, run_ablation, run_shortcut_probe, EvalReport,
    Retriever,
};
use mmlir::index::{build_index, load_index, save_index};
use mmlir::records::{read_jsonl, write_jsonl};
use mmlir::synth::{generate_all, Benchmark};
use mmlir::train::{load_params, save_params, train};
use mmlir::{Error, ErrorClass, Result};

use config::{require_file, require_output, RunConfig};

/// Multi-image late-interaction retrieval: synthetic data, training,
/// indexing and evaluation.
#[derive(Parser)]
#[command(name = "mmlir", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "MMLIR_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every random component; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge base and benchmark into a directory.
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Share of shortcut samples; overrides the config file.
        #[arg(long)]
        fraction_shortcut: Option<f64>,
    },
    /// Link entities in raw documents and attach their images.
    Augment {
        /// Raw documents, one JSON object per line.
        #[arg(long)]
        kb: PathBuf,
        /// Augmented documents output.
        #[arg(long)]
        out: PathBuf,
        /// Keep at most this many related entities per document.
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Generate question samples from augmented documents.
    Datagen {
        /// Augmented documents.
        #[arg(long)]
        docs: PathBuf,
        /// JSON object mapping entity name to type noun.
        #[arg(long)]
        typemap: PathBuf,
        /// Output directory for kept.jsonl and rejected.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder parameters contrastively.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Training samples.
        #[arg(long)]
        samples: PathBuf,
        /// Checkpoint output.
        #[arg(long)]
        out: PathBuf,
        /// Training statistics output (JSON).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Encode documents and write a retrieval index.
    Index {
        /// Augmented documents.
        #[arg(long)]
        docs: PathBuf,
        /// Encoder checkpoint.
        #[arg(long)]
        params: PathBuf,
        /// Document components: none or a `+`-joined subset of MI, MMF, ETE.
        #[arg(long)]
        flags: Option<DocFlags>,
        /// Index output.
        #[arg(long)]
        out: PathBuf,
        /// Build an exhaustive lossless index (one centroid per vector).
        #[arg(long)]
        exact: bool,
    },
    /// Search an index with one query.
    Search {
        /// Index file.
        #[arg(long)]
        index: PathBuf,
        /// Encoder checkpoint.
        #[arg(long)]
        params: PathBuf,
        /// Question text.
        #[arg(long, default_value = "")]
        text: String,
        /// Image key of the query image.
        #[arg(long)]
        image: String,
        /// Results to return; overrides the config file.
        #[arg(long)]
        k: Option<usize>,
        /// Query mode: image_text or image_only.
        #[arg(long, default_value = "image_text")]
        mode: QueryMode,
    },
    /// Evaluate a checkpoint on samples with an index or exact scoring.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Encoder checkpoint.
        #[arg(long)]
        params: PathBuf,
        /// Samples to evaluate.
        #[arg(long)]
        samples: PathBuf,
        /// Index file; exact MaxSim over freshly encoded documents if absent.
        #[arg(long)]
        index: Option<PathBuf>,
        /// CSV report output.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate one model per document-component configuration.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Configurations to run, e.g. `--row none --row MI`; all four
        /// cumulative rows by default.
        #[arg(long = "row")]
        rows: Vec<DocFlags>,
        /// CSV report output.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate with image-only or image+text queries.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        /// Query mode: image_text or image_only.
        #[arg(long)]
        mode: QueryMode,
        /// CSV report output.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Augmented documents.
    #[arg(long)]
    docs: PathBuf,
    /// Document components; overrides the config file.
    #[arg(long)]
    flags: Option<DocFlags>,
    /// Query mode; overrides the config file.
    #[arg(long)]
    mode: Option<QueryMode>,
}

/// Benchmark files; when none are given the synthetic benchmark described
/// by the config is generated in memory.
#[derive(Args)]
struct DataArgs {
    /// Augmented documents.
    #[arg(long, requires_all = ["train", "test"])]
    docs: Option<PathBuf>,
    /// Training samples.
    #[arg(long, requires = "docs")]
    train: Option<PathBuf>,
    /// Test samples.
    #[arg(long, requires = "docs")]
    test: Option<PathBuf>,
}

enum Provider {
    Seeded(mmlir::encoder::SeededProvider),
    File(FileProvider),
}

fn provider(cfg: &RunConfig) -> Result<Provider> {
    let c = &cfg.encoder;
    Ok(match &cfg.features {
        Some(p) => Provider::File(FileProvider::load(p, c.text_dim, c.image_dim, c.num_patches)?),
        None => Provider::Seeded(c.provider()),
    })
}

/// Evaluates `$body` with the configured provider bound to `$p`.
macro_rules! with_provider {
    ($cfg:expr, |$p:ident| $body:expr) => {
        match provider($cfg)? {
            Provider::Seeded($p) => $body,
            Provider::File($p) => $body,
        }
    };
}

fn read_docs(path: &Path) -> Result<BTreeMap<DocId, AugmentedDocument>> {
    let docs: Vec<AugmentedDocument> = read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for d in docs {
        let id = d.raw.doc_id.clone();
        if map.insert(id.clone(), d).is_some() {
            return Err(Error::Data(format!("duplicate document id {id} in {}", path.display())));
        }
    }
    Ok(map)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_benchmark(
    cfg: &RunConfig,
    data: &DataArgs,
) -> Result<(BTreeMap<DocId, AugmentedDocument>, Vec<QaSample>, Vec<QaSample>)> {
    match (&data.docs, &data.train, &data.test) {
        (Some(d), Some(tr), Some(te)) => {
            for p in [d, tr, te] {
                require_file(p)?;
            }
            Ok((read_docs(d)?, read_jsonl(tr)?, read_jsonl(te)?))
        }
        _ => {
            let (_, docs, bench) = generate_all(&cfg.synth)?;
            let test = bench.test().cloned().collect();
            Ok((docs, bench.train, test))
        }
    }
}

fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.check()?;
    write_text(path, &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .finalize(cli.seed)?;

    match cli.command {
        Command::Synth { out, fraction_shortcut } => {
            let mut synth = cfg.synth;
            if let Some(f) = fraction_shortcut {
                synth.fraction_shortcut = f;
            }
            fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            let (kb, docs, bench) = generate_all(&synth)?;
            write_jsonl(&out.join("kb.jsonl"), kb.docs.values())?;
            write_json(&out.join("typemap.json"), &kb.typemap)?;
            write_jsonl(&out.join("docs.jsonl"), docs.values())?;
            let Benchmark {
                train,
                test_seen,
                test_unseen,
            } = bench;
            write_jsonl(&out.join("train.jsonl"), &train)?;
            write_jsonl(&out.join("test_seen.jsonl"), &test_seen)?;
            write_jsonl(&out.join("test_unseen.jsonl"), &test_unseen)?;
            println!(
                "{} documents, {} train / {} seen / {} unseen samples",
                docs.len(),
                train.len(),
                test_seen.len(),
                test_unseen.len()
            );
        }
        Command::Augment { kb, out, cap } => {
            require_file(&kb)?;
            require_output(&out)?;
            let raw: Vec<RawDocument> = read_jsonl(&kb)?;
            let kb: BTreeMap<DocId, RawDocument> = raw.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
            let linker = DictionaryLinker::from_kb(&kb)?;
            let (docs, warnings) = augment_kb(&kb, &linker, cap)?;
            for w in &warnings {
                warn!("{}: related entity `{}` skipped ({})", w.doc_id, w.entity, w.reason);
            }
            write_jsonl(&out, docs.values())?;
            println!("{} documents augmented, {} warnings", docs.len(), warnings.len());
        }
        Command::Datagen { docs, typemap, out } => {
            require_file(&docs)?;
            require_file(&typemap)?;
            fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            let docs = read_docs(&docs)?;
            let text = fs::read_to_string(&typemap).map_err(|e| Error::Data(format!("{}: {e}", typemap.display())))?;
            let typemap: TypeMap =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", typemap.display())))?;
            let generator = TemplateGenerator {
                qualifier: cfg.datagen.qualifier,
            };
            let result = generate_samples(&docs, &typemap, &cfg.datagen, &generator, &RuleParaphraser::default())?;
            write_jsonl(&out.join("kept.jsonl"), &result.kept)?;
            write_jsonl(&out.join("rejected.jsonl"), &result.rejected)?;
            println!("{} kept, {} rejected {:?}", result.kept.len(), result.rejected.len(), result.reject_counts());
        }
        Command::Train {
            model,
            samples,
            out,
            stats,
        } => {
            require_file(&model.docs)?;
            require_file(&samples)?;
            require_output(&out)?;
            if let Some(s) = &stats {
                require_output(s)?;
            }
            let docs = read_docs(&model.docs)?;
            let samples: Vec<QaSample> = read_jsonl(&samples)?;
            let mut tc = cfg.train;
            tc.flags = model.flags.unwrap_or(tc.flags);
            tc.mode = model.mode.unwrap_or(tc.mode);
            let init = EncoderParams::init(cfg.encoder, cfg.seed)?;
            let (params, st) = with_provider!(&cfg, |p| train(&samples, &docs, init, &p, &tc)?);
            save_params(&params, &out)?;
            if let Some(s) = &stats {
                write_json(s, &st)?;
            }
            println!(
                "{} steps, loss {:.4} -> {:.4}, checksum {}",
                st.losses.len(),
                st.losses.first().copied().unwrap_or(f64::NAN),
                st.losses.last().copied().unwrap_or(f64::NAN),
                st.checksum
            );
        }
        Command::Index {
            docs,
            params,
            flags,
            out,
            exact,
        } => {
            require_file(&docs)?;
            require_file(&params)?;
            require_output(&out)?;
            let docs = read_docs(&docs)?;
            let params = load_params(&params)?;
            let flags = flags.unwrap_or(cfg.train.flags);
            let corpus = with_provider!(&cfg, |p| encode_corpus(&docs, &params, &p, flags)?);
            let mut ic = cfg.index;
            if exact {
                ic.k_centroids = Some(corpus.values().map(|f| f.len()).sum());
                ic.residual = mmlir::index::ResidualMode::Lossless;
            }
            let index = build_index(&corpus, &ic)?;
            save_index(&index, &out)?;
            println!(
                "{} documents, {} vectors, {} centroids",
                index.num_docs(),
                index.num_vectors(),
                index.num_centroids()
            );
        }
        Command::Search {
            index,
            params,
            text,
            image,
            k,
            mode,
        } => {
            require_file(&index)?;
            require_file(&params)?;
            let index = load_index(&index)?;
            let params = load_params(&params)?;
            let query = QueryInput { text, image_key: image };
            let q = with_provider!(&cfg, |p| encode_query(&query, &params, &p, mode)?);
            let sp = mmlir::index::SearchParams {
                k: k.unwrap_or(cfg.search.k),
                ..cfg.search
            };
            for (rank, hit) in index.search(&q, &sp)?.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, hit.doc_id, hit.score);
            }
        }
        Command::Eval {
            model,
            params,
            samples,
            index,
            report,
        } => {
            for p in [&model.docs, &params, &samples] {
                require_file(p)?;
            }
            if let Some(i) = &index {
                require_file(i)?;
            }
            require_output(&report)?;
            let docs = read_docs(&model.docs)?;
            let params = load_params(&params)?;
            let samples: Vec<QaSample> = read_jsonl(&samples)?;
            let flags = model.flags.unwrap_or(cfg.train.flags);
            let mode = model.mode.unwrap_or(cfg.train.mode);
            let depth = cfg.eval.ks.iter().copied().max().unwrap_or(1);
            let rankings = with_provider!(&cfg, |p| eval_rankings(&docs, &params, &samples, index.as_deref(), flags, mode, depth, &cfg, &p)?);
            let distractors = build_distractor_map(&docs, &samples)?;
            let label = match mode {
                QueryMode::ImageText => flags.to_string(),
                QueryMode::ImageOnly => mmlir::eval::probe_label(flags, mode),
            };
            let rep = evaluate_rankings(&cfg.eval.benchmark, &label, &samples, &rankings, Some(&distractors), &cfg.eval.ks)?;
            emit_report(&rep, &report)?;
        }
        Command::Ablate { data, rows, report } => {
            require_output(&report)?;
            let (docs, train_samples, test) = load_benchmark(&cfg, &data)?;
            let rows = if rows.is_empty() { DocFlags::ablation_rows().to_vec() } else { rows };
            let exp = cfg.experiment();
            let rep = with_provider!(&cfg, |p| run_ablation(&docs, &train_samples, &test, &rows, &p, &exp)?);
            emit_report(&rep, &report)?;
        }
        Command::Probe { data, mode, report } => {
            require_output(&report)?;
            let (docs, train_samples, test) = load_benchmark(&cfg, &data)?;
            let exp = cfg.experiment();
            let rep = with_provider!(&cfg, |p| run_shortcut_probe(&docs, &train_samples, &test, mode, &p, &exp)?);
            emit_report(&rep, &report)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_rankings<P: EmbeddingProvider>(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    params: &EncoderParams,
    samples: &[QaSample],
    index: Option<&Path>,
    flags: DocFlags,
    mode: QueryMode,
    depth: usize,
    cfg: &RunConfig,
    p: &P,
) -> Result<Vec<(String, Vec<DocId>)>> {
    match index {
        Some(path) => {
            let index = load_index(path)?;
            let missing = samples.iter().find(|s| !index.doc_ids().contains(&s.gt_doc_id));
            if let Some(s) = missing {
                warn!("ground truth {} of sample {} is not in the index", s.gt_doc_id, s.sample_id);
            }
            rank_samples(samples, params, p, mode, &Retriever::Index(&index, cfg.search), depth)
        }
        None => {
            let corpus = encode_corpus(docs, params, p, flags)?;
            rank_samples(samples, params, p, mode, &Retriever::Exact(&corpus), depth)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
