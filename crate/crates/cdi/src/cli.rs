use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdi_core::corpus::{make_synthetic_blobs, Corpus, SplitSpec};
use cdi_core::discovery::{run_oracle, DiscoveryConfig, DiscoveryMode, OracleRun};
use cdi_core::metrics::MetricTriple;
use cdi_core::pipeline::{run_known_ratio, KnownRatioRun, PipelineConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::formats::eventlog::{self, LoggedEvent};
use crate::formats::runlog::{self, RunLogEntry};
use crate::formats::dataset;
use crate::store::Store;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cdi", version, about = "Controllable intent discovery over precomputed utterance embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a JSONL dataset and CDIE embeddings and register them in the store.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        store: StoreArg,
        /// Print machine-readable JSON.
        #[arg(long)]
        json: bool,
    },
    /// Known-ratio protocol: UCL, stage 1 and stage 2 with the ground-truth K.
    Benchmark(BenchmarkArgs),
    /// Run the discovery loop end to end.
    Discover(DiscoverArgs),
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Write a synthetic Gaussian-blob corpus.
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives dataset.jsonl and embeddings.cdie.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct StoreArg {
    /// Store directory.
    #[arg(long = "store", env = "CDI_STORE", default_value = "cdi-store")]
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, requires = "embeddings", conflicts_with = "corpus")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub embeddings: Option<PathBuf>,
    /// Id of a corpus registered in the store.
    #[arg(long)]
    pub corpus: Option<String>,
    #[command(flatten)]
    pub store: StoreArg,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        match (&self.dataset, &self.embeddings, &self.corpus) {
            (Some(d), Some(e), None) => dataset::load_corpus(d, e),
            (None, None, Some(id)) => Store::open(&self.store.path)?.load_corpus(id),
            _ => Err(Error::Config("give either --dataset with --embeddings, or --corpus".into())),
        }
    }
}

/// Training flags shared by `benchmark` and `discover`; each overrides the
/// config file.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON document with the configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub ucl_epochs: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub fixed_k: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, p: &mut PipelineConfig) {
        let t = &mut p.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.lambda, self.lambda);
        set(&mut t.tau, self.tau);
        if self.ucl_epochs.is_some() {
            p.ucl_epochs = self.ucl_epochs;
        }
        set(&mut p.hidden_dim, self.hidden_dim);
        if self.fixed_k.is_some() {
            p.fixed_k = self.fixed_k;
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// One or more known-intent ratios.
    #[arg(long, value_delimiter = ',', required = true)]
    pub known_ratio: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub labeled_frac: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Held-out evaluation fraction.
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Append stage reports to this JSON-lines file.
    #[arg(long)]
    pub run_log: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Answer proposals from gold labels.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long)]
    pub gamma_first: Option<f64>,
    #[arg(long)]
    pub gamma_rest: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Write the session event log (JSON lines) here.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    #[arg(long)]
    pub run_log: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn append_run_log(path: &Path, entries: &[RunLogEntry]) -> Result<()> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    runlog::write_entries(std::io::BufWriter::new(f), entries)
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest {
            dataset,
            embeddings,
            store,
            json,
        } => {
            let info = Store::open(&store.path)?.register_corpus_files(&dataset, &embeddings)?;
            if json {
                emit(out, &serde_json::to_string_pretty(&info)?)
            } else {
                emit(
                    out,
                    &format!(
                        "registered corpus {}\nN={} dim={} labels={}\nfingerprint {}",
                        info.corpus_id, info.size, info.dim, info.labels, info.fingerprint
                    ),
                )
            }
        }
        Command::Benchmark(args) => benchmark(args, out),
        Command::Discover(args) => discover(args, out),
        Command::Serve { bind, store } => serve(&bind, &store.path),
        Command::Synth {
            n,
            k,
            dim,
            separation,
            noise,
            seed,
            out: dir,
        } => {
            let corpus = make_synthetic_blobs(n, k, dim, separation, noise, seed)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (d, e) = (dir.join("dataset.jsonl"), dir.join("embeddings.cdie"));
            dataset::save_corpus(&corpus, &d, &e)?;
            emit(out, &format!("wrote {} and {} (N={n}, k={k}, dim={dim})", d.display(), e.display()))
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

#[derive(Serialize)]
struct BenchmarkRow {
    known_ratio: f64,
    #[serde(flatten)]
    run: KnownRatioRun,
}

#[derive(Serialize)]
struct RatioMean {
    known_ratio: f64,
    seeds: usize,
    stage1: MetricTriple,
    stage2: MetricTriple,
}

fn mean(ms: &[MetricTriple]) -> MetricTriple {
    let n = ms.len() as f64;
    MetricTriple {
        acc: ms.iter().map(|m| m.acc).sum::<f64>() / n,
        ari: ms.iter().map(|m| m.ari).sum::<f64>() / n,
        nmi: ms.iter().map(|m| m.nmi).sum::<f64>() / n,
    }
}

fn benchmark(args: BenchmarkArgs, out: &mut dyn Write) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(Error::Config("--seeds needs at least one seed".into()));
    }
    let corpus = args.corpus.load()?;
    let mut cfg: PipelineConfig = read_config(&args.train.config)?;
    args.train.apply(&mut cfg);
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut log = Vec::new();
    for &ratio in &args.known_ratio {
        for &seed in &args.seeds {
            let split = SplitSpec {
                known_ratio: ratio,
                labeled_fraction: args.labeled_frac,
                seed,
            };
            let run = run_known_ratio(&corpus, &split, args.test_frac, &cfg)?;
            for r in &run.reports {
                log.push(RunLogEntry {
                    run: format!("known_ratio={ratio} seed={seed}"),
                    config: json!({ "pipeline": cfg, "split": split, "test_fraction": args.test_frac }),
                    report: r.clone(),
                });
            }
            rows.push(BenchmarkRow { known_ratio: ratio, run });
        }
    }
    if let Some(p) = &args.run_log {
        append_run_log(p, &log)?;
    }
    let means: Vec<RatioMean> = args
        .known_ratio
        .iter()
        .map(|&ratio| {
            let mine: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.known_ratio == ratio).collect();
            RatioMean {
                known_ratio: ratio,
                seeds: mine.len(),
                stage1: mean(&mine.iter().map(|r| r.run.stage1).collect::<Vec<_>>()),
                stage2: mean(&mine.iter().map(|r| r.run.stage2).collect::<Vec<_>>()),
            }
        })
        .collect();
    if args.json {
        let rows: Vec<_> = rows
            .iter()
            .map(|r| {
                json!({
                    "known_ratio": r.known_ratio,
                    "seed": r.run.seed,
                    "k": r.run.k,
                    "labeled": r.run.labeled,
                    "evaluated": r.run.evaluated,
                    "known_intents": r.run.known_intents,
                    "stage1": r.run.stage1,
                    "stage2": r.run.stage2,
                })
            })
            .collect();
        return emit(out, &serde_json::to_string_pretty(&json!({ "runs": rows, "means": means }))?);
    }
    let mut t = String::new();
    let _ = writeln!(t, "{:>6} {:>6} {:>4} {:>8} {:>8} {:>8}", "ratio", "seed", "K", "ACC", "ARI", "NMI");
    for r in &rows {
        let m = r.run.stage2;
        let _ = writeln!(
            t,
            "{:>6.2} {:>6} {:>4} {:>8.2} {:>8.2} {:>8.2}",
            r.known_ratio,
            r.run.seed,
            r.run.k,
            100.0 * m.acc,
            100.0 * m.ari,
            100.0 * m.nmi
        );
    }
    for m in &means {
        let s = m.stage2;
        let _ = writeln!(
            t,
            "{:>6.2} {:>6} {:>4} {:>8.2} {:>8.2} {:>8.2}",
            m.known_ratio,
            "mean",
            "",
            100.0 * s.acc,
            100.0 * s.ari,
            100.0 * s.nmi
        );
    }
    emit(out, t.trim_end())
}

/// Per-iteration log of an oracle run: cluster count, intents, labeled share and scores.
pub fn iteration_table(run: &OracleRun) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:>4} {:>5} {:>5} {:>8} {:>9} {:>8} {:>8} {:>8}",
        "iter", "k", "|I|", "labeled", "%labeled", "ACC", "ARI", "NMI"
    );
    for r in &run.session.history {
        let m = |f: fn(&MetricTriple) -> f64| r.metrics.as_ref().map_or("-".to_string(), |x| format!("{:.2}", 100.0 * f(x)));
        let _ = writeln!(
            t,
            "{:>4} {:>5} {:>5} {:>8} {:>9.2} {:>8} {:>8} {:>8}",
            r.iteration,
            r.k,
            r.intents,
            r.labeled,
            r.labeled_pct,
            m(|x| x.acc),
            m(|x| x.ari),
            m(|x| x.nmi)
        );
    }
    let _ = write!(
        t,
        "terminated: {}",
        run.session.termination.as_deref().unwrap_or("iteration limit reached")
    );
    t
}

/// Ids whose assigned intent differs from their gold label.
pub fn impure_labels(run: &OracleRun, corpus: &Corpus) -> Vec<String> {
    run.session
        .labeled
        .iter()
        .filter(|(&i, intent)| corpus.get(i).gold_label.as_ref() != Some(*intent))
        .map(|(&i, _)| corpus.get(i).id.clone())
        .collect()
}

fn discover(args: DiscoverArgs, out: &mut dyn Write) -> Result<()> {
    if !args.oracle {
        return Err(Error::Config(
            "interactive discovery runs through `cdi serve`; pass --oracle for a simulated run".into(),
        ));
    }
    let corpus = args.corpus.load()?;
    let mut cfg: DiscoveryConfig = read_config(&args.train.config)?;
    args.train.apply(&mut cfg.pipeline);
    if args.train.fixed_k.is_some() {
        cfg.fixed_k = args.train.fixed_k;
    }
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.max_iterations, args.max_iterations);
    set(&mut cfg.k_prime, args.k_prime);
    set(&mut cfg.gamma_first, args.gamma_first);
    set(&mut cfg.gamma_rest, args.gamma_rest);
    cfg.mode = DiscoveryMode::Oracle;
    cfg.validate()?;

    let run = run_oracle(&corpus, &cfg)?;
    let impure = impure_labels(&run, &corpus);
    if !impure.is_empty() {
        return Err(Error::Config(format!(
            "oracle purity violated: {} samples labeled under a non-gold intent (first: {})",
            impure.len(),
            impure[0]
        )));
    }
    if let Some(p) = &args.event_log {
        let _ = std::fs::remove_file(p);
        for e in &run.events {
            eventlog::append(p, &LoggedEvent::new(e, cfg.seed, None))?;
        }
    }
    if let Some(p) = &args.run_log {
        let entries: Vec<RunLogEntry> = run
            .reports
            .iter()
            .map(|r| RunLogEntry {
                run: format!("discover seed={}", cfg.seed),
                config: serde_json::to_value(&cfg).unwrap_or_default(),
                report: r.clone(),
            })
            .collect();
        append_run_log(p, &entries)?;
    }
    if args.json {
        let s = &run.session;
        return emit(
            out,
            &serde_json::to_string_pretty(&json!({
                "iterations": s.history,
                "intents": s.intents,
                "k_t": s.k_t,
                "status": s.status,
                "termination": s.termination,
            }))?,
        );
    }
    emit(out, &iteration_table(&run))
}

fn serve(bind: &str, store: &Path) -> Result<()> {
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let store = Store::open(store)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| Error::io(bind, e))?;
        let addr = listener.local_addr().map_err(|e| Error::io(bind, e))?;
        tracing::info!(%addr, store = %store.root().display(), "listening");
        println!("listening on http://{addr}");
        crate::service::serve(listener, store).await.map_err(|e| Error::io(bind, e))
    })
}
