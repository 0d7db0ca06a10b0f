use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kcan::explain::{explain, write_jsonl};
use kcan::gradcheck::{grad_check, DEFAULT_STEP};
use kcan::params::{load_snapshot, save_snapshot, SnapshotMeta};
use kcan::rng::stream;
use kcan::synth::{bayes_auc, generate, SynthConfig};
use kcan::trainer::{composed_objective, eval_options, init_store, train_from};
use kcan::{
    evaluate, run_ablation, train_and_evaluate, Ablation, Dataset, ExecPolicy, KcanError, KcanModel, TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "kcan", version, about = "Knowledge-aware conditional attention recommender")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding interactions.tsv, triples.tsv and alignment.tsv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Lambda,
    M,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a planted attribute preference.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        attributes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a data directory and write its id map and split.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and save a snapshot; the loss trace goes to --out or stdout.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a snapshot on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all four variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        /// Double the analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Metrics against λ or the sample size M.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep_param: SweepParam,
        /// Comma-separated values; defaults to 1e-1..1e-5 for λ and 5,10,20,40 for M.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-edge global and conditional attention for one user-item target.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl From<KcanError> for Failure {
    fn from(e: KcanError) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_failure(p))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Data(e.to_string()))
}

impl Common {
    fn config(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = match &self.config {
            // A bad config file is a usage problem, not a data problem.
            Some(p) => TrainConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self, seed: u64) -> Result<Dataset, Failure> {
        let dir = self
            .data_dir
            .as_ref()
            .ok_or_else(|| Failure::Usage("--data-dir is required".into()))?;
        Ok(Dataset::load(dir, seed)?)
    }
}

fn load_model<'g>(
    snapshot: &Path,
    cfg: &TrainConfig,
    data: &'g Dataset,
    exec: ExecPolicy,
) -> Result<KcanModel<'g>, Failure> {
    let file = File::open(snapshot).map_err(io_failure(snapshot))?;
    let (store, meta) = load_snapshot(io::BufReader::new(file))?;
    if meta.config_hash != cfg.hash() {
        return Err(Failure::Data(format!(
            "snapshot was trained with config {} but the current config is {}",
            meta.config_hash,
            cfg.hash()
        )));
    }
    if meta.id_map_hash != data.graph.id_map_hash() {
        return Err(Failure::Data("snapshot was trained on a different dataset".into()));
    }
    if meta.seed != cfg.seed {
        return Err(Failure::Data(format!(
            "snapshot was trained with seed {}; pass --seed {} to reproduce its split",
            meta.seed, meta.seed
        )));
    }
    Ok(KcanModel::new(&data.graph, store, cfg.clone(), exec)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = if cli.sequential {
        ExecPolicy::Sequential
    } else {
        ExecPolicy::Parallel
    };
    match cli.command {
        Command::Synth {
            out,
            users,
            items,
            attributes,
            noise,
            seed,
        } => {
            let cfg = SynthConfig {
                users,
                items,
                attributes,
                noise,
                seed,
            };
            let data = generate(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            data.write_to(&out)?;
            eprintln!(
                "wrote {} interactions to {}; Bayes-optimal AUC {:.4}",
                data.interactions.len(),
                out.display(),
                bayes_auc(items, attributes, noise)
            );
        }
        Command::Prepare { common, out } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            std::fs::create_dir_all(&out).map_err(io_failure(&out))?;
            let path = out.join("id_map.tsv");
            let mut w = BufWriter::new(File::create(&path).map_err(io_failure(&path))?);
            data.graph.write_id_map(&mut w).map_err(io_failure(&path))?;
            w.flush().map_err(io_failure(&path))?;
            for (name, edges) in [
                ("train.tsv", data.graph.interactions()),
                ("test.tsv", &data.test_edges[..]),
            ] {
                let path = out.join(name);
                let mut text = String::new();
                for &(u, i) in edges {
                    let (ue, ie) = (data.graph.user_entity(u), data.graph.item_entity(i));
                    text.push_str(&format!(
                        "{}\t{}\n",
                        data.graph.entities.name(ue),
                        data.graph.entities.name(ie)
                    ));
                }
                std::fs::write(&path, text).map_err(io_failure(&path))?;
            }
            eprintln!(
                "{} entities, {} relations, {} triples, {} train and {} test interactions; id map {}",
                data.graph.entity_count(),
                data.graph.relation_count(),
                data.graph.triple_count(),
                data.graph.interactions().len(),
                data.test_edges.len(),
                data.graph.id_map_hash()
            );
        }
        Command::Train { common, snapshot, out } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            let store = init_store(&cfg, &data.graph)?;
            let outcome = train_from(&cfg, &data.graph, store, exec, |e| {
                eprintln!(
                    "epoch {:>4}  kg {:.6}  target {:.6}  total {:.6}",
                    e.epoch, e.kg, e.target, e.total
                );
            })?;
            let meta = SnapshotMeta {
                config_hash: cfg.hash(),
                id_map_hash: data.graph.id_map_hash(),
                seed: cfg.seed,
            };
            let file = File::create(&snapshot).map_err(io_failure(&snapshot))?;
            save_snapshot(&outcome.store, &meta, BufWriter::new(file))?;
            let mut csv = outcome.trace.to_csv();
            csv.insert_str(0, &format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed));
            emit(out.as_deref(), &csv)?;
        }
        Command::Eval { common, snapshot, out } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            let model = load_model(&snapshot, &cfg, &data, exec)?;
            let report = evaluate(
                &model,
                &data.graph,
                &data.test_edges,
                &data.seen,
                &eval_options(&cfg),
                exec,
            )?;
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Ablate { common, out } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            let reports = run_ablation(&cfg, &data.graph, data.eval_data(), exec)?;
            let mut csv = String::from("variant,metric,value,seed,config_hash\n");
            for (variant, report) in reports {
                for line in report.to_csv().lines().skip(1) {
                    csv.push_str(&format!("{variant},{line}\n"));
                }
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Gradcheck {
            common,
            probes,
            corrupt_gradient,
        } => {
            let cfg = common.config()?;
            let graph = match &common.data_dir {
                Some(_) => common.dataset(cfg.seed)?.graph,
                None => kcan::dataset::toy_graph(),
            };
            let store = init_store(&cfg, &graph)?;
            let objective = composed_objective(&cfg, &graph, &store, exec)?;
            let factor = if corrupt_gradient { 2.0 } else { 1.0 };
            let checked = |st: &kcan::ParameterStore| {
                let (l, mut g) = objective(st)?;
                g.scale(factor);
                Ok((l, g))
            };
            let mut rng = stream(cfg.seed, &[0x006C_4EC4]);
            let report = grad_check(checked, &store, probes, DEFAULT_STEP, &mut rng)?;
            println!(
                "max_rel_err,{:e},probes,{},tolerance,{:e},config_hash,{}",
                report.max_rel_err,
                report.probes.len(),
                GRADCHECK_TOLERANCE,
                cfg.hash()
            );
            if !report.passes(GRADCHECK_TOLERANCE) {
                let worst = report
                    .probes
                    .iter()
                    .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
                    .expect("failing report has probes");
                return Err(Failure::Check(format!(
                    "gradient check failed at {}[{}]: analytic {:e}, numeric {:e}",
                    worst.param.name(),
                    worst.index,
                    worst.analytic,
                    worst.numeric
                )));
            }
        }
        Command::Sweep {
            common,
            sweep_param,
            values,
            out,
        } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            let values = values.unwrap_or_else(|| match sweep_param {
                SweepParam::Lambda => vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
                SweepParam::M => vec![5.0, 10.0, 20.0, 40.0],
            });
            let name = match sweep_param {
                SweepParam::Lambda => "lambda",
                SweepParam::M => "m",
            };
            let mut csv = format!("{name},hit@{k},ndcg@{k},auc,seed,config_hash\n", k = cfg.top_k);
            for v in values {
                let mut c = cfg.clone();
                match sweep_param {
                    SweepParam::Lambda => c.lambda = v,
                    SweepParam::M => {
                        if v < 1.0 || v.fract() != 0.0 {
                            return Err(Failure::Usage(format!("M must be a positive integer, got {v}")));
                        }
                        c.fanout = v as usize;
                    }
                }
                c.validate()?;
                let (_, r) = train_and_evaluate(&c, &data.graph, data.eval_data(), exec)?;
                csv.push_str(&format!(
                    "{v},{},{},{},{},{}\n",
                    r.hit, r.ndcg, r.auc, r.seed, r.config_hash
                ));
                eprintln!("{name} = {v}: auc {:.4}", r.auc);
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Explain {
            common,
            snapshot,
            user,
            item,
            out,
        } => {
            let cfg = common.config()?;
            let data = common.dataset(cfg.seed)?;
            let model = load_model(&snapshot, &cfg, &data, exec)?;
            let u = data
                .users
                .get(&user)
                .ok_or_else(|| Failure::Data(format!("unknown user '{user}'")))?;
            let i = data
                .items
                .get(&item)
                .ok_or_else(|| Failure::Data(format!("unknown item '{item}'")))?;
            let records = explain(&model, u, data.graph.item_entity(i))?;
            let mut w = output(out.as_deref())?;
            write_jsonl(&records, &mut w).map_err(|e| Failure::Data(e.to_string()))?;
            w.flush().map_err(|e| Failure::Data(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Data(m) => (EXIT_DATA, m),
                Failure::Check(m) => (EXIT_CHECK, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
