use std::fs::File;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dslsh_core::eval::{self, Bench, BenchSettings, ClusterMode, ParamGrid};
use dslsh_core::node::{self, DatasetRegistry, Node, NodeConfig};
use dslsh_core::orchestrator::{self, ClusterConfig, Orchestrator};
use dslsh_core::pipeline::{self, SyntheticConfig, WindowSpec};
use dslsh_core::protocol::{BuildAck, BuildRequest, ClusterBuildRequest, Envelope, Message, QueryRequest};
use dslsh_core::{Dataset, SlshConfig};

const DEFAULT_ENDPOINT: &str = "127.0.0.1:7000";

#[derive(Parser)]
#[command(name = "dslsh", version, about = "Distributed stratified LSH for K-NN prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node service.
    Node {
        #[arg(long)]
        listen: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        id: Option<String>,
    },
    /// Build the cluster described by a config file and serve client queries.
    Orchestrate {
        #[arg(long)]
        cluster: PathBuf,
        /// Overrides `dataset` from the config file.
        #[arg(long)]
        dataset: Option<String>,
        /// Overrides `listen` from the config file.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Ask a running orchestrator to rebuild its index.
    Build {
        #[arg(long, default_value = DEFAULT_ENDPOINT)]
        endpoint: String,
        #[arg(long)]
        master_seed: Option<u64>,
        #[arg(long, default_value_t = 600.0)]
        timeout_s: f64,
    },
    /// Send one or more queries to a running orchestrator.
    Query(QueryArgs),
    /// Write synthetic MAP waveforms.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        waveforms: usize,
        #[arg(long)]
        hours: f64,
        #[arg(long)]
        ahe_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn waveforms into a labeled feature dataset.
    Extract {
        /// Lag window length in seconds.
        #[arg(long, default_value_t = 300.0)]
        lag: f64,
        /// Condition window length in seconds.
        #[arg(long, default_value_t = 300.0)]
        cond: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a parameter grid and report speed and accuracy.
    Bench(BenchArgs),
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Comma-separated feature vector.
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    vector: Option<String>,
    /// Dataset-format CSV; every row is sent as a query.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Parameter grid JSON; the built-in reference grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `ν p`: ν in-process nodes with p workers each.
    #[arg(long, num_args = 2, value_names = ["NODES", "WORKERS"], conflicts_with = "cluster")]
    in_process: Option<Vec<usize>>,
    /// Cluster config of running nodes that can read `--dataset`.
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Also run a strong-scaling sweep over these node counts (in-process
    /// only) at the first grid point, written next to `--out`.
    #[arg(long, value_delimiter = ',')]
    scaling: Vec<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Node { listen, workers, id } => {
            let registry = Arc::new(DatasetRegistry::new());
            let node = Node::new(NodeConfig { node_id: id.unwrap_or_else(|| listen.clone()), workers }, registry);
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            info!("node listening on {}", listener.local_addr()?);
            node::serve(listener, node)?;
        }
        Command::Orchestrate { cluster, dataset, listen } => {
            let cfg = ClusterConfig::from_file(&cluster).with_context(|| format!("reading {}", cluster.display()))?;
            let dataset = dataset.or(cfg.dataset.clone()).ok_or_else(|| anyhow!("no dataset in config or on the command line"))?;
            let listen = listen.or(cfg.listen.clone()).unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
            let n = Dataset::read_csv(&dataset).with_context(|| format!("reading {dataset}"))?.len();
            let mut o = Orchestrator::connect(&cfg)?;
            let ack = o.build(&dataset, n)?;
            info!("cluster built: {} nodes, spec digest {}", ack.nodes.len(), ack.spec_digest);
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            orchestrator::serve_clients(listener, &mut o, &dataset)?;
        }
        Command::Build { endpoint, master_seed, timeout_s } => {
            let env = Envelope::new(1, Message::BuildRequest(BuildRequest::Cluster(ClusterBuildRequest { master_seed })));
            let reply = orchestrator::client_request(&endpoint, &env, Duration::from_secs_f64(timeout_s))?;
            match reply.message {
                Message::BuildAck(BuildAck::Cluster(ack)) => println!("{}", serde_json::to_string_pretty(&ack)?),
                Message::Error(e) => bail!("build failed: {e:?}"),
                other => bail!("unexpected reply {}", other.type_name()),
            }
        }
        Command::Query(args) => run_query(args)?,
        Command::GenData { seed, waveforms, hours, ahe_rate, out } => {
            let cfg = SyntheticConfig::new(seed, waveforms, hours, ahe_rate);
            let waves = pipeline::generate_synthetic(&cfg)?;
            pipeline::write_waveforms(&waves, &out)?;
            info!("wrote {} waveforms to {}", waves.len(), out.display());
        }
        Command::Extract { lag, cond, input, out } => {
            let spec = WindowSpec::new(lag, cond);
            let waves = pipeline::read_waveforms(&input)?;
            let (ds, report) = pipeline::extract_dataset(&waves, &spec)?;
            ds.write_csv(&out)?;
            info!(
                "{} windows attempted, {} extracted ({} positive), {} rejected for empty subwindows, {} for empty condition windows",
                report.attempted.len(),
                report.extracted,
                report.positives,
                report.rejected_empty_subwindow,
                report.rejected_condition
            );
        }
        Command::Bench(args) => run_bench(args)?,
    }
    Ok(())
}

fn run_query(args: QueryArgs) -> Result<()> {
    let vectors: Vec<Vec<f64>> = match (&args.vector, &args.file) {
        (Some(v), _) => vec![v
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad vector component {s:?}")))
            .collect::<Result<_>>()?],
        (None, Some(path)) => Dataset::read_csv(path)?.points.into_iter().map(|p| p.features).collect(),
        (None, None) => bail!("one of --vector or --file is required"),
    };
    let timeout = Duration::from_secs_f64(args.timeout_s);
    for (i, vector) in vectors.into_iter().enumerate() {
        let env = Envelope::new(i as u64 + 1, Message::QueryRequest(QueryRequest { vector, k: args.k }));
        let reply = orchestrator::client_request(&args.endpoint, &env, timeout)?;
        match reply.message {
            Message::QueryResponse(r) => println!("{}", serde_json::to_string(&r)?),
            Message::Error(e) => bail!("query {} failed: {e:?}", i + 1),
            other => bail!("unexpected reply {}", other.type_name()),
        }
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let dataset = Arc::new(Dataset::read_csv(&args.dataset)?);
    let queries = Dataset::read_csv(&args.queries)?;
    if queries.d != dataset.d {
        bail!("queries have d={}, dataset has d={}", queries.d, dataset.d);
    }
    let grid = match &args.grid {
        Some(path) => ParamGrid::from_file(path)?,
        None => ParamGrid::reference(),
    };
    let (mode, k) = match (&args.in_process, &args.cluster) {
        (_, Some(path)) => {
            let cfg = ClusterConfig::from_file(path)?;
            let k = cfg.voting.k;
            (ClusterMode::Remote(cfg), k)
        }
        (Some(v), None) => (ClusterMode::InProcess { nodes: v[0], workers: v[1] }, args.k),
        (None, None) => (ClusterMode::InProcess { nodes: 1, workers: 1 }, args.k),
    };
    let mut settings = BenchSettings { bootstrap_resamples: args.resamples, ..BenchSettings::default() };
    settings.voting.k = k;
    let base = SlshConfig::outer_only(1, 1, dataset.d, k, args.master_seed);
    let configs = grid.expand(&base);
    let name = args.dataset.to_string_lossy().into_owned();
    let remote = matches!(mode, ClusterMode::Remote(_));
    let mut bench = Bench::new(dataset, name, mode, settings);

    let results = bench.run_grid(&configs, &queries)?;
    eval::write_results_csv(&results, File::create(&args.out)?)?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    info!("{} grid points written to {} ({failed} failed)", results.len(), args.out.display());

    if !args.scaling.is_empty() {
        if remote {
            bail!("--scaling needs an in-process cluster");
        }
        let cfg = configs.first().ok_or_else(|| anyhow!("empty grid"))?;
        let rows = bench.run_scaling(cfg, &queries, &args.scaling)?;
        let path = args.out.with_extension("scaling.csv");
        eval::write_scaling_csv(&rows, File::create(&path)?)?;
        info!("scaling results written to {}", path.display());
    }
    Ok(())
}
