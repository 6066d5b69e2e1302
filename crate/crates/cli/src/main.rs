use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use contramem::ablation::{comparison_csv, run_variants, Variant};
use contramem::config::KvConfig;
use contramem::data::{load_dataset, save_dataset, Assignment};
use contramem::encoder::{self, EncoderParams};
use contramem::error::{Error, Result};
use contramem::eval;
use contramem::synth::{generate, SynthConfig};
use contramem::trainer::{self, cluster_step, evaluate_records, Mode, TrainConfig, CONFIG_KEYS};

#[derive(Parser)]
#[command(name = "contramem", version, about = "Self-paced contrastive learning on synthetic two-domain data")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair.
    Synth(SynthArgs),
    /// Train the encoder and write checkpoint, reports and evaluation.
    Train(TrainArgs),
    /// Cluster one dataset and score every point's reliability.
    Cluster(ClusterArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Train several ablation variants and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// File values first, then flags; the caller adds its own flags last.
    fn load(&self) -> Result<KvConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        if let Some(seed) = self.seed {
            kv.set("seed", seed);
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_src: PathBuf,
    #[arg(long)]
    out_tgt: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// uda, unsup or oracle; overrides the `mode` key.
    #[arg(long)]
    mode: Option<Mode>,
    /// Overrides the `epochs` key.
    #[arg(long)]
    epochs: Option<usize>,
    /// Labelled source CSV (required in uda mode).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target CSV.
    #[arg(long)]
    tgt: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset CSV to cluster.
    #[arg(long)]
    data: PathBuf,
    /// Encode inputs with this checkpoint first; raw normalized inputs otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-point CSV: sample_id,raw_cluster,r_indep,r_comp,cluster.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Metric CSV, one row per metric.
    #[arg(long)]
    out: PathBuf,
    /// Per-identity query share.
    #[arg(long, default_value_t = 0.25)]
    query_fraction: f64,
    /// Seed of the query/gallery split.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated subset of: full, no_indep, no_comp, no_both, no_unified,
    /// no_selfpaced_clusters_only, oracle.
    #[arg(long, value_delimiter = ',', default_value = "full,no_indep,no_comp,no_both,no_unified,no_selfpaced_clusters_only,oracle")]
    variants: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: PathBuf,
    /// Comparison CSV, one row per variant.
    #[arg(long)]
    out: PathBuf,
}

fn train_help() -> String {
    let mut s = String::from("Config keys:\n");
    for (k, doc) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<20} {doc}\n"));
    }
    s
}

fn synth_help() -> String {
    format!(
        "Config keys and defaults:\n{}",
        SynthConfig::bench_small()
            .to_text()
            .lines()
            .map(|l| format!("  {l}\n"))
            .collect::<String>()
    )
}

fn train_config(args: &ConfigArgs, mode: Option<Mode>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut kv = args.load()?;
    if let Some(m) = mode {
        kv.set("mode", m.tag());
    }
    if let Some(e) = epochs {
        kv.set("epochs", e);
    }
    TrainConfig::from_kv(kv)
}

fn load_source(path: Option<&Path>) -> Result<Vec<contramem::data::SampleRecord>> {
    path.map_or(Ok(Vec::new()), load_dataset)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig::from_kv(args.config.load()?)?;
    let (src, tgt) = generate(&cfg)?;
    save_dataset(&args.out_src, &src)?;
    save_dataset(&args.out_tgt, &tgt)?;
    log::info!("wrote {} source and {} target records", src.len(), tgt.len());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = train_config(&args.config, args.mode, args.epochs)?;
    let src = load_source(args.src.as_deref())?;
    let tgt = load_dataset(&args.tgt)?;
    let outcome = trainer::train_to_dir(&cfg, &src, &tgt, &args.out)?;
    if let Some(e) = &outcome.target_eval {
        println!("target mAP {:.4} top-1 {:.4}", e.map, e.top1());
    }
    if let Some(e) = &outcome.source_eval {
        println!("source mAP {:.4} top-1 {:.4}", e.map, e.top1());
    }
    Ok(())
}

fn cluster(args: &ClusterArgs) -> Result<()> {
    let cfg = TrainConfig::from_kv(args.config.load()?)?;
    let records = load_dataset(&args.data)?;
    let features = match &args.checkpoint {
        Some(p) => {
            let params = EncoderParams::load(p)?;
            encoder::encode(&params, &records.iter().map(|r| r.input.as_slice()).collect::<Vec<_>>())?
        }
        None => records
            .iter()
            .map(|r| contramem::FeatureVector::normalized(r.input.clone()))
            .collect::<Result<Vec<_>>>()?,
    };
    let step = cluster_step(&features, &cfg, None)?;
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
    let opt_id = |x: Option<usize>| x.map_or_else(String::new, |v| v.to_string());
    let mut out = String::from("sample_id,raw_cluster,r_indep,r_comp,cluster\n");
    for (i, r) in records.iter().enumerate() {
        let raw = step.scales.as_ref().and_then(|s| s.main.label(i));
        let (ind, comp) = match &step.scores {
            Some(s) => (s.indep[i], s.comp[i]),
            None => (None, None),
        };
        let kept = match step.state.assignment(i) {
            Assignment::Clustered(c) => Some(c),
            Assignment::Outlier => None,
        };
        out.push_str(&format!("{},{},{},{},{}\n", r.sample_id, opt_id(raw), opt(ind), opt(comp), opt_id(kept)));
    }
    write(&args.out, &out)?;
    println!(
        "{} clusters kept, {} outliers, alpha {}",
        step.state.n_clusters(),
        step.state.n_outliers(),
        opt(step.alpha)
    );
    let gt: Option<Vec<u32>> = records.iter().map(|r| r.eval_label()).collect();
    if let Some(gt) = gt {
        let n = eval::nmi(&step.state.labels(), &gt);
        println!("NMI clustered {:.4} all {:.4}", n.clustered, n.all);
    }
    Ok(())
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let params = EncoderParams::load(&args.checkpoint)?;
    let records = load_dataset(&args.data)?;
    let result = evaluate_records(&params, &records, args.query_fraction, args.seed)?;
    write(&args.out, &result.to_csv())?;
    println!("mAP {:.4} top-1 {:.4}", result.map, result.top1());
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    if args.variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    let variants = args
        .variants
        .iter()
        .map(|v| v.trim().parse())
        .collect::<Result<Vec<Variant>>>()?;
    let cfg = train_config(&args.config, args.mode, args.epochs)?;
    let src = load_source(args.src.as_deref())?;
    let tgt = load_dataset(&args.tgt)?;
    let results = run_variants(&cfg, &variants, &src, &tgt)?;
    let csv = comparison_csv(&results);
    write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn parse() -> Cli {
    let cmd = Cli::command()
        .mut_subcommand("train", |c| c.after_help(train_help()))
        .mut_subcommand("ablate", |c| c.after_help(train_help()))
        .mut_subcommand("cluster", |c| c.after_help(train_help()))
        .mut_subcommand("synth", |c| c.after_help(synth_help()));
    let matches: ArgMatches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Cluster(a) => cluster(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
