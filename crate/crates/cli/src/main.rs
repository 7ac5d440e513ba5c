use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hien::aggregators::AggKind;
use hien::checkpoint::{check_schema, load_checkpoint, save_checkpoint};
use hien::data::{load_csv, Dataset, Split};
use hien::graphs::{bottom_up_order, build_bipartite, build_item_forest, build_user_forest, AttributeForest, NodeKey};
use hien::schema::FeatureSchema;
use hien::synthetic::{generate_synthetic, PlantedConfig};
use hien::training::{evaluate_model, metrics_csv, train, TrainConfig};
use hien::HienError;

const SCHEMA_FILE: &str = "schema.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "hien", version, about = "Train and inspect HIEN click-through-rate models")]
struct Cli {
    /// Worker threads used when scoring.
    #[arg(long, global = true, env = "HIEN_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-structure synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model on a data directory.
    Train(TrainArgs),
    /// Score a labelled CSV with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Report per-sample attention over attribute fields.
    InspectIntents(InspectArgs),
    /// Write the attribute forests and click graph built from a data directory.
    DumpGraph(DumpGraphArgs),
    /// Write the refined embedding tables of a checkpoint.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "HIEN_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator settings (key=value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainArgs {
    /// Training settings (key=value); the desk preset applies when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding schema.txt, train.csv and test.csv.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OutDir,
    #[arg(long)]
    aggregator: Option<AggKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_user_agg: bool,
    #[arg(long)]
    no_item_agg: bool,
    #[arg(long)]
    no_user_intent: bool,
    #[arg(long)]
    no_item_intent: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled CSV to score.
    #[arg(long)]
    test: PathBuf,
    /// Schema of the CSV; defaults to schema.txt beside it.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV of samples to explain.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct DumpGraphArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &HienError) -> u8 {
    match e {
        HienError::Divergence { .. } => 3,
        HienError::Tape(_) => 1,
        _ => 2,
    }
}

fn read(path: &Path) -> hien::Result<String> {
    fs::read_to_string(path).map_err(|e| HienError::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_schema(path: &Path) -> hien::Result<FeatureSchema> {
    FeatureSchema::parse(&read(path)?)
}

fn load(path: &Path, schema: &FeatureSchema, split: Split) -> hien::Result<Dataset> {
    load_csv(path, schema, split).map_err(|e| match e {
        HienError::Io(io) => HienError::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn schema_beside(explicit: Option<&PathBuf>, data: &Path) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join(SCHEMA_FILE))
}

fn write(path: &Path, text: &str) -> hien::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn generate(args: &GenerateArgs) -> hien::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => PlantedConfig::parse(&read(p)?)?,
        None => PlantedConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let syn = generate_synthetic(&cfg)?;
    let out = &args.out.out;
    fs::create_dir_all(out)?;
    syn.train.save_csv(&out.join("train.csv"))?;
    syn.test.save_csv(&out.join("test.csv"))?;
    write(&out.join("truth.json"), &(serde_json::to_string_pretty(&syn.truth)? + "\n"))?;
    write(&out.join(SCHEMA_FILE), &syn.train.schema.to_text())?;
    println!(
        "wrote {} train and {} test samples to {}",
        syn.train.len(),
        syn.test.len(),
        out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs, threads: usize) -> hien::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::parse(&read(p)?)?,
        None => TrainConfig::desk(),
    };
    let m = &mut cfg.model;
    if let Some(a) = args.aggregator {
        m.aggregator = a;
    }
    if let Some(l) = args.layers {
        m.layers = l;
    }
    if let Some(s) = args.seed {
        m.seed = s;
    }
    m.ablation.user_agg &= !args.no_user_agg;
    m.ablation.item_agg &= !args.no_item_agg;
    m.ablation.user_intent &= !args.no_user_intent;
    m.ablation.item_intent &= !args.no_item_intent;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;

    let schema = read_schema(&args.data.join(SCHEMA_FILE))?;
    let train_set = load(&args.data.join("train.csv"), &schema, Split::Train)?;
    let test_set = load(&args.data.join("test.csv"), &schema, Split::Test)?;
    let run = train(&cfg, &train_set, &test_set, threads)?;

    let out = &args.out.out;
    fs::create_dir_all(out)?;
    save_checkpoint(&run.model, &cfg, &out.join(CHECKPOINT_FILE))?;
    write(&out.join("metrics.csv"), &metrics_csv(&run.log))?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    for e in &run.log {
        println!(
            "epoch {}: train_loss={:.6} test_logloss={:.6} test_auc={:.6}",
            e.epoch, e.train_loss, e.test_logloss, e.test_auc
        );
    }
    match run.diverged {
        Some(d) => {
            eprintln!("training diverged; last good parameters saved to {}", out.join(CHECKPOINT_FILE).display());
            Err(d.into())
        }
        None => Ok(()),
    }
}

fn evaluate(args: &EvaluateArgs, threads: usize) -> hien::Result<()> {
    let (model, cfg) = load_checkpoint(&args.checkpoint)?;
    let schema = read_schema(&schema_beside(args.schema.as_ref(), &args.test))?;
    check_schema(&model, &schema)?;
    let test = load(&args.test, &schema, Split::Test)?;
    let r = evaluate_model(&model, &test, cfg.test_batch_size, threads)?;
    println!(
        "auc={} logloss={} positives={} negatives={}",
        r.auc, r.logloss, r.positives, r.negatives
    );
    let csv = format!(
        "auc,logloss,positives,negatives\n{},{},{},{}\n",
        r.auc, r.logloss, r.positives, r.negatives
    );
    write(&args.out.out.join("eval.csv"), &csv)
}

fn inspect(args: &InspectArgs) -> hien::Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let schema = read_schema(&schema_beside(args.schema.as_ref(), &args.samples))?;
    check_schema(&model, &schema)?;
    let data = load(&args.samples, &schema, Split::Test)?;
    let frozen = model.freeze()?;
    let (rows, skipped) = model.inspect_intents(&frozen, &data.samples)?;
    if skipped > 0 {
        log::warn!("skipped {skipped} samples with unknown user or item ids");
    }
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        Format::Csv => {
            let mut s = String::from("user,item,side,field,score,importance\n");
            for r in &rows {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.user, r.item, r.side.as_str(), r.field, r.score, r.importance);
            }
            s
        }
    };
    write(&args.out, &text)?;
    println!("wrote {} rows for {} samples ({skipped} skipped)", rows.len(), data.len() - skipped);
    Ok(())
}

fn node_name(forest: &AttributeForest, n: &NodeKey) -> String {
    match n {
        NodeKey::Leaf(id) => format!("leaf:{id}"),
        NodeKey::Attr { field, value } => format!("{}={value}", forest.field_names[*field]),
    }
}

fn forest_json(forest: &AttributeForest) -> hien::Result<serde_json::Value> {
    let order: Vec<String> = bottom_up_order(forest)?.iter().map(|n| node_name(forest, n)).collect();
    let edges: Vec<[String; 2]> = forest
        .edges
        .iter()
        .map(|(c, p)| [node_name(forest, c), node_name(forest, p)])
        .collect();
    Ok(serde_json::json!({
        "fields": forest.field_names,
        "edges": edges,
        "bottom_up_order": order,
    }))
}

fn dump_graph(args: &DumpGraphArgs) -> hien::Result<()> {
    let schema = read_schema(&args.data.join(SCHEMA_FILE))?;
    let train_set = load(&args.data.join("train.csv"), &schema, Split::Train)?;
    let test_set = load(&args.data.join("test.csv"), &schema, Split::Test)?;
    let all = || train_set.samples.iter().chain(&test_set.samples);
    let items = build_item_forest(all(), &schema)?;
    let users = build_user_forest(all(), &schema)?;
    let graph = build_bipartite(&train_set)?;
    let doc = serde_json::json!({
        "item_forest": forest_json(&items)?,
        "user_forest": forest_json(&users)?,
        "bipartite": {
            "users": graph.num_users(),
            "items": graph.num_items(),
            "edges": graph.edges(),
        },
    });
    write(&args.out, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    println!(
        "item forest {} edges, user forest {} edges, click graph {} edges",
        items.edges.len(),
        users.edges.len(),
        graph.num_edges()
    );
    Ok(())
}

fn export(args: &ExportArgs) -> hien::Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let tables = model.refined_tables()?;
    let k = model.config.k;
    let mut s = String::from("table,row");
    for d in 0..k {
        let _ = write!(s, ",e{d}");
    }
    s.push('\n');
    for (name, t) in &tables {
        for r in 0..t.dims2().0 {
            let _ = write!(s, "{name},{r}");
            for x in t.row(r) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    write(&args.out, &s)?;
    println!("wrote {} tables of dimension {k}", tables.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a, threads),
        Command::Evaluate(a) => evaluate(a, threads),
        Command::InspectIntents(a) => inspect(a),
        Command::DumpGraph(a) => dump_graph(a),
        Command::ExportEmbeddings(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
