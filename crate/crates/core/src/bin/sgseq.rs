use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sgseq_core::codec::{
    image_stats, parse_sequence, sequence_stats, serialize_graph, ParsedSequence, SerializationConfig,
};
use sgseq_core::eval::{evaluate, load_seen_triplets, Averaging, Protocol};
use sgseq_core::fixture::{make_fixture, write_fixture, FixtureConfig};
use sgseq_core::gradcheck::{run_gradcheck, Corruption, GradcheckConfig};
use sgseq_core::io::{
    load_categories, load_predictions, load_scene_graphs, save_predictions, save_scene_graphs,
    RunConfig,
};
use sgseq_core::pipeline::RunInputs;
use sgseq_core::tokenizer::Vocabulary;

#[derive(Parser)]
#[command(name = "sgseq", version, about = "Scene graph sequences: generate, parse, ground, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serialize ground-truth graphs into token sequences (JSONL).
    Serialize(SerializeArgs),
    /// Generate or ingest sequences and write predicted scene graphs.
    Pipeline(PipelineArgs),
    /// Parse the sequences of a prediction file into named triplets.
    Parse(ParseArgs),
    /// Evaluate predicted graphs against ground truth.
    Eval(EvalArgs),
    /// Sequence statistics of a prediction file.
    Stats(StatsArgs),
    /// Finite-difference check of the grounding gradients.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic fixture dataset.
    MakeFixture(FixtureArgs),
}

#[derive(Args, Default)]
struct Common {
    /// Run config (TOML); relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Args)]
struct SerializeArgs {
    #[command(flatten)]
    common: Common,
    /// Graph JSONL (defaults to paths.ground_truth).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    max_triplets: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Ingest prediction records instead of generating.
    #[arg(long)]
    predictions_in: Option<PathBuf>,
    #[arg(long)]
    graphs_out: Option<PathBuf>,
    #[arg(long)]
    sequences_out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    sparse_top_k: Option<usize>,
    #[arg(long)]
    beta_entity: Option<f64>,
    #[arg(long)]
    beta_predicate: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    max_relations: Option<usize>,
    /// Store hidden states inline instead of in the binary sidecar.
    #[arg(long)]
    inline_hidden: bool,
}

#[derive(Args)]
struct ParseArgs {
    #[command(flatten)]
    common: Common,
    /// Prediction JSONL.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Parse whitespace-separated text instead of a file.
    #[arg(long, conflicts_with = "predictions")]
    text: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Predicted graph JSONL (defaults to paths.graphs_out).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth graph JSONL (defaults to paths.ground_truth).
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seen_triplets: Option<PathBuf>,
    /// sgdet, sgcls or pcls.
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    per_image: bool,
    /// Also write `key = value` lines with exact ratios here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    /// Prediction JSONL (defaults to paths.sequences_out).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            cfg.validate(p)?;
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(p) = &common.vocab {
        cfg.paths.vocab = Some(p.clone());
    }
    if let Some(p) = &common.categories {
        cfg.paths.categories = Some(p.clone());
    }
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("no {what} given (flag or config)"),
    }
}

fn check_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        bail!("{what}: no such file {}", p.display());
    }
    Ok(())
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;
    pool.install(f)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let p = need(&cfg.paths.vocab, "vocabulary")?;
    Vocabulary::load(p).with_context(|| format!("loading {}", p.display()))
}

fn cmd_serialize(a: SerializeArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(p) = a.input {
        cfg.paths.ground_truth = Some(p);
    }
    let vocab = load_vocab(&cfg)?;
    let space = load_categories(need(&cfg.paths.categories, "categories")?, cfg.novel_fraction, cfg.seed)?;
    let graphs = load_scene_graphs(need(&cfg.paths.ground_truth, "input graphs")?, &space)?;
    let mut sc = SerializationConfig::new(&vocab)?;
    sc.order = cfg.serialization.order;
    if let Some(m) = a.max_triplets.or(cfg.serialization.max_triplets) {
        sc.max_triplets = m;
    }
    #[derive(Serialize)]
    struct Row<'a> {
        image_id: &'a str,
        tokens: Vec<u32>,
        text: String,
    }
    let mut out = String::new();
    for g in &graphs {
        let s = serialize_graph(g, &space, &vocab, &sc).with_context(|| format!("image {}", g.image_id))?;
        let tokens = s.tokens();
        let row = Row {
            image_id: &g.image_id,
            text: vocab.detokenize(&tokens)?,
            tokens,
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    match a.output {
        Some(p) => {
            create_parent(&p)?;
            fs::write(&p, out).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let p = &mut cfg.paths;
    for (slot, v) in [
        (&mut p.weights, a.weights),
        (&mut p.scorer, a.scorer),
        (&mut p.features, a.features),
        (&mut p.predictions_in, a.predictions_in),
        (&mut p.graphs_out, a.graphs_out),
        (&mut p.sequences_out, a.sequences_out),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    let g = &mut cfg.generation;
    g.rounds = a.rounds.unwrap_or(g.rounds);
    g.top_p = a.top_p.unwrap_or(g.top_p);
    g.max_len = a.max_len.unwrap_or(g.max_len);
    g.sparse_top_k = a.sparse_top_k.unwrap_or(g.sparse_top_k);
    let c = &mut cfg.conversion;
    c.beta_entity = a.beta_entity.unwrap_or(c.beta_entity);
    c.beta_predicate = a.beta_predicate.unwrap_or(c.beta_predicate);
    let pp = &mut cfg.postprocess;
    pp.top_k = a.top_k.unwrap_or(pp.top_k);
    pp.nms_iou = a.nms_iou.unwrap_or(pp.nms_iou);
    pp.max_relations = a.max_relations.unwrap_or(pp.max_relations);
    if a.inline_hidden {
        cfg.hidden_sidecar = false;
    }
    let origin = a.common.config.clone().unwrap_or_else(|| PathBuf::from("<flags>"));
    cfg.validate(&origin)?;
    for (what, p) in [
        ("vocabulary", &cfg.paths.vocab),
        ("categories", &cfg.paths.categories),
        ("weights", &cfg.paths.weights),
    ] {
        check_file(need(p, what)?, what)?;
    }
    let graphs_out = need(&cfg.paths.graphs_out, "graphs output")?.to_path_buf();

    let (model, outputs) = with_pool(cfg.threads, || {
        let inputs = RunInputs::load(&cfg)?;
        Ok(inputs.run(&cfg)?)
    })?;

    create_parent(&graphs_out)?;
    let graphs: Vec<_> = outputs.iter().map(|o| o.graph.clone()).collect();
    save_scene_graphs(&graphs_out, &graphs, &model.space, true)?;
    if let Some(seq_out) = &cfg.paths.sequences_out {
        create_parent(seq_out)?;
        let preds: Vec<_> = outputs.iter().map(|o| o.prediction.clone()).collect();
        save_predictions(seq_out, &preds, model.weights.config.hidden_dim, cfg.hidden_sidecar)?;
    }
    let stats: Vec<_> = outputs.iter().map(|o| o.stats).collect();
    let relations: usize = graphs.iter().map(|g| g.relations.len()).sum();
    println!("images {}  relations {}", graphs.len(), relations);
    if let Ok(s) = sequence_stats(&stats) {
        println!("valid_fraction {:.4}", s.valid_fraction);
    }
    Ok(())
}

fn cmd_parse(a: ParseArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let vocab = load_vocab(&cfg)?;
    let named = |tokens: &[u32], r: &std::ops::Range<usize>| -> Result<String> {
        Ok(vocab.detokenize(&tokens[r.clone()])?)
    };
    #[derive(Serialize)]
    struct Row {
        image_id: String,
        round: usize,
        triplets: Vec<[String; 3]>,
        n_rel_tokens: usize,
        n_unique_triplets: usize,
    }
    let mut sequences: Vec<(String, usize, Vec<u32>)> = Vec::new();
    if let Some(t) = a.text {
        sequences.push(("-".into(), 0, vocab.tokenize(&t)));
    } else {
        let p = need(&a.predictions, "predictions")?;
        for pred in load_predictions(p)? {
            for s in pred.sequences {
                sequences.push((pred.image_id.clone(), s.round, s.tokens));
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    for (image_id, round, tokens) in sequences {
        let (spans, stats) = parse_sequence(&tokens, &vocab);
        let triplets = spans
            .iter()
            .map(|s| {
                Ok([
                    named(&tokens, &s.subject_content())?,
                    named(&tokens, &s.predicate_content())?,
                    named(&tokens, &s.object_content())?,
                ])
            })
            .collect::<Result<_>>()?;
        let row = Row {
            image_id,
            round,
            triplets,
            n_rel_tokens: stats.n_rel_tokens,
            n_unique_triplets: stats.n_unique_triplets,
        };
        writeln!(stdout, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(p) = a.protocol {
        cfg.eval.protocol = p;
    }
    if let Some(k) = a.ks {
        cfg.eval.ks = k;
    }
    if let Some(t) = a.iou {
        cfg.eval.iou_threshold = t;
    }
    if a.per_image {
        cfg.eval.averaging = Averaging::PerImage;
    }
    let pred = a.pred.or(cfg.paths.graphs_out.clone());
    let gt = a.gt.or(cfg.paths.ground_truth.clone());
    let seen = a.seen_triplets.or(cfg.paths.seen_triplets.clone());
    let cats = need(&cfg.paths.categories, "categories")?;
    let space = load_categories(cats, cfg.novel_fraction, cfg.seed)?;
    let preds = load_scene_graphs(need(&pred, "predicted graphs")?, &space)?;
    let gts = load_scene_graphs(need(&gt, "ground truth")?, &space)?;
    if let Some(s) = &seen {
        cfg.eval.seen_triplets = Some(load_seen_triplets(s, &space)?);
    }
    let report = with_pool(cfg.threads, || Ok(evaluate(&preds, &gts, &space, &cfg.eval)?))?;
    print!("{}", report.to_table());
    if let Some(out) = a.out {
        create_parent(&out)?;
        fs::write(&out, report.key_value_text()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let vocab = load_vocab(&cfg)?;
    let path = a.predictions.or(cfg.paths.sequences_out.clone());
    let path = need(&path, "predictions")?;
    let preds = load_predictions(path)?;
    if preds.is_empty() {
        bail!("{}: no prediction records", path.display());
    }
    let per_image: Vec<_> = preds
        .iter()
        .map(|p| {
            let parsed: Vec<_> = p
                .sequences
                .iter()
                .map(|s| ParsedSequence::new(s.tokens.clone(), &vocab))
                .collect();
            image_stats(&parsed)
        })
        .collect();
    let s = sequence_stats(&per_image)?;
    println!("{:>8} {:>10} {:>8} {:>8}", "#Trip", "#Uni.Trip", "#[REL]", "%Valid");
    println!(
        "{:>8.2} {:>10.2} {:>8.2} {:>8.2}",
        s.avg_triplets,
        s.avg_unique_triplets,
        s.avg_rel_tokens,
        100.0 * s.valid_fraction
    );
    println!("images {}", s.images);
    println!("valid_fraction {}", s.valid_fraction);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg = load_config(&a.common)?;
    let mut gc = GradcheckConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    if let Some(d) = a.dim {
        gc.hidden_dim = d;
        gc.model_dim = d;
    }
    gc.layers = a.layers.unwrap_or(gc.layers);
    gc.heads = a.heads.unwrap_or(gc.heads);
    gc.queries = a.queries.unwrap_or(gc.queries);
    if a.corrupt_gradient {
        gc.corruption = Corruption::Scale(1.1);
    }
    let r = run_gradcheck(&gc)?;
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    println!(
        "box loss: max rel error {:.3e} over {} components (tol {:.0e}) {}",
        r.loss_max_rel_error,
        r.loss_components,
        gc.loss_tolerance,
        verdict(r.loss_pass)
    );
    println!(
        "network:  max rel error {:.3e} over {} parameters (tol {:.0e}, worst {}) {}",
        r.network_max_rel_error,
        r.network_parameters,
        gc.network_tolerance,
        r.worst_tensor,
        verdict(r.network_pass)
    );
    Ok(r.passed())
}

fn cmd_make_fixture(a: FixtureArgs) -> Result<()> {
    let mut fc = FixtureConfig::default();
    fc.seed = a.seed.unwrap_or(fc.seed);
    fc.images = a.images.unwrap_or(fc.images);
    let ds = make_fixture(&fc)?;
    write_fixture(&ds, &fc, &a.out)?;
    println!("wrote {} images to {}", ds.graphs.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serialize(a) => cmd_serialize(a).map(|_| true),
        Command::Pipeline(a) => cmd_pipeline(a).map(|_| true),
        Command::Parse(a) => cmd_parse(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Stats(a) => cmd_stats(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::MakeFixture(a) => cmd_make_fixture(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("sgseq: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
