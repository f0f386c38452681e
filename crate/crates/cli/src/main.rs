use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use kgxl::ablation::{ablation_csv, run_ablation, summary, AblationSetup, VARIANTS};
use kgxl::decode::summarize;
use kgxl::linker::{tokenize, Gazetteer, LinkedDocument};
use kgxl::model::{random_entity_table, EntityMode, Preset, RunConfig, Summarizer};
use kgxl::rouge::{load_pairs, score_pair, scores_csv, ScoringPair};
use kgxl::synthetic::{generate, SyntheticData, SyntheticTaskSpec, Task};
use kgxl::tensor::Tensor;
use kgxl::train::{build_vocab, load_corpus, loss_csv, mean_loss, prepare_corpus, token_accuracy, train_summarizer};
use kgxl::transe::{export_entities, link_prediction_eval, load_entities, transe_train, KnowledgeGraph, TransEConfig};
use kgxl::{Error, Result};

#[derive(Parser)]
#[command(name = "kgxl", version, about = "Entity-aware encoder-decoder summarizer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, knowledge graph and gazetteer.
    GenSynthetic(GenArgs),
    /// Train TransE entity embeddings on a triples file.
    TrainKg(KgArgs),
    /// Train the summarizer on a JSON-lines corpus.
    TrainSum(TrainArgs),
    /// Beam-search summaries for every article of a corpus.
    Summarize(SummarizeArgs),
    /// Score candidate/reference pairs with ROUGE-1/2/L.
    EvalRouge(RougeArgs),
    /// Train the four entity/backbone configurations on the lookup task.
    RunAblation(AblationArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Base settings.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// key=value overrides applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut rc = RunConfig::preset(preset);
        if let Some(p) = &self.config {
            rc.apply_file(p)?;
        }
        Ok(rc)
    }
}

#[derive(Args)]
struct GenArgs {
    /// copy or entity_lookup
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    n_relations: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct KgArgs {
    #[arg(long)]
    triples: PathBuf,
    #[arg(long)]
    names: Option<PathBuf>,
    /// Entity embedding table (TSV).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss trace (CSV).
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// Pretrained entity table; required for entity_mode=kg.
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines corpus; summaries become the references.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// JSON lines of candidate/reference pairs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct RougeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AblationArgs {
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Directory written by gen-synthetic; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the generated lookup corpus.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// key=value overrides of the ablation's toy settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(e.to_string()))
}

fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let mut spec = match task {
        Task::Copy => SyntheticTaskSpec::copy(32, a.seed),
        Task::EntityLookup => SyntheticTaskSpec::entity_lookup(a.seed),
    };
    spec.n_entities = a.n_entities.unwrap_or(spec.n_entities);
    spec.n_relations = a.n_relations.unwrap_or(spec.n_relations);
    spec.n_train = a.n_train.unwrap_or(spec.n_train);
    spec.n_heldout = a.n_heldout.unwrap_or(spec.n_heldout);
    spec.vocab_size = a.vocab_size.unwrap_or(spec.vocab_size);
    let data = generate(&spec)?;
    data.write(&a.out)?;
    println!(
        "wrote {} train / {} valid pairs, {} triples to {}",
        data.train.len(),
        data.valid.len(),
        data.kg.triples.len(),
        a.out.display()
    );
    Ok(())
}

fn train_kg(a: &KgArgs) -> Result<()> {
    let kg = KnowledgeGraph::load(&a.triples, a.names.as_deref())?;
    let cfg = TransEConfig {
        d_ent: a.dim,
        gamma: a.gamma,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let run = transe_train::<f64>(&kg, &cfg)?;
    write(&a.out, export_entities(&run.embeddings.entity_vectors))?;
    if let Some(p) = &a.loss_out {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in run.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{:.16e}\n", i + 1, l));
        }
        write(p, s)?;
    }
    let lp = link_prediction_eval(&kg, &run.embeddings, 1);
    let (first, last) = (run.epoch_losses.first(), run.epoch_losses.last());
    if let (Some(f), Some(l)) = (first, last) {
        println!("epoch loss {f:.6} -> {l:.6} (ratio {:.4})", l / f);
    }
    println!(
        "hits@1 {:.3}, mean rank {:.3}, max norm error {:.1e}",
        lp.hits_at_k, lp.mean_rank, run.max_norm_error
    );
    Ok(())
}

fn load_gazetteer(p: Option<&Path>) -> Result<Option<Gazetteer>> {
    p.map(Gazetteer::load).transpose()
}

fn train_sum(a: &TrainArgs) -> Result<()> {
    let mut rc = a.cfg.load()?;
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    rc.validate()?;
    let pairs = load_corpus(&a.train)?;
    let gaz = load_gazetteer(a.gazetteer.as_deref())?;
    let seed = rc.train.seed;
    let table: Option<Tensor<f64>> = match rc.model.entity_mode {
        EntityMode::Off => None,
        EntityMode::Kg => {
            let p = a
                .entities
                .as_ref()
                .ok_or_else(|| Error::config("entity_mode=kg needs --entities"))?;
            Some(load_entities(p)?)
        }
        EntityMode::Random => {
            let count = match &a.entities {
                Some(p) => load_entities::<f64>(p)?.rows(),
                None => gaz
                    .as_ref()
                    .and_then(Gazetteer::max_entity_id)
                    .map_or(0, |m| m + 1),
            };
            Some(random_entity_table(count, rc.model.d_ent, seed))
        }
    };
    if let (Some(g), Some(t)) = (&gaz, &table) {
        g.check_ids(t.rows())?;
    }
    let vocab = build_vocab(&pairs, rc.train.vocab_min_count);
    let mut model = Summarizer::new(rc.model.clone(), vocab, table, seed)?;
    let t = &rc.train;
    let examples = prepare_corpus(&model, &pairs, gaz.as_ref(), t.max_src, t.max_tgt_train, rc.decode.entity_min_tokens)?;
    let losses = train_summarizer(&mut model, &examples, t)?;
    model.save(&a.out)?;
    if let Some(p) = &a.loss_out {
        write(p, loss_csv(&losses))?;
    }
    let tail = &losses[losses.len().saturating_sub(50)..];
    if !tail.is_empty() {
        println!(
            "{} steps, mean loss of the last {} steps {:.6}",
            losses.len(),
            tail.len(),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    println!("train token accuracy {:.4}", token_accuracy(&model, &examples)?);
    if let Some(v) = &a.valid {
        let valid = prepare_corpus(&model, &load_corpus(v)?, gaz.as_ref(), t.max_src, t.max_tgt_eval, rc.decode.entity_min_tokens)?;
        if !valid.is_empty() {
            println!(
                "valid loss {:.6}, token accuracy {:.4}",
                mean_loss(&model, &valid)?,
                token_accuracy(&model, &valid)?
            );
        }
    }
    Ok(())
}

fn summarize_cmd(a: &SummarizeArgs) -> Result<()> {
    let rc = a.cfg.load()?;
    rc.decode.validate()?;
    let model = Summarizer::<f64>::load(&a.checkpoint)?;
    let pairs = load_corpus(&a.input)?;
    let gaz = load_gazetteer(a.gazetteer.as_deref())?;
    let empty = Gazetteer::new();
    let run = |p: &kgxl::train::Pair| -> Result<ScoringPair> {
        let doc = LinkedDocument::link(tokenize(&p.article), gaz.as_ref().unwrap_or(&empty));
        let words = summarize(&model, &doc, gaz.as_ref(), rc.train.max_src, &rc.decode)?;
        Ok(ScoringPair {
            candidate: words.join(" "),
            reference: p.summary.clone(),
        })
    };
    let out: Vec<ScoringPair> = pool(a.jobs)?.install(|| pairs.par_iter().map(run).collect::<Result<_>>())?;
    let body: String = out
        .iter()
        .map(|p| serde_json::to_string(p).expect("strings serialize") + "\n")
        .collect();
    write(&a.out, body)?;
    println!("wrote {} summaries to {}", out.len(), a.out.display());
    Ok(())
}

fn eval_rouge(a: &RougeArgs) -> Result<()> {
    let pairs = load_pairs(&a.input)?;
    let scores: Vec<_> = pool(a.jobs)?.install(|| pairs.par_iter().map(score_pair).collect());
    let csv = scores_csv(&scores);
    write(&a.out, &csv)?;
    if let Some(mean) = csv.lines().last() {
        println!("{} pairs; {mean}", scores.len());
    }
    Ok(())
}

fn ablation_cmd(a: &AblationArgs) -> Result<()> {
    let data = match &a.data {
        Some(dir) => SyntheticData::load(dir)?,
        None => generate(&SyntheticTaskSpec::lookup_ablation(a.data_seed))?,
    };
    let mut setup = AblationSetup::toy();
    if let Some(p) = &a.config {
        let mut rc = RunConfig {
            model: setup.model.clone(),
            train: setup.train.clone(),
            decode: setup.decode.clone(),
        };
        rc.apply_file(p)?;
        setup.model = rc.model;
        setup.train = rc.train;
        setup.decode = rc.decode;
        setup.transe.d_ent = setup.model.d_ent;
    }
    if let Some(s) = a.steps {
        setup.train.steps = s;
    }
    let results = run_ablation(&data, &setup, &a.seeds)?;
    write(&a.out, ablation_csv(&results))?;
    for v in &VARIANTS {
        let (m, sd) = summary(&results, v.name);
        println!("{:<15} team-token accuracy {m:.3} ± {sd:.3}", v.name);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::TrainKg(a) => train_kg(a),
        Command::TrainSum(a) => train_sum(a),
        Command::Summarize(a) => summarize_cmd(a),
        Command::EvalRouge(a) => eval_rouge(a),
        Command::RunAblation(a) => ablation_cmd(a),
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
