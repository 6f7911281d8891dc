//! Command-line entry point: data preparation, training, generation,
//! evaluation, retrieval-augmented explanation and aspect analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use maple::corpus::{
    build_feature_index, prune_and_split, segment_review, train_pair_set, AspectInventory,
    FeatureIndex, ReviewRecord, Sentiment, SentimentTuple, SplitDataset, SplitOptions,
    TrainingExample, WhitespaceTokenizer,
};
use maple::inference::{InferenceEngine, Strategy};
use maple::metrics::{
    aspect_ranking_metrics, compute_report, export_embeddings_tsv, latent_metrics,
    nearest_features, EvalCorpus, EvalPair,
};
use maple::model::{MapleModel, ModelConfig};
use maple::rag::{
    explain_with_reader, CannedReader, EchoReader, HashingEncoder, PoolScope, Reader, ReviewPool,
};
use maple::training::{dedup_pairs, history_to_jsonl, train_stage1, train_stage2, TrainConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING_CHECKPOINT: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    MissingCheckpoint(PathBuf),
    Data(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
            CliError::Data(_) => EXIT_DATA,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config error: {m}"),
            CliError::MissingCheckpoint(p) => format!("missing checkpoint: {}", p.display()),
            CliError::Data(m) => format!("data error: {m}"),
            CliError::Other(m) => m.clone(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "maple", about = "Aspect-controlled explanation generation", version)]
struct Cli {
    /// TOML config file; flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// validate the configuration and exit
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// raw reviews JSONL
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// working directory for folds, checkpoints and reports
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// supervised | heuristic | gt
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Segment raw reviews and build pruned warm-start folds
    PrepareData,
    /// Two-stage training on one fold
    Train,
    /// Batch explanation generation for the fold's test pairs
    Generate,
    /// Metrics report for a generations file
    Evaluate,
    /// Retriever-reader explanation for one user-item pair
    RagExplain {
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        /// echo | canned:<text>
        #[arg(long, default_value = "echo")]
        reader: String,
    },
    /// Nearest feature words per aspect category plus a TSV embedding export
    AnalyzeAspects,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    paths: PathsConfig,
    #[serde(default)]
    corpus: CorpusConfig,
    #[serde(default)]
    model: ModelFileConfig,
    #[serde(default)]
    train: TrainFileConfig,
    #[serde(default)]
    inference: InferenceConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathsConfig {
    data: PathBuf,
    work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/toy_reviews.jsonl"),
            work_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusConfig {
    min_interactions: usize,
    folds: usize,
    seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_interactions: 5,
            folds: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFileConfig {
    d: usize,
    layers: usize,
    heads: usize,
    ff_mult: usize,
    head_hidden: Vec<usize>,
    max_len: usize,
}

impl Default for ModelFileConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy();
        Self {
            d: toy.d,
            layers: toy.layers,
            heads: toy.heads,
            ff_mult: toy.ff_mult,
            head_hidden: toy.head_hidden,
            max_len: toy.max_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainFileConfig {
    lr: f64,
    batch_size: usize,
    stage1_max_epochs: usize,
    stage1_patience: usize,
    stage2_max_epochs: usize,
    stage2_patience: usize,
    alpha: f64,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            stage1_max_epochs: t.stage1_max_epochs,
            stage1_patience: t.stage1_patience,
            stage2_max_epochs: t.stage2_max_epochs,
            stage2_patience: t.stage2_patience,
            alpha: t.alpha,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InferenceConfig {
    strategy: String,
    k: usize,
    retrieval_k: usize,
    encoder_dim: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            strategy: "supervised".into(),
            k: 3,
            retrieval_k: 10,
            encoder_dim: 256,
        }
    }
}

/// Fully resolved configuration: file values with CLI overrides applied.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    paths: PathsConfig,
    corpus: CorpusConfig,
    model: ModelFileConfig,
    train: TrainFileConfig,
    inference: InferenceConfig,
    fold: usize,
    seed: u64,
}

impl RunConfig {
    fn resolve(file: FileConfig, ov: &Overrides) -> Result<Self, CliError> {
        let mut config = RunConfig {
            seed: file.corpus.seed,
            paths: file.paths,
            corpus: file.corpus,
            model: file.model,
            train: file.train,
            inference: file.inference,
            fold: 0,
        };
        if let Some(data) = &ov.data {
            config.paths.data = data.clone();
        }
        if let Some(work) = &ov.work_dir {
            config.paths.work_dir = work.clone();
        }
        if let Some(fold) = ov.fold {
            config.fold = fold;
        }
        if let Some(seed) = ov.seed {
            config.seed = seed;
            config.corpus.seed = seed;
        }
        if let Some(s) = &ov.strategy {
            config.inference.strategy = s.clone();
        }
        if let Some(k) = ov.k {
            config.inference.k = k;
        }
        if config.fold >= config.corpus.folds {
            return Err(CliError::Config(format!(
                "fold {} out of range [0, {})",
                config.fold, config.corpus.folds
            )));
        }
        if config.model.d % config.model.heads != 0 {
            return Err(CliError::Config(format!(
                "heads {} must divide d {}",
                config.model.heads, config.model.d
            )));
        }
        parse_strategy(&config.inference.strategy, config.inference.k)?;
        Ok(config)
    }

    fn fold_dir(&self) -> PathBuf {
        self.paths.work_dir.join(format!("fold{}", self.fold))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.fold_dir().join("model.json")
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            layers: self.model.layers,
            heads: self.model.heads,
            ff_mult: self.model.ff_mult,
            head_hidden: self.model.head_hidden.clone(),
            max_len: self.model.max_len,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            stage1_max_epochs: self.train.stage1_max_epochs,
            stage1_patience: self.train.stage1_patience,
            stage2_max_epochs: self.train.stage2_max_epochs,
            stage2_patience: self.train.stage2_patience,
            alpha: self.train.alpha,
            max_seq_len: self.model.max_len,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

fn parse_strategy(name: &str, k: usize) -> Result<Strategy, CliError> {
    match name {
        "supervised" => Ok(Strategy::Supervised(k)),
        "heuristic" => Ok(Strategy::Heuristic(k)),
        "gt" => Ok(Strategy::GroundTruth),
        other => Err(CliError::Config(format!(
            "unknown strategy {other:?}; expected supervised, heuristic or gt"
        ))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maple: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => FileConfig::default(),
    };
    let config = RunConfig::resolve(file, &cli.overrides)?;
    if cli.dry_run {
        if !config.paths.data.exists() {
            return Err(CliError::Config(format!(
                "data file {} does not exist",
                config.paths.data.display()
            )));
        }
        println!("config ok");
        return Ok(());
    }
    match cli.command {
        Command::PrepareData => prepare_data(&config),
        Command::Train => train(&config),
        Command::Generate => generate(&config),
        Command::Evaluate => evaluate(&config),
        Command::RagExplain { user, item, reader } => rag_explain(&config, &user, &item, &reader),
        Command::AnalyzeAspects => analyze_aspects(&config),
    }
}

// ---------- raw data ----------

#[derive(Debug, Deserialize)]
struct RawTuple {
    aspect_term: String,
    opinion: String,
    sentiment: Sentiment,
    category: String,
}

#[derive(Debug, Deserialize)]
struct RawReview {
    user: String,
    item: String,
    text: String,
    tuples: Vec<RawTuple>,
}

fn read_raw_reviews(path: &Path) -> Result<Vec<RawReview>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawReview = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("line {}: {e}", lineno + 1)))?;
        out.push(raw);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{} holds no reviews", path.display())));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut file = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut file, row).map_err(|e| CliError::Other(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(e.to_string()))?);
    }
    Ok(out)
}

// ---------- prepare-data ----------

fn prepare_data(config: &RunConfig) -> Result<(), CliError> {
    let raw = read_raw_reviews(&config.paths.data)?;
    let mut names: BTreeSet<String> = BTreeSet::new();
    for r in &raw {
        for t in &r.tuples {
            names.insert(t.category.clone());
        }
    }
    let inventory = AspectInventory::new(names.into_iter().collect())
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut records: Vec<ReviewRecord> = Vec::new();
    for r in &raw {
        let tuples: Vec<SentimentTuple> = r
            .tuples
            .iter()
            .filter_map(|t| {
                inventory.id_of(&t.category).map(|c| SentimentTuple {
                    aspect_term: t.aspect_term.clone(),
                    opinion: t.opinion.clone(),
                    sentiment: t.sentiment,
                    category: c,
                })
            })
            .collect();
        records.push(segment_review(&r.user, &r.item, &r.text, tuples));
    }

    let options = SplitOptions {
        min_interactions: config.corpus.min_interactions,
        folds: config.corpus.folds,
        seed: config.seed,
        ..SplitOptions::default()
    };
    let folds = prune_and_split(&records, &options).map_err(|e| CliError::Data(e.to_string()))?;

    fs::create_dir_all(&config.paths.work_dir)?;
    fs::write(
        config.paths.work_dir.join("inventory.json"),
        serde_json::to_string_pretty(&inventory).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    for (split, manifest) in &folds {
        let dir = config.paths.work_dir.join(format!("fold{}", split.fold_id));
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("train.jsonl"), &split.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &split.valid)?;
        write_jsonl(&dir.join("test.jsonl"), &split.test)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(manifest).map_err(|e| CliError::Other(e.to_string()))?,
        )?;
        let train_pairs = train_pair_set(split);
        let train_records: Vec<ReviewRecord> = records
            .iter()
            .filter(|r| train_pairs.contains(&(r.user.clone(), r.item.clone())))
            .cloned()
            .collect();
        let features = build_feature_index(&train_records, &inventory);
        fs::write(
            dir.join("features.json"),
            serde_json::to_string_pretty(&features).map_err(|e| CliError::Other(e.to_string()))?,
        )?;
        println!(
            "fold {}: {} train / {} valid / {} test examples",
            split.fold_id,
            split.train.len(),
            split.valid.len(),
            split.test.len()
        );
    }
    Ok(())
}

// ---------- shared loaders ----------

fn load_inventory(config: &RunConfig) -> Result<AspectInventory, CliError> {
    let path = config.paths.work_dir.join("inventory.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e} (run prepare-data first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))
}

fn load_fold(config: &RunConfig) -> Result<SplitDataset, CliError> {
    let dir = config.fold_dir();
    let train: Vec<TrainingExample> = read_jsonl(&dir.join("train.jsonl"))?;
    let valid: Vec<TrainingExample> = read_jsonl(&dir.join("valid.jsonl"))?;
    let test: Vec<TrainingExample> = read_jsonl(&dir.join("test.jsonl"))?;
    let mut user_history: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut item_history: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for ex in &train {
        user_history.entry(ex.user.clone()).or_default().insert(ex.category);
        item_history.entry(ex.item.clone()).or_default().insert(ex.category);
    }
    Ok(SplitDataset {
        fold_id: config.fold,
        train,
        valid,
        test,
        user_history,
        item_history,
    })
}

fn load_features(config: &RunConfig) -> Result<FeatureIndex, CliError> {
    let path = config.fold_dir().join("features.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))
}

fn load_checkpoint(config: &RunConfig) -> Result<MapleModel, CliError> {
    let path = config.checkpoint_path();
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path));
    }
    MapleModel::load(&path).map_err(|e| CliError::Other(e.to_string()))
}

fn ids_of(split: &SplitDataset) -> (Vec<String>, Vec<String>) {
    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    for ex in split.train.iter().chain(&split.valid).chain(&split.test) {
        users.insert(ex.user.clone());
        items.insert(ex.item.clone());
    }
    (users.into_iter().collect(), items.into_iter().collect())
}

// ---------- train ----------

fn train(config: &RunConfig) -> Result<(), CliError> {
    let inventory = load_inventory(config)?;
    let mut split = load_fold(config)?;
    if split.train.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    let tokenizer = WhitespaceTokenizer::fit(split.train.iter().map(|e| e.text.as_str()));
    split.tokenize(&tokenizer, config.model.max_len);
    let (users, items) = ids_of(&split);
    let mut model = MapleModel::new(
        inventory.clone(),
        tokenizer,
        users,
        items,
        config.model_config(),
        config.seed,
    );
    let train_config = config.train_config();
    let h1 = train_stage1(&mut model, &split.train, &split.valid, &train_config)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!(
        "stage 1: {} epochs, best valid L_T {:.4}",
        h1.len(),
        h1.iter().map(|r| r.valid_lt).fold(f64::INFINITY, f64::min)
    );
    let stage2 = dedup_pairs(&split.train, inventory.n_aspect());
    let h2 = train_stage2(&mut model, &stage2, &split.valid, &train_config)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!(
        "stage 2: {} epochs, best valid L_DB {:.4}",
        h2.len(),
        h2.iter()
            .filter_map(|r| r.valid_ldb)
            .fold(f64::INFINITY, f64::min)
    );
    let dir = config.fold_dir();
    fs::create_dir_all(&dir)?;
    let mut history = h1;
    history.extend(h2);
    fs::write(dir.join("history.jsonl"), history_to_jsonl(&history) + "\n")?;
    model
        .save(&config.checkpoint_path())
        .map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(
        dir.join("train_manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "seed": config.seed,
            "fold": config.fold,
            "config": config,
        }))
        .map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    println!("checkpoint written to {}", config.checkpoint_path().display());
    Ok(())
}

// ---------- generate ----------

#[derive(Debug, Serialize, Deserialize)]
struct GenerationRow {
    user: String,
    item: String,
    strategy: String,
    chosen: Vec<usize>,
    text: String,
}

fn generate(config: &RunConfig) -> Result<(), CliError> {
    let model = load_checkpoint(config)?;
    let split = load_fold(config)?;
    let strategy = parse_strategy(&config.inference.strategy, config.inference.k)?;
    let engine = InferenceEngine::new(&model, split.user_history.clone(), split.item_history.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut rows = Vec::new();
    match strategy {
        Strategy::GroundTruth => {
            for ex in &split.test {
                let (sel, out) = engine
                    .explain(
                        &ex.user,
                        &ex.item,
                        strategy,
                        Some(ex.category),
                        config.model.max_len,
                        &mut rng,
                    )
                    .map_err(|e| CliError::Other(e.to_string()))?;
                rows.push(GenerationRow {
                    user: ex.user.clone(),
                    item: ex.item.clone(),
                    strategy: config.inference.strategy.clone(),
                    chosen: sel.chosen,
                    text: out.text,
                });
            }
        }
        _ => {
            let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
            for ex in &split.test {
                if !seen.insert((ex.user.clone(), ex.item.clone())) {
                    continue;
                }
                let (sel, out) = engine
                    .explain(&ex.user, &ex.item, strategy, None, config.model.max_len, &mut rng)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                rows.push(GenerationRow {
                    user: ex.user.clone(),
                    item: ex.item.clone(),
                    strategy: config.inference.strategy.clone(),
                    chosen: sel.chosen,
                    text: out.text,
                });
            }
        }
    }
    let path = config.fold_dir().join("generations.jsonl");
    write_jsonl(&path, &rows)?;
    println!("{} generations written to {}", rows.len(), path.display());
    Ok(())
}

// ---------- evaluate ----------

fn evaluate(config: &RunConfig) -> Result<(), CliError> {
    let split = load_fold(config)?;
    let features = load_features(config)?;
    let inventory = load_inventory(config)?;
    let gen_path = config.fold_dir().join("generations.jsonl");
    let rows: Vec<GenerationRow> = read_jsonl(&gen_path)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} holds no generations", gen_path.display())));
    }

    let mut by_pair: BTreeMap<(String, String), Vec<&TrainingExample>> = BTreeMap::new();
    for ex in &split.test {
        by_pair
            .entry((ex.user.clone(), ex.item.clone()))
            .or_default()
            .push(ex);
    }
    let mut pairs = Vec::new();
    for row in &rows {
        let key = (row.user.clone(), row.item.clone());
        let Some(examples) = by_pair.get(&key) else {
            return Err(CliError::Data(format!(
                "generation for unknown test pair ({}, {})",
                row.user, row.item
            )));
        };
        let mut gt_features: BTreeSet<String> = BTreeSet::new();
        let mut gt_categories: BTreeSet<usize> = BTreeSet::new();
        for ex in examples {
            gt_features.extend(ex.gt_features.iter().cloned());
            gt_categories.insert(ex.category);
        }
        pairs.push(EvalPair {
            user: row.user.clone(),
            item: row.item.clone(),
            generated: row.text.clone(),
            references: examples.iter().map(|e| e.text.clone()).collect(),
            gt_features: gt_features.into_iter().collect(),
            gt_categories,
        });
    }
    let corpus = EvalCorpus {
        pairs,
        features,
        inventory,
    };
    let mut report = compute_report(&corpus);

    // aspect ranking from the trained head, when a checkpoint is around
    if config.checkpoint_path().exists() {
        let model = load_checkpoint(config)?;
        let mut predictions = Vec::new();
        let mut truths = Vec::new();
        for pair in &corpus.pairs {
            let scores = model
                .aspect_scores(&pair.user, &pair.item)
                .map_err(|e| CliError::Other(e.to_string()))?
                .scores;
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            predictions.push(order);
            truths.push(pair.gt_categories.clone());
        }
        let ranking = aspect_ranking_metrics(&predictions, &truths, config.inference.k);
        report.hr_at_k = Some(ranking.hr_at_k);
        report.f1 = Some(ranking.f1);
    }

    let encoder = HashingEncoder::new(config.inference.encoder_dim);
    let gens: Vec<String> = corpus.pairs.iter().map(|p| p.generated.clone()).collect();
    let refs: Vec<String> = corpus
        .pairs
        .iter()
        .map(|p| p.references.first().cloned().unwrap_or_default())
        .collect();
    let latent = latent_metrics(&gens, &refs, &encoder);
    report.latent_mse = Some(latent.mse);
    report.latent_cosine = Some(latent.cosine);

    let dir = config.fold_dir();
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(dir.join("report.txt"), report.render_table())?;
    print!("{}", report.render_table());
    Ok(())
}

// ---------- rag-explain ----------

fn rag_explain(config: &RunConfig, user: &str, item: &str, reader_spec: &str) -> Result<(), CliError> {
    let model = load_checkpoint(config)?;
    let split = load_fold(config)?;
    let strategy = parse_strategy(&config.inference.strategy, config.inference.k)?;
    let reader: Box<dyn Reader> = match reader_spec {
        "echo" => Box::new(EchoReader),
        other => match other.strip_prefix("canned:") {
            Some(text) => Box::new(CannedReader(text.to_string())),
            None => {
                return Err(CliError::Config(format!(
                    "unknown reader {other:?}; expected echo or canned:<text>"
                )))
            }
        },
    };

    let dedup_texts = |texts: Vec<String>| {
        let mut seen = BTreeSet::new();
        texts.into_iter().filter(|t| seen.insert(t.clone())).collect::<Vec<_>>()
    };
    let user_texts = dedup_texts(
        split
            .train
            .iter()
            .filter(|e| e.user == user)
            .map(|e| e.text.clone())
            .collect(),
    );
    let item_texts = dedup_texts(
        split
            .train
            .iter()
            .filter(|e| e.item == item)
            .map(|e| e.text.clone())
            .collect(),
    );
    if user_texts.is_empty() || item_texts.is_empty() {
        return Err(CliError::Data(format!(
            "no training reviews for user {user:?} or item {item:?}"
        )));
    }
    let encoder = HashingEncoder::new(config.inference.encoder_dim);
    let user_pool = ReviewPool::build(PoolScope::User, user_texts, &encoder);
    let item_pool = ReviewPool::build(PoolScope::Item, item_texts, &encoder);
    let engine = InferenceEngine::new(&model, split.user_history.clone(), split.item_history.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ground_truth = split
        .test
        .iter()
        .chain(&split.valid)
        .find(|e| e.user == user && e.item == item)
        .map(|e| e.category);
    let transcript = explain_with_reader(
        &engine,
        user,
        item,
        strategy,
        ground_truth,
        config.model.max_len,
        &user_pool,
        &item_pool,
        config.inference.retrieval_k,
        &encoder,
        reader.as_ref(),
        &mut rng,
    )
    .map_err(|e| CliError::Other(e.to_string()))?;
    let path = config.fold_dir().join("rag_transcript.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&transcript).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    println!("query: {}", transcript.query);
    println!("reader: {}", transcript.reader_output);
    println!("transcript written to {}", path.display());
    Ok(())
}

// ---------- analyze-aspects ----------

fn analyze_aspects(config: &RunConfig) -> Result<(), CliError> {
    let model = load_checkpoint(config)?;
    let features = load_features(config)?;
    for c in 0..model.inventory.n_aspect() {
        let ranked = nearest_features(&model, &features, c, 20);
        let shown: Vec<String> = ranked
            .iter()
            .map(|(f, s)| format!("{f} ({s:.3})"))
            .collect();
        println!("{}: {}", model.inventory.name(c), shown.join(", "));
    }
    let tsv = export_embeddings_tsv(&model, &features);
    let path = config.fold_dir().join("embeddings.tsv");
    fs::write(&path, tsv)?;
    println!("embeddings written to {}", path.display());
    Ok(())
}
