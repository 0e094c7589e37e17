//! Command-line front end: data generation, training, evaluation,
//! prediction and graph inspection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::artifact::{self, ArtifactError, DevScore, Selection};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, Label, SyntheticConfig};
use crate::distill::{self, DistillError, ModelBundle};
use crate::encoder::EncoderError;
use crate::evalkit::{self, EvalError, Report};
use crate::hetgraph::{self, GraphOptions, NodeKind};
use crate::model::{Instance, ModelKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Train(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hgsr", version, about = "Simile recognition over heterogeneous sentence graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSON Lines corpus.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Probability of replacing a filler word with a noise word.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train the model bundle and write a run directory.
    Train(TrainArgs),
    /// Score the selected model on an annotated corpus.
    Evaluate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also report mean and std over this many disjoint partitions.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Write one prediction per input sentence as JSON Lines.
    Predict {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print node and edge counts for one sentence and optionally write DOT.
    InspectGraph {
        #[arg(long)]
        input: PathBuf,
        /// 0-based sentence index in the input file.
        #[arg(long)]
        index: usize,
        #[arg(long)]
        dot_out: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphFlags,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct GraphFlags {
    #[arg(long)]
    pub no_dependency: bool,
    #[arg(long)]
    pub no_pos: bool,
    #[arg(long)]
    pub no_subsentence_nodes: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "HGSR_OUT_DIR")]
    pub out_dir: PathBuf,
    #[arg(long, env = "HGSR_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub graph: GraphFlags,
    #[arg(long)]
    pub no_definitions: bool,
    /// Drop a model from the bundle (p, t or v); repeatable.
    #[arg(long, value_name = "KIND")]
    pub disable_model: Vec<ModelKind>,
}

impl TrainArgs {
    /// File values, then flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            c.train.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            c.train.adam.lr = lr;
        }
        let a = &mut c.ablation;
        a.no_dependency |= self.graph.no_dependency;
        a.no_pos |= self.graph.no_pos;
        a.no_subsentence_nodes |= self.graph.no_subsentence_nodes;
        a.no_definitions |= self.no_definitions;
        for k in &self.disable_model {
            if !a.disable_model.contains(k) {
                a.disable_model.push(*k);
            }
        }
        c.train.validate()?;
        c.model_config().encoder.validate()?;
        c.enabled_models()?;
        Ok(c)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs one command; machine output goes to `out`, progress to the log.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenerateData { out: path, n, seed, noise } => generate_data(&path, n, seed, noise, out),
        Command::Train(args) => train(&args, out),
        Command::Evaluate { model_dir, data, folds } => evaluate(&model_dir, &data, folds, out),
        Command::Predict { model_dir, input, out: path } => predict(&model_dir, &input, &path, out),
        Command::InspectGraph {
            input,
            index,
            dot_out,
            graph,
        } => inspect_graph(&input, index, dot_out.as_deref(), &graph, out),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    io_at(Path::new("<stdout>"))(e)
}

fn generate_data(path: &Path, n: usize, seed: u64, noise: f64, out: &mut dyn Write) -> Result<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let data = corpus::generate_synthetic(&SyntheticConfig {
        n_sentences: n,
        seed,
        noise_rate: noise,
    })?;
    let mut w = create(path)?;
    corpus::write_corpus(&mut w, &data).map_err(io_at(path))?;
    w.flush().map_err(io_at(path))?;
    let similes = data.iter().filter(|s| s.label == Label::Simile).count();
    writeln!(
        out,
        "wrote {} sentences to {}: simile {} literal {}",
        data.len(),
        path.display(),
        similes,
        data.len() - similes
    )
    .map_err(stdout_err)
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = args.resolve()?;
    let train_set = corpus::load_corpus_with(&args.train, &config.graph_options().noun_tags)?;
    let dev_set = corpus::load_corpus_with(&args.dev, &config.graph_options().noun_tags)?;
    let vocab = corpus::build_vocab(&train_set, config.min_freq)?;
    let opts = config.graph_options();
    let train_inst = Instance::prepare(&train_set, &vocab, &opts);
    let dev_inst = Instance::prepare(&dev_set, &vocab, &opts);
    let kinds = config.enabled_models()?;
    log::info!(
        "training {:?} on {} sentences, dev {}, vocabulary {}",
        kinds,
        train_inst.len(),
        dev_inst.len(),
        vocab.len()
    );
    let mut bundle = ModelBundle::new(&kinds, &config.model_config(), vocab.len(), config.train.seed)?;
    let outcome = distill::train(&mut bundle, &train_inst, &dev_inst, &config.train, |e| log::info!("{e}"))?;
    let (chosen, reports) = distill::select_best(&bundle, &dev_inst)?;
    let selection = Selection {
        model: chosen,
        dev: reports
            .into_iter()
            .map(|(model, report)| DevScore { model, report })
            .collect(),
    };
    artifact::save_run(&args.out_dir, &config, &vocab, &bundle, &outcome.log, &selection)?;
    writeln!(out, "{}", serde_json::to_string(&selection).expect("selection serializes")).map_err(stdout_err)?;
    for d in &selection.dev {
        log::info!(
            "model {} dev classification F1 {:.4} extraction F1 {:.4}",
            d.model,
            d.report.classification.f1,
            d.report.extraction.f1
        );
    }
    log::info!("selected model {} written to {}", chosen, args.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput {
    model: ModelKind,
    report: Report,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<FoldOutput>,
}

#[derive(Serialize)]
struct FoldOutput {
    k: usize,
    classification: evalkit::FoldSummary,
    extraction: evalkit::FoldSummary,
}

fn evaluate(model_dir: &Path, data: &Path, folds: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let loaded = artifact::load_selected(model_dir)?;
    let opts = loaded.config.graph_options();
    let sentences = corpus::load_corpus_with(data, &opts.noun_tags)?;
    let inst = Instance::prepare(&sentences, &loaded.vocab, &opts);
    let report = distill::evaluate_model(&loaded.model, &inst)?;
    let folds = match folds {
        None => None,
        Some(k) => {
            let parts = corpus::split_folds(&inst, k, loaded.config.train.seed)?;
            let mut cls = Vec::with_capacity(k);
            let mut ext = Vec::with_capacity(k);
            for part in &parts {
                let r = distill::evaluate_model(&loaded.model, &part.test)?;
                cls.push(r.classification);
                ext.push(r.extraction);
            }
            Some(FoldOutput {
                k,
                classification: evalkit::aggregate_folds(&cls)?,
                extraction: evalkit::aggregate_folds(&ext)?,
            })
        }
    };
    let result = EvaluationOutput {
        model: loaded.model.kind,
        report,
        folds,
    };
    writeln!(out, "{}", serde_json::to_string(&result).expect("report serializes")).map_err(stdout_err)?;
    write!(out, "{}", report.to_table()).map_err(stdout_err)?;
    if let Some(f) = &result.folds {
        writeln!(out, "{} partitions:", f.k).map_err(stdout_err)?;
        write!(out, "{}", evalkit::summary_table(&f.classification, &f.extraction)).map_err(stdout_err)?;
    }
    Ok(())
}

fn predict(model_dir: &Path, input: &Path, path: &Path, out: &mut dyn Write) -> Result<()> {
    let loaded = artifact::load_selected(model_dir)?;
    let opts = loaded.config.graph_options();
    let sentences = corpus::load_unlabeled(input, &opts.noun_tags)?;
    let mut w = create(path)?;
    let mut similes = 0;
    for s in sentences.iter() {
        let inst = Instance::new(s.clone(), &loaded.vocab, &opts);
        let p = loaded.model.predict(&inst)?;
        if p.label == Label::Simile {
            similes += 1;
        }
        writeln!(w, "{}", serde_json::to_string(&p).expect("prediction serializes")).map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))?;
    writeln!(
        out,
        "model {} wrote {} predictions ({} simile) to {}",
        loaded.model.kind,
        sentences.len(),
        similes,
        path.display()
    )
    .map_err(stdout_err)
}

fn inspect_graph(
    input: &Path,
    index: usize,
    dot_out: Option<&Path>,
    flags: &GraphFlags,
    out: &mut dyn Write,
) -> Result<()> {
    let opts = GraphOptions {
        no_dependency: flags.no_dependency,
        no_pos: flags.no_pos,
        no_subsentence_nodes: flags.no_subsentence_nodes,
        ..GraphOptions::default()
    };
    let sentences = corpus::load_unlabeled(input, &opts.noun_tags)?;
    let sentence = sentences.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "index {index} out of range for {} sentences",
            sentences.len()
        ))
    })?;
    let vocab = corpus::build_vocab(&sentences, 1)?;
    let graph = hetgraph::build_graph_with(sentence, &vocab, &opts);
    writeln!(out, "{}", node_summary(&graph)).map_err(stdout_err)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &graph.edges {
        *counts.entry(graph.label_name(e.label)).or_default() += 1;
    }
    for (label, n) in &counts {
        writeln!(out, "{label:<12} {n}").map_err(stdout_err)?;
    }
    if let Some(path) = dot_out {
        let mut w = create(path)?;
        w.write_all(hetgraph::to_dot(&graph, sentence).as_bytes())
            .and_then(|_| w.flush())
            .map_err(io_at(path))?;
    }
    Ok(())
}

/// `noun:2 non-noun:4 subsentence:2`
pub fn node_summary(graph: &hetgraph::HeteroGraph) -> String {
    [NodeKind::Noun, NodeKind::NonNoun, NodeKind::Subsentence]
        .iter()
        .map(|k| format!("{}:{}", k.name(), graph.count_kind(*k)))
        .collect::<Vec<_>>()
        .join(" ")
}
