//! End-to-end orchestration: synth (or load) → pairgen → label → train →
//! held-out evaluation → distribution analysis.
//!
//! Every artifact is written to `<name>.partial` first and renamed once
//! complete, so a failed stage leaves its partial output behind under that
//! suffix.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::adapter::{self, AdapterModel, TargetKind, TrainConfig, TrainError, TrainReport};
use crate::corpus::{CorpusError, DatasetSplit, EmbeddingMatrix, TextCollection};
use crate::evalkit::report::{self, KlRow, MetricRow};
use crate::evalkit::trec;
use crate::evalkit::{
    aggregate_report, heldout_run, intra_inter, map_at_k, mrr_at_k, ndcg_at_k, pairwise_similarities, pr_curve,
    similarity_histogram, symmetric_kl, EvalError, PRCurve, ThresholdSweep, DEFAULT_BINS,
};
use crate::experts::{self, ExpertPanel, LabelError};
use crate::pairgen::{self, PairRecord, PairgenError};
use crate::seed::derive_seed;
use crate::synth::{self, SynthError, SyntheticWorld};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pairgen(#[from] PairgenError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input file: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<StageError>,
    },
}

impl PipelineError {
    /// 2 for usage and I/O problems, 1 for computation errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingPath(_) | Self::Config(_) => 2,
            Self::Stage { source, .. } => match &**source {
                StageError::Corpus(e)
                | StageError::Pairgen(PairgenError::Corpus(e))
                | StageError::Train(TrainError::Corpus(e)) => corpus_exit_code(e),
                StageError::Eval(EvalError::Corpus(e)) | StageError::Synth(SynthError::Corpus(e)) => {
                    corpus_exit_code(e)
                }
                StageError::Eval(EvalError::Parse { .. }) => 2,
                StageError::Train(TrainError::Checkpoint(_) | TrainError::InvalidConfig(_)) => 2,
                StageError::Synth(SynthError::Invalid(_) | SynthError::DimTooSmall { .. }) => 2,
                _ => 1,
            },
        }
    }
}

fn corpus_exit_code(e: &CorpusError) -> i32 {
    match e {
        CorpusError::Io(_)
        | CorpusError::Json { .. }
        | CorpusError::BadMagic
        | CorpusError::VersionMismatch(_)
        | CorpusError::Truncated
        | CorpusError::InvalidUtf8
        | CorpusError::InvalidSplit(_) => 2,
        _ => 1,
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Attaches a stage name to an error.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<StageError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| PipelineError::Stage { stage, source: Box::new(e.into()) })
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingPath(path.to_owned()))
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Writes through `<path>.partial` and renames on success.
pub fn write_artifact<F>(path: &Path, stage: &'static str, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::result::Result<(), StageError>,
{
    let partial = partial_path(path);
    let file = File::create(&partial).map_err(CorpusError::from).stage(stage)?;
    let mut sink = BufWriter::new(file);
    write(&mut sink).stage(stage)?;
    sink.flush().map_err(CorpusError::from).stage(stage)?;
    drop(sink);
    fs::rename(&partial, path).map_err(CorpusError::from).stage(stage)?;
    Ok(())
}

fn io<T>(r: std::io::Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|e| StageError::Corpus(CorpusError::Io(e)))
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: &Path, stage: &'static str) -> Result<()> {
    write_artifact(path, stage, |w| Ok(crate::corpus::write_matrix(matrix, w)?))
}

pub fn save_pairs(pairs: &[PairRecord], path: &Path, stage: &'static str) -> Result<()> {
    write_artifact(path, stage, |w| Ok(pairgen::write_pairs(pairs, w)?))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path, stage: &'static str) -> Result<()> {
    write_artifact(path, stage, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|source| StageError::Corpus(CorpusError::Json { line: 0, source }))?;
        io(w.write_all(b"\n"))
    })
}

pub fn load_matrix(path: &Path, stage: &'static str) -> Result<EmbeddingMatrix> {
    require_file(path)?;
    EmbeddingMatrix::load(path).stage(stage)
}

pub fn load_pairs(path: &Path, stage: &'static str) -> Result<Vec<PairRecord>> {
    require_file(path)?;
    let file = File::open(path).map_err(CorpusError::from).stage(stage)?;
    pairgen::read_pairs(file).stage(stage)
}

pub fn load_collection(path: &Path, stage: &'static str) -> Result<TextCollection> {
    require_file(path)?;
    TextCollection::load(path).stage(stage)
}

pub fn load_split(path: &Path, stage: &'static str) -> Result<DatasetSplit> {
    require_file(path)?;
    DatasetSplit::load(path).stage(stage)
}

/// Writes a synthetic world as `collection.jsonl`, `split.json`, `base.bin`,
/// `expert_<k>.bin` and `ground_truth.bin`.
pub fn run_synth(world: &SyntheticWorld, out_dir: &Path) -> Result<SynthArtifacts> {
    const STAGE: &str = "synth";
    fs::create_dir_all(out_dir).map_err(CorpusError::from).stage(STAGE)?;
    let out = synth::synth(world).stage(STAGE)?;
    let paths = SynthArtifacts {
        collection: out_dir.join("collection.jsonl"),
        split: out_dir.join("split.json"),
        base: out_dir.join("base.bin"),
        experts: (0..out.experts.len()).map(|k| out_dir.join(format!("expert_{k}.bin"))).collect(),
        ground_truth: out_dir.join("ground_truth.bin"),
    };
    write_artifact(&paths.collection, STAGE, |w| Ok(out.collection.write_jsonl(w)?))?;
    save_json(&out.split, &paths.split, STAGE)?;
    save_matrix(&out.base, &paths.base, STAGE)?;
    for (matrix, path) in out.experts.iter().zip(&paths.experts) {
        save_matrix(matrix, path, STAGE)?;
    }
    save_matrix(&out.ground_truth, &paths.ground_truth, STAGE)?;
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub collection: PathBuf,
    pub split: PathBuf,
    pub base: PathBuf,
    pub experts: Vec<PathBuf>,
    pub ground_truth: PathBuf,
}

/// Builds the pair dataset and returns it with the augmented collection.
pub fn run_pairgen(
    collection: &Path,
    split: &Path,
    seed: u64,
    out: &Path,
    collection_out: Option<&Path>,
) -> Result<Vec<PairRecord>> {
    const STAGE: &str = "pairgen";
    let mut collection = load_collection(collection, STAGE)?;
    let split = load_split(split, STAGE)?;
    split.validate(&collection).stage(STAGE)?;
    let dataset = pairgen::build_dataset(&mut collection, &split, seed).stage(STAGE)?;
    save_pairs(&dataset.records, out, STAGE)?;
    if let Some(path) = collection_out {
        write_artifact(path, STAGE, |w| Ok(collection.write_jsonl(w)?))?;
    }
    Ok(dataset.records)
}

/// Per-expert active-set fraction, keyed by model id.
pub type ActiveSets = Vec<(String, f64)>;

/// Scores and labels `pairs`; returns the labeled records and the per-expert
/// active-set fractions.
pub fn run_label(pairs: &Path, experts: &[PathBuf], out: &Path) -> Result<(Vec<PairRecord>, ActiveSets)> {
    const STAGE: &str = "label";
    let mut records = load_pairs(pairs, STAGE)?;
    let matrices = experts.iter().map(|p| load_matrix(p, STAGE)).collect::<Result<Vec<_>>>()?;
    let panel = ExpertPanel::new(matrices).stage(STAGE)?;
    experts::score_pairs(&panel, &mut records).stage(STAGE)?;
    experts::label_pairs(&mut records).stage(STAGE)?;
    save_pairs(&records, out, STAGE)?;
    let fractions = experts::active_set_fractions(&records).stage(STAGE)?;
    let named = panel.model_ids().map(str::to_owned).zip(fractions).collect();
    Ok((records, named))
}

pub fn run_train(base: &Path, pairs: &Path, config: &TrainConfig, out: &Path) -> Result<(AdapterModel, TrainReport)> {
    const STAGE: &str = "train";
    let base = load_matrix(base, STAGE)?;
    let records = load_pairs(pairs, STAGE)?;
    let (model, report) = adapter::train(&base, &records, config).stage(STAGE)?;
    let partial = partial_path(out);
    model.save(&partial, Some(config)).stage(STAGE)?;
    fs::rename(&partial, out).map_err(CorpusError::from).stage(STAGE)?;
    fs::rename(adapter::sidecar_path(&partial), adapter::sidecar_path(out)).map_err(CorpusError::from).stage(STAGE)?;
    Ok((model, report))
}

/// Rows of `base` for the held-out queries and passages of `split`.
fn heldout_rows(base: &EmbeddingMatrix, split: &DatasetSplit) -> std::result::Result<EmbeddingMatrix, StageError> {
    let mut rows = EmbeddingMatrix::new(base.model_id.clone(), base.dim())?;
    for group in split.groups.values() {
        for id in group.heldout_question_ids.iter().chain(std::iter::once(&group.passage_text_id)) {
            let v = base.get(id).ok_or_else(|| EvalError::MissingEmbedding(id.clone()))?;
            rows.insert(id.clone(), v.to_vec())?;
        }
    }
    Ok(rows)
}

/// A model under evaluation: its name and its view of the held-out texts.
pub struct EvalModel {
    pub name: String,
    pub embeddings: EmbeddingMatrix,
}

/// The base model plus each adapter applied to it, restricted to the
/// held-out queries and passages.
pub fn heldout_models(
    base: &EmbeddingMatrix,
    split: &DatasetSplit,
    adapters: &[(String, PathBuf)],
    stage: &'static str,
) -> Result<Vec<EvalModel>> {
    let rows = heldout_rows(base, split).stage(stage)?;
    let mut models = vec![EvalModel { name: "base".into(), embeddings: rows.clone() }];
    for (name, path) in adapters {
        require_file(path)?;
        let adapter = AdapterModel::load(path).stage(stage)?;
        let embeddings = adapter.apply(&rows, name.clone()).stage(stage)?;
        models.push(EvalModel { name: name.clone(), embeddings });
    }
    Ok(models)
}

pub struct HeldoutReport {
    pub metrics: Vec<MetricRow>,
    pub curves: Vec<(String, PRCurve)>,
}

pub fn evaluate_heldout(models: &[EvalModel], split: &DatasetSplit, k: usize) -> Result<HeldoutReport> {
    const STAGE: &str = "eval-heldout";
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    for model in models {
        let samples = intra_inter(&model.embeddings, &model.embeddings, split).stage(STAGE)?;
        let (run, qrels) = heldout_run(&samples).stage(STAGE)?;
        let scored: Vec<(f64, bool)> = samples.iter().map(|s| s.scored()).collect();
        let curve = pr_curve(&scored, ThresholdSweep::Observed).stage(STAGE)?;
        let dataset = "heldout";
        metrics.push(MetricRow::new(
            &format!("ndcg@{k}"),
            &model.name,
            dataset,
            ndcg_at_k(&run, &qrels, k).stage(STAGE)?.mean,
        ));
        metrics.push(MetricRow::new(
            &format!("map@{k}"),
            &model.name,
            dataset,
            map_at_k(&run, &qrels, k).stage(STAGE)?.mean,
        ));
        metrics.push(MetricRow::new(
            &format!("mrr@{k}"),
            &model.name,
            dataset,
            mrr_at_k(&run, &qrels, k).stage(STAGE)?.mean,
        ));
        metrics.push(MetricRow::new("auprc", &model.name, dataset, curve.auprc));
        curves.push((model.name.clone(), curve));
    }
    Ok(HeldoutReport { metrics, curves })
}

pub fn write_heldout_report(report: &HeldoutReport, out_dir: &Path) -> Result<()> {
    const STAGE: &str = "eval-heldout";
    fs::create_dir_all(out_dir).map_err(CorpusError::from).stage(STAGE)?;
    write_artifact(&out_dir.join("metrics.csv"), STAGE, |w| Ok(report::write_metrics(&report.metrics, w)?))?;
    for (name, curve) in &report.curves {
        write_artifact(&out_dir.join(format!("pr_curve_{name}.csv")), STAGE, |w| {
            Ok(report::write_pr_curve(curve, w)?)
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, lo: -1.0, hi: 1.0 }
    }
}

/// Pairwise symmetric KL between the similarity distributions of every pair
/// of models, each computed over all text pairs of `ids`.
pub fn distribution_kl(models: &[EvalModel], ids: &[&str], binning: Binning) -> Result<Vec<KlRow>> {
    const STAGE: &str = "eval-dist";
    let histograms = models
        .iter()
        .map(|m| {
            let values = pairwise_similarities(&m.embeddings, ids)?;
            similarity_histogram(&values, binning.bins, binning.lo, binning.hi)
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .stage(STAGE)?;
    let mut rows = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            rows.push(KlRow {
                model_a: models[i].name.clone(),
                model_b: models[j].name.clone(),
                symmetric_kl: symmetric_kl(&histograms[i], &histograms[j]).stage(STAGE)?,
                bins: binning.bins,
                lo: binning.lo,
                hi: binning.hi,
            });
        }
    }
    Ok(rows)
}

fn open(path: &Path, stage: &'static str) -> Result<File> {
    require_file(path)?;
    File::open(path).map_err(CorpusError::from).stage(stage)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// A run file evaluated against the qrels of `dataset`.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: String,
    pub dataset: String,
    pub path: PathBuf,
}

/// Scores runs against qrels (TREC or JSONL, chosen by extension), writes
/// `metrics.csv` and one `summary_<metric>.csv` aggregate per metric.
pub fn run_eval_retrieval(
    qrels: &[(String, PathBuf)],
    runs: &[RunSpec],
    k: usize,
    out_dir: &Path,
) -> Result<Vec<MetricRow>> {
    const STAGE: &str = "eval-retrieval";
    let mut qrel_sets = BTreeMap::new();
    for (dataset, path) in qrels {
        let file = open(path, STAGE)?;
        let set = if is_jsonl(path) { trec::read_jsonl_qrels(file) } else { trec::read_trec_qrels(file) };
        qrel_sets.insert(dataset.clone(), set.stage(STAGE)?);
    }
    let mut rows = Vec::new();
    let mut per_metric: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for spec in runs {
        let qrels = qrel_sets
            .get(&spec.dataset)
            .ok_or_else(|| PipelineError::Config(format!("no qrels given for dataset `{}`", spec.dataset)))?;
        let file = open(&spec.path, STAGE)?;
        let run =
            if is_jsonl(&spec.path) { trec::read_jsonl_run(file) } else { trec::read_trec_run(file) }.stage(STAGE)?;
        let metrics = [
            (format!("ndcg@{k}"), ndcg_at_k(&run, qrels, k).stage(STAGE)?.mean),
            (format!("map@{k}"), map_at_k(&run, qrels, k).stage(STAGE)?.mean),
            (format!("mrr@{k}"), mrr_at_k(&run, qrels, k).stage(STAGE)?.mean),
        ];
        for (metric, value) in metrics {
            rows.push(MetricRow::new(&metric, &spec.model, &spec.dataset, value));
            per_metric
                .entry(metric)
                .or_default()
                .entry(spec.model.clone())
                .or_default()
                .insert(spec.dataset.clone(), value);
        }
    }
    fs::create_dir_all(out_dir).map_err(CorpusError::from).stage(STAGE)?;
    write_artifact(&out_dir.join("metrics.csv"), STAGE, |w| Ok(report::write_metrics(&rows, w)?))?;
    for (metric, scores) in &per_metric {
        let summary = aggregate_report(scores).stage(STAGE)?;
        let name = format!("summary_{}.csv", metric.replace('@', "_at_"));
        write_artifact(&out_dir.join(name), STAGE, |w| Ok(report::write_summary(metric, &summary, w)?))?;
    }
    Ok(rows)
}

/// Histograms and pairwise symmetric KL over the similarity distributions
/// of each model's view of the held-out texts. Writes `kl.csv` and
/// `hist_<model>.csv`.
pub fn run_eval_dist(models: &[EvalModel], binning: Binning, out_dir: &Path) -> Result<Vec<KlRow>> {
    const STAGE: &str = "eval-dist";
    let first = models.first().ok_or_else(|| PipelineError::Config("no models to compare".into()))?;
    let ids: Vec<&str> = first.embeddings.iter().map(|(id, _)| id).collect();
    let rows = distribution_kl(models, &ids, binning)?;
    fs::create_dir_all(out_dir).map_err(CorpusError::from).stage(STAGE)?;
    write_artifact(&out_dir.join("kl.csv"), STAGE, |w| Ok(report::write_kl(&rows, w)?))?;
    for model in models {
        let values = pairwise_similarities(&model.embeddings, &ids).stage(STAGE)?;
        let histogram = similarity_histogram(&values, binning.bins, binning.lo, binning.hi).stage(STAGE)?;
        write_artifact(&out_dir.join(format!("hist_{}.csv", model.name)), STAGE, |w| {
            Ok(report::write_histogram(&histogram, w)?)
        })?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineInputs {
    Synthetic(SyntheticWorld),
    Files { collection: PathBuf, split: PathBuf, experts: Vec<PathBuf>, base: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inputs: PipelineInputs,
    pub train: TrainConfig,
    pub targets: Vec<TargetKind>,
    pub k: usize,
    pub binning: Binning,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn new(inputs: PipelineInputs, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            inputs,
            train: TrainConfig::default(),
            targets: TargetKind::ALL.to_vec(),
            k: 10,
            binning: Binning::default(),
            seed: 0,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub pairs: usize,
    pub active_sets: ActiveSets,
    pub train_reports: BTreeMap<TargetKind, TrainReport>,
    pub metrics: Vec<MetricRow>,
    pub kl: Vec<KlRow>,
}

impl PipelineSummary {
    pub fn metric(&self, metric: &str, model: &str) -> Option<f64> {
        self.metrics.iter().find(|r| r.metric == metric && r.model == model).map(|r| r.value)
    }
}

#[derive(Serialize)]
struct LossRow<'a> {
    target: &'a str,
    epoch: String,
    loss: f64,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(CorpusError::from).stage("setup")?;
    if config.targets.is_empty() {
        return Err(PipelineError::Config("no training targets selected".into()));
    }

    let (collection, split, experts, base) = match &config.inputs {
        PipelineInputs::Synthetic(world) => {
            let world = SyntheticWorld { seed: derive_seed(config.seed, "synth"), ..world.clone() };
            let paths = run_synth(&world, out)?;
            (paths.collection, paths.split, paths.experts, paths.base)
        }
        PipelineInputs::Files { collection, split, experts, base } => {
            for path in std::iter::once(collection).chain([split, base]).chain(experts) {
                require_file(path)?;
            }
            (collection.clone(), split.clone(), experts.clone(), base.clone())
        }
    };

    let pairs_path = out.join("pairs.jsonl");
    let pairs = run_pairgen(
        &collection,
        &split,
        derive_seed(config.seed, "pairgen"),
        &pairs_path,
        Some(&out.join("collection_augmented.jsonl")),
    )?;

    let labeled_path = out.join("labeled.jsonl");
    let (_, active_sets) = run_label(&pairs_path, &experts, &labeled_path)?;
    write_artifact(&out.join("active_sets.csv"), "label", |w| {
        io(writeln!(w, "expert,fraction"))?;
        for (expert, fraction) in &active_sets {
            io(writeln!(w, "{expert},{fraction}"))?;
        }
        Ok(())
    })?;

    let mut train_reports = BTreeMap::new();
    let mut adapters = Vec::new();
    for &target in &config.targets {
        let train =
            TrainConfig { target_kind: target, seed: derive_seed(config.seed, "train"), ..config.train.clone() };
        let path = out.join(format!("adapter_{target}.bin"));
        let (_, report) = run_train(&base, &labeled_path, &train, &path)?;
        train_reports.insert(target, report);
        adapters.push((target.to_string(), path));
    }
    write_artifact(&out.join("train_loss.csv"), "train", |w| {
        let mut writer = csv::Writer::from_writer(w);
        for (target, report) in &train_reports {
            let mut rows =
                vec![LossRow { target: target.as_str(), epoch: "initial".into(), loss: report.initial_loss }];
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                rows.push(LossRow { target: target.as_str(), epoch: (i + 1).to_string(), loss: *loss });
            }
            rows.push(LossRow { target: target.as_str(), epoch: "final".into(), loss: report.final_loss });
            for row in rows {
                writer.serialize(row).map_err(|e| StageError::Corpus(CorpusError::Io(std::io::Error::other(e))))?;
            }
        }
        io(writer.flush())
    })?;

    let split = load_split(&split, "eval-heldout")?;
    let base = load_matrix(&base, "eval-heldout")?;
    let models = heldout_models(&base, &split, &adapters, "eval-heldout")?;
    let heldout = evaluate_heldout(&models, &split, config.k)?;
    write_heldout_report(&heldout, out)?;

    let kl = run_eval_dist(&models, config.binning, out)?;

    Ok(PipelineSummary { pairs: pairs.len(), active_sets, train_reports, metrics: heldout.metrics, kl })
}
