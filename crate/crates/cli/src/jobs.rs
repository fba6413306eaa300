//! Resolved jobs. Every job is serializable so that the manifest it writes
//! can be replayed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aoan_core::data::{
    compare_reference, parse_semeval_xml, parse_twitter, read_canonical, stats, write_canonical, Benchmark, CorpusStats,
    CountMismatch, Polarity,
};
use aoan_core::encoder::{EmbeddingStore, Vocab, CLS};
use aoan_core::metrics::{compare, mean_std, BootstrapResult, EvalReport, MeanStd};
use aoan_core::model::{Prediction, Prepared};
use aoan_core::synthetic::{generate, SyntheticSpec};
use aoan_core::train::{multi_seed, train, LogRecord, TimingRecord};
use aoan_core::{Error, Instance, Model, Result, Split, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{InputFormat, SynthKind};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Ingest(IngestJob),
    Stats(StatsJob),
    Synth(SynthJob),
    Train(TrainJob),
    Eval(EvalJob),
    Ablate(AblateJob),
    Predict(PredictJob),
    ExportAttention(ExportJob),
    Compare(CompareJob),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestJob {
    pub format: InputFormat,
    pub dataset: Option<Benchmark>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsJob {
    pub inputs: Vec<PathBuf>,
    pub dataset: Option<Benchmark>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub kind: SynthKind,
    pub count: usize,
    pub split: Split,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub config: RunConfig,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub length_threshold: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateJob {
    pub config: RunConfig,
    pub train: PathBuf,
    pub test: PathBuf,
    pub seeds: Vec<u64>,
    pub resamples: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictJob {
    pub checkpoint: PathBuf,
    pub sentence: String,
    pub aspect: String,
    pub embeddings: Option<PathBuf>,
    pub id: String,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportJob {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub ids: Vec<String>,
    pub sentence: Option<String>,
    pub aspects: Vec<String>,
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareJob {
    pub a: Vec<PathBuf>,
    pub b: Vec<PathBuf>,
    pub resamples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Record of one run: the resolved job plus what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub job: Job,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: invalid manifest: {e}", path.display())))
    }
}

/// One attention trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub span: usize,
    /// Row labels: the class token followed by the sentence tokens.
    pub tokens: Vec<String>,
    pub heads: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: Polarity,
    pub probs: ClassProbs,
    pub gold: Option<Polarity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub positive: f64,
    pub negative: f64,
    pub neutral: f64,
}

impl ClassProbs {
    fn from_probs(p: &[f64]) -> Self {
        ClassProbs {
            positive: p[Polarity::Positive.index()],
            negative: p[Polarity::Negative.index()],
            neutral: p[Polarity::Neutral.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train: EvalReport,
    pub test: Option<EvalReport>,
    pub best_test_epoch: Option<usize>,
    pub best_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub stats: CorpusStats,
    pub dropped_conflict: usize,
    pub reference_mismatches: Vec<CountMismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    /// Paired bootstrap against the full model; absent for the full row.
    pub p_value_vs_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub accuracy_a: MeanStd,
    pub accuracy_b: MeanStd,
    pub bootstrap: BootstrapResult,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::storage(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn attach_embeddings(model: &mut Model, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        let store = EmbeddingStore::load(path, Some(model.config().dim))?;
        model.set_embeddings(Arc::new(store))?;
    }
    Ok(())
}

fn load_model(checkpoint: &Path, embeddings: Option<&Path>) -> Result<Model> {
    let mut model = Model::load(checkpoint)?;
    attach_embeddings(&mut model, embeddings)?;
    Ok(model)
}

fn report_mismatches(dataset: Benchmark, mismatches: &[CountMismatch]) {
    if mismatches.is_empty() {
        eprintln!("class counts match the published {} statistics", dataset.as_str());
        return;
    }
    let label = if dataset == Benchmark::Twitter { "warning" } else { "mismatch" };
    for m in mismatches {
        eprintln!(
            "{label}: {} {} {}: published {}, found {}",
            dataset.as_str(),
            m.split,
            m.polarity,
            m.expected,
            m.found
        );
    }
}

fn reference_check(dataset: Option<Benchmark>, st: &CorpusStats, splits: &[Split]) -> Vec<CountMismatch> {
    let Some(bench) = dataset else { return Vec::new() };
    let mismatches: Vec<CountMismatch> = splits.iter().flat_map(|&s| compare_reference(st, bench, s)).collect();
    report_mismatches(bench, &mismatches);
    mismatches
}

impl Job {
    pub fn out(&self) -> &Path {
        match self {
            Job::Ingest(j) => &j.out,
            Job::Stats(j) => &j.out,
            Job::Synth(j) => &j.out,
            Job::Train(j) => &j.out,
            Job::Eval(j) => &j.out,
            Job::Ablate(j) => &j.out,
            Job::Predict(j) => &j.out,
            Job::ExportAttention(j) => &j.out,
            Job::Compare(j) => &j.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        let slot = match self {
            Job::Ingest(j) => &mut j.out,
            Job::Stats(j) => &mut j.out,
            Job::Synth(j) => &mut j.out,
            Job::Train(j) => &mut j.out,
            Job::Eval(j) => &mut j.out,
            Job::Ablate(j) => &mut j.out,
            Job::Predict(j) => &mut j.out,
            Job::ExportAttention(j) => &mut j.out,
            Job::Compare(j) => &mut j.out,
        };
        *slot = out;
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Synth(j) => Some(j.seed),
            Job::Train(j) => Some(j.config.seed),
            Job::Ablate(j) => Some(j.config.seed),
            Job::Compare(j) => Some(j.seed),
            _ => None,
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = match self {
            Job::Ingest(j) => j.train.iter().chain(&j.test).cloned().collect(),
            Job::Stats(j) => j.inputs.clone(),
            Job::Synth(_) => Vec::new(),
            Job::Train(j) => std::iter::once(j.train.clone()).chain(j.test.clone()).chain(j.config.embeddings.clone()).collect(),
            Job::Eval(j) => [Some(j.checkpoint.clone()), Some(j.data.clone()), j.embeddings.clone()].into_iter().flatten().collect(),
            Job::Ablate(j) => [Some(j.train.clone()), Some(j.test.clone()), j.config.embeddings.clone()].into_iter().flatten().collect(),
            Job::Predict(j) => std::iter::once(j.checkpoint.clone()).chain(j.embeddings.clone()).collect(),
            Job::ExportAttention(j) => [Some(j.checkpoint.clone()), j.data.clone(), j.embeddings.clone()].into_iter().flatten().collect(),
            Job::Compare(j) => j.a.iter().chain(&j.b).cloned().collect(),
        };
        v.dedup();
        v
    }

    /// Runs the job and writes its manifest next to the artifacts.
    pub fn execute(&self) -> Result<()> {
        ensure_dir(self.out())?;
        let artifacts = match self {
            Job::Ingest(j) => j.run()?,
            Job::Stats(j) => j.run()?,
            Job::Synth(j) => j.run()?,
            Job::Train(j) => j.run()?,
            Job::Eval(j) => j.run()?,
            Job::Ablate(j) => j.run()?,
            Job::Predict(j) => j.run()?,
            Job::ExportAttention(j) => j.run()?,
            Job::Compare(j) => j.run()?,
        };
        let manifest = Manifest {
            tool: "aoan".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed(),
            inputs: self.inputs(),
            artifacts,
            job: self.clone(),
        };
        write_json(&self.out().join(MANIFEST_FILE), &manifest)
    }
}

impl IngestJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let mut all: Vec<Instance> = Vec::new();
        let mut dropped = 0;
        let mut artifacts = Vec::new();
        let mut splits = Vec::new();
        for (split, path) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            let Some(path) = path else { continue };
            let parsed = match self.format {
                InputFormat::Semeval => parse_semeval_xml(path, split)?,
                InputFormat::Twitter => parse_twitter(path, split)?,
            };
            dropped += parsed.dropped_conflict;
            let target = self.out.join(format!("{split}.jsonl"));
            write_canonical(&parsed.instances, &target)?;
            artifacts.push(target);
            all.extend(parsed.instances);
            splits.push(split);
        }
        let st = stats(&all);
        print!("{}", st.to_table());
        if dropped > 0 {
            println!("dropped {dropped} conflict-labelled aspect terms");
        }
        let report = StatsReport {
            reference_mismatches: reference_check(self.dataset, &st, &splits),
            stats: st,
            dropped_conflict: dropped,
        };
        artifacts.extend(write_stats(&self.out, &report)?);
        Ok(artifacts)
    }
}

fn write_stats(out: &Path, report: &StatsReport) -> Result<Vec<PathBuf>> {
    let (json, txt) = (out.join("stats.json"), out.join("stats.txt"));
    write_json(&json, report)?;
    write_text(&txt, &report.stats.to_table())?;
    Ok(vec![json, txt])
}

impl StatsJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let mut all = Vec::new();
        for path in &self.inputs {
            all.extend(read_canonical(path)?);
        }
        let st = stats(&all);
        print!("{}", st.to_table());
        let mut splits: Vec<Split> = [Split::Train, Split::Test]
            .into_iter()
            .filter(|&s| all.iter().any(|i| i.split == s))
            .collect();
        splits.dedup();
        let report = StatsReport {
            reference_mismatches: reference_check(self.dataset, &st, &splits),
            stats: st,
            dropped_conflict: 0,
        };
        write_stats(&self.out, &report)
    }
}

impl SynthJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let spec = match self.kind {
            SynthKind::Near => SyntheticSpec::near_cue(self.count),
            SynthKind::Far => SyntheticSpec::far_cue(self.count),
        };
        let insts = generate(&spec, self.split, self.seed)?;
        let path = self.out.join(format!("{}.jsonl", self.split));
        write_canonical(&insts, &path)?;
        println!("wrote {} instances to {}", insts.len(), path.display());
        Ok(vec![path])
    }
}

impl TrainJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let train_set = read_canonical(&self.train)?;
        let test_set = self.test.as_deref().map(read_canonical).transpose()?;
        let vocab = Vocab::build(&train_set)?;
        let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
        attach_embeddings(&mut model, cfg.embeddings.as_deref())?;
        let outcome = train(model, &train_set, test_set.as_deref(), &cfg.train)?;
        for rec in &outcome.log {
            eprintln!(
                "epoch {:>3} {:<5} loss {:.4} acc {:.4} f1 {:.4}",
                rec.epoch, rec.split, rec.loss, rec.accuracy, rec.macro_f1
            );
        }
        let paths = ["model.json", "log.jsonl", "timing.jsonl", "metrics.json"].map(|f| self.out.join(f));
        outcome.model.save(&paths[0])?;
        write_jsonl::<LogRecord>(&paths[1], &outcome.log)?;
        write_jsonl::<TimingRecord>(&paths[2], &outcome.timing)?;
        write_json(
            &paths[3],
            &TrainMetrics {
                train: outcome.final_train,
                test: outcome.final_test,
                best_test_epoch: outcome.best_test.map(|b| b.0),
                best_test_accuracy: outcome.best_test.map(|b| b.1),
            },
        )?;
        Ok(paths.to_vec())
    }
}

fn predict_all(model: &Model, data: &[Prepared], trace: bool) -> Result<Vec<Prediction>> {
    data.iter().map(|ex| model.predict_prepared(ex, trace)).collect()
}

impl EvalJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let model = load_model(&self.checkpoint, self.embeddings.as_deref())?;
        let data = model.prepare_all(&read_canonical(&self.data)?)?;
        let preds = predict_all(&model, &data, false)?;
        let report = EvalReport::from_predictions(
            data.iter().map(|e| e.id.clone()).collect(),
            data.iter().map(|e| e.gold).collect(),
            preds.iter().map(|p| p.label).collect(),
            &data.iter().map(|e| e.length).collect::<Vec<_>>(),
            self.length_threshold,
        );
        println!("accuracy {:.4}  macro-F1 {:.4}  ({} instances)", report.accuracy, report.macro_f1, data.len());
        let records: Vec<PredictionRecord> = data
            .iter()
            .zip(&preds)
            .map(|(ex, p)| PredictionRecord {
                id: ex.id.clone(),
                label: p.label,
                probs: ClassProbs::from_probs(&p.probs),
                gold: Some(ex.gold),
            })
            .collect();
        let (metrics, predictions) = (self.out.join("metrics.json"), self.out.join("predictions.jsonl"));
        write_json(&metrics, &report)?;
        write_jsonl(&predictions, &records)?;
        Ok(vec![metrics, predictions])
    }
}

impl AblateJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config;
        let train_set = read_canonical(&self.train)?;
        let test_set = read_canonical(&self.test)?;
        let embeddings = cfg
            .embeddings
            .as_deref()
            .map(|p| EmbeddingStore::load(p, Some(cfg.model.dim)).map(Arc::new))
            .transpose()?;
        let variants = Variant::ablation_set(cfg.model.span_threshold);
        let mut runs = Vec::with_capacity(variants.len());
        for &variant in &variants {
            let model_cfg = aoan_core::ModelConfig {
                variant,
                ..cfg.model.clone()
            };
            eprintln!("ablation: {variant}");
            runs.push(multi_seed(&train_set, &test_set, &model_cfg, &cfg.train, &self.seeds, embeddings.clone())?);
        }
        let full = &runs[0].reports;
        let mut rows = Vec::with_capacity(runs.len());
        for (&variant, run) in variants.iter().zip(&runs) {
            let p_value_vs_full = match variant {
                Variant::Full => None,
                _ => Some(compare(full, &run.reports, self.resamples, cfg.seed)?.p_value),
            };
            rows.push(AblationRow {
                variant,
                seeds: self.seeds.clone(),
                accuracy: run.accuracy,
                macro_f1: run.macro_f1,
                p_value_vs_full,
            });
        }
        let mut csv = String::from("variant,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,p_value_vs_full\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.accuracy.mean,
                r.accuracy.std,
                r.macro_f1.mean,
                r.macro_f1.std,
                r.p_value_vs_full.map(|p| p.to_string()).unwrap_or_default()
            ));
            println!(
                "{:<12} acc {:.4} ± {:.4}  f1 {:.4} ± {:.4}",
                r.variant.to_string(),
                r.accuracy.mean,
                r.accuracy.std,
                r.macro_f1.mean,
                r.macro_f1.std
            );
        }
        let (csv_path, jsonl_path) = (self.out.join("ablation.csv"), self.out.join("ablation.jsonl"));
        write_text(&csv_path, &csv)?;
        write_jsonl(&jsonl_path, &rows)?;
        Ok(vec![csv_path, jsonl_path])
    }
}

impl PredictJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let model = load_model(&self.checkpoint, self.embeddings.as_deref())?;
        let pred = model.predict_text(&self.id, &self.sentence, &self.aspect, false)?;
        let record = PredictionRecord {
            id: self.id.clone(),
            label: pred.label,
            probs: ClassProbs::from_probs(&pred.probs),
            gold: None,
        };
        println!("{}", serde_json::to_string(&record)?);
        let path = self.out.join("prediction.json");
        write_json(&path, &record)?;
        Ok(vec![path])
    }
}

fn trace_records(model: &Model, ex: &Prepared) -> Result<Vec<TraceRecord>> {
    let pred = model.predict_prepared(ex, true)?;
    let tokens: Vec<String> = std::iter::once(CLS.to_string()).chain(ex.pair.tokens.iter().cloned()).collect();
    Ok(pred
        .traces
        .into_iter()
        .map(|t| TraceRecord {
            id: ex.id.clone(),
            span: t.span,
            tokens: tokens.clone(),
            heads: t.heads,
            mean: t.mean,
        })
        .collect())
}

impl ExportJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let model = load_model(&self.checkpoint, self.embeddings.as_deref())?;
        let mut prepared = Vec::new();
        if let Some(path) = &self.data {
            let insts = read_canonical(path)?;
            if self.ids.is_empty() {
                prepared.extend(model.prepare_all(&insts)?);
            } else {
                for id in &self.ids {
                    let inst = insts
                        .iter()
                        .find(|i| &i.id == id)
                        .ok_or_else(|| Error::Ingest(format!("no instance {id:?} in {}", path.display())))?;
                    prepared.push(model.prepare(inst)?);
                }
            }
        }
        if let Some(sentence) = &self.sentence {
            for (k, aspect) in self.aspects.iter().enumerate() {
                prepared.push(model.prepare_text(&format!("input-{k}"), sentence, aspect)?);
            }
        }
        let mut records = Vec::new();
        for ex in &prepared {
            records.extend(trace_records(&model, ex)?);
        }
        let path = self.out.join("attention.jsonl");
        write_jsonl(&path, &records)?;
        println!("wrote {} trace records to {}", records.len(), path.display());
        Ok(vec![path])
    }
}

impl CompareJob {
    fn run(&self) -> Result<Vec<PathBuf>> {
        let load = |paths: &[PathBuf]| -> Result<Vec<EvalReport>> { paths.iter().map(|p| read_json(p)).collect() };
        let (a, b) = (load(&self.a)?, load(&self.b)?);
        let acc = |rs: &[EvalReport]| mean_std(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let result = Comparison {
            accuracy_a: acc(&a),
            accuracy_b: acc(&b),
            bootstrap: compare(&a, &b, self.resamples, self.seed)?,
        };
        println!(
            "accuracy A {:.4}  B {:.4}  diff {:+.4}  p = {:.4}",
            result.accuracy_a.mean, result.accuracy_b.mean, result.bootstrap.observed_diff, result.bootstrap.p_value
        );
        let path = self.out.join("comparison.json");
        write_json(&path, &result)?;
        Ok(vec![path])
    }
}
