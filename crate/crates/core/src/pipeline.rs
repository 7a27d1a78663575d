//! File-driven stages: ingest, dataset building, training, evaluation and reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::{self, derive_seed, Dataset, DatasetConfig, InstructionSample, Split};
use crate::lm::{Checkpoint, Model, ModelConfig, TrainConfig, TrainExample, Trainer};
use crate::metrics::{combined_table, evaluate as score, write_predictions, MetricReport, Prediction};
use crate::perceiver::{featurize_scene, SceneFeatures};
use crate::prompt::{assemble_prompt, PromptSequence, SystemMessages, Vocabulary, OBJECTS_HEADER, SCENE_HEADER};
use crate::scalar::Scalar;
use crate::scene::{generate_fixture_scene, load_scene, save_scene, summarize, SceneFormat, ScenePointCloud, SceneSummary};

/// Present in an output directory while a stage is writing it.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const SUMMARIES_FILE: &str = "summaries.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const ADAPTER_CHECKPOINT: &str = "adapter.json";
pub const MERGED_CHECKPOINT: &str = "merged.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scenes: PathBuf,
    pub summaries: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenes: "scenes".into(),
            summaries: "summaries".into(),
            dataset: "dataset".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.scenes,
            &mut self.summaries,
            &mut self.dataset,
            &mut self.checkpoints,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub system: SystemMessages,
    pub max_vocab: usize,
    pub max_new_tokens: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            system: SystemMessages::default(),
            max_vocab: 4096,
            max_new_tokens: 48,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a run needs. Component seeds are derived from `seed`, so any
/// seeds written in the sub-tables are replaced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prompt: PromptConfig,
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, source: &Path, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = span.start - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line} column {col}")
                }
                None => "unknown location".to_string(),
            };
            Error::parse(source, loc, e.message().to_string())
        })?;
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base)
    }

    /// Replaces every component seed with one derived from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = derive_seed(seed, "dataset");
        self.model.perceiver.seed = derive_seed(seed, "perceiver");
        self.model.lm.seed = derive_seed(seed, "lm");
        self.train.seed = derive_seed(seed, "train");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.prompt.max_vocab <= crate::prompt::UNK as usize + 1 {
            return Err(Error::Config(format!("max_vocab {} is too small", self.prompt.max_vocab)));
        }
        if self.prompt.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        let mut model = self.model.clone();
        model.lm.vocab_size = self.prompt.max_vocab;
        model.validate()
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} directory {} does not exist", path.display())))
    }
}

/// Writes the marker, runs `f`, and removes the marker only on success.
fn guarded<R>(dir: &Path, f: impl FnOnce() -> Result<R>) -> Result<R> {
    fs::create_dir_all(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "this directory was not finished\n")?;
    let out = f()?;
    fs::remove_file(&marker)?;
    Ok(out)
}

/// Scene files (`.ply`, `.json`) in a directory, sorted by file name.
pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    require_dir(dir, "scenes")?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && SceneFormat::from_path(p).is_some())
        .collect();
    files.sort();
    Ok(files)
}

fn read_scene(path: &Path) -> Result<ScenePointCloud> {
    let format = SceneFormat::from_path(path)
        .ok_or_else(|| Error::Precondition(format!("unknown scene format: {}", path.display())))?;
    load_scene(path, format)
}

/// All scenes in a directory; the first unreadable file aborts.
pub fn load_scenes(dir: &Path) -> Result<Vec<ScenePointCloud>> {
    scene_files(dir)?.iter().map(|p| read_scene(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestError {
    pub file: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub summaries: Vec<SceneSummary>,
    pub errors: Vec<IngestError>,
}

/// Summarizes every scene file into `out_dir/summaries.json`. Failing files
/// are listed in the report rather than aborting the run.
pub fn ingest(scenes_dir: &Path, out_dir: &Path) -> Result<IngestReport> {
    let files = scene_files(scenes_dir)?;
    guarded(out_dir, || {
        let mut report = IngestReport::default();
        for path in &files {
            let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            match read_scene(path).and_then(|s| summarize(&s)) {
                Ok(summary) => report.summaries.push(summary),
                Err(e) => {
                    log::error!("{name}: {e}");
                    report.errors.push(IngestError {
                        file: name,
                        message: e.to_string(),
                    });
                }
            }
        }
        fs::write(out_dir.join(SUMMARIES_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        log::info!("ingested {} scene(s), {} error(s)", report.summaries.len(), report.errors.len());
        Ok(report)
    })
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = load_scenes(&cfg.paths.scenes)?;
    let summaries = scenes.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    guarded(&cfg.paths.dataset, || {
        instructions::build_dataset(&summaries, &cfg.dataset, &cfg.paths.dataset)
    })
}

/// Features for every scene in `dir`, keyed by scene id.
pub fn scene_features(dir: &Path) -> Result<BTreeMap<String, SceneFeatures>> {
    load_scenes(dir)?
        .iter()
        .map(|s| featurize_scene(s).map(|f| (f.scene_id.clone(), f)))
        .collect()
}

/// Words of the training split, the system messages and the prompt headers.
pub fn build_vocabulary(dataset: &Dataset, prompt: &PromptConfig) -> Vocabulary {
    let mut corpus: Vec<&str> = prompt.system.all().to_vec();
    corpus.push(SCENE_HEADER);
    corpus.push(OBJECTS_HEADER);
    for s in dataset.samples_in(Split::Train) {
        corpus.push(&s.instruction);
        corpus.push(&s.answer);
    }
    Vocabulary::build(&corpus, prompt.max_vocab)
}

pub fn sample_prompt(
    sample: &InstructionSample,
    features: &SceneFeatures,
    system: &SystemMessages,
    vocab: &Vocabulary,
    with_answer: bool,
) -> PromptSequence {
    assemble_prompt(
        system.for_task(sample.task),
        features.objects.len(),
        &sample.instruction,
        with_answer.then_some(sample.answer.as_str()),
        vocab,
    )
}

fn features_for<'a>(features: &'a BTreeMap<String, SceneFeatures>, sample: &InstructionSample) -> Result<&'a SceneFeatures> {
    features.get(&sample.scene_id).ok_or_else(|| {
        Error::Precondition(format!("sample '{}' refers to unknown scene '{}'", sample.sample_id, sample.scene_id))
    })
}

/// Training examples for a split; prompts longer than `max_seq` are dropped
/// with a warning.
pub fn training_examples(
    dataset: &Dataset,
    split: Split,
    features: &[SceneFeatures],
    system: &SystemMessages,
    vocab: &Vocabulary,
    max_seq: usize,
) -> Result<Vec<TrainExample>> {
    let index: BTreeMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (f.scene_id.as_str(), i)).collect();
    let mut out = Vec::new();
    let mut dropped = 0;
    for s in dataset.samples_in(split) {
        let &scene = index.get(s.scene_id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("sample '{}' refers to unknown scene '{}'", s.sample_id, s.scene_id))
        })?;
        let prompt = sample_prompt(s, &features[scene], system, vocab, true);
        if prompt.len() > max_seq {
            dropped += 1;
            continue;
        }
        out.push(TrainExample { prompt, scene });
    }
    if dropped > 0 {
        log::warn!("{dropped} sample(s) exceed max_seq {max_seq} and were dropped");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub examples: usize,
    pub trainable_params: usize,
    pub adapter_checkpoint: PathBuf,
    pub merged_checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg),
        Precision::F64 => train_with::<f64>(cfg),
    }
}

pub fn train_with<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_dir(&cfg.paths.dataset, "dataset")?;
    let dataset = instructions::load_dataset(&cfg.paths.dataset)?;
    let features: Vec<SceneFeatures> = scene_features(&cfg.paths.scenes)?.into_values().collect();
    let vocab = build_vocabulary(&dataset, &cfg.prompt);
    let mut model_cfg = cfg.model.clone();
    model_cfg.lm.vocab_size = vocab.len();
    let mut model = Model::<T>::new(&model_cfg)?;
    let examples = training_examples(&dataset, Split::Train, &features, &cfg.prompt.system, &vocab, model_cfg.lm.max_seq)?;
    if examples.is_empty() {
        return Err(Error::Precondition("the training split has no usable samples".into()));
    }
    let dir = &cfg.paths.checkpoints;
    guarded(dir, || {
        vocab.save(&dir.join(VOCAB_FILE))?;
        let mut log = fs::File::create(dir.join(LOSS_FILE))?;
        writeln!(log, "step,loss")?;
        let mut trainer = Trainer::<T>::new(cfg.train.clone())?;
        log::info!(
            "training {} trainable parameters on {} examples for {} steps",
            model.trainable_count(),
            examples.len(),
            cfg.train.steps
        );
        for step in 1..=cfg.train.steps {
            let loss = trainer.train_step(&mut model, &examples, &features)?;
            writeln!(log, "{step},{loss}")?;
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                model.to_checkpoint(step).save(&dir.join(format!("step-{step:06}.json")))?;
                log::info!("step {step}: loss {loss:.4}");
            }
        }
        log.flush()?;
        let adapter_checkpoint = dir.join(ADAPTER_CHECKPOINT);
        let merged_checkpoint = dir.join(MERGED_CHECKPOINT);
        model.to_checkpoint(cfg.train.steps).save(&adapter_checkpoint)?;
        model.merge_adapters()?.to_checkpoint(cfg.train.steps).save(&merged_checkpoint)?;
        Ok(TrainOutcome {
            losses: trainer.losses.clone(),
            examples: examples.len(),
            trainable_params: model.trainable_count(),
            adapter_checkpoint,
            merged_checkpoint,
        })
    })
}

/// Greedy predictions for every sample of `split`, in dataset order.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    dataset: &Dataset,
    split: Split,
    features: &BTreeMap<String, SceneFeatures>,
    prompt: &PromptConfig,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for s in dataset.samples_in(split) {
        let f = features_for(features, s)?;
        let p = sample_prompt(s, f, &prompt.system, vocab, false);
        let prediction = match model.generate(&p, f, vocab, prompt.max_new_tokens) {
            Ok(text) => text,
            Err(Error::SequenceTooLong { len, max }) => {
                log::warn!("sample '{}': prompt length {len} exceeds {max}; empty prediction", s.sample_id);
                String::new()
            }
            Err(e) => return Err(e),
        };
        out.push(Prediction {
            sample_id: s.sample_id.clone(),
            prediction,
        });
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split, out_dir: &Path) -> Result<MetricReport> {
    match cfg.precision {
        Precision::F32 => evaluate_with::<f32>(cfg, checkpoint, split, out_dir),
        Precision::F64 => evaluate_with::<f64>(cfg, checkpoint, split, out_dir),
    }
}

/// Loads the checkpoint and the vocabulary stored beside it, decodes the
/// split, and writes predictions plus JSON and text reports.
pub fn evaluate_with<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, split: Split, out_dir: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    require_dir(&cfg.paths.dataset, "dataset")?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = Model::<T>::from_checkpoint(&ck)?;
    let vocab = Vocabulary::load(&checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))?;
    if vocab.len() != ck.config.lm.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            ck.config.lm.vocab_size
        )));
    }
    let dataset = instructions::load_dataset(&cfg.paths.dataset)?;
    let features = scene_features(&cfg.paths.scenes)?;
    guarded(out_dir, || {
        let predictions = predict(&model, &vocab, &dataset, split, &features, &cfg.prompt)?;
        write_predictions(&out_dir.join(PREDICTIONS_FILE), &predictions)?;
        let report = score(&predictions, &dataset);
        fs::write(out_dir.join(REPORT_JSON), report.to_json())?;
        fs::write(out_dir.join(REPORT_TXT), report.to_table())?;
        Ok(report)
    })
}

/// Reads `report.json` files (or directories holding one) and lays them out
/// side by side, labelled by directory name.
pub fn report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Config("no reports given".into()));
    }
    let mut runs = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(REPORT_JSON) } else { p.clone() };
        if !file.is_file() {
            return Err(Error::Config(format!("report {} does not exist", file.display())));
        }
        let text = fs::read_to_string(&file)?;
        let r: MetricReport = serde_json::from_str(&text)
            .map_err(|e| Error::parse(&file, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        let label = file
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push((label, r));
    }
    Ok(combined_table(&runs))
}

/// Writes `count` fixture scenes as ASCII PLY with 3 to 6 objects each.
pub fn write_fixtures(out_dir: &Path, count: usize, seed: u64, points_per_object: usize) -> Result<Vec<PathBuf>> {
    if count == 0 || points_per_object < 2 {
        return Err(Error::Config("fixtures need a positive count and at least 2 points per object".into()));
    }
    fs::create_dir_all(out_dir)?;
    (0..count)
        .map(|i| {
            let (mut scene, _) = generate_fixture_scene(derive_seed(seed, &format!("fixture-{i}")), 3 + i % 4, points_per_object);
            scene.scene_id = format!("scene{i:04}");
            let path = out_dir.join(format!("scene{i:04}.ply"));
            save_scene(&scene, &path, SceneFormat::PlyAscii)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_paths_resolve_against_the_file() {
        let cfg = RunConfig::from_toml("[paths]\nscenes = \"s\"\nreports = \"/abs\"\n", Path::new("run.toml"), Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.scenes, PathBuf::from("/base/s"));
        assert_eq!(cfg.paths.reports, PathBuf::from("/abs"));
        assert_eq!(cfg.paths.dataset, PathBuf::from("/base/dataset"));
    }

    #[test]
    fn config_errors_carry_a_location() {
        let e = RunConfig::from_toml("seed = 1\n[train]\nlr = \"fast\"\n", Path::new("run.toml"), Path::new(".")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("run.toml") && msg.contains("line 3"), "{msg}");
        let e = RunConfig::from_toml("[train]\nwarmup = 3\n", Path::new("run.toml"), Path::new(".")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
    }

    #[test]
    fn seed_reaches_every_component() {
        let a = RunConfig::default().with_seed(1);
        let b = RunConfig::default().with_seed(2);
        assert_ne!(a.dataset.seed, b.dataset.seed);
        assert_ne!(a.model.perceiver.seed, b.model.perceiver.seed);
        assert_ne!(a.model.lm.seed, b.model.lm.seed);
        assert_ne!(a.train.seed, b.train.seed);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut bad = RunConfig::default();
        bad.model.lm.n_heads = 3;
        assert!(bad.validate().unwrap_err().is_validation());
    }

    #[test]
    fn failed_stage_leaves_the_marker() {
        let dir = tempfile::tempdir().unwrap();
        let r: Result<()> = guarded(dir.path(), || Err(Error::Precondition("boom".into())));
        assert!(r.is_err());
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
        guarded(dir.path(), || Ok(())).unwrap();
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn fixtures_ingest_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = dir.path().join("scenes");
        let files = write_fixtures(&scenes, 3, 5, 16).unwrap();
        assert_eq!(files.len(), 3);
        let report = ingest(&scenes, &dir.path().join("out")).unwrap();
        assert_eq!(report.summaries.len(), 3);
        assert!(report.errors.is_empty());
        assert_eq!(report.summaries[1].scene_id, "scene0001");
    }
}
