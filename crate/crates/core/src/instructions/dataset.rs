//! Corpus assembly: quotas, scene-level splits, JSONL and manifest files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::templates::{make_caption, make_conversation, make_grounding, make_multiple_choice, make_vqa, rng_for};
use super::{AnswerType, InstructionSample, Task};
use crate::error::{Error, Result};
use crate::scene::SceneSummary;

/// Published corpus sizes of the four counted families; conversations are uncounted.
pub const PUBLISHED_COUNTS: [(Task, usize); 4] = [
    (Task::Vqa, 25563),
    (Task::Grounding, 36665),
    (Task::MultipleChoice, 11895),
    (Task::Caption, 562),
];

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskQuotas {
    pub vqa: usize,
    pub grounding: usize,
    pub multiple_choice: usize,
    /// `None` means one caption per scene.
    #[serde(default)]
    pub caption: Option<usize>,
    /// Number of conversation turns (samples), not chains.
    #[serde(default)]
    pub conversation: usize,
}

impl Default for TaskQuotas {
    fn default() -> Self {
        Self {
            vqa: 100,
            grounding: 100,
            multiple_choice: 50,
            caption: None,
            conversation: 20,
        }
    }
}

impl TaskQuotas {
    /// Splits `total` across the four counted families in published proportion
    /// using largest remainders, so the parts sum to `total` exactly.
    pub fn published_proportions(total: usize) -> Self {
        let sum: usize = PUBLISHED_COUNTS.iter().map(|(_, c)| c).sum();
        let mut parts: Vec<(usize, usize, Task)> = PUBLISHED_COUNTS
            .iter()
            .map(|&(t, c)| {
                let exact = total as u128 * c as u128;
                ((exact / sum as u128) as usize, (exact % sum as u128) as usize, t)
            })
            .collect();
        let assigned: usize = parts.iter().map(|p| p.0).sum();
        let mut order: Vec<usize> = (0..parts.len()).collect();
        order.sort_by(|&a, &b| parts[b].1.cmp(&parts[a].1).then(a.cmp(&b)));
        for &i in order.iter().take(total - assigned) {
            parts[i].0 += 1;
        }
        let get = |task| parts.iter().find(|p| p.2 == task).map_or(0, |p| p.0);
        Self {
            vqa: get(Task::Vqa),
            grounding: get(Task::Grounding),
            multiple_choice: get(Task::MultipleChoice),
            caption: Some(get(Task::Caption)),
            conversation: 0,
        }
    }

    fn requested(&self, n_scenes: usize) -> BTreeMap<String, usize> {
        Task::ALL
            .iter()
            .map(|&t| {
                let q = match t {
                    Task::Vqa => self.vqa,
                    Task::Grounding => self.grounding,
                    Task::MultipleChoice => self.multiple_choice,
                    Task::Caption => self.caption.unwrap_or(n_scenes),
                    Task::Conversation => self.conversation,
                };
                (t.as_str().to_string(), q)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub quotas: TaskQuotas,
    #[serde(default = "default_turns")]
    pub conversation_turns: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of scenes held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_turns() -> usize {
    3
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            quotas: TaskQuotas::default(),
            conversation_turns: default_turns(),
            seed: 0,
            val_fraction: default_val_fraction(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conversation_turns < 2 {
            return Err(Error::Config("conversation_turns must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub requested: BTreeMap<String, usize>,
    pub counts: BTreeMap<String, usize>,
    /// Tasks whose quota exceeded what the templates could produce.
    pub truncated: Vec<String>,
    pub warnings: Vec<String>,
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    pub splits: BTreeMap<String, Split>,
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Per-task counts next to the published corpus sizes.
    pub fn count_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>10}{:>10}{:>12}", "Task", "Requested", "Count", "Published");
        for task in Task::ALL {
            let published = PUBLISHED_COUNTS
                .iter()
                .find(|(t, _)| *t == task)
                .map_or("-".to_string(), |(_, c)| c.to_string());
            let name = task.as_str();
            let _ = writeln!(
                out,
                "{:<24}{:>10}{:>10}{:>12}",
                name,
                self.requested.get(name).copied().unwrap_or(0),
                self.counts.get(name).copied().unwrap_or(0),
                published
            );
        }
        let total: usize = self.counts.values().sum();
        let _ = writeln!(out, "{:<24}{:>10}{:>10}{:>12}", "all", self.requested.values().sum::<usize>(), total, 75000);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Grouped by task in [`Task::ALL`] order, then by sample id.
    pub samples: Vec<InstructionSample>,
}

impl Dataset {
    pub fn split_of(&self, sample: &InstructionSample) -> Split {
        self.manifest.splits.get(&sample.sample_id).copied().unwrap_or(Split::Train)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &InstructionSample> {
        self.samples.iter().filter(move |s| self.split_of(s) == split)
    }

    pub fn get(&self, sample_id: &str) -> Option<&InstructionSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn task_samples(&self, task: Task) -> impl Iterator<Item = &InstructionSample> {
        self.samples.iter().filter(move |s| s.task == task)
    }
}

/// Takes one candidate per scene in turn until `quota` are drawn.
fn round_robin(mut per_scene: Vec<Vec<InstructionSample>>, quota: usize) -> Vec<InstructionSample> {
    let mut queues: Vec<std::vec::IntoIter<InstructionSample>> =
        per_scene.drain(..).map(Vec::into_iter).collect();
    let mut out = Vec::new();
    while out.len() < quota {
        let before = out.len();
        for q in queues.iter_mut() {
            if out.len() == quota {
                break;
            }
            if let Some(s) = q.next() {
                out.push(s);
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}

/// Renumbers ids as `{scene}-{task}-{k}` in draw order and sorts by (scene, k).
fn renumber(mut samples: Vec<InstructionSample>) -> Vec<InstructionSample> {
    let mut next: BTreeMap<String, usize> = BTreeMap::new();
    let mut keyed: Vec<((String, usize), InstructionSample)> = samples
        .drain(..)
        .map(|mut s| {
            let k = next.entry(s.scene_id.clone()).or_insert(0);
            if s.task != Task::Conversation {
                s.sample_id = format!("{}-{}-{:04}", s.scene_id, s.task.short(), *k);
            }
            *k += 1;
            ((s.scene_id.clone(), *k), s)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.into_iter().map(|(_, s)| s).collect()
}

/// Builds the whole corpus in memory. Scenes are processed in `scene_id` order
/// regardless of input order.
pub fn generate_dataset(scenes: &[SceneSummary], config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Precondition("dataset needs at least one scene".into()));
    }
    let mut scenes: Vec<&SceneSummary> = scenes.iter().collect();
    scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    for w in scenes.windows(2) {
        if w[0].scene_id == w[1].scene_id {
            return Err(Error::Precondition(format!("duplicate scene id '{}'", w[0].scene_id)));
        }
    }
    let seed = config.seed;
    let q = &config.quotas;
    let requested = q.requested(scenes.len());
    let mut warnings = Vec::new();
    let mut truncated = Vec::new();

    let populated: Vec<&SceneSummary> = scenes.iter().copied().filter(|s| !s.objects.is_empty()).collect();
    if populated.len() < scenes.len() {
        warnings.push(format!(
            "{} scene(s) without objects contribute captions only",
            scenes.len() - populated.len()
        ));
    }

    let vqa_pool: Vec<Vec<InstructionSample>> =
        populated.iter().map(|s| make_vqa(s, seed, usize::MAX).samples).collect();
    let vqa = renumber(round_robin(vqa_pool.clone(), q.vqa));

    let mut grounding_skipped = 0;
    let grounding_pool: Vec<Vec<InstructionSample>> = populated
        .iter()
        .map(|s| {
            let g = make_grounding(s, seed, usize::MAX);
            grounding_skipped += g.skipped;
            g.samples
        })
        .collect();
    if grounding_skipped > 0 {
        warnings.push(format!(
            "grounding: {grounding_skipped} object(s) had no unambiguous description"
        ));
    }
    let grounding = renumber(round_robin(grounding_pool, q.grounding));

    let scene_classes: BTreeMap<String, Vec<String>> = populated
        .iter()
        .map(|s| {
            let set: BTreeSet<String> = s.objects.iter().map(|o| o.class_name.clone()).collect();
            (s.scene_id.clone(), set.into_iter().collect())
        })
        .collect();
    let mc_source: Vec<InstructionSample> = vqa_pool
        .iter()
        .flatten()
        .filter(|s| s.meta.answer_type != Some(AnswerType::YesNo))
        .cloned()
        .collect();
    let mc = make_multiple_choice(&mc_source, &scene_classes, seed, q.multiple_choice);
    let mut multiple_choice = mc.samples;
    multiple_choice.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let caption_quota = q.caption.unwrap_or(scenes.len());
    let caption: Vec<InstructionSample> = scenes.iter().take(caption_quota).map(|s| make_caption(s)).collect();

    let mut conversation = Vec::new();
    let mut chain = 0;
    while conversation.len() < q.conversation && !populated.is_empty() {
        let before = conversation.len();
        for s in &populated {
            let g = make_conversation(s, seed, config.conversation_turns, chain);
            for t in g.samples {
                if conversation.len() < q.conversation {
                    conversation.push(t);
                }
            }
        }
        chain += 1;
        if conversation.len() == before {
            break;
        }
    }
    conversation.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let by_task = [
        (Task::Vqa, vqa),
        (Task::Caption, caption),
        (Task::Grounding, grounding),
        (Task::MultipleChoice, multiple_choice),
        (Task::Conversation, conversation),
    ];
    let mut counts = BTreeMap::new();
    let mut samples = Vec::new();
    for (task, list) in by_task {
        let want = requested[task.as_str()];
        if list.len() < want {
            truncated.push(task.as_str().to_string());
            warnings.push(format!("{task}: requested {want}, generated {}", list.len()));
        }
        counts.insert(task.as_str().to_string(), list.len());
        samples.extend(list);
    }

    let mut ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    let n_val = if scenes.len() < 2 {
        0
    } else {
        ((scenes.len() as f64 * config.val_fraction).round() as usize).min(scenes.len() - 1)
    };
    ids.shuffle(&mut rng_for(seed, "split"));
    let mut val_scenes: Vec<String> = ids[..n_val].to_vec();
    let mut train_scenes: Vec<String> = ids[n_val..].to_vec();
    val_scenes.sort();
    train_scenes.sort();
    let splits = samples
        .iter()
        .map(|s| {
            let split = if val_scenes.binary_search(&s.scene_id).is_ok() {
                Split::Val
            } else {
                Split::Train
            };
            (s.sample_id.clone(), split)
        })
        .collect();
    let files = Task::ALL
        .iter()
        .map(|t| (t.as_str().to_string(), format!("{}.jsonl", t.as_str())))
        .collect();

    Ok(Dataset {
        manifest: DatasetManifest {
            seed,
            requested,
            counts,
            truncated,
            warnings,
            train_scenes,
            val_scenes,
            splits,
            files,
        },
        samples,
    })
}

/// Generates the corpus and writes one JSONL file per task plus the manifest.
pub fn build_dataset(scenes: &[SceneSummary], config: &DatasetConfig, out_dir: &Path) -> Result<Dataset> {
    let dataset = generate_dataset(scenes, config)?;
    std::fs::create_dir_all(out_dir)?;
    for task in Task::ALL {
        let file = &dataset.manifest.files[task.as_str()];
        let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join(file))?);
        for s in dataset.task_samples(task) {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(dataset)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::parse(&path, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut samples = Vec::new();
    for task in Task::ALL {
        let Some(file) = manifest.files.get(task.as_str()) else {
            continue;
        };
        let path = dir.join(file);
        let reader = BufReader::new(std::fs::File::open(&path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: InstructionSample = serde_json::from_str(&line)
                .map_err(|e| Error::parse(&path, format!("line {}", i + 1), e.to_string()))?;
            samples.push(s);
        }
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_fixture_scene, summarize};

    fn scenes(n: u64) -> Vec<SceneSummary> {
        (0..n).map(|s| summarize(&generate_fixture_scene(s, 8, 32).0).unwrap()).collect()
    }

    #[test]
    fn published_proportions_of_300() {
        let q = TaskQuotas::published_proportions(300);
        assert_eq!((q.vqa, q.grounding, q.multiple_choice, q.caption), (103, 147, 48, Some(2)));
        for total in [1, 7, 75, 1000, 74685] {
            let q = TaskQuotas::published_proportions(total);
            assert_eq!(q.vqa + q.grounding + q.multiple_choice + q.caption.unwrap(), total);
        }
        let q = TaskQuotas::published_proportions(74685);
        assert_eq!((q.vqa, q.grounding, q.multiple_choice, q.caption), (25563, 36665, 11895, Some(562)));
    }

    #[test]
    fn counts_match_quotas() {
        let cfg = DatasetConfig::default();
        let d = generate_dataset(&scenes(10), &cfg).unwrap();
        let c = &d.manifest.counts;
        assert_eq!(c["vqa"], 100);
        assert_eq!(c["grounding"], 100);
        assert_eq!(c["multiple_choice"], 50);
        assert_eq!(c["caption"], 10);
        assert_eq!(c["conversation"], 20);
        assert!(d.manifest.truncated.is_empty());
        let ids: BTreeSet<&str> = d.samples.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids.len(), d.samples.len());
    }

    #[test]
    fn splits_are_scene_disjoint() {
        let d = generate_dataset(&scenes(10), &DatasetConfig::default()).unwrap();
        assert_eq!(d.manifest.val_scenes.len(), 2);
        for s in d.samples_in(Split::Train) {
            assert!(!d.manifest.val_scenes.contains(&s.scene_id));
        }
        for s in d.samples_in(Split::Val) {
            assert!(d.manifest.val_scenes.contains(&s.scene_id));
        }
    }

    #[test]
    fn oversized_quota_is_flagged() {
        let cfg = DatasetConfig {
            quotas: TaskQuotas {
                vqa: 100_000,
                ..TaskQuotas::default()
            },
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&scenes(2), &cfg).unwrap();
        assert!(d.manifest.truncated.contains(&"vqa".to_string()));
        assert!(d.manifest.counts["vqa"] < 100_000);
    }

    #[test]
    fn files_round_trip_and_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sc = scenes(3);
        let cfg = DatasetConfig::default();
        let d = build_dataset(&sc, &cfg, a.path()).unwrap();
        build_dataset(&sc, &cfg, b.path()).unwrap();
        for f in ["manifest.json", "vqa.jsonl", "grounding.jsonl", "multiple_choice.jsonl"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        assert_eq!(load_dataset(a.path()).unwrap(), d);
    }
}
