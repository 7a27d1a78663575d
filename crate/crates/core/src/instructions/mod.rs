//! Templated instruction data for the five task families.

mod dataset;
mod templates;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scene::BBox3D;

pub use dataset::{
    build_dataset, generate_dataset, load_dataset, load_manifest, Dataset, DatasetConfig, DatasetManifest, Split,
    TaskQuotas, MANIFEST_FILE, PUBLISHED_COUNTS,
};
pub use templates::{
    derive_seed, make_caption, make_conversation, make_grounding, make_multiple_choice, make_vqa, Generated,
    LOCATE_CLAUSE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Vqa,
    Caption,
    Grounding,
    MultipleChoice,
    Conversation,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Vqa,
        Task::Caption,
        Task::Grounding,
        Task::MultipleChoice,
        Task::Conversation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Caption => "caption",
            Task::Grounding => "grounding",
            Task::MultipleChoice => "multiple_choice",
            Task::Conversation => "conversation",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Caption => "cap",
            Task::Grounding => "grd",
            Task::MultipleChoice => "mc",
            Task::Conversation => "conv",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The kind of short answer a VQA template produces; drives distractor pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Color,
    Count,
    Class,
    YesNo,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer_type: Option<AnswerType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub object_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bbox: Option<BBox3D>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub options: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_letter: Option<char>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conversation_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub turn: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub scene_id: String,
    pub task: Task,
    pub instruction: String,
    pub answer: String,
    pub meta: SampleMeta,
}
