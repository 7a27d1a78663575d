use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS, OBJ_SLOT, SCENE_SLOT};
use crate::instructions::Task;
use crate::error::{Error, Result};

pub const SCENE_HEADER: &str = "The whole scene information:";
pub const OBJECTS_HEADER: &str = "The information of all the objects in the scene:";

/// One position of a multimodal prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Token(u32),
    /// A position whose input embedding is `features[index]`; `token` is the
    /// slot marker (`SCENE_SLOT` or `OBJ_SLOT`) it stands for.
    Feature { token: u32, index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSequence {
    pub elements: Vec<Element>,
    /// True exactly on answer tokens and the closing EOS.
    pub loss_mask: Vec<bool>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn feature_slots(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, Element::Feature { .. }))
            .count()
    }

    /// Verifies that the slots map one-to-one onto `n_features` vectors
    /// (index 0 = scene, 1..=n = objects).
    pub fn check_features(&self, n_features: usize) -> Result<()> {
        let slots = self.feature_slots();
        if slots != n_features {
            return Err(Error::Assembly(format!(
                "prompt has {slots} feature slots but {n_features} features were supplied"
            )));
        }
        let mut seen = vec![false; n_features];
        for e in &self.elements {
            if let Element::Feature { index, .. } = *e {
                match seen.get_mut(index) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(Error::Assembly(format!("feature slot {index} dangles or repeats"))),
                }
            }
        }
        Ok(())
    }

    /// Token ids of the masked (answer) region.
    pub fn answer_tokens(&self) -> Vec<u32> {
        self.elements
            .iter()
            .zip(&self.loss_mask)
            .filter(|(_, &m)| m)
            .filter_map(|(e, _)| match e {
                Element::Token(t) => Some(*t),
                Element::Feature { .. } => None,
            })
            .collect()
    }

    /// Prefix up to (excluding) the answer, i.e. the inference-mode prompt.
    pub fn without_answer(&self) -> PromptSequence {
        let end = self.loss_mask.iter().position(|&m| m).unwrap_or(self.len());
        PromptSequence {
            elements: self.elements[..end].to_vec(),
            loss_mask: vec![false; end],
        }
    }
}

/// Lays out `BOS · system · scene header · SCENE · objects header · OBJ×n ·
/// instruction · [answer · EOS]`.
pub fn assemble_prompt(
    system_message: &str,
    n_objects: usize,
    instruction: &str,
    answer: Option<&str>,
    vocab: &Vocabulary,
) -> PromptSequence {
    let mut elements = vec![Element::Token(BOS)];
    let push_text = |elements: &mut Vec<Element>, text: &str| {
        elements.extend(vocab.encode(text).into_iter().map(Element::Token));
    };
    push_text(&mut elements, system_message);
    push_text(&mut elements, SCENE_HEADER);
    elements.push(Element::Feature {
        token: SCENE_SLOT,
        index: 0,
    });
    push_text(&mut elements, OBJECTS_HEADER);
    for i in 0..n_objects {
        elements.push(Element::Feature {
            token: OBJ_SLOT,
            index: i + 1,
        });
    }
    push_text(&mut elements, instruction);
    let mut loss_mask = vec![false; elements.len()];
    if let Some(answer) = answer {
        let ids = vocab.encode(answer);
        loss_mask.extend(std::iter::repeat_n(true, ids.len() + 1));
        elements.extend(ids.into_iter().map(Element::Token));
        elements.push(Element::Token(EOS));
    }
    PromptSequence { elements, loss_mask }
}

/// Per-task system messages; editable in the run configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemMessages {
    pub vqa: String,
    pub caption: String,
    pub grounding: String,
    pub multiple_choice: String,
    pub conversation: String,
}

const ASSISTANT: &str =
    "You are an AI visual assistant can analyze point clouds of the whole scene and objects in scene.";

impl SystemMessages {
    pub fn for_task(&self, task: Task) -> &str {
        match task {
            Task::Vqa => &self.vqa,
            Task::Caption => &self.caption,
            Task::Grounding => &self.grounding,
            Task::MultipleChoice => &self.multiple_choice,
            Task::Conversation => &self.conversation,
        }
    }

    pub fn all(&self) -> [&str; 5] {
        [&self.vqa, &self.caption, &self.grounding, &self.multiple_choice, &self.conversation]
    }
}

impl Default for SystemMessages {
    fn default() -> Self {
        Self {
            vqa: format!("{ASSISTANT} Answer the question with a short phrase."),
            caption: format!("{ASSISTANT} Describe the scene."),
            grounding: format!("{ASSISTANT} Answer with the object id and its bounding box."),
            multiple_choice: format!("{ASSISTANT} Answer with the letter of the correct option."),
            conversation: format!("{ASSISTANT} Continue the conversation about the scene."),
        }
    }
}
