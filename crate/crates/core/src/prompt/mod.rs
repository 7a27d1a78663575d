//! Text tokenization, multimodal prompt layout and answer parsing.

mod answer;
mod assemble;
mod vocab;

pub use answer::{format_grounding_answer, parse_choice, parse_grounding_answer};
pub use assemble::{
    assemble_prompt, Element, PromptSequence, SystemMessages, OBJECTS_HEADER, SCENE_HEADER,
};
pub use vocab::{join_words, split_words, Vocabulary, BOS, EOS, OBJ_SLOT, PAD, SCENE_SLOT, UNK};
