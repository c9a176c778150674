//! Tokenization, datasets, the synthetic pseudo-ASR task and WER scoring.

mod dataset;
mod synth;
mod wer;

pub use dataset::{
    detokenize, load_text_corpus, save_text_corpus, tokenize, Dataset, Example, Split, Utterance,
};
pub use synth::{generate_synthetic_task, word_name, SyntheticTask, SyntheticTaskSpec};
pub use wer::{edit_distance, wer, WerReport};
