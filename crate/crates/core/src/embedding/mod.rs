//! Vocabulary, frozen embedding tables, text-format I/O and a built-in
//! Skip-gram/CBOW trainer.

mod table;
mod train;
mod vocab;

pub use table::{
    load_embeddings, nearest_neighbors, read_embeddings, reserved_rows, save_embeddings,
    write_embeddings, EmbeddingTable,
};
pub use train::{train_embeddings, train_embeddings_logged, EmbedMode, EmbedTrainConfig};
pub use vocab::{is_reserved, Vocab, EOS, PAD, RESERVED, SOS, UNK};
