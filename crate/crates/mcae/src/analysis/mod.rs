//! Numerical verification of the training objective's information-theoretic
//! rationale, plus the three visualization tools (reconstruction grids,
//! token-level class activation maps, and t-SNE embeddings).
//!
//! The verification side works on exact discrete distributions: mutual
//! information from probability tables, the data-processing inequality on
//! constructed common-cause chains, and the algebraic equivalence between a
//! Gaussian log-likelihood bound and plain squared-error minimisation. The
//! claims are about information quantities, so small finite alphabets are
//! enough to check them exactly.

mod info;
mod tsne;
mod variational;
mod visualize;

pub use info::{markov_chain, mutual_information, verify_dpi_chain, DiscreteJoint, DpiReport};
pub use tsne::{tsne_embed, TsneResult};
pub use variational::{gaussian_log_likelihood, variational_mse_equivalence, VariationalReport};
pub use visualize::{
    attention_map, reconstruction_grid, reconstruction_views, render_reconstructions,
    save_heatmap_png, save_image_png, write_embedding_csv, EmbeddingCloud,
};
