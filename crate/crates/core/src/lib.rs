//! Unsupervised narrative event salience.
//!
//! Every sentence of a story is scored by how much removing (or swapping) it
//! degrades a retrieval-augmented language model's prediction of the text that
//! follows. Silver salience labels come from aligning chapter summaries to the
//! full text, and the [`evaluation`] module scores salience profiles against
//! those labels.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: sentence splitting, stories, chapters and context/target blocks.
//! - [`embed`]: the embedding provider interface and the hashed bag-of-words embedder.
//! - [`retrieval`]: exact inner-product knowledgebase, the episodic memory cache and
//!   marginalisation weights.
//! - [`scoring`]: the scorer boundary, token-level marginalisation, coherence and
//!   perplexity, plus the offline n-gram scorer and the sidecar client.
//! - [`salience`]: deletion, swap, knowledge and embedding salience and their
//!   combinations.
//! - [`sentiment`]: lexicon sentiment for the importance-weighted measures.
//! - [`baselines`]: positional baselines and the clustering baseline.
//! - [`alignment`]: summary-to-text alignment producing silver labels.
//! - [`evaluation`]: MAP, ROUGE-L and Recall@k.
//! - [`synthetic`]: seeded corpora with known structure for experiments and tests.

pub mod alignment;
pub mod baselines;
pub mod corpus;
pub mod embed;
pub mod evaluation;
pub mod hashing;
pub mod retrieval;
pub mod salience;
pub mod scoring;
pub mod sentiment;
pub mod synthetic;

pub use corpus::{Block, Chapter, Sentence, Story, WindowSpec};
pub use retrieval::{KnowledgeBase, MemoryCache, PassageRecord, RetrievalMode, RetrievedSet};
pub use salience::{MeasureId, SalienceProfile};
pub use scoring::{ScoreRequest, ScoreResponse, Scorer};
