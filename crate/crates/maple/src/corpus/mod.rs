//! Review ingestion, multi-aspect segmentation, pruning/splitting and
//! feature indexing.

mod extract;
mod features;
mod split;
mod tokenizer;
mod types;

pub use extract::{
    assign_category, contains_word_boundary, extract_tuples, segment_review,
    select_tuple_per_category,
    CategoryClassifier, KeywordClassifier, LexiconEntry, LexiconExtractor, MinedTuple,
    TupleExtractor,
};
pub use features::{build_feature_index, passes_feature_filter, FeatureIndex, DUMMY_WORDS};
pub use split::{prune_and_split, prune_interactions, train_pair_set, SplitOptions};
pub use tokenizer::{Tokenizer, WhitespaceTokenizer};
pub use types::{
    AspectInventory, CorpusError, ReviewRecord, Sentiment, SentimentTuple, SplitDataset,
    SplitManifest, TrainingExample,
};
