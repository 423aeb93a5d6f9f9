//! Records, labels, splits, ranking groups, ingestion and synthetic data.

pub mod groups;
pub mod ingest;
pub mod io;
pub mod labels;
pub mod ledger;
pub mod record;
pub mod split;
pub mod synth;

pub use groups::{allocate_groups, allocate_groups_with, GroupMode, RankingGroup};
pub use ingest::{ingest_csv, IngestSchema};
pub use io::{DatasetDir, SplitName};
pub use labels::{assign_labels, top_alpha_count};
pub use ledger::{compute_return, Trade, TradeLedger};
pub use record::{CategoricalFeature, Dataset, FeatureSchema, MinMax, RecordKey, TraderRecord};
pub use split::{prepare_splits, split_dataset, PreparedSplits, SplitSpec, Splits};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
