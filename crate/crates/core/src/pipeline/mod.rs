//! Tokenizer, prompt template, dataset ingestion, batching and training.

pub mod batch;
pub mod data;
pub mod template;
pub mod tokenizer;
pub mod train;

pub use batch::{batch_loss, build_batch, encode_example, truncate, Batch, Encoded};
pub use data::{load_instruction_mix, load_instructions, parse_instructions, parse_jsonl, Mix};
pub use template::{InstructionExample, PromptRendering, PromptTemplate};
pub use tokenizer::Tokenizer;
pub use train::{parse_kv, train_stage, train_stage_with, EpochPreset, Stage, StepLog, TrainConfig};
