//! Necessity prediction, comment generation and code refinement: example
//! construction, scoring and metrics.

pub mod eval;
pub mod examples;
pub mod metrics;

pub use eval::{
    evaluate, necessity_score, task_prompt_with_budget, EvalOptions, EvalReport, ExampleRecord,
    LabelTokens, ModelPredictor, NecessityScore, Predictor,
};
pub use examples::{
    check_task, ensure_supported, load_review_examples, parse_review_examples, to_instruction,
    LangPlacement, ReviewExample, TaskInstructions, TaskKind,
};
pub use metrics::{
    bleu4, bleu_tokenize, corpus_bleu4, prf1, threshold_curve, threshold_grid, BleuMode,
    CurvePoint, Prf1, BLEU_EPS,
};
