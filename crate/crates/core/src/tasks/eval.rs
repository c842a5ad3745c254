use serde::Serialize;
use serde_json::json;

use super::examples::{check_task, to_instruction, LangPlacement, ReviewExample, TaskInstructions, TaskKind};
use super::metrics::{
    bleu4, bleu_tokenize, corpus_bleu4, prf1, threshold_curve, threshold_grid, BleuMode, CurvePoint,
};
use crate::error::{Error, Result};
use crate::model::{forward, generate, Decoding, ModelWeights};
use crate::peft::Adapter;
use crate::pipeline::tokenizer::EOS;
use crate::pipeline::{truncate, PromptTemplate, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NecessityScore {
    pub p_positive: f64,
    pub threshold: f64,
    pub predicted: bool,
}

impl NecessityScore {
    /// Two-way softmax over the label-token logits.
    pub fn from_logits(yes: f64, no: f64, threshold: f64) -> Self {
        let p_positive = 1.0 / (1.0 + (no - yes).exp());
        NecessityScore { p_positive, threshold, predicted: p_positive >= threshold }
    }
}

/// Label tokens for the first response position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelTokens {
    pub yes: usize,
    pub no: usize,
}

impl LabelTokens {
    pub fn from_tokenizer(tok: &Tokenizer) -> Result<Self> {
        Ok(LabelTokens { yes: tok.single_token("yes")?, no: tok.single_token("no")? })
    }
}

/// Source of generations and label logits. Implemented by the model and,
/// in tests, by scripted stand-ins.
pub trait Predictor {
    fn generate(&mut self, ex: &ReviewExample, prompt: &[usize], max_new: usize) -> Result<Vec<usize>>;
    /// `(yes, no)` logits at the first response position.
    fn label_logits(&mut self, ex: &ReviewExample, prompt: &[usize], labels: LabelTokens) -> Result<(f64, f64)>;
}

pub struct ModelPredictor<'a> {
    pub weights: &'a ModelWeights<f32>,
    pub adapter: Option<&'a Adapter<f32>>,
}

impl Predictor for ModelPredictor<'_> {
    fn generate(&mut self, _: &ReviewExample, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut out = generate(self.weights, prompt, max_new, self.adapter, Decoding::Greedy, Some(EOS))?;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    }

    fn label_logits(&mut self, _: &ReviewExample, prompt: &[usize], labels: LabelTokens) -> Result<(f64, f64)> {
        let logits = forward(self.weights, prompt, self.adapter)?;
        let last = logits.row(logits.rows() - 1);
        Ok((last[labels.yes] as f64, last[labels.no] as f64))
    }
}

/// Necessity score of one example under the model.
pub fn necessity_score(
    weights: &ModelWeights<f32>,
    adapter: Option<&Adapter<f32>>,
    ex: &ReviewExample,
    tok: &Tokenizer,
    opts: &EvalOptions,
) -> Result<NecessityScore> {
    let labels = LabelTokens::from_tokenizer(tok)?;
    let prompt = task_prompt(ex, tok, opts, weights.config.max_seq_len)?;
    let (y, n) = ModelPredictor { weights, adapter }.label_logits(ex, &prompt, labels)?;
    Ok(NecessityScore::from_logits(y, n, opts.threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub max_new_tokens: usize,
    pub bleu_mode: BleuMode,
    /// Case-fold comments before BLEU; code is always compared as is.
    pub lowercase_comments: bool,
    pub placement: LangPlacement,
    pub instructions: TaskInstructions,
    pub template: PromptTemplate,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            max_new_tokens: 64,
            bleu_mode: BleuMode::Sentence,
            lowercase_comments: true,
            placement: LangPlacement::None,
            instructions: TaskInstructions::default(),
            template: PromptTemplate::default(),
        }
    }
}

/// Prompt tokens for `ex`, left-truncated so that `max_new` more tokens fit.
pub fn task_prompt_with_budget(
    ex: &ReviewExample,
    tok: &Tokenizer,
    opts: &EvalOptions,
    budget: usize,
) -> Result<Vec<usize>> {
    let mut inst = to_instruction(ex, &opts.instructions, opts.placement)?;
    inst.output.clear();
    let r = opts.template.render(&inst, tok)?;
    // The rendering ends with EOS, which takes no room in the prompt.
    let enc = truncate(&r, budget + 1)?;
    Ok(enc.tokens[..enc.output_start].to_vec())
}

fn task_prompt(ex: &ReviewExample, tok: &Tokenizer, opts: &EvalOptions, max_seq_len: usize) -> Result<Vec<usize>> {
    task_prompt_with_budget(ex, tok, opts, max_seq_len)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub prediction: String,
    pub reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_positive: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub n_examples: usize,
    pub bleu4: Option<f64>,
    pub bleu_mode: Option<BleuMode>,
    pub threshold: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub precision_undefined: Option<bool>,
    pub recall_undefined: Option<bool>,
    pub threshold_curve: Option<Vec<CurvePoint>>,
    #[serde(skip)]
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    /// One line per example (`"record": "example"`) followed by the summary
    /// (`"record": "summary"`).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let mut v = serde_json::to_value(e).expect("record serializes");
            v["record"] = json!("example");
            v["task"] = json!(self.task);
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut s = serde_json::to_value(self).expect("summary serializes");
        s["record"] = json!("summary");
        out.push_str(&s.to_string());
        out.push('\n');
        out
    }
}

/// Scores `data` on `task`: greedy generation plus BLEU-4 for `rcg`/`cr`,
/// label scores with P/R/F1 and a threshold sweep for `rnp`.
pub fn evaluate(
    predictor: &mut dyn Predictor,
    tok: &Tokenizer,
    data: &[ReviewExample],
    task: TaskKind,
    opts: &EvalOptions,
    max_seq_len: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if !opts.threshold.is_finite() {
        return Err(Error::Config("threshold must be finite".into()));
    }
    check_task(data, task)?;
    let mut report = EvalReport {
        task,
        n_examples: data.len(),
        bleu4: None,
        bleu_mode: None,
        threshold: None,
        precision: None,
        recall: None,
        f1: None,
        precision_undefined: None,
        recall_undefined: None,
        threshold_curve: None,
        examples: Vec::with_capacity(data.len()),
    };
    match task {
        TaskKind::Rnp => {
            let labels_tok = LabelTokens::from_tokenizer(tok)?;
            let mut scores = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for (index, ex) in data.iter().enumerate() {
                let prompt = task_prompt_with_budget(ex, tok, opts, max_seq_len)?;
                let (y, n) = predictor.label_logits(ex, &prompt, labels_tok)?;
                let s = NecessityScore::from_logits(y, n, opts.threshold);
                let label = ex.positive().unwrap_or(false);
                scores.push(s.p_positive);
                labels.push(label);
                report.examples.push(ExampleRecord {
                    index,
                    prediction: if s.predicted { "yes" } else { "no" }.into(),
                    reference: ex.reference()?,
                    bleu4: None,
                    p_positive: Some(s.p_positive),
                    predicted: Some(s.predicted),
                    label: Some(label),
                });
            }
            let preds: Vec<bool> = report.examples.iter().map(|e| e.predicted == Some(true)).collect();
            let m = prf1(&preds, &labels)?;
            report.threshold = Some(opts.threshold);
            report.precision = Some(m.precision);
            report.recall = Some(m.recall);
            report.f1 = Some(m.f1);
            report.precision_undefined = Some(m.precision_undefined);
            report.recall_undefined = Some(m.recall_undefined);
            report.threshold_curve = Some(threshold_curve(&scores, &labels, &threshold_grid(opts.threshold))?);
        }
        TaskKind::Rcg | TaskKind::Cr => {
            let lower = task.output_is_comment() && opts.lowercase_comments;
            let mut pairs = Vec::with_capacity(data.len());
            for (index, ex) in data.iter().enumerate() {
                let budget = max_seq_len.saturating_sub(opts.max_new_tokens);
                let prompt = task_prompt_with_budget(ex, tok, opts, budget)?;
                let out = predictor.generate(ex, &prompt, opts.max_new_tokens)?;
                let prediction = tok.decode(&out)?;
                let reference = ex.reference()?;
                let (h, r) = (bleu_tokenize(&prediction, lower), bleu_tokenize(&reference, lower));
                report.examples.push(ExampleRecord {
                    index,
                    bleu4: Some(bleu4(&h, &r)),
                    prediction,
                    reference,
                    p_positive: None,
                    predicted: None,
                    label: None,
                });
                pairs.push((h, r));
            }
            report.bleu_mode = Some(opts.bleu_mode);
            report.bleu4 = Some(match opts.bleu_mode {
                BleuMode::Sentence => {
                    report.examples.iter().filter_map(|e| e.bleu4).sum::<f64>() / data.len() as f64
                }
                BleuMode::Corpus => corpus_bleu4(&pairs),
            });
        }
    }
    Ok(report)
}
