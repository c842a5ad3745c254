use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

const INSTRUCTION: &str = "{instruction}";
const INPUT: &str = "{input}";

/// `{instruction, input (optional), output}` record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

impl InstructionExample {
    pub fn new(instruction: impl Into<String>, input: Option<String>, output: impl Into<String>) -> Self {
        InstructionExample {
            instruction: instruction.into(),
            input: input.filter(|s| !s.is_empty()),
            output: output.into(),
        }
    }
}

/// Alpaca-style prompt. `with_input` must contain `{instruction}` followed by
/// `{input}`; `without_input` must contain `{instruction}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub with_input: String,
    pub without_input: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            with_input: "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n".into(),
            without_input: "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n".into(),
        }
    }
}

/// A rendered example. `tokens` is `BOS + prompt + response + EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRendering {
    pub full_text: String,
    pub prompt_text: String,
    pub tokens: Vec<usize>,
    /// Index of the first response token.
    pub output_start: usize,
    /// Token range of the input text, the only part truncation may cut.
    pub input_span: Option<(usize, usize)>,
}

impl PromptRendering {
    pub fn response_tokens(&self) -> &[usize] {
        &self.tokens[self.output_start..self.tokens.len() - 1]
    }

    pub fn prompt_tokens(&self) -> &[usize] {
        &self.tokens[..self.output_start]
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let count = |s: &str, p: &str| s.matches(p).count();
        if count(&self.with_input, INSTRUCTION) != 1 || count(&self.with_input, INPUT) != 1 {
            return Err(Error::Config(
                "with-input template needs exactly one {instruction} and one {input}".into(),
            ));
        }
        if self.with_input.find(INSTRUCTION) > self.with_input.find(INPUT) {
            return Err(Error::Config("{instruction} must precede {input}".into()));
        }
        if count(&self.without_input, INSTRUCTION) != 1 || count(&self.without_input, INPUT) != 0 {
            return Err(Error::Config(
                "no-input template needs exactly one {instruction} and no {input}".into(),
            ));
        }
        Ok(())
    }

    /// Prompt text around the input: `(head, tail)`; `tail` is empty without input.
    fn pieces(&self, ex: &InstructionExample) -> (String, String) {
        match &ex.input {
            Some(_) => {
                let at = self.with_input.find(INPUT).expect("validated template");
                let head = self.with_input[..at].replacen(INSTRUCTION, &ex.instruction, 1);
                (head, self.with_input[at + INPUT.len()..].to_string())
            }
            None => (
                self.without_input.replacen(INSTRUCTION, &ex.instruction, 1),
                String::new(),
            ),
        }
    }

    pub fn render(&self, ex: &InstructionExample, tok: &Tokenizer) -> Result<PromptRendering> {
        self.validate()?;
        if ex.instruction.trim().is_empty() {
            return Err(Error::Validation("instruction is empty".into()));
        }
        let (head, tail) = self.pieces(ex);
        let input = ex.input.as_deref().unwrap_or("");
        let mut tokens = vec![BOS];
        tokens.extend(tok.encode(&head));
        let start = tokens.len();
        tokens.extend(tok.encode(input));
        let input_span = ex.input.as_ref().map(|_| (start, tokens.len()));
        tokens.extend(tok.encode(&tail));
        let output_start = tokens.len();
        tokens.extend(tok.encode(&ex.output));
        tokens.push(EOS);
        let prompt_text = format!("{head}{input}{tail}");
        Ok(PromptRendering {
            full_text: format!("{prompt_text}{}", ex.output),
            prompt_text,
            tokens,
            output_start,
            input_span,
        })
    }

    /// Rendering without a response, for generation and scoring.
    pub fn render_prompt(&self, ex: &InstructionExample, tok: &Tokenizer) -> Result<Vec<usize>> {
        let r = self.render(ex, tok)?;
        Ok(r.prompt_tokens().to_vec())
    }
}
