use super::template::{InstructionExample, PromptRendering, PromptTemplate};
use super::tokenizer::{Tokenizer, PAD};
use crate::error::{Error, Result};
use crate::model::{logits_on_graph, BaseVars, ModelWeights};
use crate::numerics::{Float, Graph, Var};
use crate::peft::AdapterVars;

/// A tokenized example that fits the token budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub output_start: usize,
}

impl Encoded {
    /// Next-token targets; `None` everywhere before the response.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (1..self.tokens.len())
            .map(|j| (j >= self.output_start).then_some(self.tokens[j]))
            .collect()
    }
}

/// Fits `r` into `max_tokens` by dropping tokens from the left of the input
/// text. The response is never cut.
pub fn truncate(r: &PromptRendering, max_tokens: usize) -> Result<Encoded> {
    let n = r.tokens.len();
    if n <= max_tokens {
        return Ok(Encoded {
            tokens: r.tokens.clone(),
            output_start: r.output_start,
        });
    }
    let excess = n - max_tokens;
    match r.input_span {
        Some((a, b)) if b - a >= excess => {
            let mut tokens = r.tokens[..a].to_vec();
            tokens.extend_from_slice(&r.tokens[a + excess..]);
            Ok(Encoded {
                tokens,
                output_start: r.output_start - excess,
            })
        }
        _ => Err(Error::Length { len: n, max: max_tokens }),
    }
}

pub fn encode_example(
    ex: &InstructionExample,
    tok: &Tokenizer,
    template: &PromptTemplate,
    max_tokens: usize,
) -> Result<Encoded> {
    truncate(&template.render(ex, tok)?, max_tokens)
}

/// Right-padded inputs with next-token labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// `[B × L]` with `L` the longest input; padding is [`PAD`].
    pub inputs: Vec<Vec<usize>>,
    /// `labels[b][i]` is the target after `inputs[b][..=i]`, `None` if ignored.
    pub labels: Vec<Vec<Option<usize>>>,
    /// Unpadded input lengths.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_encoded(items: &[&Encoded]) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::Validation("cannot build an empty batch".into()));
        }
        let width = items.iter().map(|e| e.tokens.len() - 1).max().unwrap_or(0);
        let mut batch = Batch {
            inputs: Vec::with_capacity(items.len()),
            labels: Vec::with_capacity(items.len()),
            lengths: Vec::with_capacity(items.len()),
        };
        for e in items {
            let len = e.tokens.len() - 1;
            let mut inp = e.tokens[..len].to_vec();
            inp.resize(width, PAD);
            let mut lab = e.targets();
            lab.resize(width, None);
            batch.inputs.push(inp);
            batch.labels.push(lab);
            batch.lengths.push(len);
        }
        Ok(batch)
    }

    /// Number of positions that contribute to the loss.
    pub fn mask_count(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Encodes every example; the ones that cannot fit are returned with their
/// index and error instead of failing the batch.
pub fn build_batch(
    examples: &[InstructionExample],
    tok: &Tokenizer,
    template: &PromptTemplate,
    max_tokens: usize,
) -> Result<(Batch, Vec<(usize, Error)>)> {
    if examples.is_empty() {
        return Err(Error::Validation("no examples to batch".into()));
    }
    let mut ok = Vec::new();
    let mut rejected = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match encode_example(ex, tok, template, max_tokens) {
            Ok(e) => ok.push(e),
            Err(e) => rejected.push((i, e)),
        }
    }
    let refs: Vec<&Encoded> = ok.iter().collect();
    Ok((Batch::from_encoded(&refs)?, rejected))
}

/// Mean over rows of each row's mean response cross-entropy. Rows run at
/// their own length; the padded tail would only add ignored positions.
pub fn batch_loss<T: Float>(
    g: &mut Graph<T>,
    w: &ModelWeights<T>,
    base: &BaseVars,
    adapter: Option<&AdapterVars<T>>,
    batch: &Batch,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.inputs.len());
    for ((inp, lab), &len) in batch.inputs.iter().zip(&batch.labels).zip(&batch.lengths) {
        let logits = logits_on_graph(g, w, base, adapter, &inp[..len], None)?;
        rows.push(g.cross_entropy(logits, &lab[..len])?);
    }
    let total = g.add_n(&rows)?;
    Ok(g.scale(total, T::from_f64_lossy(1.0 / rows.len() as f64)))
}
