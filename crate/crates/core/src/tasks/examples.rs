use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::AdapterKind;
use crate::pipeline::{parse_jsonl, EpochPreset, InstructionExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Review necessity prediction: code → yes/no.
    Rnp,
    /// Review comment generation: code → comment.
    Rcg,
    /// Code refinement: code + comment → revised code.
    Cr,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Rnp, TaskKind::Rcg, TaskKind::Cr];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnp" => Ok(TaskKind::Rnp),
            "rcg" => Ok(TaskKind::Rcg),
            "cr" => Ok(TaskKind::Cr),
            other => Err(Error::Config(format!("unknown task {other:?} (rnp, rcg, cr)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Rnp => "rnp",
            TaskKind::Rcg => "rcg",
            TaskKind::Cr => "cr",
        }
    }

    pub fn epoch_preset(self) -> EpochPreset {
        match self {
            TaskKind::Rnp => EpochPreset::Necessity,
            TaskKind::Rcg | TaskKind::Cr => EpochPreset::Generation,
        }
    }

    /// Generated text is a comment (case-folded for BLEU) rather than code.
    pub fn output_is_comment(self) -> bool {
        self == TaskKind::Rcg
    }
}

/// Prefix adapters are not offered for necessity prediction.
pub fn ensure_supported(method: AdapterKind, task: TaskKind) -> Result<()> {
    if method == AdapterKind::Prefix && task == TaskKind::Rnp {
        return Err(Error::Validation(
            "prefix adapters are not supported for review necessity prediction (rnp); use --method lora".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LangPlacement {
    #[default]
    None,
    Instruction,
    Input,
}

impl LangPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LangPlacement::None),
            "instruction" => Ok(LangPlacement::Instruction),
            "input" => Ok(LangPlacement::Input),
            other => Err(Error::Config(format!(
                "unknown language-label placement {other:?} (none, instruction, input)"
            ))),
        }
    }
}

/// One code-review record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewExample {
    pub task: TaskKind,
    pub code: String,
    /// Target for `rcg`, input for `cr`.
    #[serde(default)]
    pub comment: Option<String>,
    /// `1` = needs review. Target for `rnp`.
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub lang: Option<String>,
    /// Revised code, the target for `cr`.
    #[serde(default)]
    pub target: Option<String>,
}

impl ReviewExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("{} record needs {what}", self.task.name())) };
        if self.code.is_empty() {
            return Err("empty code".into());
        }
        match self.task {
            TaskKind::Rnp => need(matches!(self.label, Some(0 | 1)), "label 0 or 1"),
            TaskKind::Rcg => need(self.comment.as_deref().is_some_and(|c| !c.is_empty()), "a comment"),
            TaskKind::Cr => {
                need(self.comment.as_deref().is_some_and(|c| !c.is_empty()), "a comment")?;
                need(self.target.as_deref().is_some_and(|t| !t.is_empty()), "a target")
            }
        }
    }

    pub fn positive(&self) -> Option<bool> {
        self.label.map(|l| l == 1)
    }

    /// The expected response text.
    pub fn reference(&self) -> Result<String> {
        self.validate().map_err(Error::Validation)?;
        Ok(match self.task {
            TaskKind::Rnp => if self.label == Some(1) { "yes" } else { "no" }.to_string(),
            TaskKind::Rcg => self.comment.clone().unwrap_or_default(),
            TaskKind::Cr => self.target.clone().unwrap_or_default(),
        })
    }
}

/// Per-task instruction wording.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstructions {
    pub rnp: String,
    pub rcg: String,
    pub cr: String,
}

impl Default for TaskInstructions {
    fn default() -> Self {
        TaskInstructions {
            rnp: "Determine whether the following diff hunk needs a review comment. Answer yes or no.".into(),
            rcg: "Write a code review comment for the following code change.".into(),
            cr: "Revise the following code according to the review comment.".into(),
        }
    }
}

impl TaskInstructions {
    pub fn get(&self, task: TaskKind) -> &str {
        match task {
            TaskKind::Rnp => &self.rnp,
            TaskKind::Rcg => &self.rcg,
            TaskKind::Cr => &self.cr,
        }
    }
}

/// Builds the instruction record for `ex`. A language label becomes a
/// `Language: <lang>` line at the start of the chosen field.
pub fn to_instruction(
    ex: &ReviewExample,
    instructions: &TaskInstructions,
    placement: LangPlacement,
) -> Result<InstructionExample> {
    let output = ex.reference()?;
    let mut instruction = instructions.get(ex.task).to_string();
    let mut input = match ex.task {
        TaskKind::Rnp | TaskKind::Rcg => ex.code.clone(),
        TaskKind::Cr => format!(
            "{}\n\nReview comment:\n{}",
            ex.code,
            ex.comment.as_deref().unwrap_or_default()
        ),
    };
    if placement != LangPlacement::None {
        let lang = ex.lang.as_deref().filter(|l| !l.is_empty()).ok_or_else(|| {
            Error::Validation("language-label placement requires a lang field".into())
        })?;
        let line = format!("Language: {lang}\n");
        match placement {
            LangPlacement::Instruction => instruction = line + &instruction,
            LangPlacement::Input => input = line + &input,
            LangPlacement::None => {}
        }
    }
    Ok(InstructionExample::new(instruction, Some(input), output))
}

pub fn parse_review_examples(text: &str, path: &str) -> Result<Vec<ReviewExample>> {
    parse_jsonl(text, path, |r: ReviewExample| r.validate().map(|_| r))
}

pub fn load_review_examples(path: &Path) -> Result<Vec<ReviewExample>> {
    let text = std::fs::read_to_string(path)?;
    parse_review_examples(&text, &path.display().to_string())
}

/// Fails unless every record belongs to `task`.
pub fn check_task(data: &[ReviewExample], task: TaskKind) -> Result<()> {
    if let Some((i, ex)) = data.iter().enumerate().find(|(_, e)| e.task != task) {
        return Err(Error::Validation(format!(
            "record {} is a {} example but the task is {}",
            i + 1,
            ex.task.name(),
            task.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(task: TaskKind) -> ReviewExample {
        ReviewExample {
            task,
            code: "-    x = 1\n+    x = 2".into(),
            comment: Some("Why change this?".into()),
            label: Some(1),
            lang: Some("py".into()),
            target: Some("x = 3".into()),
        }
    }

    #[test]
    fn necessity_labels_encode_as_words() {
        let i = TaskInstructions::default();
        assert_eq!(to_instruction(&rec(TaskKind::Rnp), &i, LangPlacement::None).unwrap().output, "yes");
        let neg = ReviewExample { label: Some(0), ..rec(TaskKind::Rnp) };
        assert_eq!(to_instruction(&neg, &i, LangPlacement::None).unwrap().output, "no");
    }

    #[test]
    fn refinement_input_has_code_and_comment() {
        let e = to_instruction(&rec(TaskKind::Cr), &TaskInstructions::default(), LangPlacement::None).unwrap();
        let input = e.input.unwrap();
        assert!(input.contains("x = 2") && input.contains("Why change this?"));
        assert_eq!(e.output, "x = 3");
    }

    #[test]
    fn placements_move_only_the_label() {
        let i = TaskInstructions::default();
        let r = rec(TaskKind::Rcg);
        let none = to_instruction(&r, &i, LangPlacement::None).unwrap();
        let a = to_instruction(&r, &i, LangPlacement::Instruction).unwrap();
        let b = to_instruction(&r, &i, LangPlacement::Input).unwrap();
        assert_eq!(a.instruction, format!("Language: py\n{}", none.instruction));
        assert_eq!(a.input, none.input);
        assert_eq!(b.input.as_deref().unwrap(), format!("Language: py\n{}", none.input.as_deref().unwrap()));
        assert_eq!(b.instruction, none.instruction);
        let nolang = ReviewExample { lang: None, ..r };
        assert!(to_instruction(&nolang, &i, LangPlacement::Input).is_err());
    }

    #[test]
    fn missing_fields_fail_with_line_numbers() {
        let text = "{\"task\":\"rnp\",\"code\":\"a\",\"label\":1}\n{\"task\":\"cr\",\"code\":\"a\",\"comment\":\"c\"}\n";
        assert!(matches!(parse_review_examples(text, "t"), Err(Error::Record { line: 2, .. })));
        let bad_label = "{\"task\":\"rnp\",\"code\":\"a\",\"label\":2}";
        assert!(parse_review_examples(bad_label, "t").is_err());
    }

    #[test]
    fn prefix_necessity_combination_rejected() {
        assert!(matches!(ensure_supported(AdapterKind::Prefix, TaskKind::Rnp), Err(Error::Validation(_))));
        ensure_supported(AdapterKind::Prefix, TaskKind::Cr).unwrap();
        ensure_supported(AdapterKind::Lora, TaskKind::Rnp).unwrap();
    }
}
