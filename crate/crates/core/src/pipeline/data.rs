use std::path::Path;

use serde::Deserialize;

use super::template::InstructionExample;
use crate::error::{Error, Result};

/// Instruction-stage data selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mix {
    /// Code-domain instructions only.
    Pl,
    /// Code-domain followed by natural-language instructions.
    PlNl,
}

impl Mix {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pl" => Ok(Mix::Pl),
            "pl-nl" => Ok(Mix::PlNl),
            other => Err(Error::Config(format!("unknown mix {other:?} (pl, pl-nl)"))),
        }
    }
}

#[derive(Deserialize)]
struct RawInstruction {
    instruction: Option<String>,
    input: Option<String>,
    output: Option<String>,
}

/// Parses line-delimited JSON with one record per non-blank line. `T`
/// decides the record shape; `check` validates each record.
pub fn parse_jsonl<T, F>(text: &str, path: &str, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T) -> std::result::Result<T, String>,
{
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: path.into(),
            line: i + 1,
            message,
        };
        let value: T = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        out.push(check(value).map_err(record)?);
    }
    Ok(out)
}

pub fn parse_instructions(text: &str, path: &str) -> Result<Vec<InstructionExample>> {
    let raw: Vec<RawInstruction> = parse_jsonl(text, path, |r: RawInstruction| {
        match (&r.instruction, &r.output) {
            (None, _) => Err("missing \"instruction\" field".into()),
            (_, None) => Err("missing \"output\" field".into()),
            (Some(i), _) if i.trim().is_empty() => Err("empty instruction".into()),
            (_, Some(o)) if o.is_empty() => Err("empty output".into()),
            _ => Ok(r),
        }
    })?;
    Ok(raw
        .into_iter()
        .map(|r| InstructionExample::new(r.instruction.unwrap(), r.input, r.output.unwrap()))
        .collect())
}

pub fn load_instructions(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = std::fs::read_to_string(path)?;
    parse_instructions(&text, &path.display().to_string())
}

/// Loads the instruction set for `mix`; `pl-nl` appends `nl` after `pl`.
pub fn load_instruction_mix(pl: &Path, nl: Option<&Path>, mix: Mix) -> Result<Vec<InstructionExample>> {
    let mut out = load_instructions(pl)?;
    if mix == Mix::PlNl {
        let nl = nl.ok_or_else(|| {
            Error::Config("the pl-nl mix needs a natural-language instruction file".into())
        })?;
        out.extend(load_instructions(nl)?);
    }
    Ok(out)
}
