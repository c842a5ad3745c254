use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use revtune_core::model::{ModelConfig, ModelWeights, Proj, INIT_STD};
use revtune_core::peft::format::{FileKind, TensorFile};
use revtune_core::peft::{
    account, lora_merge, paper_scale_table, Accounting, GateMode, LoraConfig, PrefixConfig,
};
use revtune_core::pipeline::{
    encode_example, load_instruction_mix, parse_instructions, parse_kv, train_stage, Encoded,
    EpochPreset, InstructionExample, Mix, PromptTemplate, Stage, Tokenizer, TrainConfig,
};
use revtune_core::tasks::{
    ensure_supported, evaluate, load_review_examples, necessity_score, parse_review_examples,
    task_prompt_with_budget, to_instruction, BleuMode, EvalOptions, LangPlacement, ModelPredictor,
    ReviewExample, TaskInstructions, TaskKind,
};
use revtune_core::{Adapter, AdapterHyper, AdapterKind, Error, Result};
use sha2::{Digest, Sha256};

use crate::args::*;

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

/// `1229760` → `1,229,760`.
pub fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Rnp => TaskKind::Rnp,
            TaskArg::Rcg => TaskKind::Rcg,
            TaskArg::Cr => TaskKind::Cr,
        }
    }
}

impl From<LangLabel> for LangPlacement {
    fn from(l: LangLabel) -> Self {
        match l {
            LangLabel::None => LangPlacement::None,
            LangLabel::Instruction => LangPlacement::Instruction,
            LangLabel::Input => LangPlacement::Input,
        }
    }
}

impl From<Method> for AdapterKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Lora => AdapterKind::Lora,
            Method::Prefix => AdapterKind::Prefix,
        }
    }
}

impl AdapterFlags {
    fn any_lora(&self) -> bool {
        self.rank.is_some() || self.alpha.is_some() || self.targets.is_some()
    }

    fn any_prefix(&self) -> bool {
        self.prefix_len.is_some()
            || self.prefix_layers.is_some()
            || self.gate_mode.is_some()
            || self.rotate_prefix_keys
    }

    fn is_empty(&self) -> bool {
        self.method.is_none() && !self.any_lora() && !self.any_prefix()
    }

    /// Hyperparameters from the flags over the method defaults. Prefix depth
    /// is capped at the model depth unless given explicitly.
    fn hyper(&self, model: &ModelConfig) -> Result<AdapterHyper> {
        let method = self.method.unwrap_or(Method::Lora);
        match method {
            Method::Lora => {
                if self.any_prefix() {
                    return Err(Error::Usage("prefix flags given with --method lora".into()));
                }
                let mut c = LoraConfig::default();
                if let Some(r) = self.rank {
                    c.rank = r;
                }
                if let Some(a) = self.alpha {
                    c.alpha = a;
                }
                if let Some(t) = &self.targets {
                    c.targets = t.iter().map(|s| Proj::parse(s)).collect::<Result<_>>()?;
                }
                Ok(AdapterHyper::Lora(c))
            }
            Method::Prefix => {
                if self.any_lora() {
                    return Err(Error::Usage("LoRA flags given with --method prefix".into()));
                }
                let mut c = PrefixConfig::default();
                if let Some(k) = self.prefix_len {
                    c.prompt_len = k;
                }
                match self.prefix_layers {
                    Some(l) => c.layers = l,
                    None if c.layers > model.n_layers => {
                        println!(
                            "note: prefix layers {} capped at the model depth {}",
                            c.layers, model.n_layers
                        );
                        c.layers = model.n_layers;
                    }
                    None => {}
                }
                if let Some(g) = self.gate_mode {
                    c.gate_mode = match g {
                        GateModeArg::PerHead => GateMode::PerHead,
                        GateModeArg::PerLayer => GateMode::PerLayer,
                    };
                }
                c.rotate_keys = self.rotate_prefix_keys;
                Ok(AdapterHyper::Prefix(c))
            }
        }
    }
}

fn load_model(paths: &ModelPaths) -> Result<(ModelWeights<f32>, Tokenizer)> {
    let weights = ModelWeights::load(&paths.weights)?;
    let tok = Tokenizer::load(&paths.tokenizer)?;
    if tok.vocab_size() > weights.config.vocab_size {
        return Err(Error::Compatibility(format!(
            "tokenizer has {} ids but the model vocabulary is {}",
            tok.vocab_size(),
            weights.config.vocab_size
        )));
    }
    Ok((weights, tok))
}

fn load_adapter(path: Option<&Path>, cfg: &ModelConfig) -> Result<Option<Adapter<f32>>> {
    path.map(|p| Adapter::load(p, cfg)).transpose()
}

/// Texts the tokenizer learns from: every record rendered through the
/// default template.
fn corpus_texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    let tpl = PromptTemplate::default();
    let bytes = Tokenizer::bytes_only();
    let mut out = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let is_task = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .is_some_and(|v| v.get("task").is_some());
        let examples: Vec<InstructionExample> = if is_task {
            parse_review_examples(&text, &name)?
                .iter()
                .map(|e| to_instruction(e, &TaskInstructions::default(), LangPlacement::None))
                .collect::<Result<_>>()?
        } else {
            parse_instructions(&text, &name)?
        };
        for e in &examples {
            out.push(tpl.render(e, &bytes)?.full_text);
        }
    }
    Ok(out)
}

pub fn init(a: &InitArgs) -> Result<()> {
    let mut cfg = ModelConfig::toy();
    let mut seed = 0;
    let mut std = INIT_STD;
    if let Some(path) = &a.config {
        for (k, v) in read_kv(path)? {
            if k == "seed" {
                seed = v.parse().map_err(|e| Error::Config(format!("seed = {v}: {e}")))?;
            } else if k == "init_std" {
                std = v.parse().map_err(|e| Error::Config(format!("init_std = {v}: {e}")))?;
            } else {
                cfg.set(&k, &v)?;
            }
            println!("override: {k} = {v} (config file)");
        }
    }
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
        println!("override: vocab_size = {v}");
    }
    if let Some(s) = a.seed {
        seed = s;
        println!("override: seed = {s}");
    }
    if let Some(s) = a.init_std {
        std = s;
        println!("override: init_std = {s}");
    }
    cfg.validate()?;
    let corpus = corpus_texts(&a.corpus)?;
    let tok = Tokenizer::train(&corpus, cfg.vocab_size)?;
    let weights = ModelWeights::<f32>::init_with_std(&cfg, seed, std)?;
    weights.save(&a.weights)?;
    tok.save(&a.tokenizer)?;
    println!("model: {}", cfg.canonical());
    println!("config digest: {}", cfg.digest_hex());
    println!("parameters: {}", grouped(weights.num_params()));
    println!("tokenizer: {} ids from {} records", tok.vocab_size(), corpus.len());
    println!("weights sha256: {}", sha256_file(&a.weights)?);
    Ok(())
}

fn print_train_config(c: &TrainConfig) {
    println!(
        "defaults: learning_rate={} weight_decay={} epochs={} batch_size={} max_tokens={} seed={}",
        c.learning_rate, c.weight_decay, c.epochs, c.batch_size, c.max_tokens, c.seed
    );
}

fn task_of(a: &TrainArgs) -> Result<Option<TaskKind>> {
    match (a.stage, a.task) {
        (StageArg::Instruct, Some(_)) => {
            Err(Error::Usage("--task applies to --stage task only".into()))
        }
        (StageArg::Instruct, None) => {
            if a.from_adapter.is_some() || a.no_instruction_stage {
                return Err(Error::Usage(
                    "--from-adapter and --no-instruction-stage apply to --stage task only".into(),
                ));
            }
            Ok(None)
        }
        (StageArg::Task, None) => Err(Error::Usage("--stage task needs --task".into())),
        (StageArg::Task, Some(t)) => {
            match (&a.from_adapter, a.no_instruction_stage) {
                (None, false) => Err(Error::Usage(
                    "--stage task needs --from-adapter <instruction-stage adapter> or --no-instruction-stage"
                        .into(),
                )),
                (Some(_), true) => Err(Error::Usage(
                    "--from-adapter and --no-instruction-stage are mutually exclusive".into(),
                )),
                _ => Ok(Some(t.into())),
            }
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let task = task_of(a)?;
    if a.mix == MixArg::PlNl && a.nl_data.is_none() {
        return Err(Error::Usage("--mix pl-nl needs --nl-data".into()));
    }

    // Settle the adapter kind before touching the base model.
    let stored = match &a.from_adapter {
        Some(p) => {
            if !a.adapter.is_empty() {
                return Err(Error::Usage(
                    "adapter hyperparameters come from --from-adapter; drop the method flags".into(),
                ));
            }
            Some(AdapterHyper::from_file(&TensorFile::read(p)?)?)
        }
        None => None,
    };
    let kind = match &stored {
        Some(h) => h.kind(),
        None => a.adapter.method.unwrap_or(Method::Lora).into(),
    };
    if let Some(t) = task {
        ensure_supported(kind, t)?;
    }

    let (stage, preset) = match task {
        None => (Stage::Instruction, EpochPreset::Instruction),
        Some(t) => (Stage::Task, t.epoch_preset()),
    };
    let mut tc = TrainConfig::defaults(kind, stage, preset);
    print_train_config(&tc);
    if let Some(path) = &a.config {
        for (k, v) in read_kv(path)? {
            if k == "stage" {
                return Err(Error::Config("set the stage with --stage".into()));
            }
            tc.set(&k, &v)?;
            println!("override: {k} = {v} (config file)");
        }
    }
    let flags: [(&str, Option<String>); 7] = [
        ("learning_rate", a.lr.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("max_tokens", a.max_tokens.map(|v| v.to_string())),
        ("max_steps", a.max_steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            tc.set(k, &v)?;
            println!("override: {k} = {v}");
        }
    }
    tc.validate()?;

    if a.paper_scale {
        let hyper = match &stored {
            Some(h) => h.clone(),
            None => a.adapter.hyper(&ModelConfig::paper_scale())?,
        };
        print_accounting(&[account(&hyper, &ModelConfig::paper_scale())?], false);
        return Ok(());
    }

    let (weights, tok) = load_model(&a.model)?;
    let cfg = &weights.config;
    let mut adapter = match &a.from_adapter {
        Some(p) => Adapter::load(p, cfg)?,
        None => Adapter::init(&a.adapter.hyper(cfg)?, cfg, tc.seed)?,
    };
    println!("adapter: {} {}", adapter.kind().name(), adapter.hyper().describe());
    println!("trainable parameters: {}", adapter.count_trainable());

    let examples: Vec<InstructionExample> = match task {
        None => {
            let mix = match a.mix {
                MixArg::Pl => Mix::Pl,
                MixArg::PlNl => Mix::PlNl,
            };
            load_instruction_mix(&a.data, a.nl_data.as_deref(), mix)?
        }
        Some(t) => {
            let records = load_review_examples(&a.data)?;
            revtune_core::tasks::check_task(&records, t)?;
            records
                .iter()
                .map(|e| to_instruction(e, &TaskInstructions::default(), a.lang_label.into()))
                .collect::<Result<_>>()?
        }
    };
    let tpl = PromptTemplate::default();
    let limit = tc.max_tokens.min(cfg.max_seq_len + 1);
    let mut data: Vec<Encoded> = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        match encode_example(e, &tok, &tpl, limit) {
            Ok(enc) => data.push(enc),
            Err(err @ Error::Length { .. }) => eprintln!("warning: skipping record {}: {err}", i + 1),
            Err(err) => return Err(err),
        }
    }
    println!("examples: {} of {}", data.len(), examples.len());

    let before = weights.tensor_digests();
    let log = train_stage(&weights, &mut adapter, &data, &tc)?;
    if weights.tensor_digests() != before {
        return Err(Error::Validation("base weights changed during training".into()));
    }
    adapter.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.jsonl"));
    let mut text = String::new();
    for l in &log {
        text.push_str(&serde_json::to_string(l).expect("step log serializes"));
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;
    if let Some(last) = log.last() {
        println!("steps: {}  final loss: {:.6}", log.len(), last.loss);
    }
    println!("adapter sha256: {}", sha256_file(&a.out)?);
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let task: TaskKind = a.task.into();
    let (weights, tok) = load_model(&a.model)?;
    let adapter = load_adapter(a.adapter.as_deref(), &weights.config)?;
    if let Some(ad) = &adapter {
        ensure_supported(ad.kind(), task)?;
    }
    let data = load_review_examples(&a.data)?;
    let opts = EvalOptions {
        threshold: a.threshold,
        max_new_tokens: a.max_new_tokens,
        bleu_mode: match a.bleu_mode {
            BleuModeArg::Sentence => BleuMode::Sentence,
            BleuModeArg::Corpus => BleuMode::Corpus,
        },
        lowercase_comments: !a.keep_case,
        placement: a.lang_label.into(),
        ..EvalOptions::default()
    };
    let mut predictor = ModelPredictor { weights: &weights, adapter: adapter.as_ref() };
    let report = evaluate(&mut predictor, &tok, &data, task, &opts, weights.config.max_seq_len)?;
    std::fs::write(&a.report, report.to_jsonl())?;
    if let Some(curve) = &report.threshold_curve {
        let path = a.curve.clone().unwrap_or_else(|| with_suffix(&a.report, ".curve.jsonl"));
        let mut text = String::new();
        for p in curve {
            text.push_str(&serde_json::to_string(p).expect("curve point serializes"));
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        println!("threshold curve: {}", path.display());
    }
    match task {
        TaskKind::Rnp => println!(
            "{} examples  threshold {}  precision {:.4}  recall {:.4}  f1 {:.4}",
            report.n_examples,
            a.threshold,
            report.precision.unwrap_or(0.0),
            report.recall.unwrap_or(0.0),
            report.f1.unwrap_or(0.0)
        ),
        _ => println!("{} examples  bleu4 {:.4}", report.n_examples, report.bleu4.unwrap_or(0.0)),
    }
    println!("report: {}", a.report.display());
    Ok(())
}

/// Input record for `predict`: the task fields without a target.
fn predict_example(v: &serde_json::Value, task: TaskKind, line: usize, path: &str) -> Result<ReviewExample> {
    let bad = |m: &str| Error::Record { path: path.into(), line, message: m.into() };
    let field = |k: &str| v.get(k).and_then(|x| x.as_str()).map(str::to_string);
    let code = field("code").ok_or_else(|| bad("missing \"code\" field"))?;
    let comment = field("comment");
    if task == TaskKind::Cr && comment.is_none() {
        return Err(bad("cr records need a \"comment\" field"));
    }
    // Placeholder targets: the rendered prompt stops before the response.
    Ok(ReviewExample {
        task,
        code,
        comment: comment.or_else(|| Some("-".into())),
        label: Some(0),
        lang: field("lang"),
        target: Some("-".into()),
    })
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let task: TaskKind = a.task.into();
    let (weights, tok) = load_model(&a.model)?;
    let adapter = load_adapter(a.adapter.as_deref(), &weights.config)?;
    if let Some(ad) = &adapter {
        ensure_supported(ad.kind(), task)?;
    }
    let (text, name) = match &a.input {
        Some(p) => (std::fs::read_to_string(p)?, p.display().to_string()),
        None => {
            let mut s = String::new();
            for line in std::io::stdin().lock().lines() {
                s.push_str(&line?);
                s.push('\n');
            }
            (s, "<stdin>".to_string())
        }
    };
    let opts = EvalOptions {
        threshold: a.threshold,
        max_new_tokens: a.max_new_tokens,
        placement: a.lang_label.into(),
        ..EvalOptions::default()
    };
    let mut out = std::io::stdout().lock();
    let mut index = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Record {
            path: name.clone().into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let ex = predict_example(&v, task, i + 1, &name)?;
        let record = match task {
            TaskKind::Rnp => {
                let s = necessity_score(&weights, adapter.as_ref(), &ex, &tok, &opts)?;
                serde_json::json!({
                    "index": index,
                    "label": if s.predicted { "yes" } else { "no" },
                    "p_positive": s.p_positive,
                    "threshold": s.threshold,
                })
            }
            _ => {
                let budget = weights.config.max_seq_len.saturating_sub(opts.max_new_tokens);
                let prompt = task_prompt_with_budget(&ex, &tok, &opts, budget)?;
                let mut p = ModelPredictor { weights: &weights, adapter: adapter.as_ref() };
                let ids = revtune_core::tasks::Predictor::generate(&mut p, &ex, &prompt, opts.max_new_tokens)?;
                serde_json::json!({ "index": index, "output": tok.decode(&ids)? })
            }
        };
        writeln!(out, "{record}")?;
        index += 1;
    }
    Ok(())
}

pub fn merge(a: &MergeArgs) -> Result<()> {
    if a.out == a.weights || (a.out.exists() && a.out.canonicalize()? == a.weights.canonicalize()?) {
        return Err(Error::Usage("--out must differ from --weights; the base file is never rewritten".into()));
    }
    let weights = ModelWeights::<f32>::load(&a.weights)?;
    let adapter = Adapter::load(&a.adapter, &weights.config)?;
    let lora = match &adapter {
        Adapter::Lora(l) => l,
        Adapter::Prefix(_) => {
            return Err(Error::Validation(
                "prefix adapters cannot be merged into the base weights; use them through the adapter path".into(),
            ))
        }
    };
    let merged = lora_merge(&weights, lora)?;
    merged.save(&a.out)?;
    println!("merged {} into {}", a.adapter.display(), a.out.display());
    println!("weights sha256: {}", sha256_file(&a.out)?);
    Ok(())
}

fn print_accounting(rows: &[Accounting], json: bool) {
    for r in rows {
        if json {
            let mut v = serde_json::to_value(r).expect("accounting serializes");
            v["trainable_rounded"] = r.trainable_rounded().into();
            v["mib_half"] = r.mib_half().into();
            println!("{v}");
        } else {
            println!(
                "{:<7} {:<48} trainable {:>11} ({})  fp16 {:.2} MiB",
                r.method,
                r.hyper,
                grouped(r.trainable),
                r.trainable_rounded(),
                r.mib_half()
            );
        }
    }
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    if a.paper_scale || a.path.is_none() {
        if a.paper_scale && a.config.is_some() {
            return Err(Error::Usage("--paper-scale and --config are exclusive".into()));
        }
        let mut model = if a.paper_scale { ModelConfig::paper_scale() } else { ModelConfig::toy() };
        if let Some(path) = &a.config {
            for (k, v) in read_kv(path)? {
                model.set(&k, &v)?;
            }
        }
        let rows = if a.adapter.is_empty() && a.paper_scale {
            paper_scale_table()
        } else {
            vec![account(&a.adapter.hyper(&model)?, &model)?]
        };
        if !a.json {
            println!("model: {}", model.canonical());
        }
        print_accounting(&rows, a.json);
        return Ok(());
    }
    let path = a.path.as_ref().expect("checked above");
    let file = TensorFile::read(path)?;
    let size = std::fs::metadata(path)?.len();
    let digest = sha256_file(path)?;
    match file.kind {
        FileKind::BaseModel => {
            let w = ModelWeights::from_file(file)?;
            let info = serde_json::json!({
                "kind": "base-model",
                "config": w.config.canonical(),
                "parameters": w.num_params(),
                "file_bytes": size,
                "sha256": digest,
                "config_digest": w.config.digest_hex(),
            });
            if a.json {
                println!("{info}");
            } else {
                println!("kind: base-model");
                println!("config: {}", w.config.canonical());
                println!("parameters: {}", grouped(w.num_params()));
                println!("file size: {size} bytes");
                println!("sha256: {digest}");
                println!("config digest: {}", w.config.digest_hex());
            }
        }
        FileKind::Lora | FileKind::Prefix => {
            let hyper = AdapterHyper::from_file(&file)?;
            let count: usize = file.tensors.iter().skip(1).map(|(_, t)| t.numel()).sum();
            let config_digest = hex::encode(file.config_digest);
            if a.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "kind": hyper.kind().name(),
                        "hyper": hyper.describe(),
                        "trainable": count,
                        "file_bytes": size,
                        "sha256": digest,
                        "config_digest": config_digest,
                    })
                );
            } else {
                println!("kind: {}", hyper.kind().name());
                println!("hyperparameters: {}", hyper.describe());
                println!("trainable parameters: {}", grouped(count));
                println!("file size: {size} bytes");
                println!("sha256: {digest}");
                println!("config digest: {config_digest}");
            }
        }
    }
    Ok(())
}
