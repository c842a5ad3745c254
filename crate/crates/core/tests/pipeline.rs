use revtune_core::model::{token_logprobs, BaseVars, ModelConfig, ModelWeights};
use revtune_core::numerics::Graph;
use revtune_core::peft::{AdapterHyper, LoraConfig, PrefixConfig};
use revtune_core::pipeline::*;
use revtune_core::{Adapter, AdapterKind, Error};

fn small() -> ModelConfig {
    ModelConfig { n_layers: 2, max_seq_len: 128, ..ModelConfig::toy() }
}

fn short_template() -> PromptTemplate {
    PromptTemplate {
        with_input: "Q: {instruction}\n{input}\nA: ".into(),
        without_input: "Q: {instruction}\nA: ".into(),
    }
}

fn examples(n: usize) -> Vec<InstructionExample> {
    (0..n)
        .map(|i| {
            let input = (i % 3 != 0).then(|| format!("x = {i}"));
            InstructionExample::new(format!("step {i}"), input, format!("y{}", i * 7 % 10))
        })
        .collect()
}

fn encode_all(ex: &[InstructionExample]) -> Vec<Encoded> {
    let tok = Tokenizer::bytes_only();
    ex.iter().map(|e| encode_example(e, &tok, &short_template(), 128).unwrap()).collect()
}

fn lora() -> AdapterHyper {
    AdapterHyper::Lora(LoraConfig { rank: 4, ..Default::default() })
}

fn prefix() -> AdapterHyper {
    AdapterHyper::Prefix(PrefixConfig { prompt_len: 3, layers: 2, ..Default::default() })
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::defaults(AdapterKind::Lora, Stage::Task, EpochPreset::Generation);
    c.epochs = epochs;
    c.batch_size = 4;
    c.learning_rate = lr;
    c
}

/// Mean over examples of the mean negative log-probability of each response
/// token, read off a plain forward pass.
fn loss_oracle(w: &ModelWeights<f64>, a: &Adapter<f64>, data: &[Encoded]) -> f64 {
    let mut total = 0.0;
    for e in data {
        let lp = token_logprobs(w, &e.tokens[..e.tokens.len() - 1], Some(a)).unwrap();
        let targets = e.targets();
        let picked: Vec<f64> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| lp.row(i)[t]))
            .collect();
        total -= picked.iter().sum::<f64>() / picked.len() as f64;
    }
    total / data.len() as f64
}

#[test]
fn batch_loss_is_mean_of_individual_losses() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap().cast::<f64>();
    for hyper in [lora(), prefix()] {
        let mut a = Adapter::<f32>::init(&hyper, &cfg, 4).unwrap();
        // Move off the zero init so the adapter path matters.
        for (_, t) in a.named_tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 13) as f32 - 6.0);
            }
        }
        let a = a.cast::<f64>();
        let data = encode_all(&examples(5));
        let refs: Vec<&Encoded> = data.iter().collect();
        let batch = Batch::from_encoded(&refs).unwrap();
        let mut g = Graph::<f64>::new();
        let base = BaseVars::bind(&mut g, &w, false).unwrap();
        let av = a.bind(&mut g, false);
        let loss = batch_loss(&mut g, &w, &base, Some(&av), &batch).unwrap();
        let got = g.value(loss).data()[0];
        let want = loss_oracle(&w, &a, &data);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn padding_does_not_change_row_loss() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 3).unwrap().cast::<f64>();
    let data = encode_all(&examples(4));
    let (short, long) = (&data[0], &data[1]);
    assert!(short.tokens.len() < long.tokens.len());
    let run = |items: &[&Encoded]| {
        let batch = Batch::from_encoded(items).unwrap();
        let mut g = Graph::<f64>::new();
        let base = BaseVars::bind(&mut g, &w, false).unwrap();
        let l = batch_loss(&mut g, &w, &base, None, &batch).unwrap();
        g.value(l).data()[0]
    };
    let alone = run(&[short]);
    let other = run(&[long]);
    let padded = run(&[short, long]);
    assert!((padded - (alone + other) / 2.0).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_adapter_unchanged() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    for hyper in [lora(), prefix()] {
        let mut a = Adapter::<f32>::init(&hyper, &cfg, 1).unwrap();
        let before = a.to_file().to_bytes().unwrap();
        let data = encode_all(&examples(1));
        let mut c = config(1, 0.0);
        c.weight_decay = 0.0;
        let log = train_stage(&w, &mut a, &data, &c).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(a.to_file().to_bytes().unwrap(), before);
    }
}

#[test]
fn loss_descends_on_twenty_examples() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let data = encode_all(&examples(20));
    for (hyper, lr) in [(lora(), 1e-2), (prefix(), 9e-3)] {
        let mut a = Adapter::<f32>::init(&hyper, &cfg, 1).unwrap();
        let log = train_stage(&w, &mut a, &data, &config(4, lr)).unwrap();
        let first = log[..5].iter().map(|l| l.loss).sum::<f64>();
        let last = log[log.len() - 5..].iter().map(|l| l.loss).sum::<f64>();
        assert!(last < first, "{:?}", log.iter().map(|l| l.loss).collect::<Vec<_>>());
    }
}

#[test]
fn seeded_runs_are_identical() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let data = encode_all(&examples(10));
    let run = |seed: u64| {
        let mut a = Adapter::<f32>::init(&lora(), &cfg, seed).unwrap();
        let mut c = config(2, 1e-2);
        c.seed = seed;
        let log = train_stage(&w, &mut a, &data, &c).unwrap();
        (log, a.to_file().to_bytes().unwrap())
    };
    let (l1, b1) = run(7);
    let (l2, b2) = run(7);
    assert_eq!(l1, l2);
    assert_eq!(b1, b2);
    let (l3, _) = run(8);
    assert_ne!(l1, l3);
}

#[test]
fn base_digests_survive_training_for_both_kinds() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let before = w.tensor_digests();
    let data = encode_all(&examples(6));
    for hyper in [lora(), prefix()] {
        let mut a = Adapter::<f32>::init(&hyper, &cfg, 1).unwrap();
        train_stage(&w, &mut a, &data, &config(2, 1e-2)).unwrap();
        assert_eq!(w.tensor_digests(), before);
    }
}

#[test]
fn stages_chain_through_the_adapter_file() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.peft");
    let data = encode_all(&examples(6));
    let mut a = Adapter::<f32>::init(&lora(), &cfg, 1).unwrap();
    let mut c = config(1, 1e-2);
    c.stage = Stage::Instruction;
    train_stage(&w, &mut a, &data, &c).unwrap();
    a.save(&path).unwrap();

    // Continuing from the loaded file matches continuing in memory.
    let mut loaded = Adapter::<f32>::load(&path, &cfg).unwrap();
    assert_eq!(loaded, a);
    let c2 = config(1, 1e-2);
    let l1 = train_stage(&w, &mut a, &data, &c2).unwrap();
    let l2 = train_stage(&w, &mut loaded, &data, &c2).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(loaded, a);
}

#[test]
fn failures_are_reported() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let mut a = Adapter::<f32>::init(&lora(), &cfg, 1).unwrap();
    assert!(matches!(train_stage(&w, &mut a, &[], &config(1, 1e-2)), Err(Error::Config(_))));

    let long = Encoded { tokens: vec![5; 200], output_start: 100 };
    assert!(matches!(train_stage(&w, &mut a, &[long], &config(1, 1e-2)), Err(Error::Length { .. })));

    for (_, t) in a.named_tensors_mut() {
        t.data_mut()[0] = f32::NAN;
    }
    let data = encode_all(&examples(2));
    assert!(matches!(
        train_stage(&w, &mut a, &data, &config(1, 1e-2)),
        Err(Error::NonFiniteLoss { step: 0 })
    ));
}

#[test]
fn hook_can_stop_training_early() {
    let cfg = small();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let mut a = Adapter::<f32>::init(&lora(), &cfg, 1).unwrap();
    let data = encode_all(&examples(8));
    let log = train_stage_with(&w, &mut a, &data, &config(5, 1e-2), |s, _| s.step < 2).unwrap();
    assert_eq!(log.len(), 3);
}
