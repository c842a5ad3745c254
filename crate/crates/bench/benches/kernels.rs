use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revtune_core::model::forward;
use revtune_core::numerics::{Graph, Tensor};
use revtune_core::peft::{LoraConfig, PrefixConfig};
use revtune_core::pipeline::{
    encode_example, train_stage, EpochPreset, InstructionExample, PromptTemplate, Stage, Tokenizer,
    TrainConfig,
};
use revtune_core::tasks::{bleu4, bleu_tokenize};
use revtune_core::{Adapter, AdapterHyper, AdapterKind, ModelConfig, ModelWeights};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = Tensor::<f32>::normal(&[n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::normal(&[n, n], 1.0, &mut rng);
        // A fresh graph per call; copying the operands is O(n^2) against O(n^3).
        g.bench_with_input(BenchmarkId::new("ab", n), &n, |bch, _| {
            bch.iter(|| {
                let mut gr = Graph::new();
                let (x, y) = (gr.constant(a.clone()), gr.constant(b.clone()));
                gr.matmul(x, y).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("abt", n), &n, |bch, _| {
            bch.iter(|| {
                let mut gr = Graph::new();
                let (x, y) = (gr.constant(a.clone()), gr.constant(b.clone()));
                gr.matmul_bt(x, y).unwrap()
            })
        });
    }
    g.finish();
}

fn toy_forward(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let tokens: Vec<usize> = (0..128).map(|i| (i * 37) % cfg.vocab_size).collect();
    let lora = Adapter::init(&AdapterHyper::Lora(LoraConfig::default()), &cfg, 0).unwrap();
    let prefix = Adapter::init(
        &AdapterHyper::Prefix(PrefixConfig { layers: cfg.n_layers, ..Default::default() }),
        &cfg,
        0,
    )
    .unwrap();
    let mut g = c.benchmark_group("forward_128_tokens");
    g.bench_function("base", |b| b.iter(|| forward(&w, &tokens, None).unwrap()));
    g.bench_function("lora", |b| b.iter(|| forward(&w, &tokens, Some(&lora)).unwrap()));
    g.bench_function("prefix", |b| b.iter(|| forward(&w, &tokens, Some(&prefix)).unwrap()));
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let tok = Tokenizer::bytes_only();
    let template = PromptTemplate {
        with_input: "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n".into(),
        without_input: "### Instruction:\n{instruction}\n\n### Response:\n".into(),
    };
    let data: Vec<_> = (0..8)
        .map(|i| {
            let ex = InstructionExample::new(
                format!("Rename variable number {i}."),
                Some(format!("x{i} = load()\nprint(x{i})")),
                format!("value = load()\nprint(value)  # {i}"),
            );
            encode_example(&ex, &tok, &template, cfg.max_seq_len + 1).unwrap()
        })
        .collect();
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(10);
    for kind in [AdapterKind::Lora, AdapterKind::Prefix] {
        let hyper = match kind {
            AdapterKind::Lora => AdapterHyper::Lora(LoraConfig::default()),
            AdapterKind::Prefix => AdapterHyper::Prefix(PrefixConfig { layers: cfg.n_layers, ..Default::default() }),
        };
        let mut tc = TrainConfig::defaults(kind, Stage::Task, EpochPreset::Generation).desk();
        tc.max_steps = Some(1);
        g.bench_function(kind.name(), |b| {
            b.iter(|| {
                let mut a = Adapter::init(&hyper, &cfg, 0).unwrap();
                train_stage(&w, &mut a, &data, &tc).unwrap()
            })
        });
    }
    g.finish();
}

fn bleu(c: &mut Criterion) {
    let hyp = bleu_tokenize("Consider using a guard clause here so the null case returns early.", true);
    let reference = bleu_tokenize("Use a guard clause: return early when the value is null.", true);
    c.bench_function("bleu4_sentence", |b| b.iter(|| bleu4(&hyp, &reference)));
}

criterion_group!(benches, matmul, toy_forward, train_step, bleu);
criterion_main!(benches);
