use criterion::{criterion_group, criterion_main, Criterion};

use breakdown_core::synth;
use breakdown_core::tokenizer::train_wordpiece;

fn corpus() -> Vec<String> {
    let (train, _) = synth::examples(500, 0, 0);
    train.into_iter().flat_map(|e| [e.context, e.utterance]).collect()
}

fn bench_train(c: &mut Criterion) {
    let texts = corpus();
    c.bench_function("wordpiece_train_200", |b| {
        b.iter(|| train_wordpiece(texts.iter(), 200, 1).unwrap())
    });
}

fn bench_encode(c: &mut Criterion) {
    let texts = corpus();
    let vocab = train_wordpiece(texts.iter(), 200, 1).unwrap();
    c.bench_function("encode_pair", |b| {
        b.iter(|| {
            texts
                .chunks(2)
                .map(|p| vocab.encode_pair(&p[0], &p[1], 32).length)
                .sum::<usize>()
        })
    });
}

criterion_group!(benches, bench_train, bench_encode);
criterion_main!(benches);
