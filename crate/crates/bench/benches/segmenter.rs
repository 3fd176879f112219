use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use zerodex_core::segmenter::{render_tagged, segment_text, DEFAULT_MAX_SEGMENT_CHARS};
use zerodex_core::TaggedDocument;

fn mixed_corpus(sentences: usize) -> String {
    let mut body = String::new();
    for i in 0..sentences {
        match i % 4 {
            0 => body.push_str(&format!("Sentence {i} costs {}.{} yuan today. ", i % 90, i % 10)),
            1 => body.push_str(&format!("第{i}句中文没有空格。这里是价格{}元！", i % 500)),
            2 => body.push_str(&format!("Really?! Sentence {i} ends with a run... ")),
            _ => body.push_str(&format!("Plain filler sentence number {i} about nothing. ")),
        }
    }
    body
}

fn bench_segmenter(c: &mut Criterion) {
    let body = mixed_corpus(2000);
    let mut group = c.benchmark_group("segmenter");
    group.throughput(Throughput::Bytes(body.len() as u64));
    group.bench_function("segment_mixed_2000", |b| {
        b.iter(|| segment_text(black_box(&body), DEFAULT_MAX_SEGMENT_CHARS))
    });
    let doc = TaggedDocument::from_body("bench://doc", "", &body);
    group.bench_function("render_tagged_2000", |b| b.iter(|| render_tagged(black_box(&doc))));
    group.finish();
}

criterion_group!(benches, bench_segmenter);
criterion_main!(benches);
