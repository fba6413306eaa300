mod common;

use aoan_core::attention::{self, AttentionParams, Pooling};
use aoan_core::data::{tokenize_words, Polarity, Split};
use aoan_core::encoder::{pair_from_instance, EncoderConfig, ToyEncoder, Vocab, PAD_ID};
use aoan_core::model::{ForwardOptions, Pipeline, QuerySource, Representation};
use aoan_core::params::ParamStore;
use aoan_core::span::{self, SpanEnhanceParams};
use aoan_core::{Graph, Instance, Model, ModelConfig, Tensor, TokenSpan, Variant};
use common::random_tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus() -> Vec<Instance> {
    let rows = [
        ("the pasta was lovely but the staff were rude", "staff", 7, Polarity::Negative),
        ("decor okay", "decor", 1, Polarity::Neutral),
        ("great wine list and a superb menu tonight", "menu", 7, Polarity::Positive),
        ("price is fine", "price", 1, Polarity::Neutral),
    ];
    rows.iter()
        .enumerate()
        .map(|(k, (s, a, start, p))| {
            Instance::new(format!("s{k}"), Split::Test, *s, tokenize_words(s), *a, TokenSpan::new(*start, 1), *p).unwrap()
        })
        .collect()
}

fn config(variant: Variant, l: usize) -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 4,
        span_threshold: l,
        variant,
        lambda: 1e-4,
        encoder: EncoderConfig {
            dim: 16,
            heads: 4,
            layers: 2,
            max_len: 32,
            ..EncoderConfig::default()
        },
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn zero_threshold_variants_are_bit_identical() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let full = Model::new(config(Variant::Full, 0), vocab, 5).unwrap();
    let single = full.with_variant(Variant::Single(0)).unwrap();
    let maxpool = full.with_variant(Variant::MaxPool).unwrap();
    for inst in &insts {
        let a = full.forward(inst, true).unwrap();
        let b = single.forward(inst, true).unwrap();
        let c = maxpool.forward(inst, true).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits, c.logits);
        assert_eq!(a.traces, b.traces);
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn fresh_models_with_same_seed_match() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let a = Model::new(config(Variant::Full, 0), vocab.clone(), 9).unwrap();
    let b = Model::new(config(Variant::Single(0), 0), vocab.clone(), 9).unwrap();
    let c = Model::new(config(Variant::MaxPool, 0), vocab, 9).unwrap();
    for inst in &insts {
        let la = a.forward(inst, false).unwrap().logits;
        assert_eq!(la, b.forward(inst, false).unwrap().logits);
        assert_eq!(la, c.forward(inst, false).unwrap().logits);
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn nonspan_equals_forced_configuration() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let l = 3;
    let nonspan = Model::new(config(Variant::NonSpan, l), vocab, 21).unwrap();
    // Every branch of the full model with all-ones masks and identity
    // enhancement attends over raw H with the class-token query.
    let forced = Pipeline {
        query: QuerySource::Cls,
        representation: Representation::Raw,
        spans: (0..=l).collect(),
        pooling: Pooling::Avg,
    };
    for inst in &insts {
        let ex = nonspan.prepare(inst).unwrap();
        let a = nonspan.predict_prepared(&ex, false).unwrap();
        let b = nonspan.predict_with(&ex, &forced, &ForwardOptions::default()).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn variants_differ_from_full() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let full = Model::new(config(Variant::Full, 3), vocab, 4).unwrap();
    for v in [Variant::NonAll, Variant::NonSpan, Variant::Aspect, Variant::MaxPool, Variant::Single(2)] {
        let other = full.with_variant(v).unwrap();
        let differs = insts
            .iter()
            .any(|i| full.forward(i, false).unwrap().logits != other.forward(i, false).unwrap().logits);
        assert!(differs, "{v} matches full on every instance");
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn maxpool_and_avg_diverge_on_crafted_rows() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 0.0, 5.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 2.0, -1.0]));
    let avg = attention::pool(&mut g, &[a, b], Pooling::Avg).unwrap();
    let max = attention::pool(&mut g, &[a, b], Pooling::Max).unwrap();
    assert_eq!(g.value(avg).data(), &[2.0, 1.0, 2.0]);
    assert_eq!(g.value(max).data(), &[3.0, 2.0, 5.0]);
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn avg_pool_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let k = rng.gen_range(1..=11);
        let rows: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut rng, &[3])).collect();
        let mut order: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut g = Graph::new();
        let vars: Vec<_> = rows.iter().map(|t| g.constant(t.clone())).collect();
        let permuted: Vec<_> = order.iter().map(|&i| vars[i]).collect();
        let a = attention::pool(&mut g, &vars, Pooling::Avg).unwrap();
        let b = attention::pool(&mut g, &permuted, Pooling::Avg).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn enhancement_projection_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 5;
    let mut store = ParamStore::new();
    let params = SpanEnhanceParams::register(&mut store, d, &mut rng);
    let h = random_tensor(&mut rng, &[4, d]);
    let mask = [true, false, true, false];
    for (left, expect_span) in [(true, true), (false, false)] {
        let w = store.get_mut(params.w1);
        for i in 0..d {
            for j in 0..2 * d {
                let on = if left { j == i } else { j == d + i };
                w.data_mut()[i * 2 * d + j] = f64::from(u8::from(on));
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let h_span = span::apply_mask(&mut g, hv, &mask).unwrap();
        let out = span::enhance(&mut g, &p, &params, h_span, hv).unwrap();
        let expected = if expect_span { g.value(h_span).clone() } else { h.clone() };
        assert_eq!(g.value(out), &expected);
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn all_ones_mask_leaves_h_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = random_tensor(&mut rng, &[6, 4]);
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let out = span::apply_mask(&mut g, hv, &[true; 6]).unwrap();
    assert_eq!(g.value(out), &h);
}

struct Stack {
    store: ParamStore,
    encoder: ToyEncoder,
    span: SpanEnhanceParams,
    attention: AttentionParams,
}

fn stack(vocab_size: usize, seed: u64) -> Stack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        dim: 12,
        heads: 3,
        layers: 2,
        max_len: 40,
        ..EncoderConfig::default()
    };
    let encoder = ToyEncoder::register(&mut store, &cfg, vocab_size, &mut rng);
    let span = SpanEnhanceParams::register(&mut store, 12, &mut rng);
    let attention = AttentionParams::register(&mut store, 12, 3, &mut rng).unwrap();
    for e in store.entries_mut() {
        if e.value.rank() == 1 {
            e.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
    }
    Stack {
        store,
        encoder,
        span,
        attention,
    }
}

/// `y_a^l` for every span size, with `extra` padding tokens appended to the
/// encoder input.
fn span_attention_outputs(s: &Stack, ids: &[usize], n: usize, aspect: TokenSpan, l_max: usize, extra: usize) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let p = s.store.bind(&mut g);
    let mut padded = ids.to_vec();
    padded.resize(ids.len() + extra, PAD_ID);
    let x = s.encoder.forward(&mut g, &p, &padded, ids.len()).unwrap();
    let h = g.slice_rows(x, 0, n + 1).unwrap();
    let dv = span::relative_distances(n, aspect.start, aspect.len).unwrap();
    let masks = span::build_masks(&dv, l_max);
    masks
        .iter()
        .map(|m| {
            let hs = span::apply_mask(&mut g, h, m).unwrap();
            let he = span::enhance(&mut g, &p, &s.span, hs, h).unwrap();
            let c = attention::cls_query(&mut g, &p, &s.attention, he).unwrap();
            let (y, _) = attention::attend(&mut g, &p, &s.attention, c, he, &vec![true; n + 1], false).unwrap();
            g.value(y).data().to_vec()
        })
        .collect()
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn encoder_padding_leaves_span_outputs_unchanged() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let s = stack(vocab.len(), 12);
    for inst in &insts {
        let pair = pair_from_instance(&vocab, inst, 40).unwrap();
        let base = span_attention_outputs(&s, &pair.ids, pair.n, pair.aspect, 4, 0);
        for extra in [1, 3, 9] {
            let padded = span_attention_outputs(&s, &pair.ids, pair.n, pair.aspect, 4, extra);
            for (a, b) in base.iter().zip(&padded) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
                }
            }
        }
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn invalid_key_rows_leave_attention_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let s = stack(10, 2);
    for _ in 0..50 {
        let rows = rng.gen_range(1..=8);
        let extra = rng.gen_range(1..=4);
        let keys = random_tensor(&mut rng, &[rows, 12]);
        let junk = random_tensor(&mut rng, &[extra, 12]);
        let q = random_tensor(&mut rng, &[12]);
        let mut g = Graph::new();
        let p = s.store.bind(&mut g);
        let qv = g.constant(q);
        let kv = g.constant(keys.clone());
        let jv = g.constant(junk);
        let kt = g.transpose(kv).unwrap();
        let jt = g.transpose(jv).unwrap();
        let cat = g.concat_last(kt, jt).unwrap();
        let all = g.transpose(cat).unwrap();
        let mut valid = vec![true; rows];
        let (y0, w0) = attention::attend(&mut g, &p, &s.attention, qv, kv, &valid, true).unwrap();
        valid.extend(std::iter::repeat(false).take(extra));
        let (y1, w1) = attention::attend(&mut g, &p, &s.attention, qv, all, &valid, true).unwrap();
        for (a, b) in g.value(y0).data().iter().zip(g.value(y1).data()) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (h0, h1) in w0.unwrap().iter().zip(w1.unwrap()) {
            assert!(h1[rows..].iter().all(|&w| w == 0.0));
            let total: f64 = h1.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for (a, b) in h0.iter().zip(&h1[..rows]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn loss_grows_with_l2_weight() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let mut last = f64::NEG_INFINITY;
    for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
        let mut cfg = config(Variant::Full, 2);
        cfg.lambda = lambda;
        let model = Model::new(cfg, vocab.clone(), 1).unwrap();
        let batch = model.prepare_all(&insts).unwrap();
        let loss = model.loss(&batch).unwrap();
        assert!(loss > last);
        last = loss;
    }
}

#[cfg_attr(not(acceptance_harness), test)]
pub fn out_of_range_single_is_a_config_error() {
    let insts = corpus();
    let vocab = Vocab::build(&insts).unwrap();
    let err = Model::new(config(Variant::Single(5), 4), vocab, 0).unwrap_err();
    assert_eq!(err.kind(), aoan_core::ErrorKind::Config);
}
