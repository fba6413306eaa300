//! End-to-end model: encoder, span enhancement, multi-perspective attention,
//! pooling and the polarity classifier, plus the ablation variants.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, Pooling, SentimentProjParams, SpanTrace};
use crate::data::{Instance, Polarity, TokenSpan};
use crate::encoder::{pair_from_instance, tokenize_pair, EmbeddingStore, Encoder, EncoderConfig, EncoderKind, PairIds, ToyEncoder, Vocab};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, NamedParam, ParamId, ParamStore};
use crate::span::{self, SpanEnhanceParams};
use crate::tensor::{softmax_values, Graph, Tensor, Var};

pub const NUM_CLASSES: usize = 3;

/// Model variant. `Full` is the complete architecture; the others are the
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Aspect-mean query over the raw encoder output, no spans.
    NonAll,
    /// Class-token query over the raw encoder output, no spans.
    NonSpan,
    /// Aspect-mean query over each enhanced span.
    Aspect,
    /// Max instead of average pooling over spans.
    MaxPool,
    /// Only span size `l`.
    Single(usize),
}

impl Variant {
    /// The ablation table rows for threshold `l_max`: the four structural
    /// variants, then one single-span model per size.
    pub fn ablation_set(l_max: usize) -> Vec<Variant> {
        let mut v = vec![Variant::Full, Variant::NonAll, Variant::NonSpan, Variant::Aspect, Variant::MaxPool];
        v.extend((0..=l_max).map(Variant::Single));
        v
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NonAll => f.write_str("nonall"),
            Variant::NonSpan => f.write_str("nonspan"),
            Variant::Aspect => f.write_str("aspect"),
            Variant::MaxPool => f.write_str("maxpool"),
            Variant::Single(l) => write!(f, "single({l})"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "full" => Variant::Full,
            "nonall" => Variant::NonAll,
            "nonspan" => Variant::NonSpan,
            "aspect" => Variant::Aspect,
            "maxpool" => Variant::MaxPool,
            _ => {
                let inner = s
                    .strip_prefix("single(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("single:"))
                    .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))?;
                Variant::Single(
                    inner
                        .parse()
                        .map_err(|_| Error::Config(format!("bad span size in {s:?}")))?,
                )
            }
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the attention query of each branch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// `tanh(W2 h_cls + b2)`.
    Cls,
    /// Mean of the aspect rows.
    AspectMean,
}

/// What each branch attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Span-masked, then enhanced with `W1`.
    Enhanced,
    /// The encoder output itself: every mask on and no enhancement.
    Raw,
}

/// Fully explicit description of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    pub query: QuerySource,
    pub representation: Representation,
    pub spans: Vec<usize>,
    pub pooling: Pooling,
}

impl Pipeline {
    pub fn for_variant(variant: Variant, l_max: usize) -> Result<Self> {
        let all: Vec<usize> = (0..=l_max).collect();
        let (query, representation, spans, pooling) = match variant {
            Variant::Full => (QuerySource::Cls, Representation::Enhanced, all, Pooling::Avg),
            Variant::MaxPool => (QuerySource::Cls, Representation::Enhanced, all, Pooling::Max),
            Variant::Aspect => (QuerySource::AspectMean, Representation::Enhanced, all, Pooling::Avg),
            Variant::NonSpan => (QuerySource::Cls, Representation::Raw, vec![0], Pooling::Avg),
            Variant::NonAll => (QuerySource::AspectMean, Representation::Raw, vec![0], Pooling::Avg),
            Variant::Single(l) => {
                if l > l_max {
                    return Err(Error::Config(format!(
                        "single({l}) exceeds span threshold {l_max}"
                    )));
                }
                (QuerySource::Cls, Representation::Enhanced, vec![l], Pooling::Avg)
            }
        };
        Ok(Pipeline {
            query,
            representation,
            spans,
            pooling,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Largest span size `L`; the model has `L + 1` span branches.
    pub span_threshold: usize,
    pub variant: Variant,
    /// L2 weight.
    pub lambda: f64,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            span_threshold: 4,
            variant: Variant::Full,
            lambda: 1e-5,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.encoder.dim != self.dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from model width {}",
                self.encoder.dim, self.dim
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("invalid L2 weight {}", self.lambda)));
        }
        self.encoder.validate()?;
        Pipeline::for_variant(self.variant, self.span_threshold)?;
        Ok(())
    }
}

/// Parameter handles for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    encoder: Encoder,
    span: SpanEnhanceParams,
    attention: AttentionParams,
    projection: SentimentProjParams,
    wo: ParamId,
    bo: ParamId,
}

/// An instance laid out for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub pair: PairIds,
    pub gold: Polarity,
    /// Untruncated sentence length, used for length buckets.
    pub length: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub trace: bool,
    /// Append padding to the encoder input up to this length.
    pub pad_to: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Per-span sentiment vectors `y_s`, in pipeline order.
    pub span_outputs: Vec<Var>,
    pub traces: Vec<SpanTrace>,
}

/// Forward result detached from the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: Polarity,
    pub traces: Vec<SpanTrace>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_from_probs(probs: &[f64]) -> Polarity {
    Polarity::from_index(argmax(probs)).expect("three classes")
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    layout: Layout,
    embeddings: Option<Arc<EmbeddingStore>>,
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let encoder = match config.encoder.kind {
            EncoderKind::Toy => Encoder::Toy(ToyEncoder::register(&mut store, &config.encoder, vocab.len(), &mut rng)),
            EncoderKind::Precomputed => Encoder::Precomputed,
        };
        let span = SpanEnhanceParams::register(&mut store, d, &mut rng);
        let attention = AttentionParams::register(&mut store, d, config.heads, &mut rng)?;
        let projection = SentimentProjParams::register(&mut store, d, &mut rng);
        let wo = store.add("classifier.wo", &[NUM_CLASSES, NUM_CLASSES], Init::GlorotUniform, true, &mut rng);
        let bo = store.add("classifier.bo", &[NUM_CLASSES], Init::Zeros, true, &mut rng);
        Ok(Model {
            config,
            vocab,
            store,
            layout: Layout {
                encoder,
                span,
                attention,
                projection,
                wo,
                bo,
            },
            embeddings: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embeddings(&self) -> Option<&EmbeddingStore> {
        self.embeddings.as_deref()
    }

    pub fn set_embeddings(&mut self, store: Arc<EmbeddingStore>) -> Result<()> {
        if store.dim != self.config.dim {
            return Err(Error::Config(format!(
                "embedding width {} does not match model width {}",
                store.dim, self.config.dim
            )));
        }
        self.embeddings = Some(store);
        Ok(())
    }

    /// Same architecture with a different variant. Parameters are shared
    /// as-is; only the forward path changes.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        Pipeline::for_variant(variant, self.config.span_threshold)?;
        let mut m = self.clone();
        m.config.variant = variant;
        Ok(m)
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline::for_variant(self.config.variant, self.config.span_threshold).expect("validated at construction")
    }

    pub fn prepare(&self, inst: &Instance) -> Result<Prepared> {
        Ok(Prepared {
            id: inst.id.clone(),
            pair: pair_from_instance(&self.vocab, inst, self.config.encoder.max_len)?,
            gold: inst.polarity,
            length: inst.len(),
        })
    }

    pub fn prepare_all(&self, insts: &[Instance]) -> Result<Vec<Prepared>> {
        insts.iter().map(|i| self.prepare(i)).collect()
    }

    /// Runs `pipeline` on one prepared instance inside `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        ex: &Prepared,
        pipeline: &Pipeline,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let l = &self.layout;
        let enc = l.encoder.encode(g, p, &ex.pair, &ex.id, self.embeddings(), opts.pad_to)?;
        let aspect: TokenSpan = ex.pair.aspect;
        let masks = match pipeline.representation {
            Representation::Enhanced => {
                let dv = span::relative_distances(enc.n, aspect.start, aspect.len)?;
                let l_max = pipeline.spans.iter().copied().max().unwrap_or(0);
                Some(span::build_masks(&dv, l_max))
            }
            Representation::Raw => None,
        };
        let mut span_outputs = Vec::with_capacity(pipeline.spans.len());
        let mut traces = Vec::new();
        for &size in &pipeline.spans {
            let keys = match &masks {
                Some(m) => {
                    let h_span = span::apply_mask(g, enc.h, m.mask(size))?;
                    span::enhance(g, p, &l.span, h_span, enc.h)?
                }
                None => enc.h,
            };
            let query = match pipeline.query {
                QuerySource::Cls => attention::cls_query(g, p, &l.attention, keys)?,
                QuerySource::AspectMean => attention::mean_rows(g, keys, aspect.start, aspect.len)?,
            };
            let (y_a, weights) = attention::attend(g, p, &l.attention, query, keys, &enc.valid, opts.trace)?;
            if let Some(w) = weights {
                traces.push(SpanTrace::from_heads(size, w));
            }
            span_outputs.push(attention::sentiment_proj(g, p, &l.projection, y_a)?);
        }
        let pooled = attention::pool(g, &span_outputs, pipeline.pooling)?;
        let logits = g.linear(pooled, p.var(l.wo), Some(p.var(l.bo)))?;
        Ok(ForwardOutput {
            logits,
            span_outputs,
            traces,
        })
    }

    pub fn predict_prepared(&self, ex: &Prepared, trace: bool) -> Result<Prediction> {
        self.predict_with(ex, &self.pipeline(), &ForwardOptions { trace, pad_to: None })
    }

    pub fn predict_with(&self, ex: &Prepared, pipeline: &Pipeline, opts: &ForwardOptions) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward_graph(&mut g, &p, ex, pipeline, opts)?;
        let logits = g.value(out.logits).data().to_vec();
        let probs = softmax_values(&logits, &[true; NUM_CLASSES]).expect("non-empty logits");
        Ok(Prediction {
            label: predict_from_probs(&probs),
            logits,
            probs,
            traces: out.traces,
        })
    }

    /// Full forward pass on a raw instance.
    pub fn forward(&self, inst: &Instance, trace: bool) -> Result<Prediction> {
        self.predict_prepared(&self.prepare(inst)?, trace)
    }

    /// Lays out a raw sentence and aspect string; the aspect must occur
    /// exactly once in the sentence. `id` keys the precomputed embeddings.
    /// The gold label of the result is a placeholder.
    pub fn prepare_text(&self, id: &str, sentence: &str, aspect: &str) -> Result<Prepared> {
        let pair = tokenize_pair(&self.vocab, sentence, aspect, self.config.encoder.max_len)?;
        Ok(Prepared {
            id: id.to_string(),
            length: pair.n,
            pair,
            gold: Polarity::Neutral,
        })
    }

    pub fn predict_text(&self, id: &str, sentence: &str, aspect: &str, trace: bool) -> Result<Prediction> {
        self.predict_prepared(&self.prepare_text(id, sentence, aspect)?, trace)
    }

    pub fn predict(&self, inst: &Instance) -> Result<Polarity> {
        Ok(self.forward(inst, false)?.label)
    }

    /// Summed cross-entropy over `batch` plus `λ Σ θ²` over trainable
    /// parameters, built inside `g`.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, batch: &[Prepared]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        let pipeline = self.pipeline();
        let opts = ForwardOptions::default();
        let mut total: Option<Var> = None;
        for ex in batch {
            let out = self.forward_graph(g, p, ex, &pipeline, &opts)?;
            let ce = g.cross_entropy_logits(out.logits, ex.gold.index())?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        let mut total = total.expect("non-empty batch");
        if self.config.lambda > 0.0 {
            let mut reg: Option<Var> = None;
            for (entry, &v) in self.store.entries().iter().zip(p.vars()) {
                if !entry.trainable {
                    continue;
                }
                let sq = g.sum_squares(v);
                reg = Some(match reg {
                    Some(r) => g.add(r, sq)?,
                    None => sq,
                });
            }
            if let Some(r) = reg {
                let r = g.scale(r, self.config.lambda);
                total = g.add(total, r)?;
            }
        }
        Ok(total)
    }

    pub fn loss(&self, batch: &[Prepared]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let l = self.loss_graph(&mut g, &p, batch)?;
        Ok(g.value(l).item())
    }

    /// Loss value and one gradient per parameter, in store order.
    pub fn loss_and_grads(&self, batch: &[Prepared]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let l = self.loss_graph(&mut g, &p, batch)?;
        g.backward(l)?;
        Ok((g.value(l).item(), p.grads(&g)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.store.entries().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        let mut model = Model::new(ck.config, ck.vocab, 0)?;
        if model.store.len() != ck.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for (slot, saved) in model.store.entries_mut().iter_mut().zip(ck.params) {
            if slot.name != saved.name || slot.value.shape() != saved.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    saved.name,
                    saved.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            *slot = saved;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, json).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Model::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "aoan-checkpoint-v1";

/// Self-describing model container: configuration, vocabulary and named
/// parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<NamedParam>,
}
