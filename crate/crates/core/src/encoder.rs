//! Sentence–aspect pair encoding.
//!
//! Produces `H`, an `(n+1) × d` matrix whose row 0 is the class-token row and
//! rows `1..=n` are the sentence tokens. The aspect segment of the pair takes
//! part in self-attention but its rows are dropped from `H`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize_words, Instance, TokenSpan};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

/// Token vocabulary with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from(vec![PAD.into(), UNK.into(), CLS.into(), SEP.into()])
    }
}

impl Vocab {
    /// Vocabulary over every sentence and aspect token of `corpus`, in
    /// first-occurrence order.
    pub fn build(corpus: &[Instance]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Ingest("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut vocab = Vocab::default();
        for inst in corpus {
            for tok in inst.tokens.iter().chain(&tokenize_words(&inst.aspect)) {
                vocab.insert(tok);
            }
        }
        Ok(vocab)
    }

    fn insert(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token ids laid out as `[CLS] sentence [SEP] aspect [SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIds {
    pub ids: Vec<usize>,
    /// Sentence token count after truncation.
    pub n: usize,
    /// Aspect location within the (truncated) sentence, 1-based.
    pub aspect: TokenSpan,
    /// The kept sentence tokens.
    pub tokens: Vec<String>,
}

impl PairIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lays out a pair from already-tokenized input, truncating the sentence so
/// the whole pair fits in `max_len`. The aspect segment is never cut; when the
/// aspect would fall past the cut, leading sentence tokens are dropped instead.
pub fn pair_from_tokens(
    vocab: &Vocab,
    sentence: &[String],
    aspect: TokenSpan,
    aspect_tokens: &[String],
    max_len: usize,
) -> Result<PairIds> {
    if sentence.is_empty() || aspect_tokens.is_empty() {
        return Err(Error::Alignment {
            instance: sentence.join(" "),
            message: "empty sentence or aspect".into(),
        });
    }
    let budget = max_len.checked_sub(aspect_tokens.len() + 3).unwrap_or(0);
    if budget < aspect.len {
        return Err(Error::Config(format!(
            "max length {max_len} cannot hold an aspect of {} tokens",
            aspect_tokens.len()
        )));
    }
    let (lo, hi) = if sentence.len() <= budget {
        (0, sentence.len())
    } else if aspect.end() <= budget {
        (0, budget)
    } else {
        let hi = aspect.end();
        (hi - budget, hi)
    };
    let kept = &sentence[lo..hi];
    let mut ids = Vec::with_capacity(kept.len() + aspect_tokens.len() + 3);
    ids.push(CLS_ID);
    ids.extend(kept.iter().map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    ids.extend(aspect_tokens.iter().map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    Ok(PairIds {
        ids,
        n: kept.len(),
        aspect: TokenSpan::new(aspect.start - lo, aspect.len),
        tokens: kept.to_vec(),
    })
}

/// Tokenizes a raw sentence–aspect pair. The aspect must occur exactly once
/// in the sentence tokens; zero or several matches are alignment errors.
pub fn tokenize_pair(vocab: &Vocab, sentence: &str, aspect: &str, max_len: usize) -> Result<PairIds> {
    let sent = tokenize_words(sentence);
    let asp = tokenize_words(aspect);
    if sent.is_empty() || asp.is_empty() {
        return Err(Error::Alignment {
            instance: sentence.into(),
            message: "sentence and aspect must be non-empty".into(),
        });
    }
    let hits: Vec<usize> = sent
        .windows(asp.len())
        .enumerate()
        .filter(|(_, w)| *w == asp.as_slice())
        .map(|(i, _)| i + 1)
        .collect();
    let start = match hits.as_slice() {
        [s] => *s,
        [] => {
            return Err(Error::Alignment {
                instance: sentence.into(),
                message: format!("aspect {aspect:?} not found in sentence tokens"),
            })
        }
        _ => {
            return Err(Error::Alignment {
                instance: sentence.into(),
                message: format!("aspect {aspect:?} occurs {} times; give a character offset", hits.len()),
            })
        }
    };
    pair_from_tokens(vocab, &sent, TokenSpan::new(start, asp.len()), &asp, max_len)
}

pub fn pair_from_instance(vocab: &Vocab, inst: &Instance, max_len: usize) -> Result<PairIds> {
    pair_from_tokens(vocab, &inst.tokens, inst.aspect_span, inst.aspect_tokens(), max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(EncoderKind::Toy),
            "precomputed" => Ok(EncoderKind::Precomputed),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Toy => "toy",
            EncoderKind::Precomputed => "precomputed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub trainable: bool,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Toy,
            dim: 32,
            layers: 1,
            heads: 4,
            trainable: true,
            max_len: 100,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("encoder width must be positive".into()));
        }
        if self.kind == EncoderKind::Toy && (self.heads == 0 || self.dim % self.heads != 0) {
            return Err(Error::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len < 5 {
            return Err(Error::Config(format!("max length {} is too small", self.max_len)));
        }
        Ok(())
    }
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    /// `(n+1) × d`, possibly followed by padded rows.
    pub h: Var,
    pub n: usize,
    /// One flag per row of `h`; false on padding.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SelfAttentionBlock {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Token + learned position embeddings followed by residual self-attention
/// blocks without normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<SelfAttentionBlock>,
    heads: usize,
}

impl ToyEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let t = cfg.trainable;
        let token_embedding = store.add("encoder.token_embedding", &[vocab_size, d], Init::GlorotUniform, t, rng);
        let position_embedding = store.add("encoder.position_embedding", &[cfg.max_len, d], Init::GlorotUniform, t, rng);
        let blocks = (0..cfg.layers)
            .map(|k| {
                let mut w = |name: &str| store.add(format!("encoder.block{k}.{name}"), &[d, d], Init::GlorotUniform, t, rng);
                let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
                let mut b = |name: &str| store.add(format!("encoder.block{k}.{name}"), &[d], Init::Zeros, t, rng);
                SelfAttentionBlock {
                    wq,
                    bq: b("bq"),
                    wk,
                    bk: b("bk"),
                    wv,
                    bv: b("bv"),
                    wo,
                    bo: b("bo"),
                }
            })
            .collect();
        ToyEncoder {
            token_embedding,
            position_embedding,
            blocks,
            heads: cfg.heads,
        }
    }

    /// Encodes `ids`, of which only the first `valid_len` are real tokens; the
    /// rest are padding and are excluded as attention keys.
    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize], valid_len: usize) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.gather_rows(p.var(self.token_embedding), ids)?;
        let pos = g.gather_rows(p.var(self.position_embedding), &positions)?;
        let mut x = g.add(tok, pos)?;
        let valid: Vec<bool> = (0..ids.len()).map(|i| i < valid_len).collect();
        for block in &self.blocks {
            let attn = self.self_attention(g, p, block, x, &valid)?;
            x = g.add(x, attn)?;
        }
        Ok(x)
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        b: &SelfAttentionBlock,
        x: Var,
        valid: &[bool],
    ) -> Result<Var> {
        let d = g.shape(x)[1];
        let dk = d / self.heads;
        let q = g.linear(x, p.var(b.wq), Some(p.var(b.bq)))?;
        let k = g.linear(x, p.var(b.wk), Some(p.var(b.bk)))?;
        let v = g.linear(x, p.var(b.wv), Some(p.var(b.bv)))?;
        let mut out: Option<Var> = None;
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dk, dk)?;
            let kh = g.slice_last(k, h * dk, dk)?;
            let vh = g.slice_last(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let weights = g.softmax_masked(scores, valid)?;
            let head = g.matmul(weights, vh)?;
            out = Some(match out {
                Some(acc) => g.concat_last(acc, head)?,
                None => head,
            });
        }
        let heads = out.expect("at least one head");
        Ok(g.linear(heads, p.var(b.wo), Some(p.var(b.bo)))?)
    }
}

/// Per-instance `(n+1) × d` matrices computed by an external encoder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    entries: HashMap<String, Tensor>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, matrix: Tensor) -> Result<()> {
        if matrix.rank() != 2 || matrix.shape()[1] != self.dim {
            return Err(Error::Config(format!(
                "embedding of shape {:?} does not match width {}",
                matrix.shape(),
                self.dim
            )));
        }
        self.entries.insert(id.into(), matrix);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads the text format: a `dim=<d>` header, then for every instance an
    /// `id=<id> rows=<k>` line followed by `k` rows of `d` numbers.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let store = Self::parse(&text, path)?;
        if let Some(d) = expected_dim {
            if d != store.dim {
                return Err(Error::Config(format!(
                    "embedding file width {} does not match model width {d}",
                    store.dim
                )));
            }
        }
        Ok(store)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty embedding file".into()))?;
        let dim: usize = header
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| err(hl, format!("expected `dim=<d>` header, found {header:?}")))?;
        let mut store = EmbeddingStore::new(dim);
        while let Some((ln, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            let id = parts.next().and_then(|p| p.strip_prefix("id="));
            let rows = parts
                .next()
                .and_then(|p| p.strip_prefix("rows="))
                .and_then(|r| r.parse::<usize>().ok());
            let (Some(id), Some(rows), None) = (id, rows, parts.next()) else {
                return Err(err(ln, format!("expected `id=<id> rows=<k>`, found {line:?}")));
            };
            let mut data = Vec::with_capacity(rows * dim);
            for r in 0..rows {
                let (rl, row) = lines
                    .next()
                    .ok_or_else(|| err(ln, format!("instance {id}: file ends after {r} of {rows} rows")))?;
                if row.starts_with("id=") {
                    return Err(err(rl, format!("instance {id}: expected {rows} rows, found {r}")));
                }
                let vals: std::result::Result<Vec<f64>, _> = row.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|e| err(rl, format!("bad number: {e}")))?;
                if vals.len() != dim {
                    return Err(err(rl, format!("row has {} values, expected {dim}", vals.len())));
                }
                data.extend(vals);
            }
            let matrix = Tensor::new(vec![rows, dim], data)?;
            store.insert(id, matrix)?;
        }
        Ok(store)
    }

    /// Writes the format read by [`EmbeddingStore::parse`], ids sorted.
    pub fn to_text(&self) -> String {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        let mut s = format!("dim={}\n", self.dim);
        for id in ids {
            let m = &self.entries[id];
            let _ = writeln!(s, "id={id} rows={}", m.shape()[0]);
            for row in m.to_rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(s, "{}", cells.join(" "));
            }
        }
        s
    }
}

/// Either a trainable toy encoder or a fixed lookup of precomputed vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Toy(ToyEncoder),
    Precomputed,
}

impl Encoder {
    /// Encodes a prepared pair. `pad_to` appends `[PAD]` tokens up to that
    /// total length; padded rows are excluded from self-attention as keys.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        pair: &PairIds,
        instance_id: &str,
        store: Option<&EmbeddingStore>,
        pad_to: Option<usize>,
    ) -> Result<EncodedSequence> {
        let n = pair.n;
        match self {
            Encoder::Toy(toy) => {
                let mut ids = pair.ids.clone();
                if let Some(total) = pad_to {
                    ids.resize(total.max(ids.len()), PAD_ID);
                }
                let x = toy.forward(g, p, &ids, pair.len())?;
                let h = g.slice_rows(x, 0, n + 1)?;
                Ok(EncodedSequence {
                    h,
                    n,
                    valid: vec![true; n + 1],
                })
            }
            Encoder::Precomputed => {
                let store = store.ok_or_else(|| Error::Config("precomputed encoder without an embedding store".into()))?;
                let m = store.get(instance_id)?;
                if m.shape()[0] < n + 1 {
                    return Err(Error::Config(format!(
                        "instance {instance_id}: {} embedding rows for {} tokens",
                        m.shape()[0],
                        n
                    )));
                }
                let full = g.constant(m.clone());
                let h = g.slice_rows(full, 0, n + 1)?;
                Ok(EncodedSequence {
                    h,
                    n,
                    valid: vec![true; n + 1],
                })
            }
        }
    }
}
