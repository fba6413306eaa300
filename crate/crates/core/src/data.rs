//! Dataset ingestion: SemEval-2014 Task 4 XML, the three-line Twitter format,
//! the canonical JSONL instance format and corpus statistics.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentiment polarity. The discriminant is the class index used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Token interval in a sentence. `start` is 1-based so that it doubles as the
/// row index into an encoded sequence whose row 0 is the class token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub len: usize,
}

impl TokenSpan {
    pub fn new(start: usize, len: usize) -> Self {
        TokenSpan { start, len }
    }

    /// Last covered position, inclusive.
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end()
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end())
    }
}

/// One (sentence, aspect) classification example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub split: Split,
    pub sentence: String,
    pub tokens: Vec<String>,
    pub aspect: String,
    pub aspect_span: TokenSpan,
    pub polarity: Polarity,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        split: Split,
        sentence: impl Into<String>,
        tokens: Vec<String>,
        aspect: impl Into<String>,
        aspect_span: TokenSpan,
        polarity: Polarity,
    ) -> Result<Self> {
        let inst = Instance {
            id: id.into(),
            split,
            sentence: sentence.into(),
            tokens,
            aspect: aspect.into(),
            aspect_span,
            polarity,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Alignment {
                instance: self.id.clone(),
                message: "sentence has no tokens".into(),
            });
        }
        let span = self.aspect_span;
        if span.start == 0 || span.len == 0 || span.start + span.len - 1 > self.tokens.len() {
            return Err(Error::Span {
                start: span.start,
                len: span.len,
                n: self.tokens.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn aspect_tokens(&self) -> &[String] {
        &self.tokens[self.aspect_span.start - 1..self.aspect_span.end()]
    }
}

/// A token with its character (not byte) offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on whitespace; every punctuation or symbol character
/// is a token of its own, alphanumeric runs are kept whole.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<Token> = None;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            let tok = current.get_or_insert_with(|| Token {
                text: String::new(),
                start: i,
                end: i,
            });
            tok.text.extend(ch.to_lowercase());
            tok.end = i + 1;
            continue;
        }
        out.extend(current.take());
        if !ch.is_whitespace() {
            out.push(Token {
                text: ch.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        }
    }
    out.extend(current);
    out
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).collect()
}

/// Smallest token interval covering characters `[from, to)`; tokens cut by
/// the range are included whole.
pub fn align_char_span(text: &str, from: usize, to: usize) -> Result<TokenSpan> {
    let chars = text.chars().count();
    let err = |message: String| Error::Alignment {
        instance: format!("{text:?}"),
        message,
    };
    if from >= to || to > chars {
        return Err(err(format!("offsets {from}..{to} invalid for {chars} characters")));
    }
    let covered: Vec<usize> = tokenize(text)
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < to && t.end > from)
        .map(|(i, _)| i + 1)
        .collect();
    match (covered.first(), covered.last()) {
        (Some(&first), Some(&last)) => Ok(TokenSpan::new(first, last - first + 1)),
        _ => Err(err(format!("offsets {from}..{to} cover no token"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDataset {
    pub instances: Vec<Instance>,
    /// Aspect terms labelled `conflict`, which are not emitted.
    pub dropped_conflict: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::storage(path, e))
}

/// Parses a SemEval-2014 Task 4 file: one instance per `aspectTerm`.
pub fn parse_semeval_xml(path: &Path, split: Split) -> Result<ParsedDataset> {
    parse_semeval_str(&read_text(path)?, path, split)
}

pub fn parse_semeval_str(xml: &str, path: &Path, split: Split) -> Result<ParsedDataset> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.pos().row as usize,
        message: e.to_string(),
    })?;
    let parse_err = |node: roxmltree::Node, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: doc.text_pos_at(node.range().start).row as usize,
        message,
    };
    let mut instances = Vec::new();
    let mut dropped_conflict = 0;
    for sentence in doc.descendants().filter(|n| n.has_tag_name("sentence")) {
        let sid = sentence.attribute("id").unwrap_or("?");
        let text = sentence
            .children()
            .find(|n| n.has_tag_name("text"))
            .and_then(|n| n.text())
            .ok_or_else(|| parse_err(sentence, format!("sentence {sid} has no <text>")))?;
        let terms = sentence
            .descendants()
            .filter(|n| n.has_tag_name("aspectTerm"));
        for (k, term) in terms.enumerate() {
            let id = format!("{sid}#{k}");
            let attr = |name: &str| {
                term.attribute(name)
                    .ok_or_else(|| parse_err(term, format!("aspectTerm in {sid} lacks {name:?}")))
            };
            let polarity = attr("polarity")?;
            if polarity == "conflict" {
                dropped_conflict += 1;
                continue;
            }
            let polarity: Polarity = polarity.parse().map_err(|m| parse_err(term, m))?;
            let offset = |name: &str| -> Result<usize> {
                attr(name)?
                    .parse()
                    .map_err(|e| parse_err(term, format!("bad {name:?} offset: {e}")))
            };
            let (from, to) = (offset("from")?, offset("to")?);
            let span = align_char_span(text, from, to).map_err(|e| Error::Alignment {
                instance: id.clone(),
                message: e.to_string(),
            })?;
            instances.push(Instance::new(
                id,
                split,
                text,
                tokenize_words(text),
                attr("term")?,
                span,
                polarity,
            )?);
        }
    }
    Ok(ParsedDataset {
        instances,
        dropped_conflict,
    })
}

pub const TWITTER_PLACEHOLDER: &str = "$T$";

/// Parses the three-line Twitter format: a sentence with a `$T$` placeholder,
/// the target, and a polarity code in {-1, 0, 1}.
pub fn parse_twitter(path: &Path, split: Split) -> Result<ParsedDataset> {
    parse_twitter_str(&read_text(path)?, path, split)
}

pub fn parse_twitter_str(text: &str, path: &Path, split: Split) -> Result<ParsedDataset> {
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    if lines.len() % 3 != 0 {
        let start = lines.len() - lines.len() % 3 + 1;
        return Err(err(start, "dangling record: expected 3 lines per record".into()));
    }
    let mut instances = Vec::with_capacity(lines.len() / 3);
    for (k, rec) in lines.chunks(3).enumerate() {
        let line = k * 3 + 1;
        let (template, target, code) = (rec[0].trim(), rec[1].trim(), rec[2].trim());
        let polarity = match code {
            "-1" => Polarity::Negative,
            "0" => Polarity::Neutral,
            "1" => Polarity::Positive,
            other => return Err(err(line + 2, format!("polarity code {other:?} not in {{-1, 0, 1}}"))),
        };
        let Some(at) = template.find(TWITTER_PLACEHOLDER) else {
            return Err(err(line, format!("missing {TWITTER_PLACEHOLDER} placeholder")));
        };
        if target.is_empty() {
            return Err(err(line + 1, "empty target".into()));
        }
        let left = &template[..at];
        let right = &template[at + TWITTER_PLACEHOLDER.len()..];
        let sentence = format!("{left}{target}{right}");
        let from = left.chars().count();
        let to = from + target.chars().count();
        let id = format!("twitter-{split}-{k}");
        let span = align_char_span(&sentence, from, to).map_err(|e| Error::Alignment {
            instance: id.clone(),
            message: e.to_string(),
        })?;
        let tokens = tokenize_words(&sentence);
        instances.push(Instance::new(id, split, sentence, tokens, target, span, polarity)?);
    }
    Ok(ParsedDataset {
        instances,
        dropped_conflict: 0,
    })
}

/// Writes one JSON record per line.
pub fn write_canonical(instances: &[Instance], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::storage(path, e))?;
    }
    w.flush().map_err(|e| Error::storage(path, e))
}

pub fn read_canonical(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::storage(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Class counts per split and average sentence length in tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// `[split][polarity]`, split 0 = train, 1 = test.
    pub counts: [[usize; 3]; 2],
    pub total: usize,
    pub avg_len: f64,
    pub avg_len_by_split: [f64; 2],
}

impl CorpusStats {
    pub fn count(&self, split: Split, polarity: Polarity) -> usize {
        self.counts[split as usize][polarity.index()]
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("split  positive  negative  neutral  total  avg_len\n");
        for split in [Split::Train, Split::Test] {
            let row = self.counts[split as usize];
            s.push_str(&format!(
                "{:<5}  {:>8}  {:>8}  {:>7}  {:>5}  {:>7.2}\n",
                split.as_str(),
                row[0],
                row[1],
                row[2],
                row.iter().sum::<usize>(),
                self.avg_len_by_split[split as usize]
            ));
        }
        s
    }
}

pub fn stats(instances: &[Instance]) -> CorpusStats {
    let mut st = CorpusStats {
        total: instances.len(),
        ..Default::default()
    };
    let mut len_sum = [0usize; 2];
    for inst in instances {
        let s = inst.split as usize;
        st.counts[s][inst.polarity.index()] += 1;
        len_sum[s] += inst.len();
    }
    let total_len: usize = len_sum.iter().sum();
    if st.total > 0 {
        st.avg_len = total_len as f64 / st.total as f64;
    }
    for s in 0..2 {
        let n: usize = st.counts[s].iter().sum();
        if n > 0 {
            st.avg_len_by_split[s] = len_sum[s] as f64 / n as f64;
        }
    }
    st
}

/// The three public benchmarks and their published class counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Laptop,
    Restaurant,
    Twitter,
}

impl Benchmark {
    /// `[split][polarity]` counts, positive/negative/neutral.
    pub fn reference_counts(self) -> [[usize; 3]; 2] {
        match self {
            Benchmark::Laptop => [[944, 870, 464], [341, 128, 169]],
            Benchmark::Restaurant => [[2164, 807, 637], [728, 196, 196]],
            Benchmark::Twitter => [[1561, 1560, 3127], [173, 173, 346]],
        }
    }

    /// Average test-sentence length used as the long/short boundary.
    pub fn length_threshold(self) -> usize {
        match self {
            Benchmark::Laptop => 21,
            Benchmark::Restaurant => 23,
            Benchmark::Twitter => 26,
        }
    }

    pub fn default_span_threshold(self) -> usize {
        match self {
            Benchmark::Laptop | Benchmark::Restaurant => 10,
            Benchmark::Twitter => 0,
        }
    }

    pub fn is_semeval(self) -> bool {
        !matches!(self, Benchmark::Twitter)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Laptop => "laptop",
            Benchmark::Restaurant => "restaurant",
            Benchmark::Twitter => "twitter",
        }
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "laptop" => Ok(Benchmark::Laptop),
            "restaurant" => Ok(Benchmark::Restaurant),
            "twitter" => Ok(Benchmark::Twitter),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMismatch {
    pub split: Split,
    pub polarity: Polarity,
    pub expected: usize,
    pub found: usize,
}

/// Cells of `stats` that differ from the published counts for `split`.
pub fn compare_reference(stats: &CorpusStats, bench: Benchmark, split: Split) -> Vec<CountMismatch> {
    let reference = bench.reference_counts();
    Polarity::ALL
        .iter()
        .filter_map(|&p| {
            let expected = reference[split as usize][p.index()];
            let found = stats.count(split, p);
            (expected != found).then_some(CountMismatch {
                split,
                polarity: p,
                expected,
                found,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize_words("Food is good"), words(&["food", "is", "good"]));
        assert_eq!(
            tokenize_words("The mini's body - great!"),
            words(&["the", "mini", "'", "s", "body", "-", "great", "!"])
        );
        let toks = tokenize("  Héllo, W");
        assert_eq!(toks[0], Token { text: "héllo".into(), start: 2, end: 7 });
        assert_eq!(toks[1].start, 7);
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_char_span("Food is good", 0, 4).unwrap(), TokenSpan::new(1, 1));
        assert_eq!(align_char_span("Food is good", 5, 12).unwrap(), TokenSpan::new(2, 2));
        // cutting into "good" expands to the whole token
        assert_eq!(align_char_span("Food is good", 9, 10).unwrap(), TokenSpan::new(3, 1));
        assert!(align_char_span("Food  is", 4, 5).is_err());
        assert!(align_char_span("Food", 2, 9).is_err());
        assert!(align_char_span("Food", 2, 2).is_err());
    }

    const XML: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="s1">
    <text>The food was great but the service &amp; staff were slow.</text>
    <aspectTerms>
      <aspectTerm term="food" polarity="positive" from="4" to="8"/>
      <aspectTerm term="service &amp; staff" polarity="negative" from="27" to="42"/>
    </aspectTerms>
  </sentence>
  <sentence id="s2"><text>No aspects here.</text></sentence>
  <sentence id="s3">
    <text>Price is ok.</text>
    <aspectTerms>
      <aspectTerm term="Price" polarity="conflict" from="0" to="5"/>
    </aspectTerms>
  </sentence>
</sentences>"#;

    #[test]
    fn semeval_fan_out_and_conflict_drop() {
        let parsed = parse_semeval_str(XML, Path::new("x.xml"), Split::Train).unwrap();
        assert_eq!(parsed.instances.len(), 2);
        assert_eq!(parsed.dropped_conflict, 1);
        let (a, b) = (&parsed.instances[0], &parsed.instances[1]);
        assert_eq!(a.sentence, b.sentence);
        assert_eq!(a.aspect_span, TokenSpan::new(2, 1));
        assert_eq!(b.aspect_tokens(), words(&["service", "&", "staff"]).as_slice());
        assert_eq!(b.polarity, Polarity::Negative);
    }

    #[test]
    fn semeval_errors() {
        let err = parse_semeval_str("<sentences><sentence>", Path::new("bad.xml"), Split::Test)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let off = XML.replace(r#"from="4" to="8""#, r#"from="4" to="99""#);
        let err = parse_semeval_str(&off, Path::new("x.xml"), Split::Train).unwrap_err();
        match err {
            Error::Alignment { instance, .. } => assert_eq!(instance, "s1#0"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn twitter_records() {
        let text = "i love $T$ so much\ntaylor swift\n1\n$T$ is meh\nmonday\n0\n";
        let parsed = parse_twitter_str(text, Path::new("t.txt"), Split::Train).unwrap();
        assert_eq!(parsed.instances.len(), 2);
        let a = &parsed.instances[0];
        assert_eq!(a.aspect_span, TokenSpan::new(3, 2));
        assert_eq!(a.polarity, Polarity::Positive);
        assert_eq!(parsed.instances[1].polarity, Polarity::Neutral);

        let bad = parse_twitter_str("a $T$\nx\n2\n", Path::new("t"), Split::Train).unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 3, .. }));
        let dangling = parse_twitter_str("a $T$\nx\n1\nb $T$\n", Path::new("t"), Split::Train)
            .unwrap_err();
        assert!(matches!(dangling, Error::Parse { line: 4, .. }));
    }

    #[test]
    fn stats_empty_and_counts() {
        let empty = stats(&[]);
        assert_eq!(empty, CorpusStats::default());

        let parsed = parse_semeval_str(XML, Path::new("x.xml"), Split::Train).unwrap();
        let st = stats(&parsed.instances);
        assert_eq!(st.count(Split::Train, Polarity::Positive), 1);
        assert_eq!(st.count(Split::Train, Polarity::Negative), 1);
        assert_eq!(st.total, 2);
        assert_eq!(st.avg_len, 12.0);
        let mism = compare_reference(&st, Benchmark::Laptop, Split::Train);
        assert_eq!(mism.len(), 3);
    }

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut insts = Vec::new();
        for i in 0..10 {
            let sent = format!("word{i} is fine , really {i}");
            insts.push(
                Instance::new(
                    format!("id{i}"),
                    if i % 2 == 0 { Split::Train } else { Split::Test },
                    sent.clone(),
                    tokenize_words(&sent),
                    format!("word{i}"),
                    TokenSpan::new(1, 1),
                    Polarity::from_index(i % 3).unwrap(),
                )
                .unwrap(),
            );
        }
        write_canonical(&insts, &path).unwrap();
        assert_eq!(read_canonical(&path).unwrap(), insts);
    }
}
