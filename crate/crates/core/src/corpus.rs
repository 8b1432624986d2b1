//! Dialogue corpora: the synthetic desk-scale world, JSONL ingestion and
//! id-hash splits.
//!
//! JSONL schema, one object per line:
//!
//! ```text
//! {"id": "...", "context": ["turn", ...], "response": "...", "source": "human" | "model:<name>"}
//! ```
//!
//! Text is tokenized by lowercasing and splitting on whitespace.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{fnv1a64, RngStream};
use crate::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Longest utterance kept, in tokens.
pub const DEFAULT_MAX_LEN: usize = 16;
/// Most context turns kept (the most recent ones).
pub const MAX_CONTEXT_TURNS: usize = 3;

/// A token sequence. Corpus utterances are never empty; generated responses
/// may be (a generator is allowed to stop immediately).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Utterance(pub Vec<TokenId>);

impl Utterance {
    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for Utterance {
    fn from(tokens: Vec<TokenId>) -> Self {
        Utterance(tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub context: Vec<Utterance>,
    pub human_response: Utterance,
    /// `(source name, response)` pairs from `model:<name>` records.
    pub machine_responses: Vec<(String, Utterance)>,
}

impl Dialogue {
    /// All context tokens in order, turn after turn.
    pub fn context_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.context.iter().flat_map(|u| u.0.iter().copied())
    }
}

/// Token string <-> id table. Ids 0, 1, 2 are BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// FNV-1a of the newline-joined token list; identifies a vocabulary in
    /// checkpoint manifests.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.tokens.join("\n").as_bytes())
    }

    /// Lowercased whitespace tokenization; unknown words become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK)).collect()
    }

    fn encode_mut(&mut self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.insert(&w.to_lowercase())).collect()
    }

    pub fn decode(&self, utt: &Utterance) -> String {
        utt.0.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) || line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("bad vocab entry {line:?}"),
                });
            }
            v.insert(line);
        }
        if v.tokens.len() < RESERVED.len() || v.tokens[..3] != RESERVED {
            return Err(Error::Data(format!("{}: vocab must start with {RESERVED:?}", path.display())));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Eval,
}

impl Split {
    /// Stable 64-bit hash of the id, mod 10: 0-7 train, 8 valid, 9 eval.
    pub fn of_id(id: &str) -> Split {
        match fnv1a64(id.as_bytes()) % 10 {
            0..=7 => Split::Train,
            8 => Split::Valid,
            _ => Split::Eval,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Eval => "eval",
        })
    }
}

/// Immutable once built.
#[derive(Debug, Clone)]
pub struct Corpus {
    vocab: Vocab,
    dialogues: Vec<Dialogue>,
    splits: Vec<Split>,
    by_id: HashMap<String, usize>,
    max_len: usize,
}

impl Corpus {
    pub fn new(vocab: Vocab, dialogues: Vec<Dialogue>, max_len: usize) -> Result<Self> {
        if vocab.tokens.len() < 3 || vocab.tokens[..3] != RESERVED {
            return Err(Error::Data("vocab must start with reserved BOS, EOS, UNK".into()));
        }
        let mut by_id = HashMap::with_capacity(dialogues.len());
        let vlen = vocab.len() as TokenId;
        for (i, d) in dialogues.iter().enumerate() {
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate dialogue id {:?}", d.id)));
            }
            if d.context.is_empty() {
                return Err(Error::Data(format!("dialogue {:?} has an empty context", d.id)));
            }
            let utts = d.context.iter().chain(std::iter::once(&d.human_response));
            for u in utts {
                if u.is_empty() || u.len() > max_len {
                    return Err(Error::Data(format!(
                        "dialogue {:?}: utterance length {} outside 1..={max_len}",
                        d.id,
                        u.len()
                    )));
                }
                if u.0.iter().any(|&t| t >= vlen) {
                    return Err(Error::Data(format!("dialogue {:?}: token id out of vocabulary", d.id)));
                }
            }
        }
        let splits = dialogues.iter().map(|d| Split::of_id(&d.id)).collect();
        Ok(Corpus { vocab, dialogues, splits, by_id, max_len })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.index_of(id).map(|i| &self.dialogues[i])
    }

    /// Dialogue indices in `split`, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.dialogues.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// The dialogues of one split as a corpus of their own (same vocab).
    pub fn subset(&self, split: Split) -> Corpus {
        let dialogues = self.split_indices(split).into_iter().map(|i| self.dialogues[i].clone()).collect();
        Corpus::new(self.vocab.clone(), dialogues, self.max_len).expect("subset of a valid corpus")
    }

    /// Human response of a dialogue drawn uniformly among those whose id is
    /// not `exclude_id`.
    pub fn sample_random_response(&self, exclude_id: &str, rng: &mut RngStream) -> Result<&Utterance> {
        let n = self.dialogues.len();
        if n < 2 {
            return Err(Error::Data("random response needs a corpus of at least 2 dialogues".into()));
        }
        let idx = match self.index_of(exclude_id) {
            Some(ex) => {
                let k = rng.below(n - 1);
                if k >= ex {
                    k + 1
                } else {
                    k
                }
            }
            None => rng.below(n),
        };
        Ok(&self.dialogues[idx].human_response)
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for d in &self.dialogues {
            let context: Vec<String> = d.context.iter().map(|u| self.vocab.decode(u)).collect();
            out.push(Record {
                id: d.id.clone(),
                context: context.clone(),
                response: self.vocab.decode(&d.human_response),
                source: "human".into(),
            });
            for (name, resp) in &d.machine_responses {
                out.push(Record {
                    id: d.id.clone(),
                    context: context.clone(),
                    response: self.vocab.decode(resp),
                    source: format!("model:{name}"),
                });
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in self.to_records() {
            serde_json::to_writer(&mut w, &r).map_err(|e| Error::Data(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub context: Vec<String>,
    pub response: String,
    pub source: String,
}

impl Record {
    /// `None` for human records, `Some(name)` for `model:<name>`.
    pub fn model_name(&self) -> std::result::Result<Option<&str>, String> {
        if self.source == "human" {
            Ok(None)
        } else if let Some(name) = self.source.strip_prefix("model:") {
            if name.is_empty() {
                Err("empty model name in source".into())
            } else {
                Ok(Some(name))
            }
        } else {
            Err(format!("source must be \"human\" or \"model:<name>\", got {:?}", self.source))
        }
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.context.is_empty() {
            return Err("context must contain at least one turn".into());
        }
        if self.context.iter().any(|t| t.split_whitespace().next().is_none()) {
            return Err("context turn has no tokens".into());
        }
        if self.response.split_whitespace().next().is_none() {
            return Err("response has no tokens".into());
        }
        self.model_name().map(|_| ())
    }
}

/// How `load_jsonl` obtains its vocabulary.
#[derive(Debug, Clone)]
pub enum VocabPolicy {
    /// Grow a fresh vocabulary from the file in first-seen order.
    Build,
    /// Keep the given vocabulary; unknown words map to UNK.
    UseExisting(Vocab),
}

fn read_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.check_shape().map_err(parse_err)?;
        out.push((i + 1, rec));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(out)
}

fn truncate(mut tokens: Vec<TokenId>, max_len: usize) -> Utterance {
    tokens.truncate(max_len);
    Utterance(tokens)
}

pub fn load_jsonl(path: &Path, policy: VocabPolicy) -> Result<Corpus> {
    load_jsonl_with(path, policy, DEFAULT_MAX_LEN)
}

/// Loads a corpus. Human records become dialogues; `model:<name>` records are
/// attached to the dialogue with the same id as machine responses. Utterances
/// longer than `max_len` are truncated and only the last
/// [`MAX_CONTEXT_TURNS`] context turns are kept.
pub fn load_jsonl_with(path: &Path, policy: VocabPolicy, max_len: usize) -> Result<Corpus> {
    let records = read_records(path)?;
    let (mut vocab, build) = match policy {
        VocabPolicy::Build => (Vocab::new(), true),
        VocabPolicy::UseExisting(v) => (v, false),
    };
    let mut encode = |text: &str| {
        let toks = if build { vocab.encode_mut(text) } else { vocab.encode(text) };
        truncate(toks, max_len)
    };

    let mut dialogues: Vec<Dialogue> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut machine: Vec<(usize, Record)> = Vec::new();
    for (line, rec) in records {
        if rec.model_name().expect("checked").is_some() {
            machine.push((line, rec));
            continue;
        }
        if by_id.contains_key(&rec.id) {
            return Err(Error::Parse { path: path.to_path_buf(), line, msg: format!("duplicate id {:?}", rec.id) });
        }
        let skip = rec.context.len().saturating_sub(MAX_CONTEXT_TURNS);
        let context = rec.context[skip..].iter().map(|t| encode(t)).collect();
        let human_response = encode(&rec.response);
        by_id.insert(rec.id.clone(), dialogues.len());
        dialogues.push(Dialogue { id: rec.id, context, human_response, machine_responses: Vec::new() });
    }
    for (line, rec) in machine {
        let Some(&idx) = by_id.get(&rec.id) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("model response for unknown id {:?}", rec.id),
            });
        };
        let name = rec.model_name().expect("checked").expect("model record").to_string();
        let resp = encode(&rec.response);
        dialogues[idx].machine_responses.push((name, resp));
    }
    if dialogues.is_empty() {
        return Err(Error::Data(format!("{}: no human records", path.display())));
    }
    drop(encode);
    Corpus::new(vocab, dialogues, max_len)
}

/// Responses of one external attacker, keyed by dialogue id. Every record must
/// carry `source = "model:<name>"` with a single name across the file.
pub fn load_external_responses(path: &Path, vocab: &Vocab, max_len: usize) -> Result<(String, HashMap<String, Utterance>)> {
    let records = read_records(path)?;
    let mut name: Option<String> = None;
    let mut out = HashMap::new();
    for (line, rec) in records {
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let this = rec.model_name().expect("checked").ok_or_else(|| err("external attacker records must use source \"model:<name>\"".into()))?;
        match &name {
            None => name = Some(this.to_string()),
            Some(n) if n != this => return Err(err(format!("mixed model names {n:?} and {this:?}"))),
            Some(_) => {}
        }
        let resp = truncate(vocab.encode(&rec.response), max_len);
        if out.insert(rec.id.clone(), resp).is_some() {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
    }
    Ok((name.expect("at least one record"), out))
}

/// Parameters of the synthetic dialogue world.
///
/// Each dialogue has a topic. Its context is 1-3 turns of filler words with the
/// topic keyword planted exactly once. The human response is the topic's
/// answer bigram, then the keyword (with probability `keyword_copy_prob`) or a
/// filler word, then 0-3 more filler words.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorldSpec {
    pub num_topics: usize,
    pub num_dialogues: usize,
    pub keyword_copy_prob: f64,
    pub noise_vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthWorldSpec {
    fn default() -> Self {
        Self { num_topics: 20, num_dialogues: 5000, keyword_copy_prob: 0.9, noise_vocab_size: 80, seed: 0 }
    }
}

impl SynthWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_dialogues == 0 {
            return Err(Error::Config("num_dialogues must be ≥ 1".into()));
        }
        if self.num_topics < 2 {
            return Err(Error::Config("num_topics must be ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&self.keyword_copy_prob) {
            return Err(Error::Config("keyword_copy_prob must be in [0, 1]".into()));
        }
        if self.noise_vocab_size == 0 {
            return Err(Error::Config("noise_vocab_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub fn keyword_token(topic: usize) -> String {
    format!("kw{topic}")
}

fn answer_tokens(topic: usize) -> [String; 2] {
    [format!("ans{topic}a"), format!("ans{topic}b")]
}

/// Builds the synthetic corpus. Deterministic in `spec`.
pub fn generate_synthetic(spec: &SynthWorldSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut vocab = Vocab::new();
    let keywords: Vec<TokenId> = (0..spec.num_topics).map(|k| vocab.insert(&keyword_token(k))).collect();
    let answers: Vec<[TokenId; 2]> = (0..spec.num_topics)
        .map(|k| {
            let [a, b] = answer_tokens(k);
            [vocab.insert(&a), vocab.insert(&b)]
        })
        .collect();
    let noise: Vec<TokenId> = (0..spec.noise_vocab_size).map(|j| vocab.insert(&format!("w{j}"))).collect();

    let mut rng = RngStream::new(spec.seed).substream("synthetic-world");
    let mut dialogues = Vec::with_capacity(spec.num_dialogues);
    for i in 0..spec.num_dialogues {
        let topic = rng.below(spec.num_topics);
        let turns = 1 + rng.below(MAX_CONTEXT_TURNS);
        let mut context: Vec<Utterance> = (0..turns)
            .map(|_| {
                let len = 2 + rng.below(4);
                Utterance((0..len).map(|_| *rng.choose(&noise)).collect())
            })
            .collect();
        let turn = rng.below(turns);
        let pos = rng.below(context[turn].len() + 1);
        context[turn].0.insert(pos, keywords[topic]);

        let mut resp = answers[topic].to_vec();
        if rng.bernoulli(spec.keyword_copy_prob) {
            resp.push(keywords[topic]);
        } else {
            resp.push(*rng.choose(&noise));
        }
        let extra = rng.below(4);
        resp.extend((0..extra).map(|_| *rng.choose(&noise)));

        dialogues.push(Dialogue {
            id: format!("s{}-{i:06}", spec.seed),
            context,
            human_response: Utterance(resp),
            machine_responses: Vec::new(),
        });
    }
    Corpus::new(vocab, dialogues, DEFAULT_MAX_LEN)
}

/// Topic of a synthetic dialogue, recovered from its context keyword.
pub fn synthetic_topic(corpus: &Corpus, dialogue: &Dialogue) -> Option<usize> {
    dialogue.context_tokens().find_map(|t| {
        corpus.vocab().token(t).strip_prefix("kw").and_then(|k| k.parse().ok())
    })
}
