//! Text encoder interface shared by the user and location branches, a
//! hashing tokenizer, and a small single-layer attention encoder that is
//! cheap enough for finite-difference testing.

use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Summary token, always at position 0.
pub const CLS_TOKEN: usize = 0;
/// Emitted for whitespace at either end of a text, so `"Tokyo "` and
/// `"Tokyo"` tokenize differently.
pub const SPACE_TOKEN: usize = 1;
const RESERVED_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub has_cls: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A token with the byte range of the text it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub id: usize,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            lowercase: true,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Whitespace/punctuation splitter hashing each word into a fixed number of
/// buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct HashTokenizer {
    config: TokenizerConfig,
}

impl HashTokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        if config.vocab_size <= RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size must exceed {RESERVED_TOKENS}"
            )));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn token_id(&self, word: &str) -> usize {
        let h = if self.config.lowercase {
            fnv1a(word.to_lowercase().as_bytes())
        } else {
            fnv1a(word.as_bytes())
        };
        RESERVED_TOKENS + (h % (self.config.vocab_size - RESERVED_TOKENS) as u64) as usize
    }

    /// Splits on whitespace; every punctuation character is its own token.
    pub fn pieces(&self, text: &str) -> Vec<Piece> {
        let mut out = Vec::new();
        if text.starts_with(char::is_whitespace) {
            let end = text
                .char_indices()
                .find(|(_, c)| !c.is_whitespace())
                .map_or(text.len(), |(i, _)| i);
            out.push(Piece {
                id: SPACE_TOKEN,
                span: 0..end,
            });
            if end == text.len() {
                return out;
            }
        }
        let mut word_start: Option<usize> = None;
        let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<Piece>| {
            if let Some(s) = start.take() {
                out.push(Piece {
                    id: self.token_id(&text[s..end]),
                    span: s..end,
                });
            }
        };
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                flush(&mut word_start, i, &mut out);
            } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_ascii()) {
                flush(&mut word_start, i, &mut out);
                out.push(Piece {
                    id: self.token_id(&text[i..i + c.len_utf8()]),
                    span: i..i + c.len_utf8(),
                });
            } else if word_start.is_none() {
                word_start = Some(i);
            }
        }
        flush(&mut word_start, text.len(), &mut out);
        let trimmed = text.trim_end();
        if trimmed.len() < text.len() && !trimmed.is_empty() {
            out.push(Piece {
                id: SPACE_TOKEN,
                span: trimmed.len()..text.len(),
            });
        }
        out
    }

    /// Summary token followed by the text's pieces, truncated to `max_len`
    /// tokens in total.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut tokens = Vec::with_capacity(max_len.min(64));
        tokens.push(CLS_TOKEN);
        tokens.extend(
            self.pieces(text)
                .into_iter()
                .take(max_len.saturating_sub(1))
                .map(|p| p.id),
        );
        TokenSequence {
            tokens,
            has_cls: true,
        }
    }
}

/// Operations every backbone provides. Pretrained backbones plug in here.
pub trait TextEncoder: Send + Sync {
    fn hidden_size(&self) -> usize;

    fn tokenizer(&self) -> &HashTokenizer;

    fn max_len_user(&self) -> usize;

    fn max_len_prompt(&self) -> usize;

    /// Trainable parameters owned by the encoder.
    fn params(&self) -> Vec<ParamId>;

    /// Token-embedding lookup, `[L × H]`.
    fn lookup(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var>;

    /// Encodes an already-embedded sequence whose row 0 is the summary
    /// token, returning the `[1 × H]` summary state.
    fn encode_embedded(&self, g: &mut Graph<'_>, embedded: Var) -> Result<Var>;

    fn encode(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        if !seq.has_cls || seq.is_empty() {
            return Err(Error::InvalidArgument(
                "sequence must start with the summary token".into(),
            ));
        }
        let embedded = self.lookup(g, seq)?;
        self.encode_embedded(g, embedded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Every weight drawn at random.
    Random,
    /// Near-uniform attention with identity value/output maps and a silent
    /// feed-forward block, so the summary state starts as the mean token
    /// embedding. Texts sharing tokens start out similar.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub ffn: usize,
    pub tokenizer: TokenizerConfig,
    pub max_len_user: usize,
    pub max_len_prompt: usize,
    /// Learned absolute positions; without them the summary state is
    /// invariant to permuting the non-summary tokens.
    pub positional: bool,
    pub init: EncoderInit,
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            ffn: 64,
            tokenizer: TokenizerConfig::default(),
            max_len_user: 128,
            max_len_prompt: 32,
            positional: false,
            init: EncoderInit::Aligned,
            embed_scale: 1.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Longest sequence the positional table covers; soft prompts may add
    /// up to 14 rows beyond a prompt.
    pub fn max_positions(&self) -> usize {
        self.max_len_user.max(self.max_len_prompt + 16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ToyParams {
    embed: ParamId,
    pos: Option<ParamId>,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token embedding, one attention mixing step read out at the summary
/// position with a residual, then a per-token feed-forward block with a
/// residual.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: EncoderConfig,
    tokenizer: HashTokenizer,
    p: ToyParams,
}

pub(crate) fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Matrix {
    if sigma == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

const PREFIX: &str = "encoder.";

impl ToyEncoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        let tokenizer = HashTokenizer::new(config.tokenizer.clone())?;
        if config.hidden == 0 || config.ffn == 0 {
            return Err(Error::Config("hidden and ffn sizes must be positive".into()));
        }
        let h = config.hidden;
        let v = config.tokenizer.vocab_size;
        let f = config.ffn;
        let mut rng = rng_for(config.seed, &[0xe4c0]);
        let inv_h = 1.0 / (h as f64).sqrt();
        let mut embed = gaussian(v, h, config.embed_scale, &mut rng);
        let mut add = |name: &str, m: Matrix| store.add(format!("{PREFIX}{name}"), m);

        let p = match config.init {
            EncoderInit::Random => {
                let pos = config
                    .positional
                    .then(|| gaussian(config.max_positions(), h, config.embed_scale * 0.1, &mut rng));
                let wq = gaussian(h, h, inv_h, &mut rng);
                let wk = gaussian(h, h, inv_h, &mut rng);
                let wv = gaussian(h, h, inv_h, &mut rng);
                let wo = gaussian(h, h, inv_h, &mut rng);
                let w1 = gaussian(h, f, inv_h, &mut rng);
                let b1 = gaussian(1, f, 0.02, &mut rng);
                let w2 = gaussian(f, h, 1.0 / (f as f64).sqrt(), &mut rng);
                let b2 = gaussian(1, h, 0.02, &mut rng);
                ToyParams {
                    embed: add("embed", embed),
                    pos: pos.map(|m| add("pos", m)),
                    wq: add("wq", wq),
                    wk: add("wk", wk),
                    wv: add("wv", wv),
                    wo: add("wo", wo),
                    w1: add("w1", w1),
                    b1: add("b1", b1),
                    w2: add("w2", w2),
                    b2: add("b2", b2),
                }
            }
            EncoderInit::Aligned => {
                embed.row_mut(CLS_TOKEN).fill(0.0);
                let wq = gaussian(h, h, 0.01 * inv_h, &mut rng);
                let wk = gaussian(h, h, 0.01 * inv_h, &mut rng);
                let w1 = gaussian(h, f, inv_h, &mut rng);
                ToyParams {
                    embed: add("embed", embed),
                    pos: config
                        .positional
                        .then(|| add("pos", Matrix::zeros(config.max_positions(), h))),
                    wq: add("wq", wq),
                    wk: add("wk", wk),
                    wv: add("wv", Matrix::identity(h)),
                    wo: add("wo", Matrix::identity(h)),
                    w1: add("w1", w1),
                    b1: add("b1", Matrix::zeros(1, f)),
                    w2: add("w2", Matrix::zeros(f, h)),
                    b2: add("b2", Matrix::zeros(1, h)),
                }
            }
        };
        Ok(Self {
            config,
            tokenizer,
            p,
        })
    }

    /// Rebinds an encoder to parameters already present in `store` (for
    /// example after loading a checkpoint).
    pub fn attach(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let tokenizer = HashTokenizer::new(config.tokenizer.clone())?;
        let find = |name: &str| {
            store
                .find(&format!("{PREFIX}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {PREFIX}{name}")))
        };
        let p = ToyParams {
            embed: find("embed")?,
            pos: if config.positional { Some(find("pos")?) } else { None },
            wq: find("wq")?,
            wk: find("wk")?,
            wv: find("wv")?,
            wo: find("wo")?,
            w1: find("w1")?,
            b1: find("b1")?,
            w2: find("w2")?,
            b2: find("b2")?,
        };
        let (v, h) = store.get(p.embed).shape();
        if h != config.hidden || v != config.tokenizer.vocab_size {
            return Err(Error::Checkpoint(format!(
                "embedding is {v}x{h}, config expects {}x{}",
                config.tokenizer.vocab_size, config.hidden
            )));
        }
        Ok(Self {
            config,
            tokenizer,
            p,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_param(&self) -> ParamId {
        self.p.embed
    }

    /// Writes the encoder's tensors and configuration as a JSON checkpoint.
    pub fn save_checkpoint(&self, store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = EncoderCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params()
                .into_iter()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
        };
        write_json(path.as_ref(), &ckpt)
    }

    /// Loads a checkpoint into a fresh store.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, ParamStore)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: EncoderCheckpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, m) in ckpt.tensors {
            store.add(name, m);
        }
        let enc = Self::attach(ckpt.config, &store)?;
        Ok((enc, store))
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const CHECKPOINT_FORMAT: &str = "fewuser-toy-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderCheckpoint {
    format: String,
    version: u32,
    config: EncoderConfig,
    tensors: IndexMap<String, Matrix>,
}

impl TextEncoder for ToyEncoder {
    fn hidden_size(&self) -> usize {
        self.config.hidden
    }

    fn tokenizer(&self) -> &HashTokenizer {
        &self.tokenizer
    }

    fn max_len_user(&self) -> usize {
        self.config.max_len_user
    }

    fn max_len_prompt(&self) -> usize {
        self.config.max_len_prompt
    }

    fn params(&self) -> Vec<ParamId> {
        let p = &self.p;
        let mut v = vec![p.embed];
        v.extend(p.pos);
        v.extend([p.wq, p.wk, p.wv, p.wo, p.w1, p.b1, p.w2, p.b2]);
        v
    }

    fn lookup(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        let vocab = self.config.tokenizer.vocab_size;
        if let Some(&id) = seq.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let embed = g.param(self.p.embed);
        Ok(g.gather_rows(embed, &seq.tokens))
    }

    fn encode_embedded(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.config.hidden;
        let (len, cols) = g.shape(x);
        if cols != h || len == 0 {
            return Err(Error::Dimension {
                expected: format!("[L>=1 x {h}]"),
                got: format!("[{len} x {cols}]"),
            });
        }
        let x = match self.p.pos {
            Some(pos) => {
                if len > self.config.max_positions() {
                    return Err(Error::Dimension {
                        expected: format!("at most {} positions", self.config.max_positions()),
                        got: len.to_string(),
                    });
                }
                let pos = g.param(pos);
                let pos = g.slice_rows(pos, 0, len);
                g.add(x, pos)
            }
            None => x,
        };
        // Only the summary row is read out, and the feed-forward block is
        // per-token, so attention is evaluated for the summary query alone.
        let x0 = g.slice_rows(x, 0, 1);
        let wq = g.param(self.p.wq);
        let wk = g.param(self.p.wk);
        let wv = g.param(self.p.wv);
        let wo = g.param(self.p.wo);
        let q = g.matmul(x0, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / (h as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, v);
        let mixed = g.matmul(mixed, wo);
        let h1 = g.add(x0, mixed);

        let w1 = g.param(self.p.w1);
        let b1 = g.param(self.p.b1);
        let w2 = g.param(self.p.w2);
        let b2 = g.param(self.p.b2);
        let f = g.matmul(h1, w1);
        let f = g.add_row(f, b1);
        let f = g.tanh(f);
        let f = g.matmul(f, w2);
        let f = g.add_row(f, b2);
        Ok(g.add(h1, f))
    }
}

/// Encodes one text outside of training.
pub fn encode_text(enc: &dyn TextEncoder, store: &ParamStore, text: &str, max_len: usize) -> Result<Vec<f64>> {
    let seq = enc.tokenizer().tokenize(text, max_len);
    let mut g = Graph::new(store);
    let v = enc.encode(&mut g, &seq)?;
    Ok(g.value(v).data().to_vec())
}
