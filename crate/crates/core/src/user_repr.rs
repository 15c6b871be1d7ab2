//! User representation: field selection, integration into sentences,
//! per-sentence encoding into a feature matrix, and fusion into one vector.

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::corpus::UserRecord;
use crate::encoder::{gaussian, TextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const FIELD_SEPARATOR: &str = " ; ";
pub const NAME_VALUE_SEPARATOR: &str = ": ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntegrationKind {
    In1,
    In2,
    InT,
    #[serde(alias = "InUser+1")]
    InUserPlus1,
    #[serde(alias = "InUser+T")]
    InUserPlusT,
    NoIn,
}

impl IntegrationKind {
    pub const ALL: [IntegrationKind; 6] = [
        IntegrationKind::In1,
        IntegrationKind::In2,
        IntegrationKind::InT,
        IntegrationKind::InUserPlus1,
        IntegrationKind::InUserPlusT,
        IntegrationKind::NoIn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            IntegrationKind::In1 => "In1",
            IntegrationKind::In2 => "In2",
            IntegrationKind::InT => "InT",
            IntegrationKind::InUserPlus1 => "InUser+1",
            IntegrationKind::InUserPlusT => "InUser+T",
            IntegrationKind::NoIn => "NoIn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldFilter {
    All,
    NoPostTime,
    NoPostMeta,
}

impl FieldFilter {
    pub const ALL: [FieldFilter; 3] = [FieldFilter::All, FieldFilter::NoPostTime, FieldFilter::NoPostMeta];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationStrategy {
    pub kind: IntegrationKind,
    pub field_filter: FieldFilter,
    pub num_posts: usize,
}

impl Default for IntegrationStrategy {
    fn default() -> Self {
        Self {
            kind: IntegrationKind::In1,
            field_filter: FieldFilter::All,
            num_posts: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldGroup {
    Profile,
    /// Post by recency rank, 0 = most recent.
    Post(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub group: FieldGroup,
    pub name: String,
    pub value: String,
}

impl Field {
    fn render(&self) -> String {
        format!("{}{NAME_VALUE_SEPARATOR}{}", self.name, self.value)
    }
}

/// Profile fields then the fields of the `num_posts` most recent posts.
/// Empty values are dropped.
pub fn select_fields(user: &UserRecord, strategy: &IntegrationStrategy) -> Vec<Field> {
    let mut out = Vec::new();
    let mut push = |group, name: &str, value: String| {
        if !value.is_empty() {
            out.push(Field {
                group,
                name: name.to_string(),
                value,
            });
        }
    };
    for (k, v) in &user.profile {
        push(FieldGroup::Profile, k, v.clone());
    }
    let meta = strategy.field_filter != FieldFilter::NoPostMeta;
    let time = strategy.field_filter == FieldFilter::All;
    for (i, post) in user.posts.iter().take(strategy.num_posts).enumerate() {
        let g = FieldGroup::Post(i);
        push(g, "text", post.text.clone());
        if !meta {
            continue;
        }
        if let Some(s) = &post.source {
            push(g, "source", s.clone());
        }
        if let Some(tags) = &post.hashtags {
            push(g, "hashtags", tags.join(" "));
        }
        if time {
            if let Some(t) = &post.created_at {
                push(g, "created_at", t.to_rfc3339_opts(SecondsFormat::Secs, true));
            }
        }
        if let Some(extra) = &post.extra {
            for (k, v) in extra {
                push(g, k, v.clone());
            }
        }
    }
    out
}

fn join(fields: &[&Field]) -> String {
    fields
        .iter()
        .map(|f| f.render())
        .collect::<Vec<_>>()
        .join(FIELD_SEPARATOR)
}

/// Groups fields into sentences. Empty groups produce no sentence.
pub fn integrate(fields: &[Field], kind: IntegrationKind) -> Result<Vec<String>> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("no fields to integrate".into()));
    }
    let profile: Vec<&Field> = fields.iter().filter(|f| f.group == FieldGroup::Profile).collect();
    let posts: Vec<&Field> = fields.iter().filter(|f| f.group != FieldGroup::Profile).collect();
    let mut per_post: Vec<Vec<&Field>> = Vec::new();
    for f in &posts {
        let FieldGroup::Post(i) = f.group else { unreachable!() };
        match per_post.last_mut() {
            Some(last) if last[0].group == FieldGroup::Post(i) => last.push(f),
            _ => per_post.push(vec![f]),
        }
    }

    let mut out = Vec::new();
    let push_group = |group: &[&Field], out: &mut Vec<String>| {
        if !group.is_empty() {
            out.push(join(group));
        }
    };
    match kind {
        IntegrationKind::In1 => {
            let all: Vec<&Field> = fields.iter().collect();
            push_group(&all, &mut out);
        }
        IntegrationKind::In2 => {
            push_group(&profile, &mut out);
            push_group(&posts, &mut out);
        }
        IntegrationKind::InT => {
            push_group(&profile, &mut out);
            for p in &per_post {
                push_group(p, &mut out);
            }
        }
        IntegrationKind::InUserPlus1 => {
            for f in &profile {
                push_group(&[f], &mut out);
            }
            push_group(&posts, &mut out);
        }
        IntegrationKind::InUserPlusT => {
            for f in &profile {
                push_group(&[f], &mut out);
            }
            for p in &per_post {
                push_group(p, &mut out);
            }
        }
        IntegrationKind::NoIn => {
            for f in fields {
                push_group(&[f], &mut out);
            }
        }
    }
    Ok(out)
}

/// Sentences a user contributes under `strategy`.
pub fn user_sentences(user: &UserRecord, strategy: &IntegrationStrategy) -> Result<Vec<String>> {
    let fields = select_fields(user, strategy);
    if fields.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "user {} has no non-empty fields",
            user.user_id
        )));
    }
    integrate(&fields, strategy.kind)
}

pub fn tokenize_sentences(enc: &dyn TextEncoder, sentences: &[String]) -> Vec<TokenSequence> {
    sentences
        .iter()
        .map(|s| enc.tokenizer().tokenize(s, enc.max_len_user()))
        .collect()
}

/// Feature matrix `[N × H]`: one summary embedding per sentence.
pub fn embed_sentences(
    g: &mut Graph<'_>,
    enc: &dyn TextEncoder,
    sentences: &[TokenSequence],
) -> Result<Var> {
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("no sentences to embed".into()));
    }
    let rows = sentences
        .iter()
        .map(|s| enc.encode(g, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    MeanPool,
    Adapter,
    TransformerEnc,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "BiLSTM")]
    BiLstm,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "GRU")]
    Gru,
}

impl FusionKind {
    pub const ALL: [FusionKind; 8] = [
        FusionKind::MeanPool,
        FusionKind::Adapter,
        FusionKind::TransformerEnc,
        FusionKind::Mlp,
        FusionKind::Lstm,
        FusionKind::BiLstm,
        FusionKind::Rnn,
        FusionKind::Gru,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FusionKind::MeanPool => "MP",
            FusionKind::Adapter => "Adapter",
            FusionKind::TransformerEnc => "Trans.",
            FusionKind::Mlp => "MLP",
            FusionKind::Lstm => "LSTM",
            FusionKind::BiLstm => "BiLSTM",
            FusionKind::Rnn => "RNN",
            FusionKind::Gru => "GRU",
        }
    }
}

const TRANSFORMER_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
enum FusionParams {
    None,
    Adapter { down: ParamId, down_b: ParamId, up: ParamId, up_b: ParamId },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Transformer { wq: ParamId, wk: ParamId, wv: ParamId, wo: ParamId, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Rnn { wx: ParamId, wh: ParamId, b: ParamId },
    Gru { wx: ParamId, wh: ParamId, b: ParamId, wn: ParamId, un: ParamId, bn: ParamId },
    Lstm(LstmParams),
    BiLstm(LstmParams, LstmParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LstmParams {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

/// Maps a feature matrix `[N × H]` to one `[1 × H]` user embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEncoder {
    kind: FusionKind,
    hidden: usize,
    params: FusionParams,
}

impl FusionEncoder {
    pub fn new(kind: FusionKind, hidden: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let h = hidden;
        let mut rng = rng_for(seed, &[0xf0, kind as u64]);
        let s = 1.0 / (h as f64).sqrt();
        let mut add = |name: &str, rows: usize, cols: usize, sigma: f64| {
            let m = gaussian(rows, cols, sigma, &mut rng);
            store.add(format!("fusion.{name}"), m)
        };
        let mut lstm = |prefix: &str, d: usize| LstmParams {
            wx: add(&format!("{prefix}wx"), h, 4 * d, s),
            wh: add(&format!("{prefix}wh"), d, 4 * d, 1.0 / (d as f64).sqrt()),
            b: add(&format!("{prefix}b"), 1, 4 * d, 0.02),
            hidden: d,
        };
        let params = match kind {
            FusionKind::MeanPool => FusionParams::None,
            FusionKind::Adapter => {
                let d = (h / 4).max(1);
                FusionParams::Adapter {
                    down: add("down", h, d, s),
                    down_b: add("down_b", 1, d, 0.02),
                    up: add("up", d, h, 0.1 / (d as f64).sqrt()),
                    up_b: add("up_b", 1, h, 0.0),
                }
            }
            FusionKind::Mlp => FusionParams::Mlp {
                w1: add("w1", h, h, s),
                b1: add("b1", 1, h, 0.02),
                w2: add("w2", h, h, s),
                b2: add("b2", 1, h, 0.02),
            },
            FusionKind::TransformerEnc => {
                if h % TRANSFORMER_HEADS != 0 {
                    return Err(Error::Config(format!(
                        "hidden size {h} not divisible by {TRANSFORMER_HEADS} heads"
                    )));
                }
                FusionParams::Transformer {
                    wq: add("wq", h, h, s),
                    wk: add("wk", h, h, s),
                    wv: add("wv", h, h, s),
                    wo: add("wo", h, h, 0.1 * s),
                    w1: add("w1", h, 2 * h, s),
                    b1: add("b1", 1, 2 * h, 0.02),
                    w2: add("w2", 2 * h, h, 0.1 / (2.0 * h as f64).sqrt()),
                    b2: add("b2", 1, h, 0.0),
                }
            }
            FusionKind::Rnn => FusionParams::Rnn {
                wx: add("wx", h, h, s),
                wh: add("wh", h, h, s),
                b: add("b", 1, h, 0.02),
            },
            FusionKind::Gru => FusionParams::Gru {
                wx: add("wx", h, 2 * h, s),
                wh: add("wh", h, 2 * h, s),
                b: add("b", 1, 2 * h, 0.02),
                wn: add("wn", h, h, s),
                un: add("un", h, h, s),
                bn: add("bn", 1, h, 0.02),
            },
            FusionKind::Lstm => FusionParams::Lstm(lstm("", h)),
            FusionKind::BiLstm => {
                let fwd = h / 2;
                let bwd = h - fwd;
                if fwd == 0 {
                    return Err(Error::Config("BiLSTM needs hidden size >= 2".into()));
                }
                FusionParams::BiLstm(lstm("fwd.", fwd), lstm("bwd.", bwd))
            }
        };
        Ok(Self { kind, hidden, params })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.params {
            FusionParams::None => vec![],
            FusionParams::Adapter { down, down_b, up, up_b } => vec![*down, *down_b, *up, *up_b],
            FusionParams::Mlp { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
            FusionParams::Transformer { wq, wk, wv, wo, w1, b1, w2, b2 } => {
                vec![*wq, *wk, *wv, *wo, *w1, *b1, *w2, *b2]
            }
            FusionParams::Rnn { wx, wh, b } => vec![*wx, *wh, *b],
            FusionParams::Gru { wx, wh, b, wn, un, bn } => vec![*wx, *wh, *b, *wn, *un, *bn],
            FusionParams::Lstm(p) => vec![p.wx, p.wh, p.b],
            FusionParams::BiLstm(f, b) => vec![f.wx, f.wh, f.b, b.wx, b.wh, b.b],
        }
    }

    /// Sequence-to-sequence map followed by mean pooling over rows.
    pub fn fuse(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let (n, cols) = g.shape(features);
        if cols != self.hidden || n == 0 {
            return Err(Error::Dimension {
                expected: format!("[N>=1 x {}]", self.hidden),
                got: format!("[{n} x {cols}]"),
            });
        }
        let seq = match &self.params {
            FusionParams::None => features,
            FusionParams::Adapter { down, down_b, up, up_b } => {
                let z = affine(g, features, *down, *down_b);
                let z = g.tanh(z);
                let z = affine(g, z, *up, *up_b);
                g.add(features, z)
            }
            FusionParams::Mlp { w1, b1, w2, b2 } => {
                let z = affine(g, features, *w1, *b1);
                let z = g.tanh(z);
                affine(g, z, *w2, *b2)
            }
            FusionParams::Transformer { wq, wk, wv, wo, w1, b1, w2, b2 } => {
                let (wq, wk, wv, wo) = (g.param(*wq), g.param(*wk), g.param(*wv), g.param(*wo));
                let q = g.matmul(features, wq);
                let k = g.matmul(features, wk);
                let v = g.matmul(features, wv);
                let d = self.hidden / TRANSFORMER_HEADS;
                let mut heads = Vec::with_capacity(TRANSFORMER_HEADS);
                for head in 0..TRANSFORMER_HEADS {
                    let qh = g.slice_cols(q, head * d, d);
                    let kh = g.slice_cols(k, head * d, d);
                    let vh = g.slice_cols(v, head * d, d);
                    let s = g.matmul_t(qh, kh);
                    let s = g.scale(s, 1.0 / (d as f64).sqrt());
                    let a = g.softmax_rows(s);
                    heads.push(g.matmul(a, vh));
                }
                let cat = g.concat_cols(&heads);
                let o = g.matmul(cat, wo);
                let x1 = g.add(features, o);
                let f = affine(g, x1, *w1, *b1);
                let f = g.tanh(f);
                let f = affine(g, f, *w2, *b2);
                g.add(x1, f)
            }
            FusionParams::Rnn { wx, wh, b } => {
                let (wx, wh, b) = (g.param(*wx), g.param(*wh), g.param(*b));
                let mut h = g.constant(Matrix::zeros(1, self.hidden));
                let mut outs = Vec::with_capacity(n);
                for t in 0..n {
                    let x = g.slice_rows(features, t, 1);
                    let a = g.matmul(x, wx);
                    let r = g.matmul(h, wh);
                    let s = g.add(a, r);
                    let s = g.add(s, b);
                    h = g.tanh(s);
                    outs.push(h);
                }
                g.concat_rows(&outs)
            }
            FusionParams::Gru { wx, wh, b, wn, un, bn } => {
                let hd = self.hidden;
                let (wx, wh, b) = (g.param(*wx), g.param(*wh), g.param(*b));
                let (wn, un, bn) = (g.param(*wn), g.param(*un), g.param(*bn));
                let mut h = g.constant(Matrix::zeros(1, hd));
                let mut outs = Vec::with_capacity(n);
                for t in 0..n {
                    let x = g.slice_rows(features, t, 1);
                    let a = g.matmul(x, wx);
                    let r = g.matmul(h, wh);
                    let gates = g.add(a, r);
                    let gates = g.add(gates, b);
                    let gates = g.sigmoid(gates);
                    let z = g.slice_cols(gates, 0, hd);
                    let reset = g.slice_cols(gates, hd, hd);
                    let rh = g.mul(reset, h);
                    let cand_x = g.matmul(x, wn);
                    let cand_h = g.matmul(rh, un);
                    let cand = g.add(cand_x, cand_h);
                    let cand = g.add(cand, bn);
                    let cand = g.tanh(cand);
                    // h' = n + z ⊙ (h - n)
                    let diff = g.sub(h, cand);
                    let zd = g.mul(z, diff);
                    h = g.add(cand, zd);
                    outs.push(h);
                }
                g.concat_rows(&outs)
            }
            FusionParams::Lstm(p) => {
                let rows: Vec<Var> = (0..n).map(|t| g.slice_rows(features, t, 1)).collect();
                let outs = lstm_pass(g, p, &rows);
                g.concat_rows(&outs)
            }
            FusionParams::BiLstm(fwd, bwd) => {
                let rows: Vec<Var> = (0..n).map(|t| g.slice_rows(features, t, 1)).collect();
                let forward = lstm_pass(g, fwd, &rows);
                let reversed: Vec<Var> = rows.iter().rev().copied().collect();
                let mut backward = lstm_pass(g, bwd, &reversed);
                backward.reverse();
                let joined: Vec<Var> = forward
                    .into_iter()
                    .zip(backward)
                    .map(|(f, b)| g.concat_cols(&[f, b]))
                    .collect();
                g.concat_rows(&joined)
            }
        };
        Ok(g.mean_rows(seq))
    }
}

fn affine(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn lstm_pass(g: &mut Graph<'_>, p: &LstmParams, rows: &[Var]) -> Vec<Var> {
    let d = p.hidden;
    let (wx, wh, b) = (g.param(p.wx), g.param(p.wh), g.param(p.b));
    let mut h = g.constant(Matrix::zeros(1, d));
    let mut c = g.constant(Matrix::zeros(1, d));
    let mut outs = Vec::with_capacity(rows.len());
    for &x in rows {
        let a = g.matmul(x, wx);
        let r = g.matmul(h, wh);
        let z = g.add(a, r);
        let z = g.add(z, b);
        let i = g.slice_cols(z, 0, d);
        let f = g.slice_cols(z, d, d);
        let o = g.slice_cols(z, 2 * d, d);
        let cand = g.slice_cols(z, 3 * d, d);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        outs.push(h);
    }
    outs
}

/// Integration plus fusion: everything needed to turn a user into `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEncoder {
    pub strategy: IntegrationStrategy,
    pub fusion: FusionEncoder,
}

impl UserEncoder {
    pub fn prepare(&self, enc: &dyn TextEncoder, user: &UserRecord) -> Result<Vec<TokenSequence>> {
        let sentences = user_sentences(user, &self.strategy)?;
        Ok(tokenize_sentences(enc, &sentences))
    }

    pub fn embed(&self, g: &mut Graph<'_>, enc: &dyn TextEncoder, prepared: &[TokenSequence]) -> Result<Var> {
        let f = embed_sentences(g, enc, prepared)?;
        self.fusion.fuse(g, f)
    }

    /// Plain user embedding for inference.
    pub fn embed_user(&self, store: &ParamStore, enc: &dyn TextEncoder, user: &UserRecord) -> Result<Vec<f64>> {
        let prepared = self.prepare(enc, user)?;
        let mut g = Graph::new(store);
        let u = self.embed(&mut g, enc, &prepared)?;
        Ok(g.value(u).data().to_vec())
    }
}
