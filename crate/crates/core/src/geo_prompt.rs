//! Location representations from hard, soft and semi-soft prompts.

use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::corpus::LocationLabel;
use crate::encoder::{gaussian, TextEncoder, TokenSequence, CLS_TOKEN};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const CLASS_SLOT: &str = "[CLASS]";

/// Hard templates compared in the prompt ablation, best-known first.
pub const TEMPLATES: [&str; 9] = [
    "I'm in [CLASS].",
    "A local from [CLASS].",
    "[CLASS] in the house!",
    "[CLASS] 's own.",
    "A user resides in [CLASS].",
    "Question: where does this user reside in? Answer: [CLASS].",
    "Question: which city does this user live in? Answer: [CLASS].",
    "[CLASS] ",
    "[CLASS]",
];

pub const DEFAULT_SEMISOFT_TEMPLATE: &str = "I'm in [CLASS].";
pub const SOFT_INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HardPrompt {
    template: String,
    slot: usize,
}

impl HardPrompt {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let found = template.matches(CLASS_SLOT).count();
        if found != 1 {
            return Err(Error::PromptSlot { template, found });
        }
        let slot = template.find(CLASS_SLOT).expect("slot present");
        Ok(Self { template, slot })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// Substitutes the class name into the slot; the rest of the template is
    /// untouched.
    pub fn apply(&self, class_name: &str) -> String {
        let mut out = String::with_capacity(self.template.len() + class_name.len());
        out.push_str(&self.template[..self.slot]);
        out.push_str(class_name);
        out.push_str(&self.template[self.slot + CLASS_SLOT.len()..]);
        out
    }

    fn slot_range(&self, class_name: &str) -> std::ops::Range<usize> {
        self.slot..self.slot + class_name.len()
    }
}

impl TryFrom<String> for HardPrompt {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        HardPrompt::new(s)
    }
}

impl From<HardPrompt> for String {
    fn from(p: HardPrompt) -> String {
        p.template
    }
}

/// Applies a hard template and encodes the result.
pub fn encode_location_hard(
    g: &mut Graph<'_>,
    enc: &dyn TextEncoder,
    prompt: &HardPrompt,
    class_name: &str,
) -> Result<Var> {
    let seq = enc.tokenizer().tokenize(&prompt.apply(class_name), enc.max_len_prompt());
    enc.encode(g, &seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftInit {
    Random { sigma: f64 },
    FromHard(HardPrompt),
}

/// Trainable `[V]` rows around the class-name tokens. Template tokens before
/// the slot become the first `prefix` rows and the rest follow the class
/// name; randomly initialized prompts put every row before the class name.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    vectors: ParamId,
    prefix: usize,
    suffix: usize,
    init: SoftInit,
}

impl SoftPrompt {
    /// `m` random rows drawn from N(0, sigma²).
    pub fn random(
        store: &mut ParamStore,
        hidden: usize,
        m: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("soft prompt needs at least one [V] token".into()));
        }
        let mut rng = rng_for(seed, &[0x50f7]);
        let vectors = store.add("prompt.vectors", gaussian(m, hidden, sigma, &mut rng));
        Ok(Self {
            vectors,
            prefix: m,
            suffix: 0,
            init: SoftInit::Random { sigma },
        })
    }

    /// Semi-soft prompt: one row per template token, copied from the
    /// encoder's input embeddings.
    pub fn from_hard(
        store: &mut ParamStore,
        enc: &dyn TextEncoder,
        template: &HardPrompt,
    ) -> Result<Self> {
        let probe = "x";
        let text = template.apply(probe);
        let slot = template.slot_range(probe);
        let pieces = enc.tokenizer().pieces(&text);
        let mut prefix_ids = Vec::new();
        let mut suffix_ids = Vec::new();
        for p in &pieces {
            if p.span.end <= slot.start {
                prefix_ids.push(p.id);
            } else if p.span.start >= slot.end {
                suffix_ids.push(p.id);
            }
        }
        let mut tokens = prefix_ids.clone();
        tokens.extend(&suffix_ids);
        let rows = if tokens.is_empty() {
            Matrix::zeros(0, enc.hidden_size())
        } else {
            let mut g = Graph::new(store);
            let seq = TokenSequence { tokens, has_cls: false };
            let v = enc.lookup(&mut g, &seq)?;
            g.value(v).clone()
        };
        let vectors = store.add("prompt.vectors", rows);
        Ok(Self {
            vectors,
            prefix: prefix_ids.len(),
            suffix: suffix_ids.len(),
            init: SoftInit::FromHard(template.clone()),
        })
    }

    pub fn m(&self) -> usize {
        self.prefix + self.suffix
    }

    pub fn vectors(&self) -> ParamId {
        self.vectors
    }

    pub fn init(&self) -> &SoftInit {
        &self.init
    }

    /// Class-name token ids as the hard template would produce them.
    fn class_tokens(&self, enc: &dyn TextEncoder, class_name: &str) -> Result<Vec<usize>> {
        match &self.init {
            SoftInit::Random { .. } => {
                Ok(enc.tokenizer().pieces(class_name).into_iter().map(|p| p.id).collect())
            }
            SoftInit::FromHard(t) => {
                let text = t.apply(class_name);
                let slot = t.slot_range(class_name);
                let mut before = 0;
                let mut after = 0;
                let mut ids = Vec::new();
                for p in enc.tokenizer().pieces(&text) {
                    if p.span.end <= slot.start {
                        before += 1;
                    } else if p.span.start >= slot.end {
                        after += 1;
                    } else {
                        ids.push(p.id);
                    }
                }
                if before != self.prefix || after != self.suffix {
                    return Err(Error::Dimension {
                        expected: format!("{} + {} template tokens", self.prefix, self.suffix),
                        got: format!("{before} + {after} for class {class_name:?}"),
                    });
                }
                Ok(ids)
            }
        }
    }
}

/// Builds `[summary; V prefix; class tokens; V suffix]` and encodes it.
pub fn encode_location_soft(
    g: &mut Graph<'_>,
    enc: &dyn TextEncoder,
    prompt: &SoftPrompt,
    class_name: &str,
) -> Result<Var> {
    let vectors = g.param(prompt.vectors);
    let (m, cols) = g.shape(vectors);
    if cols != enc.hidden_size() || m != prompt.m() {
        return Err(Error::Dimension {
            expected: format!("[{} x {}]", prompt.m(), enc.hidden_size()),
            got: format!("[{m} x {cols}]"),
        });
    }
    let class_ids = prompt.class_tokens(enc, class_name)?;
    let mut tokens = vec![CLS_TOKEN];
    tokens.extend(&class_ids);
    let looked_up = enc.lookup(g, &TokenSequence { tokens, has_cls: true })?;
    let combined = if m == 0 { looked_up } else { g.concat_rows(&[looked_up, vectors]) };

    // Row indices into `combined`: 0 is the summary token, 1..=c the class
    // tokens, c+1.. the [V] rows.
    let c = class_ids.len();
    let mut order = vec![0];
    order.extend((0..prompt.prefix).map(|i| 1 + c + i));
    order.extend(1..=c);
    order.extend((prompt.prefix..prompt.m()).map(|i| 1 + c + i));
    order.truncate(enc.max_len_prompt().max(1));
    let embedded = g.gather_rows(combined, &order);
    enc.encode_embedded(g, embedded)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocationPrompt {
    Hard(HardPrompt),
    Soft(SoftPrompt),
}

impl LocationPrompt {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            LocationPrompt::Hard(_) => vec![],
            LocationPrompt::Soft(s) => vec![s.vectors],
        }
    }

    pub fn encode(&self, g: &mut Graph<'_>, enc: &dyn TextEncoder, class_name: &str) -> Result<Var> {
        match self {
            LocationPrompt::Hard(p) => encode_location_hard(g, enc, p, class_name),
            LocationPrompt::Soft(p) => encode_location_soft(g, enc, p, class_name),
        }
    }
}

/// All class names of a dataset behind one prompt, with a cache of their
/// embeddings keyed by the parameter-store version.
#[derive(Debug)]
pub struct LocationBank {
    labels: Vec<LocationLabel>,
    prompt: LocationPrompt,
    cache: RwLock<Option<(u64, Matrix)>>,
}

impl Clone for LocationBank {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            prompt: self.prompt.clone(),
            cache: RwLock::new(self.cache.read().expect("cache lock").clone()),
        }
    }
}

impl LocationBank {
    pub fn new(labels: Vec<LocationLabel>, prompt: LocationPrompt) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("location bank needs at least one label".into()));
        }
        Ok(Self {
            labels,
            prompt,
            cache: RwLock::new(None),
        })
    }

    pub fn labels(&self) -> &[LocationLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prompt(&self) -> &LocationPrompt {
        &self.prompt
    }

    /// Differentiable `[K × H]` bank for training.
    pub fn embed_all(&self, g: &mut Graph<'_>, enc: &dyn TextEncoder) -> Result<Var> {
        let rows = self
            .labels
            .iter()
            .map(|l| self.prompt.encode(g, enc, &l.name))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    /// `[K × H]` embeddings, recomputed only when the store has changed.
    pub fn embeddings(&self, store: &ParamStore, enc: &dyn TextEncoder) -> Result<Matrix> {
        if let Some((version, m)) = self.cache.read().expect("cache lock").as_ref() {
            if *version == store.version() {
                return Ok(m.clone());
            }
        }
        let mut g = Graph::new(store);
        let v = self.embed_all(&mut g, enc)?;
        let m = g.value(v).clone();
        *self.cache.write().expect("cache lock") = Some((store.version(), m.clone()));
        Ok(m)
    }

    pub fn invalidate(&self) {
        *self.cache.write().expect("cache lock") = None;
    }

    pub fn is_cached_for(&self, store: &ParamStore) -> bool {
        self.cache
            .read()
            .expect("cache lock")
            .as_ref()
            .is_some_and(|(v, _)| *v == store.version())
    }
}

/// Declarative prompt choice, as found in prompt-bank files and run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PromptSpec {
    Hard { template: String },
    Soft {
        m: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Semisoft { template: String },
}

fn default_sigma() -> f64 {
    SOFT_INIT_SIGMA
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec::Semisoft {
            template: DEFAULT_SEMISOFT_TEMPLATE.to_string(),
        }
    }
}

impl PromptSpec {
    /// Registers any prompt parameters in `store`.
    pub fn build(&self, store: &mut ParamStore, enc: &dyn TextEncoder, seed: u64) -> Result<LocationPrompt> {
        Ok(match self {
            PromptSpec::Hard { template } => LocationPrompt::Hard(HardPrompt::new(template.clone())?),
            PromptSpec::Soft { m, sigma } => {
                LocationPrompt::Soft(SoftPrompt::random(store, enc.hidden_size(), *m, *sigma, seed)?)
            }
            PromptSpec::Semisoft { template } => {
                let hard = HardPrompt::new(template.clone())?;
                LocationPrompt::Soft(SoftPrompt::from_hard(store, enc, &hard)?)
            }
        })
    }

    pub fn describe(&self) -> String {
        match self {
            PromptSpec::Hard { template } => format!("hard {template:?}"),
            PromptSpec::Soft { m, .. } => format!("soft m={m}"),
            PromptSpec::Semisoft { template } => format!("semi-soft {template:?}"),
        }
    }
}

/// One entry of a prompt-bank file:
/// `{name, kind: hard|soft|semisoft, template?, m?, sigma?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireEntry", into = "WireEntry")]
pub struct PromptBankEntry {
    pub name: String,
    pub spec: PromptSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PromptKind {
    Hard,
    Soft,
    Semisoft,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntry {
    name: String,
    kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

impl TryFrom<WireEntry> for PromptBankEntry {
    type Error = String;

    fn try_from(w: WireEntry) -> std::result::Result<Self, String> {
        let need_template = |w: &WireEntry| {
            w.template
                .clone()
                .ok_or_else(|| format!("prompt {}: missing template", w.name))
        };
        let spec = match w.kind {
            PromptKind::Hard => PromptSpec::Hard { template: need_template(&w)? },
            PromptKind::Semisoft => PromptSpec::Semisoft { template: need_template(&w)? },
            PromptKind::Soft => PromptSpec::Soft {
                m: w.m.ok_or_else(|| format!("prompt {}: missing m", w.name))?,
                sigma: w.sigma.unwrap_or(SOFT_INIT_SIGMA),
            },
        };
        Ok(Self { name: w.name, spec })
    }
}

impl From<PromptBankEntry> for WireEntry {
    fn from(e: PromptBankEntry) -> Self {
        let (kind, template, m, sigma) = match e.spec {
            PromptSpec::Hard { template } => (PromptKind::Hard, Some(template), None, None),
            PromptSpec::Semisoft { template } => (PromptKind::Semisoft, Some(template), None, None),
            PromptSpec::Soft { m, sigma } => (PromptKind::Soft, None, Some(m), Some(sigma)),
        };
        WireEntry { name: e.name, kind, template, m, sigma }
    }
}

/// The nine ablation templates as hard prompts plus the default semi-soft
/// prompt.
pub fn shipped_bank() -> Vec<PromptBankEntry> {
    let mut bank: Vec<PromptBankEntry> = TEMPLATES
        .iter()
        .enumerate()
        .map(|(i, t)| PromptBankEntry {
            name: format!("hard-{i}"),
            spec: PromptSpec::Hard { template: t.to_string() },
        })
        .collect();
    bank.push(PromptBankEntry {
        name: "semisoft-default".into(),
        spec: PromptSpec::default(),
    });
    bank
}

pub fn load_prompt_bank(path: impl AsRef<Path>) -> Result<Vec<PromptBankEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bank: Vec<PromptBankEntry> = serde_json::from_str(&text)?;
    for e in &bank {
        if let PromptSpec::Hard { template } | PromptSpec::Semisoft { template } = &e.spec {
            HardPrompt::new(template.clone())?;
        }
    }
    Ok(bank)
}

pub fn save_prompt_bank(bank: &[PromptBankEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(bank)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_params, REL_TOL};
    use crate::encoder::{EncoderConfig, EncoderInit, ToyEncoder, TokenizerConfig};

    fn encoder(init: EncoderInit, positional: bool) -> (ToyEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            hidden: 8,
            ffn: 8,
            tokenizer: TokenizerConfig { vocab_size: 512, lowercase: true },
            init,
            positional,
            seed: 21,
            ..EncoderConfig::default()
        };
        let enc = ToyEncoder::new(cfg, &mut store).unwrap();
        (enc, store)
    }

    #[test]
    fn apply_substitutes_verbatim() {
        let p = HardPrompt::new("A user resides in [CLASS].").unwrap();
        assert_eq!(p.apply("Paris"), "A user resides in Paris.");
        assert_eq!(HardPrompt::new("[CLASS]").unwrap().apply("Tokyo"), "Tokyo");
        assert_eq!(HardPrompt::new("[CLASS] ").unwrap().apply("Tokyo"), "Tokyo ");
    }

    #[test]
    fn slot_count_is_validated() {
        assert!(matches!(HardPrompt::new("no slot"), Err(Error::PromptSlot { found: 0, .. })));
        assert!(matches!(
            HardPrompt::new("[CLASS] and [CLASS]"),
            Err(Error::PromptSlot { found: 2, .. })
        ));
    }

    fn hard_vec(enc: &ToyEncoder, store: &ParamStore, t: &str, name: &str) -> Vec<f64> {
        let mut g = Graph::new(store);
        let v = encode_location_hard(&mut g, enc, &HardPrompt::new(t).unwrap(), name).unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn hard_encoding_properties() {
        let (enc, store) = encoder(EncoderInit::Random, true);
        let a = hard_vec(&enc, &store, TEMPLATES[0], "Paris");
        assert_eq!(a.len(), 8);
        assert_eq!(a, hard_vec(&enc, &store, TEMPLATES[0], "Paris"));
        let all: Vec<Vec<f64>> = TEMPLATES.iter().map(|t| hard_vec(&enc, &store, t, "Paris")).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "templates {i} and {j} collide");
            }
        }
    }

    #[test]
    fn semisoft_equals_hard_at_initialization() {
        for positional in [false, true] {
            let (enc, mut store) = encoder(EncoderInit::Random, positional);
            let mut prompts = Vec::new();
            for t in TEMPLATES {
                let hard = HardPrompt::new(t).unwrap();
                // Each template gets its own store to avoid name clashes.
                let mut s = store.clone();
                let soft = SoftPrompt::from_hard(&mut s, &enc, &hard).unwrap();
                prompts.push((hard, soft, s));
            }
            let _ = &mut store;
            for (hard, soft, s) in &prompts {
                for name in ["Paris", "St. Louis", "New York City"] {
                    let mut g = Graph::new(s);
                    let h = encode_location_hard(&mut g, &enc, hard, name).unwrap();
                    let v = encode_location_soft(&mut g, &enc, soft, name).unwrap();
                    assert_eq!(g.value(h), g.value(v), "template {:?}", hard.template());
                }
            }
        }
    }

    #[test]
    fn semisoft_token_counts() {
        let (enc, mut store) = encoder(EncoderInit::Random, false);
        let mk = |t: &str, store: &mut ParamStore| {
            let mut s = store.clone();
            SoftPrompt::from_hard(&mut s, &enc, &HardPrompt::new(t).unwrap()).unwrap()
        };
        // i ' m in | .
        let p = mk("I'm in [CLASS].", &mut store);
        assert_eq!((p.prefix, p.suffix), (4, 1));
        assert_eq!(mk("[CLASS]", &mut store).m(), 0);
        assert_eq!(mk("[CLASS] ", &mut store).m(), 1);
    }

    #[test]
    fn random_soft_prompt_shape_and_gradients() {
        let (enc, mut store) = encoder(EncoderInit::Random, true);
        assert!(SoftPrompt::random(&mut store.clone(), 8, 0, 0.02, 0).is_err());
        let sp = SoftPrompt::random(&mut store, 8, 3, 0.5, 1).unwrap();
        let mut g = Graph::new(&store);
        let v = encode_location_soft(&mut g, &enc, &sp, "Lyon").unwrap();
        assert_eq!(g.shape(v), (1, 8));
        drop(g);
        let worst = check_params(&store, &[sp.vectors()], 24, |g| {
            let v = encode_location_soft(g, &enc, &sp, "Lyon").unwrap();
            let sq = g.mul(v, v);
            let s = g.sum(sq);
            let lin = g.sum(v);
            g.add(s, lin)
        });
        assert!(worst <= REL_TOL);
    }

    #[test]
    fn bank_cache_follows_store_version() {
        let (enc, mut store) = encoder(EncoderInit::Random, false);
        let labels = vec![LocationLabel::new("Paris"), LocationLabel::new("Lyon")];
        let sp = SoftPrompt::from_hard(&mut store, &enc, &HardPrompt::new(TEMPLATES[0]).unwrap()).unwrap();
        let id = sp.vectors();
        let bank = LocationBank::new(labels, LocationPrompt::Soft(sp)).unwrap();
        let a = bank.embeddings(&store, &enc).unwrap();
        assert_eq!(a.shape(), (2, 8));
        assert!(bank.is_cached_for(&store));
        let b = bank.embeddings(&store, &enc).unwrap();
        assert_eq!(a, b);

        store.get_mut(id).data_mut()[0] += 0.1;
        assert!(!bank.is_cached_for(&store));
        let c = bank.embeddings(&store, &enc).unwrap();
        assert_ne!(a, c);

        let single = LocationBank::new(
            vec![LocationLabel::new("Nice")],
            LocationPrompt::Hard(HardPrompt::new("[CLASS]").unwrap()),
        )
        .unwrap();
        assert_eq!(single.embeddings(&store, &enc).unwrap().shape(), (1, 8));
        assert!(LocationBank::new(vec![], LocationPrompt::Hard(HardPrompt::new("[CLASS]").unwrap())).is_err());
    }

    #[test]
    fn identical_names_identical_vectors() {
        let (enc, store) = encoder(EncoderInit::Aligned, false);
        let bank = LocationBank::new(
            vec![LocationLabel::with_coords("Paris", 1.0, 2.0), LocationLabel::new("Paris")],
            LocationPrompt::Hard(HardPrompt::new(TEMPLATES[4]).unwrap()),
        )
        .unwrap();
        let m = bank.embeddings(&store, &enc).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn prompt_bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let mut bank = shipped_bank();
        bank.push(PromptBankEntry {
            name: "soft-4".into(),
            spec: PromptSpec::Soft { m: 4, sigma: 0.02 },
        });
        save_prompt_bank(&bank, &path).unwrap();
        assert_eq!(load_prompt_bank(&path).unwrap(), bank);
        assert_eq!(bank.len(), 11);

        std::fs::write(&path, r#"[{"name":"x","kind":"hard","template":"no slot"}]"#).unwrap();
        assert!(load_prompt_bank(&path).is_err());
        std::fs::write(&path, r#"[{"name":"x","kind":"soft","m":2,"bogus":1}]"#).unwrap();
        assert!(load_prompt_bank(&path).is_err());
    }
}
