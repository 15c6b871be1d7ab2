//! Training objectives: the contrastive loss over all location labels, the
//! (k+1)-way matching loss over fused user-location pairs, hard-negative
//! mining and the classification baseline.

use rand::seq::index::sample_weighted;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_cross_entropy, Graph, Matrix, ParamId, ParamStore, Var};
use crate::encoder::gaussian;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Similarity scores of one user against every label, plus the gold index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub scores: Vec<f64>,
    pub gold: usize,
}

impl SimilarityRow {
    pub fn new(scores: Vec<f64>, gold: usize) -> Result<Self> {
        if gold >= scores.len() {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold} out of range for {} scores",
                scores.len()
            )));
        }
        Ok(Self { scores, gold })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("score {i} is {}", values[i]))),
    }
}

/// `-log softmax(scores / tau)[gold]`.
pub fn contrastive_loss(row: &SimilarityRow, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_finite(&row.scores)?;
    if row.gold >= row.scores.len() {
        return Err(Error::InvalidArgument("gold index out of range".into()));
    }
    let logits: Vec<f64> = row.scores.iter().map(|s| s / tau).collect();
    Ok(softmax_cross_entropy(&logits, row.gold))
}

/// Graph form of [`contrastive_loss`] for a `1 × K` score row.
pub fn contrastive_loss_node(g: &mut Graph<'_>, scores: Var, gold: usize, tau: f64) -> Var {
    let logits = g.scale(scores, 1.0 / tau);
    g.cross_entropy(logits, gold)
}

/// Cross-entropy of the (k+1) match scores against the gold pair at position 0.
pub fn matching_loss(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("matching loss needs k >= 1 negatives".into()));
    }
    check_finite(scores)?;
    Ok(softmax_cross_entropy(scores, 0))
}

/// Both loss terms; the matching term is absent when mining is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub contrast: f64,
    pub matching: Option<f64>,
}

impl JointLoss {
    pub fn total(&self) -> f64 {
        self.contrast + self.matching.unwrap_or(0.0)
    }
}

/// Unweighted sum of the contrastive and matching terms.
pub fn joint_loss(row: &SimilarityRow, tau: f64, match_scores: Option<&[f64]>) -> Result<JointLoss> {
    let contrast = contrastive_loss(row, tau)?;
    let matching = match match_scores {
        Some(s) => Some(matching_loss(s)?),
        None => None,
    };
    Ok(JointLoss { contrast, matching })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningKind {
    Multinomial,
    Top,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningPolicy {
    pub kind: MiningKind,
    pub k: usize,
}

impl Default for MiningPolicy {
    fn default() -> Self {
        Self { kind: MiningKind::Multinomial, k: 6 }
    }
}

/// Non-gold indices ordered by descending score, ties to the lower index.
fn ranked_candidates(row: &SimilarityRow) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.scores.len()).filter(|&j| j != row.gold).collect();
    idx.sort_by(|&a, &b| row.scores[b].total_cmp(&row.scores[a]).then(a.cmp(&b)));
    idx
}

/// Picks `policy.k` negatives for one user. Multinomial sampling draws
/// without replacement with weights `softmax(scores / tau)` over the
/// non-gold labels; weights that underflow to zero are only used, in rank
/// order, when fewer than `k` labels have positive weight.
pub fn mine_negatives(row: &SimilarityRow, policy: MiningPolicy, tau: f64, seed: u64) -> Result<Vec<usize>> {
    let k = policy.k;
    let n = row.scores.len();
    if row.gold >= n {
        return Err(Error::InvalidArgument("gold index out of range".into()));
    }
    if k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "cannot mine {k} negatives from {} candidates",
            n - 1
        )));
    }
    if row.scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::NonFinite("NaN or +inf similarity score".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let ranked = ranked_candidates(row);
    if ranked.iter().all(|&j| row.scores[j] == f64::NEG_INFINITY) {
        return Err(Error::InvalidArgument("every non-gold score is -inf".into()));
    }
    match policy.kind {
        MiningKind::Top => Ok(ranked[..k].to_vec()),
        MiningKind::Multinomial => {
            check_tau(tau)?;
            let top = row.scores[ranked[0]];
            let weights: Vec<f64> = ranked.iter().map(|&j| ((row.scores[j] - top) / tau).exp()).collect();
            let positive = weights.iter().filter(|w| **w > 0.0).count();
            let mut rng = rng_for(seed, &[0x6d69]);
            let mut picked: Vec<usize> = if positive <= k {
                ranked[..k].to_vec()
            } else {
                sample_weighted(&mut rng, ranked.len(), |i| weights[i], k)
                    .map_err(|e| Error::InvalidArgument(format!("mining weights: {e}")))?
                    .into_iter()
                    .map(|i| ranked[i])
                    .collect()
            };
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchFusion {
    #[serde(rename = "CA")]
    CrossAttention,
    Sum,
    Concat,
}

impl MatchFusion {
    pub const ALL: [MatchFusion; 3] = [MatchFusion::CrossAttention, MatchFusion::Sum, MatchFusion::Concat];

    pub fn label(self) -> &'static str {
        match self {
            MatchFusion::CrossAttention => "CA",
            MatchFusion::Sum => "Sum",
            MatchFusion::Concat => "Concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Adapter {
    down: ParamId,
    down_b: ParamId,
    up: ParamId,
    up_b: ParamId,
}

impl Adapter {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let d = (dim / 4).max(1);
        Self {
            down: store.add(format!("{prefix}.down"), gaussian(dim, d, 1.0 / (dim as f64).sqrt(), rng)),
            down_b: store.add(format!("{prefix}.down_b"), gaussian(1, d, 0.02, rng)),
            up: store.add(format!("{prefix}.up"), gaussian(d, dim, 1.0 / (d as f64).sqrt(), rng)),
            up_b: store.add(format!("{prefix}.up_b"), Matrix::zeros(1, dim)),
        }
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.down, self.down_b, self.up, self.up_b]
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let z = affine(g, x, self.down, self.down_b);
        let z = g.tanh(z);
        let z = affine(g, z, self.up, self.up_b);
        g.add(x, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MatchParams {
    CrossAttention {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Sum(Adapter),
    Concat {
        adapter: Adapter,
        proj: ParamId,
        proj_b: ParamId,
    },
}

fn affine(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Scores fused user-location pairs for the matching loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead {
    kind: MatchFusion,
    hidden: usize,
    params: MatchParams,
    scorer_w: ParamId,
    scorer_b: ParamId,
}

impl MatchHead {
    pub fn new(kind: MatchFusion, hidden: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("match head needs hidden size >= 1".into()));
        }
        let h = hidden;
        let s = 1.0 / (h as f64).sqrt();
        let mut rng = rng_for(seed, &[0x3a7c, kind as u64]);
        let params = match kind {
            MatchFusion::CrossAttention => MatchParams::CrossAttention {
                wq: store.add("match.wq", gaussian(h, h, s, &mut rng)),
                wk: store.add("match.wk", gaussian(h, h, s, &mut rng)),
                wv: store.add("match.wv", gaussian(h, h, s, &mut rng)),
                wo: store.add("match.wo", gaussian(h, h, s, &mut rng)),
                w1: store.add("match.w1", gaussian(h, 2 * h, s, &mut rng)),
                b1: store.add("match.b1", gaussian(1, 2 * h, 0.02, &mut rng)),
                w2: store.add("match.w2", gaussian(2 * h, h, 1.0 / (2.0 * h as f64).sqrt(), &mut rng)),
                b2: store.add("match.b2", Matrix::zeros(1, h)),
            },
            MatchFusion::Sum => MatchParams::Sum(Adapter::new(store, "match.adapter", h, &mut rng)),
            MatchFusion::Concat => MatchParams::Concat {
                adapter: Adapter::new(store, "match.adapter", 2 * h, &mut rng),
                proj: store.add("match.proj", gaussian(2 * h, h, 1.0 / (2.0 * h as f64).sqrt(), &mut rng)),
                proj_b: store.add("match.proj_b", gaussian(1, h, 0.02, &mut rng)),
            },
        };
        let scorer_w = store.add("match.scorer_w", gaussian(h, 1, s, &mut rng));
        let scorer_b = store.add("match.scorer_b", Matrix::zeros(1, 1));
        Ok(Self { kind, hidden, params, scorer_w, scorer_b })
    }

    pub fn kind(&self) -> MatchFusion {
        self.kind
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = match &self.params {
            MatchParams::CrossAttention { wq, wk, wv, wo, w1, b1, w2, b2 } => {
                vec![*wq, *wk, *wv, *wo, *w1, *b1, *w2, *b2]
            }
            MatchParams::Sum(a) => a.ids().to_vec(),
            MatchParams::Concat { adapter, proj, proj_b } => {
                let mut v = adapter.ids().to_vec();
                v.extend([*proj, *proj_b]);
                v
            }
        };
        out.extend([self.scorer_w, self.scorer_b]);
        out
    }

    /// Fuses each row of `locs` with `user` (`[1 × H]`), giving `[n × H]`.
    fn fuse(&self, g: &mut Graph<'_>, user: Var, locs: Var) -> Var {
        let n = g.shape(locs).0;
        let ones = g.constant(Matrix::filled(n, 1, 1.0));
        let users = g.matmul(ones, user);
        match &self.params {
            MatchParams::Sum(adapter) => {
                let x = g.add(users, locs);
                adapter.apply(g, x)
            }
            MatchParams::Concat { adapter, proj, proj_b } => {
                let x = g.concat_cols(&[users, locs]);
                let x = adapter.apply(g, x);
                let x = affine(g, x, *proj, *proj_b);
                g.tanh(x)
            }
            MatchParams::CrossAttention { wq, wk, wv, wo, w1, b1, w2, b2 } => {
                let h = self.hidden;
                let (wq, wk, wv, wo) = (g.param(*wq), g.param(*wk), g.param(*wv), g.param(*wo));
                let q = g.matmul(users, wq);
                let k = g.matmul(locs, wk);
                let v = g.matmul(locs, wv);
                // Each user query attends over a single key: its own location.
                let qk = g.mul(q, k);
                let col = g.constant(Matrix::filled(h, 1, 1.0));
                let logits = g.matmul(qk, col);
                let logits = g.scale(logits, 1.0 / (h as f64).sqrt());
                let weights = g.softmax_rows(logits);
                let row = g.constant(Matrix::filled(1, h, 1.0));
                let weights = g.matmul(weights, row);
                let att = g.mul(weights, v);
                let o = g.matmul(att, wo);
                let x1 = g.add(users, o);
                let f = affine(g, x1, *w1, *b1);
                let f = g.tanh(f);
                let f = affine(g, f, *w2, *b2);
                g.add(x1, f)
            }
        }
    }

    /// One score per candidate location, returned as a `1 × n` row.
    pub fn match_scores(&self, g: &mut Graph<'_>, user: Var, locs: Var) -> Result<Var> {
        let (ur, uc) = g.shape(user);
        let (n, lc) = g.shape(locs);
        if ur != 1 || uc != self.hidden || lc != self.hidden || n == 0 {
            return Err(Error::Dimension {
                expected: format!("user [1 x {h}], locations [n x {h}]", h = self.hidden),
                got: format!("user [{ur} x {uc}], locations [{n} x {lc}]"),
            });
        }
        let fused = self.fuse(g, user, locs);
        let s = affine(g, fused, self.scorer_w, self.scorer_b);
        Ok(g.transpose(s))
    }

    /// Plain-value convenience wrapper around [`MatchHead::match_scores`].
    pub fn score_values(&self, store: &ParamStore, user: &[f64], locs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if locs.iter().any(|l| l.len() != self.hidden) {
            return Err(Error::Dimension {
                expected: format!("location vectors of length {}", self.hidden),
                got: "mismatched location vector".into(),
            });
        }
        let mut g = Graph::new(store);
        let u = g.input(Matrix::row_vector(user.to_vec()));
        let l = g.input(Matrix::from_rows(locs));
        let s = self.match_scores(&mut g, u, l)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Affine K-way classifier used by the classification baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    w: ParamId,
    b: ParamId,
    classes: usize,
    hidden: usize,
}

impl ClassHead {
    pub fn new(hidden: usize, classes: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if classes == 0 || hidden == 0 {
            return Err(Error::Config("class head needs at least one class and hidden unit".into()));
        }
        let mut rng = rng_for(seed, &[0xc1a5]);
        let w = store.add("class.w", gaussian(hidden, classes, 1.0 / (hidden as f64).sqrt(), &mut rng));
        let b = store.add("class.b", Matrix::zeros(1, classes));
        Ok(Self { w, b, classes, hidden })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn logits(&self, g: &mut Graph<'_>, user: Var) -> Result<Var> {
        let shape = g.shape(user);
        if shape != (1, self.hidden) {
            return Err(Error::Dimension {
                expected: format!("[1 x {}]", self.hidden),
                got: format!("[{} x {}]", shape.0, shape.1),
            });
        }
        Ok(affine(g, user, self.w, self.b))
    }

    pub fn loss(&self, g: &mut Graph<'_>, user: Var, gold: usize) -> Result<Var> {
        if gold >= self.classes {
            return Err(Error::InvalidArgument(format!("gold class {gold} out of range")));
        }
        let z = self.logits(g, user)?;
        Ok(g.cross_entropy(z, gold))
    }
}

/// Classification-baseline loss for one user vector.
pub fn class_loss(store: &ParamStore, head: &ClassHead, user: &[f64], gold: usize) -> Result<f64> {
    check_finite(user)?;
    let mut g = Graph::new(store);
    let u = g.input(Matrix::row_vector(user.to_vec()));
    let l = head.loss(&mut g, u, gold)?;
    let v = g.scalar(l);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("class loss {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_params, REL_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(scores: &[f64], gold: usize) -> SimilarityRow {
        SimilarityRow::new(scores.to_vec(), gold).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn contrastive_uniform_is_log_k() {
        for k in [2usize, 10, 100] {
            let l = contrastive_loss(&row(&vec![0.37; k], k / 2), 0.03).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-9);
        }
        assert_eq!(contrastive_loss(&row(&[4.2], 0), 0.03).unwrap(), 0.0);
    }

    // Expected values evaluated with mpmath at 50 significant digits.
    #[test]
    fn contrastive_matches_high_precision_oracle() {
        let l = contrastive_loss(&row(&[2.0, 0.0, 0.0], 0), 0.5).unwrap();
        assert!(rel(l, 0.035_976_299_748_193_162_992_735_1) < 1e-12);
        let cases: [(&[f64], usize, f64, f64); 3] = [
            (&[-0.352334, -0.698302, 0.301869, -0.855127, 0.071764], 2, 0.03, 4.664_316_028_236_154_727_823_886e-4),
            (
                &[-0.268622, -0.884002, 0.014871, -0.925009, -0.132709, -0.860289, -0.818574],
                0,
                1.0,
                1.733_932_754_205_756_538_719_412,
            ),
            (
                &[
                    -0.150962, 0.653704, -0.752396, -0.553522, 0.254866, 0.895418, 0.154206, -0.206639, 0.95251,
                    -0.906835, 0.716937, -0.420781,
                ],
                11,
                0.2,
                7.717_470_054_861_269_849_540_453,
            ),
        ];
        for (scores, gold, tau, want) in cases {
            let got = contrastive_loss(&row(scores, gold), tau).unwrap();
            assert!(rel(got, want) < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn contrastive_shift_invariance_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let a = contrastive_loss(&row(&scores, 3), 0.1).unwrap();
            let b = contrastive_loss(&row(&shifted, 3), 0.1).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
        let mut scores = vec![0.2, -0.1, 0.4, 0.0];
        let mut prev = f64::INFINITY;
        for step in 0..40 {
            scores[1] = -0.5 + 0.05 * step as f64;
            let l = contrastive_loss(&row(&scores, 1), 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
        // The gold-maximal arrangement has the smallest loss over gold choices.
        let s = [0.1, 0.9, 0.3, -0.2];
        let losses: Vec<f64> = (0..4).map(|g| contrastive_loss(&row(&s, g), 0.5).unwrap()).collect();
        let best = (0..4).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn contrastive_errors() {
        assert!(matches!(contrastive_loss(&row(&[1.0, f64::NAN], 0), 1.0), Err(Error::NonFinite(_))));
        assert!(matches!(
            contrastive_loss(&row(&[1.0, f64::NEG_INFINITY], 0), 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(contrastive_loss(&row(&[1.0, 0.0], 0), 0.0).is_err());
        assert!(SimilarityRow::new(vec![1.0], 1).is_err());
    }

    #[test]
    fn contrastive_node_matches_scalar() {
        let store = ParamStore::new();
        let scores = [0.3, -0.2, 0.8, 0.1];
        let mut g = Graph::new(&store);
        let s = g.input(Matrix::row_vector(scores.to_vec()));
        let l = contrastive_loss_node(&mut g, s, 2, 0.03);
        let direct = contrastive_loss(&row(&scores, 2), 0.03).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-12);
    }

    #[test]
    fn matching_loss_identities() {
        assert!((matching_loss(&[0.5; 7]).unwrap() - 7f64.ln()).abs() < 1e-9);
        let hi = matching_loss(&[20.0, 0.0, 0.0]).unwrap();
        let lo = matching_loss(&[10.0, 0.0, 0.0]).unwrap();
        assert!(hi < lo && hi >= 0.0);
        let want = 1.733_932_754_205_756_538_719_412;
        let got = matching_loss(&[-0.268622, -0.884002, 0.014871, -0.925009, -0.132709, -0.860289, -0.818574]).unwrap();
        assert!(rel(got, want) < 1e-10);
        assert!(matching_loss(&[1.0]).is_err());
        assert!(matching_loss(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn joint_loss_sums_terms() {
        let j = joint_loss(&row(&[0.0; 10], 4), 0.03, Some(&[1.0; 7])).unwrap();
        assert!((j.total() - (10f64.ln() + 7f64.ln())).abs() < 1e-9);
        let alone = joint_loss(&row(&[0.3, 0.1, 0.2], 0), 0.5, None).unwrap();
        assert_eq!(alone.total(), contrastive_loss(&row(&[0.3, 0.1, 0.2], 0), 0.5).unwrap());
        assert_eq!(alone.matching, None);
        let s = [2.0, 0.0, 0.0];
        let j = joint_loss(&row(&s, 0), 0.5, Some(&s)).unwrap();
        // Contrastive at tau 0.5 plus the unit-temperature CE, both from mpmath.
        let want = 0.035_976_299_748_193_162_992_735_1 + 0.239_544_766_221_884_504_868_922_9;
        assert!(rel(j.total(), want) < 1e-10);
    }

    #[test]
    fn top_mining_cases() {
        let top = |s: &[f64], gold: usize, k: usize| {
            mine_negatives(&row(s, gold), MiningPolicy { kind: MiningKind::Top, k }, 1.0, 0).unwrap()
        };
        assert_eq!(top(&[0.1, 0.9, 0.8, 0.2], 0, 2), vec![1, 2]);
        assert_eq!(top(&[0.1, 0.9, 0.8, 0.2], 0, 3), vec![1, 2, 3]);
        assert_eq!(top(&[0.5, 0.5, 0.5, 0.5], 1, 2), vec![0, 2]);
        assert_eq!(top(&[0.9, 0.1, 0.3], 0, 1), vec![2]);
        // Permuting tied scores that are not selected leaves the output alone.
        assert_eq!(top(&[0.0, 0.9, 0.2, 0.2, 0.2], 0, 1), vec![1]);
        assert_eq!(top(&[0.0, 0.2, 0.2, 0.9, 0.2], 0, 1), vec![3]);
        // Exhaustive enumeration against a sort-based oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..8);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..4) as f64) * 0.25).collect();
            let gold = rng.random_range(0..n);
            for k in 1..n {
                let got = top(&s, gold, k);
                let mut pairs: Vec<(f64, usize)> = (0..n).filter(|&j| j != gold).map(|j| (-s[j], j)).collect();
                pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn mining_errors_and_edges() {
        let p = |kind, k| MiningPolicy { kind, k };
        let r = row(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], 0);
        assert!(mine_negatives(&r, p(MiningKind::Multinomial, 1), 1.0, 0).is_err());
        assert!(mine_negatives(&r, p(MiningKind::Top, 1), 1.0, 0).is_err());
        let r = row(&[0.0, 0.1, 0.2], 1);
        assert!(mine_negatives(&r, p(MiningKind::Top, 3), 1.0, 0).is_err());
        assert!(mine_negatives(&row(&[0.0, f64::NAN], 0), p(MiningKind::Top, 1), 1.0, 0).is_err());
        let all = mine_negatives(&r, p(MiningKind::Multinomial, 2), 0.03, 5).unwrap();
        assert_eq!(all, vec![0, 2]);
        // Underflowed weights fall back to rank order.
        let r = row(&[0.0, 50.0, 0.0, -50.0], 0);
        let got = mine_negatives(&r, p(MiningKind::Multinomial, 2), 0.03, 1).unwrap();
        assert_eq!(got, vec![1, 2]);
        let a = mine_negatives(&row(&[0.1, 0.2, 0.3, 0.4, 0.5], 2), p(MiningKind::Multinomial, 2), 0.5, 77).unwrap();
        let b = mine_negatives(&row(&[0.1, 0.2, 0.3, 0.4, 0.5], 2), p(MiningKind::Multinomial, 2), 0.5, 77).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&2));
    }

    #[test]
    fn multinomial_single_draw_frequencies() {
        let scores: [f64; 5] = [0.4, 0.1, -0.3, 0.25, 0.0];
        let gold = 0;
        let tau = 0.2;
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for seed in 0..draws {
            let got = mine_negatives(&row(&scores, gold), MiningPolicy { kind: MiningKind::Multinomial, k: 1 }, tau, seed)
                .unwrap();
            counts[got[0]] += 1;
        }
        let z: f64 = (1..5).map(|j| (scores[j] / tau).exp()).sum();
        assert_eq!(counts[0], 0);
        for j in 1..5 {
            let p = (scores[j] / tau).exp() / z;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[j] as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "index {j}: {freq} vs {p}");
        }
    }

    /// Inclusion probabilities of sequential weighted sampling without
    /// replacement, by enumerating every ordered draw.
    fn inclusion_oracle(weights: &[f64], k: usize) -> Vec<f64> {
        fn walk(w: &[f64], taken: &mut Vec<usize>, p: f64, k: usize, out: &mut [f64]) {
            if taken.len() == k {
                for &t in taken.iter() {
                    out[t] += p;
                }
                return;
            }
            let rest: f64 = (0..w.len()).filter(|i| !taken.contains(i)).map(|i| w[i]).sum();
            for i in 0..w.len() {
                if taken.contains(&i) {
                    continue;
                }
                taken.push(i);
                walk(w, taken, p * w[i] / rest, k, out);
                taken.pop();
            }
        }
        let mut out = vec![0.0; weights.len()];
        walk(weights, &mut Vec::new(), 1.0, k, &mut out);
        out
    }

    #[test]
    fn multinomial_multi_draw_inclusion() {
        let scores: [f64; 6] = [0.3, 0.5, 0.2, -0.1, 0.4, 0.0];
        let gold = 2;
        let tau = 0.25;
        let k = 3;
        let cand: Vec<usize> = (0..6).filter(|&j| j != gold).collect();
        let weights: Vec<f64> = cand.iter().map(|&j| (scores[j] / tau).exp()).collect();
        let oracle = inclusion_oracle(&weights, k);
        let draws = 10_000;
        let mut counts = [0usize; 6];
        for seed in 0..draws {
            let got = mine_negatives(&row(&scores, gold), MiningPolicy { kind: MiningKind::Multinomial, k }, tau, seed)
                .unwrap();
            assert_eq!(got.len(), k);
            for j in got {
                counts[j] += 1;
            }
        }
        assert_eq!(counts[gold], 0);
        for (c, &j) in cand.iter().enumerate() {
            let p = oracle[c];
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[j] as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "index {j}: {freq} vs {p}");
        }
    }

    fn random_rows(n: usize, h: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, h, (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn sum_fusion_with_zero_user_depends_only_on_location() {
        let mut store = ParamStore::new();
        let head = MatchHead::new(MatchFusion::Sum, 8, &mut store, 2).unwrap();
        let locs = random_rows(3, 8, 1);
        let rows: Vec<Vec<f64>> = (0..3).map(|r| locs.row(r).to_vec()).collect();
        let zero = head.score_values(&store, &[0.0; 8], &rows).unwrap();
        let single: Vec<f64> = rows
            .iter()
            .map(|l| head.score_values(&store, &[0.0; 8], std::slice::from_ref(l)).unwrap()[0])
            .collect();
        assert_eq!(zero, single);
        let dup = head.score_values(&store, &[0.1; 8], &[rows[0].clone(), rows[0].clone()]).unwrap();
        assert_eq!(dup[0], dup[1]);
    }

    #[test]
    fn match_scores_shapes_and_duplicates() {
        for kind in MatchFusion::ALL {
            let mut store = ParamStore::new();
            let head = MatchHead::new(kind, 8, &mut store, 4).unwrap();
            let u = random_rows(1, 8, 5).row(0).to_vec();
            let l = random_rows(1, 8, 6).row(0).to_vec();
            let other = random_rows(1, 8, 7).row(0).to_vec();
            let s = head.score_values(&store, &u, &[l.clone(), other, l]).unwrap();
            assert_eq!(s.len(), 3);
            assert_eq!(s[0], s[2], "{kind:?}");
            assert_ne!(s[0], s[1], "{kind:?}");
            assert!(head.score_values(&store, &u, &[vec![0.0; 7]]).is_err());
        }
    }

    pub(crate) fn check_match_gradients(kind: MatchFusion) -> f64 {
        let h = 8;
        let mut store = ParamStore::new();
        let head = MatchHead::new(kind, h, &mut store, 13).unwrap();
        let uid = store.add("user", random_rows(1, h, 21));
        let lid = store.add("locs", random_rows(4, h, 22));
        let mut ids = head.params();
        ids.extend([uid, lid]);
        check_params(&store, &ids, 8, |g| {
            let u = g.param(uid);
            let l = g.param(lid);
            let s = head.match_scores(g, u, l).unwrap();
            g.cross_entropy(s, 0)
        })
    }

    #[test]
    fn match_head_gradients() {
        for kind in MatchFusion::ALL {
            let worst = check_match_gradients(kind);
            assert!(worst <= REL_TOL, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn class_loss_cases() {
        let mut store = ParamStore::new();
        let head = ClassHead::new(3, 4, &mut store, 0).unwrap();
        let w = store.find("class.w").unwrap();
        let b = store.find("class.b").unwrap();
        store.set(w, Matrix::zeros(3, 4));
        let uniform = class_loss(&store, &head, &[0.3, -0.2, 0.9], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        store.set(
            w,
            Matrix::from_rows(&[
                vec![0.1, -0.2, 0.3, 0.0],
                vec![0.4, 0.5, -0.6, 0.7],
                vec![-0.8, 0.9, 1.0, -1.1],
            ]),
        );
        store.set(b, Matrix::row_vector(vec![0.01, -0.02, 0.03, -0.04]));
        // mpmath, 50 digits.
        let want = [
            2.026_116_292_230_767_261_852_416,
            1.881_116_292_230_767_261_852_416,
            0.456_116_292_230_767_261_852_416_1,
            2.501_116_292_230_767_261_852_416,
        ];
        for (gold, w) in want.iter().enumerate() {
            let got = class_loss(&store, &head, &[0.5, -1.0, 0.25], gold).unwrap();
            assert!(rel(got, *w) < 1e-10);
        }
        let mut single = ParamStore::new();
        let one = ClassHead::new(3, 1, &mut single, 0).unwrap();
        assert_eq!(class_loss(&single, &one, &[1.0, 2.0, 3.0], 0).unwrap(), 0.0);
        assert!(class_loss(&store, &head, &[0.5, -1.0, 0.25], 4).is_err());
    }
}
