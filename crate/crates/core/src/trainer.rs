//! Model assembly, the AdamW training loop with dev early stopping, and the
//! few-shot and zero-shot experiment drivers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::thread;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Matrix, ParamId, ParamStore, Var};
use crate::config::{ContrastScope, DatasetConfig, ModelKind, RunConfig};
use crate::corpus::synthetic::generate;
use crate::corpus::{
    dataset_to_string, filter_minority_classes, load_dataset, make_shot_subsets, make_split, Dataset,
    FewShotSplit, LabelId, LocationLabel, Shortfall, UserId, UserRecord,
};
use crate::encoder::{TextEncoder, ToyEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{average_reports, evaluate, predict_index, EvalReport};
use crate::geo_prompt::LocationBank;
use crate::objectives::{contrastive_loss_node, mine_negatives, ClassHead, MatchHead, SimilarityRow};
use crate::rng::{derive_seed, rng_for};
use crate::user_repr::{FusionEncoder, UserEncoder};

/// Adam with decoupled weight decay, in the update order used by PyTorch:
/// decay the weights, then apply the bias-corrected Adam step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<ParamId, Matrix>,
    v: HashMap<ParamId, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter in `params` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, params: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in params {
            let Some(g) = grads.param(id) else { continue };
            let (rows, cols) = g.shape();
            let m = self.m.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
            let p = store.get_mut(id);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *p *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    /// Contrastive model; the match head is absent when `k = 0`.
    Contrastive(Option<MatchHead>),
    Classifier(ClassHead),
}

/// Everything trainable for one run, sharing a single parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub users: UserEncoder,
    pub bank: LocationBank,
    pub head: Head,
}

impl Model {
    pub fn build(cfg: &RunConfig, labels: &[LocationLabel]) -> Result<Self> {
        let (encoder, mut store) = match &cfg.encoder.checkpoint {
            Some(path) => ToyEncoder::load_checkpoint(path)?,
            None => {
                let mut store = ParamStore::new();
                let enc = ToyEncoder::new(cfg.encoder.toy.clone(), &mut store)?;
                (enc, store)
            }
        };
        let h = encoder.hidden_size();
        let seed = cfg.train.seed;
        let fusion = FusionEncoder::new(cfg.representation.fusion, h, &mut store, derive_seed(seed, &[1]))?;
        let users = UserEncoder { strategy: cfg.strategy(), fusion };
        let prompt = cfg.prompt.build(&mut store, &encoder, derive_seed(seed, &[2]))?;
        let bank = LocationBank::new(labels.to_vec(), prompt)?;
        let head = match cfg.objective.model {
            ModelKind::FewUser if cfg.objective.k > 0 => Head::Contrastive(Some(MatchHead::new(
                cfg.objective.fusion_kind,
                h,
                &mut store,
                derive_seed(seed, &[3]),
            )?)),
            ModelKind::FewUser => Head::Contrastive(None),
            ModelKind::ClassUser => Head::Classifier(ClassHead::new(h, labels.len(), &mut store, derive_seed(seed, &[4]))?),
        };
        Ok(Self { store, encoder, users, bank, head })
    }

    pub fn labels(&self) -> &[LocationLabel] {
        self.bank.labels()
    }

    /// Parameters updated by the optimizer: everything on the path to the
    /// model's loss.
    pub fn trainable(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.users.fusion.params());
        match &self.head {
            Head::Contrastive(m) => {
                ids.extend(self.bank.prompt().params());
                if let Some(m) = m {
                    ids.extend(m.params());
                }
            }
            Head::Classifier(c) => ids.extend(c.params()),
        }
        ids
    }

    pub fn prepare(&self, user: &UserRecord) -> Result<Vec<TokenSequence>> {
        self.users.prepare(&self.encoder, user)
    }

    /// Predicted label index per prepared user. The contrastive model ranks
    /// the location bank by dot product; the classifier takes its argmax.
    pub fn predict_prepared(&self, prepared: &[&[TokenSequence]], threads: usize) -> Result<Vec<usize>> {
        let bank = match &self.head {
            Head::Contrastive(_) => Some(self.bank.embeddings(&self.store, &self.encoder)?),
            Head::Classifier(_) => None,
        };
        let one = |p: &[TokenSequence]| -> Result<usize> {
            let mut g = Graph::new(&self.store);
            let u = self.users.embed(&mut g, &self.encoder, p)?;
            match (&self.head, &bank) {
                (Head::Classifier(c), _) => {
                    let z = c.logits(&mut g, u)?;
                    Ok(predict_index(&[1.0], &Matrix::from_vec(c.classes(), 1, g.value(z).data().to_vec())))
                }
                (_, Some(b)) => Ok(predict_index(g.value(u).data(), b)),
                _ => unreachable!("bank computed for contrastive head"),
            }
        };
        let threads = resolve_threads(threads).min(prepared.len().max(1));
        if threads <= 1 {
            return prepared.iter().map(|p| one(p)).collect();
        }
        let chunk = prepared.len().div_ceil(threads);
        let parts: Vec<Result<Vec<usize>>> = thread::scope(|s| {
            let handles: Vec<_> = prepared
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|p| one(p)).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(prepared.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn predict_users(&self, users: &[&UserRecord], threads: usize) -> Result<Vec<LabelId>> {
        let prepared = users.iter().map(|u| self.prepare(u)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[TokenSequence]> = prepared.iter().map(|p| p.as_slice()).collect();
        let idx = self.predict_prepared(&refs, threads)?;
        Ok(idx.into_iter().map(|i| self.labels()[i].label_id.clone()).collect())
    }

    pub fn evaluate_users(&self, users: &[&UserRecord], threads: usize) -> Result<EvalReport> {
        let predicted = self.predict_users(users, threads)?;
        let gold: Vec<LabelId> = users.iter().map(|u| u.label_id.clone()).collect();
        evaluate(&gold, &predicted, self.labels())
    }

    /// Writes every parameter tensor, by name, as JSON.
    pub fn save_params(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let tensors: indexmap::IndexMap<&str, &Matrix> = self.store.iter().map(|(_, n, m)| (n, m)).collect();
        crate::encoder::write_json(path.as_ref(), &tensors)
    }
}

fn resolve_threads(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        thread::available_parallelism().map_or(1, |n| n.get())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean contrastive loss, or the classification loss for ClassUser.
    pub l_contrast: f64,
    pub l_match: Option<f64>,
    pub dev_acc: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,L_contrast,L_match,dev_acc\n");
    for p in curve {
        let m = p.l_match.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", p.epoch, p.l_contrast, m, p.dev_acc);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// 0 when no epoch beat the initial snapshot.
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub epochs_run: usize,
}

/// Batch losses: the differentiable total plus the two logged means.
struct BatchLoss {
    total: Var,
    contrast: f64,
    matching: Option<f64>,
}

fn batch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    cfg: &RunConfig,
    batch: &[(&[TokenSequence], usize)],
    mining_seed: u64,
) -> Result<BatchLoss> {
    let tau = cfg.objective.tau;
    let b = batch.len() as f64;
    let mut terms = Vec::with_capacity(2 * batch.len());
    let mut contrast = 0.0;
    let mut matching = 0.0;
    let mut matched = 0usize;
    match &model.head {
        Head::Classifier(c) => {
            for (prepared, gold) in batch {
                let u = model.users.embed(g, &model.encoder, prepared)?;
                let l = c.loss(g, u, *gold)?;
                contrast += g.scalar(l);
                terms.push(l);
            }
        }
        Head::Contrastive(head) => {
            let bank = model.bank.embed_all(g, &model.encoder)?;
            // Candidate labels for the softmax and their position of each gold.
            let (cands, bank) = match cfg.objective.contrast_over {
                ContrastScope::AllLabels => (None, bank),
                ContrastScope::BatchLabels => {
                    let mut c: Vec<usize> = batch.iter().map(|(_, gold)| *gold).collect();
                    c.sort_unstable();
                    c.dedup();
                    let sub = g.gather_rows(bank, &c);
                    (Some(c), sub)
                }
            };
            for (i, (prepared, gold)) in batch.iter().enumerate() {
                let u = model.users.embed(g, &model.encoder, prepared)?;
                let scores = g.matmul_t(u, bank);
                let gold_pos = match &cands {
                    None => *gold,
                    Some(c) => c.binary_search(gold).expect("gold among batch labels"),
                };
                let l = contrastive_loss_node(g, scores, gold_pos, tau);
                contrast += g.scalar(l);
                terms.push(l);
                let Some(head) = head else { continue };
                let k = cfg.objective.k.min(g.shape(bank).0 - 1);
                if k == 0 {
                    continue;
                }
                let row = SimilarityRow::new(g.value(scores).data().to_vec(), gold_pos)?;
                let mut policy = cfg.objective.mining_policy();
                policy.k = k;
                let negs = mine_negatives(&row, policy, tau, derive_seed(mining_seed, &[i as u64]))?;
                let mut idx = vec![gold_pos];
                idx.extend(negs);
                let locs = g.gather_rows(bank, &idx);
                let s = head.match_scores(g, u, locs)?;
                let lm = g.cross_entropy(s, 0);
                matching += g.scalar(lm);
                matched += 1;
                terms.push(lm);
            }
        }
    }
    let sum = g.add_scalars(&terms);
    let total = g.scale(sum, 1.0 / b);
    Ok(BatchLoss {
        total,
        contrast: contrast / b,
        matching: (matched > 0).then(|| matching / b),
    })
}

/// Trains `model` in place and leaves the best-dev snapshot in its store.
/// `run_seed` fixes the shuffling and mining streams.
pub fn train(
    model: &mut Model,
    train_users: &[&UserRecord],
    dev_users: &[&UserRecord],
    cfg: &RunConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    if train_users.is_empty() {
        return Err(Error::InvalidArgument("training subset is empty".into()));
    }
    if dev_users.is_empty() {
        return Err(Error::InvalidArgument("early stopping needs a non-empty dev set".into()));
    }
    let index: HashMap<&LabelId, usize> = model.labels().iter().enumerate().map(|(i, l)| (&l.label_id, i)).collect();
    let gold_of = |u: &UserRecord| {
        index.get(&u.label_id).copied().ok_or_else(|| Error::DanglingLabel {
            user_id: u.user_id.0.clone(),
            label_id: u.label_id.0.clone(),
        })
    };
    let train_prepared = train_users.iter().map(|u| model.prepare(u)).collect::<Result<Vec<_>>>()?;
    let train_gold = train_users.iter().map(|u| gold_of(u)).collect::<Result<Vec<_>>>()?;
    let dev_prepared = dev_users.iter().map(|u| model.prepare(u)).collect::<Result<Vec<_>>>()?;
    let dev_refs: Vec<&[TokenSequence]> = dev_prepared.iter().map(|p| p.as_slice()).collect();
    let dev_gold = dev_users.iter().map(|u| gold_of(u)).collect::<Result<Vec<_>>>()?;
    let threads = cfg.eval.threads;
    let dev_acc = |m: &Model| -> Result<f64> {
        let pred = m.predict_prepared(&dev_refs, threads)?;
        let hits = pred.iter().zip(&dev_gold).filter(|(p, g)| p == g).count();
        Ok(hits as f64 / dev_gold.len() as f64)
    };

    let t = &cfg.train;
    let mut opt = AdamW::new(cfg.learning_rate(), t.opt_beta1, t.opt_beta2, t.opt_eps, t.weight_decay);
    let params = model.trainable();
    let mut best_store = model.store.clone();
    let mut best_dev = dev_acc(model)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train_users.len()).collect();

    for epoch in 1..=t.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(run_seed, &[0x5f, epoch as u64]));
        let mut sum_contrast = 0.0;
        let mut sum_match = 0.0;
        let mut any_match = false;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch: Vec<(&[TokenSequence], usize)> =
                chunk.iter().map(|&i| (train_prepared[i].as_slice(), train_gold[i])).collect();
            let seed = derive_seed(run_seed, &[0x6e, epoch as u64, bi as u64]);
            let (loss, grads) = {
                let mut g = Graph::new(&model.store);
                let l = batch_loss(&mut g, model, cfg, &batch, seed)?;
                let total = g.scalar(l.total);
                let grads = g.backward(l.total);
                if !total.is_finite() || !grads.is_finite() {
                    let ids: Vec<&str> = chunk.iter().map(|&i| train_users[i].user_id.0.as_str()).collect();
                    return Err(Error::NonFinite(format!(
                        "loss {total} at epoch {epoch}, batch {bi}, users {ids:?}"
                    )));
                }
                ((l.contrast, l.matching), grads)
            };
            opt.step(&mut model.store, &grads, &params);
            sum_contrast += loss.0;
            if let Some(m) = loss.1 {
                sum_match += m;
                any_match = true;
            }
            batches += 1;
        }
        let acc = dev_acc(model)?;
        curve.push(CurvePoint {
            epoch,
            l_contrast: sum_contrast / batches as f64,
            l_match: any_match.then(|| sum_match / batches as f64),
            dev_acc: acc,
        });
        if acc >= best_dev {
            if acc > best_dev {
                since_best = 0;
            } else {
                since_best += 1;
            }
            best_dev = acc;
            best_epoch = epoch;
            best_store = model.store.clone();
        } else {
            since_best += 1;
        }
        if since_best >= t.patience {
            break;
        }
    }
    let epochs_run = curve.len();
    model.store = best_store;
    Ok(TrainOutcome { curve, best_epoch, best_dev_acc: best_dev, epochs_run })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Dataset after minority filtering, plus its split with shot subsets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: FewShotSplit,
}

pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_configured(&cfg.dataset)
}

/// The file at `path`, else the synthetic spec, else the default synthetic
/// corpus.
pub fn load_configured(dataset: &DatasetConfig) -> Result<Dataset> {
    match (&dataset.path, &dataset.synthetic) {
        (Some(p), _) => load_dataset(p),
        (None, Some(spec)) => generate(spec),
        (None, None) => generate(&Default::default()),
    }
}

/// Filter, split and subset as the config prescribes.
pub fn prepare(dataset: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let dataset = filter_minority_classes(dataset, cfg.dataset.min_count)?;
    let split = make_split(&dataset, cfg.split.ratios, cfg.split.seed, cfg.split.dev_cap)?;
    let split = if cfg.split.shots > 0 {
        make_shot_subsets(&split, &dataset, &[cfg.split.shots], &cfg.split.subset_seeds)?
    } else {
        split
    };
    Ok(Prepared { dataset, split })
}

pub const MANIFEST_FORMAT: &str = "fewuser-run";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    FewShot,
    ZeroShot,
}

/// Everything needed to replay a run: the full config plus content hashes
/// of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub mode: RunMode,
    pub config: RunConfig,
    pub learning_rate: f64,
    pub dataset_sha256: String,
    pub split_sha256: String,
    pub shots: usize,
    pub subset_seeds: Vec<u64>,
    pub shortfall: Vec<Shortfall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRun {
    pub seed_index: usize,
    pub seed: u64,
    pub train_users: usize,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub epochs_run: usize,
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub manifest: RunManifest,
    /// Empty for zero-shot runs.
    pub subsets: Vec<SubsetRun>,
    pub averaged: EvalReport,
}

impl RunResult {
    pub fn per_subset_metrics(&self) -> Vec<&EvalReport> {
        self.subsets.iter().map(|s| &s.report).collect()
    }
}

fn manifest(cfg: &RunConfig, prep: &Prepared, mode: RunMode) -> Result<RunManifest> {
    let split_json = serde_json::to_string(&prep.split)?;
    let shots = match mode {
        RunMode::FewShot => cfg.split.shots,
        RunMode::ZeroShot => 0,
    };
    Ok(RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        mode,
        config: cfg.clone(),
        learning_rate: cfg.learning_rate(),
        dataset_sha256: sha256_hex(dataset_to_string(&prep.dataset)?.as_bytes()),
        split_sha256: sha256_hex(split_json.as_bytes()),
        shots,
        subset_seeds: cfg.split.subset_seeds.to_vec(),
        shortfall: prep.split.shortfall_classes.iter().filter(|s| s.shots == shots).cloned().collect(),
    })
}

fn select<'a>(dataset: &'a Dataset, ids: &[UserId]) -> Vec<&'a UserRecord> {
    dataset.select(ids)
}

/// Trains once per seeded s-shot subset, evaluates each on the shared test
/// set and averages the three reports.
pub fn run_fewshot(prep: &Prepared, cfg: &RunConfig) -> Result<RunResult> {
    run_fewshot_models(prep, cfg).map(|(r, _)| r)
}

/// [`run_fewshot`], also returning the three trained models.
pub fn run_fewshot_models(prep: &Prepared, cfg: &RunConfig) -> Result<(RunResult, Vec<Model>)> {
    let shots = cfg.split.shots;
    if shots == 0 {
        return Err(Error::Config("few-shot run needs split.shots >= 1".into()));
    }
    let subsets = prep.split.subsets_for(shots);
    if subsets.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected 3 subsets for {shots}-shot, found {}",
            subsets.len()
        )));
    }
    let dev = select(&prep.dataset, &prep.split.dev_ids);
    let test = select(&prep.dataset, &prep.split.test_ids);
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let one = |idx: usize| -> Result<(SubsetRun, Model)> {
        let subset = subsets[idx];
        let train_users = select(&prep.dataset, &subset.user_ids);
        let mut model = Model::build(cfg, &prep.dataset.labels)?;
        let run_seed = derive_seed(cfg.train.seed, &[subset.seed, shots as u64]);
        let out = train(&mut model, &train_users, &dev, cfg, run_seed)?;
        let report = model.evaluate_users(&test, cfg.eval.threads)?;
        let run = SubsetRun {
            seed_index: subset.seed_index,
            seed: subset.seed,
            train_users: train_users.len(),
            best_epoch: out.best_epoch,
            best_dev_acc: out.best_dev_acc,
            epochs_run: out.epochs_run,
            report: strip(report, cfg),
            curve: out.curve,
        };
        Ok((run, model))
    };
    let runs: Vec<(SubsetRun, Model)> = if cfg.train.parallel_subsets {
        thread::scope(|s| {
            let handles: Vec<_> = (0..3).map(|i| s.spawn(move || one(i))).collect();
            handles.into_iter().map(|h| h.join().expect("subset worker panicked")).collect::<Result<_>>()
        })?
    } else {
        (0..3).map(one).collect::<Result<_>>()?
    };
    let (runs, models): (Vec<SubsetRun>, Vec<Model>) = runs.into_iter().unzip();
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let result = RunResult {
        manifest: manifest(cfg, prep, RunMode::FewShot)?,
        subsets: runs,
        averaged: average_reports(&reports)?,
    };
    Ok((result, models))
}

fn strip(mut report: EvalReport, cfg: &RunConfig) -> EvalReport {
    if !cfg.eval.per_class {
        report.per_class_acc.clear();
    }
    report
}

/// Inference with the initial (or checkpoint-loaded) parameters only.
pub fn run_zeroshot(prep: &Prepared, cfg: &RunConfig) -> Result<RunResult> {
    if cfg.objective.model == ModelKind::ClassUser {
        return Err(Error::Config("the classification baseline has no zero-shot mode".into()));
    }
    let model = Model::build(cfg, &prep.dataset.labels)?;
    let test = select(&prep.dataset, &prep.split.test_ids);
    let report = strip(model.evaluate_users(&test, cfg.eval.threads)?, cfg);
    Ok(RunResult {
        manifest: manifest(cfg, prep, RunMode::ZeroShot)?,
        subsets: Vec::new(),
        averaged: report,
    })
}

/// Dispatches on `split.shots`.
pub fn run(prep: &Prepared, cfg: &RunConfig) -> Result<RunResult> {
    if cfg.split.shots == 0 {
        run_zeroshot(prep, cfg)
    } else {
        run_fewshot(prep, cfg)
    }
}

/// Loads, prepares and runs; also returns the prepared data.
pub fn run_config(cfg: &RunConfig) -> Result<(Prepared, RunResult)> {
    cfg.validate()?;
    let dataset = load_run_dataset(cfg)?;
    let prep = prepare(&dataset, cfg)?;
    let result = run(&prep, cfg)?;
    Ok((prep, result))
}

/// Re-runs the experiment a manifest describes, refusing if the inputs no
/// longer hash to the recorded values.
pub fn replay(manifest: &RunManifest) -> Result<(Prepared, RunResult)> {
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let cfg = &manifest.config;
    let dataset = load_run_dataset(cfg)?;
    let prep = prepare(&dataset, cfg)?;
    let got = sha256_hex(dataset_to_string(&prep.dataset)?.as_bytes());
    if got != manifest.dataset_sha256 {
        return Err(Error::Config(format!(
            "dataset hash {got} differs from manifest {}",
            manifest.dataset_sha256
        )));
    }
    let result = run(&prep, cfg)?;
    if result.manifest.split_sha256 != manifest.split_sha256 {
        return Err(Error::Config("split differs from manifest".into()));
    }
    Ok((prep, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::SyntheticSpec;
    use crate::encoder::EncoderInit;
    use crate::objectives::MatchFusion;

    // Two steps on parameters (0.5, -1.5) with gradients (0.2, -0.4) then
    // (-0.1, 0.3); lr 0.1, betas (0.85, 0.999), eps 1e-8, decay 0.01.
    // Expected values evaluated with mpmath at 50 digits.
    #[test]
    fn adamw_matches_reference_recurrence() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::row_vector(vec![0.5]));
        let b = store.add("b", Matrix::row_vector(vec![-1.5]));
        let mut opt = AdamW::new(0.1, 0.85, 0.999, 1e-8, 0.01);
        let step = |store: &mut ParamStore, opt: &mut AdamW, ga: f64, gb: f64| {
            let mut g = Graph::new(store);
            let pa = g.param(a);
            let pb = g.param(b);
            let ca = g.constant(Matrix::row_vector(vec![ga]));
            let cb = g.constant(Matrix::row_vector(vec![gb]));
            let x = g.mul(pa, ca);
            let y = g.mul(pb, cb);
            let s = g.add(x, y);
            let grads = g.backward(s);
            opt.step(store, &grads, &[a, b]);
        };
        step(&mut store, &mut opt, 0.2, -0.4);
        step(&mut store, &mut opt, -0.1, 0.3);
        let want = [EXPECTED_A, EXPECTED_B];
        for (id, w) in [a, b].into_iter().zip(want) {
            let got = store.get(id).data()[0];
            assert!(((got - w) / w).abs() < 1e-10, "{got} vs {w}");
        }
        assert_eq!(opt.steps(), 2);
    }

    const EXPECTED_A: f64 = 0.375_166_164_431_377_353_740_418_9;
    const EXPECTED_B: f64 = -1.390_985_556_217_520_775_946_248;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.synthetic = Some(SyntheticSpec {
            classes: 5,
            users_per_class: 12,
            posts_per_user: 2,
            ..Default::default()
        });
        cfg.encoder.toy.hidden = 16;
        cfg.encoder.toy.ffn = 16;
        cfg.encoder.toy.tokenizer.vocab_size = 512;
        cfg.train.epochs = 3;
        cfg.split.shots = 2;
        cfg.objective.k = 2;
        cfg
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut cfg = small_cfg();
        cfg.train.epochs = 0;
        let ds = load_run_dataset(&cfg).unwrap();
        let prep = prepare(&ds, &cfg).unwrap();
        let mut model = Model::build(&cfg, &prep.dataset.labels).unwrap();
        let before = model.store.clone();
        let tr = select(&prep.dataset, &prep.split.subsets_for(2)[0].user_ids);
        let dev = select(&prep.dataset, &prep.split.dev_ids);
        let out = train(&mut model, &tr, &dev, &cfg, 0).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.best_epoch, 0);
        for (id, _, m) in before.iter() {
            assert_eq!(model.store.get(id), m);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let cfg = small_cfg();
        let (_, a) = run_config(&cfg).unwrap();
        let (_, b) = run_config(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut seq = cfg.clone();
        seq.train.parallel_subsets = false;
        seq.eval.threads = 1;
        let (_, c) = run_config(&seq).unwrap();
        assert_eq!(a.subsets, c.subsets);
        let mean = a.subsets.iter().map(|s| s.report.acc).sum::<f64>() / 3.0;
        assert!((a.averaged.acc - mean).abs() < 1e-12);
    }

    #[test]
    fn best_snapshot_is_never_worse_than_observed() {
        let mut cfg = small_cfg();
        cfg.train.epochs = 6;
        cfg.train.patience = 100;
        let (_, r) = run_config(&cfg).unwrap();
        for s in &r.subsets {
            let best_seen = s.curve.iter().map(|p| p.dev_acc).fold(f64::NEG_INFINITY, f64::max);
            assert!(s.best_dev_acc >= best_seen);
            assert_eq!(s.curve.len(), 6);
        }
    }

    #[test]
    fn every_configuration_trains() {
        for (model, fusion, scope, k) in [
            (ModelKind::FewUser, MatchFusion::CrossAttention, ContrastScope::AllLabels, 1),
            (ModelKind::FewUser, MatchFusion::Sum, ContrastScope::BatchLabels, 6),
            (ModelKind::FewUser, MatchFusion::Concat, ContrastScope::AllLabels, 0),
            (ModelKind::ClassUser, MatchFusion::Concat, ContrastScope::AllLabels, 6),
        ] {
            let mut cfg = small_cfg();
            cfg.train.epochs = 1;
            cfg.objective.model = model;
            cfg.objective.fusion_kind = fusion;
            cfg.objective.contrast_over = scope;
            cfg.objective.k = k;
            let (_, r) = run_config(&cfg).unwrap();
            let c = &r.subsets[0].curve[0];
            assert!(c.l_contrast.is_finite());
            assert_eq!(c.l_match.is_some(), model == ModelKind::FewUser && k > 0);
        }
    }

    #[test]
    fn zero_shot_has_no_curve_and_replays() {
        let mut cfg = small_cfg();
        cfg.split.shots = 0;
        cfg.encoder.toy.init = EncoderInit::Aligned;
        let (_, r) = run_config(&cfg).unwrap();
        assert!(r.subsets.is_empty());
        assert_eq!(r.manifest.mode, RunMode::ZeroShot);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("curve"));
        let (_, again) = replay(&r.manifest).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), json);
    }

    #[test]
    fn curve_csv_layout() {
        let csv = curve_csv(&[
            CurvePoint { epoch: 1, l_contrast: 1.5, l_match: Some(0.25), dev_acc: 0.5 },
            CurvePoint { epoch: 2, l_contrast: 1.0, l_match: None, dev_acc: 0.75 },
        ]);
        assert_eq!(csv, "epoch,L_contrast,L_match,dev_acc\n1,1.5,0.25,0.5\n2,1,,0.75\n");
    }
}
