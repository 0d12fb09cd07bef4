//! Desk-scale training: Adam with linear decay, class-aware batch sampling,
//! the triplet baseline with hard-negative mining, and a synthetic dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, ParamGradAccumulator};
use crate::error::{Error, Result};
use crate::exact::{evaluate_retrieval, Protocol, RelevanceJudgment, RetrievalEvaluation};
use crate::multistage::{multistage_step, Counters};
use crate::numerics::{dot, DescriptorMatrix, Matrix};
use crate::quantized::{Balancing, BatchLabels, BinGrid, LossConfig, Variant};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    ApQ,
    TieAware,
    Triplet,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap_q" => Ok(Self::ApQ),
            "tie_aware" => Ok(Self::TieAware),
            "triplet" => Ok(Self::Triplet),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ApQ => "ap_q",
            Self::TieAware => "tie_aware",
            Self::Triplet => "triplet",
        })
    }
}

/// Triplet-loss baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    /// Margin on squared L2 distances between unit descriptors.
    pub margin: f64,
    pub triplets_per_update: usize,
    /// Number of training images whose descriptors are mined; 0 = all.
    pub mining_pool_size: usize,
    /// Updates between two refreshes of the pool descriptors.
    pub refresh_every: usize,
    /// Each triplet's negative is drawn among this many hardest negatives.
    pub hardest_negatives: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            triplets_per_update: 64,
            mining_pool_size: 0,
            refresh_every: 16,
            hardest_negatives: 5,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig("triplet margin must be positive".into()));
        }
        if self.triplets_per_update == 0 || self.refresh_every == 0 || self.hardest_negatives == 0 {
            return Err(Error::InvalidConfig(
                "triplets_per_update, refresh_every and hardest_negatives must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Training run configuration; mirrors the JSON run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_iters: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub bins: usize,
    pub loss: LossKind,
    pub balanced: bool,
    pub seed: u64,
    /// Evaluate every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Restrict each batch to this many random classes.
    pub classes_per_batch: Option<usize>,
    pub triplet: TripletConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            total_iters: 200,
            weight_decay: 1e-6,
            batch_size: 256,
            bins: 20,
            loss: LossKind::ApQ,
            balanced: false,
            seed: 0,
            eval_every: 0,
            classes_per_batch: None,
            triplet: TripletConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig("lr0 must be nonnegative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be nonnegative".into()));
        }
        if self.total_iters == 0 {
            return Err(Error::InvalidConfig("total_iters must be positive".into()));
        }
        match self.loss {
            LossKind::Triplet => self.triplet.validate()?,
            _ => {
                if self.batch_size < 2 {
                    return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
                }
                BinGrid::new(self.bins)?;
            }
        }
        if self.classes_per_batch == Some(0) {
            return Err(Error::InvalidConfig("classes_per_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            grid: BinGrid::new(self.bins)?,
            variant: match self.loss {
                LossKind::TieAware => Variant::TieAware,
                _ => Variant::Quantized,
            },
            balancing: if self.balanced {
                Balancing::ClassBalanced
            } else {
                Balancing::Uniform
            },
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linearly decaying learning rate, reaching zero at `total_iters`.
pub fn lr_schedule(t: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - t as f64 / cfg.total_iters as f64).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Vec<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction; weight decay enters as `λθ` added
/// to the gradient.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let shapes_match = |a: &[Vec<f64>]| a.len() == params.len() && a.iter().zip(params.iter()).all(|(x, p)| x.len() == p.len());
    if !shapes_match(grads) || !shapes_match(&state.m) || !shapes_match(&state.v) {
        return Err(Error::ShapeMismatch("optimizer state, gradients and parameters disagree".into()));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (t, p) in params.iter_mut().enumerate() {
        for (k, theta) in p.iter_mut().enumerate() {
            let g = grads[t][k] + weight_decay * *theta;
            let m = &mut state.m[t][k];
            let v = &mut state.v[t][k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Generator settings for [`SyntheticDataset`].
///
/// Each class has a centroid in a low-dimensional signal subspace; samples
/// add isotropic noise there and stronger nuisance noise in the remaining
/// dimensions, then pass through a fixed random rotation and `tanh`. A
/// linear map can suppress the nuisance directions, a random one cannot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub signal_dim: usize,
    /// Training samples per class (length = `classes`).
    pub train_per_class: Vec<usize>,
    pub queries_per_class: usize,
    pub db_per_class: usize,
    pub centroid_scale: f64,
    pub signal_noise: f64,
    pub nuisance_noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// 32 classes of 40 samples in 64 dimensions: 24 train, 4 query and
    /// 12 database samples per class.
    pub fn fixture(seed: u64) -> Self {
        Self {
            classes: 32,
            feature_dim: 64,
            signal_dim: 16,
            train_per_class: vec![24; 32],
            queries_per_class: 4,
            db_per_class: 12,
            centroid_scale: 0.5,
            signal_noise: 0.2,
            nuisance_noise: 0.6,
            seed,
        }
    }

    /// Same geometry as [`Self::fixture`] with training counts spread
    /// geometrically from 80 down to 4 samples per class.
    pub fn imbalanced_fixture(seed: u64) -> Self {
        let mut cfg = Self::fixture(seed);
        let k = cfg.classes;
        cfg.train_per_class = (0..k)
            .map(|c| (80.0 * (4.0f64 / 80.0).powf(c as f64 / (k - 1) as f64)).round() as usize)
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("classes and feature_dim must be positive".into()));
        }
        if self.signal_dim == 0 || self.signal_dim > self.feature_dim {
            return Err(Error::InvalidConfig("signal_dim must be in 1..=feature_dim".into()));
        }
        if self.train_per_class.len() != self.classes {
            return Err(Error::InvalidConfig("train_per_class needs one entry per class".into()));
        }
        if self.train_per_class.iter().any(|&n| n < 2) {
            return Err(Error::InvalidConfig("every class needs at least 2 training samples".into()));
        }
        if self.queries_per_class == 0 || self.db_per_class == 0 {
            return Err(Error::InvalidConfig("every class needs a query and a database sample".into()));
        }
        Ok(())
    }
}

/// Features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub train: LabeledSplit,
    pub queries: LabeledSplit,
    pub db: LabeledSplit,
    /// Same-class database items are positives: the less noisy half easy,
    /// the rest hard.
    pub judgments: Vec<RelevanceJudgment>,
    by_class: Vec<Vec<usize>>,
}

fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the rotation is Haar-distributed and deterministic.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl SyntheticDataset {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = cfg.feature_dim;
        let rotation = random_rotation(&mut rng, f);
        let centroids: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|_| {
                (0..cfg.signal_dim)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); cfg.centroid_scale * z })
                    .collect()
            })
            .collect();

        let sample = |class: usize, rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
            let mut z = vec![0.0; f];
            let mut noise2 = 0.0;
            for (d, zd) in z.iter_mut().enumerate() {
                let (mean, std) = if d < cfg.signal_dim {
                    (centroids[class][d], cfg.signal_noise)
                } else {
                    (0.0, cfg.nuisance_noise)
                };
                let e = std * Distribution::<f64>::sample(&StandardNormal, rng);
                if d < cfg.signal_dim {
                    noise2 += e * e;
                }
                *zd = mean + e;
            }
            let z = nalgebra::DVector::from_vec(z);
            let x = &rotation * z;
            (x.iter().map(|v| v.tanh()).collect(), noise2)
        };

        let mut train = (Vec::new(), Vec::new(), Vec::new());
        let mut queries = (Vec::new(), Vec::new(), Vec::new());
        let mut db = (Vec::new(), Vec::new(), Vec::new());
        let mut db_noise = Vec::new();
        for c in 0..cfg.classes {
            for i in 0..cfg.train_per_class[c] {
                let (x, _) = sample(c, &mut rng);
                train.0.extend(x);
                train.1.push(c);
                train.2.push(format!("t{c}_{i}"));
            }
            for i in 0..cfg.queries_per_class {
                let (x, _) = sample(c, &mut rng);
                queries.0.extend(x);
                queries.1.push(c);
                queries.2.push(format!("q{c}_{i}"));
            }
            for i in 0..cfg.db_per_class {
                let (x, noise) = sample(c, &mut rng);
                db.0.extend(x);
                db.1.push(c);
                db.2.push(format!("d{c}_{i}"));
                db_noise.push(noise);
            }
        }

        let mut easy: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let mut hard: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for c in 0..cfg.classes {
            let mut members: Vec<usize> = (0..db.1.len()).filter(|&i| db.1[i] == c).collect();
            members.sort_by(|&a, &b| db_noise[a].total_cmp(&db_noise[b]));
            let split = members.len().div_ceil(2);
            easy.insert(c, members[..split].iter().map(|&i| db.2[i].clone()).collect());
            hard.insert(c, members[split..].iter().map(|&i| db.2[i].clone()).collect());
        }
        let judgments = queries
            .2
            .iter()
            .zip(&queries.1)
            .map(|(id, c)| {
                RelevanceJudgment::new(id.clone(), easy[c].clone(), hard[c].clone(), Vec::new())
            })
            .collect::<Result<Vec<_>>>()?;

        let split = |(x, labels, ids): (Vec<f64>, Vec<usize>, Vec<String>)| -> Result<LabeledSplit> {
            Ok(LabeledSplit {
                features: Matrix::from_vec(labels.len(), f, x)?,
                labels,
                ids,
            })
        };
        let train = split(train)?;
        let mut by_class = vec![Vec::new(); cfg.classes];
        for (i, &c) in train.labels.iter().enumerate() {
            by_class[c].push(i);
        }
        Ok(Self {
            num_classes: cfg.classes,
            train,
            queries: split(queries)?,
            db: split(db)?,
            judgments,
            by_class,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.train.features.cols()
    }

    /// Training indices of each class.
    pub fn class_members(&self) -> &[Vec<usize>] {
        &self.by_class
    }
}

/// A training batch: stacked features, their labels and training indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: BatchLabels,
    pub indices: Vec<usize>,
}

fn assemble(ds: &SyntheticDataset, indices: Vec<usize>) -> Result<Batch> {
    let f = ds.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * f);
    for &i in &indices {
        data.extend_from_slice(ds.train.features.row(i));
    }
    Ok(Batch {
        features: Matrix::from_vec(indices.len(), f, data)?,
        labels: BatchLabels::new(indices.iter().map(|&i| ds.train.labels[i]).collect()),
        indices,
    })
}

fn sample_from_classes<R: Rng + ?Sized>(
    ds: &SyntheticDataset,
    classes: &[usize],
    b: usize,
    rng: &mut R,
) -> Result<Batch> {
    if b < 2 * classes.len() {
        return Err(Error::BatchTooSmall {
            batch: b,
            classes: classes.len(),
        });
    }
    let mut chosen = vec![false; ds.train.len()];
    let mut indices = Vec::with_capacity(b);
    for &c in classes {
        let members = &ds.by_class[c];
        for k in sample(rng, members.len(), 2) {
            chosen[members[k]] = true;
            indices.push(members[k]);
        }
    }
    let rest: Vec<usize> = classes
        .iter()
        .flat_map(|&c| ds.by_class[c].iter().copied())
        .filter(|&i| !chosen[i])
        .collect();
    let extra = b - indices.len();
    if extra > rest.len() {
        return Err(Error::TooFewItems {
            needed: b,
            available: indices.len() + rest.len(),
        });
    }
    indices.extend(sample(rng, rest.len(), extra).into_iter().map(|k| rest[k]));
    indices.sort_unstable();
    assemble(ds, indices)
}

/// Every class gets two samples; the remaining slots are filled uniformly
/// from the rest of the training set.
pub fn sample_batch<R: Rng + ?Sized>(ds: &SyntheticDataset, b: usize, rng: &mut R) -> Result<Batch> {
    let classes: Vec<usize> = (0..ds.num_classes).collect();
    sample_from_classes(ds, &classes, b, rng)
}

/// Like [`sample_batch`], restricted to `n_classes` random classes.
pub fn sample_batch_restricted<R: Rng + ?Sized>(
    ds: &SyntheticDataset,
    b: usize,
    n_classes: usize,
    rng: &mut R,
) -> Result<Batch> {
    if n_classes == 0 || n_classes > ds.num_classes {
        return Err(Error::InvalidConfig(format!(
            "cannot restrict a batch to {n_classes} of {} classes",
            ds.num_classes
        )));
    }
    let mut classes: Vec<usize> = sample(rng, ds.num_classes, n_classes).into_vec();
    classes.sort_unstable();
    sample_from_classes(ds, &classes, b, rng)
}

/// Stale pool descriptors and hardest negatives for triplet mining.
#[derive(Debug, Clone)]
pub struct TripletMiner {
    pool: Vec<usize>,
    hardest: Vec<Vec<usize>>,
    updates: usize,
}

impl TripletMiner {
    /// Picks the mining pool (the whole training set when the configured
    /// size is 0 or too large).
    pub fn new<R: Rng + ?Sized>(ds: &SyntheticDataset, cfg: &TripletConfig, rng: &mut R) -> Self {
        let n = ds.train.len();
        let mut pool: Vec<usize> = if cfg.mining_pool_size == 0 || cfg.mining_pool_size >= n {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.mining_pool_size).into_vec()
        };
        pool.sort_unstable();
        Self {
            pool,
            hardest: Vec::new(),
            updates: 0,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    fn refresh<E: Embedder + Sync>(
        &mut self,
        model: &E,
        ds: &SyntheticDataset,
        cfg: &TripletConfig,
        counters: &mut Counters,
    ) -> Result<()> {
        let desc = self
            .pool
            .par_iter()
            .map(|&i| model.forward(ds.train.features.row(i)))
            .collect::<Result<Vec<_>>>()?;
        counters.record_forwards(self.pool.len());
        let labels: Vec<usize> = self.pool.iter().map(|&i| ds.train.labels[i]).collect();
        self.hardest = (0..self.pool.len())
            .into_par_iter()
            .map(|a| {
                let mut negs: Vec<(f64, usize)> = (0..labels.len())
                    .filter(|&j| labels[j] != labels[a])
                    .map(|j| (dot(&desc[a], &desc[j]), j))
                    .collect();
                negs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                negs.truncate(cfg.hardest_negatives);
                negs.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        Ok(())
    }
}

/// `max(0, m + |a-p|^2 - |a-n|^2) / 2` and its gradients `(da, dp, dn)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> (f64, [Vec<f64>; 3]) {
    let dist2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let raw = margin + dist2(a, p) - dist2(a, n);
    if raw <= 0.0 {
        let z = vec![0.0; a.len()];
        return (0.0, [z.clone(), z.clone(), z]);
    }
    let da = n.iter().zip(p).map(|(n, p)| n - p).collect();
    let dp = p.iter().zip(a).map(|(p, a)| p - a).collect();
    let dn = a.iter().zip(n).map(|(a, n)| a - n).collect();
    (raw / 2.0, [da, dp, dn])
}

/// One triplet update: refreshes the mining pool when due, draws
/// `triplets_per_update` (anchor, positive, hard negative) triplets and
/// backpropagates through all three images of each.
pub fn triplet_loss_step<E: Embedder + Sync, R: Rng + ?Sized>(
    model: &E,
    ds: &SyntheticDataset,
    cfg: &TripletConfig,
    miner: &mut TripletMiner,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<(f64, ParamGradAccumulator)> {
    cfg.validate()?;
    if miner.updates.is_multiple_of(cfg.refresh_every) || miner.hardest.len() != miner.pool.len() {
        miner.refresh(model, ds, cfg, counters)?;
    }
    miner.updates += 1;

    let label = |k: usize| ds.train.labels[miner.pool[k]];
    let mut pool_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..miner.pool.len() {
        pool_by_class.entry(label(k)).or_default().push(k);
    }
    let anchors: Vec<usize> = (0..miner.pool.len())
        .filter(|&k| pool_by_class[&label(k)].len() >= 2 && !miner.hardest[k].is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(Error::NoValidTriplet);
    }

    let mut acc = ParamGradAccumulator::for_model(model);
    let mut total = 0.0;
    for _ in 0..cfg.triplets_per_update {
        let a = *anchors.choose(rng).expect("nonempty");
        let same = &pool_by_class[&label(a)];
        let p = loop {
            let p = *same.choose(rng).expect("nonempty");
            if p != a {
                break p;
            }
        };
        let n = *miner.hardest[a].choose(rng).expect("nonempty");
        let row = |k: usize| ds.train.features.row(miner.pool[k]);
        let (da, ta) = model.forward_taped(row(a))?;
        let (dp, tp) = model.forward_taped(row(p))?;
        let (dn, tn) = model.forward_taped(row(n))?;
        counters.record_forwards(3);
        let (loss, [ga, gp, gn]) = triplet_loss(&da, &dp, &dn, cfg.margin);
        total += loss;
        model.backward(ta, &ga, &mut acc)?;
        model.backward(tp, &gp, &mut acc)?;
        model.backward(tn, &gn, &mut acc)?;
        counters.record_backwards(3);
    }
    Ok((total, acc))
}

/// Counters of `updates` triplet updates without any arithmetic.
pub fn triplet_dry_run(cfg: &TripletConfig, updates: u64, pool_size: u64) -> Counters {
    let per = cfg.triplets_per_update as u64;
    let refreshes = updates.div_ceil(cfg.refresh_every as u64);
    Counters {
        forwards: 3 * per * updates + pool_size * refreshes,
        backwards: 3 * per * updates,
        updates,
    }
}

/// Embeds the evaluation split and scores it under `protocol`.
pub fn evaluate_model<E: Embedder + Sync>(
    model: &E,
    ds: &SyntheticDataset,
    protocol: Protocol,
) -> Result<RetrievalEvaluation> {
    let (q, d) = embed_eval(model, ds)?;
    evaluate_retrieval(&q, &ds.queries.ids, &d, &ds.db.ids, &ds.judgments, protocol)
}

/// Tape-free descriptors of the query and database splits.
pub fn embed_eval<E: Embedder + Sync>(
    model: &E,
    ds: &SyntheticDataset,
) -> Result<(DescriptorMatrix, DescriptorMatrix)> {
    Ok((embed_all(model, &ds.queries.features)?, embed_all(model, &ds.db.features)?))
}

pub fn embed_all<E: Embedder + Sync>(model: &E, features: &Matrix) -> Result<DescriptorMatrix> {
    let rows = (0..features.rows())
        .into_par_iter()
        .map(|i| model.forward(features.row(i)))
        .collect::<Result<Vec<_>>>()?;
    DescriptorMatrix::from_rows(&rows)
}

/// Mean over classes of the mean AP of that class's queries.
pub fn per_class_map(eval: &RetrievalEvaluation, ds: &SyntheticDataset) -> f64 {
    let class_of: BTreeMap<&str, usize> = ds
        .queries
        .ids
        .iter()
        .map(String::as_str)
        .zip(ds.queries.labels.iter().copied())
        .collect();
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for q in &eval.per_query {
        let e = sums.entry(class_of[q.query_id.as_str()]).or_default();
        e.0 += q.ap;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).sum::<f64>() / sums.len() as f64
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_map: Option<f64>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial_map: f64,
    pub final_map: f64,
    pub history: Vec<HistoryRecord>,
    pub counters: Counters,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    /// Mean loss over the `window` records ending at iteration `iter`.
    pub fn trailing_loss(&self, iter: usize, window: usize) -> Option<f64> {
        let end = self.history.iter().position(|r| r.iter == iter)? + 1;
        let start = end.checked_sub(window)?;
        let slice = &self.history[start..end];
        Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
    }
}

pub fn write_history<W: Write>(mut w: W, history: &[HistoryRecord]) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains `model` in place and evaluates on the held-out split (medium
/// protocol) before training, every `eval_every` iterations and at the end.
pub fn train<E: Embedder + Sync>(
    model: &mut E,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.input_dim() != ds.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: ds.feature_dim(),
        });
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let loss_cfg = cfg.loss_config()?;
    let mut adam = AdamState::new(model.params());
    let mut counters = Counters::default();
    let mut miner = match cfg.loss {
        LossKind::Triplet => Some(TripletMiner::new(ds, &cfg.triplet, &mut rng)),
        _ => None,
    };
    let initial_map = evaluate_model(model, ds, Protocol::Medium)?.map;
    log::info!("initial mAP(medium)={initial_map:.6}");
    let mut final_map = initial_map;
    let mut history = Vec::with_capacity(cfg.total_iters);

    for t in 0..cfg.total_iters {
        let (loss, grads) = match miner.as_mut() {
            Some(miner) => triplet_loss_step(&*model, ds, &cfg.triplet, miner, &mut rng, &mut counters)?,
            None => {
                let batch = match cfg.classes_per_batch {
                    Some(n) => sample_batch_restricted(ds, cfg.batch_size, n, &mut rng)?,
                    None => sample_batch(ds, cfg.batch_size, &mut rng)?,
                };
                let step = multistage_step(&*model, &batch.features, &batch.labels, &loss_cfg, &mut counters)?;
                (step.loss.loss, step.grads)
            }
        };
        let lr = lr_schedule(t, cfg);
        adam_step(model.params_mut(), grads.grads(), &mut adam, lr, cfg.weight_decay)?;
        counters.record_update();

        let iter = t + 1;
        let due = iter == cfg.total_iters || (cfg.eval_every > 0 && iter % cfg.eval_every == 0);
        let eval_map = if due {
            final_map = evaluate_model(model, ds, Protocol::Medium)?.map;
            log::info!("iter {iter}: loss={loss:.6} mAP(medium)={final_map:.6}");
            Some(final_map)
        } else {
            None
        };
        history.push(HistoryRecord {
            iter,
            lr,
            loss,
            eval_map,
            counters,
        });
    }
    Ok(TrainOutcome {
        initial_map,
        final_map,
        history,
        counters,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
