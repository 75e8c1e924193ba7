//! Source-only pretraining, plain fine-tuning, and joint adaptation with
//! alternating domain-head / representation updates.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{DatasetBundle, Domain, Example};
use crate::error::{Error, Result};
use crate::eval::domain_invariance_probe;
use crate::losses::{
    classification_loss, domain_classifier_loss, joint_loss, BatchOutputs, LossWeights,
    SoftLabelTable,
};
use crate::network::{
    forward_classifier, forward_domain, forward_repr, ModelParams, ParamGroupMask, Sgd,
};

fn default_lr() -> f64 {
    0.001
}
fn default_lambda() -> f64 {
    0.01
}
fn default_nu() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    2.0
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_one() -> usize {
    1
}
fn default_probe_n() -> usize {
    80
}

/// Hyperparameters of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_source: usize,
    #[serde(default = "default_batch")]
    pub batch_target: usize,
    /// Rows of each target batch drawn from the labeled target pool. By
    /// default the target rows are split in proportion to the pool sizes,
    /// with at least one labeled row when any exist.
    #[serde(default)]
    pub batch_target_labeled: Option<usize>,
    #[serde(default = "default_one")]
    pub domain_steps_per_joint_step: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Run the domain probe every this many epochs.
    #[serde(default)]
    pub probe_every: Option<usize>,
    #[serde(default = "default_probe_n")]
    pub probe_train_per_domain: usize,
    /// Record wall-clock time in the log. Off by default so that logs are
    /// reproducible byte for byte.
    #[serde(default)]
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            nu: self.nu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_source == 0 {
            return Err(Error::param("batch_source must be >= 1"));
        }
        if self.domain_steps_per_joint_step == 0 {
            return Err(Error::param("domain_steps_per_joint_step must be >= 1"));
        }
        if let Some(l) = self.batch_target_labeled {
            if l > self.batch_target {
                return Err(Error::param(format!(
                    "batch_target_labeled {l} exceeds batch_target {}",
                    self.batch_target
                )));
            }
        }
        if self.probe_every == Some(0) {
            return Err(Error::param("probe_every must be >= 1"));
        }
        Ok(())
    }

    fn optimizer(&self) -> Sgd {
        Sgd::with_momentum(self.learning_rate, self.momentum, self.weight_decay)
    }
}

/// Per-epoch means of the batch losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub phase: String,
    pub epoch: usize,
    pub classification: f64,
    pub confusion: Option<f64>,
    pub soft: Option<f64>,
    pub domain: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub elapsed_ms: Option<u64>,
}

/// Serializes a log as JSON lines.
pub fn log_to_jsonl(log: &[TrainLogEntry]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::json("serializing log", e))?);
        out.push('\n');
    }
    Ok(out)
}

/// Final parameters and per-epoch log of a training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogEntry>,
}

/// Rows drawn from each pool per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSizes {
    pub source: usize,
    pub target_labeled: usize,
    pub target_unlabeled: usize,
}

impl BatchSizes {
    /// Splits `batch_target` between the labeled and unlabeled target pools,
    /// giving every row to the other pool when one is empty.
    pub fn for_bundle(config: &TrainConfig, bundle: &DatasetBundle) -> Self {
        let (n_lab, n_unl) = (
            bundle.target_labeled().len(),
            bundle.target_unlabeled().len(),
        );
        let (has_lab, has_unl) = (n_lab > 0, n_unl > 0);
        let proportional = || {
            let share = config.batch_target as f64 * n_lab as f64 / (n_lab + n_unl).max(1) as f64;
            (share.round() as usize).max(usize::from(has_lab))
        };
        let want_lab = config
            .batch_target_labeled
            .unwrap_or_else(proportional)
            .min(config.batch_target);
        let (lab, unl) = match (has_lab, has_unl) {
            (true, true) => (want_lab, config.batch_target - want_lab),
            (true, false) => (config.batch_target, 0),
            (false, true) => (0, config.batch_target),
            (false, false) => (0, 0),
        };
        BatchSizes {
            source: config.batch_source,
            target_labeled: lab,
            target_unlabeled: unl,
        }
    }

    pub fn total(&self) -> usize {
        self.source + self.target_labeled + self.target_unlabeled
    }
}

/// One mixed minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<Domain>,
    /// True for rows drawn from the labeled target pool.
    pub target_labeled: Vec<bool>,
}

impl Batch {
    /// Rows with a label, and their labels.
    pub fn labeled_rows(&self) -> (Vec<usize>, Vec<usize>) {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l)))
            .unzip()
    }
}

/// Draws minibatches from the source, labeled target and unlabeled target
/// pools. Each pool is visited in a shuffled order and reshuffled whenever
/// it is exhausted.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    pools: [&'a [Example]; 3],
    orders: [Vec<usize>; 3],
    cursors: [usize; 3],
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(bundle: &'a DatasetBundle, seed: u64) -> Self {
        Self::from_pools(
            [
                bundle.source_labeled(),
                bundle.target_labeled(),
                bundle.target_unlabeled(),
            ],
            seed,
        )
    }

    pub fn from_pools(pools: [&'a [Example]; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = pools.map(|p| {
            let mut o: Vec<usize> = (0..p.len()).collect();
            o.shuffle(&mut rng);
            o
        });
        BatchSampler {
            pools,
            orders,
            cursors: [0; 3],
            rng,
        }
    }

    fn draw(&mut self, pool: usize, count: usize, out: &mut Vec<&'a Example>) -> Result<()> {
        if count > 0 && self.pools[pool].is_empty() {
            let name = ["source", "target labeled", "target unlabeled"][pool];
            return Err(Error::param(format!(
                "{count} rows requested from empty {name} pool"
            )));
        }
        for _ in 0..count {
            if self.cursors[pool] == self.orders[pool].len() {
                self.orders[pool].shuffle(&mut self.rng);
                self.cursors[pool] = 0;
            }
            out.push(&self.pools[pool][self.orders[pool][self.cursors[pool]]]);
            self.cursors[pool] += 1;
        }
        Ok(())
    }

    /// Next batch: source rows first, then labeled target, then unlabeled target.
    pub fn sample(&mut self, sizes: BatchSizes) -> Result<Batch> {
        if sizes.total() == 0 {
            return Err(Error::param("empty batch requested"));
        }
        let mut rows = Vec::with_capacity(sizes.total());
        self.draw(0, sizes.source, &mut rows)?;
        self.draw(1, sizes.target_labeled, &mut rows)?;
        self.draw(2, sizes.target_unlabeled, &mut rows)?;
        let feats: Vec<&[f64]> = rows.iter().map(|e| e.features()).collect();
        let mut target_labeled = vec![false; rows.len()];
        target_labeled[sizes.source..sizes.source + sizes.target_labeled].fill(true);
        Ok(Batch {
            features: Tensor::from_rows(&feats)?,
            labels: rows.iter().map(|e| e.label()).collect(),
            domains: rows.iter().map(|e| e.domain()).collect(),
            target_labeled,
        })
    }
}

/// Convenience wrapper: one batch from a fresh sampler seeded with `seed`.
pub fn sample_batch(bundle: &DatasetBundle, sizes: BatchSizes, seed: u64) -> Result<Batch> {
    BatchSampler::new(bundle, seed).sample(sizes)
}

fn iterations_per_epoch(n_source: usize, batch_source: usize) -> usize {
    n_source.div_ceil(batch_source).max(1)
}

/// Minimizes the category loss on source data alone.
pub fn train_source_only(
    config: &TrainConfig,
    init: ModelParams,
    source: &[Example],
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::param("no source examples"));
    }
    if source
        .iter()
        .any(|e| e.domain() != Domain::Source || e.label().is_none())
    {
        return Err(Error::param(
            "source-only training needs labeled source examples",
        ));
    }
    let mut params = init;
    let mut opt = config.optimizer();
    let mut sampler = BatchSampler::from_pools([source, &[], &[]], config.seed);
    let sizes = BatchSizes {
        source: config.batch_source,
        target_labeled: 0,
        target_unlabeled: 0,
    };
    let iters = iterations_per_epoch(source.len(), config.batch_source);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..iters {
            let batch = sampler.sample(sizes)?;
            total += classification_step(&mut params, &mut opt, &batch)?;
        }
        log.push(TrainLogEntry {
            phase: "source".into(),
            epoch,
            classification: total / iters as f64,
            confusion: None,
            soft: None,
            domain: None,
            probe_accuracy: None,
            elapsed_ms: config
                .log_timing
                .then(|| start.elapsed().as_millis() as u64),
        });
    }
    Ok(TrainOutcome { params, log })
}

/// One SGD step on the category loss of the labeled rows; returns the loss.
fn classification_step(params: &mut ModelParams, opt: &mut Sgd, batch: &Batch) -> Result<f64> {
    let (rows, labels) = batch.labeled_rows();
    if rows.is_empty() {
        return Err(Error::param("batch has no labeled rows"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, ParamGroupMask::REPR_AND_CLASSIFIER);
    let x = g.constant(batch.features.clone());
    let r = forward_repr(&mut g, &bound, x)?;
    let logits = forward_classifier(&mut g, &bound, r)?;
    let logits = if rows.len() == batch.labels.len() {
        logits
    } else {
        g.select_rows(logits, &rows)?
    };
    let loss = classification_loss(&mut g, logits, &labels)?;
    g.backward(loss)?;
    params.accumulate_grads(&g, &bound)?;
    opt.step(params, ParamGroupMask::REPR_AND_CLASSIFIER)?;
    Ok(g.value(loss).item().expect("scalar"))
}

/// Hard-label fine-tuning on every labeled row of the adaptation batches.
/// Uses the same batch stream as [`train_adapt`] for the same config.
pub fn train_finetune(
    config: &TrainConfig,
    bundle: &DatasetBundle,
    init: ModelParams,
) -> Result<TrainOutcome> {
    let mut session = FinetuneSession::new(config, bundle, init)?;
    let iters = iterations_per_epoch(bundle.source_labeled().len(), config.batch_source);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..iters {
            total += session.step()?;
        }
        log.push(TrainLogEntry {
            phase: "finetune".into(),
            epoch,
            classification: total / iters as f64,
            confusion: None,
            soft: None,
            domain: None,
            probe_accuracy: None,
            elapsed_ms: config
                .log_timing
                .then(|| start.elapsed().as_millis() as u64),
        });
    }
    Ok(TrainOutcome {
        params: session.params,
        log,
    })
}

/// Step-level driver for [`train_finetune`].
pub struct FinetuneSession<'a> {
    params: ModelParams,
    opt: Sgd,
    sampler: BatchSampler<'a>,
    sizes: BatchSizes,
}

impl<'a> FinetuneSession<'a> {
    pub fn new(config: &TrainConfig, bundle: &'a DatasetBundle, init: ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(FinetuneSession {
            params: init,
            opt: config.optimizer(),
            sampler: BatchSampler::new(bundle, config.seed),
            sizes: BatchSizes::for_bundle(config, bundle),
        })
    }

    /// Returns the minimized category loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.sampler.sample(self.sizes)?;
        classification_step(&mut self.params, &mut self.opt, &batch)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

/// Losses observed in one adaptation iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// The joint objective minimized by the representation/classifier step.
    pub total: f64,
    pub classification: f64,
    pub confusion: f64,
    pub soft: Option<f64>,
    /// Domain-classifier loss, averaged over this iteration's domain steps.
    pub domain: f64,
}

/// Step-level driver for [`train_adapt`].
pub struct AdaptSession<'a> {
    config: TrainConfig,
    table: Option<&'a SoftLabelTable>,
    params: ModelParams,
    opt: Sgd,
    sampler: BatchSampler<'a>,
    sizes: BatchSizes,
}

impl<'a> AdaptSession<'a> {
    pub fn new(
        config: &TrainConfig,
        bundle: &'a DatasetBundle,
        init: ModelParams,
        table: Option<&'a SoftLabelTable>,
    ) -> Result<Self> {
        config.validate()?;
        let k = bundle.num_categories();
        if init.num_categories() != k {
            return Err(Error::param(format!(
                "model has {} categories, data has {k}",
                init.num_categories()
            )));
        }
        if let Some(t) = table {
            if t.num_categories() != k {
                return Err(Error::param(format!(
                    "soft-label table has {} categories, data has {k}",
                    t.num_categories()
                )));
            }
        } else if config.nu != 0.0 && !bundle.target_labeled().is_empty() {
            return Err(Error::param("nu > 0 needs a soft-label table"));
        }
        if init.input_width() != bundle.feature_width() {
            return Err(Error::param(format!(
                "model input width {} differs from feature width {}",
                init.input_width(),
                bundle.feature_width()
            )));
        }
        Ok(AdaptSession {
            config: config.clone(),
            table,
            params: init,
            opt: config.optimizer(),
            sampler: BatchSampler::new(bundle, config.seed),
            sizes: BatchSizes::for_bundle(config, bundle),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Samples a batch, runs the domain-head steps, then the joint step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.sampler.sample(self.sizes)?;
        let mut domain = 0.0;
        for _ in 0..self.config.domain_steps_per_joint_step {
            domain += self.domain_step(&batch)?;
        }
        domain /= self.config.domain_steps_per_joint_step as f64;
        let mut rec = self.joint_step(&batch)?;
        rec.domain = domain;
        Ok(rec)
    }

    /// Updates only the domain head on the domain-classifier loss, with the
    /// representation held fixed.
    pub fn domain_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, ParamGroupMask::DOMAIN_HEAD);
        let x = g.constant(batch.features.clone());
        let r = forward_repr(&mut g, &bound, x)?;
        let dl = forward_domain(&mut g, &bound, r)?;
        let loss = domain_classifier_loss(&mut g, dl, &batch.domains)?;
        g.backward(loss)?;
        self.params.accumulate_grads(&g, &bound)?;
        self.opt
            .step(&mut self.params, ParamGroupMask::DOMAIN_HEAD)?;
        Ok(g.value(loss).item().expect("scalar"))
    }

    /// Updates the trunk and category head on the joint objective with the
    /// domain head held fixed.
    pub fn joint_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let mut g = Graph::new();
        let bound = self
            .params
            .bind(&mut g, ParamGroupMask::REPR_AND_CLASSIFIER);
        let x = g.constant(batch.features.clone());
        let r = forward_repr(&mut g, &bound, x)?;
        let cl = forward_classifier(&mut g, &bound, r)?;
        let dl = forward_domain(&mut g, &bound, r)?;
        let out = BatchOutputs {
            class_logits: cl,
            domain_logits: dl,
            labels: &batch.labels,
            domains: &batch.domains,
        };
        let j = joint_loss(
            &mut g,
            out,
            self.table,
            self.config.weights(),
            self.config.temperature,
        )?;
        g.backward(j.total)?;
        self.params.accumulate_grads(&g, &bound)?;
        self.opt
            .step(&mut self.params, ParamGroupMask::REPR_AND_CLASSIFIER)?;
        let v = |var| g.value(var).item().expect("scalar");
        Ok(StepRecord {
            total: v(j.total),
            classification: v(j.classification),
            confusion: v(j.confusion),
            soft: j.soft.map(v),
            domain: f64::NAN,
        })
    }

    /// Draws the next batch without training on it.
    pub fn next_batch(&mut self) -> Result<Batch> {
        self.sampler.sample(self.sizes)
    }
}

/// Losses of `params` on one batch, computed without touching the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLosses {
    pub total: f64,
    pub classification: f64,
    pub confusion: f64,
    pub soft: Option<f64>,
    pub domain: f64,
}

pub fn batch_losses(
    params: &ModelParams,
    batch: &Batch,
    table: Option<&SoftLabelTable>,
    weights: LossWeights,
    temperature: f64,
) -> Result<BatchLosses> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, ParamGroupMask::NONE);
    let x = g.constant(batch.features.clone());
    let r = forward_repr(&mut g, &bound, x)?;
    let cl = forward_classifier(&mut g, &bound, r)?;
    let dl = forward_domain(&mut g, &bound, r)?;
    let domain = domain_classifier_loss(&mut g, dl, &batch.domains)?;
    let out = BatchOutputs {
        class_logits: cl,
        domain_logits: dl,
        labels: &batch.labels,
        domains: &batch.domains,
    };
    let j = joint_loss(&mut g, out, table, weights, temperature)?;
    let v = |var| g.value(var).item().expect("scalar");
    Ok(BatchLosses {
        total: v(j.total),
        classification: v(j.classification),
        confusion: v(j.confusion),
        soft: j.soft.map(v),
        domain: v(domain),
    })
}

/// Joint adaptation from `init`: per iteration, domain-head steps on the
/// domain-classifier loss, then one step of the trunk and category head on
/// `L_C + lambda * L_conf + nu * L_soft`.
pub fn train_adapt(
    config: &TrainConfig,
    bundle: &DatasetBundle,
    init: ModelParams,
    table: Option<&SoftLabelTable>,
) -> Result<TrainOutcome> {
    let mut session = AdaptSession::new(config, bundle, init, table)?;
    let iters = iterations_per_epoch(bundle.source_labeled().len(), config.batch_source);
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    let target: Vec<Example> = bundle.target_examples().cloned().collect();
    for epoch in 0..config.epochs {
        let (mut c, mut conf, mut d) = (0.0, 0.0, 0.0);
        let (mut soft, mut soft_n) = (0.0, 0usize);
        for _ in 0..iters {
            let rec = session.step()?;
            c += rec.classification;
            conf += rec.confusion;
            d += rec.domain;
            if let Some(s) = rec.soft {
                soft += s;
                soft_n += 1;
            }
        }
        let n = iters as f64;
        let probe_accuracy = match config.probe_every {
            Some(every) if (epoch + 1) % every == 0 => {
                let m = config.probe_train_per_domain;
                if bundle.source_labeled().len() > m && target.len() > m {
                    Some(domain_invariance_probe(
                        session.params(),
                        bundle.source_labeled(),
                        &target,
                        m,
                        config.seed,
                    )?)
                } else {
                    None
                }
            }
            _ => None,
        };
        log.push(TrainLogEntry {
            phase: "adapt".into(),
            epoch,
            classification: c / n,
            confusion: Some(conf / n),
            soft: (soft_n > 0).then(|| soft / soft_n as f64),
            domain: Some(d / n),
            probe_accuracy,
            elapsed_ms: config
                .log_timing
                .then(|| start.elapsed().as_millis() as u64),
        });
    }
    Ok(TrainOutcome {
        params: session.into_params(),
        log,
    })
}
