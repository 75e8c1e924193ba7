//! Category, domain, confusion and soft-label losses, and their weighted sum.
//!
//! Every loss is a mean over rows of a cross-entropy
//! `-sum_k t[i,k] * log softmax(z[i] / T)[k]` against a fixed target
//! distribution `t`; they differ only in how `t` is built:
//!
//! | loss                  | target row                        | T      |
//! |-----------------------|-----------------------------------|--------|
//! | classification        | one-hot category                  | 1      |
//! | domain classifier     | one-hot domain                    | 1      |
//! | domain confusion      | uniform over the two domains      | 1      |
//! | soft label            | soft-label table row of the label | config |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Tensor, Var};
use crate::data::{feature_matrix, Domain, Example};
use crate::error::{Error, Result};
use crate::network::ModelParams;

fn cross_entropy(g: &mut Graph, logits: Var, targets: Tensor, temperature: f64) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: shape,
            right: targets.shape().to_vec(),
        });
    }
    let n = shape[0];
    let logp = g.log_softmax_rows(logits, temperature)?;
    let t = g.constant(targets);
    let weighted = g.mul(logp, t)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

fn one_hot(indices: impl ExactSizeIterator<Item = usize>, width: usize) -> Result<Tensor> {
    let n = indices.len();
    let mut data = vec![0.0; n * width];
    for (i, c) in indices.enumerate() {
        data[i * width + c] = 1.0;
    }
    Tensor::new(vec![n, width], data)
}

fn logits_shape(g: &Graph, logits: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = g.value(logits).shape();
    if s.len() != 2 {
        return Err(Error::Dimension {
            op,
            left: s.to_vec(),
            right: vec![2],
        });
    }
    Ok((s[0], s[1]))
}

/// Mean softmax cross-entropy against hard category labels.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = logits_shape(g, logits, "classification_loss")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "classification_loss",
            left: vec![n, k],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::param(format!("label {bad} out of range [0, {k})")));
    }
    let targets = one_hot(labels.iter().copied(), k)?;
    cross_entropy(g, logits, targets, 1.0)
}

/// Mean cross-entropy of the domain head against the true domain of each row.
pub fn domain_classifier_loss(
    g: &mut Graph,
    domain_logits: Var,
    domains: &[Domain],
) -> Result<Var> {
    let (n, k) = logits_shape(g, domain_logits, "domain_classifier_loss")?;
    if k != 2 || domains.len() != n {
        return Err(Error::Dimension {
            op: "domain_classifier_loss",
            left: vec![n, k],
            right: vec![domains.len(), 2],
        });
    }
    let targets = one_hot(domains.iter().map(|d| d.index()), 2)?;
    cross_entropy(g, domain_logits, targets, 1.0)
}

/// Mean cross-entropy between the domain softmax and the uniform
/// distribution: `-(1/2) * sum_d log q_d`, minimal (= ln 2) iff `q` is uniform.
pub fn domain_confusion_loss(g: &mut Graph, domain_logits: Var) -> Result<Var> {
    let (n, k) = logits_shape(g, domain_logits, "domain_confusion_loss")?;
    if k != 2 {
        return Err(Error::Dimension {
            op: "domain_confusion_loss",
            left: vec![n, k],
            right: vec![n, 2],
        });
    }
    let targets = Tensor::new(vec![n, 2], vec![0.5; n * 2])?;
    cross_entropy(g, domain_logits, targets, 1.0)
}

/// Per-category average of temperature-softened source predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct SoftLabelTable {
    rows: Vec<Vec<f64>>,
    temperature: f64,
    counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    num_categories: usize,
    temperature: f64,
    counts: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RawTable> for SoftLabelTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        if raw.rows.len() != raw.num_categories {
            return Err(Error::param(format!(
                "{} rows for {} categories",
                raw.rows.len(),
                raw.num_categories
            )));
        }
        SoftLabelTable::new(raw.rows, raw.temperature, raw.counts)
    }
}

impl From<SoftLabelTable> for RawTable {
    fn from(t: SoftLabelTable) -> Self {
        RawTable {
            num_categories: t.rows.len(),
            temperature: t.temperature,
            counts: t.counts,
            rows: t.rows,
        }
    }
}

impl SoftLabelTable {
    pub fn new(rows: Vec<Vec<f64>>, temperature: f64, counts: Vec<usize>) -> Result<Self> {
        let k = rows.len();
        if k < 2 || counts.len() != k {
            return Err(Error::param(format!(
                "soft-label table needs K >= 2 rows and K counts, got {k} rows and {} counts",
                counts.len()
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!("bad temperature {temperature}")));
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            return Err(Error::param(format!(
                "no source examples for categories {empty:?}"
            )));
        }
        for (c, row) in rows.iter().enumerate() {
            if row.len() != k || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::param(format!(
                    "row {c} is not a distribution over {k} categories"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::param(format!("row {c} sums to {s}")));
            }
        }
        Ok(SoftLabelTable {
            rows,
            temperature,
            counts,
        })
    }

    /// Averages probability vectors per category.
    pub fn from_outputs<'a, I>(outputs: I, num_categories: usize, temperature: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let mut sums = vec![vec![0.0; num_categories]; num_categories];
        let mut counts = vec![0usize; num_categories];
        for (label, probs) in outputs {
            if label >= num_categories || probs.len() != num_categories {
                return Err(Error::param(format!(
                    "output for label {label} does not fit {num_categories} categories"
                )));
            }
            counts[label] += 1;
            sums[label].iter_mut().zip(probs).for_each(|(s, p)| *s += p);
        }
        let rows = sums
            .into_iter()
            .zip(&counts)
            .map(|(row, &n)| row.into_iter().map(|s| s / n.max(1) as f64).collect())
            .collect();
        Self::new(rows, temperature, counts)
    }

    pub fn num_categories(&self) -> usize {
        self.rows.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, category: usize) -> Option<&[f64]> {
        self.rows.get(category).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("serializing soft labels", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("parsing soft labels", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Soft labels from a source-trained model: row `k` is the mean of
/// `softmax(logits / temperature)` over the source examples labeled `k`.
pub fn build_soft_label_table(
    source_model: &ModelParams,
    source: &[Example],
    temperature: f64,
) -> Result<SoftLabelTable> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!("bad temperature {temperature}")));
    }
    let k = source_model.num_categories();
    let mut present = vec![false; k];
    for e in source {
        match e.label() {
            Some(l) if l < k => present[l] = true,
            _ => return Err(Error::param("source examples must carry in-range labels")),
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&c| !present[c]).collect();
    if !missing.is_empty() {
        return Err(Error::param(format!(
            "no source examples for categories {missing:?}"
        )));
    }
    let logits = source_model.class_logits(&feature_matrix(source)?)?;
    let probs: Vec<Vec<f64>> = (0..logits.rows())
        .map(|i| softmax(logits.row(i), temperature))
        .collect();
    SoftLabelTable::from_outputs(
        source
            .iter()
            .zip(&probs)
            .map(|(e, p)| (e.label().expect("checked"), p.as_slice())),
        k,
        temperature,
    )
}

/// Mean cross-entropy between `softmax(logits / temperature)` and the
/// table row of each label. The table is a constant.
pub fn soft_label_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    table: &SoftLabelTable,
    temperature: f64,
) -> Result<Var> {
    let (n, k) = logits_shape(g, logits, "soft_label_loss")?;
    if labels.len() != n || k != table.num_categories() {
        return Err(Error::Dimension {
            op: "soft_label_loss",
            left: vec![n, k],
            right: vec![labels.len(), table.num_categories()],
        });
    }
    let mut data = Vec::with_capacity(n * k);
    for &l in labels {
        let row = table
            .row(l)
            .ok_or_else(|| Error::param(format!("no soft label for category {l}")))?;
        data.extend_from_slice(row);
    }
    cross_entropy(g, logits, Tensor::new(vec![n, k], data)?, temperature)
}

/// Confusion weight `lambda` and soft-label weight `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.01,
            nu: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("nu", self.nu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Network outputs for one mixed batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs<'a> {
    pub class_logits: Var,
    pub domain_logits: Var,
    /// Category of each labeled row, `None` for unlabeled target rows.
    pub labels: &'a [Option<usize>],
    pub domains: &'a [Domain],
}

/// Graph nodes of the joint objective and its terms.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub classification: Var,
    pub confusion: Var,
    /// Absent when the batch holds no labeled target rows.
    pub soft: Option<Var>,
}

/// `L_C + lambda * L_conf + nu * L_soft`.
///
/// `L_C` covers every labeled row (source and target), `L_conf` every row,
/// `L_soft` the labeled target rows. Terms with zero weight are computed
/// for reporting but left out of `total`.
pub fn joint_loss(
    g: &mut Graph,
    batch: BatchOutputs<'_>,
    table: Option<&SoftLabelTable>,
    weights: LossWeights,
    temperature: f64,
) -> Result<JointLoss> {
    weights.validate()?;
    let n = g.value(batch.class_logits).rows();
    if batch.labels.len() != n || batch.domains.len() != n {
        return Err(Error::Dimension {
            op: "joint_loss",
            left: vec![n],
            right: vec![batch.labels.len(), batch.domains.len()],
        });
    }
    let (rows, labels): (Vec<usize>, Vec<usize>) = batch
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::param("batch has no labeled rows"));
    }
    let labeled_logits = if rows.len() == n {
        batch.class_logits
    } else {
        g.select_rows(batch.class_logits, &rows)?
    };
    let classification = classification_loss(g, labeled_logits, &labels)?;
    let confusion = domain_confusion_loss(g, batch.domain_logits)?;

    let (trows, tlabels): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .zip(&labels)
        .filter(|(&i, _)| batch.domains[i] == Domain::Target)
        .map(|(&i, &l)| (i, l))
        .unzip();
    let soft = match (trows.is_empty(), table) {
        (true, _) => None,
        (false, Some(table)) => {
            let tl = g.select_rows(batch.class_logits, &trows)?;
            Some(soft_label_loss(g, tl, &tlabels, table, temperature)?)
        }
        (false, None) if weights.nu != 0.0 => {
            return Err(Error::param(
                "soft-label weight is nonzero but no table was given",
            ))
        }
        (false, None) => None,
    };

    let mut total = classification;
    if weights.lambda != 0.0 {
        let c = g.scale(confusion, weights.lambda);
        total = g.add(total, c)?;
    }
    if let (Some(s), true) = (soft, weights.nu != 0.0) {
        let s = g.scale(s, weights.nu);
        total = g.add(total, s)?;
    }
    Ok(JointLoss {
        total,
        classification,
        confusion,
        soft,
    })
}

/// Entropy of a distribution, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}
