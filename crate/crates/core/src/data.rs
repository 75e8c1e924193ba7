//! Labeled/unlabeled example sets, the synthetic domain-shift generator,
//! the supervised and semi-supervised split protocols, and CSV ingestion.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Column index of the domain head: 0 = source, 1 = target.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One feature vector with its (possibly withheld) category.
///
/// Unlabeled target examples may still carry their true category for
/// evaluation; it is never exposed through [`Example::label`] and is only
/// reachable through [`crate::eval::ground_truth`].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    features: Vec<f64>,
    label: Option<usize>,
    domain: Domain,
    hidden: Option<usize>,
}

impl Example {
    pub fn labeled(features: Vec<f64>, label: usize, domain: Domain) -> Self {
        Example {
            features,
            label: Some(label),
            domain,
            hidden: None,
        }
    }

    /// Unlabeled target example, optionally with held-back ground truth.
    pub fn unlabeled(features: Vec<f64>, hidden_truth: Option<usize>) -> Self {
        Example {
            features,
            label: None,
            domain: Domain::Target,
            hidden: hidden_truth,
        }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Training label; `None` for unlabeled examples.
    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub(crate) fn truth(&self) -> Option<usize> {
        self.label.or(self.hidden)
    }

    fn hide_label(mut self) -> Self {
        self.hidden = self.truth();
        self.label = None;
        self
    }

    fn reveal_label(mut self) -> Self {
        self.label = self.truth();
        self.hidden = None;
        self
    }
}

/// Source labeled, target labeled and target unlabeled sets of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    source_labeled: Vec<Example>,
    target_labeled: Vec<Example>,
    target_unlabeled: Vec<Example>,
    num_categories: usize,
    feature_width: usize,
    labeled_categories: BTreeSet<usize>,
    held_out: Option<BTreeSet<usize>>,
}

impl DatasetBundle {
    pub fn new(
        source_labeled: Vec<Example>,
        target_labeled: Vec<Example>,
        target_unlabeled: Vec<Example>,
        num_categories: usize,
        labeled_categories: BTreeSet<usize>,
    ) -> Result<Self> {
        let feature_width = source_labeled
            .iter()
            .chain(&target_labeled)
            .chain(&target_unlabeled)
            .map(|e| e.features.len())
            .next()
            .ok_or_else(|| Error::param("dataset bundle has no examples"))?;
        let b = DatasetBundle {
            source_labeled,
            target_labeled,
            target_unlabeled,
            num_categories,
            feature_width,
            labeled_categories,
            held_out: None,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(Error::param(format!(
                "need at least 2 categories, got {}",
                self.num_categories
            )));
        }
        if self.feature_width == 0 {
            return Err(Error::param("feature width must be positive"));
        }
        let k = self.num_categories;
        let in_range = |c: Option<usize>| c.is_none_or(|c| c < k);
        for e in self.all_examples() {
            if e.features.len() != self.feature_width {
                return Err(Error::param(format!(
                    "feature width {} differs from {}",
                    e.features.len(),
                    self.feature_width
                )));
            }
            if !in_range(e.label) || !in_range(e.hidden) {
                return Err(Error::param(format!("category out of range [0, {k})")));
            }
        }
        for e in &self.source_labeled {
            if e.domain != Domain::Source || e.label.is_none() {
                return Err(Error::param(
                    "source examples must be labeled source examples",
                ));
            }
        }
        for e in &self.target_labeled {
            match e.label {
                Some(l) if e.domain == Domain::Target && self.labeled_categories.contains(&l) => {}
                _ => {
                    return Err(Error::param(
                        "target labeled example outside the labeled category set",
                    ))
                }
            }
        }
        if self
            .target_unlabeled
            .iter()
            .any(|e| e.domain != Domain::Target || e.label.is_some())
        {
            return Err(Error::param("target unlabeled set holds a labeled example"));
        }
        if let Some(c) = self.labeled_categories.iter().find(|&&c| c >= k) {
            return Err(Error::param(format!("labeled category {c} out of range")));
        }
        Ok(())
    }

    pub fn source_labeled(&self) -> &[Example] {
        &self.source_labeled
    }

    pub fn target_labeled(&self) -> &[Example] {
        &self.target_labeled
    }

    pub fn target_unlabeled(&self) -> &[Example] {
        &self.target_unlabeled
    }

    /// Target labeled followed by target unlabeled.
    pub fn target_examples(&self) -> impl Iterator<Item = &Example> {
        self.target_labeled.iter().chain(&self.target_unlabeled)
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.source_labeled.iter().chain(self.target_examples())
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn labeled_categories(&self) -> &BTreeSet<usize> {
        &self.labeled_categories
    }

    /// Categories without any target labels, set by [`split_semi_supervised`].
    pub fn held_out(&self) -> Option<&BTreeSet<usize>> {
        self.held_out.as_ref()
    }

    pub fn len(&self) -> usize {
        self.source_labeled.len() + self.target_labeled.len() + self.target_unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn target_by_category(&self) -> Result<Vec<Vec<Example>>> {
        let mut by_cat = vec![Vec::new(); self.num_categories];
        for e in self.target_examples() {
            let c = e.truth().ok_or_else(|| {
                Error::param("target example without ground truth cannot be split")
            })?;
            by_cat[c].push(e.clone());
        }
        Ok(by_cat)
    }
}

/// Feature matrix (`n x d`) for a list of examples.
pub fn feature_matrix<'a, I>(examples: I) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Example>,
{
    let rows: Vec<&[f64]> = examples.into_iter().map(|e| e.features()).collect();
    if rows.is_empty() {
        return Err(Error::param("no examples"));
    }
    Tensor::from_rows(&rows)
}

/// Parameters of the two-domain Gaussian mixture.
///
/// Source samples are `mean_k + std * z`. Target samples are drawn the same
/// way and then mapped through `x -> scale * R x + translation`, where `R`
/// rotates the plane of the first two coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub num_categories: usize,
    pub dims: usize,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub rotation_degrees: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub source_per_category: usize,
    pub target_per_category: usize,
    pub seed: u64,
}

impl ShiftSpec {
    /// Default shift: `num_categories` means evenly spaced on a circle of
    /// radius eight standard deviations. With `dims >= 4` the circle lies in
    /// the plane spanned by `(e0 + e2) / sqrt 2` and `(e1 + e3) / sqrt 2`,
    /// so the rotation moves each mean by `1 / sqrt 2` of its in-plane
    /// displacement; otherwise it lies in the first two coordinates. The
    /// target domain is rotated by 60 degrees and translated by two standard
    /// deviations along every coordinate.
    pub fn default_synthetic(num_categories: usize, dims: usize, seed: u64) -> Self {
        let std = 1.0;
        let radius = 8.0 * std;
        let step = 360.0 / num_categories.max(1) as f64;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let means = (0..num_categories)
            .map(|k| {
                let (s, c) = (k as f64 * step).to_radians().sin_cos();
                let (a, b) = (radius * c, radius * s);
                let mut m = vec![0.0; dims];
                if dims >= 4 {
                    m[0] = a * h;
                    m[2] = a * h;
                    m[1] = b * h;
                    m[3] = b * h;
                } else {
                    m[0] = a;
                    if dims > 1 {
                        m[1] = b;
                    }
                }
                m
            })
            .collect();
        ShiftSpec {
            num_categories,
            dims,
            means,
            std,
            rotation_degrees: 60.0,
            translation: vec![2.0 * std; dims],
            scale: 1.0,
            source_per_category: 100,
            target_per_category: 100,
            seed,
        }
    }

    /// Moves the mean of `category` along the great circle through the
    /// origin toward the mean of `neighbor`, covering `fraction` of the
    /// angle between them. Both means keep their norms.
    pub fn move_toward(&mut self, category: usize, neighbor: usize, fraction: f64) -> Result<()> {
        let k = self.num_categories;
        if category >= k || neighbor >= k || category == neighbor {
            return Err(Error::param(format!(
                "move_toward: categories {category} and {neighbor} must be distinct and below {k}"
            )));
        }
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::param(format!(
                "move_toward: fraction must be in [0, 1), got {fraction}"
            )));
        }
        let (a, b) = (&self.means[neighbor], &self.means[category]);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = (norm(a), norm(b));
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        let omega = cos.clamp(-1.0, 1.0).acos();
        if !(na > 0.0 && nb > 0.0) || omega.sin().abs() < 1e-9 {
            return Err(Error::param(
                "move_toward: means must be nonzero and not collinear",
            ));
        }
        // interpolate unit directions, then restore the original norm
        let t = 1.0 - fraction;
        let (wa, wb) = (
            ((1.0 - t) * omega).sin() / omega.sin(),
            (t * omega).sin() / omega.sin(),
        );
        let moved = a
            .iter()
            .zip(b)
            .map(|(x, y)| nb * (wa * x / na + wb * y / nb))
            .collect();
        self.means[category] = moved;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::param(format!("{field}: {why}")));
        if self.num_categories < 2 {
            return bad(
                "num_categories",
                format!("must be >= 2, got {}", self.num_categories),
            );
        }
        if self.dims == 0 {
            return bad("dims", "must be >= 1".into());
        }
        if self.means.len() != self.num_categories {
            return bad(
                "means",
                format!(
                    "{} rows for {} categories",
                    self.means.len(),
                    self.num_categories
                ),
            );
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != self.dims) {
            return bad(
                "means",
                format!("row of width {} for dims {}", m.len(), self.dims),
            );
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("means", "values must be finite".into());
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return bad("std", format!("must be positive, got {}", self.std));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad("scale", format!("must be positive, got {}", self.scale));
        }
        if !self.rotation_degrees.is_finite() {
            return bad("rotation_degrees", "must be finite".into());
        }
        if self.rotation_degrees != 0.0 && self.dims < 2 {
            return bad("rotation_degrees", "rotation needs dims >= 2".into());
        }
        if self.translation.len() != self.dims || self.translation.iter().any(|v| !v.is_finite()) {
            return bad(
                "translation",
                format!(
                    "needs {} finite entries, got {}",
                    self.dims,
                    self.translation.len()
                ),
            );
        }
        if self.source_per_category == 0 {
            return bad("source_per_category", "must be >= 1".into());
        }
        if self.target_per_category == 0 {
            return bad("target_per_category", "must be >= 1".into());
        }
        Ok(())
    }

    /// Maps a source-domain point into the target domain.
    pub fn shift(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if self.dims >= 2 {
            let (s, c) = self.rotation_degrees.to_radians().sin_cos();
            y[0] = c * x[0] - s * x[1];
            y[1] = s * x[0] + c * x[1];
        }
        y.iter_mut()
            .zip(&self.translation)
            .for_each(|(v, t)| *v = self.scale * *v + t);
        y
    }
}

/// Samples both domains. Target examples come back unlabeled with hidden
/// ground truth; no target category is marked as labeled.
pub fn make_shifted_gaussians(spec: &ShiftSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |k: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        spec.means[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + spec.std * z
            })
            .collect()
    };
    let mut source = Vec::with_capacity(spec.num_categories * spec.source_per_category);
    for k in 0..spec.num_categories {
        for _ in 0..spec.source_per_category {
            source.push(Example::labeled(draw(k, &mut rng), k, Domain::Source));
        }
    }
    let mut target = Vec::with_capacity(spec.num_categories * spec.target_per_category);
    for k in 0..spec.num_categories {
        for _ in 0..spec.target_per_category {
            let x = draw(k, &mut rng);
            target.push(Example::unlabeled(spec.shift(&x), Some(k)));
        }
    }
    DatasetBundle::new(
        source,
        Vec::new(),
        target,
        spec.num_categories,
        BTreeSet::new(),
    )
}

fn take_per_category(
    by_cat: Vec<Vec<Example>>,
    labeled: &BTreeSet<usize>,
    n: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lab = Vec::new();
    let mut unl = Vec::new();
    for (c, mut pool) in by_cat.into_iter().enumerate() {
        if !labeled.contains(&c) {
            unl.extend(pool.into_iter().map(Example::hide_label));
            continue;
        }
        if pool.len() < n {
            return Err(Error::param(format!(
                "category {c} has {} target examples, {n} requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        let rest = pool.split_off(n);
        lab.extend(pool.into_iter().map(Example::reveal_label));
        unl.extend(rest.into_iter().map(Example::hide_label));
    }
    Ok((lab, unl))
}

/// Keeps exactly `n_per_class` target labels per category; every other
/// target example becomes unlabeled.
pub fn split_supervised(
    bundle: &DatasetBundle,
    n_per_class: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    let all: BTreeSet<usize> = (0..bundle.num_categories).collect();
    let (lab, unl) = take_per_category(bundle.target_by_category()?, &all, n_per_class, seed)?;
    let mut out = DatasetBundle::new(
        bundle.source_labeled.clone(),
        lab,
        unl,
        bundle.num_categories,
        all,
    )?;
    out.held_out = None;
    Ok(out)
}

/// Keeps `n_per_class` target labels for each listed category only; all
/// target examples of the remaining categories are held out.
pub fn split_semi_supervised(
    bundle: &DatasetBundle,
    labeled_categories: &BTreeSet<usize>,
    n_per_class: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    let k = bundle.num_categories;
    if labeled_categories.is_empty() {
        return Err(Error::param("labeled category set is empty"));
    }
    if let Some(c) = labeled_categories.iter().find(|&&c| c >= k) {
        return Err(Error::param(format!("category {c} out of range [0, {k})")));
    }
    if labeled_categories.len() == k {
        return Err(Error::param(
            "labeled categories must be a proper subset of all categories",
        ));
    }
    let (lab, unl) = take_per_category(
        bundle.target_by_category()?,
        labeled_categories,
        n_per_class,
        seed,
    )?;
    let mut out = DatasetBundle::new(
        bundle.source_labeled.clone(),
        lab,
        unl,
        k,
        labeled_categories.clone(),
    )?;
    out.held_out = Some((0..k).filter(|c| !labeled_categories.contains(c)).collect());
    Ok(out)
}

const UNLABELED: i64 = -1;

/// Writes `domain,split,label,f0,...` rows: source, target labeled, then
/// target unlabeled. Unlabeled rows carry their hidden truth when known.
pub fn save_csv(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(bundle)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(bundle: &DatasetBundle) -> String {
    let mut out = String::from("domain,split,label");
    for i in 0..bundle.feature_width {
        write!(out, ",f{i}").unwrap();
    }
    out.push('\n');
    let sets = [
        ("labeled", &bundle.source_labeled),
        ("labeled", &bundle.target_labeled),
        ("unlabeled", &bundle.target_unlabeled),
    ];
    for (split, examples) in sets {
        for e in examples.iter() {
            let label = e.truth().map_or(UNLABELED, |c| c as i64);
            write!(out, "{},{split},{label}", e.domain.as_str()).unwrap();
            for v in &e.features {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn load_csv(path: &Path) -> Result<DatasetBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// Parses the CSV format of [`save_csv`]. The category count is one past the
/// largest label seen; the labeled category set is every label present among
/// target labeled rows.
pub fn parse_csv(text: &str, path: &Path) -> Result<DatasetBundle> {
    let err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.split('\n').enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["domain", "split", "label"] {
        return Err(err(1, format!("bad header {header:?}")));
    }
    let width = cols.len() - 3;
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(err(1, format!("expected column f{i}, found {c:?}")));
        }
    }

    let (mut source, mut tlab, mut tunl) = (Vec::new(), Vec::new(), Vec::new());
    let mut max_label = None::<usize>;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 3 {
            return Err(err(
                lineno,
                format!("expected {} fields, found {}", width + 3, fields.len()),
            ));
        }
        let domain = match fields[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(err(lineno, format!("unknown domain {other:?}"))),
        };
        let labeled = match fields[1] {
            "labeled" => true,
            "unlabeled" => false,
            other => return Err(err(lineno, format!("unknown split {other:?}"))),
        };
        let label: i64 = fields[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad label {:?}", fields[2])))?;
        if label < UNLABELED {
            return Err(err(lineno, format!("bad label {label}")));
        }
        let label = (label >= 0).then_some(label as usize);
        let features = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(lineno, format!("bad feature value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(l) = label {
            max_label = Some(max_label.map_or(l, |m| m.max(l)));
        }
        match (domain, labeled, label) {
            (Domain::Source, true, Some(l)) => source.push(Example::labeled(features, l, domain)),
            (Domain::Source, _, _) => {
                return Err(err(lineno, "source examples must be labeled".into()))
            }
            (Domain::Target, true, Some(l)) => tlab.push(Example::labeled(features, l, domain)),
            (Domain::Target, true, None) => {
                return Err(err(lineno, "labeled row with label -1".into()))
            }
            (Domain::Target, false, truth) => tunl.push(Example::unlabeled(features, truth)),
        }
    }
    let num_categories = max_label.map_or(0, |m| m + 1);
    let labeled_categories = tlab.iter().filter_map(|e: &Example| e.label).collect();
    DatasetBundle::new(source, tlab, tunl, num_categories, labeled_categories)
        .map_err(|e| err(0, e.to_string()))
}
