//! Per-class averaged accuracy, held-out category accuracy and the linear
//! domain probe over learned representations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{feature_matrix, DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::ModelParams;

/// True category of an example, including the withheld category of
/// unlabeled target examples.
pub fn ground_truth(example: &Example) -> Option<usize> {
    example.truth()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without evaluation samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean of the defined per-class accuracies.
    pub multiclass_accuracy: f64,
    pub overall_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub empty_classes: Vec<usize>,
    pub n_evaluated: usize,
}

impl EvalReport {
    /// Builds the report from parallel truth/prediction lists.
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        num_categories: usize,
    ) -> Result<Self> {
        if truth.is_empty() || truth.len() != predicted.len() {
            return Err(Error::param(format!(
                "need matching nonempty truth/prediction lists, got {} and {}",
                truth.len(),
                predicted.len()
            )));
        }
        let k = num_categories;
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::param(format!("category out of range [0, {k})")));
            }
            confusion[t][p] += 1;
        }
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let multiclass = defined.iter().sum::<f64>() / defined.len() as f64;
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            empty_classes: (0..k).filter(|&c| per_class[c].is_none()).collect(),
            per_class_accuracy: per_class,
            multiclass_accuracy: multiclass,
            overall_accuracy: correct as f64 / truth.len() as f64,
            heldout_accuracy: None,
            confusion_matrix: confusion,
            n_evaluated: truth.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing report", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate(model: &ModelParams, examples: &[Example]) -> Result<EvalReport> {
    evaluate_with(Exec::default(), model, examples)
}

/// Argmax predictions against ground truth, evaluated in row chunks.
pub fn evaluate_with(exec: Exec, model: &ModelParams, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::param("nothing to evaluate"));
    }
    let truth = examples
        .iter()
        .map(|e| {
            e.truth()
                .ok_or_else(|| Error::param("example without ground truth"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let rows: Vec<&[f64]> = examples.iter().map(Example::features).collect();
    let predicted = model.predict_with(exec, &rows, 256)?;
    EvalReport::from_predictions(&truth, &predicted, model.num_categories())
}

/// Accuracy on the target examples whose category was held out of training.
/// Predictions still range over all categories.
pub fn heldout_evaluate(model: &ModelParams, bundle: &DatasetBundle) -> Result<EvalReport> {
    let held = bundle
        .held_out()
        .ok_or_else(|| Error::contract("bundle has no held-out categories"))?;
    let subset: Vec<Example> = bundle
        .target_examples()
        .filter(|e| e.truth().is_some_and(|c| held.contains(&c)))
        .cloned()
        .collect();
    let mut report = evaluate(model, &subset)?;
    report.heldout_accuracy = Some(report.multiclass_accuracy);
    Ok(report)
}

/// Gradient-descent iterations of the probe.
pub const PROBE_ITERATIONS: usize = 500;
/// Step size of the probe.
pub const PROBE_LEARNING_RATE: f64 = 0.1;

/// Trains a linear source-vs-target classifier on the model's representation
/// of `n_train_per_domain` examples per domain and returns its accuracy on
/// the remaining examples. Near 0.5 means the domains are indistinguishable.
pub fn domain_invariance_probe(
    model: &ModelParams,
    source: &[Example],
    target: &[Example],
    n_train_per_domain: usize,
    seed: u64,
) -> Result<f64> {
    check_probe_sizes(source.len(), target.len(), n_train_per_domain)?;
    let rs = model.representations(&feature_matrix(source)?)?;
    let rt = model.representations(&feature_matrix(target)?)?;
    linear_domain_probe(&rs, &rt, n_train_per_domain, seed)
}

fn check_probe_sizes(ns: usize, nt: usize, n: usize) -> Result<()> {
    if n == 0 || ns <= n || nt <= n {
        return Err(Error::param(format!(
            "probe needs more than {n} examples per domain (and n >= 1), got {ns} source and {nt} target"
        )));
    }
    Ok(())
}

/// The probe on precomputed feature rows (`first` labeled +1, `second` -1).
///
/// Features are standardized with training-set statistics; the classifier
/// starts from zero and runs [`PROBE_ITERATIONS`] full-batch steps on the
/// mean logistic loss. A test row scores 1 for a margin of the right sign
/// and 1/2 for a zero margin, so swapping the two sets gives the same
/// accuracy and constant features give exactly 1/2.
pub fn linear_domain_probe(
    first: &Tensor,
    second: &Tensor,
    n_train_per_domain: usize,
    seed: u64,
) -> Result<f64> {
    probe_with_sign(first, second, n_train_per_domain, seed, 1.0)
}

/// Probe with `first` labeled `sign` and `second` labeled `-sign`.
fn probe_with_sign(
    first: &Tensor,
    second: &Tensor,
    n_train_per_domain: usize,
    seed: u64,
    sign: f64,
) -> Result<f64> {
    check_probe_sizes(first.rows(), second.rows(), n_train_per_domain)?;
    if first.cols() != second.cols() {
        return Err(Error::Dimension {
            op: "linear_domain_probe",
            left: first.shape().to_vec(),
            right: second.shape().to_vec(),
        });
    }
    let d = first.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |t: &Tensor, y: f64| {
        let mut idx: Vec<usize> = (0..t.rows()).collect();
        idx.shuffle(&mut rng);
        let rows = |ix: &[usize]| -> Vec<(Vec<f64>, f64)> {
            ix.iter().map(|&i| (t.row(i).to_vec(), y)).collect()
        };
        (
            rows(&idx[..n_train_per_domain]),
            rows(&idx[n_train_per_domain..]),
        )
    };
    let (mut train, mut test) = split(first, sign);
    let (t2, s2) = split(second, -sign);
    train.extend(t2);
    test.extend(s2);

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for (x, _) in &train {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; d];
    for (x, _) in &train {
        scale
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |x: &mut Vec<f64>| {
        x.iter_mut()
            .zip(mean.iter().zip(&scale))
            .for_each(|(v, (m, s))| *v = (*v - m) / s);
    };
    train.iter_mut().for_each(|(x, _)| standardize(x));
    test.iter_mut().for_each(|(x, _)| standardize(x));

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let margin = |w: &[f64], b: f64, x: &[f64]| -> f64 {
        w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b
    };
    for _ in 0..PROBE_ITERATIONS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z = y * margin(&w, b, x);
            // d/dz log(1 + e^-z) = -sigmoid(-z)
            let coef = -y * sigmoid(-z) / n;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += coef * v);
            gb += coef;
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(w, g)| *w -= PROBE_LEARNING_RATE * g);
        b -= PROBE_LEARNING_RATE * gb;
    }
    let score: f64 = test
        .iter()
        .map(|(x, y)| {
            let z = y * margin(&w, b, x);
            if z > 0.0 {
                1.0
            } else if z == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / test.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::network::init_params;
    use rand::Rng;
    use std::collections::BTreeSet;

    #[test]
    fn perfect_and_imbalanced_reports() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.multiclass_accuracy, 1.0);
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.per_class_accuracy.iter().all(|a| *a == Some(1.0)));

        let mut truth = vec![0; 100];
        truth.push(1);
        let pred = vec![0; 101];
        let r = EvalReport::from_predictions(&truth, &pred, 2).unwrap();
        assert_eq!(r.multiclass_accuracy, 0.5);
        assert_eq!(r.overall_accuracy, 100.0 / 101.0);
        assert_eq!(r.confusion_matrix, vec![vec![100, 0], vec![1, 0]]);
    }

    #[test]
    fn empty_classes_are_flagged_and_excluded() {
        let r = EvalReport::from_predictions(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.empty_classes, vec![1]);
        assert_eq!(r.per_class_accuracy[1], None);
        assert!((r.multiclass_accuracy - 0.75).abs() < 1e-12);
        assert!(EvalReport::from_predictions(&[], &[], 3).is_err());
    }

    #[test]
    fn report_matches_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let n = rng.gen_range(1..60);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let r = EvalReport::from_predictions(&truth, &pred, k).unwrap();
            let mut accs = Vec::new();
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| truth[i] == c).collect();
                if !members.is_empty() {
                    let hit = members.iter().filter(|&&i| pred[i] == c).count();
                    accs.push(hit as f64 / members.len() as f64);
                }
                let row_sum: usize = r.confusion_matrix[c].iter().sum();
                assert_eq!(row_sum, members.len());
            }
            let oracle = accs.iter().sum::<f64>() / accs.len() as f64;
            assert!((r.multiclass_accuracy - oracle).abs() < 1e-12);
            let hits = (0..n).filter(|&i| truth[i] == pred[i]).count();
            assert_eq!(r.overall_accuracy, hits as f64 / n as f64);
        }
    }

    #[test]
    fn evaluate_rejects_empty_input_and_is_deterministic() {
        let p = init_params(&[2, 4], 3, 0).unwrap();
        assert!(evaluate(&p, &[]).is_err());
        let ex: Vec<Example> = (0..30)
            .map(|i| {
                Example::labeled(
                    vec![i as f64 * 0.1, -(i as f64) * 0.2],
                    i % 3,
                    Domain::Source,
                )
            })
            .collect();
        let a = evaluate_with(Exec::Sequential, &p, &ex).unwrap();
        let b = evaluate_with(Exec::Parallel, &p, &ex).unwrap();
        assert_eq!(a, b);
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, offset: f64) -> Tensor {
        let data = (0..n * d)
            .map(|i| rng.gen_range(-1.0..1.0) + if i % d == 0 { offset } else { 0.0 })
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn probe_on_identical_sets_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_rows(&mut rng, 600, 5, 0.0);
        let acc = linear_domain_probe(&a, &a.clone(), 80, 3).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn probe_on_separated_sets_is_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_rows(&mut rng, 300, 5, 3.0);
        let b = random_rows(&mut rng, 300, 5, -3.0);
        let acc = linear_domain_probe(&a, &b, 80, 3).unwrap();
        assert!(acc >= 0.98, "{acc}");
    }

    #[test]
    fn probe_is_symmetric_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let a = random_rows(&mut rng, 200, 4, 0.4);
            let b = random_rows(&mut rng, 200, 4, -0.4);
            let plus = probe_with_sign(&a, &b, 80, seed, 1.0).unwrap();
            let minus = probe_with_sign(&a, &b, 80, seed, -1.0).unwrap();
            assert!((plus - minus).abs() < 1e-12, "{plus} vs {minus}");
        }
    }

    #[test]
    fn probe_on_constant_features_is_exactly_chance() {
        let zeros = Tensor::zeros(vec![150, 3]).unwrap();
        assert_eq!(
            linear_domain_probe(&zeros, &zeros.clone(), 80, 1).unwrap(),
            0.5
        );
    }

    #[test]
    fn probe_rejects_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_rows(&mut rng, 80, 2, 0.0);
        assert!(linear_domain_probe(&a, &a, 80, 0).is_err());
    }

    #[test]
    fn heldout_matches_manual_filter() {
        let spec = crate::data::ShiftSpec::default_synthetic(4, 2, 5);
        let b = crate::data::make_shifted_gaussians(&spec).unwrap();
        let b = crate::data::split_semi_supervised(&b, &BTreeSet::from([0, 1]), 5, 1).unwrap();
        let p = init_params(&[2, 8], 4, 2).unwrap();
        let r = heldout_evaluate(&p, &b).unwrap();
        let manual: Vec<Example> = b
            .target_unlabeled()
            .iter()
            .filter(|e| matches!(ground_truth(e), Some(2) | Some(3)))
            .cloned()
            .collect();
        let m = evaluate(&p, &manual).unwrap();
        assert_eq!(r.multiclass_accuracy, m.multiclass_accuracy);
        assert_eq!(r.heldout_accuracy, Some(m.multiclass_accuracy));
        assert_eq!(r.n_evaluated, 200);

        let plain = crate::data::split_supervised(&b, 3, 0).unwrap();
        assert!(matches!(
            heldout_evaluate(&p, &plain),
            Err(Error::Contract(_))
        ));
    }
}
