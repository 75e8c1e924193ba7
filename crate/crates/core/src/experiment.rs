//! End-to-end experiments: data, split, source-only pretraining, soft-label
//! table, adaptation, evaluation and the domain probe.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, make_shifted_gaussians, split_semi_supervised, split_supervised, DatasetBundle,
    Example, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::eval::{domain_invariance_probe, evaluate, ground_truth, heldout_evaluate, EvalReport};
use crate::exec::Exec;
use crate::losses::{build_soft_label_table, SoftLabelTable};
use crate::network::{init_params, ModelParams};
use crate::trainer::{log_to_jsonl, train_adapt, train_source_only, TrainConfig, TrainLogEntry};

/// Where the examples come from. Exactly one source per experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(ShiftSpec),
    Csv(PathBuf),
}

/// Which target labels stay visible during adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitProtocol {
    /// Use the bundle's labeled/unlabeled partition as is.
    None,
    Supervised {
        n_per_category: usize,
        #[serde(default)]
        seed: u64,
    },
    SemiSupervised {
        labeled_categories: BTreeSet<usize>,
        n_per_category: usize,
        #[serde(default)]
        seed: u64,
    },
}

/// Which adaptation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modes {
    pub confusion: bool,
    pub soft_labels: bool,
}

impl Modes {
    pub fn tag(self) -> &'static str {
        match (self.soft_labels, self.confusion) {
            (false, false) => "hard",
            (true, false) => "soft",
            (false, true) => "confusion",
            (true, true) => "soft+confusion",
        }
    }

    /// The four combinations, hard-only first.
    pub fn grid() -> [Modes; 4] {
        [(false, false), (true, false), (false, true), (true, true)].map(
            |(soft_labels, confusion)| Modes {
                confusion,
                soft_labels,
            },
        )
    }
}

fn default_probe_n() -> usize {
    80
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_n")]
    pub n_train_per_domain: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_train_per_domain: default_probe_n(),
            seed: 0,
        }
    }
}

/// One experiment, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitProtocol,
    /// Widths of the trunk layers after the input.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
    /// Source-only pretraining. `lambda` and `nu` are ignored here.
    pub source_training: TrainConfig,
    /// Adaptation phase. `lambda` applies when confusion is on and `nu`
    /// when soft labels are on; disabled terms get weight zero.
    pub adaptation: TrainConfig,
    pub modes: Modes,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Artifacts are written here by [`run_to_dir`].
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::json("experiment config", e))?;
        if let DatasetSource::Csv(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.output_dir {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Derives every seed of the experiment from one base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
        if let DatasetSource::Synthetic(spec) = &mut self.dataset {
            spec.seed = s(1);
        }
        match &mut self.split {
            SplitProtocol::None => {}
            SplitProtocol::Supervised { seed, .. } | SplitProtocol::SemiSupervised { seed, .. } => {
                *seed = s(2)
            }
        }
        self.init_seed = s(3);
        self.source_training.seed = s(4);
        self.adaptation.seed = s(5);
        self.probe.seed = s(6);
        self
    }

    /// The adaptation config with the loss weights implied by the modes.
    pub fn effective_adaptation(&self) -> TrainConfig {
        let mut c = self.adaptation.clone();
        if !self.modes.confusion {
            c.lambda = 0.0;
        }
        if !self.modes.soft_labels {
            c.nu = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param(format!(
                "hidden: need at least one nonzero width, got {:?}",
                self.hidden
            )));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.source_training.validate()?;
        self.effective_adaptation().validate()
    }
}

/// Accuracy and probe numbers for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Evaluation on unlabeled target examples with known truth.
    pub target: Option<EvalReport>,
    pub heldout: Option<EvalReport>,
    pub probe_accuracy: Option<f64>,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub lambda: f64,
    pub nu: f64,
    pub source_only: ModelSummary,
    pub adapted: ModelSummary,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing report", e))
    }
}

/// Everything an experiment produces.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub report: ExperimentReport,
    pub source_model: ModelParams,
    pub params: ModelParams,
    pub table: SoftLabelTable,
    pub log: Vec<TrainLogEntry>,
    pub bundle: DatasetBundle,
}

fn phase<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Phase {
        phase: name.to_string(),
        source: Box::new(e),
    })
}

/// Loads or generates the data and applies the split protocol.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let bundle = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => make_shifted_gaussians(spec)?,
        DatasetSource::Csv(path) => load_csv(path)?,
    };
    match &cfg.split {
        SplitProtocol::None => Ok(bundle),
        SplitProtocol::Supervised {
            n_per_category,
            seed,
        } => split_supervised(&bundle, *n_per_category, *seed),
        SplitProtocol::SemiSupervised {
            labeled_categories,
            n_per_category,
            seed,
        } => split_semi_supervised(&bundle, labeled_categories, *n_per_category, *seed),
    }
}

fn summarize(
    model: &ModelParams,
    bundle: &DatasetBundle,
    probe: &ProbeConfig,
) -> Result<ModelSummary> {
    let known: Vec<Example> = bundle
        .target_unlabeled()
        .iter()
        .filter(|e| ground_truth(e).is_some())
        .cloned()
        .collect();
    let target = if known.is_empty() {
        None
    } else {
        Some(evaluate(model, &known)?)
    };
    let heldout = match bundle.held_out() {
        Some(_) => Some(heldout_evaluate(model, bundle)?),
        None => None,
    };
    let all_target: Vec<Example> = bundle.target_examples().cloned().collect();
    let n = probe.n_train_per_domain;
    let probe_accuracy = if n > 0 && bundle.source_labeled().len() > n && all_target.len() > n {
        Some(domain_invariance_probe(
            model,
            bundle.source_labeled(),
            &all_target,
            n,
            probe.seed,
        )?)
    } else {
        None
    };
    Ok(ModelSummary {
        target,
        heldout,
        probe_accuracy,
    })
}

/// Runs the full pipeline in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    phase("config", cfg.validate())?;
    let bundle = phase("data", prepare_data(cfg))?;
    let k = bundle.num_categories();
    let mut dims = vec![bundle.feature_width()];
    dims.extend(&cfg.hidden);
    let init = phase("init", init_params(&dims, k, cfg.init_seed))?;
    let source = phase(
        "source training",
        train_source_only(&cfg.source_training, init, bundle.source_labeled()),
    )?;
    let adapt_cfg = cfg.effective_adaptation();
    let table = phase(
        "soft labels",
        build_soft_label_table(
            &source.params,
            bundle.source_labeled(),
            adapt_cfg.temperature,
        ),
    )?;
    let adapted = phase(
        "adaptation",
        train_adapt(&adapt_cfg, &bundle, source.params.clone(), Some(&table)),
    )?;
    let report = phase(
        "evaluation",
        (|| {
            Ok(ExperimentReport {
                mode: cfg.modes.tag().to_string(),
                lambda: adapt_cfg.lambda,
                nu: adapt_cfg.nu,
                source_only: summarize(&source.params, &bundle, &cfg.probe)?,
                adapted: summarize(&adapted.params, &bundle, &cfg.probe)?,
            })
        })(),
    )?;
    let mut log = source.log;
    log.extend(adapted.log);
    Ok(ExperimentResult {
        report,
        source_model: source.params,
        params: adapted.params,
        table,
        log,
        bundle,
    })
}

/// File names of the output directory.
pub const PARAMS_FILE: &str = "params.json";
pub const SOFT_LABELS_FILE: &str = "soft_labels.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Writes the artifacts of a finished experiment into `dir`.
pub fn write_artifacts(result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(PARAMS_FILE, result.params.to_json()?)?;
    write(SOFT_LABELS_FILE, result.table.to_json()?)?;
    write(LOG_FILE, log_to_jsonl(&result.log)?)?;
    write(REPORT_FILE, result.report.to_json()?)
}

/// Runs the experiment and writes its artifacts to the configured directory.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let dir = cfg
        .output_dir
        .as_deref()
        .ok_or_else(|| Error::param("output_dir is not set"))?;
    let result = run_experiment(cfg)?;
    phase("writing artifacts", write_artifacts(&result, dir))?;
    Ok(result)
}

/// Runs independent experiments, in parallel when `exec` allows.
/// Results come back in input order.
pub fn run_many(exec: Exec, configs: &[ExperimentConfig]) -> Vec<Result<ExperimentResult>> {
    exec.map_slice(configs, run_experiment)
}

/// Median of a nonempty sample.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tuned configurations for the default synthetic shift.
pub mod presets {
    use std::collections::BTreeSet;

    use super::{DatasetSource, ExperimentConfig, Modes, ProbeConfig, SplitProtocol};
    use crate::data::ShiftSpec;
    use crate::trainer::TrainConfig;

    /// Feature width of the default shift.
    pub const DIMS: usize = 8;
    /// Category held out of the target labels in [`semi_supervised`].
    pub const HELD_OUT: usize = 2;
    /// Labeled category that [`HELD_OUT`] is moved toward.
    pub const NEIGHBOR: usize = 1;
    /// Fraction of the angle between them that [`HELD_OUT`] covers.
    pub const NEAR_FRACTION: f64 = 0.5;

    pub fn spec(seed: u64) -> ShiftSpec {
        ShiftSpec::default_synthetic(4, DIMS, seed)
    }

    /// The default shift with [`HELD_OUT`] moved toward [`NEIGHBOR`].
    pub fn near_spec(seed: u64) -> ShiftSpec {
        let mut s = spec(seed);
        s.move_toward(HELD_OUT, NEIGHBOR, NEAR_FRACTION)
            .expect("preset categories are valid");
        s
    }

    fn base(dataset: ShiftSpec, split: SplitProtocol, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(dataset),
            split,
            hidden: vec![32, 16],
            init_seed: 0,
            source_training: TrainConfig {
                learning_rate: 0.1,
                epochs: 20,
                ..TrainConfig::default()
            },
            adaptation: TrainConfig {
                learning_rate: 0.1,
                epochs: 300,
                batch_target_labeled: Some(16),
                ..TrainConfig::default()
            },
            modes: Modes {
                confusion: true,
                soft_labels: true,
            },
            probe: ProbeConfig::default(),
            output_dir: None,
        }
        .with_seed(seed)
    }

    /// Three labeled target examples per category.
    pub fn supervised(seed: u64) -> ExperimentConfig {
        base(
            spec(0),
            SplitProtocol::Supervised {
                n_per_category: 3,
                seed: 0,
            },
            seed,
        )
    }

    /// Ten labeled target examples for every category except [`HELD_OUT`],
    /// which sits near a labeled neighbour.
    pub fn semi_supervised(seed: u64) -> ExperimentConfig {
        let labeled: BTreeSet<usize> = (0..4).filter(|&c| c != HELD_OUT).collect();
        base(
            near_spec(0),
            SplitProtocol::SemiSupervised {
                labeled_categories: labeled,
                n_per_category: 10,
                seed: 0,
            },
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        let mut spec = ShiftSpec::default_synthetic(4, 2, 3);
        spec.source_per_category = 30;
        spec.target_per_category = 30;
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(spec),
            split: SplitProtocol::Supervised {
                n_per_category: 3,
                seed: 0,
            },
            hidden: vec![8],
            init_seed: 0,
            source_training: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            adaptation: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            modes: Modes {
                confusion: true,
                soft_labels: true,
            },
            probe: ProbeConfig {
                n_train_per_domain: 20,
                seed: 0,
            },
            output_dir: None,
        }
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = config();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            ExperimentConfig::from_json(&text, Path::new(".")).unwrap(),
            cfg
        );
        let typo = text.replace("\"modes\"", "\"mode\"");
        assert!(ExperimentConfig::from_json(&typo, Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = config();
        cfg.dataset = DatasetSource::Csv("data.csv".into());
        cfg.output_dir = Some("out".into());
        let text = serde_json::to_string(&cfg).unwrap();
        let parsed = ExperimentConfig::from_json(&text, Path::new("/tmp/exp")).unwrap();
        assert_eq!(
            parsed.dataset,
            DatasetSource::Csv("/tmp/exp/data.csv".into())
        );
        assert_eq!(parsed.output_dir, Some("/tmp/exp/out".into()));
    }

    #[test]
    fn modes_map_to_weights() {
        let mut cfg = config();
        let tags: Vec<_> = Modes::grid().iter().map(|m| m.tag()).collect();
        assert_eq!(tags, ["hard", "soft", "confusion", "soft+confusion"]);
        cfg.modes = Modes::grid()[0];
        let c = cfg.effective_adaptation();
        assert_eq!((c.lambda, c.nu), (0.0, 0.0));
        cfg.modes = Modes::grid()[3];
        let c = cfg.effective_adaptation();
        assert_eq!((c.lambda, c.nu), (0.01, 0.1));
    }

    #[test]
    fn run_is_deterministic_and_parallel_safe() {
        let cfg = config();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.report.mode, "soft+confusion");
        assert!(a.report.adapted.probe_accuracy.is_some());
        assert!(a.report.adapted.heldout.is_none());
        let runs = run_many(Exec::Parallel, &[cfg.clone(), cfg.clone().with_seed(1)]);
        let b = runs[0].as_ref().unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
        let seq = run_many(Exec::Sequential, &[cfg.with_seed(1)]);
        assert_eq!(
            seq[0].as_ref().unwrap().report,
            runs[1].as_ref().unwrap().report
        );
    }

    #[test]
    fn phase_is_named_in_errors() {
        let mut cfg = config();
        cfg.split = SplitProtocol::Supervised {
            n_per_category: 1000,
            seed: 0,
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("data:"), "{err}");
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
