//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Head, ModelSpec};
use crate::pipeline::TrainConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    TwoMoons,
    MultiraterShapes,
    /// IDX image file, plus an optional IDX label file.
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    /// `mlp` or `encoder_decoder`.
    pub model: String,
    pub dataset: DatasetSource,
    pub n_examples: usize,
    /// Two-moons coordinate noise σ.
    pub noise: f64,
    pub image_size: usize,
    pub raters: usize,
    pub jitter_px: f64,
    pub image_noise: f64,
    pub data_seed: u64,
    /// Fraction of examples (taken from the end) held out for testing.
    pub test_fraction: f64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub r_bayes_sweep: Vec<f64>,
    pub ensemble_members: usize,
    pub full_bayes_epochs: usize,
    pub ece_bins: usize,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

/// Splits config text into `(key, value)` pairs, rejecting malformed lines and duplicates.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(Error::config(k, "duplicate key"));
        }
        out.push((k, v));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let seg = task == Task::Segment;
        let head = if seg {
            Head::Segmentation
        } else {
            Head::Multiclass { classes: 2 }
        };
        RunConfig {
            task,
            model: if seg { "encoder_decoder" } else { "mlp" }.into(),
            dataset: if seg {
                DatasetSource::MultiraterShapes
            } else {
                DatasetSource::TwoMoons
            },
            n_examples: if seg { 200 } else { 2000 },
            noise: 0.1,
            image_size: 16,
            raters: 4,
            jitter_px: 2.0,
            image_noise: 0.1,
            data_seed: 0,
            test_fraction: 0.2,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default_for(head),
            r_bayes_sweep: vec![0.01, 0.05, 0.10, 0.20, 0.40, 0.80],
            ensemble_members: 5,
            full_bayes_epochs: 50,
            ece_bins: crate::metrics::DEFAULT_ECE_BINS,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let task = match pairs.iter().find(|(k, _)| k == "task").map(|(_, v)| v.as_str()) {
            None | Some("classify") => Task::Classify,
            Some("segment") => Task::Segment,
            Some(other) => return Err(Error::config("task", format!("expected classify or segment, got {other:?}"))),
        };
        let mut cfg = RunConfig::defaults(task);
        let mut data_seed = None;
        let mut full_epochs = None;
        let mut labels = None;
        for (k, v) in &pairs {
            let v = v.as_str();
            match k.as_str() {
                "task" => {}
                "model" => {
                    if v != "mlp" && v != "encoder_decoder" {
                        return Err(Error::config(k, "expected mlp or encoder_decoder"));
                    }
                    cfg.model = v.into();
                }
                "dataset" => {
                    cfg.dataset = match v {
                        "two_moons" => DatasetSource::TwoMoons,
                        "multirater_shapes" => DatasetSource::MultiraterShapes,
                        _ => match v.strip_prefix("idx:") {
                            Some(p) if !p.is_empty() => DatasetSource::Idx {
                                images: PathBuf::from(p),
                                labels: None,
                            },
                            _ => return Err(Error::config(k, "expected two_moons, multirater_shapes or idx:<path>")),
                        },
                    }
                }
                "idx_labels" => labels = Some(PathBuf::from(v)),
                "n_examples" => cfg.n_examples = num(k, v)?,
                "noise" => cfg.noise = num(k, v)?,
                "image_size" => cfg.image_size = num(k, v)?,
                "raters" => cfg.raters = num(k, v)?,
                "jitter_px" => cfg.jitter_px = num(k, v)?,
                "image_noise" => cfg.image_noise = num(k, v)?,
                "data_seed" => data_seed = Some(num(k, v)?),
                "test_fraction" => cfg.test_fraction = num(k, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "r_bayes_sweep" => cfg.r_bayes_sweep = list(k, v)?,
                "ensemble_members" => cfg.ensemble_members = num(k, v)?,
                "full_bayes_epochs" => full_epochs = Some(num(k, v)?),
                "ece_bins" => cfg.ece_bins = num(k, v)?,
                _ => {
                    if !cfg.train.set(k, v)? {
                        return Err(Error::config(k, "unknown key"));
                    }
                }
            }
        }
        if let Some(l) = labels {
            match &mut cfg.dataset {
                DatasetSource::Idx { labels, .. } => *labels = Some(l),
                _ => return Err(Error::config("idx_labels", "only valid with an idx dataset")),
            }
        }
        cfg.data_seed = data_seed.unwrap_or(cfg.train.seed);
        cfg.full_bayes_epochs = full_epochs.unwrap_or(cfg.train.epochs);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must be in [0, 1)"));
        }
        if self.r_bayes_sweep.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("r_bayes_sweep", "rates must be in [0, 1]"));
        }
        if self.ensemble_members == 0 {
            return Err(Error::config("ensemble_members", "must be >= 1"));
        }
        if self.full_bayes_epochs == 0 {
            return Err(Error::config("full_bayes_epochs", "must be >= 1"));
        }
        if self.ece_bins == 0 {
            return Err(Error::config("ece_bins", "must be >= 1"));
        }
        match (self.task, self.model.as_str()) {
            (Task::Classify, "mlp") | (Task::Segment, "encoder_decoder") => Ok(()),
            _ => Err(Error::config("model", format!("model {} does not fit the task", self.model))),
        }
    }

    /// Every key with its effective value, parseable by [`RunConfig::parse`].
    pub fn resolved_text(&self) -> String {
        let (dataset, labels) = match &self.dataset {
            DatasetSource::TwoMoons => ("two_moons".to_string(), None),
            DatasetSource::MultiraterShapes => ("multirater_shapes".to_string(), None),
            DatasetSource::Idx { images, labels } => (format!("idx:{}", images.display()), labels.as_ref()),
        };
        let mut lines = vec![
            ("task".to_string(), match self.task {
                Task::Classify => "classify",
                Task::Segment => "segment",
            }
            .to_string()),
            ("model".into(), self.model.clone()),
            ("dataset".into(), dataset),
        ];
        if let Some(l) = labels {
            lines.push(("idx_labels".into(), l.display().to_string()));
        }
        lines.extend([
            ("n_examples".into(), self.n_examples.to_string()),
            ("noise".into(), format!("{}", self.noise)),
            ("image_size".into(), self.image_size.to_string()),
            ("raters".into(), self.raters.to_string()),
            ("jitter_px".into(), format!("{}", self.jitter_px)),
            ("image_noise".into(), format!("{}", self.image_noise)),
            ("data_seed".into(), self.data_seed.to_string()),
            ("test_fraction".into(), format!("{}", self.test_fraction)),
            ("output_dir".into(), self.output_dir.display().to_string()),
            ("r_bayes_sweep".into(), join(&self.r_bayes_sweep)),
            ("ensemble_members".into(), self.ensemble_members.to_string()),
            ("full_bayes_epochs".into(), self.full_bayes_epochs.to_string()),
            ("ece_bins".into(), self.ece_bins.to_string()),
        ]);
        lines.extend(self.train.pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The configured dataset split into `(train, test)`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let full = match &self.dataset {
            DatasetSource::TwoMoons => data::gen_two_moons(self.n_examples, self.noise, self.data_seed)?,
            DatasetSource::MultiraterShapes => data::gen_multirater_shapes(
                self.n_examples,
                self.image_size,
                self.raters,
                self.jitter_px,
                self.image_noise,
                self.data_seed,
            )?,
            DatasetSource::Idx { images, labels } => {
                let ds = match labels {
                    Some(l) => data::load_idx_labeled(images, l)?,
                    None => data::load_idx(images)?,
                };
                if self.task == Task::Classify && self.model == "mlp" {
                    flatten(ds)?
                } else {
                    ds
                }
            }
        };
        let n_test = (self.test_fraction * full.len() as f64).round() as usize;
        if n_test == 0 {
            let test = full.subset(&(0..full.len()).collect::<Vec<_>>(), data::Split::Test)?;
            return Ok((full, test));
        }
        full.split_off_test(n_test)
    }

    /// The reference architecture for this task, sized to the dataset.
    pub fn model_spec(&self, train: &Dataset) -> Result<ModelSpec> {
        let shape = train.example_shape();
        match self.task {
            Task::Classify => {
                let classes = match &train.targets {
                    data::Targets::Classes { n_classes, .. } => *n_classes,
                    _ => return Err(Error::config("dataset", "classification needs class labels")),
                };
                let [dim] = shape[..] else {
                    return Err(Error::config("model", format!("mlp needs flat inputs, got {shape:?}")));
                };
                Ok(ModelSpec::reference_mlp(dim, Head::Multiclass { classes }))
            }
            Task::Segment => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::config("model", format!("encoder_decoder needs [C, H, W] inputs, got {shape:?}")));
                };
                if h != w || h % 4 != 0 {
                    return Err(Error::config("image_size", "images must be square with a side divisible by 4"));
                }
                Ok(ModelSpec::reference_encoder_decoder(c, h))
            }
        }
    }
}

fn flatten(mut ds: Dataset) -> Result<Dataset> {
    let n = ds.len();
    let d: usize = ds.example_shape().iter().product();
    let data = std::mem::replace(&mut ds.inputs, Tensor::zeros(&[0])).into_data();
    ds.inputs = Tensor::new(vec![n, d], data)?;
    Ok(ds)
}
