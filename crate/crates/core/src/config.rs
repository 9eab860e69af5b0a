//! TOML configuration for protocol runs and synthetic data generation.
//!
//! Domain order in a protocol file is the incremental order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    band_emphasis, class_names, dataset_from_manifest, epoch_seed, generate_synthetic_domain,
    load_manifest, write_split, SyntheticDomainSpec,
};
use crate::error::{DilError, Result};
use crate::inference::AgnosticOptions;
use crate::metrics::MetricKind;
use crate::model::{ArchConfig, DilModel, DomainSpec, TaskKind};
use crate::optim::TrainConfig;
use crate::strategy::Strategy;
use crate::tensor::Real;
use crate::trainer::{run_protocol_on, DomainData, ProtocolOutcome, ProtocolPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also evaluate with entropy-based bank selection.
    pub agnostic: bool,
    /// Compare entropies relative to their maxima.
    pub normalize_entropy: bool,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            agnostic: false,
            normalize_entropy: false,
            batch_size: 64,
            metric: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub classes: Vec<String>,
    #[serde(default = "single_label")]
    pub task_kind: TaskKind,
}

fn single_label() -> TaskKind {
    TaskKind::SingleLabel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub strategy: String,
    /// Defaults to the union of the domains' classes in order of appearance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub domains: Vec<DomainEntry>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            strategy: Strategy::Adil.name().into(),
            vocabulary: None,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            domains: Vec::new(),
        }
    }
}

fn read_toml<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path)
        .map_err(|e| DilError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.to_string().replace('\n', " ");
        DilError::Config(format!("{}: {}", path.display(), msg.trim()))
    })
}

fn to_toml<C: Serialize>(value: &C) -> Result<String> {
    toml::to_string(value).map_err(|e| DilError::Config(format!("cannot encode config: {e}")))
}

impl ProtocolConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DilError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse()
    }

    pub fn vocabulary(&self) -> Vec<String> {
        if let Some(v) = &self.vocabulary {
            return v.clone();
        }
        let mut v: Vec<String> = Vec::new();
        for c in self.domains.iter().flat_map(|d| &d.classes) {
            if !v.contains(c) {
                v.push(c.clone());
            }
        }
        v
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        self.domains
            .iter()
            .enumerate()
            .map(|(i, d)| DomainSpec {
                domain_id: i,
                name: d.name.clone(),
                class_list: d.classes.clone(),
                task_kind: d.task_kind,
            })
            .collect()
    }

    /// Validated plan plus the domain sequence.
    pub fn plan(&self) -> Result<(ProtocolPlan, Vec<DomainSpec>)> {
        let plan = ProtocolPlan {
            strategy: self.strategy()?,
            arch: self.arch.clone(),
            vocabulary: self.vocabulary(),
            train: self.train.clone(),
            agnostic: self.eval.agnostic,
            agnostic_options: AgnosticOptions {
                normalize_by_classes: self.eval.normalize_entropy,
            },
            eval_batch_size: self.eval.batch_size,
            metric: self.eval.metric,
        };
        let specs = self.domain_specs();
        crate::trainer::check_plan(&plan, &specs)?;
        Ok((plan, specs))
    }
}

/// Reads `<root>/<domain>/train.csv` and `test.csv` for every domain.
pub fn load_domains(config: &ProtocolConfig, data_root: &Path) -> Result<Vec<DomainData>> {
    let (plan, specs) = config.plan()?;
    let (f, t) = (plan.arch.mel_bins, plan.arch.frames);
    specs
        .into_iter()
        .map(|spec| {
            let split = |name: &str| {
                let path = data_root.join(&spec.name).join(format!("{name}.csv"));
                if !path.is_file() {
                    return Err(DilError::Data(format!(
                        "domain '{}': missing {} split at {}",
                        spec.name,
                        name,
                        path.display()
                    )));
                }
                let manifest = load_manifest(&path, &plan.vocabulary)?;
                dataset_from_manifest(
                    &manifest,
                    &spec.name,
                    &spec.class_list,
                    &plan.vocabulary,
                    spec.task_kind,
                    f,
                    t,
                )
                .map_err(|e| DilError::Data(format!("domain '{}': {e}", spec.name)))
            };
            Ok(DomainData {
                train: split("train")?,
                test: split("test")?,
                spec,
            })
        })
        .collect()
}

/// Loads the data named by `config` and runs the protocol.
pub fn run_protocol<T: Real>(
    config: &ProtocolConfig,
    data_root: &Path,
    on_step: impl FnMut(usize, &DilModel<T>) -> Result<()>,
) -> Result<ProtocolOutcome> {
    let (plan, _) = config.plan()?;
    let data = load_domains(config, data_root)?;
    run_protocol_on(&plan, &data, on_step)
}

/// How one generated domain departs from the shared prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratedDomain {
    pub name: String,
    pub scale: f64,
    pub offset: f64,
    /// Overrides the global noise level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Center of a Gaussian gain bump as a fraction of the mel axis.
    pub band_center: f64,
    /// Width of the bump as a fraction of the mel axis.
    pub band_width: f64,
    /// Peak extra gain; 0 disables the bump.
    pub band_gain: f64,
    /// Weight of class patterns unique to this domain.
    pub specific_weight: f64,
    /// Linear per-mel-bin offset from `-tilt` to `+tilt`, like a
    /// microphone's frequency response in log-mel features.
    pub tilt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
}

impl Default for GeneratedDomain {
    fn default() -> Self {
        GeneratedDomain {
            name: String::new(),
            scale: 1.0,
            offset: 0.0,
            noise: None,
            band_center: 0.5,
            band_width: 1.0 / 6.0,
            band_gain: 0.0,
            specific_weight: 0.0,
            tilt: 0.0,
            train_per_class: None,
            test_per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub mel_bins: usize,
    pub frames: usize,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    /// Spread of per-class mean levels shared by all domains.
    pub level_spread: f64,
    pub task_kind: TaskKind,
    pub domains: Vec<GeneratedDomain>,
    /// Template for the protocol file written next to the data; its
    /// domains, vocabulary and input size are filled in by the generator.
    pub protocol: ProtocolConfig,
}

impl Default for GenerateConfig {
    /// Three domains: a clean base domain and two recordings with a lower
    /// level, opposite DC offsets, different emphasized bands, some
    /// domain-specific class structure and a quarter of the base's
    /// training data.
    fn default() -> Self {
        let shifted = |name: &str, offset: f64, band_center: f64| GeneratedDomain {
            name: name.into(),
            scale: 0.3,
            offset,
            band_center,
            band_gain: 4.0,
            specific_weight: 0.9,
            train_per_class: Some(10),
            ..GeneratedDomain::default()
        };
        GenerateConfig {
            seed: 0,
            mel_bins: 16,
            frames: 16,
            n_classes: 10,
            train_per_class: 40,
            test_per_class: 20,
            noise: 1.0,
            level_spread: 1.0,
            task_kind: TaskKind::SingleLabel,
            domains: vec![
                GeneratedDomain {
                    name: "site_a".into(),
                    ..GeneratedDomain::default()
                },
                shifted("site_b", 1.5, 0.5),
                shifted("site_c", -1.5, 0.2),
            ],
            protocol: ProtocolConfig {
                arch: ArchConfig {
                    channels: vec![8, 16, 32],
                    convs_per_block: 1,
                    mel_bins: 16,
                    frames: 16,
                },
                train: TrainConfig {
                    lr_incremental: 3.5e-3,
                    ..TrainConfig::default()
                },
                ..ProtocolConfig::default()
            },
        }
    }
}

impl GenerateConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DilError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    /// Per-domain generator specs and sample seeds, validated.
    pub fn synthetic_specs(&self) -> Result<Vec<(SyntheticDomainSpec, u64)>> {
        if self.domains.is_empty() {
            return Err(DilError::Config("generate config lists no domains".into()));
        }
        let prototype_seed = epoch_seed(self.seed, 0);
        let mut out = Vec::with_capacity(self.domains.len());
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() || d.name.contains(['/', '\\']) || d.name.starts_with('.') {
                return Err(DilError::Config(format!(
                    "domain {i} needs a plain directory name, got '{}'",
                    d.name
                )));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(DilError::Config(format!(
                    "domain '{}' is listed twice",
                    d.name
                )));
            }
            if !(d.band_width > 0.0) || !d.band_gain.is_finite() || !d.band_center.is_finite() {
                return Err(DilError::Config(format!(
                    "domain '{}' needs a positive band width and finite band settings",
                    d.name
                )));
            }
            let f = self.mel_bins as f64;
            let spec = SyntheticDomainSpec {
                name: d.name.clone(),
                n_classes: self.n_classes,
                train_per_class: d.train_per_class.unwrap_or(self.train_per_class),
                test_per_class: d.test_per_class.unwrap_or(self.test_per_class),
                mel_bins: self.mel_bins,
                frames: self.frames,
                prototype_seed,
                scale: d.scale,
                offset: d.offset,
                noise: d.noise.unwrap_or(self.noise),
                band_emphasis: (d.band_gain != 0.0).then(|| {
                    band_emphasis(
                        self.mel_bins,
                        d.band_center * f,
                        d.band_width * f,
                        d.band_gain,
                    )
                }),
                specific_weight: d.specific_weight,
                tilt: d.tilt,
                level_spread: self.level_spread,
                specific_seed: epoch_seed(self.seed, 100 + i),
                task_kind: self.task_kind,
            };
            spec.validate()?;
            out.push((spec, epoch_seed(self.seed, 200 + i)));
        }
        Ok(out)
    }

    /// The protocol file matching the generated data.
    pub fn protocol(&self) -> ProtocolConfig {
        let classes = class_names(self.n_classes);
        let mut p = self.protocol.clone();
        p.arch.mel_bins = self.mel_bins;
        p.arch.frames = self.frames;
        p.vocabulary = Some(classes.clone());
        p.domains = self
            .domains
            .iter()
            .map(|d| DomainEntry {
                name: d.name.clone(),
                classes: classes.clone(),
                task_kind: self.task_kind,
            })
            .collect();
        p
    }

    /// Generates every domain in memory.
    pub fn generate(&self) -> Result<Vec<DomainData>> {
        let protocol = self.protocol();
        let specs = protocol.domain_specs();
        self.synthetic_specs()?
            .into_iter()
            .zip(specs)
            .map(|((s, seed), spec)| {
                let d = generate_synthetic_domain(&s, seed)?;
                Ok(DomainData {
                    spec,
                    train: d.train,
                    test: d.test,
                })
            })
            .collect()
    }

    /// Writes `<out>/<domain>/{train,test}.csv` with their feature files and
    /// a ready-to-run `<out>/protocol.toml`. Everything is validated before
    /// the first write.
    pub fn write(&self, out: &Path) -> Result<()> {
        let protocol = self.protocol();
        protocol.plan()?;
        let domains = self.generate()?;
        let text = protocol.to_toml()?;
        fs::create_dir_all(out).map_err(|e| DilError::io(out, e))?;
        for d in &domains {
            let dir = out.join(&d.spec.name);
            write_split(&dir, "train", &d.train, &d.spec.class_list)?;
            write_split(&dir, "test", &d.test, &d.spec.class_list)?;
        }
        let path = out.join("protocol.toml");
        fs::write(&path, text).map_err(|e| DilError::io(&path, e))
    }
}
