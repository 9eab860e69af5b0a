//! Datasets: the synthetic domain-shift generator, the binary feature
//! file, manifests, and seeded mini-batching.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DilError, Result};
use crate::model::TaskKind;
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"DILF";
pub const FEATURE_VERSION: u16 = 1;
/// dtype code for little-endian IEEE-754 binary32.
pub const DTYPE_F32_LE: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;

/// Labelled log-mel-like features of one domain split, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub mel_bins: usize,
    pub frames: usize,
    pub task_kind: TaskKind,
    pub n_classes: usize,
    features: Vec<f32>,
    /// Positions in the domain's class list.
    labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        mel_bins: usize,
        frames: usize,
        task_kind: TaskKind,
        n_classes: usize,
    ) -> Self {
        Dataset {
            name: name.into(),
            mel_bins,
            frames,
            task_kind,
            n_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn sample_len(&self) -> usize {
        self.mel_bins * self.frames
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: &[f32], labels: Vec<usize>) -> Result<()> {
        if features.len() != self.sample_len() {
            return Err(DilError::Data(format!(
                "sample has {} values, expected {}x{}",
                features.len(),
                self.mel_bins,
                self.frames
            )));
        }
        if labels.is_empty() || labels.iter().any(|&l| l >= self.n_classes) {
            return Err(DilError::Data(format!(
                "labels {labels:?} invalid for {} classes",
                self.n_classes
            )));
        }
        if self.task_kind == TaskKind::SingleLabel && labels.len() != 1 {
            return Err(DilError::Data(format!(
                "single-label dataset '{}' got {} labels",
                self.name,
                labels.len()
            )));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(DilError::Data(format!("non-finite feature value {bad}")));
        }
        self.features.extend_from_slice(features);
        self.labels.push(labels);
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.sample_len()..(i + 1) * self.sample_len()]
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    /// N×1×F×T batch of the given samples.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![indices.len(), 1, self.mel_bins, self.frames], data)
            .expect("dataset values are finite")
    }

    /// First label of each sample (the label, for single-label data).
    pub fn class_indices(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i][0]).collect()
    }

    pub fn multi_hot<T: Real>(&self, indices: &[usize]) -> Vec<T> {
        let mut out = vec![T::zero(); indices.len() * self.n_classes];
        for (r, &i) in indices.iter().enumerate() {
            for &l in &self.labels[i] {
                out[r * self.n_classes + l] = T::one();
            }
        }
        out
    }

    pub fn truth_row(&self, i: usize) -> Vec<bool> {
        let mut row = vec![false; self.n_classes];
        for &l in &self.labels[i] {
            row[l] = true;
        }
        row
    }
}

/// Seeded permutation of `0..n` cut into batches; the last batch may be
/// short.
pub fn batch_iter(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DilError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Seed of epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How one synthetic domain deviates from the shared class prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mel_bins: usize,
    pub frames: usize,
    /// Seed of the class prototypes shared across domains.
    pub prototype_seed: u64,
    pub scale: f64,
    pub offset: f64,
    pub noise: f64,
    /// Per-mel-bin gain applied before the affine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_emphasis: Option<Vec<f64>>,
    /// Weight of a class pattern that only this domain has.
    #[serde(default)]
    pub specific_weight: f64,
    #[serde(default)]
    pub specific_seed: u64,
    /// Class prototypes get a mean level drawn uniformly from
    /// `[-level_spread, level_spread]`, so classes differ in loudness.
    /// Shared by all domains generated from the same prototype seed.
    #[serde(default)]
    pub level_spread: f64,
    /// Per-mel-bin offset ramping linearly from `-tilt` on the lowest bin
    /// to `+tilt` on the highest, added after the affine.
    #[serde(default)]
    pub tilt: f64,
    pub task_kind: TaskKind,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mel_bins < 8 || self.frames < 8 {
            return Err(DilError::Config(format!(
                "synthetic domain '{}' needs at least 8x8 features, got {}x{}",
                self.name, self.mel_bins, self.frames
            )));
        }
        if self.n_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DilError::Config(format!(
                "synthetic domain '{}' needs classes and samples",
                self.name
            )));
        }
        if !(self.scale > 0.0)
            || !(self.noise >= 0.0)
            || !self.offset.is_finite()
            || !self.tilt.is_finite()
            || !(self.level_spread >= 0.0)
        {
            return Err(DilError::Config(format!(
                "synthetic domain '{}' needs scale > 0 and noise >= 0",
                self.name
            )));
        }
        if let Some(b) = &self.band_emphasis {
            if b.len() != self.mel_bins || b.iter().any(|g| !g.is_finite()) {
                return Err(DilError::Config(format!(
                    "band emphasis of '{}' must have {} finite gains",
                    self.name, self.mel_bins
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        class_names(self.n_classes)
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c:02}")).collect()
}

/// Gaussian bump of gain `gain` around mel bin `center`.
pub fn band_emphasis(mel_bins: usize, center: f64, width: f64, gain: f64) -> Vec<f64> {
    (0..mel_bins)
        .map(|f| {
            let z = (f as f64 - center) / width;
            1.0 + gain * (-0.5 * z * z).exp()
        })
        .collect()
}

/// Zero-mean, unit-variance field: a coarse Gaussian grid upsampled
/// bilinearly to `rows × cols`.
pub fn smooth_field<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    const GRID: usize = 5;
    let grid: Vec<f64> = (0..GRID * GRID)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let interp = |pos: usize, len: usize| {
        let x = pos as f64 * (GRID - 1) as f64 / (len - 1).max(1) as f64;
        let i = (x.floor() as usize).min(GRID - 2);
        (i, x - i as f64)
    };
    let mut field = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (i, fy) = interp(r, rows);
        for c in 0..cols {
            let (j, fx) = interp(c, cols);
            let g = |a: usize, b: usize| grid[a * GRID + b];
            let top = g(i, j) * (1.0 - fx) + g(i, j + 1) * fx;
            let bottom = g(i + 1, j) * (1.0 - fx) + g(i + 1, j + 1) * fx;
            field.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    field.iter().map(|v| (v - mean) / std.max(1e-12)).collect()
}

fn prototypes(seed: u64, n_classes: usize, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, c));
            smooth_field(rows, cols, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomain {
    pub spec: SyntheticDomainSpec,
    pub train: Dataset,
    pub test: Dataset,
}

/// Samples one domain. Each sample is its class prototype(s) plus the
/// domain-specific pattern and Gaussian noise, then passed through the
/// domain's band emphasis and affine. Multi-label samples superpose one
/// to three prototypes.
pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec, seed: u64) -> Result<SyntheticDomain> {
    spec.validate()?;
    let (rows, cols) = (spec.mel_bins, spec.frames);
    let mut shared = prototypes(spec.prototype_seed, spec.n_classes, rows, cols);
    if spec.level_spread > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(spec.prototype_seed, usize::MAX));
        for p in shared.iter_mut() {
            let level = spec.level_spread * rng.random_range(-1.0..=1.0);
            p.iter_mut().for_each(|v| *v += level);
        }
    }
    let specific = if spec.specific_weight != 0.0 {
        Some(prototypes(spec.specific_seed, spec.n_classes, rows, cols))
    } else {
        None
    };
    let emphasis = spec
        .band_emphasis
        .clone()
        .unwrap_or_else(|| vec![1.0; rows]);
    let bin_offset: Vec<f64> = (0..rows)
        .map(|f| spec.offset + spec.tilt * (2.0 * f as f64 / (rows - 1) as f64 - 1.0))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |classes: &[usize], rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut x = vec![0.0f64; rows * cols];
        for &c in classes {
            for (v, p) in x.iter_mut().zip(&shared[c]) {
                *v += p;
            }
            if let Some(sp) = &specific {
                for (v, p) in x.iter_mut().zip(&sp[c]) {
                    *v += spec.specific_weight * p;
                }
            }
        }
        if spec.noise > 0.0 {
            for v in x.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += spec.noise * n;
            }
        }
        x.iter()
            .enumerate()
            .map(|(k, &v)| (spec.scale * v * emphasis[k / cols] + bin_offset[k / cols]) as f32)
            .collect()
    };
    let fill = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut ds = Dataset::new(
            spec.name.clone(),
            rows,
            cols,
            spec.task_kind,
            spec.n_classes,
        );
        for c in 0..spec.n_classes {
            for _ in 0..per_class {
                let classes = match spec.task_kind {
                    TaskKind::SingleLabel => vec![c],
                    TaskKind::MultiLabel => {
                        let extra = rng.random_range(0..3usize).min(spec.n_classes - 1);
                        let mut others: Vec<usize> =
                            (0..spec.n_classes).filter(|&o| o != c).collect();
                        others.shuffle(rng);
                        let mut set = vec![c];
                        set.extend(&others[..extra]);
                        set.sort_unstable();
                        set
                    }
                };
                let x = draw(&classes, rng);
                ds.push(&x, classes)?;
            }
        }
        Ok(ds)
    };
    let train = fill(spec.train_per_class, &mut rng)?;
    let test = fill(spec.test_per_class, &mut rng)?;
    Ok(SyntheticDomain {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Writes one sample as a feature file.
pub fn write_features(path: &Path, mel_bins: usize, frames: usize, values: &[f32]) -> Result<()> {
    if values.len() != mel_bins * frames {
        return Err(DilError::Data(format!(
            "{} values do not fill {mel_bins}x{frames}",
            values.len()
        )));
    }
    let mut bytes = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    bytes.extend_from_slice(&(mel_bins as u32).to_le_bytes());
    bytes.extend_from_slice(&(frames as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| DilError::io(path, e))
}

/// Reads a feature file, returning `(mel_bins, frames, values)`.
pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| DilError::io(path, e))?;
    let bad = |why: &str| DilError::Data(format!("{}: {why}", path.display()));
    if bytes.len() < FEATURE_HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u16_at(4) != FEATURE_VERSION {
        return Err(bad("unsupported feature file version"));
    }
    if u16_at(6) != DTYPE_F32_LE {
        return Err(bad("unsupported dtype code"));
    }
    let (f, t) = (u32_at(8) as usize, u32_at(12) as usize);
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != 4 * f * t {
        return Err(bad("payload length does not match header dimensions"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((f, t, values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// 1-based line in the manifest file.
    pub line: usize,
    pub path: PathBuf,
    pub domain: String,
    /// Vocabulary indices.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

/// Parses a manifest: `path,domain,label[;label...]` per line, `#`
/// comments, paths relative to the manifest's directory.
pub fn load_manifest(path: &Path, vocabulary: &[String]) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| DilError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DilError::Data(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let err = |why: String| DilError::Data(format!("{}:{line}: {why}", path.display()));
        if row.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", row.len())));
        }
        let file = base.join(&row[0]);
        if !file.is_file() {
            return Err(err(format!(
                "feature file {} does not exist",
                file.display()
            )));
        }
        let labels = row[2]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                vocabulary
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| err(format!("unknown label '{name}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.is_empty() {
            return Err(err("record has no labels".into()));
        }
        if records.iter().any(|r: &ManifestRecord| r.path == file) {
            return Err(err(format!("duplicate path {}", &row[0])));
        }
        records.push(ManifestRecord {
            line,
            path: file,
            domain: row[1].to_string(),
            labels,
        });
    }
    if records.is_empty() {
        return Err(DilError::Data(format!(
            "{}: manifest is empty",
            path.display()
        )));
    }
    Ok(Manifest { records })
}

/// Loads one record's features as a 1×F×T tensor, checking its dimensions.
pub fn load_features(
    record: &ManifestRecord,
    mel_bins: usize,
    frames: usize,
) -> Result<Tensor<f32>> {
    let (f, t, values) = read_features(&record.path)?;
    if (f, t) != (mel_bins, frames) {
        return Err(DilError::Data(format!(
            "line {}: {} is {f}x{t}, expected {mel_bins}x{frames}",
            record.line,
            record.path.display()
        )));
    }
    Tensor::new(vec![1, f, t], values)
        .map_err(|_| DilError::Data(format!("line {}: non-finite features", record.line)))
}

/// Builds a dataset from the records of `domain`, translating vocabulary
/// labels into positions of `class_list`.
pub fn dataset_from_manifest(
    manifest: &Manifest,
    domain: &str,
    class_list: &[String],
    vocabulary: &[String],
    task_kind: TaskKind,
    mel_bins: usize,
    frames: usize,
) -> Result<Dataset> {
    let mut ds = Dataset::new(domain, mel_bins, frames, task_kind, class_list.len());
    for rec in manifest.records.iter().filter(|r| r.domain == domain) {
        let labels = rec
            .labels
            .iter()
            .map(|&v| {
                class_list
                    .iter()
                    .position(|c| *c == vocabulary[v])
                    .ok_or_else(|| {
                        DilError::Data(format!(
                            "line {}: label '{}' is not a class of domain '{domain}'",
                            rec.line, vocabulary[v]
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let x = load_features(rec, mel_bins, frames)?;
        ds.push(x.data(), labels)
            .map_err(|e| DilError::Data(format!("line {}: {e}", rec.line)))?;
    }
    if ds.is_empty() {
        return Err(DilError::Data(format!("no records for domain '{domain}'")));
    }
    Ok(ds)
}

/// Writes a split as feature files under `dir/<split>/` plus `dir/<split>.csv`.
pub fn write_split(
    dir: &Path,
    split: &str,
    ds: &Dataset,
    class_list: &[String],
) -> Result<PathBuf> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| DilError::io(&sub, e))?;
    let manifest_path = dir.join(format!("{split}.csv"));
    let mut manifest = String::from("# path,domain,labels\n");
    for i in 0..ds.len() {
        let rel = format!("{split}/{i:05}.dilf");
        write_features(&dir.join(&rel), ds.mel_bins, ds.frames, ds.sample(i))?;
        let labels: Vec<&str> = ds
            .labels(i)
            .iter()
            .map(|&l| class_list[l].as_str())
            .collect();
        manifest.push_str(&format!("{rel},{},{}\n", ds.name, labels.join(";")));
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| DilError::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| DilError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
