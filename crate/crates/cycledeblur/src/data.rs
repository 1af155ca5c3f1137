//! Dataset plumbing: manifest construction (pre-paired or synthesized),
//! train/test splitting, and batch iteration. Manifests are line-delimited
//! JSON so diffs stay reviewable, with a content hash for provenance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blur::{synth_pair, BlurError, NoiseSpec, TrajectoryParams};
use crate::img::{to_batch, Image, ImageError};
use crate::scalar::{derive_seed, Real};
use crate::trainer::{PairSource, TrainError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no images found in {0}")]
    EmptyDir(PathBuf),
    #[error("stem {stem:?} appears more than once ({a} and {b})")]
    Collision { stem: String, a: PathBuf, b: PathBuf },
    #[error("no blurred counterpart for {stem:?} in {dir}")]
    MissingPair { stem: String, dir: PathBuf },
    #[error("split wants {want} records but the manifest has {have}")]
    Insufficient { want: usize, have: usize },
    #[error("duplicate blur path {0}")]
    DuplicateBlurPath(String),
    #[error("split {0:?} has no records")]
    EmptySplit(Split),
    #[error("record {name:?}: {message}")]
    Record { name: String, message: String },
    #[error("manifest header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Blur(#[from] BlurError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One aligned pair. `source_id` is the shared file stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_id: String,
    pub sharp_path: PathBuf,
    pub blur_path: PathBuf,
    pub kernel_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    /// Target (height, width) applied at load time; None keeps native size.
    pub image_size: Option<(usize, usize)>,
    /// Hex digest of the synthesis configuration, when synthesis was used.
    pub synth_hash: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<PairRecord>,
}

/// Dataset-level synthesis settings. The per-item trajectory seed is
/// `seed ^ item_index`; the noise stream is derived from that item seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kernel_size: usize,
    pub noise_sigma: f64,
    pub trajectory: TrajectoryParams,
    pub seed: u64,
    pub resize: Option<(usize, usize)>,
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            kernel_size: 31,
            noise_sigma: 0.01,
            trajectory: TrajectoryParams::new(0),
            seed,
            resize: None,
        }
    }

    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const IMAGE_EXTS: [&str; 1] = ["png"];

/// Stem → path for every recognized image file, sorted by stem.
pub fn scan_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase);
        if !ext.as_deref().is_some_and(|e| IMAGE_EXTS.contains(&e)) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = found.get(&stem) {
            return Err(DataError::Collision {
                stem,
                a: prev.clone(),
                b: path,
            });
        }
        found.insert(stem, path);
    }
    if found.is_empty() {
        return Err(DataError::EmptyDir(dir.to_path_buf()));
    }
    Ok(found)
}

/// Where the blurred halves of the pairs come from.
pub enum BlurSource<'a> {
    /// Existing files pairing by stem.
    Paired { blur_dir: &'a Path },
    /// Generate blur and kernels under `root/blur` and `root/kernels`.
    /// Blur happens at native resolution; any configured resize applies
    /// when batches are loaded, to both halves of the pair.
    Synthesize { cfg: &'a SynthConfig, root: &'a Path },
}

pub fn build_manifest(sharp_dir: &Path, source: BlurSource<'_>) -> Result<Manifest, DataError> {
    let sharps = scan_images(sharp_dir)?;
    let mut records = Vec::with_capacity(sharps.len());
    let mut meta = ManifestMeta {
        image_size: None,
        synth_hash: None,
        n_train: sharps.len(),
        n_test: 0,
    };
    match source {
        BlurSource::Paired { blur_dir } => {
            let blurs = scan_images(blur_dir)?;
            for (stem, sharp_path) in sharps {
                let blur_path = blurs.get(&stem).ok_or_else(|| DataError::MissingPair {
                    stem: stem.clone(),
                    dir: blur_dir.to_path_buf(),
                })?;
                records.push(PairRecord {
                    source_id: stem,
                    sharp_path,
                    blur_path: blur_path.clone(),
                    kernel_path: None,
                    split: Split::Train,
                });
            }
        }
        BlurSource::Synthesize { cfg, root } => {
            meta.image_size = cfg.resize;
            meta.synth_hash = Some(cfg.hash_hex());
            let blur_dir = root.join("blur");
            let kernel_dir = root.join("kernels");
            fs::create_dir_all(&blur_dir)?;
            fs::create_dir_all(&kernel_dir)?;
            for (index, (stem, sharp_path)) in sharps.into_iter().enumerate() {
                let item_seed = cfg.seed ^ index as u64;
                let sharp = Image::<f64>::load(&sharp_path)?;
                let traj = TrajectoryParams {
                    seed: item_seed,
                    ..cfg.trajectory.clone()
                };
                let noise = NoiseSpec {
                    sigma: cfg.noise_sigma,
                    seed: derive_seed(item_seed, &[1]),
                };
                let (blurred, kernel) = synth_pair(&sharp, &traj, cfg.kernel_size, &noise)?;
                let blur_path = blur_dir.join(format!("{stem}.png"));
                blurred.save(&blur_path)?;
                let kernel_png = kernel_dir.join(format!("{stem}.png"));
                kernel.save_heatmap(&kernel_png)?;
                kernel.write_text(&kernel_dir.join(format!("{stem}.txt")))?;
                records.push(PairRecord {
                    source_id: stem,
                    sharp_path,
                    blur_path,
                    kernel_path: Some(kernel_png),
                    split: Split::Train,
                });
            }
        }
    }
    let manifest = Manifest { meta, records };
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.blur_path) {
                return Err(DataError::DuplicateBlurPath(
                    r.blur_path.display().to_string(),
                ));
            }
        }
        let n_train = self.count(Split::Train);
        let n_test = self.count(Split::Test);
        if n_train != self.meta.n_train || n_test != self.meta.n_test {
            return Err(DataError::BadHeader(format!(
                "header says {}/{} train/test, records have {}/{}",
                self.meta.n_train, self.meta.n_test, n_train, n_test
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn split_records(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Header line followed by one JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("meta serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| DataError::BadHeader("empty file".into()))??;
        let meta: ManifestMeta = serde_json::from_str(&header)
            .map_err(|e| DataError::BadHeader(e.to_string()))?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<PairRecord>(&line)?);
        }
        let manifest = Manifest { meta, records };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Digest of the serialized form.
    pub fn hash_hex(&self) -> String {
        hex_digest(self.to_jsonl().as_bytes())
    }
}

/// Seeded membership assignment: a shuffled selection takes the first
/// `n_train` records as train and the next `n_test` as test; everything else
/// is dropped. Surviving records keep their original manifest order.
pub fn split_manifest(
    m: &Manifest,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Manifest, DataError> {
    let total = n_train + n_test;
    if total > m.records.len() {
        return Err(DataError::Insufficient {
            want: total,
            have: m.records.len(),
        });
    }
    let mut order: Vec<usize> = (0..m.records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment: Vec<Option<Split>> = vec![None; m.records.len()];
    for &i in order.iter().take(n_train) {
        assignment[i] = Some(Split::Train);
    }
    for &i in order.iter().skip(n_train).take(n_test) {
        assignment[i] = Some(Split::Test);
    }
    let records: Vec<PairRecord> = m
        .records
        .iter()
        .zip(&assignment)
        .filter_map(|(r, a)| {
            a.map(|split| PairRecord {
                split,
                ..r.clone()
            })
        })
        .collect();
    let manifest = Manifest {
        meta: ManifestMeta {
            n_train,
            n_test,
            ..m.meta.clone()
        },
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn load_pair_chw<S: Real>(
    record: &PairRecord,
    size: Option<(usize, usize)>,
) -> Result<(Array3<S>, Array3<S>), DataError> {
    let wrap = |message: String| DataError::Record {
        name: record.source_id.clone(),
        message,
    };
    let mut blur = Image::<S>::load(&record.blur_path)
        .map_err(|e| wrap(format!("{}: {e}", record.blur_path.display())))?;
    let mut sharp = Image::<S>::load(&record.sharp_path)
        .map_err(|e| wrap(format!("{}: {e}", record.sharp_path.display())))?;
    if let Some((h, w)) = size {
        blur = blur.resize_bilinear(h, w).map_err(|e| wrap(e.to_string()))?;
        sharp = sharp.resize_bilinear(h, w).map_err(|e| wrap(e.to_string()))?;
    }
    if blur.dim() != sharp.dim() {
        return Err(wrap(format!(
            "blur {:?} vs sharp {:?}",
            blur.dim(),
            sharp.dim()
        )));
    }
    Ok((blur.normalize().to_chw(), sharp.normalize().to_chw()))
}

/// One loaded batch: `(n, 3, h, w)` tensors in [-1, 1] plus the manifest
/// indices that produced them.
#[derive(Debug)]
pub struct Batch<S: Real> {
    pub blur: ndarray::Array4<S>,
    pub sharp: ndarray::Array4<S>,
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a, S: Real> {
    manifest: &'a Manifest,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<S>,
}

/// Seeded per-epoch shuffle over one split; the final partial batch is
/// dropped so every batch has the same shape.
pub fn iterate_batches<S: Real>(
    m: &Manifest,
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchIter<'_, S>, DataError> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = m
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        manifest: m,
        order,
        batch_size,
        pos: 0,
        _marker: std::marker::PhantomData,
    })
}

impl<S: Real> Iterator for BatchIter<'_, S> {
    type Item = Result<Batch<S>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        let mut blurs = Vec::with_capacity(indices.len());
        let mut sharps = Vec::with_capacity(indices.len());
        for &i in &indices {
            match load_pair_chw::<S>(&self.manifest.records[i], self.manifest.meta.image_size) {
                Ok((b, s)) => {
                    blurs.push(crate::img::NormalizedImage::from_chw(b));
                    sharps.push(crate::img::NormalizedImage::from_chw(s));
                }
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(Batch {
            blur: to_batch(&blurs),
            sharp: to_batch(&sharps),
            indices,
        }))
    }
}

/// Disk-backed pair source for the trainer, restricted to one split.
pub struct DiskDataset<S: Real> {
    records: Vec<PairRecord>,
    size: Option<(usize, usize)>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Real> DiskDataset<S> {
    pub fn new(m: &Manifest, split: Split) -> Result<Self, DataError> {
        let records: Vec<PairRecord> = m
            .records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        Ok(Self {
            records,
            size: m.meta.image_size,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }
}

impl<S: Real> PairSource<S> for DiskDataset<S> {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn pair(&self, index: usize) -> Result<(Array3<S>, Array3<S>), TrainError> {
        load_pair_chw(&self.records[index], self.size).map_err(|e| TrainError::BadPair {
            index,
            message: e.to_string(),
        })
    }
}

/// Write `n` deterministic sharp test images (lattice texture plus seeded
/// noise) into `dir`, named `img_000.png` onward.
pub fn write_synthetic_sharp_corpus(
    dir: &Path,
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let phase_x = rng.gen_range(1..7usize);
        let phase_y = rng.gen_range(1..7usize);
        let mut data = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let lattice = ((x * phase_x + y * phase_y + c * 3) % 32) as f64 / 31.0;
                    let blob = ((x as f64 / width as f64) - 0.5).abs()
                        + ((y as f64 / height as f64) - 0.5).abs();
                    let noise = rng.gen::<f64>() * 0.08;
                    data[[y, x, c]] =
                        (0.15 + 0.55 * lattice + 0.2 * (1.0 - blob) + noise).clamp(0.0, 1.0);
                }
            }
        }
        let img = Image::new(data)?;
        let path = dir.join(format!("img_{i:03}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
