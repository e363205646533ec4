//! Few-shot datasets: synthetic generation, binary I/O, folds and episodes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

pub const FSDS_MAGIC: [u8; 4] = *b"FSDS";
pub const FSDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4 + 1;
const SPLIT_SALT: u64 = 0x5eed_5917;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train = 0,
    Val = 1,
    Test = 2,
    All = 3,
}

impl SplitTag {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => SplitTag::Train,
            1 => SplitTag::Val,
            2 => SplitTag::Test,
            3 => SplitTag::All,
            other => return Err(Error::Config(format!("unknown split tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_level: f32,
    pub transform_jitter: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 50,
            samples_per_class: 40,
            channels: 3,
            height: 16,
            width: 16,
            noise_level: 0.8,
            transform_jitter: 0.35,
        }
    }
}

/// Images of one split, stored class-major then sample-major in CHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: SplitTag,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Original class id of each local class (dense ids within a split).
    pub class_ids: Vec<usize>,
    pub seed: Option<u64>,
    data: Arc<Vec<f32>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: SplitTag,
        [num_classes, samples_per_class, channels, height, width]: [usize; 5],
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != num_classes * samples_per_class * channels * height * width {
            return Err(Error::Shape(format!(
                "dataset payload has {} values",
                data.len()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            num_classes,
            samples_per_class,
            channels,
            height,
            width,
            class_ids: (0..num_classes).collect(),
            seed: None,
            data: Arc::new(data),
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, class: usize, index: usize) -> &[f32] {
        let n = self.image_len();
        let at = (class * self.samples_per_class + index) * n;
        &self.data[at..at + n]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn pool(&self) -> ClassPool {
        ClassPool {
            members: vec![(0..self.samples_per_class).collect(); self.num_classes],
        }
    }

    /// Keep the listed classes (renumbered densely in the given order).
    pub fn subset(&self, classes: &[usize], split: SplitTag) -> Dataset {
        let mut data =
            Vec::with_capacity(classes.len() * self.samples_per_class * self.image_len());
        for &c in classes {
            for i in 0..self.samples_per_class {
                data.extend_from_slice(self.image(c, i));
            }
        }
        Dataset {
            name: self.name.clone(),
            split,
            num_classes: classes.len(),
            samples_per_class: self.samples_per_class,
            channels: self.channels,
            height: self.height,
            width: self.width,
            class_ids: classes.iter().map(|&c| self.class_ids[c]).collect(),
            seed: self.seed,
            data: Arc::new(data),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Class-disjoint 60/20/20 split under a seeded class permutation.
    pub fn from_dataset(all: &Dataset, seed: u64) -> Result<Self> {
        let n = all.num_classes;
        let n_train = n * 3 / 5;
        let n_val = n / 5;
        if n_train == 0 || n_val == 0 || n - n_train - n_val == 0 {
            return Err(Error::Config(format!(
                "{n} classes cannot be split 60/20/20"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let (tr, rest) = order.split_at(n_train);
        let (va, te) = rest.split_at(n_val);
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        Ok(Splits {
            train: all.subset(&sorted(tr), SplitTag::Train),
            val: all.subset(&sorted(va), SplitTag::Val),
            test: all.subset(&sorted(te), SplitTag::Test),
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_dataset(&self.train, &dir.join("train.fsds"))?;
        save_dataset(&self.val, &dir.join("val.fsds"))?;
        save_dataset(&self.test, &dir.join("test.fsds"))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Splits {
            train: load_dataset(&dir.join("train.fsds"))?,
            val: load_dataset(&dir.join("val.fsds"))?,
            test: load_dataset(&dir.join("test.fsds"))?,
        })
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    sx: f32,
    sy: f32,
    color: Vec<f32>,
}

/// Generate all classes (split tag `All`) from `spec` and `seed`.
pub fn synth_all(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let dims = [
        spec.num_classes,
        spec.samples_per_class,
        spec.channels,
        spec.height,
        spec.width,
    ];
    if dims.contains(&0) || spec.noise_level < 0.0 || spec.transform_jitter < 0.0 {
        return Err(Error::Config(format!(
            "synthetic spec must be positive: {spec:?}"
        )));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut data = Vec::with_capacity(dims.iter().product());
    for class in 0..spec.num_classes {
        let mut trng = ChaCha8Rng::seed_from_u64(seed);
        trng.set_stream(class as u64 * 2);
        let blobs: Vec<Blob> = (0..trng.random_range(2..=4))
            .map(|_| Blob {
                cx: trng.random_range(0.2..0.8),
                cy: trng.random_range(0.2..0.8),
                sx: trng.random_range(0.08..0.25),
                sy: trng.random_range(0.08..0.25),
                color: (0..c).map(|_| trng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        srng.set_stream(class as u64 * 2 + 1);
        for _ in 0..spec.samples_per_class {
            let j = spec.transform_jitter;
            let (dx, dy) = (
                srng.random_range(-1.0..=1.0) * j,
                srng.random_range(-1.0..=1.0) * j,
            );
            let scale = 1.0 + srng.random_range(-1.0..=1.0) * j;
            let theta = srng.random_range(-1.0..=1.0) * j * std::f32::consts::PI;
            let (sin, cos) = theta.sin_cos();
            let mut img = vec![0.0f32; c * h * w];
            for y in 0..h {
                for x in 0..w {
                    // inverse affine map about the image centre
                    let u = (x as f32 + 0.5) / w as f32 - 0.5 - dx;
                    let v = (y as f32 + 0.5) / h as f32 - 0.5 - dy;
                    let pu = (cos * u + sin * v) / scale + 0.5;
                    let pv = (-sin * u + cos * v) / scale + 0.5;
                    for b in &blobs {
                        let e = (-((pu - b.cx) / b.sx).powi(2) / 2.0
                            - ((pv - b.cy) / b.sy).powi(2) / 2.0)
                            .exp();
                        for ch in 0..c {
                            img[(ch * h + y) * w + x] += b.color[ch] * e;
                        }
                    }
                }
            }
            if spec.noise_level > 0.0 {
                for v in &mut img {
                    let n: f32 = StandardNormal.sample(&mut srng);
                    *v += spec.noise_level * n;
                }
            }
            data.extend(img);
        }
    }
    let mut ds = Dataset::new("synth", SplitTag::All, dims, data)?;
    ds.seed = Some(seed);
    Ok(ds)
}

/// Synthetic dataset, split class-disjointly 60/20/20.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Splits> {
    Splits::from_dataset(&synth_all(spec, seed)?, seed)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.data.len() * 4);
    out.extend_from_slice(&FSDS_MAGIC);
    for v in [
        FSDS_VERSION as usize,
        ds.num_classes,
        ds.samples_per_class,
        ds.channels,
        ds.height,
        ds.width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(ds.split as u8);
    for v in ds.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8], name: &str) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the magic",
            bytes.len()
        )));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != FSDS_MAGIC {
        return Err(Error::BadMagic {
            expected: FSDS_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != FSDS_VERSION {
        return Err(Error::Version {
            expected: FSDS_VERSION,
            found: word(0),
        });
    }
    let dims = [1, 2, 3, 4, 5].map(|i| word(i) as usize);
    let split = SplitTag::from_u8(bytes[HEADER_LEN - 1])?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let payload = &bytes[HEADER_LEN..];
    if count.and_then(|c| c.checked_mul(4)) != Some(payload.len()) {
        return Err(Error::Truncated(format!(
            "header declares {dims:?} but payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(name, split, dims, data)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    decode_dataset(&fs::read(path)?, name)
}

/// Per class, the sample indices available for sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPool {
    pub members: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn contains(&self, r: &SampleRef) -> bool {
        self.members
            .get(r.class)
            .is_some_and(|m| m.contains(&r.index))
    }

    pub fn len(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint per-class halves of the meta-training samples.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train_w: ClassPool,
    pub train_alpha: ClassPool,
    pub ratio: f32,
    pub seed: u64,
}

impl FoldSplit {
    pub fn new(pool: &ClassPool, ratio: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::new();
        let mut a = Vec::new();
        for (c, members) in pool.members.iter().enumerate() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            let cut =
                ((m.len() as f32 * ratio).round() as usize).clamp(1, m.len().saturating_sub(1));
            if m.len() < 2 {
                return Err(Error::Precondition(format!(
                    "class {c} has {} samples; cannot fold",
                    m.len()
                )));
            }
            let (x, y) = m.split_at(cut);
            let (mut x, mut y) = (x.to_vec(), y.to_vec());
            x.sort_unstable();
            y.sort_unstable();
            w.push(x);
            a.push(y);
        }
        Ok(FoldSplit {
            train_w: ClassPool { members: w },
            train_alpha: ClassPool { members: a },
            ratio,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub class: usize,
    pub index: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Chosen dataset classes, ascending; label l is `classes[l]`.
    pub classes: Vec<usize>,
    pub support: Vec<SampleRef>,
    pub support_labels: Vec<usize>,
    pub query: Vec<SampleRef>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn sample_ids(&self) -> impl Iterator<Item = &SampleRef> {
        self.support.iter().chain(&self.query)
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    pool: &ClassPool,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let eligible: Vec<usize> = (0..pool.members.len())
        .filter(|&c| pool.members[c].len() >= shot + query)
        .collect();
    if way == 0 || shot == 0 {
        return Err(Error::Precondition("episodes need N ≥ 1 and K ≥ 1".into()));
    }
    if eligible.len() < way {
        return Err(Error::Precondition(format!(
            "{} classes have ≥{} samples, {way} needed",
            eligible.len(),
            shot + query
        )));
    }
    let mut classes: Vec<usize> = sample(rng, eligible.len(), way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    classes.sort_unstable();
    let mut ep = Episode {
        way,
        shot,
        query_per_class: query,
        classes: classes.clone(),
        support: Vec::with_capacity(way * shot),
        support_labels: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * query),
        query_labels: Vec::with_capacity(way * query),
    };
    for (label, &c) in classes.iter().enumerate() {
        let members = &pool.members[c];
        let picks = sample(rng, members.len(), shot + query).into_vec();
        for (n, p) in picks.into_iter().enumerate() {
            let r = SampleRef {
                class: c,
                index: members[p],
                flipped: false,
            };
            if n < shot {
                ep.support.push(r);
                ep.support_labels.push(label);
            } else {
                ep.query.push(r);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}

/// Append the mirror image of every support sample.
pub fn hflip_augment(ep: &Episode) -> Episode {
    let mut out = ep.clone();
    out.support.extend(ep.support.iter().map(|r| SampleRef {
        flipped: !r.flipped,
        ..*r
    }));
    out.support_labels.extend_from_slice(&ep.support_labels);
    out
}

/// Fold hygiene: every sample of `ep` must come from `pool`.
pub fn check_fold(ep: &Episode, pool: &ClassPool) -> Result<()> {
    match ep.sample_ids().find(|r| !pool.contains(r)) {
        Some(r) => Err(Error::Precondition(format!(
            "sample {r:?} is outside the fold"
        ))),
        None => Ok(()),
    }
}

/// Anything that can produce a per-sample tensor for a [`SampleRef`].
pub trait SampleSource {
    fn item_shape(&self) -> Vec<usize>;
    fn write_item(&self, r: &SampleRef, out: &mut Vec<f32>);
}

impl SampleSource for Dataset {
    fn item_shape(&self) -> Vec<usize> {
        self.image_shape().to_vec()
    }

    fn write_item(&self, r: &SampleRef, out: &mut Vec<f32>) {
        let img = self.image(r.class, r.index);
        if r.flipped {
            out.extend(kernels::hflip(img, self.channels, self.height, self.width));
        } else {
            out.extend_from_slice(img);
        }
    }
}

/// Support rows followed by query rows, ready for one forward pass.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub inputs: Tensor,
    pub support_len: usize,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub way: usize,
}

impl EpisodeBatch {
    pub fn new<S: SampleSource + ?Sized>(ep: &Episode, src: &S) -> Result<Self> {
        let refs: Vec<&SampleRef> = ep.sample_ids().collect();
        let mut data = Vec::new();
        for r in &refs {
            src.write_item(r, &mut data);
        }
        let mut shape = vec![refs.len()];
        shape.extend(src.item_shape());
        Ok(EpisodeBatch {
            inputs: Tensor::new(&shape, data)?,
            support_len: ep.support.len(),
            support_labels: ep.support_labels.clone(),
            query_labels: ep.query_labels.clone(),
            way: ep.way,
        })
    }

    pub fn support_rows(&self) -> Vec<usize> {
        (0..self.support_len).collect()
    }

    pub fn query_rows(&self) -> Vec<usize> {
        (self.support_len..self.inputs.shape()[0]).collect()
    }
}

/// Distinct-sample fingerprint used by the sampling-diversity checks.
pub fn support_set(ep: &Episode) -> HashSet<SampleRef> {
    ep.support.iter().copied().collect()
}
