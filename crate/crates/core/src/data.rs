//! Synthetic bimodal tasks and the binary dataset file format.
//!
//! Each task draws an image class `a` (or two, for dual-image tasks) and a
//! text class `b` independently and uniformly, renders an image from the class
//! prototype plus Gaussian noise and a token sequence from the text class's
//! token block, and labels the pair with `(Σa + b) mod K`. Because the classes
//! are uniform and independent, the label is independent of either modality on
//! its own.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream, Rng};

/// Token id never emitted by the generator; used to blank out text.
pub const BLANK_TOKEN: u32 = 0;

pub const DATASET_MAGIC: &[u8; 8] = b"TAMCLDS\0";
pub const DATASET_VERSION: u32 = 1;

/// Row-major `H×W×C` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid_argument(format!(
                "image {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }
}

/// One labeled image-text pair (or image-image-text triple).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub second_image: Option<Image>,
    pub tokens: Vec<u32>,
    pub label: u32,
}

/// Parameters of one synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub label_count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    #[serde(default)]
    pub dual_image: bool,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Picks which library concepts play this task's classes.
    pub class_seed: u64,
    /// Size of the shared concept library the classes are drawn from.
    #[serde(default = "default_concepts")]
    pub concepts: usize,
    /// Seed of the concept library; tasks sharing it share image and token
    /// concepts.
    #[serde(default)]
    pub world_seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Offset and scale shift of the prototype statistics; 0 for in-domain.
    #[serde(default)]
    pub domain_shift: f64,
    /// Probability that a token is drawn from its class block rather than the
    /// whole vocabulary.
    pub token_purity: f64,
}

fn default_concepts() -> usize {
    8
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("{}.{field}", self.name),
                message,
            })
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", format!("`{}` is not a usable task name", self.name));
        }
        if self.label_count < 2 {
            return bad("label_count", format!("{} < 2", self.label_count));
        }
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.image_height == 0 || self.image_width == 0 {
            return bad(
                "patch_size",
                format!("image {}×{} not divisible by {p}", self.image_height, self.image_width),
            );
        }
        if self.channels == 0 {
            return bad("channels", "must be at least 1".into());
        }
        if self.concepts < self.label_count {
            return bad(
                "concepts",
                format!("{} concepts cannot cover {} classes", self.concepts, self.label_count),
            );
        }
        if self.vocab_size < self.concepts + 1 {
            return bad(
                "vocab_size",
                format!("{} cannot hold a token block per concept plus the blank token", self.vocab_size),
            );
        }
        if self.text_len_min > self.text_len_max || self.text_len_max == 0 {
            return bad(
                "text_len_max",
                format!("range {}..={} is empty", self.text_len_min, self.text_len_max),
            );
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train_samples", "both splits need samples".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("{} is not a valid std", self.noise));
        }
        if !(0.0..=1.0).contains(&self.token_purity) {
            return bad("token_purity", format!("{} outside [0, 1]", self.token_purity));
        }
        if !self.domain_shift.is_finite() {
            return bad("domain_shift", "must be finite".into());
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    pub fn images_per_sample(&self) -> usize {
        if self.dual_image {
            2
        } else {
            1
        }
    }
}

/// Which half of a task a dataset holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy with every token replaced by [`BLANK_TOKEN`].
    pub fn without_text(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.tokens.iter_mut().for_each(|t| *t = BLANK_TOKEN);
        }
        out
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.label_count];
        for s in &self.samples {
            h[s.label as usize] += 1;
        }
        h
    }
}

/// Class prototypes, token blocks and the pairing rule for one task.
///
/// Prototypes and token blocks come from a concept library shared by every
/// task with the same `world_seed`; the task's `class_seed` picks which
/// image and text concepts its classes use. Each concept has two image
/// views. Dual-image tasks show one image class through both views.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    spec: TaskSpec,
    /// `[view][class]`.
    prototypes: Vec<Vec<Vec<f64>>>,
    token_blocks: Vec<Vec<u32>>,
}

impl SyntheticGenerator {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.label_count;
        let c = spec.concepts;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut world = seeded(spec.world_seed, stream::PROTOTYPES);
        let library: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| {
                (0..c)
                    .map(|_| (0..spec.image_len()).map(|_| unit.sample(&mut world)).collect())
                    .collect()
            })
            .collect();
        let mut ids: Vec<u32> = (1..spec.vocab_size as u32).collect();
        ids.shuffle(&mut world);
        let block = ids.len() / c;

        let mut rng = seeded(spec.class_seed, stream::PROTOTYPES);
        let mut image_concepts: Vec<usize> = (0..c).collect();
        image_concepts.shuffle(&mut rng);
        let mut text_concepts: Vec<usize> = (0..c).collect();
        text_concepts.shuffle(&mut rng);

        let shift = spec.domain_shift;
        let views = spec.images_per_sample();
        let prototypes = library[..views]
            .iter()
            .map(|bank| {
                image_concepts[..k]
                    .iter()
                    .map(|&i| bank[i].iter().map(|x| shift + (1.0 + shift.abs()) * x).collect())
                    .collect()
            })
            .collect();
        let token_blocks = text_concepts[..k]
            .iter()
            .map(|&t| ids[t * block..(t + 1) * block].to_vec())
            .collect();
        Ok(SyntheticGenerator {
            spec: spec.clone(),
            prototypes,
            token_blocks,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// `(a + b) mod K`: a cyclic XOR, uniform in either class alone.
    pub fn pairing_rule(&self, image_class: usize, text_class: usize) -> usize {
        (image_class + text_class) % self.spec.label_count
    }

    fn render_image(&self, view: usize, class: usize, rng: &mut Rng) -> Image {
        let noise = Normal::new(0.0, self.spec.noise.max(0.0)).expect("finite noise");
        let data = self.prototypes[view][class]
            .iter()
            .map(|&p| if self.spec.noise > 0.0 { p + noise.sample(rng) } else { p })
            .collect();
        Image {
            height: self.spec.image_height,
            width: self.spec.image_width,
            channels: self.spec.channels,
            data,
        }
    }

    fn render_text(&self, class: usize, rng: &mut Rng) -> Vec<u32> {
        let len = rng.random_range(self.spec.text_len_min..=self.spec.text_len_max);
        let block = &self.token_blocks[class];
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < self.spec.token_purity {
                    block[rng.random_range(0..block.len())]
                } else {
                    rng.random_range(1..self.spec.vocab_size as u32)
                }
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        let k = self.spec.label_count;
        let image_class = rng.random_range(0..k);
        let text_class = rng.random_range(0..k);
        let image = self.render_image(0, image_class, rng);
        let second_image = self.spec.dual_image.then(|| self.render_image(1, image_class, rng));
        let tokens = self.render_text(text_class, rng);
        Sample {
            image,
            second_image,
            tokens,
            label: self.pairing_rule(image_class, text_class) as u32,
        }
    }
}

/// Train and test splits for one task; identical `(spec, seed)` give
/// identical datasets.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let gen = SyntheticGenerator::new(spec)?;
    let mut rng = seeded(seed ^ spec.class_seed.rotate_left(17), stream::DATA);
    let train = (0..spec.train_samples).map(|_| gen.sample(&mut rng)).collect();
    let test = (0..spec.test_samples).map(|_| gen.sample(&mut rng)).collect();
    Ok((
        Dataset {
            spec: spec.clone(),
            split: Split::Train,
            samples: train,
        },
        Dataset {
            spec: spec.clone(),
            split: Split::Test,
            samples: test,
        },
    ))
}

/// A named list of tasks with the seed used to draw their samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl SuiteSpec {
    /// Four tasks with 3, 2, 7 and 4 labels. The second takes two images;
    /// the fourth has shifted prototype statistics.
    pub fn default_suite() -> Self {
        let base = |name: &str, labels: usize, class_seed: u64| TaskSpec {
            name: name.to_string(),
            label_count: labels,
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            vocab_size: 64,
            text_len_min: 4,
            text_len_max: 8,
            dual_image: false,
            train_samples: 1000,
            test_samples: 300,
            class_seed,
            concepts: 8,
            world_seed: 7,
            noise: 0.5,
            domain_shift: 0.0,
            token_purity: 0.9,
        };
        let entail = base("entail3", 3, 11);
        let pairs = TaskSpec {
            dual_image: true,
            ..base("pairs2", 2, 23)
        };
        let qa = base("qa7", 7, 37);
        let path = TaskSpec {
            domain_shift: 1.5,
            ..base("path4", 4, 41)
        };
        SuiteSpec {
            seed: 2024,
            tasks: vec![entail, pairs, qa, path],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(&t.name) {
                return Err(Error::Config {
                    field: "tasks.name".into(),
                    message: format!("duplicate task `{}`", t.name),
                });
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Config {
                field: "tasks".into(),
                message: "no tasks".into(),
            });
        }
        Ok(())
    }
}

/// Shuffled index batches for one epoch. The last partial batch is kept.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One epoch of shuffled batches, deterministic in `seed`.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    epoch_batches(dataset.len(), batch_size, &mut seeded(seed, stream::SHUFFLE))
}

// ---------------------------------------------------------------------------
// File format

/// Encodes a dataset in the versioned little-endian format described in
/// `docs/FORMATS.md`.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let spec_json = serde_json::to_vec(&dataset.spec)?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(match dataset.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    for s in &dataset.samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        let n_images: u8 = if s.second_image.is_some() { 2 } else { 1 };
        out.push(n_images);
        out.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        for t in &s.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for img in std::iter::once(&s.image).chain(s.second_image.as_ref()) {
            for v in &img.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let split = match r.u8("split")? {
        0 => Split::Train,
        1 => Split::Test,
        other => {
            r.pos -= 1;
            return Err(r.err(format!("unknown split tag {other}")));
        }
    };
    let spec_len = r.u32("header length")? as usize;
    let spec_start = r.pos;
    let spec_bytes = r.take(spec_len, "header")?;
    let spec: TaskSpec = serde_json::from_slice(spec_bytes).map_err(|e| Error::Format {
        offset: spec_start as u64,
        message: format!("bad task header: {e}"),
    })?;
    spec.validate().map_err(|e| Error::Format {
        offset: spec_start as u64,
        message: format!("invalid task header: {e}"),
    })?;
    let count = r.u64("record count")? as usize;
    let image_len = spec.image_len();
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let at = r.pos;
        let label = r.u32("label")?;
        if label as usize >= spec.label_count {
            r.pos = at;
            return Err(r.err(format!("record {i}: label {label} ≥ {}", spec.label_count)));
        }
        let n_images = r.u8("image count")? as usize;
        if n_images != spec.images_per_sample() {
            r.pos -= 1;
            return Err(r.err(format!(
                "record {i}: {n_images} images, task expects {}",
                spec.images_per_sample()
            )));
        }
        let n_tokens = r.u32("token count")? as usize;
        if n_tokens > spec.text_len_max {
            r.pos -= 4;
            return Err(r.err(format!("record {i}: {n_tokens} tokens > {}", spec.text_len_max)));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let t = r.u32("token")?;
            if t as usize >= spec.vocab_size {
                r.pos -= 4;
                return Err(r.err(format!("record {i}: token {t} ≥ vocabulary {}", spec.vocab_size)));
            }
            tokens.push(t);
        }
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let data = r.f64s(image_len, "image")?;
            images.push(Image {
                height: spec.image_height,
                width: spec.image_width,
                channels: spec.channels,
                data,
            });
        }
        let second_image = if n_images == 2 { images.pop() } else { None };
        let image = images.pop().expect("at least one image");
        samples.push(Sample {
            image,
            second_image,
            tokens,
            label,
        });
    }
    r.finish()?;
    Ok(Dataset { spec, split, samples })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(dataset)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// One task's entry in a suite manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub label_count: usize,
    pub dual_image: bool,
    pub train: String,
    pub test: String,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

/// Human-readable sidecar listing the files of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format_version: u32,
    pub seed: u64,
    pub tasks: Vec<ManifestTask>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates every task of `suite` under `out_dir/<task>/{train,test}.bin`
/// and writes `out_dir/manifest.json`.
pub fn write_suite(suite: &SuiteSpec, out_dir: &Path) -> Result<SuiteManifest> {
    suite.validate()?;
    let mut tasks = Vec::new();
    for spec in &suite.tasks {
        let (train, test) = generate_task(spec, suite.seed).map_err(|e| e.for_task(&spec.name))?;
        let train_rel = format!("{}/train.bin", spec.name);
        let test_rel = format!("{}/test.bin", spec.name);
        save_dataset(&train, &out_dir.join(&train_rel))?;
        save_dataset(&test, &out_dir.join(&test_rel))?;
        tasks.push(ManifestTask {
            name: spec.name.clone(),
            label_count: spec.label_count,
            dual_image: spec.dual_image,
            train: train_rel,
            test: test_rel,
            train_pairs: train.len(),
            test_pairs: test.len(),
        });
    }
    let manifest = SuiteManifest {
        format_version: DATASET_VERSION,
        seed: suite.seed,
        tasks,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dual: bool) -> TaskSpec {
        TaskSpec {
            name: "tiny".into(),
            label_count: 3,
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            vocab_size: 16,
            text_len_min: 0,
            text_len_max: 4,
            dual_image: dual,
            train_samples: 20,
            test_samples: 7,
            class_seed: 5,
            concepts: 4,
            world_seed: 0,
            noise: 0.5,
            domain_shift: 0.0,
            token_purity: 0.9,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, _) = generate_task(&tiny(true), 9).unwrap();
        let (b, _) = generate_task(&tiny(true), 9).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        let (c, _) = generate_task(&tiny(true), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_have_requested_sizes_and_valid_records() {
        let (train, test) = generate_task(&tiny(false), 1).unwrap();
        assert_eq!((train.len(), test.len()), (20, 7));
        for s in train.samples.iter().chain(&test.samples) {
            assert!(s.label < 3);
            assert!(s.second_image.is_none());
            assert!(s.tokens.iter().all(|&t| t != BLANK_TOKEN && t < 16));
            assert!(s.tokens.len() <= 4);
        }
    }

    #[test]
    fn pairing_rule_depends_on_both_modalities() {
        let gen = SyntheticGenerator::new(&tiny(false)).unwrap();
        for a in 0..3 {
            let labels: std::collections::HashSet<_> = (0..3).map(|b| gen.pairing_rule(a, b)).collect();
            assert_eq!(labels.len(), 3);
        }
        for b in 0..3 {
            let labels: std::collections::HashSet<_> = (0..3).map(|a| gen.pairing_rule(a, b)).collect();
            assert_eq!(labels.len(), 3);
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let (train, _) = generate_task(&tiny(true), 3).unwrap();
        let bytes = encode_dataset(&train).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), train);

        let cut = &bytes[..bytes.len() - 5];
        match decode_dataset(cut) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 0 && message.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        match decode_dataset(&wrong) {
            Err(Error::Format { offset: 0, message }) => assert!(message.contains("TAMCLDS")),
            other => panic!("expected magic error, got {other:?}"),
        }

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(decode_dataset(&version), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn batches_cover_dataset_once() {
        let (train, _) = generate_task(&TaskSpec { train_samples: 10, ..tiny(false) }, 0).unwrap();
        let b = batches(&train, 4, 77).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(&train, 4, 77).unwrap());
        assert!(batches(&train, 0, 1).is_err());
    }

    #[test]
    fn spec_validation_names_the_field() {
        let bad = TaskSpec { image_height: 5, ..tiny(false) };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "tiny.patch_size"),
            other => panic!("{other:?}"),
        }
        let bad = TaskSpec { label_count: 1, ..tiny(false) };
        assert!(bad.validate().is_err());
        assert!(SuiteSpec::default_suite().validate().is_ok());
    }
}
