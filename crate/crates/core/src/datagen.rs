//! Corpora, augmentation and the dataset container.
//!
//! "Real" images are Gaussian random fields: white noise blurred with a
//! periodic Gaussian kernel of random width, min-max rescaled to `[-1, 1]`.
//! "Fake" images are deterministic samples of a trained denoiser.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! "DDFD", version u32, n u32, C u32, H u32, W u32,
//! n·C·H·W f32 image values, n u8 labels,
//! n × (u32 length + UTF-8 generator tag), u32 length + UTF-8 split name
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, NoisePredictor, NoiseSchedule, StepPlan};
use crate::error::{Error, Result};
use crate::forensics::{DireSample, LABEL_FAKE, LABEL_REAL};
use crate::numerics::checkpoint::Cursor;
use crate::numerics::{Array, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"DDFD";
pub const DATASET_VERSION: u32 = 1;
pub const REAL_TAG: &str = "real-grf";
pub const UNSEEN_PREFIX: &str = "unseen:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!("unknown split {other:?}"))),
        }
    }
}

pub fn is_unseen_tag(tag: &str) -> bool {
    tag.starts_with(UNSEEN_PREFIX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Array>,
    labels: Vec<u8>,
    gen_tags: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn empty(split: Split) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            gen_tags: Vec::new(),
            split,
        }
    }

    pub fn push(&mut self, image: Array, label: u8, tag: impl Into<String>) -> Result<()> {
        image.chw()?;
        if let Some(first) = self.images.first() {
            first.expect_same_shape(&image, "dataset image")?;
        }
        if label > 1 {
            return Err(Error::invalid(format!("label {label} is not 0/1")));
        }
        if let Some(v) = image.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        self.images.push(image);
        self.labels.push(label);
        self.gen_tags.push(tag.into());
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        for i in 0..other.len() {
            self.push(other.images[i].clone(), other.labels[i], other.gen_tags[i].clone())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Array] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn gen_tags(&self) -> &[String] {
        &self.gen_tags
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Count of images per generator tag.
    pub fn composition(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for t in &self.gen_tags {
            *m.entry(t.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Rows whose tag satisfies `keep`, same split.
    pub fn filter(&self, keep: impl Fn(&str, u8) -> bool) -> Dataset {
        let mut out = Dataset::empty(self.split);
        for i in 0..self.len() {
            if keep(&self.gen_tags[i], self.labels[i]) {
                out.images.push(self.images[i].clone());
                out.labels.push(self.labels[i]);
                out.gen_tags.push(self.gen_tags[i].clone());
            }
        }
        out
    }

    /// A training split may never contain an unseen generator.
    pub fn check_split_hygiene(&self) -> Result<()> {
        if self.split == Split::Train {
            if let Some(t) = self.gen_tags.iter().find(|t| is_unseen_tag(t)) {
                return Err(Error::invalid(format!(
                    "unseen generator {t:?} present in the training split"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::invalid("cannot serialize an empty dataset"))?;
        let (c, h, w) = first.chw()?;
        let mut out = Vec::with_capacity(24 + self.len() * (c * h * w * 4 + 16));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, self.len() as u32, c as u32, h as u32, w as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for img in &self.images {
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.labels);
        let mut put_str = |s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for t in &self.gen_tags {
            put_str(t);
        }
        put_str(&self.split.to_string());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, "dataset");
        let magic = cur.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::format(format!(
                "bad dataset magic {:?}, expected \"DDFD\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!(
                "dataset version {version} is not supported (expected {DATASET_VERSION})"
            )));
        }
        let n = cur.u32()? as usize;
        let (c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        let per = c * h * w;
        let mut images = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let data = (0..per).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
            images.push(Array::new(&[c, h, w], data)?);
        }
        let labels = cur.take(n)?.to_vec();
        let get_str = |cur: &mut Cursor| -> Result<String> {
            let len = cur.u32()? as usize;
            String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::format("generator tag is not UTF-8"))
        };
        let gen_tags = (0..n).map(|_| get_str(&mut cur)).collect::<Result<Vec<_>>>()?;
        let split: Split = get_str(&mut cur)?.parse()?;
        if !cur.is_at_end() {
            return Err(Error::format("trailing bytes after dataset"));
        }
        let mut ds = Dataset::empty(split);
        for ((img, label), tag) in images.into_iter().zip(labels).zip(gen_tags) {
            ds.push(img, label, tag)?;
        }
        Ok(ds)
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

fn blur_periodic(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let n = size as isize;
    let wrap = |i: isize| i.rem_euclid(n) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * src[y * size + wrap(x as isize + d)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = (-radius..=radius)
                .zip(&kernel)
                .map(|(d, k)| k * tmp[wrap(y as isize + d) * size + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Parameters of the procedural "real" textures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    /// Blur width is drawn uniformly from `[sigma_min, sigma_max]` per image.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Standard deviation of white grain added after rescaling.
    pub grain_std: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1.5,
            sigma_max: 3.0,
            grain_std: 0.1,
        }
    }
}

impl TextureConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.grain_std >= 0.0) {
            return Err(Error::invalid(format!("bad texture config {self:?}")));
        }
        Ok(())
    }
}

/// One random-field texture, determined by `(seed, index)`: blurred white
/// noise min-max rescaled to `[-1, 1]`, plus optional grain, clipped back
/// into `[-1, 1]`.
pub fn real_image(seed: u64, index: u64, size: usize, tex: &TextureConfig) -> Array {
    let mut rng = Rng::new(seed, index);
    let sigma = tex.sigma_min + (tex.sigma_max - tex.sigma_min) * rng.uniform();
    let noise: Vec<f64> = (0..size * size).map(|_| rng.normal()).collect();
    let field = blur_periodic(&noise, size, sigma);
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    let data = field
        .iter()
        .map(|&v| {
            let grain = if tex.grain_std > 0.0 { tex.grain_std * rng.normal() } else { 0.0 };
            ((2.0 * (v - lo) / span - 1.0 + grain) as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Array::new(&[1, size, size], data).expect("square image")
}

/// `n` procedural "real" images; image `i` uses stream `first_index + i`.
pub fn gen_real(
    n: usize,
    size: usize,
    tex: &TextureConfig,
    seed: u64,
    first_index: u64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_real needs n >= 1"));
    }
    if ![8, 16, 32].contains(&size) {
        return Err(Error::invalid(format!("image size {size} not in {{8, 16, 32}}")));
    }
    tex.validate()?;
    let mut ds = Dataset::empty(split);
    for i in 0..n as u64 {
        ds.push(real_image(seed, first_index + i, size, tex), LABEL_REAL, REAL_TAG)?;
    }
    Ok(ds)
}

/// A sampling process that produces fake images.
pub struct FakeSource<'a> {
    pub model: &'a dyn NoisePredictor,
    pub sched: &'a NoiseSchedule,
    pub plan: StepPlan,
    pub tag: String,
}

/// Tag for a generator: checkpoint identity plus step count.
pub fn generator_tag(model_id: &str, steps: usize) -> String {
    let short: String = model_id.chars().take(8).collect();
    format!("ddim-s{steps}-{short}")
}

/// `n` deterministic samples from unit-Gaussian latents, clipped to `[-1, 1]`.
pub fn gen_fake(src: &FakeSource, n: usize, channels: usize, size: usize, seed: u64, split: Split) -> Result<Dataset> {
    let mut ds = Dataset::empty(split);
    for i in 0..n as u64 {
        let mut rng = Rng::new(seed, i);
        let xt: Array = rng.normal_array(&[channels, size, size]);
        let x = ddim_sample(src.model, src.sched, &src.plan, &xt)?;
        ds.push(x.map(|v| v.clamp(-1.0, 1.0)), LABEL_FAKE, src.tag.clone())?;
    }
    Ok(ds)
}

/// Fakes from generators held out of training. Needs at least two sources;
/// every tag gets the unseen prefix.
pub fn gen_unseen_fake(
    sources: &[FakeSource],
    n_each: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if sources.len() < 2 {
        return Err(Error::invalid("unseen generation needs at least two generator variants"));
    }
    let mut ds = Dataset::empty(Split::Test);
    for (k, src) in sources.iter().enumerate() {
        let tag = if is_unseen_tag(&src.tag) {
            src.tag.clone()
        } else {
            format!("{UNSEEN_PREFIX}{}", src.tag)
        };
        let part = gen_fake(
            &FakeSource {
                model: src.model,
                sched: src.sched,
                plan: src.plan.clone(),
                tag,
            },
            n_each,
            channels,
            size,
            seed.wrapping_add(1000 * k as u64 + 1),
            Split::Test,
        )?;
        ds.extend(&part)?;
    }
    Ok(ds)
}

/// Bilinear resize of a `C×H×W` image (align-corners convention).
pub fn resize_bilinear(img: &Array, out_h: usize, out_w: usize) -> Result<Array> {
    let (c, h, w) = img.chw()?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let coord = |o: usize, n_out: usize, n_in: usize| {
        if n_out == 1 {
            0.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = coord(oy, out_h, h);
            let (y0, dy) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..out_w {
                let fx = coord(ox, out_w, w);
                let (x0, dx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let v = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = v(y0, x0) * (1.0 - dx) + v(y0, x1) * dx;
                let bot = v(y1, x0) * (1.0 - dx) + v(y1, x1) * dx;
                data.push((top * (1.0 - dy) + bot * dy) as f32);
            }
        }
    }
    Array::new(&[c, out_h, out_w], data)
}

/// Central `size×size` crop; identity when the image already has that size.
pub fn center_crop(img: &Array, size: usize) -> Result<Array> {
    let (c, h, w) = img.chw()?;
    if size > h || size > w {
        return Err(Error::shape(format!("cannot crop {h}×{w} to {size}")));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let row = ch * h * w + (oy + y) * w + ox;
            data.extend_from_slice(&img.data()[row..row + size]);
        }
    }
    Array::new(&[c, size, size], data)
}

/// Reads every `*.txt` file in `dir` as one single-channel image: rows on
/// lines, values separated by whitespace or commas, all in `[-1, 1]`.
/// Images are resized to `size×size`. Files are taken in name order.
pub fn import_plain_dir(dir: &Path, size: usize, label: u8, tag: &str, split: Split) -> Result<Dataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .txt images in {}", dir.display())));
    }
    let mut ds = Dataset::empty(split);
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let rows: Vec<Vec<f32>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f32>()
                            .map_err(|_| Error::format(format!("{}: bad number {s:?}", p.display())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let w = rows.first().map(Vec::len).unwrap_or(0);
        if w == 0 || rows.iter().any(|r| r.len() != w) {
            return Err(Error::format(format!("{}: ragged or empty rows", p.display())));
        }
        let h = rows.len();
        let img = Array::new(&[1, h, w], rows.concat())?;
        ds.push(resize_bilinear(&img, size, size)?, label, tag)?;
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub normalize_image: bool,
    pub normalize_noise: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            normalize_image: true,
            normalize_noise: false,
        }
    }
}

impl AugmentConfig {
    /// Evaluation-time variant: normalization only, never flip.
    pub fn eval(&self) -> Self {
        Self {
            hflip_prob: 0.0,
            ..*self
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(arrays: impl IntoIterator<Item = &'a Array>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, f64)> = Vec::new();
        for a in arrays {
            let (c, h, w) = a.chw()?;
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0.0); c];
            } else if sums.len() != c {
                return Err(Error::shape("channel count differs across samples"));
            }
            let plane = h * w;
            for (ch, s) in sums.iter_mut().enumerate() {
                for &v in &a.data()[ch * plane..(ch + 1) * plane] {
                    s.0 += 1.0;
                    s.1 += v as f64;
                    s.2 += (v as f64) * (v as f64);
                }
            }
        }
        if sums.is_empty() {
            return Err(Error::invalid("cannot fit statistics on zero samples"));
        }
        let (mean, std) = sums
            .iter()
            .map(|&(n, s, ss)| {
                let m = s / n;
                let var = (ss / n - m * m).max(0.0);
                (m as f32, (var.sqrt().max(1e-6)) as f32)
            })
            .unzip();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, a: &Array) -> Result<Array> {
        let (c, h, w) = a.chw()?;
        if c != self.mean.len() {
            return Err(Error::shape(format!("{c} channels vs {} statistics", self.mean.len())));
        }
        let plane = h * w;
        let mut out = a.clone();
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            out.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

/// Standardization statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub image: ChannelStats,
    pub dire: ChannelStats,
    pub eps0: ChannelStats,
}

impl Normalizer {
    pub fn fit(train: &[DireSample]) -> Result<Self> {
        Ok(Self {
            image: ChannelStats::fit(train.iter().map(|s| &s.x0))?,
            dire: ChannelStats::fit(train.iter().map(|s| &s.dire))?,
            eps0: ChannelStats::fit(train.iter().map(|s| &s.eps0))?,
        })
    }
}

/// Model-ready views of a sample after augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub x0: Array,
    pub dire: Array,
    pub eps0: Array,
    pub label: u8,
}

/// Draws one flip decision from `rng` and applies [`augment_with_flip`].
pub fn augment(sample: &DireSample, cfg: &AugmentConfig, norm: &Normalizer, rng: &mut Rng) -> Result<PreparedSample> {
    let flip = cfg.hflip_prob > 0.0 && rng.bernoulli(cfg.hflip_prob);
    augment_with_flip(sample, flip, cfg, norm)
}

/// One flip decision shared by image, reconstruction error and noise;
/// standardization of the image and reconstruction error only, unless
/// `normalize_noise` is set.
pub fn augment_with_flip(sample: &DireSample, flip: bool, cfg: &AugmentConfig, norm: &Normalizer) -> Result<PreparedSample> {
    if !(0.0..=1.0).contains(&cfg.hflip_prob) {
        return Err(Error::invalid(format!("hflip_prob {} outside [0, 1]", cfg.hflip_prob)));
    }
    let f = |a: &Array| if flip { a.hflip() } else { a.clone() };
    let (mut x0, mut dire, mut eps0) = (f(&sample.x0), f(&sample.dire), f(&sample.eps0));
    if cfg.normalize_image {
        x0 = norm.image.apply(&x0)?;
        dire = norm.dire.apply(&dire)?;
    }
    if cfg.normalize_noise {
        eps0 = norm.eps0.apply(&eps0)?;
    }
    Ok(PreparedSample {
        x0,
        dire,
        eps0,
        label: sample.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_linear_schedule, make_step_plan, ConstantPredictor};

    #[test]
    fn real_images_are_bounded_and_seeded() {
        let a = gen_real(20, 16, &TextureConfig::default(), 3, 0, Split::Train).unwrap();
        let b = gen_real(20, 16, &TextureConfig::default(), 3, 0, Split::Train).unwrap();
        assert_eq!(a, b);
        for img in a.images() {
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(gen_real(1, 12, &TextureConfig::default(), 0, 0, Split::Train).is_err());
    }

    #[test]
    fn real_corpus_is_centered() {
        let ds = gen_real(1000, 16, &TextureConfig::default(), 11, 0, Split::Train).unwrap();
        let mean: f64 = ds.images().iter().map(|i| i.mean() as f64).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.05, "corpus mean {mean}");
    }

    #[test]
    fn fake_tags_and_clipping() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let big = ConstantPredictor(-3.0);
        let src = FakeSource {
            model: &big,
            sched: &s,
            plan: make_step_plan(10, 5).unwrap(),
            tag: generator_tag("abcdef0123", 5),
        };
        let ds = gen_fake(&src, 4, 1, 8, 0, Split::Test).unwrap();
        assert_eq!(ds.gen_tags()[0], "ddim-s5-abcdef01");
        assert_ne!(ds.gen_tags()[0], REAL_TAG);
        assert!(ds.labels().iter().all(|&l| l == LABEL_FAKE));
        assert!(ds.images().iter().all(|i| i.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn unseen_generation_needs_two_variants() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let p = ConstantPredictor(0.1);
        let mk = |steps, tag: &str| FakeSource {
            model: &p,
            sched: &s,
            plan: make_step_plan(10, steps).unwrap(),
            tag: tag.into(),
        };
        assert!(gen_unseen_fake(&[mk(5, "a")], 2, 1, 8, 0).is_err());
        let ds = gen_unseen_fake(&[mk(5, "a"), mk(2, "b")], 3, 1, 8, 0).unwrap();
        let comp = ds.composition();
        assert_eq!(comp.len(), 2);
        assert!(comp.keys().all(|k| is_unseen_tag(k)));

        let train = ds.clone().with_split(Split::Train);
        assert!(train.check_split_hygiene().is_err());
        assert!(ds.check_split_hygiene().is_ok());
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let mut ds = gen_real(3, 8, &TextureConfig::default(), 1, 0, Split::Val).unwrap();
        ds.push(Array::full(&[1, 8, 8], 0.25), LABEL_FAKE, "ddim-s20-x").unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(Dataset::from_bytes(&bad).unwrap_err().to_string().contains("DDFD"));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        let msg = Dataset::from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");

        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut ds = Dataset::empty(Split::Train);
        assert!(ds.push(Array::full(&[1, 2, 2], 1.5), 0, "x").is_err());
    }

    fn sample() -> DireSample {
        let x0 = real_image(0, 0, 8, &TextureConfig::default());
        let dire = x0.map(|v| v.abs() * 0.1);
        let eps0 = x0.map(|v| 2.0 * v + 0.3);
        DireSample::new(x0, dire, eps0, 1, "t").unwrap()
    }

    fn norm() -> Normalizer {
        Normalizer {
            image: ChannelStats { mean: vec![0.1], std: vec![0.5] },
            dire: ChannelStats { mean: vec![0.05], std: vec![0.02] },
            eps0: ChannelStats { mean: vec![0.3], std: vec![2.0] },
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample();
        let cfg = AugmentConfig {
            normalize_image: false,
            ..AugmentConfig::default()
        };
        let once = augment_with_flip(&s, true, &cfg, &norm()).unwrap();
        let flipped = DireSample::new(once.x0.clone(), s.dire.hflip(), once.eps0.clone(), 1, "t").unwrap();
        let twice = augment_with_flip(&flipped, true, &cfg, &norm()).unwrap();
        assert_eq!(twice.x0, s.x0);
        assert_eq!(twice.eps0, s.eps0);
        assert_eq!(once.dire, s.dire.hflip());
    }

    #[test]
    fn noise_is_never_normalized_by_default() {
        let s = sample();
        let cfg = AugmentConfig {
            hflip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&s, &cfg, &norm(), &mut Rng::new(0, 0)).unwrap();
        assert_eq!(out.eps0.to_bits(), s.eps0.to_bits());
        assert_eq!(out.x0, norm().image.apply(&s.x0).unwrap());
        assert_eq!(out.dire, norm().dire.apply(&s.dire).unwrap());
    }

    #[test]
    fn joint_flip_keeps_alignment() {
        let s = sample();
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            normalize_image: false,
            normalize_noise: false,
        };
        let out = augment(&s, &cfg, &norm(), &mut Rng::new(0, 0)).unwrap();
        assert_eq!(out.x0, s.x0.hflip());
        assert_eq!(out.dire, s.dire.hflip());
        assert_eq!(out.eps0, s.eps0.hflip());
    }

    #[test]
    fn resize_and_crop() {
        let img = real_image(0, 0, 8, &TextureConfig::default());
        let up = resize_bilinear(&img, 16, 16).unwrap();
        assert_eq!(up.shape(), &[1, 16, 16]);
        // corners are preserved under align-corners
        assert_eq!(up.data()[0], img.data()[0]);
        assert_eq!(up.data()[255], img.data()[63]);
        let same = resize_bilinear(&up, 16, 16).unwrap();
        assert_eq!(same, up);
        assert_eq!(center_crop(&up, 16).unwrap(), up);
        let c = center_crop(&up, 8).unwrap();
        assert_eq!(c.data()[0], up.data()[4 * 16 + 4]);
    }

    #[test]
    fn channel_stats_standardize() {
        let ds = gen_real(50, 8, &TextureConfig::default(), 2, 0, Split::Train).unwrap();
        let st = ChannelStats::fit(ds.images()).unwrap();
        let normed: Vec<Array> = ds.images().iter().map(|i| st.apply(i).unwrap()).collect();
        let again = ChannelStats::fit(&normed).unwrap();
        assert!(again.mean[0].abs() < 1e-4);
        assert!((again.std[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn plain_import() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "0 0.5\n-0.5, 1\n").unwrap();
        fs::write(dir.path().join("b.txt"), "1 1\n1 1\n").unwrap();
        fs::write(dir.path().join("skip.bin"), "x").unwrap();
        let ds = import_plain_dir(dir.path(), 8, LABEL_REAL, "folder", Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images()[0].shape(), &[1, 8, 8]);
        assert_eq!(ds.images()[0].data()[0], 0.0);
        fs::write(dir.path().join("c.txt"), "1 2\n").unwrap();
        assert!(import_plain_dir(dir.path(), 8, 0, "folder", Split::Test).is_err());
    }
}
