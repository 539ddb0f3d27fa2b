//! Procedural shape dataset, preprocessing, and the `TTDS` file format.
//!
//! Every class is a (shape, colour scheme) pair drawn on a noisy grey
//! background. Images are 3×64×64 in `[0, 1]` and are cropped to 56×56 and
//! standardized before reaching a backbone.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{standardize, Tensor};

pub const CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 64;
pub const CROP_SIZE: usize = 56;
pub const MAX_CLASSES: usize = 16;

const MAGIC: &[u8; 4] = b"TTDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: u32,
}

/// Per-channel statistics of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over the centre crops of `samples`, the region a
    /// test-mode backbone input covers.
    pub fn of(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("statistics of an empty split"));
        }
        let mut mean = vec![0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let plane = CROP_SIZE * CROP_SIZE;
        let crops = samples
            .iter()
            .map(|s| crop(&s.image, (IMAGE_SIZE - CROP_SIZE) / 2, (IMAGE_SIZE - CROP_SIZE) / 2, CROP_SIZE))
            .collect::<Result<Vec<_>>>()?;
        for t in &crops {
            for (c, chunk) in t.data().chunks_exact(plane).enumerate() {
                mean[c] += chunk.iter().sum::<f64>();
            }
        }
        let count = (samples.len() * plane) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for t in &crops {
            for (c, chunk) in t.data().chunks_exact(plane).enumerate() {
                sq[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|v| (v / count).sqrt()).collect();
        Ok(ChannelStats { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub num_classes: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: ChannelStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Annulus,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Annulus];

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // Upward triangle with apex at -r and base at +0.7r.
                let top = -r;
                let base = 0.7 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half = (dy - top) / (base - top) * r;
                dx.abs() <= half
            }
            Shape::Annulus => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
        }
    }
}

/// Foreground base colours, one per scheme.
const SCHEMES: [[f64; 3]; 4] = [[0.90, 0.25, 0.15], [0.15, 0.35, 0.90], [0.20, 0.80, 0.25], [0.90, 0.85, 0.20]];

/// The (shape, colour scheme) pair drawn for a class.
pub fn class_recipe(class: usize) -> (Shape, usize) {
    (Shape::ALL[class % 4], class / 4)
}

fn quantize(v: f64) -> f64 {
    // Stored as f32 on disk; keep values exactly representable.
    (v.clamp(0.0, 1.0) as f32) as f64
}

/// Draws one 3×64×64 image of `class`.
pub fn render(class: usize, rng: &mut impl Rng) -> Tensor {
    let (shape, scheme) = class_recipe(class);
    let n = IMAGE_SIZE;
    let grey = rng.random_range(0.35..0.5);
    let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.06..0.06)).collect();
    let colour: Vec<f64> = SCHEMES[scheme].iter().map(|c| c + rng.random_range(-0.08..0.08)).collect();
    let radius = rng.random_range(9.0..16.0);
    let cx = rng.random_range(18.0..46.0);
    let cy = rng.random_range(18.0..46.0);
    let mut data = vec![0.0; CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let inside = shape.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, radius);
            let noise = rng.random_range(-0.15..0.15);
            for c in 0..CHANNELS {
                let v = if inside { colour[c] + 0.3 * noise } else { grey + tint[c] + noise };
                data[(c * n + y) * n + x] = quantize(v);
            }
        }
    }
    Tensor::new([CHANNELS, n, n], data).expect("render shape")
}

/// Deterministic stratified dataset with a 70/15/15 split per class.
pub fn generate_dataset(seed: u64, n_per_class: usize, num_classes: usize) -> Result<DatasetSplits> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(invalid(format!("class count {num_classes} outside [2, {MAX_CLASSES}]")));
    }
    if n_per_class < 4 {
        return Err(invalid(format!("need at least 4 samples per class, got {n_per_class}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held_out = (n_per_class * 15 / 100).max(1);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut id = 0u32;
    for class in 0..num_classes {
        for k in 0..n_per_class {
            let sample = Sample { image: render(class, &mut rng), label: class, id };
            id += 1;
            if k < held_out {
                val.push(sample);
            } else if k < 2 * held_out {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    for split in [&mut train, &mut val, &mut test] {
        split.shuffle(&mut rng);
    }
    let stats = ChannelStats::of(&train)?;
    Ok(DatasetSplits { num_classes, seed, train, val, test, stats })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Crops a `[C,H,W]` image to `size×size` at `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || top + size > s[1] || left + size > s[2] {
        return Err(invalid(format!("crop {size} at ({top},{left}) exceeds image {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(s[0] * size * size);
    for c in 0..s[0] {
        for y in top..top + size {
            let row = (c * h + y) * w;
            data.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Tensor::new([s[0], size, size], data)
}

/// The raw `[0,1]` crop used for an image: random in train mode, centred in
/// test mode.
pub fn crop_for(image: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    let margin = image.shape()[1].checked_sub(CROP_SIZE).ok_or_else(|| invalid("image smaller than crop"))?;
    let (top, left) = match mode {
        Mode::Train => (rng.random_range(0..=margin), rng.random_range(0..=margin)),
        Mode::Test => (margin / 2, margin / 2),
    };
    crop(image, top, left, CROP_SIZE)
}

/// Crop then standardize with training-split statistics.
pub fn preprocess(sample: &Sample, mode: Mode, stats: &ChannelStats, rng: &mut impl Rng) -> Result<Tensor> {
    let cropped = crop_for(&sample.image, mode, rng)?;
    standardize(&cropped, &stats.mean, &stats.std)
}

/// Test-mode raw crops of a set of samples as one `[N,3,56,56]` batch.
pub fn test_batch(samples: &[Sample]) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let crops = samples.iter().map(|s| crop_for(&s.image, Mode::Test, &mut rng)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&crops)
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the `TTDS` binary layout (see the book's file-format chapter).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.num_classes as u32,
            self.train.len() as u32,
            self.val.len() as u32,
            self.test.len() as u32,
            CHANNELS as u32,
            IMAGE_SIZE as u32,
            IMAGE_SIZE as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let all = || self.train.iter().chain(&self.val).chain(&self.test);
        for s in all() {
            for &v in s.image.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        for s in all() {
            w.write_all(&(s.label as u16).to_le_bytes())?;
        }
        for s in all() {
            w.write_all(&s.id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a TTDS dataset file".into()));
        }
        let mut u32s = [0u32; 8];
        for v in &mut u32s {
            *v = read_u32(&mut r)?;
        }
        let [version, classes, n_train, n_val, n_test, c, h, w] = u32s.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported TTDS version {version}")));
        }
        if c != CHANNELS || h != IMAGE_SIZE || w != IMAGE_SIZE {
            return Err(Error::Format(format!("unexpected image shape {c}x{h}x{w}")));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let total = n_train + n_val + n_test;
        let per = c * h * w;
        let mut images = Vec::with_capacity(total);
        let mut buf = vec![0u8; per * 4];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            images.push(Tensor::new([c, h, w], data)?);
        }
        let mut labels = Vec::with_capacity(total);
        for _ in 0..total {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            let label = u16::from_le_bytes(b) as usize;
            if label >= classes {
                return Err(Error::Format(format!("label {label} out of range")));
            }
            labels.push(label);
        }
        let mut samples = Vec::with_capacity(total);
        for (image, label) in images.into_iter().zip(labels) {
            samples.push(Sample { image, label, id: read_u32(&mut r)? });
        }
        let test = samples.split_off(n_train + n_val);
        let val = samples.split_off(n_train);
        let train = samples;
        let stats = ChannelStats::of(&train)?;
        Ok(DatasetSplits { num_classes: classes, seed: u64::from_le_bytes(seed), train, val, test, stats })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(3, 4, 3).unwrap();
        let b = generate_dataset(3, 4, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(4, 4, 3).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn split_sizes_follow_70_15_15() {
        let d = generate_dataset(0, 20, 8).unwrap();
        assert_eq!(d.len(), 160);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (112, 24, 24));
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let d = generate_dataset(1, 10, 4).unwrap();
        let ids: HashSet<u32> = d.train.iter().chain(&d.val).chain(&d.test).map(|s| s.id).collect();
        assert_eq!(ids.len(), 40);
        assert!(d.train.iter().chain(&d.val).chain(&d.test).all(|s| s.label < 4));
        assert!(d.train.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_dataset(0, 3, 8).is_err());
        assert!(generate_dataset(0, 10, 1).is_err());
        assert!(generate_dataset(0, 10, 17).is_err());
    }

    #[test]
    fn test_mode_is_deterministic_and_train_mode_reproducible() {
        let d = generate_dataset(2, 4, 2).unwrap();
        let s = &d.train[0];
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = preprocess(s, Mode::Test, &d.stats, &mut r1).unwrap();
        let b = preprocess(s, Mode::Test, &d.stats, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 56, 56]);
        let mut r3 = ChaCha8Rng::seed_from_u64(5);
        let mut r4 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            preprocess(s, Mode::Train, &d.stats, &mut r3).unwrap(),
            preprocess(s, Mode::Train, &d.stats, &mut r4).unwrap()
        );
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = Tensor::zeros([3, 10, 10]);
        assert!(crop(&img, 0, 0, 11).is_err());
        assert!(crop(&img, 5, 0, 6).is_err());
    }

    #[test]
    fn standardized_test_split_is_centred() {
        let d = generate_dataset(11, 100, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plane = CROP_SIZE * CROP_SIZE;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for s in &d.test {
            let t = preprocess(s, Mode::Test, &d.stats, &mut rng).unwrap();
            for (c, chunk) in t.data().chunks_exact(plane).enumerate() {
                sums[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (d.test.len() * plane) as f64;
        for c in 0..3 {
            let mean = sums[c] / n;
            let std = (sq[c] / n - mean * mean).sqrt();
            assert!(mean.abs() < 0.05, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 0.1, "channel {c} std {std}");
        }
    }

    #[test]
    fn binary_round_trip() {
        let d = generate_dataset(9, 5, 3).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TTDS");
        let back = DatasetSplits::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        assert!(DatasetSplits::read_from(&b"XXXX"[..]).is_err());
    }
}
