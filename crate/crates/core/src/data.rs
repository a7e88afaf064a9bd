//! Synthetic face/context pairs with a planted background-label correlation.
//!
//! Each sample draws a label, a background class that equals the label with
//! probability `rho` of its split, and a face glyph that shows the label with
//! probability `1 - face_noise`. Backgrounds and glyphs are mirror symmetric
//! in class identity so horizontal flips never change what they encode.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::EmotionLabel;
use crate::config::KeyValues;
use crate::rng;
use crate::tensor::io::{encode, load_any};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;
pub const PIXEL_NOISE: f64 = 0.1;
const GLYPH_PARTS: usize = 6;
const SKIN: [f64; 3] = [0.85, 0.7, 0.55];
const INK: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct BiasSpec {
    pub k: usize,
    pub image_size: usize,
    pub face_size: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub face_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            k: 7,
            image_size: 64,
            face_size: 32,
            rho_train: 0.9,
            rho_test: 1.0 / 7.0,
            face_noise: 0.1,
            n_train: 7000,
            n_val: 1000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if !(2..1 << GLYPH_PARTS).contains(&k) {
            return Err(Error::config(format!("k = {k} must lie in [2, {}]", (1 << GLYPH_PARTS) - 1)));
        }
        let floor = 1.0 / k as f64 - 1e-9;
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(floor..=1.0).contains(&rho) {
                return Err(Error::config(format!("{name} = {rho} outside [1/k, 1]")));
            }
        }
        if !(0.0..0.5).contains(&self.face_noise) {
            return Err(Error::config(format!("face_noise = {} outside [0, 0.5)", self.face_noise)));
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < k {
                return Err(Error::config(format!("{name} = {n} is smaller than k = {k}")));
            }
        }
        if self.face_size < 8 || self.face_size >= self.image_size {
            return Err(Error::config(format!("face_size {} must be at least 8 and below image_size {}", self.face_size, self.image_size)));
        }
        Ok(())
    }

    /// Top-left corner of the face region inside the context image.
    pub fn face_origin(&self) -> usize {
        (self.image_size - self.face_size) / 2
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            k: kv.take("k", d.k)?,
            image_size: kv.take("image_size", d.image_size)?,
            face_size: kv.take("face_size", d.face_size)?,
            rho_train: kv.take("rho_train", d.rho_train)?,
            rho_test: kv.take("rho_test", d.rho_test)?,
            face_noise: kv.take("face_noise", d.face_noise)?,
            n_train: kv.take("n_train", d.n_train)?,
            n_val: kv.take("n_val", d.n_val)?,
            n_test: kv.take("n_test", d.n_test)?,
            seed: kv.take("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("k", self.k);
        kv.set("image_size", self.image_size);
        kv.set("face_size", self.face_size);
        kv.set("rho_train", self.rho_train);
        kv.set("rho_test", self.rho_test);
        kv.set("face_noise", self.face_noise);
        kv.set("n_train", self.n_train);
        kv.set("n_val", self.n_val);
        kv.set("n_test", self.n_test);
        kv.set("seed", self.seed);
        kv
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::read(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::data(path, msg),
            e => e,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Validation shares the training correlation; only test is decorrelated.
    pub fn rho(self, spec: &BiasSpec) -> f64 {
        match self {
            Split::Train | Split::Val => spec.rho_train,
            Split::Test => spec.rho_test,
        }
    }

    pub fn count(self, spec: &BiasSpec) -> usize {
        match self {
            Split::Train => spec.n_train,
            Split::Val => spec.n_val,
            Split::Test => spec.n_test,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::config(format!("unknown split `{s}` (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, face, face]`.
    pub face: Tensor<f32>,
    /// `[C, H, W]` with the face region zeroed.
    pub context: Tensor<f32>,
    pub label: EmotionLabel,
    pub context_class: usize,
}

fn other_class(r: &mut ChaCha8Rng, y: usize, k: usize) -> usize {
    let j = r.random_range(0..k - 1);
    if j >= y {
        j + 1
    } else {
        j
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Per-class background tint, stripe orientation and stripe count.
fn texture(class: usize, k: usize) -> ([f64; 3], bool, f64) {
    (hsv(class as f64 / k as f64, 0.7, 0.9), class % 2 == 1, 2.0 + (class / 2) as f64)
}

/// Whether normalized face coordinates `(u, v)` in `[-1, 1]` are inked for
/// `class`. Glyph parts are selected by the bits of `class + 1`.
fn glyph_ink(class: usize, u: f64, v: f64) -> bool {
    let code = class + 1;
    let au = u.abs();
    let parts = [
        ((u * u + v * v).sqrt() - 0.75).abs() < 0.1,
        (v - 0.45).abs() < 0.1 && au < 0.5,
        (au - 0.4).powi(2) + (v + 0.35).powi(2) < 0.15 * 0.15,
        au < 0.08 && v.abs() < 0.3,
        (v + 0.7).abs() < 0.06 && au > 0.2 && au < 0.6,
        au > 0.88 && v.abs() < 0.2,
    ];
    parts.iter().enumerate().any(|(i, &hit)| hit && code >> i & 1 == 1)
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Noise-free face glyph for `class`, `[C, size, size]`.
pub fn glyph(class: usize, size: usize) -> Tensor<f32> {
    let mut out = vec![0f32; CHANNELS * size * size];
    for (c, plane) in out.chunks_mut(size * size).enumerate() {
        for y in 0..size {
            for x in 0..size {
                let ink = glyph_ink(class, coord(x, size), coord(y, size));
                plane[y * size + x] = if ink { INK } else { SKIN[c] } as f32;
            }
        }
    }
    Tensor::new([CHANNELS, size, size], out).expect("glyph shape")
}

/// Generates sample `index` of `split`. A pure function of its arguments.
pub fn sample(spec: &BiasSpec, split: Split, index: usize) -> Sample {
    let k = spec.k;
    let mut r = rng::stream(spec.seed, split.name(), index as u64);
    let label = r.random_range(0..k);
    let context_class = if r.random::<f64>() < split.rho(spec) { label } else { other_class(&mut r, label, k) };
    let face_class = if r.random::<f64>() < spec.face_noise { other_class(&mut r, label, k) } else { label };
    let phase = r.random::<f64>() * TAU;
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("noise scale");

    let (n, f) = (spec.image_size, spec.face_size);
    let (tint, vertical, cycles) = texture(context_class, k);
    let mut context = vec![0f32; CHANNELS * n * n];
    for (c, plane) in context.chunks_mut(n * n).enumerate() {
        for y in 0..n {
            for x in 0..n {
                let u = if vertical { x } else { y } as f64 + 0.5;
                let wave = 0.5 + 0.5 * (TAU * cycles * u / n as f64 + phase).cos();
                plane[y * n + x] = (tint[c] * wave + noise.sample(&mut r)) as f32;
            }
        }
    }
    let o = spec.face_origin();
    for plane in context.chunks_mut(n * n) {
        for y in o..o + f {
            plane[y * n + o..y * n + o + f].fill(0.0);
        }
    }

    let mut face = glyph(face_class, f).into_data();
    for v in &mut face {
        *v += noise.sample(&mut r) as f32;
    }

    Sample {
        face: Tensor::new([CHANNELS, f, f], face).expect("face shape"),
        context: Tensor::new([CHANNELS, n, n], context).expect("context shape"),
        label: EmotionLabel::new(label, k).expect("label in range"),
        context_class,
    }
}

pub fn generate(spec: &BiasSpec, split: Split) -> Vec<Sample> {
    (0..split.count(spec)).map(|i| sample(spec, split, i)).collect()
}

fn write_tensor_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `spec.txt` and one directory per split under `out`.
pub fn gen_dataset(spec: &BiasSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec_path = out.join("spec.txt");
    fs::write(&spec_path, spec.to_kv().to_string()).map_err(|e| Error::io(&spec_path, e))?;
    for split in Split::ALL {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = String::new();
        for i in 0..split.count(spec) {
            let s = sample(spec, split, i);
            let id = format!("{}{i:06}", split.name());
            let (face_file, context_file) = (format!("{id}_face.agt"), format!("{id}_context.agt"));
            write_tensor_file(&dir.join(&face_file), &s.face)?;
            write_tensor_file(&dir.join(&context_file), &s.context)?;
            manifest.push_str(&format!("{id}\t{face_file}\t{context_file}\t{}\t{}\n", s.label.index(), s.context_class));
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub face_file: String,
    pub context_file: String,
    pub label: usize,
    pub context_class: usize,
}

pub fn parse_manifest(path: &Path, k: usize) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::data(path, format!("line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, face, context, label, cc] = fields[..] else {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        };
        let class = |s: &str, what: &str| -> Result<usize> {
            let v: usize = s.trim().parse().map_err(|_| err(format!("{what} `{s}` is not an integer")))?;
            if v >= k {
                return Err(err(format!("{what} {v} out of range for {k} classes")));
            }
            Ok(v)
        };
        entries.push(ManifestEntry {
            id: id.to_string(),
            face_file: face.to_string(),
            context_file: context.to_string(),
            label: class(label, "label")?,
            context_class: class(cc, "context_class")?,
        });
    }
    Ok(entries)
}

fn read_image(path: &Path, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let t = load_any(path).map_err(|e| match e {
        TensorError::Io(e) => Error::io(path, e),
        e => Error::data(path, e.to_string()),
    })?;
    let t = t.exact::<f32>().map_err(|e| Error::data(path, e.to_string()))?;
    if t.shape() != shape {
        return Err(Error::data(path, format!("shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: BiasSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// One mini-batch stacked along a leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub face: Tensor<T>,
    pub context: Tensor<T>,
    pub labels: Vec<usize>,
    pub context_classes: Vec<usize>,
}

/// Loads one split of a dataset written by [`gen_dataset`].
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let spec = BiasSpec::read(&root.join("spec.txt"))?;
    let dir = root.join(split.name());
    let entries = parse_manifest(&dir.join("manifest.tsv"), spec.k)?;
    let (n, f) = (spec.image_size, spec.face_size);
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let face = read_image(&dir.join(&e.face_file), [CHANNELS, f, f])?;
        let context = read_image(&dir.join(&e.context_file), [CHANNELS, n, n])?;
        samples.push(Sample { face, context, label: EmotionLabel::new(e.label, spec.k)?, context_class: e.context_class });
    }
    Ok(Dataset { spec, split, samples })
}

/// Seeded permutation of `0..n` for one epoch.
pub fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch));
    order
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let stack = |get: &dyn Fn(&Sample) -> &Tensor<f32>| {
            let shape = get(&self.samples[indices[0]]).shape().to_vec();
            let data: Vec<T> = indices.iter().flat_map(|&i| get(&self.samples[i]).data().iter().map(|&v| T::from_f64(v as f64))).collect();
            Tensor::new([&[indices.len()][..], &shape].concat(), data).expect("uniform sample shapes")
        };
        Batch {
            face: stack(&|s| &s.face),
            context: stack(&|s| &s.context),
            labels: indices.iter().map(|&i| self.samples[i].label.index()).collect(),
            context_classes: indices.iter().map(|&i| self.samples[i].context_class).collect(),
        }
    }

    /// Batches in `order`; the last one may be short.
    pub fn batches<'a, T: Scalar>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch<T>> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| self.batch(idx))
    }
}

/// Empirical correlation between background and label.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasStats {
    /// `P(context_class == label)`, NaN for an empty set.
    pub rho: f64,
    /// `table[label][context_class]`.
    pub table: Vec<Vec<usize>>,
    pub label_counts: Vec<usize>,
}

pub fn measure_bias(samples: &[Sample], k: usize) -> BiasStats {
    let mut table = vec![vec![0usize; k]; k];
    for s in samples {
        table[s.label.index()][s.context_class] += 1;
    }
    let label_counts: Vec<usize> = table.iter().map(|row| row.iter().sum()).collect();
    let matched: usize = (0..k).map(|i| table[i][i]).sum();
    BiasStats { rho: matched as f64 / samples.len() as f64, table, label_counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_mirror_symmetric() {
        let g: Vec<Tensor<f32>> = (0..(1 << GLYPH_PARTS) - 1).map(|c| glyph(c, 32)).collect();
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert!(a.max_abs_diff(b) > 0.5);
            }
            for plane in a.data().chunks(32 * 32) {
                for row in plane.chunks(32) {
                    assert!(row.iter().eq(row.iter().rev()));
                }
            }
        }
    }

    #[test]
    fn other_class_never_returns_the_excluded_one() {
        let mut r = rng::stream(0, "t", 0);
        for y in 0..5 {
            let mut seen = [false; 5];
            for _ in 0..200 {
                let c = other_class(&mut r, y, 5);
                assert_ne!(c, y);
                seen[c] = true;
            }
            assert_eq!(seen.iter().filter(|&&s| s).count(), 4);
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
