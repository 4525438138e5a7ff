//! Synthetic fine-grained datasets, raster I/O, splits and batching.
//!
//! Every synthetic image shares one smooth template. Classes differ only in a
//! small motif stamped at a random location. Motifs are two-colour stripe or
//! checker patterns sharing one palette, so a classifier must look at local
//! structure rather than colour statistics.

mod pnm;

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub use pnm::{decode as decode_pnm, encode as encode_pnm, load_pgm, load_ppm, save_pgm, save_ppm};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub motif_size: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spec with the default motif side `image_size / 8` and noise 0.1.
    pub fn new(num_classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            samples_per_class,
            image_size,
            motif_size: (image_size / 8).max(1),
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 1 || self.samples_per_class < 1 {
            return bad("need at least one class and one sample per class".into());
        }
        if self.motif_size < 1 || self.motif_size >= self.image_size {
            return bad(format!(
                "motif size {} must be in [1, image size {})",
                self.motif_size, self.image_size
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} must be finite and >= 0", self.noise_std));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renders images for one spec. Image `i` has class `i / samples_per_class`.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SyntheticSpec,
    template: Vec<f32>,
    motifs: Vec<Vec<f32>>,
}

impl Generator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let template = make_template(&spec);
        let motifs = make_motifs(&spec);
        Ok(Generator { spec, template, motifs })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Top-left corner of the motif in image `index`.
    pub fn placement(&self, index: usize) -> (usize, usize) {
        let mut r = rng::substream(self.spec.seed, Stream::Placement, index as u64);
        let span = self.spec.image_size - self.spec.motif_size + 1;
        (r.random_range(0..span), r.random_range(0..span))
    }

    /// `[3, S, S]` image of `class` with the motif at `at`; noise drawn from
    /// the stream of image `noise_index`.
    pub fn render(&self, class: usize, at: (usize, usize), noise_index: u64) -> Tensor<f32> {
        let s = self.spec.image_size;
        let m = self.spec.motif_size;
        let mut img = self.template.clone();
        let motif = &self.motifs[class];
        for c in 0..3 {
            for y in 0..m {
                let row = (c * s + at.0 + y) * s + at.1;
                img[row..row + m].copy_from_slice(&motif[(c * m + y) * m..][..m]);
            }
        }
        if self.spec.noise_std > 0.0 {
            let normal = Normal::new(0.0f32, self.spec.noise_std).expect("validated noise std");
            let mut r = rng::substream(self.spec.seed, Stream::Noise, noise_index);
            for v in &mut img {
                *v += normal.sample(&mut r);
            }
        }
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![3, s, s], img).expect("template has 3*S*S values")
    }

    pub fn image(&self, index: usize) -> Tensor<f32> {
        self.render(index / self.spec.samples_per_class, self.placement(index), index as u64)
    }
}

fn make_template(spec: &SyntheticSpec) -> Vec<f32> {
    let s = spec.image_size;
    let mut r = rng::stream(spec.seed, Stream::Template);
    let mut img = vec![0.0f32; 3 * s * s];
    for c in 0..3 {
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    r.random_range(0.5f32..2.0),
                    r.random_range(0.5f32..2.0),
                    r.random_range(0.0f32..2.0 * PI),
                    r.random_range(0.05f32..0.12),
                )
            })
            .collect();
        let base: f32 = r.random_range(0.35..0.65);
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (y as f32 / s as f32, x as f32 / s as f32);
                let mut val = base;
                for &(fy, fx, phase, amp) in &waves {
                    val += amp * (2.0 * PI * (fy * u + fx * v) + phase).sin();
                }
                img[(c * s + y) * s + x] = val;
            }
        }
    }
    img
}

/// Binary stripe and checker patterns ordered by orientation, then period.
/// Classes past the end of the list get a random mask with half the pixels on.
fn pattern(class: usize, m: usize, r: &mut impl Rng) -> Vec<bool> {
    let unit = (m / 4).max(1);
    let shapes: [fn(usize, usize, usize) -> bool; 5] = [
        |y, _, p| (y / p) % 2 == 1,
        |_, x, p| (x / p) % 2 == 1,
        |y, x, p| (y / p + x / p) % 2 == 1,
        |y, x, p| ((y + x) / p) % 2 == 1,
        |y, x, p| ((y + 2 * x.max(y) - x) / p) % 2 == 1,
    ];
    let periods: Vec<usize> = [unit, 2 * unit].into_iter().filter(|&p| p < m).collect();
    if class < shapes.len() * periods.len() {
        let (shape, period) = (shapes[class % shapes.len()], periods[class / shapes.len()]);
        return (0..m * m).map(|k| shape(k / m, k % m, period)).collect();
    }
    let mut mask: Vec<bool> = (0..m * m).map(|k| k < m * m / 2).collect();
    mask.shuffle(r);
    mask
}

fn make_motifs(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let m = spec.motif_size;
    let mut r = rng::stream(spec.seed, Stream::Motif);
    let bright: [f32; 3] = std::array::from_fn(|_| r.random_range(0.8..1.0));
    let dark: [f32; 3] = std::array::from_fn(|_| r.random_range(0.0..0.2));
    (0..spec.num_classes)
        .map(|class| {
            let mask = pattern(class, m, &mut r);
            let mut motif = vec![0.0f32; 3 * m * m];
            for (k, &on) in mask.iter().enumerate() {
                let colour = if on { bright } else { dark };
                for c in 0..3 {
                    motif[c * m * m + k] = colour[c];
                }
            }
            motif
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images with labels and a per-class 80/20 train/test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    /// Split each class in order of appearance: the first 80% go to train.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [m, c, _, _] = images.dims4("dataset")?;
        if c != 3 || m != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images for {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for idx in &members {
            let n = idx.len();
            let cut = if n < 2 { n } else { (n * 4 / 5).clamp(1, n - 1) };
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok(Dataset {
            images,
            labels,
            num_classes,
            train,
            test,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Index lists of the batches over `split`. With a seed the split is
    /// shuffled first; the last batch may be short.
    pub fn batches(&self, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
        if batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut order = self.indices(split).to_vec();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut rng::stream(seed, Stream::Shuffle));
        }
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Images and labels for `indices`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Write one PPM per image plus `index.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        let mut seen = vec![0usize; self.num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            let name = format!("c{label:03}_{:05}.ppm", seen[label]);
            seen[label] += 1;
            let img = self.images.select_batch(i);
            let img = img.reshape(self.images.shape()[1..].to_vec())?;
            save_ppm(&img, dir.join(&name))?;
            index.push_str(&format!("{name}\t{label}\n"));
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(path, e))
    }

    /// Load a directory written by [`Dataset::write_dir`] or any directory
    /// with an `index.tsv` of `path<TAB>label` lines. The class count is the
    /// largest label plus one.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = read_index(dir)?;
        if entries.is_empty() {
            return Err(Error::Format {
                kind: "index.tsv",
                detail: "no entries".into(),
            });
        }
        let mut data = Vec::new();
        let mut dims: Option<Vec<usize>> = None;
        let mut labels = Vec::with_capacity(entries.len());
        for (path, label) in &entries {
            let img = load_ppm(dir.join(path))?;
            match &dims {
                Some(d) if d.as_slice() != img.shape() => {
                    return Err(Error::shape(
                        "load_dir",
                        format!("{} has shape {:?}, expected {d:?}", path.display(), img.shape()),
                    ))
                }
                Some(_) => {}
                None => dims = Some(img.shape().to_vec()),
            }
            data.extend_from_slice(img.data());
            labels.push(*label);
        }
        let mut shape = vec![entries.len()];
        shape.extend(dims.unwrap_or_default());
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(Tensor::new(shape, data)?, labels, num_classes)
    }
}

pub fn read_index(dir: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Format {
                kind: "index.tsv",
                detail: format!("line {}: expected path<TAB>label, got {line:?}", n + 1),
            };
            let (p, l) = line.split_once('\t').ok_or_else(bad)?;
            Ok((PathBuf::from(p), l.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let generator = Generator::new(spec.clone())?;
    let s = spec.image_size;
    let mut data = Vec::with_capacity(spec.len() * 3 * s * s);
    let mut labels = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        data.extend_from_slice(generator.image(i).data());
        labels.push(i / spec.samples_per_class);
    }
    Dataset::new(Tensor::new(vec![spec.len(), 3, s, s], data)?, labels, spec.num_classes)
}

/// Test accuracy of a nearest-class-centroid classifier on raw pixels.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let per = ds.images.numel() / ds.len();
    let pixels = |i: usize| &ds.images.data()[i * per..(i + 1) * per];
    let mut centroids = vec![vec![0.0f64; per]; ds.num_classes];
    let mut counts = vec![0usize; ds.num_classes];
    for &i in &ds.train {
        counts[ds.labels[i]] += 1;
        for (c, &v) in centroids[ds.labels[i]].iter_mut().zip(pixels(i)) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut correct = 0;
    for &i in &ds.test {
        let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(pixels(i)).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
        let mut best = (0, f64::INFINITY);
        for (k, c) in centroids.iter().enumerate() {
            let d = dist(c);
            if d < best.1 {
                best = (k, d);
            }
        }
        correct += usize::from(best.0 == ds.labels[i]);
    }
    correct as f64 / ds.test.len().max(1) as f64
}

