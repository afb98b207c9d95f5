//! Image sets, the on-disk dataset container and the synthetic generator.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one raw
//! little-endian f32 file per image (`C·H·W` values, channel-major).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mospool::{self, ObservationMatrix, PoolConfig};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

/// Images with integer labels, stored as f32-representable values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(image_shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let size: usize = image_shape.iter().product();
        if size == 0 {
            return dim_err(format!("image shape {image_shape:?} is empty"));
        }
        if pixels.len() != size * labels.len() {
            return dim_err(format!(
                "{} pixel values for {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            ));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image set contains non-finite pixels".into()));
        }
        let pixels = pixels.into_iter().map(|v| v as f32 as f64).collect();
        Ok(ImageSet {
            image_shape,
            pixels,
            labels,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_size(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// `N×C×H×W` tensor of the selected images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_size());
        for &i in indices {
            if i >= self.len() {
                return dim_err(format!("image index {i} out of range for {} images", self.len()));
            }
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::with_dtype(&[indices.len(), c, h, w], data, DType::F32)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Image indices per label, in ascending order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn num_classes(&self) -> usize {
        self.by_class().len()
    }

    /// Maps labels onto `0..C` in ascending order of the original ids.
    pub fn relabeled(&self) -> ImageSet {
        let ids: Vec<usize> = self.by_class().into_keys().collect();
        let labels = self
            .labels
            .iter()
            .map(|l| ids.binary_search(l).expect("label present"))
            .collect();
        ImageSet {
            image_shape: self.image_shape,
            pixels: self.pixels.clone(),
            labels,
        }
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> ImageSet {
        let s = self.image_size();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if keep(l) {
                pixels.extend_from_slice(&self.pixels[i * s..(i + 1) * s]);
                labels.push(l);
            }
        }
        ImageSet {
            image_shape: self.image_shape,
            pixels,
            labels,
        }
    }
}

// ---- manifest -------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PIXEL_DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub file: String,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub base: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    pub novel: Vec<SampleEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dtype: String,
    pub image_shape: [usize; 3],
    pub splits: Splits,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SampleEntry] {
        match split {
            Split::Base => &self.splits.base,
            Split::Val => &self.splits.val,
            Split::Novel => &self.splits.novel,
        }
    }

    /// Structural problems, without touching the image files.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.dtype != PIXEL_DTYPE {
            p.push(format!("dtype must be {PIXEL_DTYPE:?}, got {:?}", self.dtype));
        }
        if self.image_shape.contains(&0) {
            p.push(format!("image_shape {:?} has a zero extent", self.image_shape));
        }
        let sets: Vec<(&str, BTreeSet<usize>)> = [("base", Split::Base), ("val", Split::Val), ("novel", Split::Novel)]
            .into_iter()
            .map(|(n, s)| (n, self.split(s).iter().map(|e| e.label).collect()))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let shared: Vec<&usize> = sets[i].1.intersection(&sets[j].1).collect();
                if !shared.is_empty() {
                    p.push(format!(
                        "splits {} and {} share classes {shared:?}",
                        sets[i].0, sets[j].0
                    ));
                }
            }
        }
        for (name, labels) in &sets {
            if let Some(&l) = labels.iter().find(|&&l| l >= self.class_names.len()) {
                p.push(format!("split {name} uses label {l} without a class name"));
            }
        }
        p
    }

    /// Checks the structure and that every image file has the right size.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let mut p = self.problems();
        let expected = 4 * self.image_shape.iter().product::<usize>() as u64;
        for s in [Split::Base, Split::Val, Split::Novel] {
            for e in self.split(s) {
                match fs::metadata(dir.join(&e.file)) {
                    Ok(m) if m.len() == expected => {}
                    Ok(m) => p.push(format!("{} has {} bytes, expected {expected}", e.file, m.len())),
                    Err(err) => p.push(format!("{}: {err}", e.file)),
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate(dir)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Reads one split with its original labels.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<ImageSet> {
        let entries = self.split(split);
        let size: usize = self.image_shape.iter().product();
        let mut pixels = Vec::with_capacity(entries.len() * size);
        for e in entries {
            let bytes = fs::read(dir.join(&e.file))?;
            if bytes.len() != 4 * size {
                return Err(Error::Format(format!("{} has {} bytes", e.file, bytes.len())));
            }
            pixels.extend(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
            );
        }
        ImageSet::new(self.image_shape, pixels, entries.iter().map(|e| e.label).collect())
    }
}

// ---- synthetic generator --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Must have 3 channels.
    pub image_shape: [usize; 3],
    /// Scales the injected third-order structure; 0 gives Gaussian pixels.
    pub skew: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.classes < 10 {
            p.push(format!("classes must be >= 10 for disjoint splits, got {}", self.classes));
        }
        if self.classes > MAX_CLASSES {
            p.push(format!("classes must be <= {MAX_CLASSES}, got {}", self.classes));
        }
        if self.per_class == 0 {
            p.push("per_class must be >= 1".into());
        }
        if self.image_shape[0] != 3 {
            p.push(format!("generator needs 3 channels, got {}", self.image_shape[0]));
        }
        if self.image_shape[1] < 2 || self.image_shape[1] != self.image_shape[2] {
            p.push(format!("generator needs square images of side >= 2, got {:?}", self.image_shape));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            p.push(format!("skew must lie in [0, 1], got {}", self.skew));
        }
        p
    }
}

/// Number of distinct (mean, covariance, skew) pattern triples.
pub const MAX_CLASSES: usize = 64;

/// Class counts of the base/val/novel split: 60/20/20, rounding into base.
pub fn split_counts(classes: usize) -> (usize, usize, usize) {
    let val = classes / 5;
    let novel = classes / 5;
    (classes - val - novel, val, novel)
}

/// Channel patterns for the class mean and the skew weights.
const PATTERNS: [[f64; 3]; 4] = [
    [1.0, -1.0, 0.0],
    [-1.0, 0.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.8, 0.8, -0.8],
];

/// Correlated channel pair and correlation sign per covariance level.
const COV_PAIRS: [(usize, usize, f64); 4] = [(1, 2, 1.0), (0, 2, 1.0), (0, 1, 1.0), (0, 1, -1.0)];

const MEAN_SCALE: f64 = 0.4;
const MEAN_JITTER: f64 = 0.25;
const CORRELATION: f64 = 0.6;
const CORRELATION_JITTER: f64 = 0.15;
const SKEW_WEIGHT: f64 = 0.9;
const SKEW_JITTER: f64 = 0.15;
const RAMP: f64 = 0.5;

/// Pattern triple of class `c`; distinct for every `c < MAX_CLASSES`.
/// Consecutive classes differ in all three factors where possible.
pub fn class_factors(c: usize) -> [usize; 3] {
    let (d0, d1, d2) = (c % 4, c / 4 % 4, c / 16);
    [d0, (d0 + d1) % 4, (d0 + d1 + d2) % 4]
}

/// Samples one `3×n×n` image of class `c`.
///
/// Pixels share a vertical brightness ramp so rotations are observable.
/// Per channel, unit-variance noise mixes a Gaussian with the skewed
/// `(z²−1)/√2`; channels are then correlated through a unit-diagonal
/// Cholesky factor and shifted by the class mean. Each factor carries
/// per-image jitter.
pub fn sample_image(rng: &mut Rng, c: usize, n: usize, skew: f64) -> Vec<f64> {
    let [fm, fc, fs] = class_factors(c);
    let mean: Vec<f64> = PATTERNS[fm]
        .iter()
        .map(|p| MEAN_SCALE * p + MEAN_JITTER * rng.normal())
        .collect();
    let (a, b, sign) = COV_PAIRS[fc];
    let rho = (sign * CORRELATION + CORRELATION_JITTER * rng.normal()).clamp(-0.9, 0.9);
    let weights: Vec<f64> = PATTERNS[fs]
        .iter()
        .map(|p| (skew * (SKEW_WEIGHT * p + SKEW_JITTER * rng.normal())).clamp(-0.95, 0.95))
        .collect();
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        let ramp = RAMP * (y as f64 / (n - 1) as f64 - 0.5);
        for x in 0..n {
            let mut e = [0.0; 3];
            for (k, ek) in e.iter_mut().enumerate() {
                let w = weights[k];
                let g = rng.normal();
                *ek = (1.0 - w * w).sqrt() * g + w * mospool::skewed_unit_noise(rng);
            }
            let mut v = e;
            v[b] = rho * e[a] + (1.0 - rho * rho).sqrt() * e[b];
            for k in 0..3 {
                img[k * n * n + y * n + x] = mean[k] + ramp + v[k];
            }
        }
    }
    img
}

/// The generated dataset before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub config: GenConfig,
    /// Every image with its global class id.
    pub all: ImageSet,
    pub base_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl SyntheticData {
    pub fn split(&self, split: Split) -> ImageSet {
        let classes = match split {
            Split::Base => &self.base_classes,
            Split::Val => &self.val_classes,
            Split::Novel => &self.novel_classes,
        };
        self.all.subset(|l| classes.contains(&l))
    }
}

/// Generates all images. Classes are assigned to splits by a seeded
/// permutation.
pub fn generate(cfg: &GenConfig) -> Result<SyntheticData> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let n = cfg.image_shape[1];
    let mut pixels = Vec::with_capacity(cfg.classes * cfg.per_class * 3 * n * n);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for c in 0..cfg.classes {
        let mut rng = Rng::stream(cfg.seed, c as u64);
        for _ in 0..cfg.per_class {
            pixels.extend(sample_image(&mut rng, c, n, cfg.skew));
            labels.push(c);
        }
    }
    let all = ImageSet::new(cfg.image_shape, pixels, labels)?;
    let order = Rng::stream(cfg.seed, u64::MAX).permutation(cfg.classes);
    let (nb, nv, _) = split_counts(cfg.classes);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SyntheticData {
        config: cfg.clone(),
        all,
        base_classes: sorted(&order[..nb]),
        val_classes: sorted(&order[nb..nb + nv]),
        novel_classes: sorted(&order[nb + nv..]),
    })
}

/// Writes a generated dataset and returns its manifest.
pub fn write_dataset(data: &SyntheticData, dir: &Path, name: &str) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut splits = Splits::default();
    for i in 0..data.all.len() {
        let file: PathBuf = Path::new("images").join(format!("{i:06}.f32"));
        let bytes: Vec<u8> = data.all.image(i).iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        let label = data.all.labels()[i];
        let entry = SampleEntry {
            file: file.to_string_lossy().replace('\\', "/"),
            label,
        };
        if data.base_classes.contains(&label) {
            splits.base.push(entry);
        } else if data.val_classes.contains(&label) {
            splits.val.push(entry);
        } else {
            splits.novel.push(entry);
        }
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        dtype: PIXEL_DTYPE.into(),
        image_shape: data.config.image_shape,
        splits,
        class_names: (0..data.config.classes)
            .map(|c| {
                let [m, v, s] = class_factors(c);
                format!("class{c:02}-m{m}v{v}s{s}")
            })
            .collect(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Generates and writes a dataset.
pub fn gen_data(cfg: &GenConfig, dir: &Path) -> Result<DatasetManifest> {
    let data = generate(cfg)?;
    write_dataset(&data, dir, "synthetic-three-order")
}

// ---- generator self-test --------------------------------------------------------------

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_survival(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Per image, the diagonal of the third-order pooled statistic of its raw
/// pixels (one observation per pixel, one dimension per channel).
pub fn pixel_skewness(set: &ImageSet, i: usize) -> Result<Vec<f64>> {
    let [c, h, w] = set.image_shape();
    let obs = ObservationMatrix::from_feature_map(&Tensor::new(&[c, h, w], set.image(i).to_vec())?)?;
    let c3 = mospool::pool_order3(&obs, &PoolConfig::default())?;
    Ok((0..c).map(|k| c3.data()[k * c + k]).collect())
}

/// Bonferroni-adjusted smallest KS p-value over classes and channels,
/// comparing each class's per-image pixel skewness in one channel against
/// all other classes pooled.
pub fn skewness_ks_min_p(set: &ImageSet) -> Result<f64> {
    let per_image: Vec<Vec<f64>> = (0..set.len()).map(|i| pixel_skewness(set, i)).collect::<Result<_>>()?;
    let mut min_p: f64 = 1.0;
    let mut tests = 0;
    for &class in set.by_class().keys() {
        for k in 0..set.image_shape()[0] {
            let (inside, outside): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| set.labels()[i] == class);
            if outside.is_empty() {
                continue;
            }
            let inside: Vec<f64> = inside.iter().map(|&i| per_image[i][k]).collect();
            let outside: Vec<f64> = outside.iter().map(|&i| per_image[i][k]).collect();
            min_p = min_p.min(ks_two_sample(&inside, &outside).1);
            tests += 1;
        }
    }
    Ok((min_p * tests as f64).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen(skew: f64) -> GenConfig {
        GenConfig {
            classes: 20,
            per_class: 6,
            image_shape: [3, 8, 8],
            skew,
            seed: 5,
        }
    }

    #[test]
    fn twenty_classes_split_twelve_four_four() {
        assert_eq!(split_counts(20), (12, 4, 4));
        let d = generate(&GenConfig { per_class: 100, ..small_gen(1.0) }).unwrap();
        assert_eq!(d.all.len(), 2000);
        assert_eq!(
            (d.base_classes.len(), d.val_classes.len(), d.novel_classes.len()),
            (12, 4, 4)
        );
    }

    #[test]
    fn class_factor_triples_are_distinct() {
        let set: BTreeSet<[usize; 3]> = (0..MAX_CLASSES).map(class_factors).collect();
        assert_eq!(set.len(), MAX_CLASSES);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate(&small_gen(1.0)).unwrap();
        let b = generate(&small_gen(1.0)).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 6, ..small_gen(1.0) }).unwrap();
        assert_ne!(a.all, c.all);
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let d = generate(&small_gen(1.0)).unwrap();
        let mut all: Vec<usize> = d
            .base_classes
            .iter()
            .chain(&d.val_classes)
            .chain(&d.novel_classes)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(d.split(Split::Novel).num_classes(), 4);
    }

    #[test]
    fn rejects_too_few_classes() {
        assert!(matches!(
            generate(&GenConfig { classes: 9, ..small_gen(1.0) }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&small_gen(0.5)).unwrap();
        let m = write_dataset(&d, dir.path(), "t").unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(m, loaded);
        assert_eq!(loaded.load_split(dir.path(), Split::Base).unwrap(), d.split(Split::Base));
    }

    #[test]
    fn manifest_rejects_overlap_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&small_gen(0.5)).unwrap();
        let mut m = write_dataset(&d, dir.path(), "t").unwrap();
        m.splits.novel.push(m.splits.base[0].clone());
        let err = m.validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("share classes"), "{err}");
        m.splits.novel.pop();
        fs::write(dir.path().join(&m.splits.val[0].file), [0u8; 3]).unwrap();
        let err = m.validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("3 bytes"), "{err}");
    }

    #[test]
    fn relabel_is_dense_and_order_preserving() {
        let set = ImageSet::new([1, 1, 1], vec![0.0; 4], vec![7, 3, 7, 9]).unwrap();
        assert_eq!(set.relabeled().labels(), &[1, 0, 1, 2]);
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_distribution() {
        let mut rng = Rng::new(1);
        let a: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..500).map(|_| rng.normal() + 0.5).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }

    #[test]
    fn skew_zero_hides_third_order_class_identity() {
        let d = generate(&GenConfig { per_class: 30, ..small_gen(0.0) }).unwrap();
        let p0 = skewness_ks_min_p(&d.all).unwrap();
        assert!(p0 > 0.01, "skew=0 min p {p0}");
        let d = generate(&GenConfig { per_class: 30, ..small_gen(1.0) }).unwrap();
        let p1 = skewness_ks_min_p(&d.all).unwrap();
        assert!(p1 < 1e-6, "skew=1 min p {p1}");
    }
}
