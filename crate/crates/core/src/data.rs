//! Datasets: IDX image files, synthetic Gaussian blobs, and deterministic
//! minibatch orderings.
//!
//! Minibatch orders come from a ChaCha8 generator keyed by `seed` with the
//! epoch number as its stream id, followed by a Fisher-Yates shuffle
//! (`rand::seq::SliceRandom::shuffle`). The order for any `(seed, epoch)`
//! can be reproduced without replaying earlier epochs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the root directory for `idx://` datasets.
pub const DATA_DIR_ENV: &str = "PERMALIGN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!("{} feature rows", labels.len()), features.nrows()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Features and labels of the given rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.gather(indices);
        Self::new(x, y, self.n_classes, self.split)
    }

    /// The first `n` examples (the whole split if it is smaller).
    pub fn head(&self, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx).expect("non-empty prefix")
    }

    fn map_features(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.features.mapv_inplace(f);
        self
    }
}

/// Scalar standardization statistics shared by every feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let n = data.features.len() as f64;
        let mean = data.features.iter().sum::<f64>() / n;
        let var = data.features.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, data: Dataset) -> Dataset {
        let Standardizer { mean, std } = *self;
        data.map_features(|v| (v - mean) / std)
    }
}

/// Train and test splits normalized with the training statistics.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

impl DataBundle {
    pub fn from_raw(train: Dataset, test: Dataset) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(Error::shape(format!("test width {}", train.dim()), test.dim()));
        }
        let standardizer = Standardizer::fit(&train);
        Ok(Self {
            train: standardizer.apply(train),
            test: standardizer.apply(test),
            standardizer,
        })
    }

    /// Loads a dataset from a URI:
    ///
    /// - `synth://blobs?n=..&d=..&classes=..&sep=..&seed=..` with optional
    ///   `test=` (test examples, default `n/4`), `modes=` (clusters per
    ///   class, default 1), `noise=` (cluster std, default 1) and `latent=`
    ///   (cluster dimension before a fixed random embedding into `d`).
    /// - `idx://<dir>`: MNIST-style files under `$PERMALIGN_DATA_DIR/<dir>`
    ///   (or an absolute `idx:///path`).
    pub fn load(uri: &str) -> Result<Self> {
        let url = url::Url::parse(uri).map_err(|e| Error::Config(format!("bad data uri {uri:?}: {e}")))?;
        match url.scheme() {
            "synth" => {
                if url.host_str() != Some("blobs") {
                    return Err(Error::Config(format!("unknown synthetic generator in {uri:?}")));
                }
                let spec = BlobSpec::from_query(&url)?;
                spec.generate()
            }
            "idx" => {
                let dir = idx_dir(&url)?;
                let train = load_idx_raw(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"), Split::Train)?;
                let test = load_idx_raw(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), Split::Test)?;
                let n_classes = train.n_classes.max(test.n_classes);
                let train = Dataset { n_classes, ..train };
                let test = Dataset { n_classes, ..test };
                Self::from_raw(train, test)
            }
            other => Err(Error::Config(format!("unsupported data scheme {other:?}"))),
        }
    }
}

fn idx_dir(url: &url::Url) -> Result<PathBuf> {
    match url.host_str() {
        Some(host) if !host.is_empty() => {
            let root = std::env::var_os(DATA_DIR_ENV)
                .ok_or_else(|| Error::Config(format!("{DATA_DIR_ENV} is not set")))?;
            let mut p = PathBuf::from(root).join(host);
            let rest = url.path().trim_start_matches('/');
            if !rest.is_empty() {
                p = p.join(rest);
            }
            Ok(p)
        }
        _ => Ok(PathBuf::from(url.path())),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file: `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let rows = read_be_u32(bytes, 8, "images")? as usize;
    let cols = read_be_u32(bytes, 12, "images")? as usize;
    let len = n * rows * cols;
    let pixels = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format(format!("images: truncated payload, need {len} bytes")))?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("labels: truncated payload, need {n} bytes")))
}

/// Loads an image/label pair with pixels scaled to [0, 1], unstandardized.
pub fn load_idx_raw(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let lbl_bytes = fs::read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    if lbls.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", lbls.len())));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let features = Array2::from_shape_fn((n, rows * cols), |(i, j)| f64::from(pixels[i * rows * cols + j]) / 255.0);
    let labels: Vec<usize> = lbls.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, n_classes, split)
}

/// Loads an IDX pair and standardizes it with its own mean and std.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let raw = load_idx_raw(images, labels, Split::Train)?;
    Ok(Standardizer::fit(&raw).apply(raw))
}

/// Gaussian class clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub n_test: usize,
    pub d: usize,
    pub classes: usize,
    pub modes: usize,
    pub separation: f64,
    pub noise: f64,
    /// When nonzero, clusters live in this many dimensions and are mapped
    /// into `d` dimensions by a fixed random linear embedding.
    pub latent: usize,
    pub seed: u64,
}

const CENTER_RETRIES: usize = 1000;

impl BlobSpec {
    pub fn new(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Self {
        Self {
            n,
            n_test: n / 4,
            d,
            classes,
            modes: 1,
            separation,
            noise: 1.0,
            latent: 0,
            seed,
        }
    }

    fn from_query(url: &url::Url) -> Result<Self> {
        let mut n = None;
        let mut d = None;
        let mut classes = None;
        let mut sep = None;
        let mut seed = None;
        let mut test = None;
        let mut modes = 1usize;
        let mut noise = 1.0f64;
        let mut latent = 0usize;
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))
        }
        for (k, v) in url.query_pairs() {
            match k.as_ref() {
                "n" => n = Some(num(&k, &v)?),
                "d" => d = Some(num(&k, &v)?),
                "classes" => classes = Some(num(&k, &v)?),
                "sep" => sep = Some(num(&k, &v)?),
                "seed" => seed = Some(num(&k, &v)?),
                "test" => test = Some(num(&k, &v)?),
                "modes" => modes = num(&k, &v)?,
                "noise" => noise = num(&k, &v)?,
                "latent" => latent = num(&k, &v)?,
                other => return Err(Error::Config(format!("unknown blob parameter {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("blob uri is missing {k}"));
        let n: usize = n.ok_or_else(|| missing("n"))?;
        Ok(Self {
            n,
            n_test: test.unwrap_or(n / 4),
            d: d.ok_or_else(|| missing("d"))?,
            classes: classes.ok_or_else(|| missing("classes"))?,
            modes,
            separation: sep.ok_or_else(|| missing("sep"))?,
            noise,
            latent,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }

    pub fn uri(&self) -> String {
        let mut uri = format!(
            "synth://blobs?n={}&d={}&classes={}&sep={}&seed={}&test={}&modes={}&noise={}",
            self.n, self.d, self.classes, self.separation, self.seed, self.n_test, self.modes, self.noise
        );
        if self.latent > 0 {
            uri += &format!("&latent={}", self.latent);
        }
        uri
    }

    /// Dimension the clusters are drawn in.
    fn cluster_dim(&self) -> usize {
        if self.latent > 0 {
            self.latent
        } else {
            self.d
        }
    }

    /// `latent x d` embedding with `N(0, 1 / latent)` entries.
    fn embedding(&self) -> Array2<f64> {
        let mut rng = stream_rng(self.seed, 3);
        let scale = 1.0 / (self.latent as f64).sqrt();
        Array2::from_shape_simple_fn((self.latent, self.d), || {
            scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
    }

    /// Cluster centers, `classes * modes` rows; cluster `c` has label `c % classes`.
    pub fn centers(&self) -> Result<Array2<f64>> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        if self.modes == 0 || self.d == 0 || self.noise.is_nan() || self.noise < 0.0 || self.separation.is_nan() {
            return Err(Error::InvalidArgument("modes, d must be positive and noise non-negative".into()));
        }
        let k = self.classes * self.modes;
        // Spread chosen so typical pairwise distances are about twice the
        // requested separation.
        let dim = self.cluster_dim();
        let spread = 2.0 * self.separation.max(0.0) / (2.0 * dim as f64).sqrt();
        let mut rng = stream_rng(self.seed, 2);
        let mut centers = Array2::<f64>::zeros((k, dim));
        for c in 0..k {
            let mut placed = false;
            for _ in 0..CENTER_RETRIES {
                let cand: Vec<f64> = (0..dim)
                    .map(|_| -> f64 { spread * Distribution::<f64>::sample(&StandardNormal, &mut rng) })
                    .collect();
                let ok = (0..c).all(|o| {
                    let dist2: f64 = centers.row(o).iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                    dist2.sqrt() >= self.separation
                });
                if ok {
                    centers.row_mut(c).assign(&ndarray::Array1::from(cand));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {k} centers {} apart in {dim} dimensions",
                    self.separation
                )));
            }
        }
        Ok(centers)
    }

    fn sample(&self, centers: &Array2<f64>, n: usize, stream: u64, split: Split) -> Result<Dataset> {
        let mut rng = stream_rng(self.seed, stream);
        let k = centers.nrows();
        let mut x = Array2::<f64>::zeros((n, centers.ncols()));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Round-robin over clusters keeps class priors balanced.
            let cluster = (i % self.classes) + self.classes * ((i / self.classes) % self.modes);
            debug_assert!(cluster < k);
            labels.push(cluster % self.classes);
            for (dst, &c) in x.row_mut(i).iter_mut().zip(centers.row(cluster)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *dst = c + self.noise * z;
            }
        }
        if self.latent > 0 {
            x = x.dot(&self.embedding());
        }
        Dataset::new(x, labels, self.classes, split)
    }

    /// Unstandardized train and test splits.
    pub fn generate_raw(&self) -> Result<(Dataset, Dataset)> {
        if self.n == 0 || self.n_test == 0 {
            return Err(Error::EmptyDataset);
        }
        let centers = self.centers()?;
        Ok((
            self.sample(&centers, self.n, 0, Split::Train)?,
            self.sample(&centers, self.n_test, 1, Split::Test)?,
        ))
    }

    pub fn generate(&self) -> Result<DataBundle> {
        let (train, test) = self.generate_raw()?;
        DataBundle::from_raw(train, test)
    }
}

/// Train-split blobs with the given parameters.
pub fn synth_blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    let spec = BlobSpec::new(n, d, classes, separation, seed);
    let centers = spec.centers()?;
    spec.sample(&centers, n, 0, Split::Train)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Minibatch index slices for one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn minimal_idx_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(1, 1, 1, &[255])).unwrap();
        fs::write(&lbl, idx_labels(&[7])).unwrap();
        let raw = load_idx_raw(&img, &lbl, Split::Train).unwrap();
        assert_eq!(raw.dim(), 1);
        assert_eq!(raw.labels(), &[7]);
        assert_eq!(raw.features()[[0, 0]], 1.0);
        let d = load_idx(&img, &lbl).unwrap();
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.dim(), 1);
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(10, 1, 2, &[0; 20])).unwrap();
        fs::write(&lbl, idx_labels(&[1; 9])).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Format(_))));
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let mut bad = idx_images(1, 1, 1, &[3]);
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad).is_err());
        assert!(parse_idx_images(&idx_images(2, 2, 2, &[1, 2, 3])).is_err());
        assert!(parse_idx_labels(&idx_labels(&[1, 2])[..9]).is_err());
        assert!(parse_idx_labels(&idx_images(1, 1, 1, &[0])).is_err());
    }

    #[test]
    fn standardization_zero_mean_unit_std() {
        let (train, test) = BlobSpec::new(200, 5, 3, 4.0, 9).generate_raw().unwrap();
        let bundle = DataBundle::from_raw(train, test).unwrap();
        let f = bundle.train.features();
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blobs_deterministic_and_balanced() {
        let a = synth_blobs(101, 4, 3, 5.0, 3).unwrap();
        let b = synth_blobs(101, 4, 3, 5.0, 3).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 3];
        for &l in a.labels() {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert_ne!(a, synth_blobs(101, 4, 3, 5.0, 4).unwrap());
    }

    #[test]
    fn blobs_center_separation() {
        let spec = BlobSpec::new(10, 3, 5, 6.0, 1);
        let c = spec.centers().unwrap();
        for i in 0..c.nrows() {
            for j in 0..i {
                let d = (&c.row(i) - &c.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!(d >= 6.0);
            }
        }
    }

    #[test]
    fn blobs_infeasible_or_invalid() {
        assert!(synth_blobs(10, 1, 1, 1.0, 0).is_err());
        // 40 points at pairwise distance >= 1e6 cannot fit a spread of 1e6 in 1-D.
        assert!(synth_blobs(10, 1, 40, 1e6, 0).is_err());
    }

    #[test]
    fn well_separated_blobs_nearest_centroid_exact() {
        let spec = BlobSpec::new(300, 6, 4, 30.0, 2);
        let (train, _) = spec.generate_raw().unwrap();
        let centers = spec.centers().unwrap();
        let x = train.features();
        for (i, &label) in train.labels().iter().enumerate() {
            let best = (0..centers.nrows())
                .min_by(|&a, &b| {
                    let da = (&x.row(i) - &centers.row(a)).mapv(|v| v * v).sum();
                    let db = (&x.row(i) - &centers.row(b)).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best % 4, label);
        }
    }

    #[test]
    fn uri_parsing() {
        let b = DataBundle::load("synth://blobs?n=40&d=3&classes=2&sep=3&seed=5&test=8").unwrap();
        assert_eq!(b.train.len(), 40);
        assert_eq!(b.test.len(), 8);
        assert_eq!(b.train.dim(), 3);
        assert!(DataBundle::load("synth://blobs?n=40&d=3&classes=2&sep=3").is_err());
        assert!(DataBundle::load("synth://blobs?n=40&d=3&classes=2&sep=3&seed=1&bogus=2").is_err());
        assert!(DataBundle::load("ftp://x").is_err());
        let spec = BlobSpec::new(12, 2, 2, 1.0, 3);
        let round = DataBundle::load(&spec.uri()).unwrap();
        assert_eq!(round.train.len(), 12);
    }

    #[test]
    fn batches_partition_every_epoch() {
        for epoch in 0..3 {
            let b = batches(103, 10, 7, epoch);
            assert_eq!(b.len(), 11);
            assert_eq!(b.last().unwrap().len(), 3);
            let mut all: Vec<usize> = b.concat();
            all.sort_unstable();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
        }
        assert_eq!(batches(50, 8, 1, 2), batches(50, 8, 1, 2));
        assert_ne!(batches(50, 8, 1, 2), batches(50, 8, 1, 3));
        let single = batches(5, 100, 0, 0);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 5);
    }
}
