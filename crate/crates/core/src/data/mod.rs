//! Samples, splits and dataset directories.
//!
//! A dataset directory holds `images/<id>.ppm`, `masks/<id>.pgm` and a
//! `split.txt` with `[train]`, `[test]` and `[val]` sections listing one id
//! per line.

pub mod netpbm;
pub mod resize;
pub mod synth;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use resize::{resize_bilinear, resize_mask};
pub use synth::generate_synthetic_dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `(1, H, W)` in `{0, 1}`.
    pub mask: Tensor<T>,
    pub id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn hw(&self) -> (usize, usize) {
        let d = self.image.dims();
        (d[1], d[2])
    }

    /// Checks channel counts, matching sizes and mask binarity.
    pub fn validate(&self) -> Result<()> {
        match (self.image.dims(), self.mask.dims()) {
            ([3, h, w], [1, mh, mw]) if (h, w) == (mh, mw) => {}
            (a, b) => {
                return Err(Error::shape(
                    "sample",
                    format!("`{}`: image {a:?} and mask {b:?} do not pair up", self.id),
                ))
            }
        }
        if self.mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::InvalidArgument(format!("mask of `{}` is not binary", self.id)));
        }
        Ok(())
    }

    pub fn resized(&self, hw: (usize, usize)) -> Result<Self> {
        if self.hw() == hw {
            return Ok(self.clone());
        }
        Ok(Sample {
            image: resize_bilinear(&self.image, hw)?,
            mask: resize_mask(&self.mask, hw)?,
            id: self.id.clone(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub val: Vec<String>,
}

/// Section sizes for `n` items: train `floor(0.8n)`, test `round(0.1n)`
/// (halves up), val the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let test = (n + 5) / 10;
    (train, test, n - train - test)
}

/// Seeded shuffle followed by an 80/10/10 partition.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 10 {
        return Err(Error::InvalidArgument(format!("splitting needs at least 10 ids, got {}", ids.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate id `{dup}`")));
    }
    let mut order = ids.to_vec();
    SeededRng::new(seed).shuffle(&mut order);
    let (train, test, _) = split_sizes(order.len());
    let val = order.split_off(train + test);
    let test = order.split_off(train);
    Ok(DatasetSplit { train: order, test, val })
}

impl DatasetSplit {
    pub fn section(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            "val" => Ok(&self.val),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (expected train, test or val)"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, ids) in [("train", &self.train), ("test", &self.test), ("val", &self.val)] {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = DatasetSplit::default();
        let mut seen_sections = HashSet::new();
        let mut seen_ids = HashSet::new();
        let mut current: Option<&mut Vec<String>> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !seen_sections.insert(name.to_string()) {
                    return Err(Error::Corrupt(format!("split.txt line {}: repeated section [{name}]", lineno + 1)));
                }
                current = Some(match name {
                    "train" => &mut split.train,
                    "test" => &mut split.test,
                    "val" => &mut split.val,
                    _ => return Err(Error::Corrupt(format!("split.txt line {}: unknown section [{name}]", lineno + 1))),
                });
                continue;
            }
            let Some(section) = current.as_deref_mut() else {
                return Err(Error::Corrupt(format!("split.txt line {}: id before any section", lineno + 1)));
            };
            if !seen_ids.insert(line.to_string()) {
                return Err(Error::Corrupt(format!("split.txt line {}: id `{line}` listed twice", lineno + 1)));
            }
            section.push(line.to_string());
        }
        if seen_sections.len() != 3 {
            return Err(Error::Corrupt("split.txt must contain [train], [test] and [val]".into()));
        }
        Ok(split)
    }
}

/// Why a sample is being read. Lets tests prove that held-out data never
/// reaches a gradient computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Fit,
    Evaluate,
}

pub trait SampleSource<T: Scalar> {
    fn load(&self, id: &str, purpose: Purpose) -> Result<Sample<T>>;
}

#[derive(Clone, Debug)]
pub struct InMemoryDataset<T> {
    samples: Vec<Sample<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> InMemoryDataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate id `{}`", s.id)));
            }
        }
        Ok(InMemoryDataset { samples, index })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }
}

impl<T: Scalar> SampleSource<T> for InMemoryDataset<T> {
    fn load(&self, id: &str, _purpose: Purpose) -> Result<Sample<T>> {
        self.index
            .get(id)
            .map(|&i| self.samples[i].clone())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id `{id}`")))
    }
}

/// A dataset directory on disk. Samples are optionally resized on load.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
    resize: Option<(usize, usize)>,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir {
            root: root.into(),
            resize: None,
        }
    }

    pub fn with_resize(mut self, hw: Option<(usize, usize)>) -> Self {
        self.resize = hw;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.pgm"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.txt")
    }

    pub fn read_split(&self) -> Result<DatasetSplit> {
        let path = self.split_path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        DatasetSplit::parse(&text)
    }

    /// Writes every sample plus `split.txt`, creating directories as needed.
    pub fn write<T: Scalar>(&self, samples: &[Sample<T>], split: &DatasetSplit) -> Result<()> {
        for sub in ["images", "masks"] {
            let dir = self.root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for s in samples {
            s.validate()?;
            write_ppm(&self.image_path(&s.id), &s.image)?;
            write_pgm(&self.mask_path(&s.id), &s.mask)?;
        }
        let path = self.split_path();
        std::fs::write(&path, split.to_text()).map_err(|e| Error::io(&path, e))
    }

    /// Native `(H, W)` of one sample, read from its image header.
    pub fn native_hw(&self, id: &str) -> Result<(usize, usize)> {
        let img: Tensor<f32> = read_ppm(&self.image_path(id))?;
        Ok((img.dims()[1], img.dims()[2]))
    }
}

impl<T: Scalar> SampleSource<T> for DatasetDir {
    fn load(&self, id: &str, _purpose: Purpose) -> Result<Sample<T>> {
        let sample = Sample {
            image: read_ppm(&self.image_path(id))?,
            mask: read_pgm::<T>(&self.mask_path(id))?.map(|v| if v >= T::from_f64_lossy(0.5) { T::one() } else { T::zero() })?,
            id: id.to_string(),
        };
        sample.validate()?;
        match self.resize {
            Some(hw) => sample.resized(hw),
            None => Ok(sample),
        }
    }
}

/// Records every load as `(id, purpose)`.
pub struct AccessLog<S> {
    inner: S,
    log: RefCell<Vec<(String, Purpose)>>,
}

impl<S> AccessLog<S> {
    pub fn new(inner: S) -> Self {
        AccessLog {
            inner,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<(String, Purpose)> {
        self.log.borrow().clone()
    }
}

impl<T: Scalar, S: SampleSource<T>> SampleSource<T> for AccessLog<S> {
    fn load(&self, id: &str, purpose: Purpose) -> Result<Sample<T>> {
        self.log.borrow_mut().push((id.to_string(), purpose));
        self.inner.load(id, purpose)
    }
}

/// Stacks samples into `(N, 3, H, W)` images and `(N, 1, H, W)` masks.
pub fn batch<T: Scalar>(samples: &[Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn split_sizes_match_examples() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(16), (12, 2, 2));
        assert_eq!(split_sizes(612), (489, 61, 62));
    }

    #[test]
    fn split_is_seeded_partition() {
        let all = ids(612);
        let a = split_dataset(&all, 3).unwrap();
        assert_eq!(a, split_dataset(&all, 3).unwrap());
        assert_ne!(a, split_dataset(&all, 4).unwrap());
        let mut union: Vec<_> = a.train.iter().chain(&a.test).chain(&a.val).cloned().collect();
        union.sort();
        let mut expected = all.clone();
        expected.sort();
        assert_eq!(union, expected);
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&ids(9), 0).is_err());
        let mut dup = ids(10);
        dup[3] = "id0".into();
        assert!(split_dataset(&dup, 0).is_err());
    }

    #[test]
    fn split_text_round_trip() {
        let s = split_dataset(&ids(20), 1).unwrap();
        assert_eq!(DatasetSplit::parse(&s.to_text()).unwrap(), s);
        assert!(DatasetSplit::parse("[train]\na\n[test]\n").is_err());
        assert!(DatasetSplit::parse("a\n[train]\n[test]\n[val]\n").is_err());
        assert!(DatasetSplit::parse("[train]\na\n[test]\na\n[val]\n").is_err());
        assert!(DatasetSplit::parse("[train]\n[test]\n[val]\n[extra]\n").is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic_dataset::<f32>(10, (16, 24), 5).unwrap();
        let split = split_dataset(&samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), 5).unwrap();
        let ds = DatasetDir::new(dir.path());
        ds.write(&samples, &split).unwrap();
        assert_eq!(ds.read_split().unwrap(), split);
        let back: Sample<f32> = ds.load(&samples[0].id, Purpose::Evaluate).unwrap();
        assert_eq!(back.mask, samples[0].mask);
        let err = SampleSource::<f32>::load(&ds, "nope", Purpose::Fit).unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
        let small: Sample<f32> = ds.clone().with_resize(Some((8, 8))).load(&samples[1].id, Purpose::Fit).unwrap();
        assert_eq!(small.image.dims(), &[3, 8, 8]);
        assert_eq!(ds.native_hw(&samples[2].id).unwrap(), (16, 24));
    }

    #[test]
    fn access_log_records_purpose() {
        let mem = InMemoryDataset::new(generate_synthetic_dataset::<f32>(2, (16, 16), 0).unwrap()).unwrap();
        let logged = AccessLog::new(mem);
        let _ = SampleSource::<f32>::load(&logged, "syn_00001", Purpose::Fit).unwrap();
        assert_eq!(logged.entries(), vec![("syn_00001".to_string(), Purpose::Fit)]);
    }
}
