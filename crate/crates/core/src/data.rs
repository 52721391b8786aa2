//! Labeled low-dimensional datasets.
//!
//! Record i has class i mod K, and every coordinate is drawn from one seeded
//! stream in record order, so a (spec, count, seed) triple fixes the file.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::noise::{seeded, NoiseSource};
use crate::toy_oracle::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    ToyGaussian { model: ToyModel },
    /// Two interleaved half circles in 2-D; class 0 is the upper moon.
    TwoMoons { noise: f64 },
    /// 2-D spiral; class 0 is the inner half of the roll.
    SwissRoll { noise: f64 },
}

impl Generator {
    pub fn dim(&self) -> usize {
        match self {
            Generator::ToyGaussian { model } => model.dim(),
            _ => 2,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Generator::ToyGaussian { model } => model.classes(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Generator::ToyGaussian { model } => model.validate(),
            Generator::TwoMoons { noise } | Generator::SwissRoll { noise } => {
                if !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::Dataset(format!("noise must be >= 0, got {noise}")));
                }
                Ok(())
            }
        }
    }

    fn draw<N: NoiseSource + ?Sized>(&self, class: usize, rng: &mut N) -> Result<Vec<f64>> {
        match self {
            Generator::ToyGaussian { model } => model.sample(class, rng),
            Generator::TwoMoons { noise } => {
                let u = uniform01(rng) * PI;
                let (x, y) = if class == 0 {
                    (u.cos(), u.sin())
                } else {
                    (1.0 - u.cos(), 0.5 - u.sin())
                };
                Ok(vec![x + noise * rng.standard_normal(), y + noise * rng.standard_normal()])
            }
            Generator::SwissRoll { noise } => {
                let u = (class as f64 + uniform01(rng)) / 2.0;
                let angle = 1.5 * PI * (1.0 + 2.0 * u);
                let radius = angle / (3.0 * PI);
                Ok(vec![
                    radius * angle.cos() + noise * rng.standard_normal(),
                    radius * angle.sin() + noise * rng.standard_normal(),
                ])
            }
        }
    }
}

/// Φ(z) of a standard normal draw, so uniforms come from the same stream.
fn uniform01<N: NoiseSource + ?Sized>(rng: &mut N) -> f64 {
    let z = rng.standard_normal();
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

// Abramowitz–Stegun 7.1.26; only used to spread points along a curve.
fn erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
            * t
            * (-x * x).exp();
    y.copysign(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub x: Mat,
    pub classes: Vec<usize>,
    pub class_count: usize,
}

impl ToyDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.generator.validate()?;
        let (d, k) = (spec.generator.dim(), spec.generator.classes());
        let mut rng = seeded(spec.seed);
        let mut x = Array2::zeros((spec.count, d));
        let mut classes = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let c = i % k;
            let row = spec.generator.draw(c, &mut rng)?;
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
            classes.push(c);
        }
        Ok(ToyDataset {
            x,
            classes,
            class_count: k,
        })
    }

    pub fn new(x: Mat, classes: Vec<usize>, class_count: usize) -> Result<Self> {
        if x.nrows() != classes.len() {
            return Err(Error::Dataset(format!("{} rows but {} labels", x.nrows(), classes.len())));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= class_count) {
            return Err(Error::Class {
                class: c,
                classes: class_count,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite coordinate".into()));
        }
        Ok(ToyDataset { x, classes, class_count })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).to_vec()
    }

    /// Empirical mean of one class, or `None` if it has no records.
    pub fn class_mean(&self, class: usize) -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.classes[i] == class).collect();
        if idx.is_empty() {
            return None;
        }
        let sum = idx.iter().fold(vec![0.0; self.dim()], |mut acc, &i| {
            acc.iter_mut().zip(self.x.row(i)).for_each(|(a, v)| *a += v);
            acc
        });
        Some(sum.into_iter().map(|s| s / idx.len() as f64).collect())
    }

    /// Per-coordinate (min, max), or `None` when empty.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() {
            return None;
        }
        let lo = self.x.columns().into_iter().map(|c| c.fold(f64::INFINITY, |a, &b| a.min(b))).collect();
        let hi = self.x.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
        Some((lo, hi))
    }

    /// First `n` records (or all of them).
    pub fn head(&self, n: usize) -> ToyDataset {
        let n = n.min(self.len());
        ToyDataset {
            x: self.x.slice(ndarray::s![..n, ..]).to_owned(),
            classes: self.classes[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    /// CSV with header x_1..x_d, class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x_{j}")).collect();
        header.push("class".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, c) in self.classes.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(c.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Dataset(e.to_string()))
    }

    /// Reads the [`write_csv`](Self::write_csv) layout; `class_count` is the
    /// largest label + 1 unless given.
    pub fn read_csv<R: Read>(input: R, class_count: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d).map(|j| format!("x_{j}")).chain(["class".to_string()]).collect();
        if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Dataset(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut values = Vec::new();
        let mut classes = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Dataset(format!("record {}: bad {what}", line + 1));
            for j in 0..d {
                values.push(rec[j].trim().parse::<f64>().map_err(|_| bad(&format!("x_{}", j + 1)))?);
            }
            classes.push(rec[d].trim().parse::<usize>().map_err(|_| bad("class"))?);
        }
        let k = class_count.unwrap_or_else(|| classes.iter().max().map_or(1, |m| m + 1));
        let x = Array2::from_shape_vec((classes.len(), d), values).expect("row-major records");
        ToyDataset::new(x, classes, k)
    }

    pub fn load(path: &Path, class_count: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, class_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    /// SHA-256 of the CSV serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(count: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            generator: Generator::ToyGaussian {
                model: ToyModel::two_class(),
            },
            count,
            seed,
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = ToyDataset::generate(&toy(0, 1)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x_1,x_2,class\n");
        assert!(ds.bounding_box().is_none());
    }

    #[test]
    fn regeneration_is_exact_and_round_trips() {
        let a = ToyDataset::generate(&toy(50, 3)).unwrap();
        assert_eq!(a, ToyDataset::generate(&toy(50, 3)).unwrap());
        assert_ne!(a.fingerprint(), ToyDataset::generate(&toy(50, 4)).unwrap().fingerprint());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = ToyDataset::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn class_means_match_model() {
        let ds = ToyDataset::generate(&toy(10_000, 7)).unwrap();
        let tol = 4.0 * 0.5 / 5000f64.sqrt();
        for (c, mu) in [(0, [-2.0, 0.0]), (1, [2.0, 0.0])] {
            let m = ds.class_mean(c).unwrap();
            assert!(m.iter().zip(mu).all(|(a, b)| (a - b).abs() < tol), "{m:?}");
        }
    }

    #[test]
    fn curves_have_two_balanced_classes() {
        for g in [Generator::TwoMoons { noise: 0.05 }, Generator::SwissRoll { noise: 0.05 }] {
            let ds = ToyDataset::generate(&DatasetSpec {
                generator: g,
                count: 101,
                seed: 0,
            })
            .unwrap();
            assert_eq!(ds.classes.iter().filter(|&&c| c == 0).count(), 51);
            assert!(ds.x.iter().all(|v| v.is_finite() && v.abs() < 3.0));
        }
        assert!(Generator::TwoMoons { noise: -1.0 }.validate().is_err());
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(ToyDataset::read_csv("a,b\n1,0\n".as_bytes(), None).is_err());
        assert!(ToyDataset::read_csv("x_1,class\nfoo,0\n".as_bytes(), None).is_err());
        assert!(ToyDataset::read_csv("x_1,class\n1.0,3\n".as_bytes(), Some(2)).is_err());
        let ds = ToyDataset::read_csv("x_1,class\n1.5,1\n".as_bytes(), None).unwrap();
        assert_eq!(ds.class_count, 2);
    }
}
