//! Datasets, their on-disk formats and the synthetic domain-shift benchmark.

mod io;
mod synth;

pub use io::{load_manifest, read_series_csv, write_dataset, write_series_csv, MANIFEST_HEADER};
pub use synth::{synth_generate, ClassPrototype, Component, ShiftKind, SynthSpec, TargetDomain};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::signal::TimeSeries;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}:{line}: series file {file} does not exist")]
    MissingFile { path: PathBuf, line: u64, file: PathBuf },
    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, line: u64, label: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// Labelled series sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<TimeSeries>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<TimeSeries>, class_names: Vec<String>) -> Result<Self, DataError> {
        if class_names.is_empty() {
            return Err(DataError::Invalid("no classes".into()));
        }
        let mut ds = Self {
            samples: Vec::with_capacity(samples.len()),
            class_names,
        };
        ds.extend(samples)?;
        Ok(ds)
    }

    /// Classes named `c0, c1, …`.
    pub fn with_class_count(samples: Vec<TimeSeries>, n_classes: usize) -> Result<Self, DataError> {
        Self::new(samples, (0..n_classes).map(|c| format!("c{c}")).collect())
    }

    pub fn empty_like(&self) -> Self {
        Self {
            samples: Vec::new(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn push(&mut self, s: TimeSeries) -> Result<(), DataError> {
        if s.label >= self.class_names.len() {
            return Err(DataError::Invalid(format!(
                "label {} out of range for {} classes",
                s.label,
                self.class_names.len()
            )));
        }
        if let Some(first) = self.samples.first() {
            if first.values().shape() != s.values().shape() {
                return Err(DataError::Invalid(format!(
                    "sample shape {:?} differs from {:?}",
                    s.values().shape(),
                    first.values().shape()
                )));
            }
        }
        self.samples.push(s);
        Ok(())
    }

    pub fn extend(&mut self, it: impl IntoIterator<Item = TimeSeries>) -> Result<(), DataError> {
        it.into_iter().try_for_each(|s| self.push(s))
    }

    pub fn samples(&self) -> &[TimeSeries] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// `(channels, length)` of the samples, if any.
    pub fn sample_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.channels(), s.len()))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Shuffled split into `(first, rest)` with `round(frac·len)` samples first.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        let cut = ((self.len() as f64) * frac).round() as usize;
        let pick = |ids: &[usize]| Dataset {
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }

    /// Samples whose domain tag equals `tag`.
    pub fn filter_domain(&self, tag: &str) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.domain_tag == tag)
                .cloned()
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Domain tag shared by all samples, or `"mixed"`.
    pub fn domain_name(&self) -> String {
        match self.samples.first() {
            Some(first) if self.samples.iter().all(|s| s.domain_tag == first.domain_tag) => {
                first.domain_tag.clone()
            }
            Some(_) => "mixed".into(),
            None => "empty".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mixed_shapes_and_bad_labels() {
        let a = TimeSeries::univariate(vec![0.0; 8], 0, "d").unwrap();
        let b = TimeSeries::univariate(vec![0.0; 9], 0, "d").unwrap();
        assert!(Dataset::with_class_count(vec![a.clone(), b], 2).is_err());
        let c = TimeSeries::univariate(vec![0.0; 8], 2, "d").unwrap();
        assert!(Dataset::with_class_count(vec![a.clone(), c], 2).is_err());
        let ds = Dataset::with_class_count(vec![a.clone(), a], 2).unwrap();
        assert_eq!(ds.sample_shape(), Some((1, 8)));
    }

    #[test]
    fn split_partitions() {
        let xs = (0..10)
            .map(|i| TimeSeries::univariate(vec![i as f64; 4], i % 2, "d").unwrap())
            .collect();
        let ds = Dataset::with_class_count(xs, 2).unwrap();
        let (a, b) = ds.split(0.7, 3);
        assert_eq!((a.len(), b.len()), (7, 3));
        let mut firsts: Vec<f64> = a.samples().iter().chain(b.samples()).map(|s| s.channel(0)[0]).collect();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, (0..10).map(f64::from).collect::<Vec<_>>());
    }
}
