//! Datasets, split protocols, and on-disk formats.
//!
//! A dataset directory holds `samples.mstf` (`[N, C, S, P]`), `labels.mstf`
//! (`[N]`, i64) and `meta.json`.

pub mod checkpoint;
pub mod mstf;
pub mod split;
pub mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Per-sample provenance, one entry per sample in every vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(rename = "M")]
    pub classes: usize,
    pub shapes: Shapes,
    pub subjects: Vec<u32>,
    pub sessions: Vec<u32>,
    pub trials: Vec<u32>,
    /// First window of the planted motif.
    #[serde(default)]
    pub onsets: Vec<usize>,
    #[serde(default)]
    pub latents: Vec<Option<f64>>,
    /// Community index of every channel.
    #[serde(default)]
    pub communities: Vec<usize>,
    #[serde(default)]
    pub class_counts: Vec<usize>,
}

impl Meta {
    pub fn new(classes: usize, sample_shape: Vec<usize>) -> Self {
        let n = sample_shape[0];
        Self {
            classes,
            shapes: Shapes { samples: sample_shape, labels: vec![n] },
            subjects: Vec::with_capacity(n),
            sessions: Vec::with_capacity(n),
            trials: Vec::with_capacity(n),
            onsets: Vec::with_capacity(n),
            latents: Vec::with_capacity(n),
            communities: Vec::new(),
            class_counts: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, subject: u32, session: u32, trial: u32, onset: usize, latent: Option<f64>) {
        self.subjects.push(subject);
        self.sessions.push(session);
        self.trials.push(trial);
        self.onsets.push(onset);
        self.latents.push(latent);
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub meta: Meta,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, mut meta: Meta) -> Result<Self> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if samples.ndim() != 4 || labels.len() != n || meta.len() != n {
            return Err(Error::Validation(format!(
                "dataset of shape {:?} has {} labels and {} metadata rows",
                samples.shape(),
                labels.len(),
                meta.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= meta.classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {})", meta.classes)));
        }
        meta.class_counts = vec![0; meta.classes];
        for &y in &labels {
            meta.class_counts[y] += 1;
        }
        meta.shapes = Shapes { samples: samples.shape().to_vec(), labels: vec![n] };
        Ok(Self { samples, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, index: &[usize]) -> Result<LabeledSet> {
        if index.is_empty() {
            return Err(Error::Config("split selects no samples".into()));
        }
        Ok(LabeledSet {
            x: self.samples.select(index)?,
            y: index.iter().map(|&i| self.labels[i]).collect(),
            index: index.to_vec(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        mstf::save_tensor(&dir.join("samples.mstf"), "samples", &self.samples)?;
        mstf::save_labels(&dir.join("labels.mstf"), "labels", &self.labels)?;
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for f in ["samples.mstf", "labels.mstf", "meta.json"] {
            if !dir.join(f).is_file() {
                return Err(Error::Usage(format!("dataset file {} is missing", dir.join(f).display())));
            }
        }
        let (_, samples) = mstf::load_tensor(&dir.join("samples.mstf"))?;
        let (_, labels) = mstf::load_labels(&dir.join("labels.mstf"))?;
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        Dataset::new(samples, labels, meta)
    }
}

/// Samples and labels selected from a [`Dataset`], with their source rows.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub index: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::synth::{gen_synthetic, SynthSpec};
    use super::*;

    #[test]
    fn directory_round_trip() {
        let spec = SynthSpec { n_subjects: 2, sessions_per_subject: 1, trials_per_session: 8, channels: 4, windows: 5, raw_width: 6, ..SynthSpec::default() };
        let d = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert!(back.samples.bit_eq(&d.samples));
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.meta, d.meta);
        assert_eq!(back.meta.class_counts.iter().sum::<usize>(), 16);
        assert!(matches!(Dataset::load(&dir.path().join("nope")), Err(Error::Usage(_))));
    }

    #[test]
    fn subset_gathers_rows() {
        let spec = SynthSpec { n_subjects: 1, sessions_per_subject: 1, trials_per_session: 8, channels: 2, windows: 5, raw_width: 3, ..SynthSpec::default() };
        let d = gen_synthetic(&spec).unwrap();
        let s = d.subset(&[5, 1]).unwrap();
        assert_eq!(s.x.shape(), &[2, 2, 5, 3]);
        assert_eq!(s.y, vec![d.labels[5], d.labels[1]]);
        assert_eq!(s.x.data()[..30], d.samples.data()[150..180]);
        assert!(d.subset(&[]).is_err());
    }
}
