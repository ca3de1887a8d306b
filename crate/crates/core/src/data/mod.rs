//! Labeled video sets, the synthetic bright→dark benchmark, split
//! statistics, and on-disk ingestion.
//!
//! A video directory holds one tensor file per clip plus `labels.csv`
//! (`path,label`, paths relative to the directory, labels 0-based).

pub mod synth;
pub mod tensor_io;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{
    generate_dataset, generate_split, illumination_shift, Domain, DomainStyle, Split, SynthConfig,
    SynthDataset,
};
pub use tensor_io::{read_tensor, write_tensor};

pub const MANIFEST: &str = "labels.csv";

/// Clips of one domain and split with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSet {
    pub videos: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl VideoSet {
    /// Checks that every clip has the same `3×T×H×W` shape, values are
    /// finite, and labels are below `num_classes`.
    pub fn new(videos: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::usage("video set is empty"));
        }
        if videos.len() != labels.len() {
            return Err(Error::usage(format!(
                "{} videos but {} labels",
                videos.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::usage(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let dims = videos[0].dims();
        if dims.len() != 4 || dims[0] != 3 {
            return Err(Error::shape(
                "video_set",
                format!("clips must be 3×T×H×W, got {dims:?}"),
            ));
        }
        for (i, (v, &l)) in videos.iter().zip(&labels).enumerate() {
            if v.dims() != dims {
                return Err(Error::shape(
                    "video_set",
                    format!("clip {i} has dims {:?}, expected {dims:?}", v.dims()),
                ));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "clip {i} contains non-finite values"
                )));
            }
            if l >= num_classes {
                return Err(Error::usage(format!(
                    "clip {i} has label {l} but only {num_classes} classes"
                )));
            }
        }
        Ok(Self {
            videos,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn clip_dims(&self) -> &[usize] {
        self.videos[0].dims()
    }

    /// The same samples reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::usage("order is not a permutation"));
            }
        }
        if order.len() != self.len() {
            return Err(Error::usage("order is not a permutation"));
        }
        Ok(Self {
            videos: order.iter().map(|&i| self.videos[i].clone()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }
}

/// Per-channel mean and population std over every pixel of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pixels_per_channel: usize,
}

pub fn dataset_stats(videos: &[Tensor]) -> Result<DatasetStats> {
    let first = videos
        .first()
        .ok_or_else(|| Error::usage("dataset_stats needs at least one video"))?;
    let channels = *first
        .dims()
        .first()
        .ok_or_else(|| Error::shape("dataset_stats", "scalar video"))?;
    let mut sum = vec![0.0; channels];
    let mut count = 0usize;
    for v in videos {
        if v.dims().first() != Some(&channels) {
            return Err(Error::shape(
                "dataset_stats",
                format!("channel mismatch: {:?}", v.dims()),
            ));
        }
        let per = v.len() / channels;
        for (c, chunk) in v.data().chunks_exact(per).enumerate() {
            sum[c] += chunk.iter().sum::<f64>();
        }
        count += per;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    // second pass keeps the variance free of cancellation
    let mut sq = vec![0.0; channels];
    for v in videos {
        let per = v.len() / channels;
        for (c, chunk) in v.data().chunks_exact(per).enumerate() {
            sq[c] += chunk.iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
        }
    }
    Ok(DatasetStats {
        mean,
        std: sq.iter().map(|s| (s / count as f64).sqrt()).collect(),
        pixels_per_channel: count,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
}

/// Writes every clip as `clip_NNNNN.actn` plus the manifest.
pub fn write_video_set(dir: impl AsRef<Path>, set: &VideoSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for (i, (v, &l)) in set.videos.iter().zip(&set.labels).enumerate() {
        let name = format!("clip_{i:05}.actn");
        write_tensor(dir.join(&name), v)?;
        w.serialize(ManifestRow {
            path: name,
            label: l,
        })
        .map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

/// Reads a directory written by [`write_video_set`] or assembled by hand.
pub fn read_video_set(dir: impl AsRef<Path>, num_classes: usize) -> Result<VideoSet> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| csv_err(&manifest, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Parse {
            path: manifest,
            field: "header",
            detail: format!(
                "expected `path,label`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut videos = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_err(&manifest, e))?;
        let p = PathBuf::from(&row.path);
        let p = if p.is_absolute() { p } else { dir.join(p) };
        videos.push(read_tensor(&p)?);
        labels.push(row.label);
    }
    VideoSet::new(videos, labels, num_classes)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field: "row",
        detail: e.to_string(),
    }
}

/// On-disk benchmark layout: `DIR/{source,target}/{train,val}/` plus
/// `DIR/dataset.json` recording the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
}

pub const DATASET_INFO: &str = "dataset.json";

pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.name()).join(split.name())
}

pub fn write_dataset(
    root: impl AsRef<Path>,
    data: &SynthDataset,
    info: &DatasetInfo,
) -> Result<()> {
    let root = root.as_ref();
    for (d, s, set) in data.splits() {
        write_video_set(split_dir(root, d, s), set)?;
    }
    let path = root.join(DATASET_INFO);
    fs::write(&path, serde_json::to_string_pretty(info)?).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<(SynthDataset, DatasetInfo)> {
    let root = root.as_ref();
    let path = root.join(DATASET_INFO);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: DatasetInfo = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        field: "dataset.json",
        detail: e.to_string(),
    })?;
    let read = |d, s| read_video_set(split_dir(root, d, s), info.num_classes);
    let data = SynthDataset {
        source_train: read(Domain::Source, Split::Train)?,
        source_val: read(Domain::Source, Split::Val)?,
        target_train: read(Domain::Target, Split::Train)?,
        target_val: read(Domain::Target, Split::Val)?,
    };
    if data
        .splits()
        .iter()
        .any(|(_, _, s)| s.clip_dims() != data.source_train.clip_dims())
    {
        return Err(Error::shape(
            "read_dataset",
            "splits disagree on clip shape",
        ));
    }
    Ok((data, info))
}

impl SynthDataset {
    pub fn splits(&self) -> [(Domain, Split, &VideoSet); 4] {
        [
            (Domain::Source, Split::Train, &self.source_train),
            (Domain::Source, Split::Val, &self.source_val),
            (Domain::Target, Split::Train, &self.target_train),
            (Domain::Target, Split::Val, &self.target_val),
        ]
    }
}
