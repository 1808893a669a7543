use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    io_err, load_annotations, read_feature_file, write_annotations, write_feature_file, Annotation,
    DataError, FeatureSequence, QueryTokens,
};
use crate::tensor::Tensor;

/// One query with its video and word features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub annotation: Annotation,
    /// `L_v × D_v`
    pub video: Tensor,
    /// `L_q × D_q`
    pub query: Tensor,
}

impl Sample {
    pub fn video_sequence(&self) -> FeatureSequence {
        FeatureSequence::new(self.video.clone(), self.annotation.clip_len)
    }

    pub fn query_tokens(&self) -> QueryTokens {
        QueryTokens::new(self.query.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn d_video(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.val)
            .next()
            .map(|s| s.video.cols())
    }

    pub fn d_query(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.val)
            .next()
            .map(|s| s.query.cols())
    }
}

/// Describes a dataset directory: generator settings and a SHA-256 digest
/// per file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub generator: serde_json::Value,
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `train.jsonl`, `val.jsonl`, `videos/<vid>.fvtg`,
/// `queries/<qid>.fvtg` and `manifest.json` under `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    ds: &Dataset,
    seed: Option<u64>,
    generator: serde_json::Value,
) -> Result<Manifest, DataError> {
    let dir = dir.as_ref();
    for sub in ["videos", "queries"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut files = BTreeMap::new();
    let mut record = |rel: String, dir: &Path| -> Result<(), DataError> {
        let p = dir.join(&rel);
        let bytes = std::fs::read(&p).map_err(io_err(&p))?;
        files.insert(rel, sha256_hex(&bytes));
        Ok(())
    };
    for (split, samples) in [("train", &ds.train), ("val", &ds.val)] {
        let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
        let rel = format!("{split}.jsonl");
        write_annotations(dir.join(&rel), &anns)?;
        record(rel, dir)?;
        for s in samples {
            let v = format!("videos/{}.fvtg", s.annotation.vid);
            write_feature_file(dir.join(&v), &s.video)?;
            record(v, dir)?;
            let q = format!("queries/{}.fvtg", s.annotation.qid);
            write_feature_file(dir.join(&q), &s.query)?;
            record(q, dir)?;
        }
    }
    let manifest = Manifest {
        seed,
        generator,
        files,
    };
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&p, text).map_err(io_err(&p))?;
    Ok(manifest)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>, DataError> {
    let path = dir.join(format!("{split}.jsonl"));
    if split == "val" && !path.exists() {
        return Ok(Vec::new());
    }
    let anns = load_annotations(&path)?;
    let mut out = Vec::with_capacity(anns.len());
    for (i, annotation) in anns.into_iter().enumerate() {
        let video = read_feature_file(dir.join("videos").join(format!("{}.fvtg", annotation.vid)))?;
        let query =
            read_feature_file(dir.join("queries").join(format!("{}.fvtg", annotation.qid)))?;
        if video.rows() != annotation.n_clips() {
            return Err(DataError::Annotation {
                line: i + 1,
                message: format!(
                    "video {} has {} clips, annotation implies {}",
                    annotation.vid,
                    video.rows(),
                    annotation.n_clips()
                ),
            });
        }
        if query.rows() == 0 {
            return Err(DataError::Annotation {
                line: i + 1,
                message: format!("query {} has no tokens", annotation.qid),
            });
        }
        out.push(Sample {
            annotation,
            video,
            query,
        });
    }
    Ok(out)
}

/// Loads a directory written by [`write_dataset`]. `val.jsonl` is optional.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    Ok(Dataset {
        train: load_split(dir, "train")?,
        val: load_split(dir, "val")?,
    })
}
