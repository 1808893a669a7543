//! Ranked moment prediction and the prediction line-JSON format.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io_err, DataError, Sample};
use crate::heads::rank_saliency;
use crate::metrics::{nms, Moment, NMS_THRESHOLD};
use crate::model::Model;
use crate::pyramid::decode_boundaries;
use crate::tensor::Result;

pub const DEFAULT_TOP_N: usize = 10;

/// Ranked moments and clip saliency for one query. Saliency of invalid clips
/// is `-inf` in memory and `null` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub qid: String,
    pub moments: Vec<Moment>,
    #[serde(with = "saliency_serde")]
    pub saliency: Vec<f64>,
}

mod saliency_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub top_n: usize,
    pub nms_threshold: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            nms_threshold: NMS_THRESHOLD,
        }
    }
}

/// Every decoded candidate of one forward pass, before suppression, with
/// the clip saliency.
pub fn candidates(model: &Model, sample: &Sample) -> Result<(Vec<Moment>, Vec<f64>)> {
    let video = sample.video_sequence();
    let query = sample.query_tokens();
    let (tape, out) = model.infer(&video, &query)?;
    let confidence = tape.value(out.scores.confidence).data();
    let duration = sample.annotation.duration;
    let clip_len = video.clip_len;
    let mut moments = Vec::new();
    let mut base = 0;
    for (k, (&off, mask)) in out.offsets.iter().zip(&out.pyramid.masks).enumerate() {
        let rows: Vec<[f64; 2]> = tape
            .value(off)
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        for (i, start, end) in decode_boundaries(&rows, k, clip_len, duration) {
            if mask.is_valid(i) {
                moments.push(Moment::new(start, end, confidence[base + i]));
            }
        }
        base += rows.len();
    }
    let saliency = rank_saliency(tape.value(out.saliency).data(), &out.fused.mask);
    Ok((moments, saliency))
}

/// Forward pass, decode, rank, suppress and truncate.
pub fn predict(model: &Model, sample: &Sample, opts: PredictOptions) -> Result<PredictionSet> {
    let (moments, saliency) = candidates(model, sample)?;
    let mut moments = nms(&moments, opts.nms_threshold);
    moments.truncate(opts.top_n);
    Ok(PredictionSet {
        qid: sample.annotation.qid.clone(),
        moments,
        saliency,
    })
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[PredictionSet]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionSet>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Annotation {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_predictions(&text)
}

/// Indexes predictions by query id for evaluation.
pub fn by_qid(preds: &[PredictionSet]) -> HashMap<String, (Vec<Moment>, Vec<f64>)> {
    preds
        .iter()
        .map(|p| (p.qid.clone(), (p.moments.clone(), p.saliency.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neg_inf_saliency_roundtrips_through_null() {
        let p = PredictionSet {
            qid: "q".into(),
            moments: vec![Moment::new(0.0, 2.0, 0.9)],
            saliency: vec![0.5, f64::NEG_INFINITY],
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("null"));
        let back = parse_predictions(&s).unwrap();
        assert_eq!(back, vec![p]);
    }
}
