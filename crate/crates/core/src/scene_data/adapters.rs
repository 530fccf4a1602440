//! Converters from public ScanQA / SQA3D JSON exports into the canonical
//! record types. Point clouds and annotation files for real scans are
//! written separately (see `io`); these only map the question records.

use std::collections::HashMap;

use serde::Deserialize;

use super::io::LabelSet;
use super::{quat_norm, QARecord, SituationRecord};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct ScanQaEntry {
    question_id: String,
    scene_id: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    object_ids: Vec<u32>,
    #[serde(default)]
    object_names: Vec<String>,
}

/// Parses a ScanQA split file (a JSON array). Object names missing from
/// `labels` are dropped from `referred_class_ids`. Test-split entries
/// without answers are skipped.
pub fn scanqa_records(json: &str, labels: &LabelSet) -> Result<Vec<QARecord>> {
    let entries: Vec<ScanQaEntry> =
        serde_json::from_str(json).map_err(|e| Error::Load(format!("scanqa: {e}")))?;
    Ok(entries
        .into_iter()
        .filter(|e| !e.answers.is_empty())
        .map(|e| {
            let mut classes: Vec<usize> = e
                .object_names
                .iter()
                .filter_map(|n| labels.class_id(n))
                .collect();
            classes.dedup();
            QARecord {
                question_id: e.question_id,
                scene_id: e.scene_id,
                question: e.question,
                answers: e.answers,
                referred_instance_ids: e.object_ids,
                referred_class_ids: classes,
            }
        })
        .collect())
}

#[derive(Deserialize)]
struct SqaQuestions {
    questions: Vec<SqaQuestion>,
}

#[derive(Deserialize)]
struct SqaQuestion {
    question_id: u64,
    scene_id: String,
    situation: String,
    question: String,
}

#[derive(Deserialize)]
struct SqaAnnotations {
    annotations: Vec<SqaAnnotation>,
}

#[derive(Deserialize)]
struct SqaAnnotation {
    question_id: u64,
    answers: Vec<SqaAnswer>,
    position: SqaXyz,
    rotation: SqaQuat,
}

#[derive(Deserialize)]
struct SqaAnswer {
    answer: String,
}

#[derive(Deserialize)]
struct SqaXyz {
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Deserialize)]
struct SqaQuat {
    _x: f64,
    _y: f64,
    _z: f64,
    _w: f64,
}

/// Joins an SQA3D questions file with its annotations file. Quaternions are
/// renormalized; questions without annotations are skipped.
pub fn sqa3d_records(questions_json: &str, annotations_json: &str) -> Result<Vec<SituationRecord>> {
    let q: SqaQuestions =
        serde_json::from_str(questions_json).map_err(|e| Error::Load(format!("sqa3d questions: {e}")))?;
    let a: SqaAnnotations = serde_json::from_str(annotations_json)
        .map_err(|e| Error::Load(format!("sqa3d annotations: {e}")))?;
    let by_id: HashMap<u64, SqaAnnotation> =
        a.annotations.into_iter().map(|a| (a.question_id, a)).collect();
    let mut out = Vec::new();
    for q in q.questions {
        let Some(ann) = by_id.get(&q.question_id) else { continue };
        let raw = [ann.rotation._x, ann.rotation._y, ann.rotation._z, ann.rotation._w];
        let n = quat_norm(&raw);
        if !(n > 0.0) {
            return Err(Error::Validation {
                record: format!("sqa3d question {}", q.question_id),
                message: "zero rotation quaternion".into(),
            });
        }
        out.push(SituationRecord {
            question_id: q.question_id.to_string(),
            scene_id: q.scene_id,
            situation_text: q.situation,
            position: [ann.position.x, ann.position.y, ann.position.z],
            rotation: raw.map(|v| v / n),
            question: q.question,
            answers: ann.answers.iter().map(|a| a.answer.clone()).collect(),
        });
    }
    Ok(out)
}
