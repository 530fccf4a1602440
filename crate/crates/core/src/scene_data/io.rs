//! Canonical on-disk dataset layout.
//!
//! ```text
//! <root>/labels.json                      {"class_names": ["red box", ...]}
//! <root>/<split>/scenes/<scene_id>.ply    ASCII PLY, see `ply`
//! <root>/<split>/scenes/<scene_id>.annotations.json
//!     {"scene_id", "scene_type", "captions": [..],
//!      "objects": [{"instance_id", "class_id", "box": {"center": [x,y,z], "size": [dx,dy,dz]}}]}
//! <root>/<split>/qa.json                  [QARecord, ...]
//!     {"question_id", "scene_id", "question", "answers": [..],
//!      "referred_instance_ids": [..], "referred_class_ids": [..]}
//! <root>/<split>/sqa.json                 [SituationRecord, ...]
//!     {"question_id", "scene_id", "situation_text", "position": [x,y,z],
//!      "rotation": [x,y,z,w], "question", "answers": [..]}
//! ```
//!
//! `<split>` is one of `train`, `val`, `test`. All JSON objects reject unknown keys.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generator::{generate_scene_of_type, GeneratorConfig};
use super::ply::{from_ply_str, to_ply_string};
use super::{quat_norm, ObjectAnnotation, QARecord, SceneSample, SituationRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSet {
    pub class_names: Vec<String>,
}

impl LabelSet {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        let n = super::normalize_answer(name);
        self.class_names.iter().position(|c| super::normalize_answer(c) == n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSet,
    pub scenes: Vec<SceneSample>,
    pub qa: Vec<QARecord>,
    pub sqa: Vec<SituationRecord>,
}

impl Dataset {
    pub fn scene(&self, scene_id: &str) -> Option<&SceneSample> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn scene_index(&self) -> BTreeMap<&str, usize> {
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scene_id.as_str(), i))
            .collect()
    }

    /// Checks every cross-reference and invariant; errors name the record.
    pub fn validate(&self) -> Result<()> {
        let nc = self.labels.num_classes();
        let mut seen = HashSet::new();
        for s in &self.scenes {
            if !seen.insert(s.scene_id.as_str()) {
                return Err(invalid(&s.scene_id, "duplicate scene id"));
            }
            let mut ids = HashSet::new();
            for a in &s.annotations {
                if a.class_id >= nc {
                    return Err(invalid(
                        &s.scene_id,
                        &format!("instance {} has class {} outside the {nc}-class label set", a.instance_id, a.class_id),
                    ));
                }
                if !ids.insert(a.instance_id) {
                    return Err(invalid(&s.scene_id, &format!("duplicate instance id {}", a.instance_id)));
                }
            }
        }
        for q in &self.qa {
            let rec = format!("qa record {}", q.question_id);
            let scene = self
                .scene(&q.scene_id)
                .ok_or_else(|| invalid(&rec, &format!("unknown scene_id {}", q.scene_id)))?;
            if q.answers.is_empty() {
                return Err(invalid(&rec, "empty answer set"));
            }
            for id in &q.referred_instance_ids {
                if scene.annotation(*id).is_none() {
                    return Err(invalid(&rec, &format!("unknown instance id {id} in {}", q.scene_id)));
                }
            }
            if let Some(c) = q.referred_class_ids.iter().find(|c| **c >= nc) {
                return Err(invalid(&rec, &format!("class id {c} outside the label set")));
            }
        }
        for s in &self.sqa {
            let rec = format!("sqa record {}", s.question_id);
            if self.scene(&s.scene_id).is_none() {
                return Err(invalid(&rec, &format!("unknown scene_id {}", s.scene_id)));
            }
            if s.answers.is_empty() {
                return Err(invalid(&rec, "empty answer set"));
            }
            if (quat_norm(&s.rotation) - 1.0).abs() > 1e-6 {
                return Err(invalid(&rec, "rotation quaternion is not unit norm"));
            }
            if s.position.iter().any(|v| !v.is_finite()) {
                return Err(invalid(&rec, "non-finite position"));
            }
        }
        Ok(())
    }

    fn sort(&mut self) {
        self.scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        self.qa.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        self.sqa.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    }
}

fn invalid(record: &str, message: &str) -> Error {
    Error::Validation {
        record: record.to_string(),
        message: message.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    scene_id: String,
    scene_type: String,
    captions: Vec<String>,
    objects: Vec<ObjectAnnotation>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// Loads one split. Nothing is returned unless every file parses and every
/// cross-reference resolves.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let labels: LabelSet = read_json(&root.join("labels.json"))?;
    let dir = split_dir(root, split);
    let scene_dir = dir.join("scenes");
    let entries = fs::read_dir(&scene_dir)
        .map_err(|e| Error::Load(format!("{}: {e}", scene_dir.display())))?;
    let mut ann_paths = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.to_string_lossy().ends_with(".annotations.json") {
            ann_paths.push(p);
        }
    }
    ann_paths.sort();
    if ann_paths.is_empty() {
        return Err(Error::Load(format!("no scenes in {}", scene_dir.display())));
    }
    let mut scenes = Vec::with_capacity(ann_paths.len());
    for p in ann_paths {
        let ann: AnnotationFile = read_json(&p)?;
        let ply_path = scene_dir.join(format!("{}.ply", ann.scene_id));
        let text = fs::read_to_string(&ply_path)
            .map_err(|e| Error::Load(format!("{}: {e}", ply_path.display())))?;
        let cloud = from_ply_str(&text)
            .map_err(|e| Error::Load(format!("{}: {e}", ply_path.display())))?;
        scenes.push(SceneSample {
            scene_id: ann.scene_id,
            scene_type: ann.scene_type,
            cloud,
            annotations: ann.objects,
            captions: ann.captions,
        });
    }
    let qa: Vec<QARecord> = read_json(&dir.join("qa.json"))?;
    let sqa: Vec<SituationRecord> = read_json(&dir.join("sqa.json"))?;
    let mut ds = Dataset {
        labels,
        scenes,
        qa,
        sqa,
    };
    ds.sort();
    ds.validate()?;
    Ok(ds)
}

/// Writes one split (and `labels.json` at the root).
pub fn write_dataset(root: &Path, split: Split, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(split_dir(root, split).join("scenes"))?;
    write_json(&root.join("labels.json"), &dataset.labels)?;
    let dir = split_dir(root, split);
    for s in &dataset.scenes {
        let scenes = dir.join("scenes");
        fs::write(scenes.join(format!("{}.ply", s.scene_id)), to_ply_string(&s.cloud))?;
        write_json(
            &scenes.join(format!("{}.annotations.json", s.scene_id)),
            &AnnotationFile {
                scene_id: s.scene_id.clone(),
                scene_type: s.scene_type.clone(),
                captions: s.captions.clone(),
                objects: s.annotations.clone(),
            },
        )?;
    }
    write_json(&dir.join("qa.json"), &dataset.qa)?;
    write_json(&dir.join("sqa.json"), &dataset.sqa)?;
    Ok(())
}

/// Seed of the `index`-th scene of a split for a dataset seed.
pub fn scene_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let split_off = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    dataset_seed * 1_000_000 + split_off * 100_000 + index as u64
}

/// Generates a split in memory; scene types alternate so every type is
/// equally represented.
pub fn synthetic_split(
    dataset_seed: u64,
    split: Split,
    num_scenes: usize,
    config: &GeneratorConfig,
) -> Result<Dataset> {
    config.validate()?;
    let mut ds = Dataset {
        labels: LabelSet {
            class_names: config.class_names(),
        },
        scenes: Vec::new(),
        qa: Vec::new(),
        sqa: Vec::new(),
    };
    for i in 0..num_scenes {
        let (scene, qa, sqa) = generate_scene_of_type(
            scene_seed(dataset_seed, split, i),
            i % config.scene_types.len(),
            config,
        )?;
        ds.scenes.push(scene);
        ds.qa.extend(qa);
        ds.sqa.extend(sqa);
    }
    ds.sort();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_data::{AxisAlignedBox, PointCloud};

    fn tiny_scene(id: &str) -> SceneSample {
        SceneSample {
            scene_id: id.into(),
            scene_type: "bedroom".into(),
            cloud: PointCloud::new(
                vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.25]],
                vec![[1.0, 0.0, 0.0], [0.0, 0.5, 1.0]],
            )
            .unwrap(),
            annotations: vec![
                ObjectAnnotation {
                    instance_id: 0,
                    class_id: 0,
                    bbox: AxisAlignedBox::new([0.0, 0.0, 0.2], [0.4, 0.4, 0.4]).unwrap(),
                },
                ObjectAnnotation {
                    instance_id: 1,
                    class_id: 1,
                    bbox: AxisAlignedBox::new([1.0, 0.0, 0.2], [0.4, 0.4, 0.4]).unwrap(),
                },
            ],
            captions: vec!["a bedroom with a red box".into()],
        }
    }

    fn qa(id: &str, scene: &str) -> QARecord {
        QARecord {
            question_id: id.into(),
            scene_id: scene.into(),
            question: "how many red boxes are there".into(),
            answers: vec!["one".into()],
            referred_instance_ids: vec![0],
            referred_class_ids: vec![0],
        }
    }

    fn fixture() -> Dataset {
        Dataset {
            labels: LabelSet {
                class_names: vec!["red box".into(), "blue box".into()],
            },
            scenes: vec![tiny_scene("s1"), tiny_scene("s0")],
            qa: vec![qa("q3", "s1"), qa("q0", "s0"), qa("q1", "s0"), qa("q2", "s1")],
            sqa: vec![SituationRecord {
                question_id: "t0".into(),
                scene_id: "s0".into(),
                situation_text: "i am next to the red box".into(),
                position: [0.5, 0.0, 0.0],
                rotation: [0.0, 0.0, 0.0, 1.0],
                question: "how many objects are on my left".into(),
                answers: vec!["zero".into()],
            }],
        }
    }

    #[test]
    fn two_scene_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Train, &fixture()).unwrap();
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.scenes.len(), 2);
        assert_eq!(ds.qa.len(), 4);
        assert_eq!(ds.scenes[0].scene_id, "s0");
        let ids: Vec<_> = ds.qa.iter().map(|q| q.question_id.as_str()).collect();
        assert_eq!(ids, ["q0", "q1", "q2", "q3"]);
        assert_eq!(ds.scenes[1].cloud, tiny_scene("s1").cloud);
    }

    #[test]
    fn dangling_scene_reference_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Train, &fixture()).unwrap();
        let mut bad = fixture().qa;
        bad.push(qa("q9", "nowhere"));
        fs::write(
            dir.path().join("train/qa.json"),
            serde_json::to_string(&bad).unwrap(),
        )
        .unwrap();
        match load_dataset(dir.path(), Split::Train) {
            Err(Error::Validation { record, .. }) => assert!(record.contains("q9")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_instance_reference_is_rejected() {
        let mut ds = fixture();
        ds.qa[0].referred_instance_ids = vec![42];
        assert!(matches!(ds.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let mut ds = fixture();
        ds.sqa[0].rotation = [0.0, 0.0, 0.0, 1.1];
        assert!(matches!(ds.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn empty_directory_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Train), Err(Error::Load(_))));
    }

    #[test]
    fn unknown_json_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Train, &fixture()).unwrap();
        fs::write(dir.path().join("labels.json"), r#"{"class_names": [], "extra": 1}"#).unwrap();
        assert!(load_dataset(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn synthetic_split_writes_byte_identical_files() {
        let cfg = GeneratorConfig {
            num_points: 600,
            points_per_object: 100,
            ..GeneratorConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let ds = synthetic_split(5, Split::Train, 3, &cfg).unwrap();
            write_dataset(dir.path(), Split::Train, &ds).unwrap();
        }
        for name in ["qa.json", "sqa.json"] {
            assert_eq!(
                fs::read(a.path().join("train").join(name)).unwrap(),
                fs::read(b.path().join("train").join(name)).unwrap()
            );
        }
        let ds = load_dataset(a.path(), Split::Train).unwrap();
        assert_eq!(ds, synthetic_split(5, Split::Train, 3, &cfg).unwrap());
    }
}
