//! On-disk dataset layout: a JSON manifest plus one binary array file per
//! stored pose array.
//!
//! Array files carry the magic `PSEQ`, a format version, the `T, J, C`
//! dimensions as little-endian u32, then `T·J·C` IEEE-754 binary32 values in
//! row-major (frame, joint, coordinate) order. 2D inputs (`C = 2`) and 3D
//! targets (`C = 3`) live in separate files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::pose::{PoseSequence, SequenceLabels};
use crate::skeleton::Skeleton;

pub const PSEQ_MAGIC: &[u8; 4] = b"PSEQ";
pub const PSEQ_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Pixel dimensions the 2D inputs were normalized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    #[serde(flatten)]
    pub labels: SequenceLabels,
    pub num_frames: usize,
    pub fps: f64,
    pub frames_2d: String,
    pub targets_3d: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub skeleton: Skeleton,
    pub normalization: Normalization,
    pub sequences: Vec<SequenceRecord>,
}

/// A loaded dataset: a shared skeleton and its sequences.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub normalization: Normalization,
    pub sequences: Vec<PoseSequence>,
}

fn write_pseq(path: &Path, t: usize, j: usize, c: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), t * j * c);
    let mut buf = Vec::with_capacity(20 + values.len() * 4);
    buf.extend_from_slice(PSEQ_MAGIC);
    buf.extend_from_slice(&PSEQ_VERSION.to_le_bytes());
    for dim in [t, j, c] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_pseq(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?
        .read_to_end(&mut bytes)?;
    ensure!(
        bytes.len() >= 20,
        Format,
        "{}: truncated header",
        path.display()
    );
    ensure!(
        &bytes[0..4] == PSEQ_MAGIC,
        Format,
        "{}: bad magic",
        path.display()
    );
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    ensure!(
        version == PSEQ_VERSION,
        Format,
        "{}: unknown format version {version}",
        path.display()
    );
    let (t, j, c) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let expected = 20 + t * j * c * 4;
    ensure!(
        bytes.len() == expected,
        Shape,
        "{}: payload holds {} bytes, header declares {}",
        path.display(),
        bytes.len() - 20,
        expected - 20
    );
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((t, j, c, values))
}

/// Writes a dataset directory: `manifest.json` plus one `PSEQ` file per
/// stored array. Sequence files are named `{id}_2d.pseq` / `{id}_3d.pseq`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.skeleton.validate()?;
    fs::create_dir_all(dir)?;
    let j = dataset.skeleton.num_joints();
    let mut records = Vec::with_capacity(dataset.sequences.len());
    for (k, seq) in dataset.sequences.iter().enumerate() {
        ensure!(
            seq.num_joints() == j,
            Shape,
            "sequence {k} has {} joints, skeleton has {j}",
            seq.num_joints()
        );
        let id = format!("seq{k:03}");
        let frames_2d = format!("{id}_2d.pseq");
        write_pseq(
            &dir.join(&frames_2d),
            seq.num_frames(),
            j,
            2,
            seq.frames_raw(),
        )?;
        let targets_3d = match seq.targets_raw() {
            Some(t3) => {
                let name = format!("{id}_3d.pseq");
                write_pseq(&dir.join(&name), seq.num_frames(), j, 3, t3)?;
                Some(name)
            }
            None => None,
        };
        records.push(SequenceRecord {
            id,
            labels: seq.labels.clone(),
            num_frames: seq.num_frames(),
            fps: seq.fps,
            frames_2d,
            targets_3d,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        skeleton: dataset.skeleton.clone(),
        normalization: dataset.normalization,
        sequences: records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Loads and validates a dataset from its manifest path (either the
/// `manifest.json` file itself or the directory containing it).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest_path.display()),
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.format_version == MANIFEST_VERSION,
        Format,
        "unknown manifest format version {}",
        manifest.format_version
    );
    manifest.skeleton.validate()?;
    let j = manifest.skeleton.num_joints();

    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for record in &manifest.sequences {
        let (t, jf, c, frames) = read_pseq(&dir.join(&record.frames_2d))?;
        ensure!(
            c == 2,
            Shape,
            "{}: expected C=2, found {c}",
            record.frames_2d
        );
        ensure!(
            jf == j,
            Shape,
            "{}: holds {jf} joints, skeleton has {j}",
            record.frames_2d
        );
        ensure!(
            t == record.num_frames,
            Shape,
            "{}: holds {t} frames, manifest declares {}",
            record.frames_2d,
            record.num_frames
        );
        let targets = match &record.targets_3d {
            Some(name) => {
                let (t3, j3, c3, values) = read_pseq(&dir.join(name))?;
                ensure!(c3 == 3, Shape, "{name}: expected C=3, found {c3}");
                ensure!(
                    j3 == j,
                    Shape,
                    "{name}: holds {j3} joints, skeleton has {j}"
                );
                ensure!(
                    t3 == t,
                    Shape,
                    "{name}: holds {t3} frames, 2D file holds {t}"
                );
                Some(values)
            }
            None => None,
        };
        sequences.push(PoseSequence::new(
            frames,
            targets,
            j,
            record.fps,
            record.labels.clone(),
        )?);
    }
    Ok(Dataset {
        skeleton: manifest.skeleton,
        normalization: manifest.normalization,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_generate;
    use tempfile::TempDir;

    fn sample_dataset(k: usize, t: usize) -> Dataset {
        let skeleton = Skeleton::h36m_17();
        let sequences = (0..k)
            .map(|i| {
                let labels = SequenceLabels {
                    subject: format!("s{i}"),
                    action: "walk".into(),
                    camera: "c0".into(),
                };
                synth_generate(&skeleton, t, i as u64, labels).unwrap()
            })
            .collect();
        Dataset {
            skeleton,
            normalization: Normalization {
                width: 1000,
                height: 1000,
            },
            sequences,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let ds = sample_dataset(2, 25);
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.sequences, ds.sequences);
        assert_eq!(loaded.skeleton, ds.skeleton);
        // Saving the loaded dataset reproduces identical bytes.
        let dir2 = TempDir::new().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        for name in ["manifest.json", "seq000_2d.pseq", "seq000_3d.pseq"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after round trip");
        }
    }

    #[test]
    fn empty_sequence_list_loads_empty() {
        let dir = TempDir::new().unwrap();
        let ds = sample_dataset(0, 10);
        save_dataset(dir.path(), &ds).unwrap();
        assert!(load_dataset(dir.path()).unwrap().sequences.is_empty());
    }

    #[test]
    fn frame_count_mismatch_is_shape_error() {
        let dir = TempDir::new().unwrap();
        let ds = sample_dataset(1, 25);
        save_dataset(dir.path(), &ds).unwrap();
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(
            &manifest_path,
            text.replace("\"num_frames\": 25", "\"num_frames\": 26"),
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = TempDir::new().unwrap();
        let ds = sample_dataset(1, 10);
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("seq000_2d.pseq")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Io(_)) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_format_error() {
        let dir = TempDir::new().unwrap();
        let ds = sample_dataset(1, 10);
        save_dataset(dir.path(), &ds).unwrap();
        let manifest_path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(
            &manifest_path,
            text.replace("\"format_version\": 1", "\"format_version\": 9"),
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
