//! Line-delimited JSON dataset files: one header record, then one scene per
//! line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeneratorConfig, Scene};
use crate::error::{Error, Result};
use crate::util::stable_hash;

pub const DATASET_FORMAT: &str = "nudge-scenes/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub n_scenes: usize,
    /// Hash of the generator settings that produced the file.
    pub config_hash: String,
    pub generator: GeneratorConfig,
}

impl DatasetHeader {
    pub fn new(seed: u64, n_scenes: usize, generator: &GeneratorConfig) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            seed,
            n_scenes,
            config_hash: generator_hash(seed, generator),
            generator: generator.clone(),
        }
    }
}

pub fn generator_hash(seed: u64, generator: &GeneratorConfig) -> String {
    stable_hash(&(seed, generator))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Header(DatasetHeader),
    Scene(Scene),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Warning text when the file was produced by different generator
    /// settings than `(seed, generator)`.
    pub fn config_mismatch(&self, seed: u64, generator: &GeneratorConfig) -> Option<String> {
        let expected = generator_hash(seed, generator);
        (expected != self.header.config_hash).then(|| {
            format!(
                "dataset header hash {} does not match the configured generator ({}); \
                 the file was produced with different settings",
                short(&self.header.config_hash),
                short(&expected)
            )
        })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub fn encode_dataset(dataset: &Dataset) -> Result<String> {
    let mut out = serde_json::to_string(&Record::Header(dataset.header.clone()))?;
    out.push('\n');
    for s in &dataset.scenes {
        out.push_str(&serde_json::to_string(&Record::Scene(s.clone()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = encode_dataset(dataset)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn decode_dataset(path: &Path, text: &str) -> Result<Dataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut header = None;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
        match (record, &header) {
            (Record::Header(h), None) if line_no == 1 => {
                if h.format != DATASET_FORMAT {
                    return Err(parse_err(line_no, format!("unsupported format `{}`", h.format)));
                }
                header = Some(h);
            }
            (Record::Header(_), _) => {
                return Err(parse_err(line_no, "unexpected header record".into()));
            }
            (Record::Scene(_), None) => {
                return Err(parse_err(line_no, "scene record before header".into()));
            }
            (Record::Scene(s), Some(_)) => scenes.push(s),
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header".into()))?;
    if header.n_scenes != scenes.len() {
        return Err(parse_err(
            text.lines().count(),
            format!(
                "header declares {} scenes, file holds {}",
                header.n_scenes,
                scenes.len()
            ),
        ));
    }
    Ok(Dataset { header, scenes })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::generate_dataset;

    fn sample(n: usize) -> Dataset {
        let cfg = GeneratorConfig::default();
        Dataset {
            header: DatasetHeader::new(3, n, &cfg),
            scenes: generate_dataset(3, n, &cfg).unwrap(),
        }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        let ds = sample(100);
        save_dataset(&path, &ds).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, ds);
        save_dataset(&path, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncated_file_names_failing_line() {
        let text = encode_dataset(&sample(5)).unwrap();
        let cut = &text[..text.len() - 40];
        match decode_dataset(Path::new("x.jsonl"), cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_generator_is_reported() {
        let ds = sample(3);
        assert!(ds.config_mismatch(3, &GeneratorConfig::default()).is_none());
        let other = GeneratorConfig {
            noise_sigma: 0.3,
            ..GeneratorConfig::default()
        };
        assert!(ds.config_mismatch(3, &other).is_some());
        assert!(ds.config_mismatch(4, &GeneratorConfig::default()).is_some());
    }
}
