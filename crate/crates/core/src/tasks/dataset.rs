//! Line-delimited dataset files. The first line may be a header echoing the
//! generating configuration; every other line is one example.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub task: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub header: Option<Header>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: Header,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default)]
    split: Split,
    tokens: Vec<usize>,
    targets: Vec<usize>,
    loss_mask: Vec<u8>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        if let Some(h) = &self.header {
            serde_json::to_writer(&mut w, &HeaderLine { header: h.clone() })?;
            w.write_all(b"\n")?;
        }
        for (split, list) in [(Split::Train, &self.train), (Split::Eval, &self.eval)] {
            for ex in list {
                let rec = Record {
                    split,
                    tokens: ex.tokens.clone(),
                    targets: ex.targets.clone(),
                    loss_mask: ex.loss_mask.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut out = Dataset::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 && line.trim_start().starts_with("{\"header\"") {
                let h: HeaderLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
                out.header = Some(h.header);
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            let n = rec.tokens.len();
            if rec.targets.len() != n || rec.loss_mask.len() != n {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "tokens, targets and loss_mask differ in length".into(),
                });
            }
            if let Some(m) = rec.loss_mask.iter().find(|m| **m > 1) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("loss_mask entry {m} is not 0 or 1"),
                });
            }
            let ex = Example {
                tokens: rec.tokens,
                targets: rec.targets,
                loss_mask: rec.loss_mask,
            };
            match rec.split {
                Split::Train => out.train.push(ex),
                Split::Eval => out.eval.push(ex),
            }
        }
        Ok(out)
    }

    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.eval)
    }
}

/// Writes examples without a header, all in the training split.
pub fn save_dataset(examples: &[Example], path: &Path) -> Result<()> {
    Dataset {
        header: None,
        train: examples.to_vec(),
        eval: Vec::new(),
    }
    .save(path)
}

/// Every example of a file, training split first.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let d = Dataset::load(path)?;
    Ok(d.train.into_iter().chain(d.eval).collect())
}

/// Content hash of a file's bytes, printed as 16 hex digits.
pub fn checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", stable_hash_bytes(&bytes)))
}

fn stable_hash_bytes(bytes: &[u8]) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
