//! EPDS dataset files.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! "EPDS" 0x01
//! u32 class_count
//! u32 input_dim
//! class_count × { u32 class_id, u8 split, u32 sample_count, sample_count·input_dim × f32 }
//! ```
//!
//! Class names go to an optional JSON sidecar next to the file
//! (`name.epds` → `name.meta.json`). The loader uses it when it parses and
//! ignores it otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassData, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EPDS";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    classes: BTreeMap<u32, SidecarClass>,
}

#[derive(Serialize, Deserialize)]
struct SidecarClass {
    name: String,
    split: Split,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes through a `.partial` sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.classes().is_empty() {
        return Err(Error::validation("cannot save a dataset with no classes"));
    }
    let m = dataset.input_dim();
    let payload: usize = dataset.classes().iter().map(|c| c.samples.len() * 4 + 9).sum();
    let mut out = Vec::with_capacity(13 + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32::try_from(dataset.classes().len()).map_err(|_| {
        Error::validation("too many classes for the EPDS format")
    })?.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for c in dataset.classes() {
        out.extend_from_slice(&c.id.to_le_bytes());
        out.push(c.split.code());
        out.extend_from_slice(&(c.samples.rows() as u32).to_le_bytes());
        for &v in c.samples.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(dataset)?;
    write_atomic(path, &bytes)?;
    if !dataset.names.is_empty() {
        let sidecar = Sidecar {
            classes: dataset
                .classes()
                .iter()
                .filter_map(|c| {
                    dataset.names.get(&c.id).map(|name| {
                        (
                            c.id,
                            SidecarClass {
                                name: name.clone(),
                                split: c.split,
                            },
                        )
                    })
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        write_atomic(&sidecar_path(path), &json)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"EPDS\""));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("class count")? as usize;
    let dim_offset = r.pos;
    let m = r.u32("input dimension")? as usize;
    if m == 0 {
        return Err(Error::format(dim_offset as u64, "input dimension is zero"));
    }
    let mut classes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos as u64;
        let id = r.u32("class id")?;
        let split_offset = r.pos as u64;
        let code = r.u8("split")?;
        let split = Split::from_code(code)
            .ok_or_else(|| Error::format(split_offset, format!("invalid split code {code}")))?;
        let samples = r.u32("sample count")? as usize;
        let n = samples
            .checked_mul(m)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(start, "sample payload size overflows"))?;
        let raw = r.take(n, "sample payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        classes.push(ClassData {
            id,
            split,
            samples: Tensor::matrix(samples, m, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Dataset::new(m, classes).map_err(|e| match e {
        Error::Validation(msg) => Error::format(13, msg),
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut ds = decode(&bytes)?;
    if let Ok(text) = fs::read(sidecar_path(path)) {
        if let Ok(sidecar) = serde_json::from_slice::<Sidecar>(&text) {
            ds.names = sidecar
                .classes
                .into_iter()
                .map(|(id, c)| (id, c.name))
                .collect();
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            2,
            vec![
                ClassData {
                    id: 3,
                    split: Split::MetaVal,
                    samples: Tensor::from_rows(&[[0.5, -1.25]]),
                },
                ClassData {
                    id: 9,
                    split: Split::MetaTest,
                    samples: Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny()).unwrap();
        assert_eq!(&bytes[..5], b"EPDS\x01");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 13 + (9 + 8) + (9 + 16));
        assert_eq!(bytes[17], 1);
    }

    #[test]
    fn decode_round_trip() {
        let ds = tiny();
        assert_eq!(decode(&encode(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&tiny()).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_header_fields() {
        let mut bytes = encode(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&tiny()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode(&tiny()).unwrap();
        bytes[17] = 7;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 17, .. })));
        let mut bytes = encode(&tiny()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_dataset_not_saved() {
        let ds = Dataset::new(2, Vec::new()).unwrap();
        assert!(matches!(encode(&ds), Err(Error::Validation(_))));
    }
}
