//! Parameter checkpoint format: a JSON header followed by raw little-endian
//! f64 payloads, one flat map from parameter name to shape + values.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::DiffError;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, String>,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

/// In-memory checkpoint: string metadata plus named tensors.
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            entries.push(EntryHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                count: t.numel() as u64,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = Header {
            version: VERSION,
            meta: self.meta.clone(),
            entries,
        };
        let hb = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(hb.len() as u32).to_le_bytes())?;
        w.write_all(&hb)?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DiffError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad_format)?;
        if &magic != MAGIC {
            return Err(DiffError::InvalidArg {
                what: "not a checkpoint file (bad magic)",
            });
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(bad_format)?;
        let mut hb = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut hb).map_err(bad_format)?;
        let header: Header = serde_json::from_slice(&hb).map_err(|_| DiffError::InvalidArg {
            what: "checkpoint header is not valid JSON",
        })?;
        if header.version != VERSION {
            return Err(DiffError::InvalidArg {
                what: "unsupported checkpoint version",
            });
        }
        // Entries were written back-to-back in header order.
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let mut data = vec![0.0f64; e.count as usize];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(bad_format)?;
                *v = f64::from_le_bytes(buf);
            }
            let numel: usize = e.shape.iter().product();
            if numel != e.count as usize {
                return Err(DiffError::InvalidArg {
                    what: "checkpoint entry shape does not match payload",
                });
            }
            entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
        }
        Ok(Checkpoint {
            meta: header.meta,
            entries,
        })
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

fn bad_format(_: io::Error) -> DiffError {
    DiffError::InvalidArg {
        what: "truncated checkpoint file",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut ck = Checkpoint::new();
        ck.meta.insert("task".into(), "lift_cube".into());
        ck.entries.push((
            "layer.w".into(),
            Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-9, -7.25]),
        ));
        ck.entries.push(("layer.b".into(), Tensor::from_vec(vec![0.5])));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();

        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta.get("task").unwrap(), "lift_cube");
        assert_eq!(back.get("layer.w").unwrap(), ck.get("layer.w").unwrap());
        assert_eq!(back.get("layer.b").unwrap(), ck.get("layer.b").unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_future_version() {
        let mut ck = Checkpoint::new();
        ck.entries.push(("x".into(), Tensor::scalar(1.0)));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        // Bump the version field inside the JSON header.
        let pos = buf.windows(12).position(|w| w == b"\"version\":1,").unwrap();
        buf[pos + 10] = b'9';
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
