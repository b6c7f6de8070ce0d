//! Point-cloud serialization: a simple binary layout (count, positions,
//! colors as little-endian f64) and CSV for inspection.

use super::PointCloud;
use crate::diffmath::DiffError;

const MAGIC: &[u8; 4] = b"PCPC";

pub fn cloud_to_binary(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + pc.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for p in &pc.positions {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for c in &pc.colors {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn cloud_from_binary(bytes: &[u8]) -> Result<PointCloud, DiffError> {
    let bad = DiffError::InvalidArg {
        what: "malformed point cloud binary",
    };
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(bad);
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 48 {
        return Err(bad);
    }
    let read3 = |at: usize| -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = f64::from_le_bytes(bytes[at + i * 8..at + i * 8 + 8].try_into().unwrap());
        }
        out
    };
    let positions = (0..n).map(|i| read3(8 + i * 24)).collect();
    let colors = (0..n).map(|i| read3(8 + n * 24 + i * 24)).collect();
    PointCloud::new(positions, colors)
}

pub fn cloud_to_csv(pc: &PointCloud) -> String {
    let mut s = String::from("x,y,z,r,g,b\n");
    for (p, c) in pc.positions.iter().zip(&pc.colors) {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p[0], p[1], p[2], c[0], c[1], c[2]
        ));
    }
    s
}

pub fn cloud_from_csv(text: &str) -> Result<PointCloud, DiffError> {
    let bad = DiffError::InvalidArg {
        what: "malformed point cloud csv",
    };
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad.clone())?;
        if vals.len() != 6 {
            return Err(bad);
        }
        positions.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
    }
    PointCloud::new(positions, colors)
}
