//! `CMG1` motion files: a JSON header followed by `n x f x width` f32 values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::json::to_canonical;
use super::{decode_container, encode_container, f32_payload, f32_values, write_atomic};
use crate::error::{Error, Result};
use crate::motion::{repr_dim, GlobalMotion, RelativeMotion};

pub const MOTION_MAGIC: &[u8; 4] = b"CMG1";
pub const MOTION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprKind {
    Relative,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionHeader {
    pub version: u32,
    pub n: usize,
    pub f: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub fps: f64,
    pub dtype: String,
    pub repr: ReprKind,
    pub joint_names: Vec<String>,
}

impl MotionHeader {
    /// Values per frame: `D` for relative files, `3 J` for global ones.
    pub fn width(&self) -> usize {
        match self.repr {
            ReprKind::Relative => self.dim,
            ReprKind::Global => 3 * self.joints,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.n * self.f * self.width() * 4
    }

    fn validate(&self) -> Result<()> {
        if self.version != MOTION_VERSION {
            return Err(Error::UnsupportedVersion(format!("motion file version {}", self.version)));
        }
        if self.dtype != "f32le" {
            return Err(Error::validation(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.joints < 2 || self.dim != repr_dim(self.joints) {
            return Err(Error::validation(format!(
                "header D = {} does not match J = {} (expected {})",
                self.dim,
                self.joints,
                repr_dim(self.joints.max(2))
            )));
        }
        if self.joint_names.len() != self.joints {
            return Err(Error::validation(format!(
                "{} joint names for J = {}",
                self.joint_names.len(),
                self.joints
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::validation("fps must be positive"));
        }
        Ok(())
    }
}

/// Header plus raw f32 values, `n x f x width`, agent-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFile {
    pub header: MotionHeader,
    pub data: Vec<f32>,
}

impl MotionFile {
    pub fn from_relative(motions: &[RelativeMotion], joint_names: Vec<String>) -> Result<Self> {
        let first = motions.first().ok_or_else(|| Error::validation("no motions to write"))?;
        let header = MotionHeader {
            version: MOTION_VERSION,
            n: motions.len(),
            f: first.frames,
            joints: first.joints,
            dim: first.dim(),
            fps: first.fps,
            dtype: "f32le".into(),
            repr: ReprKind::Relative,
            joint_names,
        };
        let mut data = Vec::with_capacity(header.payload_len() / 4);
        for m in motions {
            if m.frames != first.frames || m.joints != first.joints {
                return Err(Error::shape("MotionFile", &[first.frames, first.joints], &[m.frames, m.joints]));
            }
            data.extend(m.data.iter().map(|&v| v as f32));
        }
        let file = MotionFile { header, data };
        file.header.validate()?;
        Ok(file)
    }

    pub fn from_global(motions: &[GlobalMotion], joint_names: Vec<String>) -> Result<Self> {
        let first = motions.first().ok_or_else(|| Error::validation("no motions to write"))?;
        let header = MotionHeader {
            version: MOTION_VERSION,
            n: motions.len(),
            f: first.frames,
            joints: first.joints,
            dim: repr_dim(first.joints),
            fps: first.fps,
            dtype: "f32le".into(),
            repr: ReprKind::Global,
            joint_names,
        };
        let mut data = Vec::new();
        for m in motions {
            if m.frames != first.frames || m.joints != first.joints {
                return Err(Error::shape("MotionFile", &[first.frames, first.joints], &[m.frames, m.joints]));
            }
            data.extend(m.positions.iter().map(|&v| v as f32));
        }
        let file = MotionFile { header, data };
        file.header.validate()?;
        Ok(file)
    }

    fn agent_slice(&self, a: usize) -> Vec<f64> {
        let w = self.header.f * self.header.width();
        self.data[a * w..(a + 1) * w].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn relative(&self) -> Result<Vec<RelativeMotion>> {
        if self.header.repr != ReprKind::Relative {
            return Err(Error::validation("motion file holds global positions"));
        }
        (0..self.header.n)
            .map(|a| RelativeMotion::new(self.header.f, self.header.joints, self.header.fps, self.agent_slice(a)))
            .collect()
    }

    pub fn global(&self) -> Result<Vec<GlobalMotion>> {
        if self.header.repr != ReprKind::Global {
            return Err(Error::validation("motion file holds relative motion"));
        }
        (0..self.header.n)
            .map(|a| GlobalMotion::new(self.header.f, self.header.joints, self.header.fps, self.agent_slice(a)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.header.validate()?;
        if self.data.len() * 4 != self.header.payload_len() {
            return Err(Error::validation(format!(
                "payload holds {} values, header describes {}",
                self.data.len(),
                self.header.payload_len() / 4
            )));
        }
        let header = to_canonical(&self.header)?;
        Ok(encode_container(MOTION_MAGIC, &header, &f32_payload(&self.data)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = decode_container(MOTION_MAGIC, bytes)?;
        let header: MotionHeader = serde_json::from_str(header)
            .map_err(|e| Error::Format(format!("motion header: {e}")))?;
        header.validate()?;
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::validation(format!(
                "payload has {} bytes but the header (n={}, f={}, J={}) implies {expected}",
                payload.len(),
                header.n,
                header.f,
                header.joints
            )));
        }
        Ok(MotionFile {
            data: f32_values(payload),
            header,
        })
    }
}

pub fn write_motion(file: &MotionFile, path: &Path) -> Result<()> {
    write_atomic(path, &file.to_bytes()?)
}

pub fn read_motion(path: &Path) -> Result<MotionFile> {
    MotionFile::from_bytes(&std::fs::read(path)?)
}

/// CSV with one row per (agent, frame): `agent,frame,c0,c1,...`.
pub fn motion_to_csv(file: &MotionFile) -> String {
    let h = &file.header;
    let w = h.width();
    let mut out = String::from("agent,frame");
    for c in 0..w {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for a in 0..h.n {
        for i in 0..h.f {
            out.push_str(&format!("{a},{i}"));
            let o = (a * h.f + i) * w;
            for v in &file.data[o..o + w] {
                // shortest text that parses back to the same f32
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Parses [`motion_to_csv`] output, given the header fields CSV lacks.
pub fn motion_from_csv(text: &str, mut header: MotionHeader) -> Result<MotionFile> {
    let w = header.width();
    let mut rows: Vec<(usize, usize, Vec<f32>)> = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != w + 2 {
            return Err(Error::Format(format!("line {}: expected {} columns, found {}", ln + 1, w + 2, cells.len())));
        }
        let parse_idx = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)));
        let a = parse_idx(cells[0])?;
        let i = parse_idx(cells[1])?;
        let vals = cells[2..]
            .iter()
            .map(|s| s.trim().parse::<f32>().map_err(|e| Error::Format(format!("line {}: {e}", ln + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((a, i, vals));
    }
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let f = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != n * f {
        return Err(Error::Format(format!("CSV has {} rows, expected {n} x {f}", rows.len())));
    }
    header.n = n;
    header.f = f;
    let mut data = vec![0f32; n * f * w];
    for (a, i, vals) in rows {
        let o = (a * f + i) * w;
        data[o..o + w].copy_from_slice(&vals);
    }
    let file = MotionFile { header, data };
    file.header.validate()?;
    Ok(file)
}
