//! Labeled point clouds in PLY: one `x y z label` record per point.

use nalgebra::Vector3;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("vertex {index}: {message}")]
    Body { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Points tagged with the id of the plane instance they support.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCloud {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<u64>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, label: u64) {
        self.points.push(p);
        self.labels.push(label);
    }

    /// Groups points by label, in ascending label order.
    pub fn instances(&self) -> Vec<(u64, Vec<Vector3<f64>>)> {
        let mut groups: std::collections::BTreeMap<u64, Vec<Vector3<f64>>> = Default::default();
        for (p, l) in self.points.iter().zip(&self.labels) {
            groups.entry(*l).or_default().push(*p);
        }
        groups.into_iter().collect()
    }

    /// ASCII records use six decimals: `{x:.6} {y:.6} {z:.6} {label}`.
    pub fn write<W: Write>(&self, mut w: W, format: PlyFormat) -> io::Result<()> {
        let name = match format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        };
        write!(
            w,
            "ply\nformat {name} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uint label\nend_header\n",
            self.points.len()
        )?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            match format {
                PlyFormat::Ascii => writeln!(w, "{:.6} {:.6} {:.6} {l}", p.x, p.y, p.z)?,
                PlyFormat::BinaryLittleEndian => {
                    for c in p.iter() {
                        w.write_all(&c.to_le_bytes())?;
                    }
                    w.write_all(&(*l as u32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads clouds produced by [`LabeledCloud::write`].
    pub fn read<R: BufRead>(mut r: R) -> Result<Self, PlyError> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String, PlyError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(PlyError::Header("unexpected end of file".into()));
            }
            Ok(line.trim().to_string())
        };
        if next_line(&mut r)? != "ply" {
            return Err(PlyError::Header("missing `ply` magic".into()));
        }
        let mut format = None;
        let mut count = None;
        let mut properties = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            let tokens: Vec<&str> = l.split_whitespace().collect();
            match tokens.as_slice() {
                ["end_header"] => break,
                ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
                ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
                ["format", other, _] => return Err(PlyError::Header(format!("unsupported format `{other}`"))),
                ["element", "vertex", n] => {
                    count = Some(n.parse::<usize>().map_err(|e| PlyError::Header(e.to_string()))?)
                }
                ["property", ty, name] => properties.push((ty.to_string(), name.to_string())),
                ["comment", ..] | [] => {}
                _ => return Err(PlyError::Header(format!("unexpected line `{l}`"))),
            }
        }
        let format = format.ok_or_else(|| PlyError::Header("missing format".into()))?;
        let count = count.ok_or_else(|| PlyError::Header("missing vertex element".into()))?;
        let expected = [("double", "x"), ("double", "y"), ("double", "z"), ("uint", "label")];
        let matches = properties.len() == 4
            && properties
                .iter()
                .zip(expected)
                .all(|((t, n), (et, en))| t == et && n == en);
        if !matches {
            return Err(PlyError::Header("expected properties `x y z label`".into()));
        }
        let mut cloud = LabeledCloud::default();
        match format {
            PlyFormat::Ascii => {
                let mut text = String::new();
                r.read_to_string(&mut text)?;
                let mut lines = text.lines().filter(|l| !l.trim().is_empty());
                for index in 0..count {
                    let l = lines.next().ok_or_else(|| PlyError::Body {
                        index,
                        message: "missing record".into(),
                    })?;
                    let f: Vec<&str> = l.split_whitespace().collect();
                    let bad = |m: String| PlyError::Body { index, message: m };
                    if f.len() != 4 {
                        return Err(bad(format!("expected 4 values, got {}", f.len())));
                    }
                    let mut xyz = [0.0; 3];
                    for (k, v) in xyz.iter_mut().enumerate() {
                        *v = f[k]
                            .parse()
                            .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                    }
                    let label = f[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                    cloud.push(Vector3::from(xyz), label);
                }
            }
            PlyFormat::BinaryLittleEndian => {
                let mut record = [0u8; 28];
                for index in 0..count {
                    r.read_exact(&mut record).map_err(|e| PlyError::Body {
                        index,
                        message: e.to_string(),
                    })?;
                    let f = |k: usize| f64::from_le_bytes(record[8 * k..8 * k + 8].try_into().expect("8 bytes"));
                    let label = u32::from_le_bytes(record[24..28].try_into().expect("4 bytes"));
                    cloud.push(Vector3::new(f(0), f(1), f(2)), label as u64);
                }
            }
        }
        Ok(cloud)
    }
}
