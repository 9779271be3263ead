//! TUM RGB-D directory layout: `rgb.txt` / `depth.txt` index files, PNG
//! colour images, 16-bit PNG depth and an optional `groundtruth.txt`.
//!
//! An optional `camera.txt` (`key = value` lines for `fx`, `fy`, `cx`, `cy`,
//! `depth_scale`, `width`, `height`) overrides the default intrinsics.

use super::{associate_timestamps, DepthMap, FrameError, RgbdFrame};
use crate::evaluation::{Trajectory, TrajectoryError};
use crate::geometry::CameraIntrinsics;
use crate::io::kv::parse_kv;
use image::{ImageBuffer, Luma};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing index file {}", .0.display())]
    MissingIndexFile(PathBuf),
    #[error("no rgb/depth pairs within the association tolerance")]
    EmptySequence,
    #[error("{}:{line}: {message}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decoding {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: {message}", path.display())]
    InvalidCamera { path: PathBuf, message: String },
    #[error("ground truth {}: {source}", path.display())]
    GroundTruth {
        path: PathBuf,
        #[source]
        source: TrajectoryError,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Maximum rgb/depth timestamp difference in seconds.
    pub tolerance: f64,
    /// Explicit intrinsics; otherwise `camera.txt` or the TUM defaults.
    pub intrinsics: Option<CameraIntrinsics>,
    /// Overrides the depth divisor of whichever intrinsics are used.
    pub depth_scale: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            intrinsics: None,
            depth_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    /// Colour image timestamp, used as the frame timestamp.
    pub timestamp: f64,
    pub depth_timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

/// An indexed sequence; frames are decoded on demand.
#[derive(Debug, Clone)]
pub struct TumSequence {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub entries: Vec<FrameEntry>,
    pub ground_truth: Option<Trajectory>,
}

impl TumSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<RgbdFrame, DatasetError> {
        let entry = &self.entries[index];
        let rgb = image::open(&entry.rgb_path)
            .map_err(|source| DatasetError::Image {
                path: entry.rgb_path.clone(),
                source,
            })?
            .to_rgb8();
        let raw = image::open(&entry.depth_path)
            .map_err(|source| DatasetError::Image {
                path: entry.depth_path.clone(),
                source,
            })?
            .into_luma16();
        let scale = self.intrinsics.depth_scale as f32;
        let data = raw.pixels().map(|p| p[0] as f32 / scale).collect();
        let depth = DepthMap::from_vec(raw.width() as usize, raw.height() as usize, data);
        Ok(RgbdFrame::new(entry.timestamp, rgb, depth, self.intrinsics)?)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<RgbdFrame, DatasetError>> + '_ {
        (0..self.len()).map(|i| self.load_frame(i))
    }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_index(path: &Path) -> Result<Vec<(f64, String)>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingIndexFile(path.to_path_buf()));
    }
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: &str| DatasetError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let mut parts = line.split_whitespace();
        let stamp = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|t| t.is_finite())
            .ok_or_else(|| malformed("expected a timestamp"))?;
        let file = parts.next().ok_or_else(|| malformed("expected a file name"))?;
        out.push((stamp, file.to_string()));
    }
    Ok(out)
}

fn read_camera(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let invalid = |message: String| DatasetError::InvalidCamera {
        path: path.to_path_buf(),
        message,
    };
    let entries = parse_kv(&read_text(path)?).map_err(|e| invalid(e.to_string()))?;
    let mut k = CameraIntrinsics::tum_default();
    for e in &entries {
        let f = || e.parse::<f64>().map_err(|err| invalid(err.to_string()));
        let u = || e.parse::<usize>().map_err(|err| invalid(err.to_string()));
        match e.key.as_str() {
            "fx" => k.fx = f()?,
            "fy" => k.fy = f()?,
            "cx" => k.cx = f()?,
            "cy" => k.cy = f()?,
            "depth_scale" => k.depth_scale = f()?,
            "width" => k.width = u()?,
            "height" => k.height = u()?,
            other => return Err(invalid(format!("unknown key `{other}`"))),
        }
    }
    CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.depth_scale, k.width, k.height).map_err(|e| invalid(e.to_string()))
}

/// Indexes a TUM-layout directory.
///
/// Colour and depth entries are paired by nearest timestamp within
/// `options.tolerance`; unpaired entries are dropped and the result is sorted
/// by timestamp. Images are not decoded until requested.
pub fn load_tum_sequence(dir: &Path, options: &LoadOptions) -> Result<TumSequence, DatasetError> {
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let rgb_t: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let depth_t: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let mut entries: Vec<FrameEntry> = associate_timestamps(&rgb_t, &depth_t, options.tolerance)
        .into_iter()
        .map(|(i, j)| FrameEntry {
            timestamp: rgb[i].0,
            depth_timestamp: depth[j].0,
            rgb_path: dir.join(&rgb[i].1),
            depth_path: dir.join(&depth[j].1),
        })
        .collect();
    if entries.is_empty() {
        return Err(DatasetError::EmptySequence);
    }
    entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let camera_path = dir.join("camera.txt");
    let mut intrinsics = match options.intrinsics {
        Some(k) => k,
        None if camera_path.is_file() => read_camera(&camera_path)?,
        None => {
            let mut k = CameraIntrinsics::tum_default();
            let path = &entries[0].rgb_path;
            let (w, h) = image::image_dimensions(path).map_err(|source| DatasetError::Image {
                path: path.clone(),
                source,
            })?;
            k.width = w as usize;
            k.height = h as usize;
            k
        }
    };
    if let Some(scale) = options.depth_scale {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DatasetError::InvalidCamera {
                path: dir.to_path_buf(),
                message: "depth scale must be positive".into(),
            });
        }
        intrinsics.depth_scale = scale;
    }

    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.is_file() {
        let text = read_text(&gt_path)?;
        Some(
            Trajectory::parse_tum(&text).map_err(|source| DatasetError::GroundTruth {
                path: gt_path.clone(),
                source,
            })?,
        )
    } else {
        None
    };

    Ok(TumSequence {
        root: dir.to_path_buf(),
        intrinsics,
        entries,
        ground_truth,
    })
}

/// Writes frames (and optionally ground truth) in the TUM layout, plus a
/// `camera.txt` holding the intrinsics of the first frame.
pub fn write_tum_dataset(
    dir: &Path,
    frames: &[RgbdFrame],
    ground_truth: Option<&Trajectory>,
) -> Result<(), DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(dir.join("rgb")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("depth")).map_err(io_err(dir))?;
    let mut rgb_index = String::from("# color images\n# timestamp filename\n");
    let mut depth_index = String::from("# depth maps\n# timestamp filename\n");
    for frame in frames {
        let name = format!("{:.6}.png", frame.timestamp);
        let rgb_rel = format!("rgb/{name}");
        let depth_rel = format!("depth/{name}");
        let rgb_path = dir.join(&rgb_rel);
        frame.rgb.save(&rgb_path).map_err(|source| DatasetError::Image {
            path: rgb_path.clone(),
            source,
        })?;
        let scale = frame.intrinsics.depth_scale;
        let raw: Vec<u16> = frame
            .depth
            .data()
            .iter()
            .map(|&z| (z as f64 * scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, raw)
                .expect("depth buffer matches frame size");
        let depth_path = dir.join(&depth_rel);
        img.save(&depth_path).map_err(|source| DatasetError::Image {
            path: depth_path.clone(),
            source,
        })?;
        rgb_index.push_str(&format!("{:.6} {rgb_rel}\n", frame.timestamp));
        depth_index.push_str(&format!("{:.6} {depth_rel}\n", frame.timestamp));
    }
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))
    };
    write("rgb.txt", &rgb_index)?;
    write("depth.txt", &depth_index)?;
    if let Some(gt) = ground_truth {
        write("groundtruth.txt", &gt.to_tum_string())?;
    }
    if let Some(k) = frames.first().map(|f| f.intrinsics) {
        let camera = format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\ndepth_scale = {}\nwidth = {}\nheight = {}\n",
            k.fx, k.fy, k.cx, k.cy, k.depth_scale, k.width, k.height
        );
        write("camera.txt", &camera)?;
    }
    Ok(())
}
