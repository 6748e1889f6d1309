//! On-disk RGB-D sequences.
//!
//! ```text
//! root/
//!   intrinsics.json      {fx, fy, cx, cy, width, height}
//!   poses.json           [{frame, t: [x, y, z], q: [w, x, y, z]}, ...]  camera-to-world
//!   rgb/%06d.png         8-bit RGB
//!   depth_gt/%06d.png    16-bit millimeters, 0 = invalid (optional directory)
//!   depth_pred/%06d.png  16-bit millimeters, 0 = invalid
//!   mask/%06d.png        8-bit, nonzero = transparent
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{DepthFrame, GrayImage, MaskFrame};
use crate::geometry::{CameraIntrinsics, CameraPose};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: field '{field}': {msg}")]
    Field { path: PathBuf, field: String, msg: String },
    #[error("{path}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    Dimensions {
        path: PathBuf,
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
}

/// One entry of `poses.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub t: [f64; 3],
    /// `[w, x, y, z]`
    pub q: [f64; 4],
}

impl PoseRecord {
    pub fn from_pose(frame: usize, pose: &CameraPose) -> Self {
        let q = pose.quaternion();
        Self {
            frame,
            t: pose.translation.into(),
            q: [q.w, q.i, q.j, q.k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: GrayImage,
    pub depth_gt: Option<DepthFrame>,
    pub depth_pred: DepthFrame,
    pub mask: MaskFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.depth_gt.is_some())
    }
}

/// Paths of every file in a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub intrinsics: PathBuf,
    pub poses: PathBuf,
    pub rgb: Vec<PathBuf>,
    pub depth_gt: Option<Vec<PathBuf>>,
    pub depth_pred: Vec<PathBuf>,
    pub mask: Vec<PathBuf>,
    pub frame_count: usize,
}

fn frame_file(root: &Path, dir: &str, i: usize) -> PathBuf {
    root.join(dir).join(format!("{i:06}.png"))
}

impl DatasetManifest {
    fn layout(root: &Path, frame_count: usize, with_gt: bool) -> Self {
        let files = |dir| (0..frame_count).map(|i| frame_file(root, dir, i)).collect::<Vec<_>>();
        Self {
            root: root.to_path_buf(),
            intrinsics: root.join("intrinsics.json"),
            poses: root.join("poses.json"),
            rgb: files("rgb"),
            depth_gt: with_gt.then(|| files("depth_gt")),
            depth_pred: files("depth_pred"),
            mask: files("mask"),
            frame_count,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_poses(path: &Path, records: &[PoseRecord]) -> Result<Vec<CameraPose>, DatasetError> {
    let field = |i: usize, name: &str, msg: String| DatasetError::Field {
        path: path.to_path_buf(),
        field: format!("[{i}].{name}"),
        msg,
    };
    if records.is_empty() {
        return Err(DatasetError::Field {
            path: path.to_path_buf(),
            field: "[]".into(),
            msg: "no poses".into(),
        });
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.frame != i {
                return Err(field(i, "frame", format!("expected {i}, found {} (frames must be contiguous from 0)", r.frame)));
            }
            if r.t.iter().chain(&r.q).any(|v| !v.is_finite()) {
                return Err(field(i, "t/q", "non-finite value".into()));
            }
            let [w, x, y, z] = r.q;
            let q = Quaternion::new(w, x, y, z);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(field(i, "q", format!("not a unit quaternion (norm {})", q.norm())));
            }
            Ok(CameraPose::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::from(r.t)))
        })
        .collect()
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_dims(path: &Path, k: &CameraIntrinsics, w: u32, h: u32) -> Result<(), DatasetError> {
    if (w, h) != (k.width, k.height) {
        return Err(DatasetError::Dimensions {
            path: path.to_path_buf(),
            expected_w: k.width,
            expected_h: k.height,
            found_w: w,
            found_h: h,
        });
    }
    Ok(())
}

fn read_depth(path: &Path, k: &CameraIntrinsics) -> Result<DepthFrame, DatasetError> {
    let img = open_image(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(DatasetError::Field {
                path: path.to_path_buf(),
                field: "color_type".into(),
                msg: format!("expected 16-bit single channel, found {:?}", other.color()),
            })
        }
    };
    check_dims(path, k, img.width(), img.height())?;
    let depth = img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    Ok(DepthFrame::from_depths(k.width, k.height, depth).expect("dimensions checked"))
}

fn read_mask(path: &Path, k: &CameraIntrinsics) -> Result<MaskFrame, DatasetError> {
    let img = open_image(path)?.into_luma8();
    check_dims(path, k, img.width(), img.height())?;
    Ok(MaskFrame::new(k.width, k.height, img.pixels().map(|p| p.0[0] != 0).collect()).expect("dimensions checked"))
}

fn read_rgb(path: &Path, k: &CameraIntrinsics) -> Result<GrayImage, DatasetError> {
    let img = open_image(path)?.into_rgb8();
    check_dims(path, k, img.width(), img.height())?;
    Ok(GrayImage::from_rgb8(k.width, k.height, img.as_raw()).expect("dimensions checked"))
}

/// Loads every frame of a dataset directory.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Dataset), DatasetError> {
    let intrinsics_path = root.join("intrinsics.json");
    let k: CameraIntrinsics = read_json(&intrinsics_path)?;
    k.validate().map_err(|e| DatasetError::Field {
        path: intrinsics_path.clone(),
        field: "fx/fy/cx/cy/width/height".into(),
        msg: e.to_string(),
    })?;
    let poses_path = root.join("poses.json");
    let records: Vec<PoseRecord> = read_json(&poses_path)?;
    let poses = parse_poses(&poses_path, &records)?;

    let with_gt = root.join("depth_gt").is_dir();
    let manifest = DatasetManifest::layout(root, poses.len(), with_gt);
    let mut frames = Vec::with_capacity(poses.len());
    for i in 0..manifest.frame_count {
        frames.push(Frame {
            image: read_rgb(&manifest.rgb[i], &k)?,
            depth_gt: match &manifest.depth_gt {
                Some(paths) => Some(read_depth(&paths[i], &k)?),
                None => None,
            },
            depth_pred: read_depth(&manifest.depth_pred[i], &k)?,
            mask: read_mask(&manifest.mask[i], &k)?,
        });
    }
    Ok((
        manifest,
        Dataset {
            intrinsics: k,
            poses,
            frames,
        },
    ))
}

/// Meters to the 16-bit millimeter raster; invalid and out-of-range depths become 0.
pub fn depth_to_mm(d: &DepthFrame) -> Vec<u16> {
    d.depth
        .iter()
        .zip(&d.valid)
        .map(|(&z, &ok)| {
            let mm = (z * 1000.0).round();
            if ok && mm >= 1.0 && mm <= u16::MAX as f64 {
                mm as u16
            } else {
                0
            }
        })
        .collect()
}

fn save<P, C>(path: &Path, buf: ImageBuffer<P, C>) -> Result<(), DatasetError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a dataset in the directory layout above.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<DatasetManifest, DatasetError> {
    let with_gt = ds.has_ground_truth();
    let manifest = DatasetManifest::layout(root, ds.len(), with_gt);
    let mut dirs = vec!["rgb", "depth_pred", "mask"];
    if with_gt {
        dirs.push("depth_gt");
    }
    for d in dirs {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|source| DatasetError::Io { path: p, source })?;
    }
    write_json(&manifest.intrinsics, &ds.intrinsics)?;
    let records: Vec<PoseRecord> = ds.poses.iter().enumerate().map(|(i, p)| PoseRecord::from_pose(i, p)).collect();
    write_json(&manifest.poses, &records)?;

    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    for (i, f) in ds.frames.iter().enumerate() {
        let rgb: Vec<u8> = f
            .image
            .intensity
            .iter()
            .flat_map(|&g| {
                let b = (g * 255.0).round().clamp(0.0, 255.0) as u8;
                [b, b, b]
            })
            .collect();
        save(&manifest.rgb[i], ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, rgb).expect("size"))?;
        save(
            &manifest.depth_pred[i],
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, depth_to_mm(&f.depth_pred)).expect("size"),
        )?;
        if let (Some(paths), Some(gt)) = (&manifest.depth_gt, &f.depth_gt) {
            save(&paths[i], ImageBuffer::<Luma<u16>, _>::from_raw(w, h, depth_to_mm(gt)).expect("size"))?;
        }
        let mask: Vec<u8> = f.mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
        save(&manifest.mask[i], ImageBuffer::<Luma<u8>, _>::from_raw(w, h, mask).expect("size"))?;
    }
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}
