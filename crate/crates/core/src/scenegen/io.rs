//! Dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XMRG"            4 bytes magic
//! version           u32
//! config_len        u64, then config_len bytes of SceneConfig JSON
//! n_records         u64
//! n_records × { record_len u64, record bytes }
//! ```
//!
//! A record stores, in order: seed u64, overlap f64, fx fy cx cy f64,
//! width height u64, rotation (row-major) 9×f64, translation 3×f64,
//! channels u64, n_pixels u64, image features, depth, occlusion mask (one
//! byte per pixel), n_points u64, points 3×f64 each, descriptors.
//!
//! A JSON sidecar next to the container repeats the schema version, config
//! and seeds for human inspection; reading never depends on it.

use std::fs;
use std::path::Path;

use serde_json::json;

use super::{SceneConfig, SceneSample};
use crate::binio::{put_f64s, put_u64, Reader};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform};

pub const DATASET_MAGIC: &[u8; 4] = b"XMRG";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn seeds(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.seed).collect()
    }
}

fn encode_record(s: &SceneSample) -> Vec<u8> {
    let mut b = Vec::new();
    let k = &s.intrinsics;
    put_u64(&mut b, s.seed);
    put_f64s(&mut b, &[s.overlap, k.fx, k.fy, k.cx, k.cy]);
    put_u64(&mut b, k.width as u64);
    put_u64(&mut b, k.height as u64);
    put_f64s(&mut b, &s.gt_pose.rotation_row_major());
    let t = s.gt_pose.translation();
    put_f64s(&mut b, &[t.x, t.y, t.z]);
    put_u64(&mut b, s.cloud.channels as u64);
    put_u64(&mut b, s.depth.len() as u64);
    put_f64s(&mut b, &s.image_features);
    put_f64s(&mut b, &s.depth);
    b.extend(s.occluded.iter().map(|&o| u8::from(o)));
    put_u64(&mut b, s.cloud.points.len() as u64);
    for p in &s.cloud.points {
        put_f64s(&mut b, p);
    }
    put_f64s(&mut b, &s.cloud.descriptors);
    b
}

/// Writes the container to `path` and its sidecar to `path` with a `.json`
/// extension.
pub fn write_dataset(path: &Path, config: &SceneConfig, samples: &[SceneSample]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    put_u64(&mut buf, cfg.len() as u64);
    buf.extend_from_slice(&cfg);
    put_u64(&mut buf, samples.len() as u64);
    for s in samples {
        let rec = encode_record(s);
        put_u64(&mut buf, rec.len() as u64);
        buf.extend_from_slice(&rec);
    }
    fs::write(path, &buf)?;
    let sidecar = json!({
        "format": "XMRG",
        "version": DATASET_VERSION,
        "config": config,
        "seeds": samples.iter().map(|s| s.seed).collect::<Vec<_>>(),
    });
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn decode_record(r: &mut Reader) -> Result<SceneSample> {
    let start = r.pos;
    let bad = |m: String| Error::Parse { offset: start, message: m };
    let seed = r.u64("seed")?;
    let overlap = r.f64("overlap")?;
    let kf = r.f64s(4, "intrinsics")?;
    let width = r.len("width")?;
    let height = r.len("height")?;
    let intrinsics = CameraIntrinsics::new(kf[0], kf[1], kf[2], kf[3], width, height)
        .map_err(|e| bad(e.to_string()))?;
    let rot: [f64; 9] = r.f64s(9, "rotation")?.try_into().unwrap();
    let tr: [f64; 3] = r.f64s(3, "translation")?.try_into().unwrap();
    let gt_pose = RigidTransform::from_row_major(&rot, &tr).map_err(|e| bad(e.to_string()))?;
    let channels = r.len("channels")?;
    let n_pixels = r.len("pixel count")?;
    if n_pixels != width * height {
        return Err(bad(format!("pixel count {n_pixels} != {width}×{height}")));
    }
    let image_features = r.f64s(n_pixels * channels, "image features")?;
    let depth = r.f64s(n_pixels, "depth")?;
    let mask = r.take(n_pixels, "occlusion mask")?;
    let occluded = mask
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(bad(format!("invalid occlusion byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let n_points = r.len("point count")?;
    let flat = r.f64s(n_points * 3, "points")?;
    let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let descriptors = r.f64s(n_points * channels, "descriptors")?;
    let cloud = PointCloud::new(points, descriptors, channels).map_err(|e| bad(e.to_string()))?;
    Ok(SceneSample { image_features, depth, occluded, cloud, intrinsics, gt_pose, overlap, seed })
}

/// Reads a container written by [`write_dataset`]. Any corruption yields an
/// error carrying the byte offset; no partial dataset is returned.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, not an XMRG file".into() });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Incompatible {
            what: "dataset version",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n = r.len("config length")?;
    let at = r.pos;
    let config: SceneConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::Parse { offset: at, message: format!("config: {e}") })?;
    let count = r.len("record count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.len("record length")?;
        let body = r.take(len, "record")?;
        let mut sub = Reader { buf: body, pos: 0 };
        let base = r.pos - len;
        let s = decode_record(&mut sub).map_err(|e| match e {
            Error::Parse { offset, message } => {
                Error::Parse { offset: base + offset, message: format!("record {i}: {message}") }
            }
            other => other,
        })?;
        if sub.pos != len {
            return Err(Error::Parse { offset: base + sub.pos, message: format!("record {i}: trailing bytes") });
        }
        samples.push(s);
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(Dataset { config, samples })
}
