//! Deterministic synthetic scenes: paired image-feature grids and point
//! clouds with a known pose, controllable noise, occlusion and overlap.
//!
//! Every point carries a latent descriptor drawn from a smooth random field
//! over its position. The point cloud sees the latent plus noise; the image
//! sees a fixed affine distortion of the latent plus independent noise, so the
//! two modalities share content but differ in distribution.

mod io;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform};

pub use io::{read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};

/// Knobs of the scene factory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_points: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the per-modality descriptor noise.
    pub noise_sigma: f64,
    /// Target fraction of image pixels hidden behind occluders, in [0, 1).
    pub occlusion_fraction: f64,
    /// Ground-truth rotations are drawn with angle in ±this many degrees.
    pub rotation_deg: f64,
    /// Ground-truth translation offsets are drawn in ±this many meters per axis.
    pub translation_m: f64,
    /// Minimum fraction of points inside the camera frustum.
    pub overlap_min: f64,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    /// Distance from the camera to the scene center, meters.
    pub scene_depth: f64,
    /// Lateral half-size of the scene box, meters.
    pub scene_half_extent: f64,
    /// Half-size of the scene box along the optical axis, meters.
    pub scene_half_depth: f64,
    pub n_planes: usize,
    /// Fraction of points sampled on planes; the rest are scattered.
    pub plane_fraction: f64,
    /// Strength of the image-side affine distortion; 0 renders latents as is.
    pub modality_gap: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_points: 1500,
            height: 24,
            width: 24,
            channels: 8,
            noise_sigma: 0.05,
            occlusion_fraction: 0.15,
            rotation_deg: 10.0,
            translation_m: 0.1,
            overlap_min: 0.3,
            focal: 30.0,
            scene_depth: 1.5,
            scene_half_extent: 0.9,
            scene_half_depth: 0.4,
            n_planes: 3,
            plane_fraction: 0.7,
            modality_gap: 1.0,
            max_retries: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if self.n_points == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("n_points, height, width and channels must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return fail("occlusion_fraction must lie in [0, 1)");
        }
        if !(self.rotation_deg >= 0.0 && self.translation_m >= 0.0) {
            return fail("pose ranges must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.overlap_min) {
            return fail("overlap_min must lie in [0, 1]");
        }
        if !(self.focal > 0.0 && self.scene_depth > 0.0) {
            return fail("focal and scene_depth must be positive");
        }
        if !(self.scene_half_extent > 0.0 && self.scene_half_depth >= 0.0) {
            return fail("scene extents must be positive");
        }
        if self.scene_depth - self.scene_half_depth - self.translation_m <= 0.1 {
            return fail("scene box must stay in front of the camera");
        }
        if !(0.0..=1.0).contains(&self.plane_fraction) || !(self.modality_gap >= 0.0) {
            return fail("plane_fraction must lie in [0, 1] and modality_gap >= 0");
        }
        if self.max_retries == 0 {
            return fail("max_retries must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// One synthetic image / point-cloud pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `H × W × C`, row-major by pixel then channel.
    pub image_features: Vec<f64>,
    /// Rendered depth per pixel in meters; `0.0` where nothing was rendered
    /// or an occluder covers the pixel.
    pub depth: Vec<f64>,
    /// Pixels overwritten by an occluder.
    pub occluded: Vec<bool>,
    /// Points in the point-cloud frame.
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    /// Point-cloud frame → camera frame.
    pub gt_pose: RigidTransform,
    /// Fraction of points inside the camera frustum.
    pub overlap: f64,
    pub seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn channels(&self) -> usize {
        self.cloud.channels
    }

    pub fn n_pixels(&self) -> usize {
        self.intrinsics.n_pixels()
    }

    pub fn pixel_feature(&self, pixel: usize) -> &[f64] {
        let c = self.channels();
        &self.image_features[pixel * c..(pixel + 1) * c]
    }

    /// Pixel center `(col, row)` in image coordinates.
    pub fn pixel_center(&self, pixel: usize) -> (f64, f64) {
        ((pixel % self.width()) as f64, (pixel / self.width()) as f64)
    }

    /// Camera-frame 3-d location of a pixel's rendered surface.
    pub fn pixel_point(&self, pixel: usize) -> Option<Vector3<f64>> {
        let d = self.depth[pixel];
        if d > 0.0 {
            let (c, r) = self.pixel_center(pixel);
            Some(self.intrinsics.backproject(c, r, d))
        } else {
            None
        }
    }
}

/// Image-feature signature of empty and occluded pixels.
pub fn background_signature(channels: usize) -> Vec<f64> {
    (0..channels).map(|c| if c % 2 == 0 { 1.5 } else { -1.5 }).collect()
}

/// The fixed affine map `(A, b)` applied to latents on the image side.
pub fn modality_map(channels: usize, gap: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f_6461_6c69_7479);
    let mut a = vec![0.0; channels * channels];
    for i in 0..channels {
        for j in 0..channels {
            let id = if i == j { 1.0 } else { 0.0 };
            a[i * channels + j] = id + gap * rng.random_range(-0.4..0.4);
        }
    }
    let b = (0..channels).map(|_| gap * rng.random_range(-0.5..0.5)).collect();
    (a, b)
}

struct LatentField {
    freq: Vec<[f64; 3]>,
    phase: Vec<f64>,
}

impl LatentField {
    fn sample(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut freq = Vec::with_capacity(channels);
        let mut phase = Vec::with_capacity(channels);
        for _ in 0..channels {
            let dir = unit_vector(rng);
            let wavelength = rng.random_range(0.35..1.2);
            let k = 2.0 * PI / wavelength;
            freq.push([dir.x * k, dir.y * k, dir.z * k]);
            phase.push(rng.random_range(0.0..2.0 * PI));
        }
        LatentField { freq, phase }
    }

    fn eval(&self, p: &[f64; 3], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.freq[c];
            *o = (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + self.phase[c]).sin();
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

fn sample_geometry(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (e, d, z0) = (cfg.scene_half_extent, cfg.scene_half_depth, cfg.scene_depth);
    let n_plane = if cfg.n_planes == 0 {
        0
    } else {
        (cfg.n_points as f64 * cfg.plane_fraction).round() as usize
    };
    let mut pts = Vec::with_capacity(cfg.n_points);
    for k in 0..cfg.n_planes {
        let count = n_plane / cfg.n_planes + usize::from(k < n_plane % cfg.n_planes);
        let center = Vector3::new(
            rng.random_range(-0.5..=0.5) * e,
            rng.random_range(-0.5..=0.5) * e,
            z0 + rng.random_range(-0.6..=0.6) * d,
        );
        // normal within ~45° of the optical axis, facing the camera
        let normal: Vector3<f64> =
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize();
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = normal.cross(&helper).normalize();
        let v = normal.cross(&u);
        let (hu, hv) = (rng.random_range(0.3..0.6) * e, rng.random_range(0.3..0.6) * e);
        for _ in 0..count {
            let p = center + u * rng.random_range(-hu..=hu) + v * rng.random_range(-hv..=hv);
            pts.push([p.x, p.y, p.z]);
        }
    }
    while pts.len() < cfg.n_points {
        pts.push([
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
            z0 + rng.random_range(-d..=d),
        ]);
    }
    pts
}

fn sample_pose(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = unit_vector(rng);
    let angle = if cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
    } else {
        0.0
    };
    let mut delta = Vector3::zeros();
    if cfg.translation_m > 0.0 {
        for k in 0..3 {
            delta[k] = rng.random_range(-cfg.translation_m..=cfg.translation_m);
        }
    }
    let rot = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros());
    let r: Matrix3<f64> = *rot.rotation();
    // rotate about the scene center, then offset
    let c = Vector3::new(0.0, 0.0, cfg.scene_depth);
    let t = c - r * c + delta;
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Fraction of `points` (cloud frame) whose image under `pose` projects
/// inside the image with positive depth.
pub fn frustum_overlap(points: &[[f64; 3]], pose: &RigidTransform, k: &CameraIntrinsics) -> f64 {
    let inside = points
        .iter()
        .filter(|p| k.pixel_of(&pose.apply(&Vector3::from(**p))).is_some())
        .count();
    inside as f64 / points.len() as f64
}

/// Generates one scene. Identical `(config, seed)` give bit-identical output.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    let (hw, ch) = (cfg.height * cfg.width, cfg.channels);
    for attempt in 0..cfg.max_retries as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * attempt);
        let field = LatentField::sample(&mut rng, ch);
        let points = sample_geometry(cfg, &mut rng);
        let pose = sample_pose(cfg, &mut rng);
        let overlap = frustum_overlap(&points, &pose, &k);
        if overlap < cfg.overlap_min {
            continue;
        }

        let mut latents = vec![0.0; points.len() * ch];
        for (i, p) in points.iter().enumerate() {
            field.eval(p, &mut latents[i * ch..(i + 1) * ch]);
        }

        // z-buffer: nearest depth wins, lowest index on ties
        let mut depth = vec![0.0; hw];
        let mut winner: Vec<Option<usize>> = vec![None; hw];
        for (i, p) in points.iter().enumerate() {
            let pc = pose.apply(&Vector3::from(*p));
            if let Some(px) = k.pixel_of(&pc) {
                if winner[px].is_none() || pc.z < depth[px] {
                    winner[px] = Some(i);
                    depth[px] = pc.z;
                }
            }
        }

        let (a, b) = modality_map(ch, cfg.modality_gap);
        let bg = background_signature(ch);
        let mut image = vec![0.0; hw * ch];
        for px in 0..hw {
            let out = &mut image[px * ch..(px + 1) * ch];
            match winner[px] {
                Some(i) => {
                    let lat = &latents[i * ch..(i + 1) * ch];
                    for r in 0..ch {
                        out[r] = b[r] + (0..ch).map(|c| a[r * ch + c] * lat[c]).sum::<f64>();
                    }
                }
                None => out.copy_from_slice(&bg),
            }
        }

        let mut occluded = vec![false; hw];
        let target = (cfg.occlusion_fraction * hw as f64).ceil() as usize;
        let max_side = (cfg.width.min(cfg.height) / 3).max(2);
        let mut covered = 0;
        while covered < target {
            let rw = rng.random_range(2..=max_side).min(cfg.width);
            let rh = rng.random_range(2..=max_side).min(cfg.height);
            let c0 = rng.random_range(0..=cfg.width - rw);
            let r0 = rng.random_range(0..=cfg.height - rh);
            for r in r0..r0 + rh {
                for c in c0..c0 + rw {
                    let px = r * cfg.width + c;
                    if !occluded[px] {
                        occluded[px] = true;
                        covered += 1;
                        depth[px] = 0.0;
                        image[px * ch..(px + 1) * ch].copy_from_slice(&bg);
                    }
                }
            }
        }

        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(2 * attempt + 1);
        let mut descriptors = latents;
        if cfg.noise_sigma > 0.0 {
            for x in image.iter_mut().chain(descriptors.iter_mut()) {
                *x += cfg.noise_sigma * noise.sample::<f64, _>(StandardNormal);
            }
        }

        return Ok(SceneSample {
            image_features: image,
            depth,
            occluded,
            cloud: PointCloud::new(points, descriptors, ch)?,
            intrinsics: k,
            gt_pose: pose,
            overlap,
            seed,
        });
    }
    Err(Error::Generation(format!(
        "overlap >= {} not reached after {} attempts (seed {seed}, config {cfg:?})",
        cfg.overlap_min, cfg.max_retries
    )))
}

/// Generates one scene per seed, in seed order.
pub fn generate_dataset(cfg: &SceneConfig, seeds: &[u64]) -> Result<Vec<SceneSample>> {
    seeds.par_iter().map(|&s| generate_scene(cfg, s)).collect()
}

/// Fraction of rendered (non-occluded, non-empty) pixels whose features lie
/// within `tol` (max-abs) of the corresponding pixel of `clean`, which must be
/// the same scene generated with `noise_sigma = 0`.
pub fn rendering_fidelity(noisy: &SceneSample, clean: &SceneSample, tol: f64) -> f64 {
    let mut total = 0usize;
    let mut good = 0usize;
    for px in 0..clean.n_pixels() {
        if clean.depth[px] <= 0.0 {
            continue;
        }
        total += 1;
        let close = noisy
            .pixel_feature(px)
            .iter()
            .zip(clean.pixel_feature(px))
            .all(|(a, b)| (a - b).abs() <= tol);
        good += usize::from(close);
    }
    if total == 0 {
        0.0
    } else {
        good as f64 / total as f64
    }
}

/// Disjoint seed ranges for the train, validation and test splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedSplits {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

impl SeedSplits {
    pub fn new(train: Range<u64>, val: Range<u64>, test: Range<u64>) -> Result<Self> {
        let s = SeedSplits { train, val, test };
        let overlaps = |a: &Range<u64>, b: &Range<u64>| a.start < b.end && b.start < a.end;
        if overlaps(&s.train, &s.val) || overlaps(&s.train, &s.test) || overlaps(&s.val, &s.test) {
            return Err(Error::Config(format!("seed splits overlap: {s:?}")));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.train.clone(), self.val.clone(), self.test.clone()).map(|_| ())
    }
}

impl Default for SeedSplits {
    fn default() -> Self {
        SeedSplits { train: 0..200, val: 200..220, test: 10_000..10_050 }
    }
}
