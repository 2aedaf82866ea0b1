//! Training-data augmentation: oriented motion blur, synthetic video clips
//! from static image/mask pairs, instance-record filtering and merging, and
//! aligned random crops.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data_io::{Frame, MaskMap, VideoSample};
use crate::error::{PipelineError, Result};
use crate::imgops;

/// Normalized oriented line kernel.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    pub size: usize,
    pub angle_deg: f64,
    pub weights: Array2<f64>,
}

/// Sampling distribution for [`sample_blur`].
#[derive(Debug, Clone)]
pub struct BlurConfig {
    pub probability: f64,
    pub size_choices: Vec<usize>,
    pub angle_max_deg: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig {
            probability: 0.3,
            size_choices: vec![3, 5, 7, 9, 11, 13, 15],
            angle_max_deg: 180.0,
        }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(PipelineError::InvalidInput(format!(
                "blur probability {} outside [0,1]",
                self.probability
            )));
        }
        if self.size_choices.is_empty() {
            return Err(PipelineError::InvalidInput(
                "blur size_choices empty".into(),
            ));
        }
        for &s in &self.size_choices {
            if s < 3 || s % 2 == 0 {
                return Err(PipelineError::InvalidInput(format!(
                    "blur size {s} must be odd and >= 3"
                )));
            }
        }
        if !(0.0 < self.angle_max_deg && self.angle_max_deg <= 180.0) {
            return Err(PipelineError::InvalidInput(format!(
                "blur angle_max {} outside (0,180]",
                self.angle_max_deg
            )));
        }
        Ok(())
    }
}

/// Bounds of the per-step affine jitter used when expanding static images
/// into short clips.
#[derive(Debug, Clone)]
pub struct AffineJitter {
    pub max_rotation_deg: f64,
    pub max_shear_deg: f64,
    pub max_scale_delta: f64,
    pub max_translate_frac: f64,
}

impl Default for AffineJitter {
    fn default() -> Self {
        AffineJitter {
            max_rotation_deg: 15.0,
            max_shear_deg: 10.0,
            max_scale_delta: 0.10,
            max_translate_frac: 0.10,
        }
    }
}

impl AffineJitter {
    pub fn zero() -> Self {
        AffineJitter {
            max_rotation_deg: 0.0,
            max_shear_deg: 0.0,
            max_scale_delta: 0.0,
            max_translate_frac: 0.0,
        }
    }
}

/// One binary instance mask ingested from an external segmenter.
#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub image_id: String,
    pub class_name: String,
    pub mask: MaskMap,
}

/// Rasterize a centered line of `size` pixels at `angle_deg`, uniform weights.
///
/// The support steps along the major axis of the direction vector so it
/// always contains exactly `size` pixels, each within half a pixel of the
/// ideal line through the center.
pub fn make_blur_kernel(size: usize, angle_deg: f64) -> Result<BlurKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(PipelineError::InvalidInput(format!(
            "blur kernel size {size} must be odd and positive"
        )));
    }
    if !(0.0..180.0).contains(&angle_deg) {
        return Err(PipelineError::InvalidInput(format!(
            "blur angle {angle_deg} outside [0,180)"
        )));
    }
    let c = (size / 2) as isize;
    let mut weights = Array2::<f64>::zeros((size, size));
    let rad = angle_deg.to_radians();
    // Direction in image coordinates (x right, y down); positive angles turn
    // counter-clockwise on screen.
    let (dx, dy) = (rad.cos(), -rad.sin());
    let w = 1.0 / size as f64;
    if dx.abs() >= dy.abs() {
        let slope = dy / dx;
        for t in -c..=c {
            let y = (t as f64 * slope).round() as isize;
            weights[[(y + c) as usize, (t + c) as usize]] = w;
        }
    } else {
        let slope = dx / dy;
        for t in -c..=c {
            let x = (t as f64 * slope).round() as isize;
            weights[[(t + c) as usize, (x + c) as usize]] = w;
        }
    }
    Ok(BlurKernel {
        size,
        angle_deg,
        weights,
    })
}

/// Per-channel 2-D convolution with symmetric border reflection, clamped to
/// `[0,1]`. The kernel support is symmetric through its center, so this is
/// identical whether read as convolution or correlation.
pub fn apply_motion_blur(frame: &Frame, kernel: &BlurKernel) -> Result<Frame> {
    let (c, h, w) = frame.data.dim();
    if kernel.size > h || kernel.size > w {
        return Err(PipelineError::InvalidInput(format!(
            "kernel size {} exceeds image {}x{}",
            kernel.size, h, w
        )));
    }
    let r = (kernel.size / 2) as isize;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kernel.size {
                    let wrow = kernel.weights.row(ky);
                    let sy = imgops::reflect_index(y as isize + ky as isize - r, h);
                    for kx in 0..kernel.size {
                        let kw = wrow[kx];
                        if kw == 0.0 {
                            continue;
                        }
                        let sx = imgops::reflect_index(x as isize + kx as isize - r, w);
                        acc += kw * frame.data[[ci, sy, sx]];
                    }
                }
                out[[ci, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Frame::new(out))
}

/// Draw a kernel with probability `config.probability`: size uniform over
/// `size_choices`, angle uniform over `[0, angle_max)`.
pub fn sample_blur<R: Rng>(rng: &mut R, config: &BlurConfig) -> Result<Option<BlurKernel>> {
    config.validate()?;
    if rng.gen::<f64>() >= config.probability {
        return Ok(None);
    }
    let size = config.size_choices[rng.gen_range(0..config.size_choices.len())];
    let angle = rng.gen_range(0.0..config.angle_max_deg);
    Ok(Some(make_blur_kernel(size, angle)?))
}

/// 2-D affine map `p' = m p + t` in (x, y) pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Affine {
        let m = [
            [
                self.m[0][0] * other.m[0][0] + self.m[0][1] * other.m[1][0],
                self.m[0][0] * other.m[0][1] + self.m[0][1] * other.m[1][1],
            ],
            [
                self.m[1][0] * other.m[0][0] + self.m[1][1] * other.m[1][0],
                self.m[1][0] * other.m[0][1] + self.m[1][1] * other.m[1][1],
            ],
        ];
        let t = [
            self.m[0][0] * other.t[0] + self.m[0][1] * other.t[1] + self.t[0],
            self.m[1][0] * other.t[0] + self.m[1][1] * other.t[1] + self.t[1],
        ];
        Affine { m, t }
    }

    pub fn inverse(&self) -> Affine {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Affine { m: inv, t }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    /// Rotation, x-shear and isotropic scale about the image center plus a
    /// pixel translation.
    pub fn around_center(
        width: usize,
        height: usize,
        rotation_deg: f64,
        shear_deg: f64,
        scale: f64,
        translate_px: (f64, f64),
    ) -> Affine {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let th = rotation_deg.to_radians();
        let sh = shear_deg.to_radians().tan();
        let rot = Affine {
            m: [[th.cos(), -th.sin()], [th.sin(), th.cos()]],
            t: [0.0, 0.0],
        };
        let shear = Affine {
            m: [[1.0, sh], [0.0, 1.0]],
            t: [0.0, 0.0],
        };
        let sc = Affine {
            m: [[scale, 0.0], [0.0, scale]],
            t: [0.0, 0.0],
        };
        let to_origin = Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [-cx, -cy],
        };
        let back = Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [cx + translate_px.0, cy + translate_px.1],
        };
        back.compose(&rot.compose(&shear.compose(&sc.compose(&to_origin))))
    }
}

/// Warp a frame by `affine` (source -> destination), bilinear sampling with
/// edge clamping.
pub fn warp_frame(frame: &Frame, affine: &Affine) -> Frame {
    let (c, h, w) = frame.data.dim();
    let inv = affine.inverse();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ci in 0..c {
                out[[ci, y, x]] = frame.data[[ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + frame.data[[ci, y0, x1]] * (1.0 - fy) * fx
                    + frame.data[[ci, y1, x0]] * fy * (1.0 - fx)
                    + frame.data[[ci, y1, x1]] * fy * fx;
            }
        }
    }
    Frame::new(out)
}

/// Warp a label map by `affine` with nearest-neighbor sampling; pixels that
/// map outside the source become background.
pub fn warp_mask(mask: &MaskMap, affine: &Affine) -> MaskMap {
    let (h, w) = mask.labels.dim();
    let inv = affine.inverse();
    let mut out = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let xi = sx.round() as isize;
            let yi = sy.round() as isize;
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                out[[y, x]] = mask.labels[[yi as usize, xi as usize]];
            }
        }
    }
    MaskMap::new(out)
}

/// Expand one static image/mask pair into a short clip by cumulative random
/// affine jitter; also returns the per-frame source->frame transforms.
pub fn synth_video_with_transforms<R: Rng>(
    image: &Frame,
    mask: &MaskMap,
    n_frames: usize,
    jitter: &AffineJitter,
    rng: &mut R,
) -> Result<(VideoSample, Vec<Affine>)> {
    if n_frames < 1 {
        return Err(PipelineError::InvalidInput(
            "synthetic clip needs at least one frame".into(),
        ));
    }
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(PipelineError::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut frames = vec![image.clone()];
    let mut masks = vec![Some(mask.clone())];
    let mut transforms = vec![Affine::identity()];
    let mut cumulative = Affine::identity();
    for _ in 1..n_frames {
        let sym = |rng: &mut R, b: f64| if b == 0.0 { 0.0 } else { rng.gen_range(-b..=b) };
        let rot = sym(rng, jitter.max_rotation_deg);
        let shear = sym(rng, jitter.max_shear_deg);
        let scale = 1.0 + sym(rng, jitter.max_scale_delta);
        let tx = sym(rng, jitter.max_translate_frac) * w as f64;
        let ty = sym(rng, jitter.max_translate_frac) * h as f64;
        let step = Affine::around_center(w, h, rot, shear, scale, (tx, ty));
        cumulative = step.compose(&cumulative);
        // Always warp from the original pair so resampling error does not
        // accumulate across frames.
        frames.push(warp_frame(image, &cumulative));
        masks.push(Some(warp_mask(mask, &cumulative)));
        transforms.push(cumulative);
    }
    let sample = VideoSample {
        id: "synthetic".to_string(),
        frames,
        masks,
        object_ids: mask.object_labels(),
    };
    Ok((sample, transforms))
}

/// See [`synth_video_with_transforms`].
pub fn synth_video<R: Rng>(
    image: &Frame,
    mask: &MaskMap,
    n_frames: usize,
    jitter: &AffineJitter,
    rng: &mut R,
) -> Result<VideoSample> {
    synth_video_with_transforms(image, mask, n_frames, jitter, rng).map(|(v, _)| v)
}

/// Keep records whose class is allowed, with masks forced to {0,1}.
pub fn filter_and_binarize(
    records: &[InstanceRecord],
    allowed_classes: &BTreeSet<String>,
) -> Vec<InstanceRecord> {
    records
        .iter()
        .filter(|r| allowed_classes.contains(&r.class_name))
        .map(|r| InstanceRecord {
            image_id: r.image_id.clone(),
            class_name: r.class_name.clone(),
            mask: MaskMap::new(r.mask.labels.mapv(|v| if v != 0 { 1 } else { 0 })),
        })
        .collect()
}

/// The realization of "human, animal and vehicle" used by default.
pub fn default_allowed_classes() -> BTreeSet<String> {
    [
        "person", "dog", "cat", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
        "bird", "bicycle", "car", "motorcycle", "bus", "truck", "boat",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Merge per-instance binary masks of one image into a single label map.
/// Record k (1-based, input order) contributes label k; overlaps resolve to
/// the later record.
pub fn merge_masks(records: &[InstanceRecord]) -> Result<MaskMap> {
    if records.is_empty() {
        return Err(PipelineError::InvalidInput(
            "merge_masks on empty record list".into(),
        ));
    }
    let (h, w) = (records[0].mask.height(), records[0].mask.width());
    for r in records {
        if r.mask.height() != h || r.mask.width() != w {
            return Err(PipelineError::ShapeMismatch(format!(
                "instance mask {}x{} vs {}x{}",
                r.mask.height(),
                r.mask.width(),
                h,
                w
            )));
        }
    }
    let mut labels = Array2::<u32>::zeros((h, w));
    for (k, r) in records.iter().enumerate() {
        let label = (k + 1) as u32;
        for y in 0..h {
            for x in 0..w {
                if r.mask.labels[[y, x]] != 0 {
                    labels[[y, x]] = label;
                }
            }
        }
    }
    Ok(MaskMap::new(labels))
}

/// Aligned square crop. Inputs smaller than `crop` are first upscaled so the
/// shorter side equals `crop` (bilinear frame, nearest-neighbor mask).
pub fn random_crop_pair<R: Rng>(
    frame: &Frame,
    mask: &MaskMap,
    crop: usize,
    rng: &mut R,
) -> Result<(Frame, MaskMap)> {
    if crop == 0 {
        return Err(PipelineError::InvalidInput("crop size 0".into()));
    }
    let (h, w) = (frame.height(), frame.width());
    if mask.height() != h || mask.width() != w {
        return Err(PipelineError::ShapeMismatch(format!(
            "frame {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let (frame, mask) = if h < crop || w < crop {
        let scale = crop as f64 / h.min(w) as f64;
        let nh = ((h as f64 * scale).round() as usize).max(crop);
        let nw = ((w as f64 * scale).round() as usize).max(crop);
        (
            Frame::new(imgops::bilinear_resize_chw(&frame.data, nh, nw)),
            MaskMap::new(imgops::nn_resize_labels(&mask.labels, nh, nw)),
        )
    } else {
        (frame.clone(), mask.clone())
    };
    let (h, w) = (frame.height(), frame.width());
    let top = if h == crop { 0 } else { rng.gen_range(0..=h - crop) };
    let left = if w == crop { 0 } else { rng.gen_range(0..=w - crop) };
    let fdata = frame
        .data
        .slice(ndarray::s![.., top..top + crop, left..left + crop])
        .to_owned();
    let mdata = mask
        .labels
        .slice(ndarray::s![top..top + crop, left..left + crop])
        .to_owned();
    Ok((Frame::new(fdata), MaskMap::new(mdata)))
}
