//! Dataset discovery and frame/mask IO.
//!
//! The on-disk layout is DAVIS-style: `JPEGImages/<video>/` holds RGB frames
//! (JPEG or PNG) and `Annotations/<video>/` holds 8-bit indexed-palette PNG
//! masks whose palette *index* is the object label (0 = background). Palette
//! colors are cosmetic only. Results mirror the same layout:
//! `<out>/<video>/<frame>.png`.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{PipelineError, Result};

/// Per-frame integer label map. 0 is background, k is object k.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub labels: Array2<u32>,
}

impl MaskMap {
    pub fn new(labels: Array2<u32>) -> Self {
        MaskMap { labels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskMap {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// Distinct nonzero labels, ascending.
    pub fn object_labels(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }

    pub fn binary(&self, label: u32) -> Array2<bool> {
        self.labels.mapv(|l| l == label)
    }
}

/// RGB frame, channel-first `[3,H,W]`, intensities in `[0,1]`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub data: Array3<f64>,
}

impl Frame {
    pub fn new(data: Array3<f64>) -> Self {
        assert_eq!(data.dim().0, 3, "frames are 3-channel");
        Frame { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Soft per-object probability maps `[K(+1),H,W]`. When `with_background` is
/// set, channel 0 is background and channels sum to 1 per pixel.
#[derive(Debug, Clone)]
pub struct ProbStack {
    pub object_ids: Vec<u32>,
    pub maps: Array3<f64>,
    pub with_background: bool,
}

impl ProbStack {
    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    /// Probability map of object `k` (by position in `object_ids`).
    pub fn object_map(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        let off = if self.with_background { 1 } else { 0 };
        self.maps.index_axis(ndarray::Axis(0), k + off)
    }
}

/// One annotated video: frames plus (possibly sparse) masks.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Option<MaskMap>>,
    pub object_ids: Vec<u32>,
}

impl VideoSample {
    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(PipelineError::InvalidInput(format!(
                "video {} has no frames",
                self.id
            )));
        }
        if self.frames.len() != self.masks.len() {
            return Err(PipelineError::ShapeMismatch(format!(
                "video {}: {} frames vs {} mask slots",
                self.id,
                self.frames.len(),
                self.masks.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        for (i, f) in self.frames.iter().enumerate() {
            if f.height() != h || f.width() != w {
                return Err(PipelineError::ShapeMismatch(format!(
                    "video {}: frame {} is {}x{}, expected {}x{}",
                    self.id,
                    i,
                    f.height(),
                    f.width(),
                    h,
                    w
                )));
            }
        }
        let ids: BTreeSet<u32> = self.object_ids.iter().copied().collect();
        for (i, m) in self.masks.iter().enumerate() {
            if let Some(m) = m {
                if m.height() != h || m.width() != w {
                    return Err(PipelineError::ShapeMismatch(format!(
                        "video {}: mask {} is {}x{}, expected {}x{}",
                        self.id,
                        i,
                        m.height(),
                        m.width(),
                        h,
                        w
                    )));
                }
                for l in m.object_labels() {
                    if !ids.contains(&l) {
                        return Err(PipelineError::UnknownLabel(l));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Index entry produced by [`scan_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub id: String,
    pub frame_count: usize,
    pub object_count: usize,
    pub object_ids: Vec<u32>,
    /// Set when the video has frames but no first-frame annotation.
    pub missing_first_annotation: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub sequences: Vec<SequenceEntry>,
}

const FRAME_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn list_sorted(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Frame files of a video, lexicographically ordered.
pub fn frame_files(root: &Path, video: &str) -> Result<Vec<PathBuf>> {
    list_sorted(&root.join("JPEGImages").join(video), &FRAME_EXTENSIONS)
}

/// Annotation files of a video, lexicographically ordered.
pub fn annotation_files(root: &Path, video: &str) -> Result<Vec<PathBuf>> {
    list_sorted(&root.join("Annotations").join(video), &["png"])
}

/// Walk a DAVIS-style tree and build a deterministic sequence index.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let images_root = root.join("JPEGImages");
    if !images_root.is_dir() {
        return Err(PipelineError::io(
            &images_root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing JPEGImages"),
        ));
    }
    let mut videos: Vec<String> = fs::read_dir(&images_root)
        .map_err(|e| PipelineError::io(&images_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(|s| s.to_string()))
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(PipelineError::EmptyDataset(root.to_path_buf()));
    }
    let mut sequences = Vec::with_capacity(videos.len());
    for video in videos {
        let frames = frame_files(root, &video)?;
        if frames.is_empty() {
            continue;
        }
        let annos = annotation_files(root, &video).unwrap_or_default();
        // The first-frame annotation is the one matching the first frame's stem.
        let first_stem = frames[0].file_stem().map(|s| s.to_owned());
        let first_anno = annos
            .iter()
            .find(|a| a.file_stem().map(|s| s.to_owned()) == first_stem);
        let entry = match first_anno {
            Some(path) => {
                let mask = load_mask(path)?;
                let ids = mask.object_labels();
                SequenceEntry {
                    id: video,
                    frame_count: frames.len(),
                    object_count: ids.len(),
                    object_ids: ids,
                    missing_first_annotation: false,
                }
            }
            None => SequenceEntry {
                id: video,
                frame_count: frames.len(),
                object_count: 0,
                object_ids: Vec::new(),
                missing_first_annotation: true,
            },
        };
        sequences.push(entry);
    }
    if sequences.is_empty() {
        return Err(PipelineError::EmptyDataset(root.to_path_buf()));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        sequences,
    })
}

/// Load a full video: every frame, plus masks wherever an annotation with the
/// same stem exists. Object ids are the union over all present masks.
pub fn load_video(root: &Path, video: &str) -> Result<VideoSample> {
    let frames = frame_files(root, video)?;
    if frames.is_empty() {
        return Err(PipelineError::EmptyDataset(root.join(video)));
    }
    let annos = annotation_files(root, video).unwrap_or_default();
    let mut loaded_frames = Vec::with_capacity(frames.len());
    let mut masks: Vec<Option<MaskMap>> = Vec::with_capacity(frames.len());
    let mut ids: BTreeSet<u32> = BTreeSet::new();
    for f in &frames {
        loaded_frames.push(load_frame(f)?);
        let stem = f.file_stem().map(|s| s.to_owned());
        let anno = annos
            .iter()
            .find(|a| a.file_stem().map(|s| s.to_owned()) == stem);
        match anno {
            Some(path) => {
                let m = load_mask(path)?;
                ids.extend(m.object_labels());
                masks.push(Some(m));
            }
            None => masks.push(None),
        }
    }
    let sample = VideoSample {
        id: video.to_string(),
        frames: loaded_frames,
        masks,
        object_ids: ids.into_iter().collect(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Read an RGB frame (JPEG or PNG) and normalize to `[0,1]`.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| PipelineError::image(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Frame::new(data))
}

/// Write an RGB frame as PNG, clamping to `[0,1]`.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let (h, w) = (frame.height(), frame.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (frame.data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| PipelineError::image(path, e.to_string()))
}

/// Read an 8-bit indexed-palette PNG; the palette index is the label.
pub fn load_mask(path: &Path) -> Result<MaskMap> {
    let file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    // Identity transformation keeps raw palette indices instead of expanding
    // them to RGB.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| PipelineError::image(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed {
        return Err(PipelineError::NotIndexed(path.to_path_buf()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PipelineError::image(
            path,
            format!("expected 8-bit palette indices, got {:?}", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame_info = reader
        .next_frame(&mut buf)
        .map_err(|e| PipelineError::image(path, e.to_string()))?;
    let line = frame_info.line_size;
    let mut labels = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            labels[[y, x]] = buf[y * line + x] as u32;
        }
    }
    Ok(MaskMap::new(labels))
}

/// Write a label map as an 8-bit indexed-palette PNG with the standard
/// segmentation palette embedded.
pub fn save_mask(mask: &MaskMap, path: &Path) -> Result<()> {
    if let Some(&max) = mask.labels.iter().max() {
        if max > 255 {
            return Err(PipelineError::LabelOutOfRange(max));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let (h, w) = (mask.height(), mask.width());
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(standard_palette().to_vec());
    let mut writer = encoder
        .write_header()
        .map_err(|e| PipelineError::image(path, e.to_string()))?;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(mask.labels[[y, x]] as u8);
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| PipelineError::image(path, e.to_string()))
}

/// The 256-entry palette used by the usual VOS benchmarks (bit-reversal
/// colormap), so saved masks render with the familiar colors.
pub fn standard_palette() -> [u8; 768] {
    let mut palette = [0u8; 768];
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut id = i;
        for shift in 0..8 {
            r |= (((id >> 0) & 1) as u8) << (7 - shift);
            g |= (((id >> 1) & 1) as u8) << (7 - shift);
            b |= (((id >> 2) & 1) as u8) << (7 - shift);
            id >>= 3;
        }
        palette[i * 3] = r;
        palette[i * 3 + 1] = g;
        palette[i * 3 + 2] = b;
    }
    palette
}

/// Split a label map into per-object binary indicator maps.
pub fn mask_to_binary_stack(mask: &MaskMap, object_ids: &[u32]) -> Result<ProbStack> {
    let known: BTreeSet<u32> = object_ids.iter().copied().collect();
    for l in mask.object_labels() {
        if !known.contains(&l) {
            return Err(PipelineError::UnknownLabel(l));
        }
    }
    let (h, w) = (mask.height(), mask.width());
    let mut maps = Array3::<f64>::zeros((object_ids.len(), h, w));
    for (k, &id) in object_ids.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if mask.labels[[y, x]] == id {
                    maps[[k, y, x]] = 1.0;
                }
            }
        }
    }
    Ok(ProbStack {
        object_ids: object_ids.to_vec(),
        maps,
        with_background: false,
    })
}

/// Result writer: `<out>/<video>/<frame_stem>.png` mirroring the input layout.
pub fn save_results(
    out_root: &Path,
    video: &str,
    frame_stems: &[String],
    masks: &[MaskMap],
) -> Result<()> {
    assert_eq!(frame_stems.len(), masks.len());
    for (stem, mask) in frame_stems.iter().zip(masks) {
        let path = out_root.join(video).join(format!("{stem}.png"));
        save_mask(mask, &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_has_expected_anchor_colors() {
        let p = standard_palette();
        assert_eq!(&p[0..3], &[0, 0, 0]); // background black
        assert_eq!(&p[3..6], &[128, 0, 0]); // object 1 dark red
        assert_eq!(&p[6..9], &[0, 128, 0]); // object 2 dark green
    }
}
