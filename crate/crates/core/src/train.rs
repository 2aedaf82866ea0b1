//! Two-stage training: pretraining on synthetic clips from static image/mask
//! pairs, then main training on real video clips, both with motion-blur
//! augmentation and a decoupled-weight-decay adaptive optimizer.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    apply_motion_blur, random_crop_pair, sample_blur, synth_video, AffineJitter, BlurConfig,
};
use crate::data_io::{Frame, MaskMap, VideoSample};
use crate::error::{PipelineError, Result};
use crate::infer::{soft_aggregate_tensors, Session};
use crate::layers::ParamList;
use crate::memory::{Affinity, MemoryConfig};
use crate::network::{atomic_write, VosModel};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Main,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Pretrain => write!(f, "pretrain"),
            Stage::Main => write!(f, "main"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub iters: usize,
    pub crop: usize,
    pub decay_points: Vec<usize>,
    pub decay_factor: f64,
    pub seq_len: usize,
    pub checkpoint_interval: usize,
    pub blur: BlurConfig,
    pub jitter: AffineJitter,
}

impl TrainConfig {
    /// Paper-scale pretraining: 80K iterations at 384x384, constant lr.
    pub fn paper_pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            lr: 1e-4,
            batch: 16,
            weight_decay: 1e-3,
            iters: 80_000,
            crop: 384,
            decay_points: Vec::new(),
            decay_factor: 0.1,
            seq_len: 3,
            checkpoint_interval: 5_000,
            blur: BlurConfig::default(),
            jitter: AffineJitter::default(),
        }
    }

    /// Paper-scale main training: 175K iterations at 480x480, lr cut by 10x
    /// after 140K and 160K.
    pub fn paper_main() -> Self {
        TrainConfig {
            stage: Stage::Main,
            lr: 1e-4,
            batch: 16,
            weight_decay: 1e-3,
            iters: 175_000,
            crop: 480,
            decay_points: vec![140_000, 160_000],
            decay_factor: 0.1,
            seq_len: 8,
            checkpoint_interval: 5_000,
            blur: BlurConfig::default(),
            jitter: AffineJitter::default(),
        }
    }

    /// Desk-scale preset: small crops, short clips, few iterations, a higher
    /// learning rate. Runs the full two-stage pipeline on CPU in minutes.
    pub fn toy_pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            lr: 1e-3,
            batch: 2,
            weight_decay: 1e-3,
            iters: 150,
            crop: 64,
            decay_points: Vec::new(),
            decay_factor: 0.1,
            seq_len: 3,
            checkpoint_interval: 100,
            blur: BlurConfig::default(),
            jitter: AffineJitter {
                max_rotation_deg: 5.0,
                max_shear_deg: 3.0,
                max_scale_delta: 0.05,
                max_translate_frac: 0.05,
            },
        }
    }

    pub fn toy_main() -> Self {
        TrainConfig {
            stage: Stage::Main,
            lr: 1e-3,
            batch: 2,
            weight_decay: 1e-3,
            iters: 200,
            crop: 64,
            decay_points: vec![160],
            decay_factor: 0.1,
            seq_len: 4,
            checkpoint_interval: 100,
            blur: BlurConfig::default(),
            jitter: AffineJitter::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(PipelineError::InvalidInput("lr must be positive".into()));
        }
        if self.batch == 0 || self.iters == 0 || self.crop == 0 || self.seq_len == 0 {
            return Err(PipelineError::InvalidInput(
                "batch, iters, crop and seq_len must be positive".into(),
            ));
        }
        let mut prev: Option<usize> = None;
        for &p in &self.decay_points {
            if p >= self.iters {
                return Err(PipelineError::InvalidInput(format!(
                    "decay point {p} not below iters {}",
                    self.iters
                )));
            }
            if let Some(q) = prev {
                if p <= q {
                    return Err(PipelineError::InvalidInput(
                        "decay points must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(p);
        }
        self.blur.validate()
    }

    /// Compact stage descriptor, e.g. `pretrain(80000, 384)`.
    pub fn summary(&self) -> String {
        format!("{}({}, {})", self.stage, self.iters, self.crop)
    }
}

/// Piecewise-constant schedule: the base rate decayed once per passed decay
/// point. Pretraining has no decay points, hence a constant rate.
pub fn lr_at(config: &TrainConfig, iteration: usize) -> f64 {
    let passed = config
        .decay_points
        .iter()
        .filter(|&&p| p <= iteration)
        .count();
    config.lr * config.decay_factor.powi(passed as i32)
}

/// Training data: static pairs feed pretraining, whole videos feed main
/// training.
#[derive(Default)]
pub struct DataPool {
    pub static_pairs: Vec<(Frame, MaskMap)>,
    pub videos: Vec<VideoSample>,
}

impl DataPool {
    /// Collect every annotated (frame, mask) pair under the given roots.
    pub fn load_static(roots: &[PathBuf]) -> Result<Self> {
        let mut pairs = Vec::new();
        for root in roots {
            let index = crate::data_io::scan_dataset(root)?;
            for seq in &index.sequences {
                let video = crate::data_io::load_video(root, &seq.id)?;
                for (frame, mask) in video.frames.iter().zip(&video.masks) {
                    if let Some(mask) = mask {
                        if !mask.object_labels().is_empty() {
                            pairs.push((frame.clone(), mask.clone()));
                        }
                    }
                }
            }
        }
        if pairs.is_empty() {
            return Err(PipelineError::InvalidInput(
                "no annotated image/mask pairs found".into(),
            ));
        }
        Ok(DataPool {
            static_pairs: pairs,
            videos: Vec::new(),
        })
    }

    /// Load whole videos for main training.
    pub fn load_videos(roots: &[PathBuf]) -> Result<Self> {
        let mut videos = Vec::new();
        for root in roots {
            let index = crate::data_io::scan_dataset(root)?;
            for seq in &index.sequences {
                if seq.object_count == 0 {
                    continue;
                }
                videos.push(crate::data_io::load_video(root, &seq.id)?);
            }
        }
        if videos.is_empty() {
            return Err(PipelineError::InvalidInput(
                "no annotated videos found".into(),
            ));
        }
        Ok(DataPool {
            static_pairs: Vec::new(),
            videos,
        })
    }
}

/// One training sample: a short clip with a mask per frame.
#[derive(Clone)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub masks: Vec<MaskMap>,
    pub object_ids: Vec<u32>,
}

fn drop_unknown_labels(mask: &MaskMap, keep: &[u32]) -> MaskMap {
    MaskMap::new(
        mask.labels
            .mapv(|l| if keep.contains(&l) { l } else { 0 }),
    )
}

fn sample_pretrain_clip<R: Rng>(
    pool: &DataPool,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Clip> {
    const MAX_TRIES: usize = 64;
    for _ in 0..MAX_TRIES {
        let (frame, mask) = &pool.static_pairs[rng.gen_range(0..pool.static_pairs.len())];
        let (cf, cm) = random_crop_pair(frame, mask, cfg.crop, rng)?;
        if cm.object_labels().is_empty() {
            continue;
        }
        let clip_video = synth_video(&cf, &cm, cfg.seq_len, &cfg.jitter, rng)?;
        return Ok(Clip {
            object_ids: clip_video.object_ids.clone(),
            masks: clip_video.masks.into_iter().map(|m| m.unwrap()).collect(),
            frames: clip_video.frames,
        });
    }
    Err(PipelineError::InvalidInput(
        "could not sample a crop containing any object".into(),
    ))
}

fn sample_main_clip<R: Rng>(pool: &DataPool, cfg: &TrainConfig, rng: &mut R) -> Result<Clip> {
    const MAX_TRIES: usize = 64;
    for _ in 0..MAX_TRIES {
        let video = &pool.videos[rng.gen_range(0..pool.videos.len())];
        // Candidate windows where every frame carries an annotation.
        let len = video.frames.len();
        let window = cfg.seq_len.min(len);
        let mut starts = Vec::new();
        for s in 0..=len - window {
            if (s..s + window).all(|t| video.masks[t].is_some())
                && video.masks[s]
                    .as_ref()
                    .map(|m| !m.object_labels().is_empty())
                    .unwrap_or(false)
            {
                starts.push(s);
            }
        }
        if starts.is_empty() {
            continue;
        }
        let start = starts[rng.gen_range(0..starts.len())];
        let mut frames: Vec<Frame> = Vec::with_capacity(cfg.seq_len);
        let mut masks: Vec<MaskMap> = Vec::with_capacity(cfg.seq_len);
        for t in 0..cfg.seq_len {
            let idx = (start + t).min(start + window - 1);
            frames.push(video.frames[idx].clone());
            masks.push(video.masks[idx].clone().unwrap());
        }
        // One aligned crop for the whole clip.
        let (h, w) = (frames[0].height(), frames[0].width());
        let (ch, cw) = if h < cfg.crop || w < cfg.crop {
            let scale = cfg.crop as f64 / h.min(w) as f64;
            (
                ((h as f64 * scale).round() as usize).max(cfg.crop),
                ((w as f64 * scale).round() as usize).max(cfg.crop),
            )
        } else {
            (h, w)
        };
        if (ch, cw) != (h, w) {
            for f in &mut frames {
                *f = Frame::new(crate::imgops::bilinear_resize_chw(&f.data, ch, cw));
            }
            for m in &mut masks {
                *m = MaskMap::new(crate::imgops::nn_resize_labels(&m.labels, ch, cw));
            }
        }
        let top = if ch == cfg.crop { 0 } else { rng.gen_range(0..=ch - cfg.crop) };
        let left = if cw == cfg.crop { 0 } else { rng.gen_range(0..=cw - cfg.crop) };
        let frames: Vec<Frame> = frames
            .iter()
            .map(|f| {
                Frame::new(
                    f.data
                        .slice(ndarray::s![.., top..top + cfg.crop, left..left + cfg.crop])
                        .to_owned(),
                )
            })
            .collect();
        let mut masks: Vec<MaskMap> = masks
            .iter()
            .map(|m| {
                MaskMap::new(
                    m.labels
                        .slice(ndarray::s![top..top + cfg.crop, left..left + cfg.crop])
                        .to_owned(),
                )
            })
            .collect();
        let object_ids = masks[0].object_labels();
        if object_ids.is_empty() {
            continue;
        }
        for m in &mut masks {
            *m = drop_unknown_labels(m, &object_ids);
        }
        return Ok(Clip {
            frames,
            masks,
            object_ids,
        });
    }
    Err(PipelineError::InvalidInput(
        "could not sample an annotated clip containing any object".into(),
    ))
}

/// Draw a batch of clips for the given stage. Blur, when drawn, uses one
/// kernel shared by all frames of a clip. Fully determined by the rng state.
pub fn make_batch<R: Rng>(cfg: &TrainConfig, pool: &DataPool, rng: &mut R) -> Result<Vec<Clip>> {
    match cfg.stage {
        Stage::Pretrain => {
            if pool.static_pairs.is_empty() {
                return Err(PipelineError::InvalidInput(
                    "pretraining pool is empty".into(),
                ));
            }
        }
        Stage::Main => {
            if pool.videos.is_empty() {
                return Err(PipelineError::InvalidInput("video pool is empty".into()));
            }
        }
    }
    let mut clips = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let mut clip = match cfg.stage {
            Stage::Pretrain => sample_pretrain_clip(pool, cfg, rng)?,
            Stage::Main => sample_main_clip(pool, cfg, rng)?,
        };
        if let Some(kernel) = sample_blur(rng, &cfg.blur)? {
            for f in &mut clip.frames {
                *f = apply_motion_blur(f, &kernel)?;
            }
        }
        clips.push(clip);
    }
    Ok(clips)
}

/// Sequence loss: mean over frames 1.. of `(cross-entropy + soft dice) / 2`
/// on the aggregated probabilities. Frame 0 is the reference and is skipped.
pub fn loss(logits_seq: &[Vec<Tensor>], masks: &[MaskMap], object_ids: &[u32]) -> Result<Tensor> {
    if logits_seq.len() != masks.len() {
        return Err(PipelineError::ShapeMismatch(format!(
            "{} logit frames vs {} masks",
            logits_seq.len(),
            masks.len()
        )));
    }
    if logits_seq.len() < 2 {
        return Err(PipelineError::InvalidInput(
            "loss needs at least one frame beyond the reference".into(),
        ));
    }
    let mut frame_losses = Vec::new();
    for (logits, mask) in logits_seq.iter().zip(masks).skip(1) {
        frame_losses.push(frame_loss(logits, mask, object_ids)?);
    }
    Ok(Tensor::add_n(&frame_losses).affine(1.0 / frame_losses.len() as f64, 0.0))
}

fn frame_loss(logits: &[Tensor], mask: &MaskMap, object_ids: &[u32]) -> Result<Tensor> {
    assert_eq!(logits.len(), object_ids.len());
    let shape = logits[0].shape();
    let (h, w) = (shape[1], shape[2]);
    if (h, w) != (mask.height(), mask.width()) {
        return Err(PipelineError::ShapeMismatch(format!(
            "logits {h}x{w} vs mask {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let hw = h * w;
    let per_object: Vec<Tensor> = logits.iter().map(|l| l.sigmoid()).collect();
    let aggregated = soft_aggregate_tensors(&per_object); // [bg, p1..pK]
    // One-hot targets, channel 0 = background.
    let k = object_ids.len();
    let mut one_hot = ArrayD::zeros(IxDyn(&[k + 1, hw]));
    let mut channel_sums = vec![0.0f64; k + 1];
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels[[y, x]];
            let c = object_ids.iter().position(|&id| id == l).map(|i| i + 1).unwrap_or(0);
            one_hot[[c, y * w + x]] = 1.0;
            channel_sums[c] += 1.0;
        }
    }
    let stacked = Tensor::concat(
        0,
        &aggregated
            .iter()
            .map(|t| t.reshape(&[1, hw]))
            .collect::<Vec<_>>(),
    );
    let one_hot_t = Tensor::constant(one_hot);
    let ce = stacked
        .ln_eps(1e-12)
        .mul(&one_hot_t)
        .sum_all()
        .affine(-1.0 / hw as f64, 0.0);
    // Soft dice per channel with smoothing; exactly 0 for a perfect binary hit.
    const SMOOTH: f64 = 1.0;
    let mut dice_terms = Vec::with_capacity(k + 1);
    for c in 0..=k {
        let p = stacked.narrow(0, c, 1);
        let g = one_hot_t.narrow(0, c, 1);
        let inter = p.mul(&g).sum_all();
        let denom = p.sum_all().affine(1.0, channel_sums[c] + SMOOTH);
        let dice = inter.affine(2.0, SMOOTH).div(&denom).affine(-1.0, 1.0);
        dice_terms.push(dice);
    }
    let dice = Tensor::add_n(&dice_terms).affine(1.0 / (k + 1) as f64, 0.0);
    Ok(ce.affine(0.5, 0.0).add(&dice.affine(0.5, 0.0)))
}

/// Decoupled weight decay Adam. With a zero gradient a step shrinks each
/// parameter by exactly `(1 - lr * weight_decay)`.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamList, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: params
                .iter()
                .map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape())))
                .collect(),
            v: params
                .iter()
                .map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape())))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &ParamList, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in params.iter().enumerate() {
            let g = p
                .grad()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&p.shape())));
            self.m[i] = &self.m[i] * self.beta1 + &g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let mut value = p.value();
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let denom = vhat.mapv(|x| x.sqrt() + self.eps);
            value = &value - &(&mhat / &denom * lr) - &(&value * (lr * self.weight_decay));
            p.set_value(value);
        }
    }

    fn state_arrays(&self) -> (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>) {
        (self.m.clone(), self.v.clone())
    }

    fn restore(&mut self, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>, step_count: usize) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

/// Result of a training stage: per-iteration losses and artifact paths.
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub weights_path: PathBuf,
    pub resume_path: PathBuf,
    pub loss_csv: PathBuf,
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => seed ^ 0x70726574,
        Stage::Main => seed ^ 0x6d61696e,
    }
}

/// Run one stage to completion (or from a resume checkpoint), emitting the
/// loss CSV, periodic resume checkpoints and the final weights.
pub fn train_stage(
    config: &TrainConfig,
    model: &VosModel,
    pool: &DataPool,
    out_dir: &Path,
    seed: u64,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let params = model.parameters();
    let mut optimizer = AdamW::new(&params, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, config.stage));
    let mut start_iter = 0usize;
    if let Some(path) = resume {
        let state = load_resume_checkpoint(path)?;
        model.load_weights(&state.weights)?;
        optimizer.restore(state.m, state.v, state.adam_step);
        rng.set_word_pos(state.rng_word_pos);
        start_iter = state.iteration;
    }
    let mem_cfg = MemoryConfig {
        t_max: config.seq_len.max(2),
        interval: 1,
        key_dim: model.cfg.key_dim,
        value_dim: model.cfg.value_dim,
        affinity: Affinity::NegL2,
    };
    let loss_csv = out_dir.join(format!("loss_{}.csv", config.stage));
    let mut csv_rows = String::new();
    if start_iter == 0 {
        csv_rows.push_str("iteration,lr,loss\n");
    }
    let mut losses = Vec::with_capacity(config.iters - start_iter);
    let weights_path = out_dir.join(format!("weights_{}.ckpt", config.stage));
    let resume_path = out_dir.join(format!("resume_{}.ckpt", config.stage));
    for iteration in start_iter..config.iters {
        let lr = lr_at(config, iteration);
        let clips = make_batch(config, pool, &mut rng)?;
        for (_, p) in &params {
            p.zero_grad();
        }
        let mut batch_loss = 0.0;
        for clip in &clips {
            let clip_loss = clip_forward(model, &mem_cfg, clip)?;
            let scaled = clip_loss.affine(1.0 / clips.len() as f64, 0.0);
            batch_loss += scaled.scalar_value();
            scaled.backward();
        }
        if !batch_loss.is_finite() {
            let dump = out_dir.join("diagnostic_dump.txt");
            let detail = format!(
                "stage={} iteration={iteration} lr={lr} loss={batch_loss}\nrecent_losses={:?}",
                config.stage,
                &losses[losses.len().saturating_sub(10)..]
            );
            let _ = fs::write(&dump, &detail);
            return Err(PipelineError::NonFiniteLoss {
                iteration,
                detail: format!("dump written to {}", dump.display()),
            });
        }
        optimizer.step(&params, lr);
        losses.push(batch_loss);
        csv_rows.push_str(&format!("{iteration},{lr},{batch_loss}\n"));
        let due = (iteration + 1) % config.checkpoint_interval == 0;
        if due || iteration + 1 == config.iters {
            append_csv(&loss_csv, &mut csv_rows)?;
            save_resume_checkpoint(
                &resume_path,
                model,
                &optimizer,
                iteration + 1,
                rng.get_word_pos(),
            )?;
        }
    }
    append_csv(&loss_csv, &mut csv_rows)?;
    model.save_checkpoint(&weights_path)?;
    Ok(TrainReport {
        losses,
        weights_path,
        resume_path,
        loss_csv,
    })
}

fn append_csv(path: &Path, rows: &mut String) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    use std::io::Write;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    file.write_all(rows.as_bytes())
        .map_err(|e| PipelineError::io(path, e))?;
    rows.clear();
    Ok(())
}

/// Forward one clip through a gradient-tracking session and compute its loss.
fn clip_forward(model: &VosModel, mem_cfg: &MemoryConfig, clip: &Clip) -> Result<Tensor> {
    let mut session = Session::start(model, *mem_cfg, &clip.frames[0], &clip.masks[0], true)?;
    let mut logits_seq: Vec<Vec<Tensor>> = Vec::with_capacity(clip.frames.len());
    // Frame 0 is the reference; its slot is filled with empty logits and
    // skipped by the loss.
    logits_seq.push(Vec::new());
    for frame in &clip.frames[1..] {
        let out = session.step(frame, None)?;
        logits_seq.push(out.object_logits);
    }
    loss(&logits_seq, &clip.masks, &clip.object_ids)
}

struct ResumeState {
    iteration: usize,
    rng_word_pos: u128,
    adam_step: usize,
    weights: Vec<(String, ArrayD<f64>)>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

fn save_resume_checkpoint(
    path: &Path,
    model: &VosModel,
    optimizer: &AdamW,
    iteration: usize,
    rng_word_pos: u128,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"VOST");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(iteration as u64).to_le_bytes());
    buf.extend_from_slice(&rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&(optimizer.step_count as u64).to_le_bytes());
    let weights = model.export_weights();
    let model_blob = crate::network::encode_checkpoint(&model.cfg, &weights);
    let (m, v) = optimizer.state_arrays();
    let named = |arrs: &[ArrayD<f64>], tag: &str| -> Vec<(String, ArrayD<f64>)> {
        arrs.iter()
            .enumerate()
            .map(|(i, a)| (format!("{tag}{i}"), a.clone()))
            .collect()
    };
    let m_blob = crate::network::encode_checkpoint(&model.cfg, &named(&m, "m"));
    let v_blob = crate::network::encode_checkpoint(&model.cfg, &named(&v, "v"));
    for blob in [&model_blob, &m_blob, &v_blob] {
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        buf.extend_from_slice(blob);
    }
    atomic_write(path, &buf)
}

fn load_resume_checkpoint(path: &Path) -> Result<ResumeState> {
    let data = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let err = |m: &str| PipelineError::Checkpoint(m.to_string());
    if data.len() < 8 || &data[0..4] != b"VOST" {
        return Err(err("not a training checkpoint"));
    }
    let mut pos = 4;
    let version = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
    pos += 4;
    if version != 1 {
        return Err(err("unsupported training checkpoint version"));
    }
    let iteration = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let rng_word_pos = u128::from_le_bytes(data[pos..pos + 16].try_into().unwrap());
    pos += 16;
    let adam_step = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let mut blobs = Vec::new();
    for _ in 0..3 {
        let len = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        blobs.push(&data[pos..pos + len]);
        pos += len;
    }
    let (_, weights) = crate::network::decode_checkpoint(blobs[0])?;
    let (_, m_named) = crate::network::decode_checkpoint(blobs[1])?;
    let (_, v_named) = crate::network::decode_checkpoint(blobs[2])?;
    Ok(ResumeState {
        iteration,
        rng_word_pos,
        adam_step,
        weights,
        m: m_named.into_iter().map(|(_, a)| a).collect(),
        v: v_named.into_iter().map(|(_, a)| a).collect(),
    })
}
