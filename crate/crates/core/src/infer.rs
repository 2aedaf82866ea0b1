//! Frame-by-frame propagation and test-time augmentation.
//!
//! A [`Session`] owns all per-video state: the pixel memory, the object token
//! memory, the sensory hidden states and the previous frame's soft masks.
//! Training drives the same session with gradients enabled; inference runs it
//! under a no-grad guard. TTA branches (horizontal flip x shorter-side caps)
//! are independent sessions whose soft outputs are averaged at the original
//! resolution.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::data_io::{Frame, MaskMap, ProbStack, VideoSample};
use crate::error::{PipelineError, Result};
use crate::imgops;
use crate::memory::{self, MemoryConfig, ObjectMemory, PixelMemory};
use crate::network::{FrameEncoding, VosModel};
use crate::tape::{NoGradGuard, Tensor};

/// Inference settings: shorter-side caps, flip TTA and the memory strategy.
#[derive(Debug, Clone)]
pub struct InferConfig {
    /// Maximum shorter-side resolutions; a cap larger than the video is a
    /// no-op branch (no upscaling).
    pub scales: Vec<u32>,
    pub flip: bool,
    pub memory: MemoryConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            scales: vec![480],
            flip: false,
            memory: MemoryConfig::default(),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(PipelineError::InvalidInput("scales must be non-empty".into()));
        }
        if self.scales.iter().any(|&s| s == 0) {
            return Err(PipelineError::InvalidInput("scales must be positive".into()));
        }
        self.memory.validate()
    }
}

/// Read/admit audit log: enough to check causality and the memory policy.
#[derive(Debug, Default, Clone)]
pub struct SessionTrace {
    /// (query frame, stored frame indices visible to the read).
    pub reads: Vec<(usize, Vec<usize>)>,
    /// Frames actually admitted into pixel memory.
    pub admitted: Vec<usize>,
    /// Memory size after each processed frame.
    pub sizes: Vec<usize>,
}

/// Output of one propagation step.
pub struct StepOutput {
    /// Raw per-object logit maps `[1,H,W]`.
    pub object_logits: Vec<Tensor>,
    /// Aggregated probabilities `[bg, obj1, ..., objK]`, each `[1,H,W]`,
    /// summing to 1 per pixel.
    pub aggregated: Vec<Tensor>,
    pub mask: MaskMap,
}

/// Multiply the per-object probabilities into a normalized distribution with
/// an explicit background channel: `b = prod_k (1 - p_k)`, channels
/// `[b, p_1..p_K] / (b + sum p_k)`.
pub fn soft_aggregate_tensors(per_object: &[Tensor]) -> Vec<Tensor> {
    assert!(!per_object.is_empty());
    let mut bg = per_object[0].affine(-1.0, 1.0);
    for p in &per_object[1..] {
        bg = bg.mul(&p.affine(-1.0, 1.0));
    }
    let mut denom = bg.clone();
    for p in per_object {
        denom = denom.add(p);
    }
    let mut out = Vec::with_capacity(per_object.len() + 1);
    out.push(bg.div(&denom));
    for p in per_object {
        out.push(p.div(&denom));
    }
    out
}

/// Plain-array aggregation of a background-free [`ProbStack`].
pub fn soft_aggregate(stack: &ProbStack) -> ProbStack {
    assert!(!stack.with_background, "input already has a background channel");
    let (k, h, w) = stack.maps.dim();
    let mut maps = Array3::<f64>::zeros((k + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut bg = 1.0;
            let mut sum = 0.0;
            for o in 0..k {
                let p = stack.maps[[o, y, x]];
                bg *= 1.0 - p;
                sum += p;
            }
            let denom = bg + sum;
            maps[[0, y, x]] = bg / denom;
            for o in 0..k {
                maps[[o + 1, y, x]] = stack.maps[[o, y, x]] / denom;
            }
        }
    }
    ProbStack {
        object_ids: stack.object_ids.clone(),
        maps,
        with_background: true,
    }
}

/// Argmax decision with deterministic tie-breaking: background wins ties,
/// then the lowest object id.
pub fn argmax_mask(stack: &ProbStack) -> MaskMap {
    assert!(stack.with_background);
    let (c, h, w) = stack.maps.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = stack.maps[[0, y, x]];
            let mut best_label = 0u32;
            for o in 1..c {
                let v = stack.maps[[o, y, x]];
                if v > best {
                    best = v;
                    best_label = stack.object_ids[o - 1];
                }
            }
            labels[[y, x]] = best_label;
        }
    }
    MaskMap::new(labels)
}

fn one_hot_prob_tensors(mask: &MaskMap, object_ids: &[u32]) -> Vec<Tensor> {
    let (h, w) = (mask.height(), mask.width());
    object_ids
        .iter()
        .map(|&id| {
            let mut m = Array3::<f64>::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    if mask.labels[[y, x]] == id {
                        m[[0, y, x]] = 1.0;
                    }
                }
            }
            Tensor::constant(m.into_dyn())
        })
        .collect()
}

/// Per-video propagation state.
pub struct Session<'m> {
    model: &'m VosModel,
    memory: PixelMemory,
    objmem: ObjectMemory,
    sensory: Vec<Tensor>,
    prev_probs: Vec<Tensor>,
    object_ids: Vec<u32>,
    next_frame: usize,
    train: bool,
    pub trace: SessionTrace,
}

impl<'m> Session<'m> {
    /// Start a session on the reference frame and its ground-truth mask.
    pub fn start(
        model: &'m VosModel,
        mem_cfg: MemoryConfig,
        frame0: &Frame,
        mask0: &MaskMap,
        train: bool,
    ) -> Result<Self> {
        let guard = if train { None } else { Some(NoGradGuard::new()) };
        let object_ids = mask0.object_labels();
        if object_ids.is_empty() {
            return Err(PipelineError::InvalidInput(
                "reference mask annotates no objects".into(),
            ));
        }
        let mut mem_cfg = mem_cfg;
        mem_cfg.key_dim = model.cfg.key_dim;
        mem_cfg.value_dim = model.cfg.value_dim;
        mem_cfg.affinity = model.cfg.affinity;
        let mut session = Session {
            model,
            memory: PixelMemory::new(mem_cfg)?,
            objmem: ObjectMemory::new(object_ids.len(), model.cfg.obj_tokens, model.cfg.embed_dim),
            sensory: Vec::new(),
            prev_probs: one_hot_prob_tensors(mask0, &object_ids),
            object_ids,
            next_frame: 1,
            train,
            trace: SessionTrace::default(),
        };
        let enc = model.encode_query(frame0);
        let (gh, gw) = enc.grid();
        session.sensory = (0..session.object_ids.len())
            .map(|_| Tensor::constant(ArrayD::zeros(IxDyn(&[model.cfg.hidden_dim, gh, gw]))))
            .collect();
        let probs = session.prev_probs.clone();
        session.update_memories(0, &enc, &probs, false)?;
        // Seed the sensory state from the reference mask (no readout exists
        // yet, so that channel is zero).
        for k in 0..session.object_ids.len() {
            let p16 = session.grid_probs(&enc, &probs[k]);
            let zeros = Tensor::constant(ArrayD::zeros(IxDyn(&[model.cfg.embed_dim, gh, gw])));
            let x = Tensor::concat(0, &[zeros, p16]);
            session.sensory[k] = model.sensory_gru.update(&session.sensory[k], &x);
        }
        drop(guard);
        Ok(session)
    }

    pub fn object_ids(&self) -> &[u32] {
        &self.object_ids
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn memory(&self) -> &PixelMemory {
        &self.memory
    }

    fn grid_probs(&self, enc: &FrameEncoding, probs: &Tensor) -> Tensor {
        let (gh, gw) = enc.grid();
        let (padded, _, _) = VosModel::pad_to_grid(probs);
        padded.bilinear_resize(gh, gw)
    }

    /// Admit key/values per the memory policy and refresh the sensory and
    /// object memories. `force_admit` overrides the interval when a new
    /// object's reference frame must enter memory.
    fn update_memories(
        &mut self,
        frame_index: usize,
        enc: &FrameEncoding,
        probs: &[Tensor],
        force_admit: bool,
    ) -> Result<()> {
        if force_admit || self.memory.wants_frame(frame_index) {
            let values = self.model.encode_mask(&enc.frame, probs)?;
            let mut map = BTreeMap::new();
            for (k, v) in values.into_iter().enumerate() {
                map.insert(self.object_ids[k], v);
            }
            if self
                .memory
                .admit_with_force(frame_index, enc.key.clone(), map, force_admit)?
            {
                self.trace.admitted.push(frame_index);
            }
        }
        let token_feats = self.model.token_features(&enc.f16);
        let (gh, gw) = enc.grid();
        for k in 0..self.object_ids.len() {
            let p16 = self.grid_probs(enc, &probs[k]);
            let p16_map = p16.reshape(&[gh, gw]);
            self.objmem.update(k, &token_feats, &p16_map);
        }
        self.trace.sizes.push(self.memory.len());
        Ok(())
    }

    /// Advance one frame: predict, then fold the frame into the memories.
    /// `gt` (inference only) introduces later-appearing objects with their
    /// annotated masks.
    pub fn step(&mut self, frame: &Frame, gt: Option<&MaskMap>) -> Result<StepOutput> {
        let guard = if self.train {
            None
        } else {
            Some(NoGradGuard::new())
        };
        let frame_index = self.next_frame;
        self.next_frame += 1;
        let enc = self.model.encode_query(frame);
        let (r0s, outcome) = memory::read(
            &self.memory,
            &enc.key,
            &self.sensory,
            &self.object_ids,
            &self.model.read_fusion,
        )?;
        let mut seen: Vec<usize> = outcome.entry_frames.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        self.trace.reads.push((frame_index, seen));
        let (gh, gw) = enc.grid();
        let mut logits = Vec::with_capacity(self.object_ids.len());
        let mut readouts = Vec::with_capacity(self.object_ids.len());
        for k in 0..self.object_ids.len() {
            let fg16 = self.grid_probs(&enc, &self.prev_probs[k]);
            let fg_arr = fg16
                .value()
                .into_shape_with_order((gh, gw))
                .unwrap();
            let (r_map, _queries) = self
                .model
                .run_blocks(&r0s[k], &self.objmem.token_matrix(k), &fg_arr);
            logits.push(self.model.decode(&r_map, &enc));
            readouts.push(r_map);
        }
        let per_object: Vec<Tensor> = logits.iter().map(|l| l.sigmoid()).collect();
        let aggregated = soft_aggregate_tensors(&per_object);
        let mut new_probs: Vec<Tensor> = aggregated[1..].to_vec();

        // Ingest ground-truth masks for objects first annotated at this frame.
        let mut introduced = Vec::new();
        if let Some(gt_mask) = gt {
            for id in gt_mask.object_labels() {
                if !self.object_ids.contains(&id) {
                    introduced.push(id);
                }
            }
            for &id in &introduced {
                self.object_ids.push(id);
                self.objmem.add_object();
                self.sensory
                    .push(Tensor::constant(ArrayD::zeros(IxDyn(&[
                        self.model.cfg.hidden_dim,
                        gh,
                        gw,
                    ]))));
                let indicator = one_hot_prob_tensors(gt_mask, &[id]).remove(0);
                new_probs.push(indicator);
            }
        }

        let mut mask = argmax_from_tensors(&aggregated, &self.object_ids[..aggregated.len() - 1]);
        if let Some(gt_mask) = gt {
            for &id in &introduced {
                for y in 0..mask.height() {
                    for x in 0..mask.width() {
                        if gt_mask.labels[[y, x]] == id {
                            mask.labels[[y, x]] = id;
                        }
                    }
                }
            }
        }

        self.update_memories(frame_index, &enc, &new_probs, !introduced.is_empty())?;
        for k in 0..self.object_ids.len() {
            let p16 = self.grid_probs(&enc, &new_probs[k]);
            let x = Tensor::concat(0, &[readout_or_zeros(&readouts, k, self.model, gh, gw), p16]);
            self.sensory[k] = self.model.sensory_gru.update(&self.sensory[k], &x);
        }
        self.prev_probs = new_probs;
        drop(guard);
        Ok(StepOutput {
            object_logits: logits,
            aggregated,
            mask,
        })
    }
}

fn readout_or_zeros(
    readouts: &[Tensor],
    k: usize,
    model: &VosModel,
    gh: usize,
    gw: usize,
) -> Tensor {
    readouts.get(k).cloned().unwrap_or_else(|| {
        Tensor::constant(ArrayD::zeros(IxDyn(&[model.cfg.embed_dim, gh, gw])))
    })
}

fn argmax_from_tensors(aggregated: &[Tensor], object_ids: &[u32]) -> MaskMap {
    let shape = aggregated[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let mut maps = Array3::<f64>::zeros((aggregated.len(), h, w));
    for (c, t) in aggregated.iter().enumerate() {
        t.with_value(|v| {
            let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            maps.index_axis_mut(ndarray::Axis(0), c)
                .assign(&v3.index_axis(ndarray::Axis(0), 0));
        });
    }
    argmax_mask(&ProbStack {
        object_ids: object_ids.to_vec(),
        maps,
        with_background: true,
    })
}

fn stack_from_tensors(aggregated: &[Tensor], object_ids: &[u32]) -> ProbStack {
    let shape = aggregated[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let mut maps = Array3::<f64>::zeros((aggregated.len(), h, w));
    for (c, t) in aggregated.iter().enumerate() {
        t.with_value(|v| {
            let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            maps.index_axis_mut(ndarray::Axis(0), c)
                .assign(&v3.index_axis(ndarray::Axis(0), 0));
        });
    }
    ProbStack {
        object_ids: object_ids.to_vec(),
        maps,
        with_background: true,
    }
}

fn gt_prob_stack(mask: &MaskMap, object_ids: &[u32]) -> ProbStack {
    let (h, w) = (mask.height(), mask.width());
    let mut maps = Array3::<f64>::zeros((object_ids.len() + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels[[y, x]];
            match object_ids.iter().position(|&id| id == l) {
                Some(k) if l != 0 => maps[[k + 1, y, x]] = 1.0,
                _ => maps[[0, y, x]] = 1.0,
            }
        }
    }
    ProbStack {
        object_ids: object_ids.to_vec(),
        maps,
        with_background: true,
    }
}

/// Propagate hard masks through a video. Frame 0 echoes the ground truth.
pub fn propagate(
    video: &VideoSample,
    model: &VosModel,
    mem_cfg: MemoryConfig,
) -> Result<Vec<MaskMap>> {
    propagate_with_trace(video, model, mem_cfg).map(|(m, _)| m)
}

pub fn propagate_with_trace(
    video: &VideoSample,
    model: &VosModel,
    mem_cfg: MemoryConfig,
) -> Result<(Vec<MaskMap>, SessionTrace)> {
    let (masks, _probs, trace) = run_video(video, model, mem_cfg)?;
    Ok((masks, trace))
}

/// Soft propagation: per-frame aggregated probability stacks (background
/// included). Frame 0 is the one-hot ground truth.
pub fn propagate_soft(
    video: &VideoSample,
    model: &VosModel,
    mem_cfg: MemoryConfig,
) -> Result<Vec<ProbStack>> {
    let (_masks, probs, _trace) = run_video(video, model, mem_cfg)?;
    Ok(probs)
}

fn run_video(
    video: &VideoSample,
    model: &VosModel,
    mem_cfg: MemoryConfig,
) -> Result<(Vec<MaskMap>, Vec<ProbStack>, SessionTrace)> {
    video.validate()?;
    let mask0 = video.masks[0]
        .as_ref()
        .ok_or_else(|| PipelineError::InvalidInput("first-frame mask missing".into()))?;
    let mut session = Session::start(model, mem_cfg, &video.frames[0], mask0, false)?;
    let mut masks = vec![mask0.clone()];
    let mut probs = vec![gt_prob_stack(mask0, session.object_ids())];
    for t in 1..video.frames.len() {
        let out = session.step(&video.frames[t], video.masks[t].as_ref())?;
        probs.push(stack_from_tensors(&out.aggregated, session.object_ids()));
        masks.push(out.mask);
    }
    Ok((masks, probs, session.trace))
}

/// Something that can run a video to soft outputs; lets tests substitute a
/// mock model when exercising the TTA plumbing.
pub trait SoftPropagator {
    fn run_soft(&self, video: &VideoSample) -> Result<Vec<ProbStack>>;
}

pub struct ModelPropagator<'m> {
    pub model: &'m VosModel,
    pub mem_cfg: MemoryConfig,
}

impl SoftPropagator for ModelPropagator<'_> {
    fn run_soft(&self, video: &VideoSample) -> Result<Vec<ProbStack>> {
        propagate_soft(video, self.model, self.mem_cfg)
    }
}

/// Mirror a video left-right (frames and all present masks).
pub fn hflip_video(video: &VideoSample) -> VideoSample {
    VideoSample {
        id: video.id.clone(),
        frames: video
            .frames
            .iter()
            .map(|f| Frame::new(imgops::hflip_chw(&f.data)))
            .collect(),
        masks: video
            .masks
            .iter()
            .map(|m| m.as_ref().map(|m| MaskMap::new(imgops::hflip_labels(&m.labels))))
            .collect(),
        object_ids: video.object_ids.clone(),
    }
}

pub fn hflip_prob_stack(stack: &ProbStack) -> ProbStack {
    let (c, h, w) = stack.maps.dim();
    let mut maps = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                maps[[ci, y, x]] = stack.maps[[ci, y, w - 1 - x]];
            }
        }
    }
    ProbStack {
        object_ids: stack.object_ids.clone(),
        maps,
        with_background: stack.with_background,
    }
}

/// Horizontal-flip TTA branch: mirror the video, propagate, mirror the soft
/// outputs back.
pub fn run_flip_branch<P: SoftPropagator>(
    propagator: &P,
    video: &VideoSample,
) -> Result<Vec<ProbStack>> {
    let flipped = hflip_video(video);
    let probs = propagator.run_soft(&flipped)?;
    Ok(probs.iter().map(hflip_prob_stack).collect())
}

/// Cap the shorter side at `max_shorter_side`, never upscaling. The longer
/// side is rounded to the nearest even integer.
pub fn rescale_video(video: &VideoSample, max_shorter_side: u32) -> VideoSample {
    let (h, w) = (video.height(), video.width());
    let shorter = h.min(w) as u32;
    if max_shorter_side >= shorter {
        return video.clone();
    }
    let target = max_shorter_side as usize;
    let scale = target as f64 / shorter as f64;
    let even = |x: f64| ((x / 2.0).round() as usize * 2).max(2);
    let (nh, nw) = if h <= w {
        (target, even(w as f64 * scale))
    } else {
        (even(h as f64 * scale), target)
    };
    VideoSample {
        id: video.id.clone(),
        frames: video
            .frames
            .iter()
            .map(|f| Frame::new(imgops::bilinear_resize_chw(&f.data, nh, nw)))
            .collect(),
        masks: video
            .masks
            .iter()
            .map(|m| {
                m.as_ref()
                    .map(|m| MaskMap::new(imgops::nn_resize_labels(&m.labels, nh, nw)))
            })
            .collect(),
        object_ids: video.object_ids.clone(),
    }
}

fn resize_prob_stack(stack: &ProbStack, h: usize, w: usize) -> ProbStack {
    ProbStack {
        object_ids: stack.object_ids.clone(),
        maps: imgops::bilinear_resize_chw(&stack.maps, h, w),
        with_background: stack.with_background,
    }
}

/// Average soft branches at the original resolution and renormalize.
pub fn fuse_tta(branches: &[Vec<ProbStack>], original_hw: (usize, usize)) -> Result<Vec<ProbStack>> {
    if branches.is_empty() {
        return Err(PipelineError::InvalidInput("no TTA branches".into()));
    }
    let n_frames = branches[0].len();
    for (i, b) in branches.iter().enumerate() {
        if b.len() != n_frames {
            return Err(PipelineError::ShapeMismatch(format!(
                "branch {i} has {} frames, expected {n_frames}",
                b.len()
            )));
        }
    }
    let (h, w) = original_hw;
    let mut fused = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let resized: Vec<ProbStack> = branches
            .iter()
            .map(|b| resize_prob_stack(&b[f], h, w))
            .collect();
        let c = resized[0].maps.dim().0;
        for r in &resized {
            if r.maps.dim().0 != c || r.object_ids != resized[0].object_ids {
                return Err(PipelineError::ShapeMismatch(format!(
                    "branch channel mismatch at frame {f}"
                )));
            }
        }
        let mut maps = Array3::<f64>::zeros((c, h, w));
        for r in &resized {
            maps += &r.maps;
        }
        maps /= branches.len() as f64;
        // Renormalize with the background channel so sums are exactly 1.
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    s += maps[[ci, y, x]];
                }
                if s > 0.0 {
                    for ci in 0..c {
                        maps[[ci, y, x]] /= s;
                    }
                }
            }
        }
        fused.push(ProbStack {
            object_ids: resized[0].object_ids.clone(),
            maps,
            with_background: true,
        });
    }
    Ok(fused)
}

/// Full TTA inference on one video: every (scale x flip) branch with an
/// independent memory, fused by probability averaging, decided by argmax.
/// Returns the hard masks and the fused soft stacks.
pub fn run_tta(
    video: &VideoSample,
    model: &VosModel,
    config: &InferConfig,
) -> Result<(Vec<MaskMap>, Vec<ProbStack>)> {
    config.validate()?;
    video.validate()?;
    let mask0 = video.masks[0]
        .as_ref()
        .ok_or_else(|| PipelineError::InvalidInput("first-frame mask missing".into()))?;
    let flips: &[bool] = if config.flip { &[false, true] } else { &[false] };
    let mut branches = Vec::new();
    for &scale in &config.scales {
        let scaled = rescale_video(video, scale);
        for &flip in flips {
            let propagator = ModelPropagator {
                model,
                mem_cfg: config.memory,
            };
            let probs = if flip {
                run_flip_branch(&propagator, &scaled)?
            } else {
                propagator.run_soft(&scaled)?
            };
            branches.push(probs);
        }
    }
    let fused = fuse_tta(&branches, (video.height(), video.width()))?;
    let mut masks: Vec<MaskMap> = fused.iter().map(argmax_mask).collect();
    masks[0] = mask0.clone();
    Ok((masks, fused))
}

/// Documented binary dump of a fused probability stack (`PRB1`): object ids,
/// sizes, then f32 maps with the background channel first.
pub fn write_prob_stack(path: &Path, stack: &ProbStack) -> Result<()> {
    assert!(stack.with_background);
    let mut buf = Vec::new();
    buf.extend_from_slice(b"PRB1");
    buf.extend_from_slice(&(stack.object_ids.len() as u32).to_le_bytes());
    for &id in &stack.object_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let (_, h, w) = stack.maps.dim();
    buf.extend_from_slice(&(h as u64).to_le_bytes());
    buf.extend_from_slice(&(w as u64).to_le_bytes());
    for v in stack.maps.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::network::atomic_write(path, &buf)
}

pub fn read_prob_stack(path: &Path) -> Result<ProbStack> {
    let data = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let err = |m: &str| PipelineError::Checkpoint(m.to_string());
    if data.len() < 8 || &data[0..4] != b"PRB1" {
        return Err(err("bad prob stack magic"));
    }
    let mut pos = 4;
    let k = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut object_ids = Vec::with_capacity(k);
    for _ in 0..k {
        object_ids.push(u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()));
        pos += 4;
    }
    let h = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let w = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let n = (k + 1) * h * w;
    if data.len() < pos + 4 * n {
        return Err(err("truncated prob stack"));
    }
    let vals: Vec<f64> = data[pos..pos + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(ProbStack {
        object_ids,
        maps: Array3::from_shape_vec((k + 1, h, w), vals).unwrap(),
        with_background: true,
    })
}
