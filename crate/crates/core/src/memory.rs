//! The three inference-time memories: a pixel memory (frame-indexed key/value
//! store read by attention), a compact per-object token memory, and a
//! recurrent per-object sensory state.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;

use crate::error::{PipelineError, Result};
use crate::layers::{Conv2dLayer, ParamList};
use crate::tape::Tensor;

/// Affinity used when matching query keys against stored keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affinity {
    Dot,
    /// Negative squared L2 distance (the default).
    NegL2,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryConfig {
    /// Maximum number of stored memory frames.
    pub t_max: usize,
    /// Admit every `interval`-th frame (frame 0 is always admitted).
    pub interval: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub affinity: Affinity,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            t_max: 5,
            interval: 5,
            key_dim: 64,
            value_dim: 128,
            affinity: Affinity::NegL2,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 || self.interval < 1 {
            return Err(PipelineError::InvalidInput(format!(
                "memory config t_max={} interval={} must both be >= 1",
                self.t_max, self.interval
            )));
        }
        Ok(())
    }
}

struct MemEntry {
    frame_index: usize,
    key: Tensor,                     // [key_dim, h, w]
    values: BTreeMap<u32, Tensor>,   // object id -> [value_dim, h, w]
}

/// Frame-indexed key/value store with capacity `t_max`. Eviction is FIFO
/// among non-first frames; the frame-0 entry is permanent.
pub struct PixelMemory {
    pub config: MemoryConfig,
    entries: Vec<MemEntry>,
    last_frame: Option<usize>,
}

impl PixelMemory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(PixelMemory {
            config,
            entries: Vec::new(),
            last_frame: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stored_frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    /// Whether the admission policy accepts this frame index.
    pub fn wants_frame(&self, frame_index: usize) -> bool {
        frame_index % self.config.interval == 0
    }

    fn check_shapes(&self, key: &Tensor, values: &BTreeMap<u32, Tensor>) -> Result<(usize, usize)> {
        let ks = key.shape();
        if ks.len() != 3 || ks[0] != self.config.key_dim {
            return Err(PipelineError::ShapeMismatch(format!(
                "memory key shape {ks:?}, expected [{}, h, w]",
                self.config.key_dim
            )));
        }
        let (h, w) = (ks[1], ks[2]);
        for (id, v) in values {
            let vs = v.shape();
            if vs.len() != 3 || vs[0] != self.config.value_dim || vs[1] != h || vs[2] != w {
                return Err(PipelineError::ShapeMismatch(format!(
                    "memory value for object {id} has shape {vs:?}, expected [{}, {h}, {w}]",
                    self.config.value_dim
                )));
            }
        }
        if let Some(e) = self.entries.first() {
            let es = e.key.shape();
            if (es[1], es[2]) != (h, w) {
                return Err(PipelineError::ShapeMismatch(format!(
                    "memory grid {h}x{w} differs from stored {}x{}",
                    es[1], es[2]
                )));
            }
        }
        Ok((h, w))
    }

    /// Admit a frame's key/value features. Returns `true` when stored.
    ///
    /// `force` bypasses the interval test (used when an object's first
    /// annotated frame must enter memory regardless of the interval).
    pub fn admit_with_force(
        &mut self,
        frame_index: usize,
        key: Tensor,
        values: BTreeMap<u32, Tensor>,
        force: bool,
    ) -> Result<bool> {
        if let Some(last) = self.last_frame {
            if frame_index <= last {
                return Err(PipelineError::InvalidInput(format!(
                    "admit frame {frame_index} after frame {last}: indices must increase"
                )));
            }
        }
        self.last_frame = Some(frame_index);
        if !force && !self.wants_frame(frame_index) {
            return Ok(false);
        }
        self.check_shapes(&key, &values)?;
        if self.entries.len() >= self.config.t_max {
            let victim = self
                .entries
                .iter()
                .position(|e| e.frame_index != 0);
            match victim {
                Some(i) => {
                    self.entries.remove(i);
                }
                // Only the permanent first frame is stored and capacity is 1.
                None => return Ok(false),
            }
        }
        self.entries.push(MemEntry {
            frame_index,
            key,
            values,
        });
        Ok(true)
    }

    pub fn admit(
        &mut self,
        frame_index: usize,
        key: Tensor,
        values: BTreeMap<u32, Tensor>,
    ) -> Result<bool> {
        self.admit_with_force(frame_index, key, values, false)
    }

    /// Serialize to the `VOSM` binary blob (header, config, entries).
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VOSM");
        push_u32(&mut buf, 1); // version
        push_u64(&mut buf, self.config.t_max as u64);
        push_u64(&mut buf, self.config.interval as u64);
        push_u64(&mut buf, self.config.key_dim as u64);
        push_u64(&mut buf, self.config.value_dim as u64);
        buf.push(match self.config.affinity {
            Affinity::Dot => 0,
            Affinity::NegL2 => 1,
        });
        push_u64(&mut buf, self.last_frame.map(|f| f as u64 + 1).unwrap_or(0));
        push_u64(&mut buf, self.entries.len() as u64);
        for e in &self.entries {
            push_u64(&mut buf, e.frame_index as u64);
            let ks = e.key.shape();
            push_u64(&mut buf, ks[1] as u64);
            push_u64(&mut buf, ks[2] as u64);
            e.key.with_value(|v| {
                for x in v.iter() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            });
            push_u64(&mut buf, e.values.len() as u64);
            for (id, v) in &e.values {
                push_u32(&mut buf, *id);
                v.with_value(|v| {
                    for x in v.iter() {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                });
            }
        }
        buf
    }

    pub fn deserialize(data: &[u8]) -> Result<Self> {
        let mut r = Cursor { data, pos: 0 };
        let magic = r.take(4)?;
        if magic != b"VOSM" {
            return Err(PipelineError::Checkpoint("bad memory blob magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(PipelineError::Checkpoint(format!(
                "unsupported memory blob version {version}"
            )));
        }
        let t_max = r.u64()? as usize;
        let interval = r.u64()? as usize;
        let key_dim = r.u64()? as usize;
        let value_dim = r.u64()? as usize;
        let affinity = match r.byte()? {
            0 => Affinity::Dot,
            1 => Affinity::NegL2,
            x => {
                return Err(PipelineError::Checkpoint(format!(
                    "unknown affinity tag {x}"
                )))
            }
        };
        let last_plus1 = r.u64()?;
        let n_entries = r.u64()? as usize;
        let config = MemoryConfig {
            t_max,
            interval,
            key_dim,
            value_dim,
            affinity,
        };
        let mut mem = PixelMemory::new(config)?;
        mem.last_frame = if last_plus1 == 0 {
            None
        } else {
            Some((last_plus1 - 1) as usize)
        };
        for _ in 0..n_entries {
            let frame_index = r.u64()? as usize;
            let h = r.u64()? as usize;
            let w = r.u64()? as usize;
            let key = Tensor::constant(r.array(&[key_dim, h, w])?);
            let n_objs = r.u64()? as usize;
            let mut values = BTreeMap::new();
            for _ in 0..n_objs {
                let id = r.u32()?;
                values.insert(id, Tensor::constant(r.array(&[value_dim, h, w])?));
            }
            mem.entries.push(MemEntry {
                frame_index,
                key,
                values,
            });
        }
        Ok(mem)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(PipelineError::Checkpoint("truncated blob".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self, shape: &[usize]) -> Result<ndarray::ArrayD<f64>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ndarray::ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap())
    }
}

/// Per-object result of reading the pixel memory by attention.
pub struct ReadOutcome {
    /// One `[value_dim, h, w]` readout per requested object.
    pub per_object: Vec<Tensor>,
    /// Attention matrices `[h*w, n_entries*h*w]`, one per object.
    pub attentions: Vec<Tensor>,
    /// Which stored frame indices each object attended over.
    pub entry_frames: Vec<Vec<usize>>,
}

/// Attention read: per query location, affinities against every stored key
/// location, softmax over all of them, convex combination of stored values.
pub fn attention_readout(
    memory: &PixelMemory,
    query_key: &Tensor,
    object_ids: &[u32],
) -> Result<ReadOutcome> {
    if memory.is_empty() {
        return Err(PipelineError::EmptyMemory);
    }
    let ks = query_key.shape();
    if ks.len() != 3 || ks[0] != memory.config.key_dim {
        return Err(PipelineError::ShapeMismatch(format!(
            "query key shape {ks:?}, expected [{}, h, w]",
            memory.config.key_dim
        )));
    }
    let (h, w) = (ks[1], ks[2]);
    let hw = h * w;
    let q = query_key
        .reshape(&[memory.config.key_dim, hw])
        .transpose2d(); // [hw, Ck]
    let scale = 1.0 / (memory.config.key_dim as f64).sqrt();
    let mut per_object = Vec::with_capacity(object_ids.len());
    let mut attentions = Vec::with_capacity(object_ids.len());
    let mut entry_frames = Vec::with_capacity(object_ids.len());
    for &id in object_ids {
        let relevant: Vec<&MemEntry> = memory
            .entries
            .iter()
            .filter(|e| e.values.contains_key(&id))
            .collect();
        if relevant.is_empty() {
            return Err(PipelineError::InvalidInput(format!(
                "object {id} has no memory entries to read from"
            )));
        }
        let keys: Vec<Tensor> = relevant
            .iter()
            .map(|e| e.key.reshape(&[memory.config.key_dim, hw]).transpose2d())
            .collect();
        let kmat = Tensor::concat(0, &keys); // [T*hw, Ck]
        let logits = match memory.config.affinity {
            Affinity::Dot => q.matmul(&kmat.transpose2d()).affine(scale, 0.0),
            Affinity::NegL2 => q.neg_sq_l2(&kmat).affine(scale, 0.0),
        };
        let attn = logits.softmax_rows(None); // [hw, T*hw]
        let vals: Vec<Tensor> = relevant
            .iter()
            .map(|e| {
                e.values[&id]
                    .reshape(&[memory.config.value_dim, hw])
                    .transpose2d()
            })
            .collect();
        let vmat = Tensor::concat(0, &vals); // [T*hw, Cv]
        let readout = attn
            .matmul(&vmat)
            .transpose2d()
            .reshape(&[memory.config.value_dim, h, w]);
        per_object.push(readout);
        attentions.push(attn);
        entry_frames.push(relevant.iter().map(|e| e.frame_index).collect());
    }
    Ok(ReadOutcome {
        per_object,
        attentions,
        entry_frames,
    })
}

/// Learned fusion of the attention readout with the sensory hidden state:
/// channel concatenation followed by a 1x1 projection.
#[derive(Clone)]
pub struct ReadFusion {
    proj: Conv2dLayer,
}

impl ReadFusion {
    pub fn new<R: Rng>(rng: &mut R, value_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        ReadFusion {
            proj: Conv2dLayer::new(rng, value_dim + hidden_dim, out_dim, 1, 1, 0),
        }
    }

    pub fn fuse(&self, readout: &Tensor, hidden: &Tensor) -> Tensor {
        self.proj.forward(&Tensor::concat(0, &[readout.clone(), hidden.clone()]))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// Full memory read producing the initial pixel readout: attention readout
/// per object, fused with that object's sensory hidden state.
pub fn read(
    memory: &PixelMemory,
    query_key: &Tensor,
    sensory: &[Tensor],
    object_ids: &[u32],
    fusion: &ReadFusion,
) -> Result<(Vec<Tensor>, ReadOutcome)> {
    let outcome = attention_readout(memory, query_key, object_ids)?;
    assert_eq!(sensory.len(), object_ids.len(), "sensory state per object");
    let fused = outcome
        .per_object
        .iter()
        .zip(sensory)
        .map(|(r, h)| fusion.fuse(r, h))
        .collect();
    Ok((fused, outcome))
}

/// Gated recurrent per-object hidden state at the feature stride.
/// `h' = (1-z) h + z tanh(...)`, so values stay in (-1, 1).
#[derive(Clone)]
pub struct SensoryGru {
    pub update_gate: Conv2dLayer,
    pub reset_gate: Conv2dLayer,
    pub candidate: Conv2dLayer,
    pub hidden_dim: usize,
}

impl SensoryGru {
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, hidden_dim: usize) -> Self {
        let total = input_dim + hidden_dim;
        SensoryGru {
            update_gate: Conv2dLayer::new(rng, total, hidden_dim, 3, 1, 1),
            reset_gate: Conv2dLayer::new(rng, total, hidden_dim, 3, 1, 1),
            candidate: Conv2dLayer::new(rng, total, hidden_dim, 3, 1, 1),
            hidden_dim,
        }
    }

    pub fn update(&self, hidden: &Tensor, features: &Tensor) -> Tensor {
        let hs = hidden.shape();
        let fs = features.shape();
        assert_eq!(hs[0], self.hidden_dim, "sensory hidden channels");
        assert_eq!(
            (hs[1], hs[2]),
            (fs[1], fs[2]),
            "sensory update grid mismatch"
        );
        let xh = Tensor::concat(0, &[features.clone(), hidden.clone()]);
        let z = self.update_gate.forward(&xh).sigmoid();
        let r = self.reset_gate.forward(&xh).sigmoid();
        let gated = Tensor::concat(0, &[features.clone(), r.mul(hidden)]);
        let cand = self.candidate.forward(&gated).tanh();
        let keep = z.affine(-1.0, 1.0); // 1 - z
        keep.mul(hidden).add(&z.mul(&cand))
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.update_gate.params(&format!("{prefix}.update"), out);
        self.reset_gate.params(&format!("{prefix}.reset"), out);
        self.candidate.params(&format!("{prefix}.candidate"), out);
    }
}

/// Compact per-object token summaries, pooled from feature maps under the
/// object mask and accumulated as an exact running average.
///
/// Tokens come in (foreground, background) pairs; pair j pools with weights
/// `p^(j+1)` and `(1-p)^(j+1)`, so extra pairs emphasize confident regions.
pub struct ObjectMemory {
    pub n_tokens: usize,
    pub token_dim: usize,
    tokens: Vec<Vec<Tensor>>, // per object, per token: [token_dim]
    counts: Vec<Vec<f64>>,
}

impl ObjectMemory {
    pub fn new(n_objects: usize, n_tokens: usize, token_dim: usize) -> Self {
        assert!(n_tokens >= 2 && n_tokens % 2 == 0, "tokens come in fg/bg pairs");
        ObjectMemory {
            n_tokens,
            token_dim,
            tokens: (0..n_objects)
                .map(|_| {
                    (0..n_tokens)
                        .map(|_| Tensor::constant(ndarray::ArrayD::zeros(IxDyn(&[token_dim]))))
                        .collect()
                })
                .collect(),
            counts: vec![vec![0.0; n_tokens]; n_objects],
        }
    }

    pub fn n_objects(&self) -> usize {
        self.tokens.len()
    }

    pub fn add_object(&mut self) {
        self.tokens.push(
            (0..self.n_tokens)
                .map(|_| Tensor::constant(ndarray::ArrayD::zeros(IxDyn(&[self.token_dim]))))
                .collect(),
        );
        self.counts.push(vec![0.0; self.n_tokens]);
    }

    /// Token matrix `[n_tokens, token_dim]` for one object.
    pub fn token_matrix(&self, object: usize) -> Tensor {
        let rows: Vec<Tensor> = self.tokens[object]
            .iter()
            .map(|t| t.reshape(&[1, self.token_dim]))
            .collect();
        Tensor::concat(0, &rows)
    }

    pub fn counts(&self, object: usize) -> &[f64] {
        &self.counts[object]
    }

    /// Accumulate one frame: pool `features` (`[C,h,w]`) under the object's
    /// soft mask `probs` (`[h,w]` in [0,1]). A token whose weights sum to
    /// (numerically) zero keeps its previous value.
    pub fn update(&mut self, object: usize, features: &Tensor, probs: &Tensor) {
        let fs = features.shape();
        assert_eq!(fs[0], self.token_dim, "object memory feature channels");
        let (h, w) = (fs[1], fs[2]);
        let hw = h * w;
        let ps = probs.shape();
        assert_eq!((ps[0], ps[1]), (h, w), "object memory prob grid");
        let fmat = features.reshape(&[self.token_dim, hw]); // [C, hw]
        let p = probs.reshape(&[hw, 1]);
        let inv_p = p.affine(-1.0, 1.0);
        for t in 0..self.n_tokens {
            let pair = t / 2;
            let base = if t % 2 == 0 { p.clone() } else { inv_p.clone() };
            let mut weights = base.clone();
            for _ in 0..pair {
                weights = weights.mul(&base);
            }
            let total = weights.sum_all();
            if total.scalar_value() <= 1e-12 {
                continue;
            }
            let pooled = fmat
                .matmul(&weights)
                .reshape(&[self.token_dim])
                .div_scalar_tensor(&total);
            let c = self.counts[object][t];
            let new = if c == 0.0 {
                pooled
            } else {
                self.tokens[object][t]
                    .affine(c / (c + 1.0), 0.0)
                    .add(&pooled.affine(1.0 / (c + 1.0), 0.0))
            };
            self.tokens[object][t] = new;
            self.counts[object][t] = c + 1.0;
        }
    }

    pub fn params(&self, _prefix: &str, _out: &mut ParamList) {
        // Object memory is state, not parameters.
    }
}

#[derive(Debug, Default)]
pub struct MemoryStats {
    pub admitted: Vec<usize>,
    pub sizes_after_admit: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn dummy_kv(cfg: &MemoryConfig, fill: f64) -> (Tensor, BTreeMap<u32, Tensor>) {
        let key = Tensor::constant(ArrayD::from_elem(IxDyn(&[cfg.key_dim, 2, 2]), fill));
        let mut values = BTreeMap::new();
        values.insert(
            1,
            Tensor::constant(ArrayD::from_elem(IxDyn(&[cfg.value_dim, 2, 2]), fill)),
        );
        (key, values)
    }

    #[test]
    fn admit_requires_increasing_frames() {
        let cfg = MemoryConfig {
            t_max: 3,
            interval: 1,
            key_dim: 4,
            value_dim: 4,
            affinity: Affinity::NegL2,
        };
        let mut mem = PixelMemory::new(cfg).unwrap();
        let (k, v) = dummy_kv(&cfg, 0.0);
        mem.admit(0, k, v).unwrap();
        let (k, v) = dummy_kv(&cfg, 1.0);
        assert!(mem.admit(0, k, v).is_err());
    }
}
