//! The segmentation network: a small convolutional pyramid for query and mask
//! encoding, object transformer blocks exchanging information between the
//! pixel readout and per-object queries, and a skip-connection decoder.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::Frame;
use crate::error::{PipelineError, Result};
use crate::layers::{Conv2dLayer, LayerNormLayer, LinearLayer, ParamList};
use crate::memory::{Affinity, ReadFusion, SensoryGru};
use crate::tape::Tensor;

/// Architecture sizes. The defaults keep desk-scale training fast while
/// leaving every dimension configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Number of object transformer blocks (L).
    pub n_blocks: usize,
    /// Object queries per object; the first half attends foreground, the
    /// second half background.
    pub n_queries: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Width of the pixel readout and of all transformer tokens.
    pub embed_dim: usize,
    /// Sensory hidden state channels.
    pub hidden_dim: usize,
    pub heads: usize,
    /// Object memory tokens per object (foreground/background pairs).
    pub obj_tokens: usize,
    /// Channels of the 4-stage encoder pyramid (strides 2, 4, 8, 16).
    pub enc_channels: [usize; 4],
    pub affinity: Affinity,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_blocks: 3,
            n_queries: 8,
            key_dim: 64,
            value_dim: 128,
            embed_dim: 128,
            hidden_dim: 32,
            heads: 2,
            obj_tokens: 2,
            enc_channels: [16, 32, 64, 128],
            affinity: Affinity::NegL2,
        }
    }
}

impl NetConfig {
    /// Shrunk variant used by the `toy` preset so the end-to-end pipeline
    /// runs on a laptop CPU in minutes.
    pub fn toy() -> Self {
        NetConfig {
            n_blocks: 2,
            n_queries: 8,
            key_dim: 32,
            value_dim: 64,
            embed_dim: 64,
            hidden_dim: 16,
            heads: 2,
            obj_tokens: 2,
            enc_channels: [8, 16, 24, 48],
            affinity: Affinity::NegL2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_queries,
            self.key_dim,
            self.value_dim,
            self.embed_dim,
            self.hidden_dim,
            self.heads,
            self.obj_tokens,
        ];
        if positive.iter().any(|&v| v == 0) || self.enc_channels.iter().any(|&v| v == 0) {
            return Err(PipelineError::InvalidInput(
                "network dimensions must be positive".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(PipelineError::InvalidInput(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.n_queries % 2 != 0 {
            return Err(PipelineError::InvalidInput(
                "n_queries must be even (foreground/background halves)".into(),
            ));
        }
        Ok(())
    }
}

/// Convert a frame to a `[3,H,W]` constant tensor.
pub fn frame_tensor(frame: &Frame) -> Tensor {
    Tensor::constant(frame.data.clone().into_dyn())
}

/// Four stride-2 stages with SiLU activations.
#[derive(Clone)]
struct PyramidEncoder {
    stages: [Conv2dLayer; 4],
}

impl PyramidEncoder {
    fn new<R: Rng>(rng: &mut R, in_ch: usize, channels: [usize; 4]) -> Self {
        PyramidEncoder {
            stages: [
                Conv2dLayer::new(rng, in_ch, channels[0], 3, 2, 1),
                Conv2dLayer::new(rng, channels[0], channels[1], 3, 2, 1),
                Conv2dLayer::new(rng, channels[1], channels[2], 3, 2, 1),
                Conv2dLayer::new(rng, channels[2], channels[3], 3, 2, 1),
            ],
        }
    }

    /// Returns features at strides (4, 8, 16).
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let s2 = self.stages[0].forward(x).silu();
        let s4 = self.stages[1].forward(&s2).silu();
        let s8 = self.stages[2].forward(&s4).silu();
        let s16 = self.stages[3].forward(&s8).silu();
        (s4, s8, s16)
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        for (i, s) in self.stages.iter().enumerate() {
            s.params(&format!("{prefix}.stage{i}"), out);
        }
    }
}

#[derive(Clone)]
struct MultiHeadAttention {
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            wq: LinearLayer::new(rng, dim, dim),
            wk: LinearLayer::new(rng, dim, dim),
            wv: LinearLayer::new(rng, dim, dim),
            wo: LinearLayer::new(rng, dim, dim),
            heads,
        }
    }

    /// `q: [Nq,D]`, `kv: [Nk,D]`, optional allowed mask `[Nq,Nk]`.
    fn forward(&self, q: &Tensor, kv: &Tensor, allowed: Option<&Array2<bool>>) -> Tensor {
        let d = q.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = self.wq.forward(q);
        let kp = self.wk.forward(kv);
        let vp = self.wv.forward(kv);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.narrow(1, h * dh, dh);
            let kh = kp.narrow(1, h * dh, dh);
            let vh = vp.narrow(1, h * dh, dh);
            let scores = qh.matmul(&kh.transpose2d()).affine(scale, 0.0);
            let attn = scores.softmax_rows(allowed);
            head_outputs.push(attn.matmul(&vh));
        }
        self.wo.forward(&Tensor::concat(1, &head_outputs))
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

#[derive(Clone)]
struct FeedForward {
    lift: LinearLayer,
    lower: LinearLayer,
}

impl FeedForward {
    fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        FeedForward {
            lift: LinearLayer::new(rng, dim, 2 * dim),
            lower: LinearLayer::new(rng, 2 * dim, dim),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.lower.forward(&self.lift.forward(x).silu())
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.lift.params(&format!("{prefix}.lift"), out);
        self.lower.params(&format!("{prefix}.lower"), out);
    }
}

/// One object transformer block. Step 1 (bottom-up): object queries read the
/// pixel readout under foreground/background masks and the object memory
/// tokens. Step 2 (top-down): the pixel readout cross-attends to the updated
/// queries. Pre-norm residual sublayers throughout.
#[derive(Clone)]
pub struct ObjectTransformerBlock {
    query_pixel_attn: MultiHeadAttention,
    query_token_attn: MultiHeadAttention,
    query_ffn: FeedForward,
    query_norms: [LayerNormLayer; 3],
    pixel_query_attn: MultiHeadAttention,
    pixel_ffn: FeedForward,
    pixel_norms: [LayerNormLayer; 2],
    n_queries: usize,
}

impl ObjectTransformerBlock {
    fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize, n_queries: usize) -> Self {
        ObjectTransformerBlock {
            query_pixel_attn: MultiHeadAttention::new(rng, dim, heads),
            query_token_attn: MultiHeadAttention::new(rng, dim, heads),
            query_ffn: FeedForward::new(rng, dim),
            query_norms: [
                LayerNormLayer::new(dim),
                LayerNormLayer::new(dim),
                LayerNormLayer::new(dim),
            ],
            pixel_query_attn: MultiHeadAttention::new(rng, dim, heads),
            pixel_ffn: FeedForward::new(rng, dim),
            pixel_norms: [LayerNormLayer::new(dim), LayerNormLayer::new(dim)],
            n_queries,
        }
    }

    /// `readout: [hw,D]`, `queries: [nq,D]`, `obj_tokens: [nt,D]`,
    /// `fg: [hw]` foreground flags from the previous frame's prediction.
    pub fn forward(
        &self,
        readout: &Tensor,
        queries: &Tensor,
        obj_tokens: &Tensor,
        fg: &[bool],
    ) -> (Tensor, Tensor) {
        let hw = readout.shape()[0];
        assert_eq!(fg.len(), hw, "foreground mask length");
        let nq = self.n_queries;
        // First half of the queries may only look at foreground pixels, the
        // second half only at background. A side with no pixels falls back to
        // unmasked attention inside the softmax.
        let mut allowed = Array2::<bool>::from_elem((nq, hw), false);
        for qi in 0..nq {
            let want_fg = qi < nq / 2;
            for (pi, &is_fg) in fg.iter().enumerate() {
                allowed[[qi, pi]] = is_fg == want_fg;
            }
        }
        let mut x = queries.clone();
        x = x.add(&self.query_pixel_attn.forward(
            &self.query_norms[0].forward(&x),
            readout,
            Some(&allowed),
        ));
        x = x.add(&self.query_token_attn.forward(
            &self.query_norms[1].forward(&x),
            obj_tokens,
            None,
        ));
        x = x.add(&self.query_ffn.forward(&self.query_norms[2].forward(&x)));
        let mut r = readout.clone();
        r = r.add(
            &self
                .pixel_query_attn
                .forward(&self.pixel_norms[0].forward(&r), &x, None),
        );
        r = r.add(&self.pixel_ffn.forward(&self.pixel_norms[1].forward(&r)));
        (r, x)
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.query_pixel_attn
            .params(&format!("{prefix}.query_pixel_attn"), out);
        self.query_token_attn
            .params(&format!("{prefix}.query_token_attn"), out);
        self.query_ffn.params(&format!("{prefix}.query_ffn"), out);
        for (i, n) in self.query_norms.iter().enumerate() {
            n.params(&format!("{prefix}.query_norm{i}"), out);
        }
        self.pixel_query_attn
            .params(&format!("{prefix}.pixel_query_attn"), out);
        self.pixel_ffn.params(&format!("{prefix}.pixel_ffn"), out);
        for (i, n) in self.pixel_norms.iter().enumerate() {
            n.params(&format!("{prefix}.pixel_norm{i}"), out);
        }
    }
}

/// Skip-connection decoder from stride 16 up to stride 4, then bilinear to
/// full resolution.
#[derive(Clone)]
struct Decoder {
    conv16: Conv2dLayer,
    conv8: Conv2dLayer,
    conv4: Conv2dLayer,
    head: Conv2dLayer,
}

impl Decoder {
    fn new<R: Rng>(rng: &mut R, embed_dim: usize, enc: [usize; 4]) -> Self {
        Decoder {
            conv16: Conv2dLayer::new(rng, embed_dim, enc[2], 3, 1, 1),
            conv8: Conv2dLayer::new(rng, enc[2] + enc[2], enc[1], 3, 1, 1),
            conv4: Conv2dLayer::new(rng, enc[1] + enc[1], enc[0], 3, 1, 1),
            head: Conv2dLayer::new(rng, enc[0], 1, 1, 1, 0),
        }
    }

    fn forward(&self, readout: &Tensor, skip8: &Tensor, skip4: &Tensor) -> Tensor {
        let s = readout.shape();
        let (h, w) = (s[1], s[2]);
        let x = self.conv16.forward(readout).silu();
        let x = x.bilinear_resize(2 * h, 2 * w);
        let x = Tensor::concat(0, &[x, skip8.clone()]);
        let x = self.conv8.forward(&x).silu();
        let x = x.bilinear_resize(4 * h, 4 * w);
        let x = Tensor::concat(0, &[x, skip4.clone()]);
        let x = self.conv4.forward(&x).silu();
        let logits4 = self.head.forward(&x);
        logits4.bilinear_resize(16 * h, 16 * w)
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        self.conv16.params(&format!("{prefix}.conv16"), out);
        self.conv8.params(&format!("{prefix}.conv8"), out);
        self.conv4.params(&format!("{prefix}.conv4"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
}

/// Query-frame features at the memory stride plus the original/padded sizes
/// needed to undo padding after decoding. Carries the source frame so the
/// mask encoder can be run later against the same pixels.
pub struct FrameEncoding {
    pub frame: Frame,
    pub key: Tensor,
    pub f16: Tensor,
    pub skip4: Tensor,
    pub skip8: Tensor,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl FrameEncoding {
    pub fn grid(&self) -> (usize, usize) {
        (self.padded_h / 16, self.padded_w / 16)
    }
}

/// The full model: both encoders, memory fusion, sensory update, transformer
/// blocks and decoder. Weights are deterministic given the seed.
pub struct VosModel {
    pub cfg: NetConfig,
    query_encoder: PyramidEncoder,
    key_head: Conv2dLayer,
    mask_encoder: PyramidEncoder,
    value_head: Conv2dLayer,
    pub read_fusion: ReadFusion,
    pub sensory_gru: SensoryGru,
    token_proj: Conv2dLayer,
    query_bank: Tensor,
    blocks: Vec<ObjectTransformerBlock>,
    decoder: Decoder,
}

impl VosModel {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let query_encoder = PyramidEncoder::new(rng, 3, cfg.enc_channels);
        let key_head = Conv2dLayer::new(rng, cfg.enc_channels[3], cfg.key_dim, 1, 1, 0);
        // Mask encoder sees the frame, the object probability and the merged
        // probability of all other objects.
        let mask_encoder = PyramidEncoder::new(rng, 5, cfg.enc_channels);
        let value_head = Conv2dLayer::new(rng, cfg.enc_channels[3], cfg.value_dim, 1, 1, 0);
        let read_fusion = ReadFusion::new(rng, cfg.value_dim, cfg.hidden_dim, cfg.embed_dim);
        let sensory_gru = SensoryGru::new(rng, cfg.embed_dim + 1, cfg.hidden_dim);
        let token_proj = Conv2dLayer::new(rng, cfg.enc_channels[3], cfg.embed_dim, 1, 1, 0);
        let bank_std = (1.0 / cfg.embed_dim as f64).sqrt();
        let bank_data: Vec<f64> = (0..cfg.n_queries * cfg.embed_dim)
            .map(|_| rng.gen_range(-bank_std..bank_std))
            .collect();
        let query_bank = Tensor::leaf(
            ArrayD::from_shape_vec(IxDyn(&[cfg.n_queries, cfg.embed_dim]), bank_data).unwrap(),
            true,
        );
        let blocks = (0..cfg.n_blocks)
            .map(|_| ObjectTransformerBlock::new(rng, cfg.embed_dim, cfg.heads, cfg.n_queries))
            .collect();
        let decoder = Decoder::new(rng, cfg.embed_dim, cfg.enc_channels);
        Ok(VosModel {
            cfg,
            query_encoder,
            key_head,
            mask_encoder,
            value_head,
            read_fusion,
            sensory_gru,
            token_proj,
            query_bank,
            blocks,
            decoder,
        })
    }

    pub fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        self.query_encoder.params("query_encoder", &mut out);
        self.key_head.params("key_head", &mut out);
        self.mask_encoder.params("mask_encoder", &mut out);
        self.value_head.params("value_head", &mut out);
        self.read_fusion.params("read_fusion", &mut out);
        self.sensory_gru.params("sensory_gru", &mut out);
        self.token_proj.params("token_proj", &mut out);
        out.push(("query_bank".to_string(), self.query_bank.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("block{i}"), &mut out);
        }
        self.decoder.params("decoder", &mut out);
        out
    }

    pub fn initial_queries(&self) -> Tensor {
        self.query_bank.clone()
    }

    pub fn blocks(&self) -> &[ObjectTransformerBlock] {
        &self.blocks
    }

    /// Pad a `[C,H,W]` tensor on the bottom/right to multiples of 16.
    pub fn pad_to_grid(x: &Tensor) -> (Tensor, usize, usize) {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let ph = h.div_ceil(16) * 16;
        let pw = w.div_ceil(16) * 16;
        if (ph, pw) == (h, w) {
            (x.clone(), ph, pw)
        } else {
            (x.pad_spatial(ph - h, pw - w), ph, pw)
        }
    }

    /// Encode the query frame: memory key, skip features and stride-16
    /// appearance features. Inputs are padded to the stride grid; the decoder
    /// crops back.
    pub fn encode_query(&self, frame: &Frame) -> FrameEncoding {
        let x = frame_tensor(frame);
        let (orig_h, orig_w) = (frame.height(), frame.width());
        let (x, ph, pw) = Self::pad_to_grid(&x);
        let (skip4, skip8, f16) = self.query_encoder.forward(&x);
        let key = self.key_head.forward(&f16);
        FrameEncoding {
            frame: frame.clone(),
            key,
            f16,
            skip4,
            skip8,
            orig_h,
            orig_w,
            padded_h: ph,
            padded_w: pw,
        }
    }

    /// Project stride-16 appearance features into the token width used by the
    /// object memory.
    pub fn token_features(&self, f16: &Tensor) -> Tensor {
        self.token_proj.forward(f16)
    }

    /// Encode per-object memory values from a frame and the per-object
    /// probability maps (`[1,H,W]`, unpadded). Weights are shared across
    /// objects; only the probability channels differ, so the op is
    /// object-permutation equivariant.
    pub fn encode_mask(&self, frame: &Frame, object_probs: &[Tensor]) -> Result<Vec<Tensor>> {
        let x = frame_tensor(frame);
        for p in object_probs {
            let s = p.shape();
            if s.len() != 3 || s[0] != 1 || s[1] != frame.height() || s[2] != frame.width() {
                return Err(PipelineError::ShapeMismatch(format!(
                    "object prob shape {s:?}, expected [1,{},{}]",
                    frame.height(),
                    frame.width()
                )));
            }
        }
        let (x, _, _) = Self::pad_to_grid(&x);
        let padded: Vec<Tensor> = object_probs
            .iter()
            .map(|p| Self::pad_to_grid(p).0)
            .collect();
        let mut out = Vec::with_capacity(object_probs.len());
        for (k, pk) in padded.iter().enumerate() {
            let others: Vec<Tensor> = padded
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, p)| p.clone())
                .collect();
            let other_sum = if others.is_empty() {
                Tensor::constant(ArrayD::zeros(IxDyn(&pk.shape())))
            } else {
                Tensor::add_n(&others)
            };
            let input = Tensor::concat(0, &[x.clone(), pk.clone(), other_sum]);
            let (_, _, f16) = self.mask_encoder.forward(&input);
            out.push(self.value_head.forward(&f16));
        }
        Ok(out)
    }

    /// Run the object transformer stack for one object.
    /// `r0: [D,h,w]`, `obj_tokens: [nt,D]`, `fg_probs: [h,w]` in [0,1].
    pub fn run_blocks(
        &self,
        r0: &Tensor,
        obj_tokens: &Tensor,
        fg_probs: &ndarray::Array2<f64>,
    ) -> (Tensor, Tensor) {
        let s = r0.shape();
        let (d, h, w) = (s[0], s[1], s[2]);
        assert_eq!(d, self.cfg.embed_dim);
        let fg: Vec<bool> = fg_probs.iter().map(|&p| p > 0.5).collect();
        let mut r = r0.reshape(&[d, h * w]).transpose2d(); // [hw, D]
        let mut x = self.initial_queries();
        for block in &self.blocks {
            let (nr, nx) = block.forward(&r, &x, obj_tokens, &fg);
            r = nr;
            x = nx;
        }
        let r_map = r.transpose2d().reshape(&[d, h, w]);
        (r_map, x)
    }

    /// Decode one object's readout into a full-resolution logit map.
    pub fn decode(&self, readout: &Tensor, enc: &FrameEncoding) -> Tensor {
        let logits = self.decoder.forward(readout, &enc.skip8, &enc.skip4);
        logits.crop_spatial(enc.orig_h, enc.orig_w)
    }

    /// Plain-array snapshot of all weights (for checkpoints and for cloning
    /// models across threads).
    pub fn export_weights(&self) -> Vec<(String, ArrayD<f64>)> {
        self.parameters()
            .into_iter()
            .map(|(name, t)| (name, t.value()))
            .collect()
    }

    pub fn load_weights(&self, weights: &[(String, ArrayD<f64>)]) -> Result<()> {
        let params = self.parameters();
        if params.len() != weights.len() {
            return Err(PipelineError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                params.len(),
                weights.len()
            )));
        }
        for ((pname, tensor), (wname, arr)) in params.iter().zip(weights) {
            if pname != wname {
                return Err(PipelineError::Checkpoint(format!(
                    "parameter order mismatch: {pname} vs {wname}"
                )));
            }
            if tensor.shape() != arr.shape() {
                return Err(PipelineError::Checkpoint(format!(
                    "shape mismatch for {pname}: {:?} vs {:?}",
                    tensor.shape(),
                    arr.shape()
                )));
            }
            tensor.set_value(arr.clone());
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let weights = self.export_weights();
        let blob = encode_checkpoint(&self.cfg, &weights);
        atomic_write(path, &blob)
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        let (cfg, weights) = decode_checkpoint(&data)?;
        let model = VosModel::new(cfg, 0)?;
        model.load_weights(&weights)?;
        Ok(model)
    }
}

fn affinity_tag(a: Affinity) -> u32 {
    match a {
        Affinity::Dot => 0,
        Affinity::NegL2 => 1,
    }
}

fn affinity_from_tag(t: u32) -> Result<Affinity> {
    match t {
        0 => Ok(Affinity::Dot),
        1 => Ok(Affinity::NegL2),
        _ => Err(PipelineError::Checkpoint(format!("bad affinity tag {t}"))),
    }
}

/// Weight archive: `VOSW`, version, config words, then named f64 tensors.
pub fn encode_checkpoint(cfg: &NetConfig, weights: &[(String, ArrayD<f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"VOSW");
    buf.extend_from_slice(&1u32.to_le_bytes());
    let words: [u32; 12] = [
        cfg.n_blocks as u32,
        cfg.n_queries as u32,
        cfg.key_dim as u32,
        cfg.value_dim as u32,
        cfg.embed_dim as u32,
        cfg.hidden_dim as u32,
        cfg.heads as u32,
        cfg.obj_tokens as u32,
        cfg.enc_channels[0] as u32,
        cfg.enc_channels[1] as u32,
        cfg.enc_channels[2] as u32,
        cfg.enc_channels[3] as u32,
    ];
    for w in words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.extend_from_slice(&affinity_tag(cfg.affinity).to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for (name, arr) in weights {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

type NamedWeights = Vec<(String, ArrayD<f64>)>;

pub fn decode_checkpoint(data: &[u8]) -> Result<(NetConfig, NamedWeights)> {
    let err = |m: &str| PipelineError::Checkpoint(m.to_string());
    if data.len() < 8 || &data[0..4] != b"VOSW" {
        return Err(err("not a weight checkpoint (bad magic)"));
    }
    let mut pos = 4;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > data.len() {
            return Err(err("truncated checkpoint"));
        }
        let v = u32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = u32_at(&mut pos)?;
    if version != 1 {
        return Err(err(&format!("unsupported checkpoint version {version}")));
    }
    let mut words = [0u32; 12];
    for w in &mut words {
        *w = u32_at(&mut pos)?;
    }
    let affinity = affinity_from_tag(u32_at(&mut pos)?)?;
    let cfg = NetConfig {
        n_blocks: words[0] as usize,
        n_queries: words[1] as usize,
        key_dim: words[2] as usize,
        value_dim: words[3] as usize,
        embed_dim: words[4] as usize,
        hidden_dim: words[5] as usize,
        heads: words[6] as usize,
        obj_tokens: words[7] as usize,
        enc_channels: [
            words[8] as usize,
            words[9] as usize,
            words[10] as usize,
            words[11] as usize,
        ],
        affinity,
    };
    if pos + 8 > data.len() {
        return Err(err("truncated checkpoint"));
    }
    let count = u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > data.len() {
            return Err(err("truncated checkpoint"));
        }
        let name_len = u16::from_le_bytes(data[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len + 1 > data.len() {
            return Err(err("truncated checkpoint"));
        }
        let name = String::from_utf8(data[pos..pos + name_len].to_vec())
            .map_err(|_| err("bad parameter name"))?;
        pos += name_len;
        let ndim = data[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            if pos + 8 > data.len() {
                return Err(err("truncated checkpoint"));
            }
            shape.push(u64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        if pos + n * 8 > data.len() {
            return Err(err("truncated checkpoint"));
        }
        let vals: Vec<f64> = data[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n * 8;
        weights.push((name, ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap()));
    }
    Ok((cfg, weights))
}

/// Write-temp-then-rename so partially written checkpoints never exist.
pub fn atomic_write(path: &Path, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}
