//! The playing agent: convolutional visual module, GRU language module,
//! feedforward decision head, and obverter message generation.
//!
//! Two forward paths exist on purpose. The plain path (no tape) serves the
//! speaker role and all evaluation; the taped path serves the learner during
//! training. Both route every numeric step through the same kernels in the
//! same order, so a row computed in a batch is bit-identical to the same row
//! computed alone.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::params::{ParamStore, TapeBinding};
use crate::rng;
use crate::tape::{gru_cell, BufId, GruWeightIds, Tape};
use crate::tensor::TensorValue;

/// Network dimensions and generation settings. Checkpoints persist these so
/// non-default variants round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub resolution: usize,
    pub conv_filters: usize,
    pub conv_strides: Vec<usize>,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub decision_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub threshold: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl ArchConfig {
    /// The full-scale architecture: 128x128 input, eight conv layers of 32
    /// filters, embedding 256, GRU hidden 64, decision hidden 128.
    pub fn standard() -> Self {
        ArchConfig {
            resolution: 128,
            conv_filters: 32,
            conv_strides: vec![2, 1, 1, 2, 1, 2, 1, 2],
            embed_dim: 256,
            gru_hidden: 64,
            decision_hidden: 128,
            vocab_size: 5,
            max_len: 20,
            threshold: 0.95,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Desk-scale variant: 32x32 input, four conv layers of 8 filters with
    /// stride 2 each, GRU hidden 32.
    pub fn micro() -> Self {
        ArchConfig {
            resolution: 32,
            conv_filters: 8,
            conv_strides: vec![2, 2, 2, 2],
            embed_dim: 64,
            gru_hidden: 32,
            decision_hidden: 64,
            vocab_size: 5,
            max_len: 20,
            threshold: 0.95,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    pub fn conv_layers(&self) -> usize {
        self.conv_strides.len()
    }

    /// Output side length after each conv layer.
    pub fn conv_sides(&self) -> Result<Vec<usize>> {
        let mut side = self.resolution;
        let mut out = Vec::with_capacity(self.conv_strides.len());
        for (l, &stride) in self.conv_strides.iter().enumerate() {
            if stride == 0 {
                return Err(CoreError::invalid("arch", format!("conv layer {} has stride 0", l)));
            }
            if side < 3 {
                return Err(CoreError::invalid(
                    "arch",
                    format!("conv layer {} input side {} is smaller than the 3x3 kernel", l, side),
                ));
            }
            side = kernels::conv_out_extent(side, stride);
            out.push(side);
        }
        Ok(out)
    }

    /// Flattened length of the last conv activation.
    pub fn feature_len(&self) -> Result<usize> {
        let sides = self.conv_sides()?;
        let last = *sides.last().ok_or_else(|| CoreError::invalid("arch", "no conv layers"))?;
        Ok(last * last * self.conv_filters)
    }

    pub fn decision_in(&self) -> usize {
        self.gru_hidden + self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::invalid("arch", "vocab size must be >= 2"));
        }
        if self.max_len < 1 {
            return Err(CoreError::invalid("arch", "max message length must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CoreError::invalid("arch", "stop threshold must lie in (0, 1)"));
        }
        if self.conv_filters == 0
            || self.embed_dim == 0
            || self.gru_hidden == 0
            || self.decision_hidden == 0
        {
            return Err(CoreError::invalid("arch", "all layer widths must be positive"));
        }
        self.feature_len()?;
        Ok(())
    }
}

enum InitKind {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

fn param_layout(arch: &ArchConfig) -> Result<Vec<(String, Vec<usize>, InitKind, bool)>> {
    arch.validate()?;
    let kf = arch.conv_filters;
    let mut layout = Vec::new();
    let mut c_in = 3;
    for l in 0..arch.conv_layers() {
        let p = format!("visual.conv{}", l);
        layout.push((
            format!("{}.kernels", p),
            vec![kf, 3, 3, c_in],
            InitKind::Uniform { fan_in: 9 * c_in },
            true,
        ));
        layout.push((format!("{}.bn.gamma", p), vec![kf], InitKind::Ones, true));
        layout.push((format!("{}.bn.beta", p), vec![kf], InitKind::Zeros, true));
        layout.push((format!("{}.bn.running_mean", p), vec![kf], InitKind::Zeros, false));
        layout.push((format!("{}.bn.running_var", p), vec![kf], InitKind::Ones, false));
        c_in = kf;
    }
    let feat = arch.feature_len()?;
    layout.push(("visual.fc.w".into(), vec![feat, arch.embed_dim], InitKind::Uniform { fan_in: feat }, true));
    layout.push(("visual.fc.b".into(), vec![arch.embed_dim], InitKind::Zeros, true));
    let v = arch.vocab_size;
    let d = arch.gru_hidden;
    for gate in ["r", "z", "h"] {
        layout.push((format!("gru.w{}", gate), vec![v, d], InitKind::Uniform { fan_in: v }, true));
        layout.push((format!("gru.u{}", gate), vec![d, d], InitKind::Uniform { fan_in: d }, true));
        layout.push((format!("gru.b{}", gate), vec![d], InitKind::Zeros, true));
    }
    let din = arch.decision_in();
    let dh = arch.decision_hidden;
    layout.push(("dec.fc1.w".into(), vec![din, dh], InitKind::Uniform { fan_in: din }, true));
    layout.push(("dec.fc1.b".into(), vec![dh], InitKind::Zeros, true));
    layout.push(("dec.fc2.w".into(), vec![dh, 1], InitKind::Uniform { fan_in: dh }, true));
    layout.push(("dec.fc2.b".into(), vec![1], InitKind::Zeros, true));
    Ok(layout)
}

/// One agent: an architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Agent {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

impl Agent {
    /// Fresh agent with fan-in-scaled uniform weights, zero biases, and
    /// identity batchnorm. Every parameter draws from its own named stream,
    /// so the layout order does not affect the values.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Agent> {
        let mut params = ParamStore::new();
        for (name, shape, kind, trainable) in param_layout(&arch)? {
            let len: usize = shape.iter().product();
            let data = match kind {
                InitKind::Uniform { fan_in } => {
                    let bound = (1.0 / fan_in as f32).sqrt();
                    let mut r = rng::stream(seed, &name, &[]);
                    (0..len).map(|_| r.gen_range(-bound..bound)).collect()
                }
                InitKind::Zeros => vec![0.0; len],
                InitKind::Ones => vec![1.0; len],
            };
            params.insert(&name, TensorValue::new(shape, data)?, trainable);
        }
        Ok(Agent { arch, params })
    }

    /// Rebuilds an agent from a deserialized store, checking that the names
    /// and shapes are exactly the configured layout.
    pub fn from_parts(arch: ArchConfig, params: ParamStore) -> Result<Agent> {
        let layout = param_layout(&arch)?;
        if params.len() != layout.len() {
            return Err(CoreError::invalid(
                "agent",
                format!("store has {} parameters, architecture expects {}", params.len(), layout.len()),
            ));
        }
        for (name, shape, _, trainable) in &layout {
            let value = params.get(name)?;
            if &value.shape != shape {
                return Err(CoreError::shape(
                    "agent",
                    format!("parameter {} has shape {:?}, expected {:?}", name, value.shape, shape),
                ));
            }
            if params.is_trainable(name) != *trainable {
                return Err(CoreError::invalid(
                    "agent",
                    format!("parameter {} has the wrong trainable flag", name),
                ));
            }
        }
        Ok(Agent { arch, params })
    }

    fn check_image(&self, image: &TensorValue) -> Result<()> {
        let r = self.arch.resolution;
        if image.shape != [r, r, 3] {
            return Err(CoreError::shape(
                "embed",
                format!("image shape {:?} does not match configured {}x{}x3", image.shape, r, r),
            ));
        }
        Ok(())
    }

    fn check_message(&self, message: &[u8]) -> Result<()> {
        if message.is_empty() || message.len() > self.arch.max_len {
            return Err(CoreError::invalid(
                "consume",
                format!("message length {} outside [1, {}]", message.len(), self.arch.max_len),
            ));
        }
        if let Some(&s) = message.iter().find(|&&s| (s as usize) >= self.arch.vocab_size) {
            return Err(CoreError::invalid(
                "consume",
                format!("symbol {} outside vocabulary of {}", s, self.arch.vocab_size),
            ));
        }
        Ok(())
    }

    // ── plain path (speaker role, evaluation) ──

    fn conv_stack_eval(&self, image: &TensorValue) -> Result<Vec<f32>> {
        self.check_image(image)?;
        let eps = self.arch.bn_eps;
        let kf = self.arch.conv_filters;
        let mut cur = image.data.clone();
        let (mut h, mut w, mut c) = (self.arch.resolution, self.arch.resolution, 3);
        for l in 0..self.arch.conv_layers() {
            let stride = self.arch.conv_strides[l];
            let p = format!("visual.conv{}", l);
            let kern = self.params.get(&format!("{}.kernels", p))?;
            let oh = kernels::conv_out_extent(h, stride);
            let ow = kernels::conv_out_extent(w, stride);
            let mut conv = vec![0.0f32; oh * ow * kf];
            kernels::conv2d_valid_single(&cur, &kern.data, &mut conv, h, w, c, kf, stride);
            let gamma = self.params.get(&format!("{}.bn.gamma", p))?;
            let beta = self.params.get(&format!("{}.bn.beta", p))?;
            let mean = self.params.get(&format!("{}.bn.running_mean", p))?;
            let var = self.params.get(&format!("{}.bn.running_var", p))?;
            let invstd: Vec<f32> = var.data.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut bn = vec![0.0f32; conv.len()];
            kernels::bn_apply(&conv, &mean.data, &invstd, &gamma.data, &beta.data, &mut bn, oh * ow, kf);
            kernels::map_relu(&bn, &mut conv);
            cur = conv;
            h = oh;
            w = ow;
            c = kf;
        }
        Ok(cur)
    }

    /// Image embedding with running batch statistics (eval mode). Returns
    /// the 256-vector (or the configured width).
    pub fn embed_one(&self, image: &TensorValue) -> Result<Vec<f32>> {
        let feat = self.conv_stack_eval(image)?;
        let e = self.arch.embed_dim;
        let w = self.params.get("visual.fc.w")?;
        let b = self.params.get("visual.fc.b")?;
        let mut lin = vec![0.0f32; e];
        kernels::affine(&feat, &w.data, &b.data, &mut lin, 1, feat.len(), e);
        let mut out = vec![0.0f32; e];
        kernels::map_relu(&lin, &mut out);
        Ok(out)
    }

    /// Eval-mode embeddings for a batch, flattened [n * embed_dim]. Images
    /// are processed one at a time, so the result is bit-identical to `n`
    /// calls of `embed_one`.
    pub fn embed_batch(&self, images: &[TensorValue]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len() * self.arch.embed_dim);
        for image in images {
            out.extend_from_slice(&self.embed_one(image)?);
        }
        Ok(out)
    }

    fn gru_mats(&self) -> Result<[&[f32]; 9]> {
        Ok([
            &self.params.get("gru.wr")?.data,
            &self.params.get("gru.ur")?.data,
            &self.params.get("gru.br")?.data,
            &self.params.get("gru.wz")?.data,
            &self.params.get("gru.uz")?.data,
            &self.params.get("gru.bz")?.data,
            &self.params.get("gru.wh")?.data,
            &self.params.get("gru.uh")?.data,
            &self.params.get("gru.bh")?.data,
        ])
    }

    /// One GRU step on `rows` rows. Mirrors the taped `gru_cell` operation
    /// for operation order, which makes the two paths bit-identical.
    fn gru_step_plain(&self, x: &[f32], h: &[f32], rows: usize) -> Result<Vec<f32>> {
        let v = self.arch.vocab_size;
        let d = self.arch.gru_hidden;
        let [wr, ur, br, wz, uz, bz, wh, uh, bh] = self.gru_mats()?;
        let mut tmp_a = vec![0.0f32; rows * d];
        let mut tmp_b = vec![0.0f32; rows * d];
        let mut r = vec![0.0f32; rows * d];
        kernels::affine(x, wr, br, &mut tmp_a, rows, v, d);
        kernels::matmul(h, ur, &mut tmp_b, rows, d, d);
        kernels::add(&tmp_a, &tmp_b, &mut r);
        let mut rs = vec![0.0f32; rows * d];
        kernels::map_sigmoid(&r, &mut rs);
        let mut z = vec![0.0f32; rows * d];
        kernels::affine(x, wz, bz, &mut tmp_a, rows, v, d);
        kernels::matmul(h, uz, &mut tmp_b, rows, d, d);
        kernels::add(&tmp_a, &tmp_b, &mut z);
        let mut zs = vec![0.0f32; rows * d];
        kernels::map_sigmoid(&z, &mut zs);
        let mut gated = vec![0.0f32; rows * d];
        kernels::mul(&rs, h, &mut gated);
        let mut c = vec![0.0f32; rows * d];
        kernels::affine(x, wh, bh, &mut tmp_a, rows, v, d);
        kernels::matmul(&gated, uh, &mut tmp_b, rows, d, d);
        kernels::add(&tmp_a, &tmp_b, &mut c);
        let mut cs = vec![0.0f32; rows * d];
        kernels::map_tanh(&c, &mut cs);
        let mut omz = vec![0.0f32; rows * d];
        kernels::one_minus(&zs, &mut omz);
        let mut keep = vec![0.0f32; rows * d];
        kernels::mul(&omz, h, &mut keep);
        let mut take = vec![0.0f32; rows * d];
        kernels::mul(&zs, &cs, &mut take);
        let mut out = vec![0.0f32; rows * d];
        kernels::add(&keep, &take, &mut out);
        Ok(out)
    }

    /// Decision scores for `rows` (hidden, embedding) pairs; the hidden
    /// state occupies the first columns of the concatenation.
    fn decision_plain(&self, h: &[f32], z: &[f32], rows: usize) -> Result<Vec<f32>> {
        let d = self.arch.gru_hidden;
        let e = self.arch.embed_dim;
        let din = self.arch.decision_in();
        let dh = self.arch.decision_hidden;
        let mut cat = vec![0.0f32; rows * din];
        for r in 0..rows {
            cat[r * din..r * din + d].copy_from_slice(&h[r * d..(r + 1) * d]);
            cat[r * din + d..(r + 1) * din].copy_from_slice(&z[r * e..(r + 1) * e]);
        }
        let w1 = self.params.get("dec.fc1.w")?;
        let b1 = self.params.get("dec.fc1.b")?;
        let mut lin1 = vec![0.0f32; rows * dh];
        kernels::affine(&cat, &w1.data, &b1.data, &mut lin1, rows, din, dh);
        let mut act1 = vec![0.0f32; rows * dh];
        kernels::map_relu(&lin1, &mut act1);
        let w2 = self.params.get("dec.fc2.w")?;
        let b2 = self.params.get("dec.fc2.b")?;
        let mut lin2 = vec![0.0f32; rows];
        kernels::affine(&act1, &w2.data, &b2.data, &mut lin2, rows, dh, 1);
        let mut out = vec![0.0f32; rows];
        kernels::map_sigmoid(&lin2, &mut out);
        Ok(out)
    }

    /// Consumes a message against an embedding and returns the match score.
    pub fn score(&self, message: &[u8], embedding: &[f32]) -> Result<f32> {
        self.check_message(message)?;
        let d = self.arch.gru_hidden;
        let v = self.arch.vocab_size;
        let mut h = vec![0.0f32; d];
        for &s in message {
            let mut x = vec![0.0f32; v];
            x[s as usize] = 1.0;
            h = self.gru_step_plain(&x, &h, 1)?;
        }
        Ok(self.decision_plain(&h, embedding, 1)?[0])
    }

    /// Greedy obverter generation for one embedding.
    pub fn generate(&self, embedding: &[f32]) -> Result<(Vec<u8>, f32)> {
        let mut out = self.generate_batch(embedding, 1)?;
        Ok(out.pop().unwrap())
    }

    /// Greedy obverter generation for `n` embeddings (flattened row-major).
    /// At each step every vocabulary symbol is tried, the one whose one-step
    /// extension scores highest against the speaker's own embedding is
    /// appended (ties to the lowest index), and a row stops once its score
    /// exceeds the threshold or it reaches max_len. Finished rows drop out
    /// of the working set; row independence of the kernels keeps the
    /// remaining rows bit-identical to solo runs.
    pub fn generate_batch(&self, embeddings: &[f32], n: usize) -> Result<Vec<(Vec<u8>, f32)>> {
        let d = self.arch.gru_hidden;
        let e = self.arch.embed_dim;
        let v = self.arch.vocab_size;
        if embeddings.len() != n * e {
            return Err(CoreError::shape(
                "generate",
                format!("{} embedding values for {} rows of width {}", embeddings.len(), n, e),
            ));
        }
        let mut h = vec![0.0f32; n * d];
        let mut messages = vec![Vec::new(); n];
        let mut scores = vec![0.0f32; n];
        let mut active: Vec<usize> = (0..n).collect();
        for _ in 0..self.arch.max_len {
            if active.is_empty() {
                break;
            }
            let a = active.len();
            let mut h_act = vec![0.0f32; a * d];
            let mut z_act = vec![0.0f32; a * e];
            for (r, &i) in active.iter().enumerate() {
                h_act[r * d..(r + 1) * d].copy_from_slice(&h[i * d..(i + 1) * d]);
                z_act[r * e..(r + 1) * e].copy_from_slice(&embeddings[i * e..(i + 1) * e]);
            }
            let mut best_score = vec![f32::NEG_INFINITY; a];
            let mut best_sym = vec![0u8; a];
            let mut best_h = vec![0.0f32; a * d];
            for sym in 0..v {
                let mut x = vec![0.0f32; a * v];
                for r in 0..a {
                    x[r * v + sym] = 1.0;
                }
                let cand = self.gru_step_plain(&x, &h_act, a)?;
                let cand_scores = self.decision_plain(&cand, &z_act, a)?;
                for r in 0..a {
                    if cand_scores[r] > best_score[r] {
                        best_score[r] = cand_scores[r];
                        best_sym[r] = sym as u8;
                        best_h[r * d..(r + 1) * d].copy_from_slice(&cand[r * d..(r + 1) * d]);
                    }
                }
            }
            let mut still_active = Vec::with_capacity(a);
            for (r, &i) in active.iter().enumerate() {
                messages[i].push(best_sym[r]);
                scores[i] = best_score[r];
                h[i * d..(i + 1) * d].copy_from_slice(&best_h[r * d..(r + 1) * d]);
                if !(best_score[r] > self.arch.threshold) {
                    still_active.push(i);
                }
            }
            active = still_active;
        }
        Ok(messages.into_iter().zip(scores).collect())
    }

    /// Embeds each image (eval mode) and describes it via the obverter.
    pub fn describe_images(&self, images: &[TensorValue]) -> Result<Vec<(Vec<u8>, f32)>> {
        let z = self.embed_batch(images)?;
        self.generate_batch(&z, images.len())
    }

    // ── taped path (learner role) ──

    /// Batch image embedding in train mode. Batch statistics normalize each
    /// conv layer and fold into the running statistics as a side effect
    /// (the running buffers never enter the tape).
    pub fn embed_train(
        &mut self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        images: &[TensorValue],
    ) -> Result<BufId> {
        let n = images.len();
        if n < 2 {
            return Err(CoreError::invalid("embed", "train mode needs a batch of at least 2 images"));
        }
        for image in images {
            self.check_image(image)?;
        }
        let r = self.arch.resolution;
        let mut stacked = Vec::with_capacity(n * r * r * 3);
        for image in images {
            stacked.extend_from_slice(&image.data);
        }
        let mut cur = tape.leaf(vec![n, r, r, 3], stacked);
        let momentum = self.arch.bn_momentum;
        for l in 0..self.arch.conv_layers() {
            let p = format!("visual.conv{}", l);
            let kid = bind.bind(tape, &self.params, &format!("{}.kernels", p))?;
            cur = tape.conv2d_valid(cur, kid, self.arch.conv_strides[l])?;
            let gid = bind.bind(tape, &self.params, &format!("{}.bn.gamma", p))?;
            let bid = bind.bind(tape, &self.params, &format!("{}.bn.beta", p))?;
            let (normed, mean, var) = tape.batchnorm_train(cur, gid, bid, self.arch.bn_eps)?;
            let rm = self.params.get_mut(&format!("{}.bn.running_mean", p))?;
            for (slot, &m) in rm.data.iter_mut().zip(mean.iter()) {
                *slot = momentum * *slot + (1.0 - momentum) * m;
            }
            let rv = self.params.get_mut(&format!("{}.bn.running_var", p))?;
            for (slot, &v) in rv.data.iter_mut().zip(var.iter()) {
                *slot = momentum * *slot + (1.0 - momentum) * v;
            }
            cur = tape.relu(normed);
        }
        let w = bind.bind(tape, &self.params, "visual.fc.w")?;
        let b = bind.bind(tape, &self.params, "visual.fc.b")?;
        let lin = tape.affine(cur, w, b)?;
        Ok(tape.relu(lin))
    }

    /// Consumes one message per row through the GRU on tape. Shorter
    /// messages finish early; a row gate freezes their hidden state (bitwise)
    /// while longer rows continue.
    pub fn consume_train(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        messages: &[Vec<u8>],
    ) -> Result<BufId> {
        let n = messages.len();
        if n == 0 {
            return Err(CoreError::invalid("consume", "empty message batch"));
        }
        for m in messages {
            self.check_message(m)?;
        }
        let v = self.arch.vocab_size;
        let d = self.arch.gru_hidden;
        let w = GruWeightIds {
            wr: bind.bind(tape, &self.params, "gru.wr")?,
            ur: bind.bind(tape, &self.params, "gru.ur")?,
            br: bind.bind(tape, &self.params, "gru.br")?,
            wz: bind.bind(tape, &self.params, "gru.wz")?,
            uz: bind.bind(tape, &self.params, "gru.uz")?,
            bz: bind.bind(tape, &self.params, "gru.bz")?,
            wh: bind.bind(tape, &self.params, "gru.wh")?,
            uh: bind.bind(tape, &self.params, "gru.uh")?,
            bh: bind.bind(tape, &self.params, "gru.bh")?,
        };
        let mut h = tape.leaf(vec![n, d], vec![0.0; n * d]);
        let t_max = messages.iter().map(|m| m.len()).max().unwrap();
        for t in 0..t_max {
            let mut x = vec![0.0f32; n * v];
            let mut mask = vec![0.0f32; n];
            for (i, m) in messages.iter().enumerate() {
                if t < m.len() {
                    x[i * v + m[t] as usize] = 1.0;
                    mask[i] = 1.0;
                }
            }
            let xid = tape.leaf(vec![n, v], x);
            let stepped = gru_cell(tape, xid, h, &w)?;
            h = if mask.iter().all(|&f| f == 1.0) {
                stepped
            } else {
                tape.row_gate(mask, stepped, h)?
            };
        }
        Ok(h)
    }

    /// Decision head on tape: concat [hidden, embedding] then two affine
    /// layers. Returns sigmoid scores [n, 1].
    pub fn decision_train(
        &self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        hidden: BufId,
        embedding: BufId,
    ) -> Result<BufId> {
        let cat = tape.concat_cols(hidden, embedding)?;
        let w1 = bind.bind(tape, &self.params, "dec.fc1.w")?;
        let b1 = bind.bind(tape, &self.params, "dec.fc1.b")?;
        let lin1 = tape.affine(cat, w1, b1)?;
        let act1 = tape.relu(lin1);
        let w2 = bind.bind(tape, &self.params, "dec.fc2.w")?;
        let b2 = bind.bind(tape, &self.params, "dec.fc2.b")?;
        let lin2 = tape.affine(act1, w2, b2)?;
        Ok(tape.sigmoid(lin2))
    }

    /// Full learner forward: image batch + one message per image -> match
    /// probabilities [n, 1] on tape, ready for a loss node.
    pub fn listener_forward(
        &mut self,
        tape: &mut Tape,
        bind: &mut TapeBinding,
        images: &[TensorValue],
        messages: &[Vec<u8>],
    ) -> Result<BufId> {
        if images.len() != messages.len() {
            return Err(CoreError::invalid(
                "listener",
                format!("{} images but {} messages", images.len(), messages.len()),
            ));
        }
        let z = self.embed_train(tape, bind, images)?;
        let h = self.consume_train(tape, bind, messages)?;
        self.decision_train(tape, bind, h, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::test_tensor;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            resolution: 16,
            conv_filters: 4,
            conv_strides: vec![2, 2],
            embed_dim: 16,
            gru_hidden: 8,
            decision_hidden: 16,
            vocab_size: 3,
            max_len: 4,
            threshold: 0.95,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    fn tiny_image(seed: u64) -> TensorValue {
        test_tensor(vec![16, 16, 3], seed)
    }

    #[test]
    fn standard_stack_shapes() {
        let arch = ArchConfig::standard();
        assert_eq!(arch.conv_sides().unwrap(), vec![63, 61, 59, 29, 27, 13, 11, 5]);
        assert_eq!(arch.feature_len().unwrap(), 800);
        assert_eq!(arch.embed_dim, 256);
    }

    #[test]
    fn micro_stack_shapes() {
        let arch = ArchConfig::micro();
        assert_eq!(arch.conv_sides().unwrap(), vec![15, 7, 3, 1]);
        assert_eq!(arch.feature_len().unwrap(), 8);
    }

    #[test]
    fn embedding_is_nonnegative_and_deterministic() {
        let agent = Agent::init(tiny_arch(), 7).unwrap();
        let img = tiny_image(1);
        let a = agent.embed_one(&img).unwrap();
        let b = agent.embed_one(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x >= 0.0));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let agent = Agent::init(tiny_arch(), 7).unwrap();
        let img = test_tensor(vec![8, 8, 3], 1);
        assert!(agent.embed_one(&img).is_err());
    }

    #[test]
    fn batch_embedding_matches_singles() {
        let agent = Agent::init(tiny_arch(), 9).unwrap();
        let images: Vec<TensorValue> = (0..3).map(|i| tiny_image(100 + i)).collect();
        let batch = agent.embed_batch(&images).unwrap();
        for (i, img) in images.iter().enumerate() {
            let single = agent.embed_one(img).unwrap();
            assert_eq!(&batch[i * 16..(i + 1) * 16], &single[..]);
        }
    }

    #[test]
    fn generation_obeys_length_bounds_and_greedy_choice() {
        let agent = Agent::init(tiny_arch(), 11).unwrap();
        for i in 0..8 {
            let z = agent.embed_one(&tiny_image(200 + i)).unwrap();
            let (msg, _) = agent.generate(&z).unwrap();
            assert!(!msg.is_empty() && msg.len() <= 4);
            // Exhaustive per-step re-scoring: the emitted symbol's one-step
            // extension must beat every alternative, ties to lowest index.
            for t in 0..msg.len() {
                let mut prefix = msg[..t].to_vec();
                prefix.push(msg[t]);
                let chosen = agent.score(&prefix, &z).unwrap();
                for alt in 0..3u8 {
                    let mut other = msg[..t].to_vec();
                    other.push(alt);
                    let s = agent.score(&other, &z).unwrap();
                    assert!(
                        s < chosen || (s == chosen && msg[t] <= alt),
                        "step {} symbol {} loses to {}",
                        t,
                        msg[t],
                        alt
                    );
                }
            }
        }
    }

    #[test]
    fn self_consume_reproduces_generation_score() {
        let agent = Agent::init(tiny_arch(), 13).unwrap();
        for i in 0..5 {
            let z = agent.embed_one(&tiny_image(300 + i)).unwrap();
            let (msg, reported) = agent.generate(&z).unwrap();
            let replayed = agent.score(&msg, &z).unwrap();
            assert_eq!(reported.to_bits(), replayed.to_bits());
        }
    }

    #[test]
    fn batched_generation_matches_solo_runs() {
        let agent = Agent::init(tiny_arch(), 17).unwrap();
        let images: Vec<TensorValue> = (0..6).map(|i| tiny_image(400 + i)).collect();
        let z = agent.embed_batch(&images).unwrap();
        let batched = agent.generate_batch(&z, 6).unwrap();
        for (i, img) in images.iter().enumerate() {
            let zi = agent.embed_one(img).unwrap();
            let (msg, score) = agent.generate(&zi).unwrap();
            assert_eq!(batched[i].0, msg);
            assert_eq!(batched[i].1.to_bits(), score.to_bits());
        }
    }

    #[test]
    fn generation_leaves_parameters_untouched() {
        let agent = Agent::init(tiny_arch(), 19).unwrap();
        let before = agent.params.to_bytes();
        let z = agent.embed_one(&tiny_image(500)).unwrap();
        for _ in 0..3 {
            agent.generate(&z).unwrap();
        }
        assert_eq!(before, agent.params.to_bytes());
    }

    #[test]
    fn taped_consume_matches_plain_score_bitwise() {
        let agent = Agent::init(tiny_arch(), 23).unwrap();
        let messages: Vec<Vec<u8>> = vec![vec![0, 2, 1], vec![1], vec![2, 2, 0, 1]];
        let n = messages.len();
        let e = agent.arch.embed_dim;
        let z_data = test_tensor(vec![n, e], 77).data;
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let z = tape.leaf(vec![n, e], z_data.clone());
        let h = agent.consume_train(&mut tape, &mut bind, &messages).unwrap();
        let probs = agent.decision_train(&mut tape, &mut bind, h, z).unwrap();
        let taped = tape.data(probs).to_vec();
        for (i, m) in messages.iter().enumerate() {
            let plain = agent.score(m, &z_data[i * e..(i + 1) * e]).unwrap();
            assert_eq!(taped[i].to_bits(), plain.to_bits(), "row {}", i);
        }
    }

    #[test]
    fn train_embedding_updates_running_statistics() {
        let mut agent = Agent::init(tiny_arch(), 29).unwrap();
        let images: Vec<TensorValue> = (0..4).map(|i| tiny_image(600 + i)).collect();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        agent.embed_train(&mut tape, &mut bind, &images).unwrap();
        let rm = agent.params.get("visual.conv0.bn.running_mean").unwrap();
        // Fresh stats start at zero; one update moves them to 0.1x the batch
        // mean, which is nonzero for random input.
        assert!(rm.data.iter().any(|&v| v != 0.0));
        let rv = agent.params.get("visual.conv0.bn.running_var").unwrap();
        assert!(rv.data.iter().all(|&v| v != 1.0));
    }

    #[test]
    fn train_embedding_needs_two_images() {
        let mut agent = Agent::init(tiny_arch(), 31).unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let err = agent.embed_train(&mut tape, &mut bind, &[tiny_image(1)]).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn listener_forward_emits_probabilities() {
        let mut agent = Agent::init(tiny_arch(), 37).unwrap();
        let images: Vec<TensorValue> = (0..3).map(|i| tiny_image(700 + i)).collect();
        let messages = vec![vec![0], vec![1, 2], vec![2, 0, 1]];
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let probs = agent.listener_forward(&mut tape, &mut bind, &images, &messages).unwrap();
        assert_eq!(tape.shape(probs), &[3, 1]);
        for &p in tape.data(probs) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn message_validation_rejects_bad_symbols() {
        let agent = Agent::init(tiny_arch(), 41).unwrap();
        let z = vec![0.0; 16];
        assert!(agent.score(&[], &z).is_err());
        assert!(agent.score(&[3], &z).is_err());
        assert!(agent.score(&[0, 1, 2, 0, 1], &z).is_err());
    }

    #[test]
    fn init_is_seed_reproducible() {
        let a = Agent::init(tiny_arch(), 53).unwrap();
        let b = Agent::init(tiny_arch(), 53).unwrap();
        let c = Agent::init(tiny_arch(), 54).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_ne!(a.params.to_bytes(), c.params.to_bytes());
    }

    #[test]
    fn from_parts_round_trips_and_validates() {
        let a = Agent::init(tiny_arch(), 59).unwrap();
        let bytes = a.params.to_bytes();
        let store = ParamStore::from_bytes(&bytes).unwrap();
        let b = Agent::from_parts(tiny_arch(), store).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let store = ParamStore::from_bytes(&bytes).unwrap();
        assert!(Agent::from_parts(ArchConfig::micro(), store).is_err());
    }
}
