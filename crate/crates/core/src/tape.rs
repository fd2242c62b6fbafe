//! Reverse-mode Wengert tape over whole tensors.
//!
//! Each operation records the buffer ids of its operands and output.
//! `backward` seeds the loss gradient and replays the list once in reverse;
//! a buffer feeding several later operations receives the sum of their
//! contributions (fan-out is additive). Recording is append-only and a tape
//! can run backward only once per recording.
//!
//! Buffers snapshot their data at record time, so mutating a source
//! `TensorValue` after recording cannot corrupt the replay.

use crate::error::{CoreError, Result};
use crate::kernels;

pub type BufId = usize;

#[derive(Debug)]
pub struct TapeBuf {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl TapeBuf {
    fn rows_cols(&self) -> (usize, usize) {
        if self.shape.is_empty() {
            return (1, 1);
        }
        let rows = self.shape[0];
        let cols: usize = self.shape[1..].iter().product();
        (rows, cols)
    }

    /// Rows over the last axis: everything but the final dimension.
    fn rows_feat(&self) -> (usize, usize) {
        if self.shape.is_empty() {
            return (1, 1);
        }
        let feat = *self.shape.last().unwrap();
        let rows: usize = self.shape[..self.shape.len() - 1].iter().product();
        (rows, feat)
    }
}

enum TapeOp {
    Affine { x: BufId, w: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    MatMul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    Conv2dValid {
        input: BufId,
        kernels: BufId,
        out: BufId,
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        kf: usize,
        stride: usize,
    },
    BatchNormTrain {
        x: BufId,
        gamma: BufId,
        beta: BufId,
        out: BufId,
        rows: usize,
        feat: usize,
        mean: Vec<f32>,
        invstd: Vec<f32>,
    },
    BatchNormEval {
        x: BufId,
        gamma: BufId,
        beta: BufId,
        out: BufId,
        rows: usize,
        feat: usize,
        mean: Vec<f32>,
        invstd: Vec<f32>,
    },
    Relu { x: BufId, out: BufId },
    Sigmoid { x: BufId, out: BufId },
    Tanh { x: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    OneMinus { x: BufId, out: BufId },
    ConcatCols { a: BufId, b: BufId, out: BufId, rows: usize, fa: usize, fb: usize },
    RowGate { mask: Vec<f32>, on: BufId, off: BufId, out: BufId, rows: usize, feat: usize },
    BceLoss { p: BufId, labels: Vec<f32>, out: BufId },
    MseLoss { p: BufId, target: Vec<f32>, out: BufId },
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<TapeBuf>,
    ops: Vec<TapeOp>,
    grads: Vec<Option<Vec<f32>>>,
    ran_backward: bool,
    /// Test hook: sign-flips the left-operand matmul gradient so the
    /// finite-difference checker can prove it detects broken rules.
    #[cfg(test)]
    pub(crate) corrupt_matmul_vjp: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a leaf buffer (input, parameter snapshot, or constant).
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(TapeBuf { data, shape })
    }

    fn push(&mut self, buf: TapeBuf) -> BufId {
        self.bufs.push(buf);
        self.grads.push(None);
        self.bufs.len() - 1
    }

    pub fn data(&self, id: BufId) -> &[f32] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn value(&self, id: BufId) -> f32 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    /// Gradient of the last backward pass, if this buffer received one.
    pub fn grad(&self, id: BufId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    // ── recorded operations ──

    /// out = x @ w + bias. x is read as [rows, cols-product]; w must be
    /// [k, n] with k matching x's column product.
    pub fn affine(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.bufs[x].rows_cols();
        let wshape = self.bufs[w].shape.clone();
        if wshape.len() != 2 || wshape[0] != k {
            return Err(CoreError::shape(
                "affine",
                format!("x {:?} gives k={}, w is {:?}", self.bufs[x].shape, k, wshape),
            ));
        }
        let n = wshape[1];
        if self.bufs[b].data.len() != n {
            return Err(CoreError::shape(
                "affine",
                format!("bias has {} entries, w is {:?}", self.bufs[b].data.len(), wshape),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::affine(&self.bufs[x].data, &self.bufs[w].data, &self.bufs[b].data, &mut out, m, k, n);
        let id = self.push(TapeBuf { data: out, shape: vec![m, n] });
        self.ops.push(TapeOp::Affine { x, w, b, out: id, m, k, n });
        Ok(id)
    }

    /// out = a @ b without bias.
    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.bufs[a].rows_cols();
        let bshape = self.bufs[b].shape.clone();
        if bshape.len() != 2 || bshape[0] != k {
            return Err(CoreError::shape(
                "matmul",
                format!("a {:?} gives k={}, b is {:?}", self.bufs[a].shape, k, bshape),
            ));
        }
        let n = bshape[1];
        let mut out = vec![0.0f32; m * n];
        kernels::matmul(&self.bufs[a].data, &self.bufs[b].data, &mut out, m, k, n);
        let id = self.push(TapeBuf { data: out, shape: vec![m, n] });
        self.ops.push(TapeOp::MatMul { a, b, out: id, m, k, n });
        Ok(id)
    }

    /// Valid 3x3 convolution, no bias. input: [n,h,w,c] (or [h,w,c] for a
    /// single image), kernels: [kf,3,3,c].
    pub fn conv2d_valid(&mut self, input: BufId, kernels_id: BufId, stride: usize) -> Result<BufId> {
        let ishape = self.bufs[input].shape.clone();
        let (n, h, w, c) = match ishape.len() {
            3 => (1, ishape[0], ishape[1], ishape[2]),
            4 => (ishape[0], ishape[1], ishape[2], ishape[3]),
            _ => {
                return Err(CoreError::shape(
                    "conv2d_valid",
                    format!("input must be [h,w,c] or [n,h,w,c], got {:?}", ishape),
                ))
            }
        };
        let kshape = self.bufs[kernels_id].shape.clone();
        if kshape.len() != 4 || kshape[1] != 3 || kshape[2] != 3 || kshape[3] != c {
            return Err(CoreError::shape(
                "conv2d_valid",
                format!("kernels must be [kf,3,3,{}], got {:?}", c, kshape),
            ));
        }
        if h < 3 || w < 3 {
            return Err(CoreError::invalid(
                "conv2d_valid",
                format!("input {}x{} is smaller than the 3x3 kernel", h, w),
            ));
        }
        if stride == 0 {
            return Err(CoreError::invalid("conv2d_valid", "stride must be >= 1"));
        }
        let kf = kshape[0];
        let oh = kernels::conv_out_extent(h, stride);
        let ow = kernels::conv_out_extent(w, stride);
        let mut out = vec![0.0f32; n * oh * ow * kf];
        for i in 0..n {
            kernels::conv2d_valid_single(
                &self.bufs[input].data[i * h * w * c..(i + 1) * h * w * c],
                &self.bufs[kernels_id].data,
                &mut out[i * oh * ow * kf..(i + 1) * oh * ow * kf],
                h,
                w,
                c,
                kf,
                stride,
            );
        }
        let shape = if ishape.len() == 3 { vec![oh, ow, kf] } else { vec![n, oh, ow, kf] };
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Conv2dValid { input, kernels: kernels_id, out: id, n, h, w, c, kf, stride });
        Ok(id)
    }

    /// Feature-wise batch normalization with batch statistics. The feature
    /// axis is the last one; all leading axes are rows. Returns the output
    /// buffer plus the batch mean and biased variance so the caller can fold
    /// them into running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        eps: f32,
    ) -> Result<(BufId, Vec<f32>, Vec<f32>)> {
        let (rows, feat) = self.bufs[x].rows_feat();
        self.check_bn_params("batchnorm", feat, gamma, beta)?;
        if rows < 2 {
            return Err(CoreError::invalid(
                "batchnorm",
                format!("train mode needs at least 2 rows, got {}", rows),
            ));
        }
        let (mean, var) = kernels::feature_stats(&self.bufs[x].data, rows, feat);
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0f32; rows * feat];
        kernels::bn_apply(
            &self.bufs[x].data,
            &mean,
            &invstd,
            &self.bufs[gamma].data,
            &self.bufs[beta].data,
            &mut out,
            rows,
            feat,
        );
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::BatchNormTrain {
            x,
            gamma,
            beta,
            out: id,
            rows,
            feat,
            mean: mean.clone(),
            invstd,
        });
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<BufId> {
        let (rows, feat) = self.bufs[x].rows_feat();
        self.check_bn_params("batchnorm", feat, gamma, beta)?;
        if running_mean.len() != feat || running_var.len() != feat {
            return Err(CoreError::shape(
                "batchnorm",
                format!(
                    "running stats have {}/{} entries, feature axis is {}",
                    running_mean.len(),
                    running_var.len(),
                    feat
                ),
            ));
        }
        let invstd: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0f32; rows * feat];
        kernels::bn_apply(
            &self.bufs[x].data,
            running_mean,
            &invstd,
            &self.bufs[gamma].data,
            &self.bufs[beta].data,
            &mut out,
            rows,
            feat,
        );
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::BatchNormEval {
            x,
            gamma,
            beta,
            out: id,
            rows,
            feat,
            mean: running_mean.to_vec(),
            invstd,
        });
        Ok(id)
    }

    fn check_bn_params(&self, op: &str, feat: usize, gamma: BufId, beta: BufId) -> Result<()> {
        if self.bufs[gamma].data.len() != feat || self.bufs[beta].data.len() != feat {
            return Err(CoreError::shape(
                op,
                format!(
                    "gamma/beta have {}/{} entries, feature axis is {}",
                    self.bufs[gamma].data.len(),
                    self.bufs[beta].data.len(),
                    feat
                ),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.bufs[x].data.len()];
        kernels::map_relu(&self.bufs[x].data, &mut out);
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Relu { x, out: id });
        id
    }

    pub fn sigmoid(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.bufs[x].data.len()];
        kernels::map_sigmoid(&self.bufs[x].data, &mut out);
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Sigmoid { x, out: id });
        id
    }

    pub fn tanh(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.bufs[x].data.len()];
        kernels::map_tanh(&self.bufs[x].data, &mut out);
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Tanh { x, out: id });
        id
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.check_same_len("add", a, b)?;
        let mut out = vec![0.0f32; self.bufs[a].data.len()];
        kernels::add(&self.bufs[a].data, &self.bufs[b].data, &mut out);
        let shape = self.bufs[a].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Add { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.check_same_len("mul", a, b)?;
        let mut out = vec![0.0f32; self.bufs[a].data.len()];
        kernels::mul(&self.bufs[a].data, &self.bufs[b].data, &mut out);
        let shape = self.bufs[a].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn one_minus(&mut self, x: BufId) -> BufId {
        let mut out = vec![0.0f32; self.bufs[x].data.len()];
        kernels::one_minus(&self.bufs[x].data, &mut out);
        let shape = self.bufs[x].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::OneMinus { x, out: id });
        id
    }

    fn check_same_len(&self, op: &str, a: BufId, b: BufId) -> Result<()> {
        if self.bufs[a].data.len() != self.bufs[b].data.len() {
            return Err(CoreError::shape(
                op,
                format!("operands {:?} vs {:?}", self.bufs[a].shape, self.bufs[b].shape),
            ));
        }
        Ok(())
    }

    /// Column-wise concatenation of two row-major matrices with equal rows.
    pub fn concat_cols(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (ra, fa) = self.bufs[a].rows_cols();
        let (rb, fb) = self.bufs[b].rows_cols();
        if ra != rb {
            return Err(CoreError::shape(
                "concat_cols",
                format!("row counts differ: {:?} vs {:?}", self.bufs[a].shape, self.bufs[b].shape),
            ));
        }
        let mut out = vec![0.0f32; ra * (fa + fb)];
        for r in 0..ra {
            out[r * (fa + fb)..r * (fa + fb) + fa]
                .copy_from_slice(&self.bufs[a].data[r * fa..(r + 1) * fa]);
            out[r * (fa + fb) + fa..(r + 1) * (fa + fb)]
                .copy_from_slice(&self.bufs[b].data[r * fb..(r + 1) * fb]);
        }
        let id = self.push(TapeBuf { data: out, shape: vec![ra, fa + fb] });
        self.ops.push(TapeOp::ConcatCols { a, b, out: id, rows: ra, fa, fb });
        Ok(id)
    }

    /// Per-row selection: out[r] = on[r] where mask[r] == 1, off[r] where 0.
    /// Mask entries of exactly 0 or 1 copy rows bitwise (no arithmetic), so
    /// gating never perturbs the carried value.
    pub fn row_gate(&mut self, mask: Vec<f32>, on: BufId, off: BufId) -> Result<BufId> {
        self.check_same_len("row_gate", on, off)?;
        let (rows, feat) = self.bufs[on].rows_cols();
        if mask.len() != rows {
            return Err(CoreError::shape(
                "row_gate",
                format!("mask has {} entries, operands have {} rows", mask.len(), rows),
            ));
        }
        let mut out = vec![0.0f32; rows * feat];
        for r in 0..rows {
            let src = if mask[r] == 1.0 { &self.bufs[on].data } else { &self.bufs[off].data };
            out[r * feat..(r + 1) * feat].copy_from_slice(&src[r * feat..(r + 1) * feat]);
        }
        let shape = self.bufs[on].shape.clone();
        let id = self.push(TapeBuf { data: out, shape });
        self.ops.push(TapeOp::RowGate { mask, on, off, out: id, rows, feat });
        Ok(id)
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_loss(&mut self, p: BufId, labels: &[f32]) -> Result<BufId> {
        let n = self.bufs[p].data.len();
        if n == 0 {
            return Err(CoreError::invalid("bce_loss", "empty prediction batch"));
        }
        if labels.len() != n {
            return Err(CoreError::shape(
                "bce_loss",
                format!("{} predictions vs {} labels", n, labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(CoreError::invalid("bce_loss", format!("label {} is not 0 or 1", bad)));
        }
        let mut acc = 0.0f64;
        for (&pv, &y) in self.bufs[p].data.iter().zip(labels.iter()) {
            let pc = kernels::clamp_score(pv) as f64;
            acc -= (y as f64) * pc.ln() + (1.0 - y as f64) * (1.0 - pc).ln();
        }
        let loss = (acc / n as f64) as f32;
        let id = self.push(TapeBuf { data: vec![loss], shape: vec![] });
        self.ops.push(TapeOp::BceLoss { p, labels: labels.to_vec(), out: id });
        Ok(id)
    }

    /// Mean squared error over all elements against a constant target.
    pub fn mse_loss(&mut self, p: BufId, target: &[f32]) -> Result<BufId> {
        let n = self.bufs[p].data.len();
        if n == 0 || target.len() != n {
            return Err(CoreError::shape(
                "mse_loss",
                format!("{} predictions vs {} targets", n, target.len()),
            ));
        }
        let mut acc = 0.0f64;
        for (&pv, &t) in self.bufs[p].data.iter().zip(target.iter()) {
            let d = (pv - t) as f64;
            acc += d * d;
        }
        let loss = (acc / n as f64) as f32;
        let id = self.push(TapeBuf { data: vec![loss], shape: vec![] });
        self.ops.push(TapeOp::MseLoss { p, target: target.to_vec(), out: id });
        Ok(id)
    }

    // ── backward ──

    fn acc_grad<'a>(grads: &'a mut [Option<Vec<f32>>], bufs: &[TapeBuf], id: BufId) -> &'a mut Vec<f32> {
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0f32; bufs[id].data.len()]);
        }
        grads[id].as_mut().unwrap()
    }

    /// Runs one reverse sweep from a scalar loss buffer. Gradients for every
    /// buffer that (transitively) feeds the loss are accumulated and can be
    /// read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.ran_backward {
            return Err(CoreError::invalid("backward", "tape already ran backward; record a fresh tape"));
        }
        if self.bufs[loss].data.len() != 1 {
            return Err(CoreError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.bufs[loss].shape),
            ));
        }
        self.ran_backward = true;
        self.grads[loss] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) {
        #[cfg(test)]
        let corrupt_mm = self.corrupt_matmul_vjp;
        #[cfg(not(test))]
        let corrupt_mm = false;
        // Split borrows: ops are read, grads and bufs are disjoint fields.
        let bufs = &self.bufs;
        let grads = &mut self.grads;
        match &self.ops[idx] {
            TapeOp::Affine { x, w, b, out, m, k, n } => {
                let Some(g) = grads[*out].clone() else { return };
                kernels::matmul_nt_acc(&g, &bufs[*w].data, Self::acc_grad(grads, bufs, *x), *m, *n, *k);
                kernels::matmul_tn_acc(&bufs[*x].data, &g, Self::acc_grad(grads, bufs, *w), *m, *k, *n);
                kernels::colsum_acc(&g, Self::acc_grad(grads, bufs, *b), *m, *n);
            }
            TapeOp::MatMul { a, b, out, m, k, n } => {
                let Some(g) = grads[*out].clone() else { return };
                let ga =
                    if corrupt_mm { g.iter().map(|v| -v).collect::<Vec<f32>>() } else { g.clone() };
                kernels::matmul_nt_acc(&ga, &bufs[*b].data, Self::acc_grad(grads, bufs, *a), *m, *n, *k);
                kernels::matmul_tn_acc(&bufs[*a].data, &g, Self::acc_grad(grads, bufs, *b), *m, *k, *n);
            }
            TapeOp::Conv2dValid { input, kernels: ker, out, n, h, w, c, kf, stride } => {
                let Some(g) = grads[*out].clone() else { return };
                let img = *h * *w * *c;
                let oimg = g.len() / *n;
                // Touch both grads up front so the split below is simple.
                Self::acc_grad(grads, bufs, *input);
                Self::acc_grad(grads, bufs, *ker);
                for i in 0..*n {
                    let mut dk = std::mem::take(grads[*ker].as_mut().unwrap());
                    {
                        let di = grads[*input].as_mut().unwrap();
                        kernels::conv2d_valid_single_backward(
                            &bufs[*input].data[i * img..(i + 1) * img],
                            &bufs[*ker].data,
                            &g[i * oimg..(i + 1) * oimg],
                            &mut di[i * img..(i + 1) * img],
                            &mut dk,
                            *h,
                            *w,
                            *c,
                            *kf,
                            *stride,
                        );
                    }
                    *grads[*ker].as_mut().unwrap() = dk;
                }
            }
            TapeOp::BatchNormTrain { x, gamma, beta, out, rows, feat, mean, invstd } => {
                let Some(g) = grads[*out].clone() else { return };
                let rows = *rows;
                let feat = *feat;
                let xd = &bufs[*x].data;
                let gam = &bufs[*gamma].data;
                // Per-feature reductions of dxhat and dxhat * xhat.
                let mut sum_dxh = vec![0.0f64; feat];
                let mut sum_dxh_xh = vec![0.0f64; feat];
                for r in 0..rows {
                    for f in 0..feat {
                        let xhat = (xd[r * feat + f] - mean[f]) * invstd[f];
                        let dxh = (g[r * feat + f] * gam[f]) as f64;
                        sum_dxh[f] += dxh;
                        sum_dxh_xh[f] += dxh * xhat as f64;
                    }
                }
                {
                    let dg = Self::acc_grad(grads, bufs, *gamma);
                    for r in 0..rows {
                        for f in 0..feat {
                            let xhat = (xd[r * feat + f] - mean[f]) * invstd[f];
                            dg[f] += g[r * feat + f] * xhat;
                        }
                    }
                }
                {
                    let db = Self::acc_grad(grads, bufs, *beta);
                    kernels::colsum_acc(&g, db, rows, feat);
                }
                {
                    let dx = Self::acc_grad(grads, bufs, *x);
                    let nrows = rows as f64;
                    for r in 0..rows {
                        for f in 0..feat {
                            let xhat = ((xd[r * feat + f] - mean[f]) * invstd[f]) as f64;
                            let dxh = (g[r * feat + f] * gam[f]) as f64;
                            let v = (invstd[f] as f64 / nrows)
                                * (nrows * dxh - sum_dxh[f] - xhat * sum_dxh_xh[f]);
                            dx[r * feat + f] += v as f32;
                        }
                    }
                }
            }
            TapeOp::BatchNormEval { x, gamma, beta, out, rows, feat, mean, invstd } => {
                let Some(g) = grads[*out].clone() else { return };
                let rows = *rows;
                let feat = *feat;
                let gam = &bufs[*gamma].data;
                let xd = &bufs[*x].data;
                {
                    let dx = Self::acc_grad(grads, bufs, *x);
                    for r in 0..rows {
                        for f in 0..feat {
                            dx[r * feat + f] += g[r * feat + f] * gam[f] * invstd[f];
                        }
                    }
                }
                {
                    let dg = Self::acc_grad(grads, bufs, *gamma);
                    for r in 0..rows {
                        for f in 0..feat {
                            let xhat = (xd[r * feat + f] - mean[f]) * invstd[f];
                            dg[f] += g[r * feat + f] * xhat;
                        }
                    }
                }
                let db = Self::acc_grad(grads, bufs, *beta);
                kernels::colsum_acc(&g, db, rows, feat);
            }
            TapeOp::Relu { x, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let xd = &bufs[*x].data;
                let dx = Self::acc_grad(grads, bufs, *x);
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            TapeOp::Sigmoid { x, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let od = &bufs[*out].data;
                let dx = Self::acc_grad(grads, bufs, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * kernels::sigmoid_slope(od[i]);
                }
            }
            TapeOp::Tanh { x, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let od = &bufs[*out].data;
                let dx = Self::acc_grad(grads, bufs, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * (1.0 - od[i] * od[i]);
                }
            }
            TapeOp::Add { a, b, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let da = Self::acc_grad(grads, bufs, *a);
                for i in 0..g.len() {
                    da[i] += g[i];
                }
                let db = Self::acc_grad(grads, bufs, *b);
                for i in 0..g.len() {
                    db[i] += g[i];
                }
            }
            TapeOp::Mul { a, b, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let ad = bufs[*a].data.clone();
                let bd = &bufs[*b].data;
                {
                    let da = Self::acc_grad(grads, bufs, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                let db = Self::acc_grad(grads, bufs, *b);
                for i in 0..g.len() {
                    db[i] += g[i] * ad[i];
                }
            }
            TapeOp::OneMinus { x, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let dx = Self::acc_grad(grads, bufs, *x);
                for i in 0..g.len() {
                    dx[i] -= g[i];
                }
            }
            TapeOp::ConcatCols { a, b, out, rows, fa, fb } => {
                let Some(g) = grads[*out].clone() else { return };
                let (rows, fa, fb) = (*rows, *fa, *fb);
                {
                    let da = Self::acc_grad(grads, bufs, *a);
                    for r in 0..rows {
                        for f in 0..fa {
                            da[r * fa + f] += g[r * (fa + fb) + f];
                        }
                    }
                }
                let db = Self::acc_grad(grads, bufs, *b);
                for r in 0..rows {
                    for f in 0..fb {
                        db[r * fb + f] += g[r * (fa + fb) + fa + f];
                    }
                }
            }
            TapeOp::RowGate { mask, on, off, out, rows, feat } => {
                let Some(g) = grads[*out].clone() else { return };
                let (rows, feat) = (*rows, *feat);
                let mask = mask.clone();
                {
                    let don = Self::acc_grad(grads, bufs, *on);
                    for r in 0..rows {
                        if mask[r] == 1.0 {
                            for f in 0..feat {
                                don[r * feat + f] += g[r * feat + f];
                            }
                        }
                    }
                }
                let doff = Self::acc_grad(grads, bufs, *off);
                for r in 0..rows {
                    if mask[r] != 1.0 {
                        for f in 0..feat {
                            doff[r * feat + f] += g[r * feat + f];
                        }
                    }
                }
            }
            TapeOp::BceLoss { p, labels, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let gl = g[0];
                let n = labels.len() as f64;
                let pd = &bufs[*p].data;
                let labels = labels.clone();
                let dp = Self::acc_grad(grads, bufs, *p);
                for i in 0..labels.len() {
                    let pc = kernels::clamp_score(pd[i]) as f64;
                    let y = labels[i] as f64;
                    dp[i] += gl * (((pc - y) / (pc * (1.0 - pc)) / n) as f32);
                }
            }
            TapeOp::MseLoss { p, target, out } => {
                let Some(g) = grads[*out].clone() else { return };
                let gl = g[0];
                let n = target.len() as f64;
                let pd = &bufs[*p].data;
                let target = target.clone();
                let dp = Self::acc_grad(grads, bufs, *p);
                for i in 0..target.len() {
                    dp[i] += gl * ((2.0 * (pd[i] - target[i]) as f64 / n) as f32);
                }
            }
        }
    }
}

/// Buffer ids for one GRU cell's nine weight matrices and biases.
#[derive(Debug, Clone, Copy)]
pub struct GruWeightIds {
    pub wr: BufId,
    pub ur: BufId,
    pub br: BufId,
    pub wz: BufId,
    pub uz: BufId,
    pub bz: BufId,
    pub wh: BufId,
    pub uh: BufId,
    pub bh: BufId,
}

/// One GRU step on the tape:
///   r = sigmoid(x Wr + h Ur + br)
///   z = sigmoid(x Wz + h Uz + bz)
///   c = tanh(x Wh + (r * h) Uh + bh)
///   h' = (1 - z) * h + z * c
/// The plain (untaped) replay in `agent` mirrors this exact kernel order.
pub fn gru_cell(tape: &mut Tape, x: BufId, h: BufId, w: &GruWeightIds) -> Result<BufId> {
    let rx = tape.affine(x, w.wr, w.br)?;
    let rh = tape.matmul(h, w.ur)?;
    let r = tape.add(rx, rh)?;
    let r = tape.sigmoid(r);

    let zx = tape.affine(x, w.wz, w.bz)?;
    let zh = tape.matmul(h, w.uz)?;
    let z = tape.add(zx, zh)?;
    let z = tape.sigmoid(z);

    let gated = tape.mul(r, h)?;
    let cx = tape.affine(x, w.wh, w.bh)?;
    let ch = tape.matmul(gated, w.uh)?;
    let c = tape.add(cx, ch)?;
    let c = tape.tanh(c);

    let omz = tape.one_minus(z);
    let keep = tape.mul(omz, h)?;
    let take = tape.mul(z, c)?;
    tape.add(keep, take)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fanout_gradients_sum_exactly() {
        // loss = mean((x*a + x*b - 0)^2) pieces aside: use f(x) = x*a + x*b summed
        // via mse against zero with one element; d/dx = 2(ax + bx)(a + b).
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![3.0]);
        let a = t.leaf(vec![1], vec![2.0]);
        let b = t.leaf(vec![1], vec![5.0]);
        let xa = t.mul(x, a).unwrap();
        let xb = t.mul(x, b).unwrap();
        let s = t.add(xa, xb).unwrap();
        let loss = t.mse_loss(s, &[0.0]).unwrap();
        t.backward(loss).unwrap();
        // s = 21, ds/dx = a + b = 7, dloss/ds = 2*21 = 42, dloss/dx = 294.
        assert_eq!(t.grad(x).unwrap()[0], 294.0);
        // d/da = d/db = x * dL/ds = 3 * 42.
        assert_eq!(t.grad(a).unwrap()[0], 126.0);
        assert_eq!(t.grad(b).unwrap()[0], 126.0);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![0.2]);
        let loss = t.mse_loss(x, &[0.0]).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 2], vec![4.0, -1.5]);
        let w = t.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.leaf(vec![2], vec![0.0, 0.0]);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.data(y), &[4.0, -1.5]);
    }

    #[test]
    fn affine_shape_mismatch_reports_dims() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 3], vec![0.0; 3]);
        let w = t.leaf(vec![2, 2], vec![0.0; 4]);
        let b = t.leaf(vec![2], vec![0.0; 2]);
        let err = t.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("k=3"), "{}", err);
        assert!(err.contains("[2, 2]"), "{}", err);
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1], vec![0.5]);
        let loss = t.bce_loss(p, &[1.0]).unwrap();
        assert!((t.value(loss) - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn bce_clamps_tiny_probabilities() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1], vec![1e-9]);
        let loss = t.bce_loss(p, &[0.0]).unwrap();
        // Clamped to 1e-7: loss = -ln(1 - 1e-7), computed on the f32 clamp.
        let expect = -((1.0f64 - kernels::clamp_score(1e-9) as f64).ln()) as f32;
        assert_eq!(t.value(loss), expect);
        assert!(t.value(loss) > 0.0 && t.value(loss) < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut t = Tape::new();
        let p = t.leaf(vec![1], vec![0.4]);
        assert!(t.bce_loss(p, &[0.5]).is_err());
    }

    #[test]
    fn conv_rejects_small_input() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 2, 1], vec![0.0; 4]);
        let k = t.leaf(vec![1, 3, 3, 1], vec![0.0; 9]);
        assert!(t.conv2d_valid(x, k, 1).is_err());
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 4], vec![0.0; 4]);
        let g = t.leaf(vec![4], vec![1.0; 4]);
        let b = t.leaf(vec![4], vec![0.0; 4]);
        assert!(t.batchnorm_train(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let mut t = Tape::new();
        let x = t.leaf(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let g = t.leaf(vec![1], vec![1.0]);
        let b = t.leaf(vec![1], vec![0.0]);
        let (y, mean, var) = t.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(mean, vec![2.5]);
        assert_eq!(var, vec![1.25]);
        let out = t.data(y);
        let m: f32 = out.iter().sum::<f32>() / 4.0;
        let v: f32 = out.iter().map(|&o| (o - m) * (o - m)).sum::<f32>() / 4.0;
        assert!(m.abs() < 1e-4, "mean {}", m);
        assert!((v - 1.0).abs() < 1e-3, "var {}", v);
    }

    #[test]
    fn gru_zero_everything_gives_zero_state() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 3], vec![0.0; 3]);
        let h = t.leaf(vec![1, 2], vec![0.0; 2]);
        let zeros_w = |t: &mut Tape, r: usize, c: usize| t.leaf(vec![r, c], vec![0.0; r * c]);
        let w = GruWeightIds {
            wr: zeros_w(&mut t, 3, 2),
            ur: zeros_w(&mut t, 2, 2),
            br: t.leaf(vec![2], vec![0.0; 2]),
            wz: zeros_w(&mut t, 3, 2),
            uz: zeros_w(&mut t, 2, 2),
            bz: t.leaf(vec![2], vec![0.0; 2]),
            wh: zeros_w(&mut t, 3, 2),
            uh: zeros_w(&mut t, 2, 2),
            bh: t.leaf(vec![2], vec![0.0; 2]),
        };
        let h2 = gru_cell(&mut t, x, h, &w).unwrap();
        assert_eq!(t.data(h2), &[0.0, 0.0]);
    }

    #[test]
    fn row_gate_copies_rows_bitwise() {
        let mut t = Tape::new();
        let on = t.leaf(vec![2, 2], vec![1.0, -0.0, 3.0, 4.0]);
        let off = t.leaf(vec![2, 2], vec![9.0, 9.0, -0.0, 8.0]);
        let y = t.row_gate(vec![1.0, 0.0], on, off).unwrap();
        let out = t.data(y);
        assert_eq!(out[0].to_bits(), 1.0f32.to_bits());
        assert_eq!(out[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(out[2].to_bits(), (-0.0f32).to_bits());
        assert_eq!(out[3].to_bits(), 8.0f32.to_bits());
    }
}
