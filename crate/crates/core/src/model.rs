//! Conditional noise-prediction network.
//!
//! Residual MLP over flat inputs: an input affine, `blocks` residual blocks
//! (each re-injects a sinusoidal time embedding), and a linear output head.
//! Labels enter through an additive embedding table with one extra "null"
//! row (index `label_count`) used for unconditional prediction. A small
//! label-probe head reads the penultimate features; during training those
//! features cross a stop-gradient boundary, so the probe never trains the
//! trunk.
//!
//! The same kernel sequence backs both the taped forward (training) and the
//! plain forward (teachers, sampling), so the two agree bitwise.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CKPT_MAGIC: &[u8; 8] = b"CDGCKPT1";
const MAX_HEADER_LEN: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Number of real classes; the embedding table has one extra null row.
    pub label_count: usize,
    pub time_dim: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.input_dim >= 1
            && self.input_dim <= 4096
            && self.hidden >= 1
            && self.hidden <= 4096
            && self.blocks >= 1
            && self.blocks <= 64
            && self.label_count >= 1
            && self.label_count <= 65_536
            && self.time_dim >= 2
            && self.time_dim <= 4096
            && self.time_dim % 2 == 0;
        if !ok {
            return Err(Error::invalid(format!("architecture out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn null_label(&self) -> usize {
        self.label_count
    }

    /// Parameter shapes in storage order.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h, f, l) = (self.input_dim, self.hidden, self.time_dim, self.label_count);
        let mut shapes = vec![
            vec![d, h],     // w_in
            vec![h],        // b_in
            vec![f, h],     // w_time
            vec![l + 1, h], // label_emb (last row = null)
        ];
        for _ in 0..self.blocks {
            shapes.push(vec![h, h]); // wa
            shapes.push(vec![h]); // ba
            shapes.push(vec![f, h]); // wt
            shapes.push(vec![h, h]); // wb
            shapes.push(vec![h]); // bb
        }
        shapes.push(vec![h, d]); // w_out
        shapes.push(vec![d]); // b_out
        shapes.push(vec![h, l]); // w_head
        shapes.push(vec![l]); // b_head
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

// storage-order indices
const P_W_IN: usize = 0;
const P_B_IN: usize = 1;
const P_W_TIME: usize = 2;
const P_LABEL_EMB: usize = 3;
const BLOCK_BASE: usize = 4;
const BLOCK_STRIDE: usize = 5;

fn p_out_base(arch: &ArchConfig) -> usize {
    BLOCK_BASE + BLOCK_STRIDE * arch.blocks
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: ArchConfig,
    params: Vec<Tensor>,
}

/// Tape handles for every parameter of a registered model.
pub struct ModelVars {
    pub vars: Vec<Var>,
}

/// Frozen copy of a model used as the previous-task reference. Read-only;
/// the content hash is fixed at freeze time so immutability is checkable.
#[derive(Clone)]
pub struct TeacherSnapshot {
    model: Denoiser,
    hash: String,
}

impl TeacherSnapshot {
    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Sinusoidal features of integer timesteps.
pub fn time_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for j in 0..half {
            let omega = 10_000f64.powf(-(j as f64) / half as f64);
            let arg = ti as f64 * omega;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::matrix(t.len(), dim, data).expect("time feature shape")
}

impl Denoiser {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                if shape.len() == 1 {
                    // biases start at zero
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape[0] as f64;
                    let a = 1.0 / fan_in.sqrt();
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(shape, data).expect("init shape")
                }
            })
            .collect();
        Ok(Denoiser { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, model wants {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Indices of the label-probe head parameters within the flat vector.
    pub fn head_param_range(&self) -> std::ops::Range<usize> {
        let ob = p_out_base(&self.arch);
        let before: usize = self.params[..ob + 2].iter().map(|p| p.len()).sum();
        before..self.param_count()
    }

    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            for &v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn freeze(&self) -> TeacherSnapshot {
        TeacherSnapshot { model: self.clone(), hash: self.param_hash() }
    }

    /// Reinitialize only the label-probe head (fresh draw from `seed`).
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let ob = p_out_base(&self.arch);
        let a = 1.0 / (self.arch.hidden as f64).sqrt();
        for v in self.params[ob + 2].data_mut() {
            *v = rng.gen_range(-a..a);
        }
        for v in self.params[ob + 3].data_mut() {
            *v = 0.0;
        }
    }

    fn check_batch(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<usize> {
        let (b, d) = x.as_2d();
        if d != self.arch.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input dim {} vs model {}", d, self.arch.input_dim),
            ));
        }
        if t.len() != b || labels.len() != b {
            return Err(Error::shape(
                "forward",
                format!("batch {} with {} timesteps, {} labels", b, t.len(), labels.len()),
            ));
        }
        if t.iter().any(|&ti| ti < 1) {
            return Err(Error::invalid("timesteps are 1-based"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > self.arch.null_label()) {
            return Err(Error::invalid(format!(
                "label {} out of range (null index is {})",
                bad,
                self.arch.null_label()
            )));
        }
        Ok(b)
    }

    // ── taped forward ────────────────────────────────────────────────────

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars { vars: self.params.iter().map(|p| tape.input(p.clone())).collect() }
    }

    pub fn register_constants(&self, tape: &mut Tape) -> ModelVars {
        ModelVars { vars: self.params.iter().map(|p| tape.constant(p.clone())).collect() }
    }

    /// Noise prediction with gradient tracking. Returns `(eps_hat, penult)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        mv: &ModelVars,
        x: Var,
        t: &[usize],
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        self.check_batch(tape.value(x), t, labels)?;
        let v = &mv.vars;
        let tf = tape.constant(time_features(t, self.arch.time_dim));

        let mut h = tape.affine(x, v[P_W_IN], v[P_B_IN])?;
        let tproj = tape.matmul(tf, v[P_W_TIME])?;
        h = tape.add(h, tproj)?;
        let emb = tape.gather_rows(v[P_LABEL_EMB], labels)?;
        h = tape.add(h, emb)?;
        h = tape.silu(h)?;

        for blk in 0..self.arch.blocks {
            let base = BLOCK_BASE + BLOCK_STRIDE * blk;
            let u = tape.affine(h, v[base], v[base + 1])?;
            let ut = tape.matmul(tf, v[base + 2])?;
            let u = tape.add(u, ut)?;
            let a = tape.silu(u)?;
            let res = tape.affine(a, v[base + 3], v[base + 4])?;
            h = tape.add(h, res)?;
        }

        let ob = p_out_base(&self.arch);
        let eps = tape.affine(h, v[ob], v[ob + 1])?;
        Ok((eps, h))
    }

    /// Label-probe logits from (already computed) penultimate features.
    pub fn head_on_tape(&self, tape: &mut Tape, mv: &ModelVars, penult: Var) -> Result<Var> {
        let ob = p_out_base(&self.arch);
        tape.affine(penult, mv.vars[ob + 2], mv.vars[ob + 3])
    }

    // ── plain forward (no tape) ──────────────────────────────────────────

    /// Same computation as [`forward_on_tape`] on raw kernels.
    pub fn forward_plain(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<(Tensor, Tensor)> {
        let b = self.check_batch(x, t, labels)?;
        let (_, h_dim) = (b, self.arch.hidden);
        let tf = time_features(t, self.arch.time_dim);

        let affine = |x: &Tensor, w: &Tensor, bias: &Tensor| -> Tensor {
            let (m, k) = x.as_2d();
            let (_, n) = w.as_2d();
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bias.data());
            }
            tensor::matmul_nn_acc(x.data(), w.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out).expect("affine shape")
        };
        let matmul = |x: &Tensor, w: &Tensor| -> Tensor {
            let (m, k) = x.as_2d();
            let (_, n) = w.as_2d();
            let mut out = vec![0.0; m * n];
            tensor::matmul_nn_acc(x.data(), w.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out).expect("matmul shape")
        };
        let add_in = |a: &mut Tensor, b: &Tensor| {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        };
        let silu_in = |a: &mut Tensor| {
            for v in a.data_mut() {
                *v = tensor::silu(*v);
            }
        };

        let p = &self.params;
        let mut h = affine(x, &p[P_W_IN], &p[P_B_IN]);
        let tproj = matmul(&tf, &p[P_W_TIME]);
        add_in(&mut h, &tproj);
        // embedding gather
        {
            let mut emb = vec![0.0; b * h_dim];
            for (r, &l) in labels.iter().enumerate() {
                emb[r * h_dim..(r + 1) * h_dim].copy_from_slice(p[P_LABEL_EMB].row(l));
            }
            let emb = Tensor::matrix(b, h_dim, emb).expect("emb shape");
            add_in(&mut h, &emb);
        }
        silu_in(&mut h);

        for blk in 0..self.arch.blocks {
            let base = BLOCK_BASE + BLOCK_STRIDE * blk;
            let mut u = affine(&h, &p[base], &p[base + 1]);
            let ut = matmul(&tf, &p[base + 2]);
            add_in(&mut u, &ut);
            silu_in(&mut u);
            let res = affine(&u, &p[base + 3], &p[base + 4]);
            add_in(&mut h, &res);
        }

        let ob = p_out_base(&self.arch);
        let eps = affine(&h, &p[ob], &p[ob + 1]);
        Ok((eps, h))
    }

    /// Predicted noise for a noised batch; labels may be the null index.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        Ok(self.forward_plain(x_t, t, labels)?.0)
    }

    /// Label-probe distribution over real classes, evaluated on clean inputs
    /// at t=1 with the null label.
    pub fn label_probs(&self, x0: &Tensor) -> Result<Tensor> {
        let (b, _) = x0.as_2d();
        let t = vec![1usize; b];
        let labels = vec![self.arch.null_label(); b];
        let (_, penult) = self.forward_plain(x0, &t, &labels)?;
        let ob = p_out_base(&self.arch);
        let (wh, bh) = (&self.params[ob + 2], &self.params[ob + 3]);
        let l = self.arch.label_count;
        let mut logits = vec![0.0; b * l];
        for r in 0..b {
            logits[r * l..(r + 1) * l].copy_from_slice(bh.data());
        }
        tensor::matmul_nn_acc(penult.data(), wh.data(), b, self.arch.hidden, l, &mut logits);
        let mut probs = vec![0.0; b * l];
        tensor::softmax_rows(&logits, b, l, &mut probs);
        Tensor::matrix(b, l, probs)
    }

    /// Penultimate features on clean inputs (t=1, null label), used where the
    /// probe must not backpropagate into the trunk.
    pub fn probe_features(&self, x0: &Tensor) -> Result<Tensor> {
        let (b, _) = x0.as_2d();
        let t = vec![1usize; b];
        let labels = vec![self.arch.null_label(); b];
        Ok(self.forward_plain(x0, &t, &labels)?.1)
    }

    // ── checkpoints ──────────────────────────────────────────────────────

    pub fn encode_checkpoint(&self, seed: u64, task_index: usize) -> Vec<u8> {
        let header = CheckpointHeader {
            schema_version: 1,
            arch: self.arch.clone(),
            seed,
            task_index,
        };
        let hj = serde_json::to_vec(&header).expect("header serializes");
        let flat = self.flatten();
        let mut out = Vec::with_capacity(8 + 8 + hj.len() + 8 + flat.len() * 8);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Denoiser, CheckpointMeta)> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(err("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if hlen > MAX_HEADER_LEN || 16 + hlen as usize > bytes.len() {
            return Err(err("truncated or oversized header"));
        }
        let hend = 16 + hlen as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.schema_version != 1 {
            return Err(err("unsupported checkpoint schema"));
        }
        header.arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if bytes.len() < hend + 8 {
            return Err(err("truncated parameter count"));
        }
        let n = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap());
        let want = header.arch.param_count() as u64;
        if n != want {
            return Err(err("parameter count disagrees with architecture"));
        }
        let blob = &bytes[hend + 8..];
        if blob.len() != n as usize * 8 {
            return Err(err("parameter blob length mismatch"));
        }
        let mut flat = Vec::with_capacity(n as usize);
        for chunk in blob.chunks_exact(8) {
            flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut model = Denoiser::init(header.arch.clone(), 0)?;
        model.set_flat(&flat)?;
        Ok((model, CheckpointMeta { seed: header.seed, task_index: header.task_index }))
    }

    pub fn save_checkpoint(&self, path: &std::path::Path, seed: u64, task_index: usize) -> Result<()> {
        std::fs::write(path, self.encode_checkpoint(seed, task_index))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<(Denoiser, CheckpointMeta)> {
        let bytes = std::fs::read(path)?;
        Self::decode_checkpoint(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    schema_version: u32,
    arch: ArchConfig,
    seed: u64,
    task_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub task_index: usize,
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig { input_dim: 2, hidden: 8, blocks: 3, label_count: 4, time_dim: 4 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Denoiser::init(small_arch(), 42).unwrap();
        let b = Denoiser::init(small_arch(), 42).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = Denoiser::init(small_arch(), 43).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn plain_and_taped_forward_agree_bitwise() {
        let m = Denoiser::init(small_arch(), 7).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.3, -0.2, 1.1, 0.0, -0.7, 0.4]).unwrap();
        let t = [1usize, 5, 9];
        let labels = [0usize, 3, m.arch().null_label()];

        let (eps_p, pen_p) = m.forward_plain(&x, &t, &labels).unwrap();

        let mut tape = Tape::new();
        let mv = m.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (eps_v, pen_v) = m.forward_on_tape(&mut tape, &mv, xv, &t, &labels).unwrap();

        assert_eq!(tape.value(eps_v).data(), eps_p.data());
        assert_eq!(tape.value(pen_v).data(), pen_p.data());
    }

    #[test]
    fn null_and_real_label_outputs_differ() {
        let m = Denoiser::init(small_arch(), 7).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let a = m.predict_noise(&x, &[3], &[0]).unwrap();
        let b = m.predict_noise(&x, &[3], &[m.arch().null_label()]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn label_out_of_range_is_error() {
        let m = Denoiser::init(small_arch(), 7).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(m.predict_noise(&x, &[1], &[5]).is_err()); // 4 == null is fine, 5 is not
        assert!(m.predict_noise(&x, &[0], &[0]).is_err()); // t is 1-based
    }

    #[test]
    fn permuting_head_columns_permutes_probs() {
        let mut m = Denoiser::init(small_arch(), 9).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.4, 0.1, -0.3, 0.8]).unwrap();
        let before = m.label_probs(&x).unwrap();

        // swap classes 0 and 2 in the probe head
        let ob = p_out_base(m.arch());
        let l = m.arch().label_count;
        let h = m.arch().hidden;
        {
            let w = m.params[ob + 2].data_mut();
            for r in 0..h {
                w.swap(r * l, r * l + 2);
            }
            let b = m.params[ob + 3].data_mut();
            b.swap(0, 2);
        }
        let after = m.label_probs(&x).unwrap();
        for row in 0..2 {
            assert_eq!(before.row(row)[0], after.row(row)[2]);
            assert_eq!(before.row(row)[2], after.row(row)[0]);
            assert_eq!(before.row(row)[1], after.row(row)[1]);
        }
    }

    #[test]
    fn teacher_hash_constant_while_student_moves() {
        let mut student = Denoiser::init(small_arch(), 11).unwrap();
        let teacher = student.freeze();
        let h0 = teacher.hash().to_string();
        let mut flat = student.flatten();
        for v in flat.iter_mut() {
            *v += 0.01;
        }
        student.set_flat(&flat).unwrap();
        assert_eq!(teacher.model().param_hash(), h0);
        assert_ne!(student.param_hash(), h0);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let m = Denoiser::init(small_arch(), 123).unwrap();
        let bytes = m.encode_checkpoint(123, 4);
        let (back, meta) = Denoiser::decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, CheckpointMeta { seed: 123, task_index: 4 });
        let a = m.flatten();
        let b = back.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn truncated_checkpoint_is_structured_error() {
        let m = Denoiser::init(small_arch(), 5).unwrap();
        let bytes = m.encode_checkpoint(5, 1);
        for cut in [0, 4, 15, 30, bytes.len() - 1] {
            match Denoiser::decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint(_)) => {}
                other => panic!("cut {cut}: expected checkpoint error, got {other:?}"),
            }
        }
        // flipped magic
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Denoiser::decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn head_param_range_covers_probe_only() {
        let m = Denoiser::init(small_arch(), 1).unwrap();
        let r = m.head_param_range();
        let l = m.arch().label_count;
        let h = m.arch().hidden;
        assert_eq!(r.len(), h * l + l);
        assert_eq!(r.end, m.param_count());
    }

    #[test]
    fn time_features_in_range() {
        let tf = time_features(&[1, 100, 1000], 16);
        assert_eq!(tf.shape(), &[3, 16]);
        assert!(tf.data().iter().all(|v| v.abs() <= 1.0));
    }
}
