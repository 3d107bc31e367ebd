//! Neural building blocks: embedding lookup, GRU cell, BiGRU layer,
//! multi-head self-attention with padding mask, masked mean pooling, and
//! softmax classification heads.
//!
//! All operations run on an [`autograd::Tape`] and are differentiable
//! w.r.t. their [`Parameter`]s. Sequences are `[T x d]` matrices with real
//! tokens in rows `0..mask_len`; rows at and past `mask_len` are padding.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, Parameter, Tape, Tensor};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("token id {0} out of range for vocabulary of {1}")]
    IdOutOfRange(usize, usize),
    #[error("mask_len is 0: nothing to attend over")]
    MaskEmpty,
    #[error("d_model {0} not divisible by head count {1}")]
    BadHeadCount(usize, usize),
}

type Result<T> = std::result::Result<T, LayerError>;

/// `|vocab| x dim` learned word vectors, initialized N(0, 1).
pub struct EmbeddingTable {
    pub table: Parameter,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingTable {
            table: Parameter::randn("embedding", vocab_size, dim, 1.0, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape().0
    }

    pub fn dim(&self) -> usize {
        self.table.shape().1
    }
}

/// Row gather: `[T] ids -> [T x dim]`, differentiable w.r.t. the table.
pub fn embed_lookup(tape: &Tape, token_ids: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    let vocab = table.vocab_size();
    for &id in token_ids {
        if id >= vocab {
            return Err(LayerError::IdOutOfRange(id, vocab));
        }
    }
    let t = tape.param(&table.table);
    Ok(t.gather_rows(token_ids)?)
}

/// Gate parameters for one GRU direction.
pub struct GruCellParams {
    pub w_z: Parameter,
    pub w_r: Parameter,
    pub w_h: Parameter,
    pub u_z: Parameter,
    pub u_r: Parameter,
    pub u_h: Parameter,
    pub b_z: Parameter,
    pub b_r: Parameter,
    pub b_h: Parameter,
    pub hidden_size: usize,
}

impl GruCellParams {
    /// Input-to-hidden and hidden-to-hidden weights drawn N(0, 1/fan_in);
    /// biases zero.
    pub fn new(prefix: &str, input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let wi = 1.0 / (input_size as f64).sqrt();
        let wh = 1.0 / (hidden_size as f64).sqrt();
        let w = |n: &str, s: f64, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Parameter::randn(&format!("{prefix}.{n}"), r, c, s, rng)
        };
        GruCellParams {
            w_z: w("w_z", wi, input_size, hidden_size, rng),
            w_r: w("w_r", wi, input_size, hidden_size, rng),
            w_h: w("w_h", wi, input_size, hidden_size, rng),
            u_z: w("u_z", wh, hidden_size, hidden_size, rng),
            u_r: w("u_r", wh, hidden_size, hidden_size, rng),
            u_h: w("u_h", wh, hidden_size, hidden_size, rng),
            b_z: Parameter::zeros(&format!("{prefix}.b_z"), 1, hidden_size),
            b_r: Parameter::zeros(&format!("{prefix}.b_r"), 1, hidden_size),
            b_h: Parameter::zeros(&format!("{prefix}.b_h"), 1, hidden_size),
            hidden_size,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![
            self.w_z.clone(),
            self.w_r.clone(),
            self.w_h.clone(),
            self.u_z.clone(),
            self.u_r.clone(),
            self.u_h.clone(),
            self.b_z.clone(),
            self.b_r.clone(),
            self.b_h.clone(),
        ]
    }
}

/// One GRU step, Cho et al. form:
/// z = sigma(x W_z + h U_z + b_z), r = sigma(x W_r + h U_r + b_r),
/// h~ = tanh(x W_h + (r . h) U_h + b_h), h' = (1-z) . h + z . h~.
pub fn gru_cell_step(
    tape: &Tape,
    x_t: &Tensor,
    h_prev: &Tensor,
    params: &GruCellParams,
) -> Result<Tensor> {
    let w_z = tape.param(&params.w_z);
    let w_r = tape.param(&params.w_r);
    let w_h = tape.param(&params.w_h);
    let u_z = tape.param(&params.u_z);
    let u_r = tape.param(&params.u_r);
    let u_h = tape.param(&params.u_h);
    let b_z = tape.param(&params.b_z);
    let b_r = tape.param(&params.b_r);
    let b_h = tape.param(&params.b_h);

    let z = x_t
        .matmul(&w_z)?
        .add(&h_prev.matmul(&u_z)?)?
        .add(&b_z)?
        .sigmoid();
    let r = x_t
        .matmul(&w_r)?
        .add(&h_prev.matmul(&u_r)?)?
        .add(&b_r)?
        .sigmoid();
    let rh = r.mul(h_prev)?;
    let cand = x_t.matmul(&w_h)?.add(&rh.matmul(&u_h)?)?.add(&b_h)?.tanh();
    // (1-z).h + z.h~  ==  h + z.(h~ - h)
    let delta = cand.sub(h_prev)?;
    Ok(h_prev.add(&z.mul(&delta)?)?)
}

/// Forward and backward GRU directions of one bidirectional layer.
pub struct BiGruParams {
    pub fwd: GruCellParams,
    pub bwd: GruCellParams,
}

impl BiGruParams {
    pub fn new(prefix: &str, input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Self {
        BiGruParams {
            fwd: GruCellParams::new(&format!("{prefix}.fwd"), input_size, hidden_size, rng),
            bwd: GruCellParams::new(&format!("{prefix}.bwd"), input_size, hidden_size, rng),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.fwd.parameters();
        p.extend(self.bwd.parameters());
        p
    }
}

fn gru_run(
    tape: &Tape,
    seq: &Tensor,
    span: &[usize],
    params: &GruCellParams,
) -> Result<Vec<Tensor>> {
    let h0 = tape.constant(1, params.hidden_size, vec![0.0; params.hidden_size]);
    let mut h = h0;
    let mut out = Vec::with_capacity(span.len());
    for &t in span {
        let x_t = seq.slice_rows(t, t + 1)?;
        h = gru_cell_step(tape, &x_t, &h, params)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Bidirectional GRU over the first `mask_len` positions. Output is
/// `[T x 2*hidden]` with forward and backward halves concatenated per
/// position; rows at and past `mask_len` are zero.
pub fn bigru_forward(
    tape: &Tape,
    seq: &Tensor,
    mask_len: usize,
    params: &BiGruParams,
) -> Result<Tensor> {
    let (t_len, _) = seq.shape();
    let width = 2 * params.fwd.hidden_size;
    let len = mask_len.min(t_len);
    if len == 0 {
        return Ok(tape.constant(t_len, width, vec![0.0; t_len * width]));
    }
    let fwd_span: Vec<usize> = (0..len).collect();
    let bwd_span: Vec<usize> = (0..len).rev().collect();
    let fwd = gru_run(tape, seq, &fwd_span, &params.fwd)?;
    let bwd = gru_run(tape, seq, &bwd_span, &params.bwd)?;
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        // bwd was produced right-to-left; bwd[len-1-t] is position t.
        rows.push(Tensor::concat_cols(&[fwd[t].clone(), bwd[len - 1 - t].clone()])?);
    }
    let packed = Tensor::concat_rows(&rows)?;
    if len < t_len {
        Ok(packed.pad_rows(t_len)?)
    } else {
        Ok(packed)
    }
}

/// Per-head query/key/value projections plus the output projection.
pub struct MultiHeadAttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Parameter,
    pub d_model: usize,
}

pub struct HeadParams {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
}

impl MultiHeadAttentionParams {
    pub fn new(prefix: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(LayerError::BadHeadCount(d_model, n_heads));
        }
        let d_k = d_model / n_heads;
        let scale = 1.0 / (d_model as f64).sqrt();
        let heads = (0..n_heads)
            .map(|h| HeadParams {
                w_q: Parameter::randn(&format!("{prefix}.h{h}.w_q"), d_model, d_k, scale, rng),
                w_k: Parameter::randn(&format!("{prefix}.h{h}.w_k"), d_model, d_k, scale, rng),
                w_v: Parameter::randn(&format!("{prefix}.h{h}.w_v"), d_model, d_k, scale, rng),
            })
            .collect();
        let w_o = Parameter::randn(&format!("{prefix}.w_o"), d_model, d_model, scale, rng);
        Ok(MultiHeadAttentionParams { heads, w_o, d_model })
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut p = Vec::new();
        for h in &self.heads {
            p.push(h.w_q.clone());
            p.push(h.w_k.clone());
            p.push(h.w_v.clone());
        }
        p.push(self.w_o.clone());
        p
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.len()
    }
}

/// Multi-head scaled-dot-product self-attention over the first `mask_len`
/// positions. Masked positions contribute nothing as keys and emit zero
/// rows. Also returns the per-head attention weights (row-softmax matrices
/// over the unmasked span) for inspection.
pub fn multi_head_attention_with_weights(
    tape: &Tape,
    h: &Tensor,
    mask_len: usize,
    params: &MultiHeadAttentionParams,
) -> Result<(Tensor, Vec<Tensor>)> {
    if mask_len == 0 {
        return Err(LayerError::MaskEmpty);
    }
    let (t_len, d) = h.shape();
    debug_assert_eq!(d, params.d_model);
    let len = mask_len.min(t_len);
    let hm = if len < t_len { h.slice_rows(0, len)? } else { h.clone() };
    let inv_sqrt_dk = 1.0 / (params.d_k() as f64).sqrt();
    let mut head_outs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = hm.matmul(&tape.param(&head.w_q))?;
        let k = hm.matmul(&tape.param(&head.w_k))?;
        let v = hm.matmul(&tape.param(&head.w_v))?;
        let scores = q.matmul(&k.transpose())?.affine(inv_sqrt_dk, 0.0);
        let attn = scores.row_softmax();
        head_outs.push(attn.matmul(&v)?);
        weights.push(attn);
    }
    let concat = Tensor::concat_cols(&head_outs)?;
    let out = concat.matmul(&tape.param(&params.w_o))?;
    let out = if len < t_len { out.pad_rows(t_len)? } else { out };
    Ok((out, weights))
}

pub fn multi_head_attention(
    tape: &Tape,
    h: &Tensor,
    mask_len: usize,
    params: &MultiHeadAttentionParams,
) -> Result<Tensor> {
    Ok(multi_head_attention_with_weights(tape, h, mask_len, params)?.0)
}

/// Masked mean pooling: arithmetic mean of rows `0..mask_len`.
pub fn attention_pool(h_attn: &Tensor, mask_len: usize) -> Result<Tensor> {
    if mask_len == 0 {
        return Err(LayerError::MaskEmpty);
    }
    let (t_len, _) = h_attn.shape();
    let len = mask_len.min(t_len);
    let sliced = if len < t_len { h_attn.slice_rows(0, len)? } else { h_attn.clone() };
    Ok(sliced.mean_rows())
}

/// Dense softmax head.
pub struct DenseParams {
    pub w: Parameter,
    pub b: Parameter,
}

impl DenseParams {
    pub fn new(prefix: &str, input: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        DenseParams {
            w: Parameter::randn(&format!("{prefix}.w"), input, n_classes, scale, rng),
            b: Parameter::zeros(&format!("{prefix}.b"), 1, n_classes),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// `softmax(v W + b)`; rows sum to 1.
pub fn classify_head(tape: &Tape, v: &Tensor, head: &DenseParams) -> Result<Tensor> {
    let logits = v.matmul(&tape.param(&head.w))?.add(&tape.param(&head.b))?;
    Ok(logits.row_softmax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn embed_gather_and_adjoint() {
        let mut r = rng(0);
        let table = EmbeddingTable::new(8, 3, &mut r);
        let tape = Tape::new();
        let e = embed_lookup(&tape, &[4, 4], &table).unwrap();
        let v = e.value();
        assert_eq!(&v[..3], &v[3..]);
        // gradient of sum of output w.r.t. row 4 is 2*ones
        // loss = sum of all output entries: mean over 2 rows, times 2, summed over cols
        let loss = e.mean_rows().matmul(&tape.constant(3, 1, vec![1.0; 3])).unwrap();
        let loss = loss.affine(2.0, 0.0);
        loss.backward().unwrap();
        tape.flush_param_grads();
        let g = table.table.grad();
        for j in 0..3 {
            assert!((g[4 * 3 + j] - 2.0).abs() < 1e-12, "g={}", g[4 * 3 + j]);
        }
    }

    #[test]
    fn embed_id_out_of_range() {
        let mut r = rng(0);
        let table = EmbeddingTable::new(4, 2, &mut r);
        let tape = Tape::new();
        assert!(matches!(
            embed_lookup(&tape, &[7], &table),
            Err(LayerError::IdOutOfRange(7, 4))
        ));
    }

    #[test]
    fn embed_init_mean_near_zero() {
        let mut r = rng(42);
        let table = EmbeddingTable::new(100, 50, &mut r);
        let vals = table.table.values();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        // sample mean of N(0,1) within 3 sigma / sqrt(n)
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    }

    fn zero_gru(input: usize, hidden: usize) -> GruCellParams {
        let mut r = rng(0);
        let p = GruCellParams::new("g", input, hidden, &mut r);
        for param in p.parameters() {
            param.set_values(&vec![0.0; param.len()]);
        }
        p
    }

    #[test]
    fn gru_step_zero_params() {
        // all-zero parameters: z = 0.5, h~ = 0, so h' = 0.5 * h_prev
        let p = zero_gru(1, 1);
        let tape = Tape::new();
        let x = tape.constant(1, 1, vec![2.0]);
        let h = tape.constant(1, 1, vec![1.0]);
        let out = gru_cell_step(&tape, &x, &h, &p).unwrap();
        assert!((out.value()[0] - 0.5).abs() < 1e-15);

        let h0 = tape.constant(1, 1, vec![0.0]);
        let out0 = gru_cell_step(&tape, &x, &h0, &p).unwrap();
        assert_eq!(out0.value(), vec![0.0]);
    }

    #[test]
    fn gru_step_matches_scalar_reference() {
        // Independent elementwise recomputation of one step.
        let mut r = rng(3);
        let p = GruCellParams::new("g", 2, 2, &mut r);
        let x = [0.3, -0.7];
        let h = [0.2, 0.5];
        let tape = Tape::new();
        let xt = tape.constant(1, 2, x.to_vec());
        let hp = tape.constant(1, 2, h.to_vec());
        let out = gru_cell_step(&tape, &xt, &hp, &p).unwrap().value();

        let mv = |w: &Parameter, v: &[f64]| -> Vec<f64> {
            let (rows, cols) = w.shape();
            let wv = w.values();
            (0..cols)
                .map(|j| (0..rows).map(|i| v[i] * wv[i * cols + j]).sum())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wzx = mv(&p.w_z, &x);
        let uzh = mv(&p.u_z, &h);
        let wrx = mv(&p.w_r, &x);
        let urh = mv(&p.u_r, &h);
        let whx = mv(&p.w_h, &x);
        for j in 0..2 {
            let z = sig(wzx[j] + uzh[j]);
            let rg = sig(wrx[j] + urh[j]);
            let _ = rg;
            let r_vec: Vec<f64> = (0..2).map(|k| sig(wrx[k] + urh[k]) * h[k]).collect();
            let uh = mv(&p.u_h, &r_vec);
            let cand = (whx[j] + uh[j]).tanh();
            let expect = (1.0 - z) * h[j] + z * cand;
            assert!((out[j] - expect).abs() < 1e-12, "{} vs {}", out[j], expect);
        }
    }

    #[test]
    fn bigru_output_width_and_padding() {
        let mut r = rng(1);
        let p = BiGruParams::new("l1", 3, 4, &mut r);
        let tape = Tape::new();
        let seq = tape.constant(5, 3, (0..15).map(|i| 0.1 * i as f64).collect());
        let out = bigru_forward(&tape, &seq, 3, &p).unwrap();
        assert_eq!(out.shape(), (5, 8));
        let v = out.value();
        assert!(v[3 * 8..].iter().all(|&x| x == 0.0));
        assert!(v[..3 * 8].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn bigru_zero_params_zero_output() {
        let fwd = zero_gru(2, 3);
        let bwd = zero_gru(2, 3);
        let p = BiGruParams { fwd, bwd };
        let tape = Tape::new();
        let seq = tape.constant(4, 2, vec![1.0; 8]);
        let out = bigru_forward(&tape, &seq, 4, &p).unwrap();
        assert!(out.value().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bigru_direction_symmetry() {
        // With shared parameters in both directions, running the reversed
        // sequence swaps the roles of the two halves.
        let mut r = rng(7);
        let cell = GruCellParams::new("c", 2, 3, &mut r);
        let clone_cell = || {
            let mut c = zero_gru(2, 3);
            let src = cell.parameters();
            let dst = c.parameters();
            for (d, s) in dst.iter().zip(src.iter()) {
                d.set_values(&s.values());
            }
            c.hidden_size = 3;
            c
        };
        let p = BiGruParams { fwd: clone_cell(), bwd: clone_cell() };
        let t_len = 3;
        let xs = vec![0.1, -0.2, 0.5, 0.3, -0.4, 0.2];
        let rev: Vec<f64> = xs
            .chunks(2)
            .rev()
            .flat_map(|c| c.iter().cloned())
            .collect();
        let tape = Tape::new();
        let seq = tape.constant(t_len, 2, xs);
        let seq_rev = tape.constant(t_len, 2, rev);
        let out = bigru_forward(&tape, &seq, t_len, &p).unwrap().value();
        let out_rev = bigru_forward(&tape, &seq_rev, t_len, &p).unwrap().value();
        // fwd-half(reversed)[t] == bwd-half(original)[T-1-t]
        for t in 0..t_len {
            for j in 0..3 {
                let fwd_rev = out_rev[t * 6 + j];
                let bwd_orig = out[(t_len - 1 - t) * 6 + 3 + j];
                assert!((fwd_rev - bwd_orig).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_uniform_when_keys_identical() {
        let mut r = rng(5);
        let p = MultiHeadAttentionParams::new("a", 4, 2, &mut r).unwrap();
        let tape = Tape::new();
        // constant rows -> identical keys -> uniform weights -> head output
        // equals the (identical) value rows; check weights directly.
        let h = tape.constant(3, 4, vec![0.3, -0.1, 0.2, 0.7].repeat(3));
        let (_, weights) = multi_head_attention_with_weights(&tape, &h, 3, &p).unwrap();
        for w in weights {
            for v in w.value() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_mask_len_one() {
        let mut r = rng(6);
        let p = MultiHeadAttentionParams::new("a", 4, 2, &mut r).unwrap();
        let tape = Tape::new();
        let h = tape.constant(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let (out, weights) = multi_head_attention_with_weights(&tape, &h, 1, &p).unwrap();
        for w in weights {
            assert_eq!(w.value(), vec![1.0]);
        }
        // masked rows emit zeros
        let v = out.value();
        assert!(v[4..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_invariance() {
        let mut r = rng(8);
        let p = MultiHeadAttentionParams::new("a", 6, 3, &mut r).unwrap();
        let tape = Tape::new();
        let mut vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = tape.constant(4, 6, vals.clone());
        let (out, weights) = multi_head_attention_with_weights(&tape, &h, 2, &p).unwrap();
        for w in &weights {
            let wv = w.value();
            for i in 0..2 {
                let s: f64 = wv[i * 2..(i + 1) * 2].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // perturb masked rows: output unchanged
        for v in vals.iter_mut().skip(2 * 6) {
            *v += 100.0;
        }
        let h2 = tape.constant(4, 6, vals);
        let (out2, _) = multi_head_attention_with_weights(&tape, &h2, 2, &p).unwrap();
        assert_eq!(out.value(), out2.value());
    }

    #[test]
    fn attention_empty_mask_rejected() {
        let mut r = rng(9);
        let p = MultiHeadAttentionParams::new("a", 4, 2, &mut r).unwrap();
        let tape = Tape::new();
        let h = tape.constant(2, 4, vec![0.0; 8]);
        assert!(matches!(
            multi_head_attention(&tape, &h, 0, &p),
            Err(LayerError::MaskEmpty)
        ));
    }

    #[test]
    fn pool_masked_mean() {
        let tape = Tape::new();
        let h = tape.constant(3, 2, vec![1.0, 2.0, 1.0, 2.0, 99.0, 99.0]);
        let p1 = attention_pool(&h, 1).unwrap();
        assert_eq!(p1.value(), vec![1.0, 2.0]);
        let p2 = attention_pool(&h, 2).unwrap();
        assert_eq!(p2.value(), vec![1.0, 2.0]);
        assert!(matches!(attention_pool(&h, 0), Err(LayerError::MaskEmpty)));
    }

    #[test]
    fn classify_head_properties() {
        let mut r = rng(10);
        let head = DenseParams::new("h", 4, 3, &mut r);
        for p in head.parameters() {
            p.set_values(&vec![0.0; p.len()]);
        }
        let tape = Tape::new();
        let v = tape.constant(1, 4, vec![0.5, -1.0, 2.0, 0.1]);
        let probs = classify_head(&tape, &v, &head).unwrap();
        let pv = probs.value();
        assert_eq!(pv.len(), 3);
        for p in &pv {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::new();
        let logits = tape.constant(1, 3, vec![0.2, 1.4, -0.9]);
        let shifted = logits.affine(1.0, 5.0);
        let a = logits.row_softmax().value();
        let b = shifted.row_softmax().value();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
