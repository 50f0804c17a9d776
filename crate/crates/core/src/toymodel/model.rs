//! Decoder-only transformer with the residual update
//! `h' = h + FFN(h + MHSA(h))`, where `FFN(x) = Σ_i relu(W_K x)_i v_i`.
//!
//! With `pre_norm` the block becomes `h + FFN(LN(h + MHSA(LN(h))))`, LN
//! without affine parameters. There is no final norm: logits are
//! `unembed · h^L`. All parameters live in one flat buffer so the optimizer
//! and the serializer can treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub pre_norm: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 4,
            ffn: 64,
            vocab: super::task::VOCAB_SIZE,
            max_seq: 64,
            pre_norm: false,
            seed: 0,
        }
    }
}

impl ToyConfig {
    /// Default dimensions with pre-norm, as used for training runs.
    pub fn training() -> Self {
        Self {
            pre_norm: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.hidden, self.heads, self.ffn, self.vocab, self.max_seq];
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("all dimensions must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of every named tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>, usize)>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ToyConfig) -> Self {
        let (v, d, m) = (cfg.vocab, cfg.hidden, cfg.ffn);
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, dims: Vec<usize>| {
            let n: usize = dims.iter().product();
            entries.push((name, dims, total));
            total += n;
        };
        push("embedding".into(), vec![v, d]);
        push("position".into(), vec![cfg.max_seq, d]);
        for l in 0..cfg.layers {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                push(format!("blocks.{l}.{w}"), vec![d, d]);
            }
            push(format!("blocks.{l}.ffn_key"), vec![m, d]);
            push(format!("blocks.{l}.ffn_value"), vec![m, d]);
        }
        push("unembed".into(), vec![v, d]);
        Self { entries, total }
    }
}

/// Offsets of one block's matrices.
#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    fk: usize,
    fv: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    embed: usize,
    pos: usize,
    unembed: usize,
}

impl ToyConfig {
    fn offsets(&self) -> Offsets {
        let (v, d) = (self.vocab, self.hidden);
        let embed = 0;
        let pos = v * d;
        let blocks = pos + self.max_seq * d;
        Offsets {
            embed,
            pos,
            unembed: blocks + self.layers * self.block_size(),
        }
    }

    fn block_size(&self) -> usize {
        4 * self.hidden * self.hidden + 2 * self.ffn * self.hidden
    }

    fn block(&self, l: usize) -> BlockOffsets {
        let d2 = self.hidden * self.hidden;
        let md = self.ffn * self.hidden;
        let base = self.vocab * self.hidden + self.max_seq * self.hidden + l * self.block_size();
        BlockOffsets {
            wq: base,
            wk: base + d2,
            wv: base + 2 * d2,
            wo: base + 3 * d2,
            fk: base + 4 * d2,
            fv: base + 4 * d2 + md,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub cfg: ToyConfig,
    pub data: Vec<f32>,
    /// Teacher-forced answer accuracy on the training questions, once trained.
    pub train_accuracy: Option<f64>,
}

impl ToyParams {
    /// Seeded uniform initialization with variance-preserving scales.
    pub fn init(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut data = vec![0.0f32; layout.total];
        let d = cfg.hidden as f32;
        let m = cfg.ffn as f32;
        let depth = (2.0 * cfg.layers as f32).sqrt();
        for (name, dims, off) in &layout.entries {
            let std = if name == "embedding" || name == "unembed" {
                1.0 / d.sqrt()
            } else if name == "position" {
                0.5 / d.sqrt()
            } else if name.ends_with("w_o") {
                1.0 / (d.sqrt() * depth)
            } else if name.ends_with("ffn_value") {
                1.0 / (m.sqrt() * depth)
            } else {
                1.0 / d.sqrt()
            };
            let a = std * 3f32.sqrt();
            let n: usize = dims.iter().product();
            for x in &mut data[*off..off + n] {
                *x = rng.random_range(-a..a);
            }
        }
        Ok(Self {
            cfg,
            data,
            train_accuracy: None,
        })
    }

    pub fn zeros(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            data: vec![0.0; cfg.layout().total],
            train_accuracy: None,
        })
    }

    /// Sets every block matrix to zero, keeping embeddings and unembedding.
    pub fn zero_blocks(&mut self) {
        let o = self.cfg.offsets();
        let start = self.cfg.block(0).wq;
        self.data[start..o.unembed].fill(0.0);
    }

    pub fn tensor(&self, name: &str) -> Option<(Vec<usize>, &[f32])> {
        let layout = self.cfg.layout();
        let (_, dims, off) = layout.entries.into_iter().find(|(n, _, _)| n == name)?;
        let n: usize = dims.iter().product();
        Some((dims, &self.data[off..off + n]))
    }

    pub fn unembed(&self) -> &[f32] {
        let o = self.cfg.offsets();
        &self.data[o.unembed..o.unembed + self.cfg.vocab * self.cfg.hidden]
    }

    /// `[d_m × d]` value matrix of block `l`; row `i` is value vector `i`.
    pub fn ffn_value(&self, l: usize) -> &[f32] {
        let b = self.cfg.block(l);
        &self.data[b.fv..b.fv + self.cfg.ffn * self.cfg.hidden]
    }

    pub fn ffn_value_mut(&mut self, l: usize) -> &mut [f32] {
        let b = self.cfg.block(l);
        &mut self.data[b.fv..b.fv + self.cfg.ffn * self.cfg.hidden]
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::InvalidInput(format!("token {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        Ok(())
    }
}

/// `out[t] = W x[t]` for `W` of shape `[rows × cols]`.
fn matmul_rows(w: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    for (xt, ot) in x.chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
        for (o, wr) in ot.iter_mut().zip(w.chunks_exact(cols)) {
            *o = dot(wr, xt);
        }
    }
}

/// `out[t] += Wᵀ g[t]` for `W` of shape `[rows × cols]`.
fn matmul_rows_t_acc(w: &[f32], rows: usize, cols: usize, g: &[f32], out: &mut [f32]) {
    for (gt, ot) in g.chunks_exact(rows).zip(out.chunks_exact_mut(cols)) {
        for (&gi, wr) in gt.iter().zip(w.chunks_exact(cols)) {
            if gi != 0.0 {
                axpy(gi, wr, ot);
            }
        }
    }
}

/// `dW += Σ_t g[t] ⊗ x[t]`.
fn outer_acc(dw: &mut [f32], rows: usize, cols: usize, g: &[f32], x: &[f32]) {
    for (gt, xt) in g.chunks_exact(rows).zip(x.chunks_exact(cols)) {
        for (&gi, dr) in gt.iter().zip(dw.chunks_exact_mut(cols)) {
            if gi != 0.0 {
                axpy(gi, xt, dr);
            }
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn layer_norm(x: &[f32], d: usize, out: &mut [f32], rstd: &mut [f32]) {
    for ((xt, ot), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let mean = xt.iter().sum::<f32>() / d as f32;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        *r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in ot.iter_mut().zip(xt) {
            *o = (v - mean) * *r;
        }
    }
}

/// Adds the input gradient of a layer norm to `dx`, given its output `y`.
fn layer_norm_backward(dy: &[f32], y: &[f32], rstd: &[f32], d: usize, dx: &mut [f32]) {
    for (((dyt, yt), &r), dxt) in dy
        .chunks_exact(d)
        .zip(y.chunks_exact(d))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mean_dy = dyt.iter().sum::<f32>() / d as f32;
        let mean_dyy = dot(dyt, yt) / d as f32;
        for ((o, &g), &yv) in dxt.iter_mut().zip(dyt).zip(yt) {
            *o += r * (g - mean_dy - yv * mean_dyy);
        }
    }
}

/// Activations of one block, kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockCache {
    /// Attention input (`h` or `LN(h)`).
    x: Vec<f32>,
    x_rstd: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[H × T × T]`, zero above the diagonal.
    probs: Vec<f32>,
    attn: Vec<f32>,
    /// FFN input (`h + MHSA` or its LN).
    y: Vec<f32>,
    y_rstd: Vec<f32>,
    z: Vec<f32>,
}

/// Forward activations of a whole sequence.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    /// `L + 1` residual streams, each `[T × d]`.
    pub hidden: Vec<Vec<f32>>,
    blocks: Vec<BlockCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Attention row of `pos` in block `l`, head `h` (length `pos + 1`).
    pub fn attention_row(&self, l: usize, h: usize, pos: usize) -> &[f32] {
        let t = self.tokens.len();
        let start = (h * t + pos) * t;
        &self.blocks[l].probs[start..start + pos + 1]
    }

    pub fn final_hidden(&self, pos: usize, d: usize) -> &[f32] {
        &self.hidden.last().expect("at least the embedding")[pos * d..(pos + 1) * d]
    }
}

/// Full forward pass.
pub fn forward(params: &ToyParams, tokens: &[u32]) -> Result<ForwardCache> {
    params.check_tokens(tokens)?;
    let cfg = &params.cfg;
    let (d, t_len, heads, dh, m) = (cfg.hidden, tokens.len(), cfg.heads, cfg.head_dim(), cfg.ffn);
    let p = &params.data;
    let o = cfg.offsets();
    let mut h = vec![0.0f32; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &p[o.embed + tok as usize * d..][..d];
        let ps = &p[o.pos + t * d..][..d];
        for ((hv, ev), pv) in h[t * d..(t + 1) * d].iter_mut().zip(e).zip(ps) {
            *hv = ev + pv;
        }
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut hidden = vec![h.clone()];
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let b = cfg.block(l);
        let (x, x_rstd) = if cfg.pre_norm {
            let mut x = vec![0.0; t_len * d];
            let mut r = vec![0.0; t_len];
            layer_norm(&h, d, &mut x, &mut r);
            (x, r)
        } else {
            (h.clone(), Vec::new())
        };
        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        matmul_rows(&p[b.wq..b.wq + d * d], d, d, &x, &mut q);
        matmul_rows(&p[b.wk..b.wk + d * d], d, d, &x, &mut k);
        matmul_rows(&p[b.wv..b.wv + d * d], d, d, &x, &mut v);
        let mut probs = vec![0.0f32; heads * t_len * t_len];
        let mut attn = vec![0.0f32; t_len * d];
        for hd in 0..heads {
            let c = hd * dh;
            for i in 0..t_len {
                let row = &mut probs[(hd * t_len + i) * t_len..][..t_len];
                let qi = &q[i * d + c..i * d + c + dh];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    row[j] = dot(qi, &k[j * d + c..j * d + c + dh]) * scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for rj in row[..=i].iter_mut() {
                    *rj = (*rj - max).exp();
                    sum += *rj;
                }
                let out = &mut attn[i * d + c..i * d + c + dh];
                for j in 0..=i {
                    row[j] /= sum;
                    axpy(row[j], &v[j * d + c..j * d + c + dh], out);
                }
            }
        }
        let mut u = h.clone();
        let mut mhsa = vec![0.0; t_len * d];
        matmul_rows(&p[b.wo..b.wo + d * d], d, d, &attn, &mut mhsa);
        for (ui, mi) in u.iter_mut().zip(&mhsa) {
            *ui += mi;
        }
        let (y, y_rstd) = if cfg.pre_norm {
            let mut y = vec![0.0; t_len * d];
            let mut r = vec![0.0; t_len];
            layer_norm(&u, d, &mut y, &mut r);
            (y, r)
        } else {
            (u, Vec::new())
        };
        let mut z = vec![0.0; t_len * m];
        matmul_rows(&p[b.fk..b.fk + m * d], m, d, &y, &mut z);
        let fv = &p[b.fv..b.fv + m * d];
        for t in 0..t_len {
            let ht = &mut h[t * d..(t + 1) * d];
            for (i, &zi) in z[t * m..(t + 1) * m].iter().enumerate() {
                if zi > 0.0 {
                    axpy(zi, &fv[i * d..(i + 1) * d], ht);
                }
            }
        }
        hidden.push(h.clone());
        blocks.push(BlockCache {
            x,
            x_rstd,
            q,
            k,
            v,
            probs,
            attn,
            y,
            y_rstd,
            z,
        });
    }
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        hidden,
        blocks,
    })
}

/// Logits `unembed · h^L` at position `pos`.
pub fn logits_at(params: &ToyParams, cache: &ForwardCache, pos: usize) -> Vec<f32> {
    let d = params.cfg.hidden;
    let h = cache.final_hidden(pos, d);
    params.unembed().chunks_exact(d).map(|row| dot(row, h)).collect()
}

/// Softmax cross-entropy at `targets` (position, token), summed, plus the
/// gradient of `weight · sum` accumulated into `grad`.
pub fn loss_and_backward(
    params: &ToyParams,
    cache: &ForwardCache,
    targets: &[(usize, u32)],
    weight: f32,
    grad: &mut [f32],
) -> f64 {
    let cfg = &params.cfg;
    let (d, t_len, heads, dh, m) = (cfg.hidden, cache.len(), cfg.heads, cfg.head_dim(), cfg.ffn);
    let p = &params.data;
    let o = cfg.offsets();
    let mut dh_buf = vec![0.0f32; t_len * d];
    let mut loss = 0.0f64;
    let unembed = params.unembed();
    for &(pos, target) in targets {
        let logits = logits_at(params, cache, pos);
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (logits[target as usize] - max) as f64;
        let h_last = cache.final_hidden(pos, d);
        for (tok, &e) in exps.iter().enumerate() {
            let g = ((e / sum) as f32 - (tok == target as usize) as u8 as f32) * weight;
            axpy(g, h_last, &mut grad[o.unembed + tok * d..o.unembed + (tok + 1) * d]);
            axpy(g, &unembed[tok * d..(tok + 1) * d], &mut dh_buf[pos * d..(pos + 1) * d]);
        }
    }
    let scale = 1.0 / (dh as f32).sqrt();
    for l in (0..cfg.layers).rev() {
        let b = cfg.block(l);
        let c = &cache.blocks[l];
        // FFN branch: h_out = h_in + fvᵀ relu(fk y).
        let mut dz = vec![0.0f32; t_len * m];
        {
            let fv = &p[b.fv..b.fv + m * d];
            for t in 0..t_len {
                let g = &dh_buf[t * d..(t + 1) * d];
                for i in 0..m {
                    let zi = c.z[t * m + i];
                    if zi > 0.0 {
                        axpy(zi, g, &mut grad[b.fv + i * d..b.fv + (i + 1) * d]);
                        dz[t * m + i] = dot(&fv[i * d..(i + 1) * d], g);
                    }
                }
            }
        }
        outer_acc(&mut grad[b.fk..b.fk + m * d], m, d, &dz, &c.y);
        let mut dy = vec![0.0f32; t_len * d];
        matmul_rows_t_acc(&p[b.fk..b.fk + m * d], m, d, &dz, &mut dy);
        let du = if cfg.pre_norm {
            let mut du = vec![0.0; t_len * d];
            layer_norm_backward(&dy, &c.y, &c.y_rstd, d, &mut du);
            du
        } else {
            dy
        };
        // u = h_in + W_O attn.
        for (a, g) in dh_buf.iter_mut().zip(&du) {
            *a += g;
        }
        outer_acc(&mut grad[b.wo..b.wo + d * d], d, d, &du, &c.attn);
        let mut dattn = vec![0.0f32; t_len * d];
        matmul_rows_t_acc(&p[b.wo..b.wo + d * d], d, d, &du, &mut dattn);
        let mut dq = vec![0.0f32; t_len * d];
        let mut dk = vec![0.0f32; t_len * d];
        let mut dv = vec![0.0f32; t_len * d];
        let mut dp = vec![0.0f32; t_len];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..t_len {
                let row = &c.probs[(hd * t_len + i) * t_len..][..t_len];
                let da = &dattn[i * d + off..i * d + off + dh];
                let mut inner = 0.0;
                for j in 0..=i {
                    dp[j] = dot(da, &c.v[j * d + off..j * d + off + dh]);
                    inner += row[j] * dp[j];
                    axpy(row[j], da, &mut dv[j * d + off..j * d + off + dh]);
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        axpy(ds, &c.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        axpy(ds, &c.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        outer_acc(&mut grad[b.wq..b.wq + d * d], d, d, &dq, &c.x);
        outer_acc(&mut grad[b.wk..b.wk + d * d], d, d, &dk, &c.x);
        outer_acc(&mut grad[b.wv..b.wv + d * d], d, d, &dv, &c.x);
        let mut dx = vec![0.0f32; t_len * d];
        matmul_rows_t_acc(&p[b.wq..b.wq + d * d], d, d, &dq, &mut dx);
        matmul_rows_t_acc(&p[b.wk..b.wk + d * d], d, d, &dk, &mut dx);
        matmul_rows_t_acc(&p[b.wv..b.wv + d * d], d, d, &dv, &mut dx);
        if cfg.pre_norm {
            layer_norm_backward(&dx, &c.x, &c.x_rstd, d, &mut dh_buf);
        } else {
            for (a, g) in dh_buf.iter_mut().zip(&dx) {
                *a += g;
            }
        }
    }
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let g = &dh_buf[t * d..(t + 1) * d];
        axpy(1.0, g, &mut grad[o.embed + tok as usize * d..o.embed + (tok as usize + 1) * d]);
        axpy(1.0, g, &mut grad[o.pos + t * d..o.pos + (t + 1) * d]);
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pre_norm: bool) -> ToyConfig {
        ToyConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab: 7,
            max_seq: 8,
            pre_norm,
            seed: 3,
        }
    }

    /// Straight-line f64 reference: every sum written as a loop over scalars.
    fn reference_logits(p: &ToyParams, tokens: &[u32]) -> Vec<f64> {
        let cfg = p.cfg;
        let (d, m, nh) = (cfg.hidden, cfg.ffn, cfg.heads);
        let dh = d / nh;
        let layout = cfg.layout();
        let get = |name: &str| -> Vec<f64> {
            let (_, _, off) = layout.entries.iter().find(|(n, _, _)| n == name).unwrap();
            let (_, dims, _) = layout.entries.iter().find(|(n, _, _)| n == name).unwrap();
            let n: usize = dims.iter().product();
            p.data[*off..off + n].iter().map(|&v| v as f64).collect()
        };
        let ln = |x: &Vec<f64>| -> Vec<f64> {
            let mut mean = 0.0;
            for v in x {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for v in x {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            x.iter().map(|v| (v - mean) / (var + LN_EPS as f64).sqrt()).collect()
        };
        let emb = get("embedding");
        let pos = get("position");
        let t_len = tokens.len();
        let mut h: Vec<Vec<f64>> = (0..t_len)
            .map(|t| (0..d).map(|j| emb[tokens[t] as usize * d + j] + pos[t * d + j]).collect())
            .collect();
        for l in 0..cfg.layers {
            let wq = get(&format!("blocks.{l}.w_q"));
            let wk = get(&format!("blocks.{l}.w_k"));
            let wv = get(&format!("blocks.{l}.w_v"));
            let wo = get(&format!("blocks.{l}.w_o"));
            let fk = get(&format!("blocks.{l}.ffn_key"));
            let fv = get(&format!("blocks.{l}.ffn_value"));
            let x: Vec<Vec<f64>> = if cfg.pre_norm { h.iter().map(&ln).collect() } else { h.clone() };
            let lin = |w: &Vec<f64>, v: &Vec<f64>, rows: usize| -> Vec<f64> {
                (0..rows).map(|i| (0..v.len()).map(|j| w[i * v.len() + j] * v[j]).sum()).collect()
            };
            let q: Vec<Vec<f64>> = x.iter().map(|v| lin(&wq, v, d)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|v| lin(&wk, v, d)).collect();
            let vv: Vec<Vec<f64>> = x.iter().map(|v| lin(&wv, v, d)).collect();
            let mut next = Vec::new();
            for i in 0..t_len {
                let mut concat = vec![0.0; d];
                for hd in 0..nh {
                    let mut s = Vec::new();
                    for j in 0..=i {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += q[i][hd * dh + c] * k[j][hd * dh + c];
                        }
                        s.push(acc / (dh as f64).sqrt());
                    }
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..=i {
                        let a = (s[j] - mx).exp() / z;
                        for c in 0..dh {
                            concat[hd * dh + c] += a * vv[j][hd * dh + c];
                        }
                    }
                }
                let mhsa = lin(&wo, &concat, d);
                let u: Vec<f64> = (0..d).map(|j| h[i][j] + mhsa[j]).collect();
                let y = if cfg.pre_norm { ln(&u) } else { u };
                let mut out = h[i].clone();
                for r in 0..m {
                    let mut a = 0.0;
                    for j in 0..d {
                        a += fk[r * d + j] * y[j];
                    }
                    let a = a.max(0.0);
                    for j in 0..d {
                        out[j] += a * fv[r * d + j];
                    }
                }
                next.push(out);
            }
            h = next;
        }
        let un = get("unembed");
        let last = &h[t_len - 1];
        (0..cfg.vocab).map(|r| (0..d).map(|j| un[r * d + j] * last[j]).sum()).collect()
    }

    #[test]
    fn matches_scalar_reference() {
        for pre_norm in [false, true] {
            let p = ToyParams::init(small(pre_norm)).unwrap();
            let tokens = [1, 4, 2];
            let cache = forward(&p, &tokens).unwrap();
            let got = logits_at(&p, &cache, 2);
            let want = reference_logits(&p, &tokens);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "pre_norm={pre_norm}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_blocks_keep_residual() {
        let mut p = ToyParams::init(small(false)).unwrap();
        p.zero_blocks();
        let cache = forward(&p, &[0, 3, 5, 1]).unwrap();
        for h in &cache.hidden[1..] {
            assert_eq!(h, &cache.hidden[0]);
        }
    }

    #[test]
    fn attention_rows_normalized() {
        let p = ToyParams::init(small(true)).unwrap();
        let cache = forward(&p, &[0, 1, 2, 3, 4, 5]).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for pos in 0..6 {
                    let s: f32 = cache.attention_row(l, h, pos).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn causal() {
        let p = ToyParams::init(small(true)).unwrap();
        let a = forward(&p, &[0, 1, 2, 3, 4]).unwrap();
        let b = forward(&p, &[0, 1, 2, 6, 4]).unwrap();
        let d = p.cfg.hidden;
        for (ha, hb) in a.hidden.iter().zip(&b.hidden) {
            assert_eq!(ha[..3 * d], hb[..3 * d]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = ToyParams::init(small(false)).unwrap();
        assert!(forward(&p, &[0; 9]).is_err());
        assert!(forward(&p, &[7]).is_err());
        assert!(forward(&p, &[]).is_err());
        let bad = ToyConfig { hidden: 9, ..small(false) };
        assert!(ToyParams::init(bad).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for pre_norm in [false, true] {
            let p = ToyParams::init(small(pre_norm)).unwrap();
            let tokens = [0u32, 3, 5, 1, 2];
            let targets = [(2usize, 4u32), (4, 6)];
            let mut grad = vec![0.0f32; p.data.len()];
            let cache = forward(&p, &tokens).unwrap();
            loss_and_backward(&p, &cache, &targets, 1.0, &mut grad);
            let loss_of = |q: &ToyParams| {
                let c = forward(q, &tokens).unwrap();
                let mut scratch = vec![0.0f32; q.data.len()];
                loss_and_backward(q, &c, &targets, 1.0, &mut scratch)
            };
            // Every parameter group, a few coordinates each.
            let layout = p.cfg.layout();
            for (name, dims, off) in &layout.entries {
                let n: usize = dims.iter().product();
                for k in [0, n / 3, n - 1] {
                    let i = off + k;
                    if name == "position" && k >= tokens.len() * p.cfg.hidden {
                        continue;
                    }
                    // A ReLU kink inside the stencil spoils one step size but not all.
                    let g = grad[i] as f64;
                    let mut best = f64::INFINITY;
                    for h in [1e-3f32, 3e-4, 1e-4] {
                        let mut plus = p.clone();
                        plus.data[i] += h;
                        let mut minus = p.clone();
                        minus.data[i] -= h;
                        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
                        best = best.min((fd - g).abs() / fd.abs().max(g.abs()).max(1e-2));
                    }
                    assert!(best < 2e-2, "pre_norm={pre_norm} {name}[{k}]: analytic {g}, rel err {best}");
                }
            }
        }
    }
}
