use super::{ModelConfig, Params, Token, TokenSequence, VOCAB};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn tri(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Attention weights `[layer][head][query][key]`, stored lower-triangular:
/// entries with key > query are structurally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    /// Builds a tensor from `f(layer, head, query, key)` for key <= query.
    pub fn from_fn(
        n_layers: usize,
        n_heads: usize,
        seq_len: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut weights = Vec::with_capacity(n_layers * n_heads * tri(seq_len));
        for l in 0..n_layers {
            for h in 0..n_heads {
                for q in 0..seq_len {
                    for k in 0..=q {
                        weights.push(f(l, h, q, k));
                    }
                }
            }
        }
        Self {
            n_layers,
            n_heads,
            seq_len,
            weights,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn base(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_heads + head) * tri(self.seq_len)
    }

    /// Weights of one query row over keys `0..=query`.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let at = self.base(layer, head) + tri(query);
        &self.weights[at..at + query + 1]
    }

    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        if key > query {
            0.0
        } else {
            self.row(layer, head, query)[key]
        }
    }

    /// Keeps only `layers`, renumbered from zero.
    pub fn select_layers(&self, layers: std::ops::Range<usize>) -> Self {
        let per = self.n_heads * tri(self.seq_len);
        Self {
            n_layers: layers.len(),
            n_heads: self.n_heads,
            seq_len: self.seq_len,
            weights: self.weights[layers.start * per..layers.end * per].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Norm {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct LayerTape {
    x_in: Vec<f64>,
    ln1: Norm,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, lower-triangular softmax rows.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    ln2: Norm,
    b: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

#[derive(Debug, Clone)]
enum RowInput {
    Vocab(u16),
    Patch(Vec<f64>),
}

/// Activations of every processed row. Rows are appended one at a time, so
/// the tape doubles as the key/value cache during generation and holds
/// everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Tape {
    cfg: ModelConfig,
    len: usize,
    inputs: Vec<RowInput>,
    layers: Vec<LayerTape>,
    lnf: Norm,
    y: Vec<f64>,
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out_dim = b.len();
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

/// Accumulates gradients of `y = x W + b` given `dy`; adds `dy W^T` into `dx`.
fn affine_back(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let out_dim = dy.len();
    for (g, &d) in gb.iter_mut().zip(dy) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        let grow = &mut gw[i * out_dim..(i + 1) * out_dim];
        for (g, &d) in grow.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * out_dim..(i + 1) * out_dim];
            *dxi += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], tape: &mut Norm) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xh = (x[i] - mean) * rstd;
        tape.xhat.push(xh);
        out.push(g[i] * xh + b[i]);
    }
    tape.rstd.push(rstd);
    out
}

fn layer_norm_back(
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dy: &[f64],
    gg: &mut [f64],
    gb: &mut [f64],
    dx: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..xhat.len() {
        gg[i] += dy[i] * xhat[i];
        gb[i] += dy[i];
        let dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..xhat.len() {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn row(v: &[f64], t: usize, width: usize) -> &[f64] {
    &v[t * width..(t + 1) * width]
}

fn row_mut(v: &mut [f64], t: usize, width: usize) -> &mut [f64] {
    &mut v[t * width..(t + 1) * width]
}

impl Tape {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            cfg: config.clone(),
            len: 0,
            inputs: Vec::new(),
            layers: vec![
                LayerTape {
                    probs: vec![Vec::new(); config.n_heads],
                    ..Default::default()
                };
                config.n_layers
            ],
            lnf: Norm::default(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Runs every token of `seq`.
    pub fn run(params: &Params, seq: &TokenSequence) -> Result<Self> {
        let max = params.config.max_seq;
        if seq.len() > max {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max,
            });
        }
        let mut tape = Self::new(&params.config);
        for &tok in &seq.tokens {
            tape.push(params, tok, &seq.patches)?;
        }
        Ok(tape)
    }

    /// Appends one row, attending over all rows already on the tape.
    pub fn push(&mut self, params: &Params, token: Token, patches: &[Vec<f64>]) -> Result<()> {
        let cfg = &params.config;
        let lay = &params.layout;
        let d = cfg.d_model;
        let t = self.len;
        if t >= cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: t + 1,
                max: cfg.max_seq,
            });
        }
        let (input, mut x) = match token {
            Token::Vocab(id) => {
                let id = id as usize;
                assert!(id < VOCAB, "token id {id} outside vocabulary");
                (
                    RowInput::Vocab(id as u16),
                    params.slice(lay.tok_emb + id * d, d).to_vec(),
                )
            }
            Token::Patch(i) => {
                let patch = patches
                    .get(i as usize)
                    .ok_or_else(|| Error::Precondition(format!("patch {i} missing")))?;
                let emb = affine(
                    patch,
                    params.slice(lay.patch_w, cfg.patch_dim() * d),
                    params.slice(lay.patch_b, d),
                );
                (RowInput::Patch(patch.clone()), emb)
            }
        };
        for (xi, p) in x.iter_mut().zip(params.slice(lay.pos_emb + t * d, d)) {
            *xi += p;
        }
        self.inputs.push(input);

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for (l, off) in lay.layers.iter().enumerate() {
            let lt = &mut self.layers[l];
            lt.x_in.extend_from_slice(&x);
            let a = layer_norm(
                &x,
                params.slice(off.ln1_g, d),
                params.slice(off.ln1_b, d),
                &mut lt.ln1,
            );
            let q = affine(&a, params.slice(off.wq, d * d), params.slice(off.bq, d));
            let k = affine(&a, params.slice(off.wk, d * d), &vec![0.0; d]);
            let v = affine(&a, params.slice(off.wv, d * d), params.slice(off.bv, d));
            lt.a.extend_from_slice(&a);
            lt.k.extend_from_slice(&k);
            lt.v.extend_from_slice(&v);
            let mut ctx = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                let mut scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        let kj = &lt.k[j * d + h * hd..j * d + (h + 1) * hd];
                        qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in scores.iter_mut() {
                    *s /= z;
                }
                let ch = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &lt.v[j * d + h * hd..j * d + (h + 1) * hd];
                    for (c, &vv) in ch.iter_mut().zip(vj) {
                        *c += p * vv;
                    }
                }
                lt.probs[h].extend_from_slice(&scores);
            }
            lt.q.extend_from_slice(&q);
            let o = affine(&ctx, params.slice(off.wo, d * d), params.slice(off.bo, d));
            lt.ctx.extend_from_slice(&ctx);
            let hres: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let b = layer_norm(
                &hres,
                params.slice(off.ln2_g, d),
                params.slice(off.ln2_b, d),
                &mut lt.ln2,
            );
            let f_pre = affine(
                &b,
                params.slice(off.w1, d * cfg.ffn_dim),
                params.slice(off.b1, cfg.ffn_dim),
            );
            let f_act: Vec<f64> = f_pre.iter().map(|&z| gelu(z)).collect();
            let m = affine(
                &f_act,
                params.slice(off.w2, cfg.ffn_dim * d),
                params.slice(off.b2, d),
            );
            lt.b.extend_from_slice(&b);
            lt.f_pre.extend_from_slice(&f_pre);
            lt.f_act.extend_from_slice(&f_act);
            x = hres.iter().zip(&m).map(|(a, b)| a + b).collect();
        }
        let y = layer_norm(
            &x,
            params.slice(lay.lnf_g, d),
            params.slice(lay.lnf_b, d),
            &mut self.lnf,
        );
        self.y.extend_from_slice(&y);
        self.len += 1;
        Ok(())
    }

    /// Next-token logits at row `t`.
    pub fn logits(&self, params: &Params, t: usize) -> Vec<f64> {
        let d = params.config.d_model;
        let lay = &params.layout;
        affine(
            row(&self.y, t, d),
            params.slice(lay.head_w, d * VOCAB),
            params.slice(lay.head_b, VOCAB),
        )
    }

    pub fn attention(&self) -> AttentionTensor {
        let mut weights = Vec::with_capacity(self.cfg.n_layers * self.cfg.n_heads * tri(self.len));
        for lt in &self.layers {
            for p in &lt.probs {
                weights.extend_from_slice(p);
            }
        }
        AttentionTensor {
            n_layers: self.cfg.n_layers,
            n_heads: self.cfg.n_heads,
            seq_len: self.len,
            weights,
        }
    }

    /// Reverse-mode pass. `dlogits` holds the loss gradient with respect to the
    /// logits at selected rows; parameter gradients are added into `grad`.
    pub fn backward(&self, params: &Params, dlogits: &[(usize, Vec<f64>)], grad: &mut [f64]) {
        let cfg = &params.config;
        let lay = &params.layout;
        let d = cfg.d_model;
        let n = self.len;
        assert_eq!(grad.len(), params.len());

        let mut dy = vec![0.0; n * d];
        for (t, dl) in dlogits {
            let (gw, gb) = grad[lay.head_w..lay.head_b + VOCAB].split_at_mut(d * VOCAB);
            affine_back(
                row(&self.y, *t, d),
                dl,
                params.slice(lay.head_w, d * VOCAB),
                gw,
                gb,
                Some(row_mut(&mut dy, *t, d)),
            );
        }
        let mut dx = vec![0.0; n * d];
        for t in 0..n {
            let (gg, gb) = grad[lay.lnf_g..lay.lnf_b + d].split_at_mut(d);
            layer_norm_back(
                row(&self.lnf.xhat, t, d),
                self.lnf.rstd[t],
                params.slice(lay.lnf_g, d),
                row(&dy, t, d),
                gg,
                gb,
                row_mut(&mut dx, t, d),
            );
        }
        for l in (0..cfg.n_layers).rev() {
            dx = self.layer_backward(params, l, &dx, grad);
        }
        for t in 0..n {
            let dxt = row(&dx, t, d);
            for (g, v) in grad[lay.pos_emb + t * d..lay.pos_emb + (t + 1) * d]
                .iter_mut()
                .zip(dxt)
            {
                *g += v;
            }
            match &self.inputs[t] {
                RowInput::Vocab(id) => {
                    let at = lay.tok_emb + *id as usize * d;
                    for (g, v) in grad[at..at + d].iter_mut().zip(dxt) {
                        *g += v;
                    }
                }
                RowInput::Patch(patch) => {
                    let pd = cfg.patch_dim();
                    let (gw, gb) = grad[lay.patch_w..lay.patch_b + d].split_at_mut(pd * d);
                    affine_back(patch, dxt, params.slice(lay.patch_w, pd * d), gw, gb, None);
                }
            }
        }
    }

    fn layer_backward(
        &self,
        params: &Params,
        l: usize,
        dout: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let cfg = &params.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = self.len;
        let off = params.layout.layers[l];
        let lt = &self.layers[l];

        // Feed-forward block and its norm; the residual carries dout through.
        let mut dh = dout.to_vec();
        for t in 0..n {
            let dm = row(dout, t, d);
            let mut df = vec![0.0; f];
            {
                let (gw, gb) = grad[off.w2..off.b2 + d].split_at_mut(f * d);
                affine_back(
                    row(&lt.f_act, t, f),
                    dm,
                    params.slice(off.w2, f * d),
                    gw,
                    gb,
                    Some(&mut df),
                );
            }
            for (g, &z) in df.iter_mut().zip(row(&lt.f_pre, t, f)) {
                *g *= gelu_grad(z);
            }
            let mut db = vec![0.0; d];
            {
                let (gw, gb) = grad[off.w1..off.b1 + f].split_at_mut(d * f);
                affine_back(
                    row(&lt.b, t, d),
                    &df,
                    params.slice(off.w1, d * f),
                    gw,
                    gb,
                    Some(&mut db),
                );
            }
            let (gg, gb) = grad[off.ln2_g..off.ln2_b + d].split_at_mut(d);
            layer_norm_back(
                row(&lt.ln2.xhat, t, d),
                lt.ln2.rstd[t],
                params.slice(off.ln2_g, d),
                &db,
                gg,
                gb,
                row_mut(&mut dh, t, d),
            );
        }

        // Attention output projection.
        let mut dctx = vec![0.0; n * d];
        for t in 0..n {
            let (gw, gb) = grad[off.wo..off.bo + d].split_at_mut(d * d);
            affine_back(
                row(&lt.ctx, t, d),
                row(&dh, t, d),
                params.slice(off.wo, d * d),
                gw,
                gb,
                Some(row_mut(&mut dctx, t, d)),
            );
        }

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for h in 0..cfg.n_heads {
            let hs = h * hd..(h + 1) * hd;
            let probs = &lt.probs[h];
            for t in 0..n {
                let p = &probs[tri(t)..tri(t) + t + 1];
                let dc = &dctx[t * d + hs.start..t * d + hs.end];
                let mut dp = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    let vj = &lt.v[j * d + hs.start..j * d + hs.end];
                    dp.push(dc.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    let pj = p[j];
                    for (g, &c) in dv[j * d + hs.start..j * d + hs.end].iter_mut().zip(dc) {
                        *g += pj * c;
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qt = lt.q[t * d + hs.start..t * d + hs.end].to_vec();
                for j in 0..=t {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in hs.clone() {
                        dq[t * d + c] += ds * lt.k[j * d + c];
                        dk[j * d + c] += ds * qt[c - hs.start];
                    }
                }
            }
        }

        let mut dx = dh;
        for t in 0..n {
            let a = row(&lt.a, t, d);
            let mut da = vec![0.0; d];
            for (w, b, dproj) in [
                (off.wq, Some(off.bq), &dq),
                (off.wk, None, &dk),
                (off.wv, Some(off.bv), &dv),
            ] {
                let dy = row(dproj, t, d);
                match b {
                    Some(b) => {
                        let (gw, gb) = grad[w..b + d].split_at_mut(d * d);
                        affine_back(a, dy, params.slice(w, d * d), gw, gb, Some(&mut da));
                    }
                    None => {
                        let mut unused = vec![0.0; d];
                        affine_back(
                            a,
                            dy,
                            params.slice(w, d * d),
                            &mut grad[w..w + d * d],
                            &mut unused,
                            Some(&mut da),
                        );
                    }
                }
            }
            let (gg, gb) = grad[off.ln1_g..off.ln1_b + d].split_at_mut(d);
            layer_norm_back(
                row(&lt.ln1.xhat, t, d),
                lt.ln1.rstd[t],
                params.slice(off.ln1_g, d),
                &da,
                gg,
                gb,
                row_mut(&mut dx, t, d),
            );
        }
        dx
    }
}

/// Full forward pass: next-token logits at every position plus the attention
/// tensor of all layers and heads.
pub fn forward(seq: &TokenSequence, params: &Params) -> Result<(Vec<Vec<f64>>, AttentionTensor)> {
    let tape = Tape::run(params, seq)?;
    let logits = (0..tape.len()).map(|t| tape.logits(params, t)).collect();
    Ok((logits, tape.attention()))
}
