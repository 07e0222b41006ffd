//! Bidirectional denoiser `p(x_0 | x_t, C, t)`.
//!
//! A small pre-normalization transformer encoder over the concatenation of a
//! context block `[BOS, pooled video, SEP, query, SEP]` and the response
//! canvas. There is no causal mask anywhere. The diffusion step is injected
//! by adding a learned step embedding to every response position.
//!
//! Gradients are computed by hand (reverse mode, double precision) from the
//! activations cached during [`DenoiserParams::forward_cached`].

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corruption::TargetSequence;
use crate::error::{Error, Result};

/// `L x |V|` matrix of unnormalized scores, one row per response position.
pub type Logits = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token, step and position embeddings.
    Embedding,
    /// Frame-feature projection.
    Context,
    /// Transformer blocks and the final norm.
    Encoder,
    /// Output projection.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of pooled video vectors in the context.
    pub n_ctx: usize,
    pub d_feat: usize,
    pub max_query: usize,
    pub max_response: usize,
    /// Largest diffusion step; the step table covers `0..=n_steps`.
    pub n_steps: usize,
    pub init_seed: u64,
    pub init_std: f64,
    pub frozen: Vec<ParamGroup>,
    /// Reserved ids used to delimit the context block.
    pub bos_id: u32,
    pub sep_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 131,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            n_ctx: 8,
            d_feat: 16,
            max_query: 4,
            max_response: 32,
            n_steps: 64,
            init_seed: 0,
            init_std: 0.02,
            frozen: Vec::new(),
            bos_id: 4,
            sep_id: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size < 2 || self.n_ctx == 0 || self.d_feat == 0 || self.d_ff == 0 {
            return bad("vocab_size, n_ctx, d_feat and d_ff must be positive");
        }
        if self.n_steps == 0 || self.max_response == 0 {
            return bad("n_steps and max_response must be positive");
        }
        if self.bos_id as usize >= self.vocab_size || self.sep_id as usize >= self.vocab_size {
            return bad("bos_id and sep_id must lie inside the vocabulary");
        }
        Ok(())
    }

    /// Default architecture sized for a vocabulary.
    pub fn for_vocab(vocab: &crate::timecodec::Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            bos_id: vocab.bos_id,
            sep_id: vocab.sep_id,
            ..Self::default()
        }
    }

    fn n_context_rows_max(&self) -> usize {
        self.n_ctx + self.max_query + 3
    }
}

/// One named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    step_emb: usize,
    resp_pos: usize,
    ctx_pos: usize,
    frame_w: usize,
    frame_b: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Video and query inputs of one example, after frame pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoContext {
    /// `n_ctx x d_feat` mean-pooled frame features.
    pub pooled: Array2<f64>,
    pub query: Vec<u32>,
}

impl VideoContext {
    pub fn from_frames(frames: &Array2<f64>, query: Vec<u32>, n_ctx: usize) -> Result<Self> {
        Ok(Self {
            pooled: pool_frames(frames, n_ctx)?,
            query,
        })
    }
}

/// Average `T_v` frames into `n_ctx` contiguous buckets.
pub fn pool_frames(frames: &Array2<f64>, n_ctx: usize) -> Result<Array2<f64>> {
    let (t_v, d) = frames.dim();
    if t_v == 0 || n_ctx == 0 {
        return Err(Error::Config(
            "pooling needs at least one frame and one bucket".into(),
        ));
    }
    let mut out = Array2::zeros((n_ctx, d));
    for b in 0..n_ctx {
        let lo = b * t_v / n_ctx;
        let hi = ((b + 1) * t_v / n_ctx).max(lo + 1).min(t_v);
        let lo = lo.min(t_v - 1);
        let mean = frames
            .slice(s![lo..hi, ..])
            .mean_axis(Axis(0))
            .expect("non-empty bucket");
        out.row_mut(b).assign(&mean);
    }
    Ok(out)
}

/// Projected context block `C` (`n_ctx + |query| + 3` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub vectors: Array2<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    norm1: NormCache,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: NormCache,
    a2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_t: Vec<u32>,
    query: Vec<u32>,
    pooled: Array2<f64>,
    step: usize,
    n_context: usize,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl DenoiserParams {
    /// Randomly initialized parameters (normal weights, unit norm gains).
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.config.init_seed);
        let normal =
            Normal::new(0.0, p.config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        for param in &mut p.params {
            if param.name.ends_with(".g") {
                param.value.fill(1.0);
            } else if !param.name.ends_with(".b") && !param.name.ends_with("_b") {
                param.value.mapv_inplace(|_| normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// All-zero parameters, including norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = Vec::new();
        let mut add = |name: String, group: ParamGroup, rows: usize, cols: usize| {
            params.push(Param {
                name,
                group,
                value: Array2::zeros((rows, cols)),
                grad: Array2::zeros((rows, cols)),
            });
            params.len() - 1
        };
        use ParamGroup::*;
        let d = c.d_model;
        let tok_emb = add("tok_emb".into(), Embedding, c.vocab_size, d);
        let step_emb = add("step_emb".into(), Embedding, c.n_steps + 1, d);
        let resp_pos = add("resp_pos".into(), Embedding, c.max_response, d);
        let ctx_pos = add("ctx_pos".into(), Embedding, c.n_context_rows_max(), d);
        let frame_w = add("frame.w".into(), Context, c.d_feat, d);
        let frame_b = add("frame_b".into(), Context, 1, d);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let n = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockLayout {
                ln1_g: add(n("ln1.g"), Encoder, 1, d),
                ln1_b: add(n("ln1.b"), Encoder, 1, d),
                wq: add(n("wq"), Encoder, d, d),
                bq: add(n("bq.b"), Encoder, 1, d),
                wk: add(n("wk"), Encoder, d, d),
                bk: add(n("bk.b"), Encoder, 1, d),
                wv: add(n("wv"), Encoder, d, d),
                bv: add(n("bv.b"), Encoder, 1, d),
                wo: add(n("wo"), Encoder, d, d),
                bo: add(n("bo.b"), Encoder, 1, d),
                ln2_g: add(n("ln2.g"), Encoder, 1, d),
                ln2_b: add(n("ln2.b"), Encoder, 1, d),
                w1: add(n("w1"), Encoder, d, c.d_ff),
                b1: add(n("b1.b"), Encoder, 1, c.d_ff),
                w2: add(n("w2"), Encoder, c.d_ff, d),
                b2: add(n("b2.b"), Encoder, 1, d),
            });
        }
        let lnf_g = add("lnf.g".into(), Encoder, 1, d);
        let lnf_b = add("lnf.b".into(), Encoder, 1, d);
        let out_w = add("out.w".into(), Head, d, c.vocab_size);
        let out_b = add("out_b".into(), Head, 1, c.vocab_size);
        Ok(Self {
            layout: Layout {
                tok_emb,
                step_emb,
                resp_pos,
                ctx_pos,
                frame_w,
                frame_b,
                blocks,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
            params,
            config,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.config.frozen.contains(&group)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    fn w(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx].value
    }

    fn row(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params[idx].value.row(0)
    }

    /// Project pooled frames and embed the query into the context block.
    pub fn encode_context(&self, ctx: &VideoContext) -> Result<ContextEmbedding> {
        Ok(ContextEmbedding {
            vectors: self.context_rows(ctx)?,
        })
    }

    fn context_rows(&self, ctx: &VideoContext) -> Result<Array2<f64>> {
        let c = &self.config;
        if ctx.pooled.dim() != (c.n_ctx, c.d_feat) {
            return Err(Error::ShapeMismatch {
                what: "pooled frame features".into(),
                expected: vec![c.n_ctx, c.d_feat],
                got: ctx.pooled.shape().to_vec(),
            });
        }
        if ctx.query.len() > c.max_query {
            return Err(Error::Config(format!(
                "query of {} tokens exceeds max_query {}",
                ctx.query.len(),
                c.max_query
            )));
        }
        let l = &self.layout;
        let n_c = c.n_ctx + ctx.query.len() + 3;
        let tok = self.w(l.tok_emb);
        let mut rows = Array2::zeros((n_c, c.d_model));
        let bos = c.bos_id as usize;
        rows.row_mut(0).assign(&tok.row(bos));
        let proj = ctx.pooled.dot(self.w(l.frame_w)) + self.row(l.frame_b);
        rows.slice_mut(s![1..=c.n_ctx, ..]).assign(&proj);
        let sep = c.sep_id as usize;
        rows.row_mut(c.n_ctx + 1).assign(&tok.row(sep));
        for (j, &q) in ctx.query.iter().enumerate() {
            rows.row_mut(c.n_ctx + 2 + j)
                .assign(&tok.row(self.token_id(q)?));
        }
        rows.row_mut(n_c - 1).assign(&tok.row(sep));
        rows += &self.w(l.ctx_pos).slice(s![..n_c, ..]);
        Ok(rows)
    }

    fn token_id(&self, id: u32) -> Result<usize> {
        let id = id as usize;
        if id >= self.config.vocab_size {
            return Err(Error::Config(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(id)
    }

    fn embed(&self, x_t: &[u32], ctx: &VideoContext, t: usize) -> Result<(Array2<f64>, usize)> {
        let c = &self.config;
        if t > c.n_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 0,
                hi: c.n_steps,
            });
        }
        if x_t.len() > c.max_response {
            return Err(Error::Config(format!(
                "response of {} tokens exceeds max_response {}",
                x_t.len(),
                c.max_response
            )));
        }
        let ctx_rows = self.context_rows(ctx)?;
        let n_c = ctx_rows.nrows();
        let l = &self.layout;
        let mut x = Array2::zeros((n_c + x_t.len(), c.d_model));
        x.slice_mut(s![..n_c, ..]).assign(&ctx_rows);
        let tok = self.w(l.tok_emb);
        let step = self.w(l.step_emb).row(t);
        let pos = self.w(l.resp_pos);
        for (i, &id) in x_t.iter().enumerate() {
            let mut r = x.row_mut(n_c + i);
            r.assign(&tok.row(self.token_id(id)?));
            r += &pos.row(i);
            r += &step;
        }
        Ok((x, n_c))
    }

    /// Logits for every response position, without caching.
    pub fn forward(&self, x_t: &[u32], ctx: &VideoContext, t: usize) -> Result<Logits> {
        self.forward_cached(x_t, ctx, t).map(|(z, _)| z)
    }

    pub fn forward_cached(
        &self,
        x_t: &[u32],
        ctx: &VideoContext,
        t: usize,
    ) -> Result<(Logits, ForwardCache)> {
        let (mut x, n_c) = self.embed(x_t, ctx, t)?;
        check_finite(&x, "input embeddings")?;
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (li, bl) in self.layout.blocks.iter().enumerate() {
            let (y, cache) = self.block_forward(bl, &x);
            check_finite(&y, &format!("block {li} output"))?;
            x = y;
            blocks.push(cache);
        }
        let resp = x.slice(s![n_c.., ..]).to_owned();
        let l = &self.layout;
        let (z, final_norm) = layer_norm(&resp, self.row(l.lnf_g), self.row(l.lnf_b));
        let logits = z.dot(self.w(l.out_w)) + self.row(l.out_b);
        check_finite(&logits, "output logits")?;
        Ok((
            logits,
            ForwardCache {
                x_t: x_t.to_vec(),
                query: ctx.query.clone(),
                pooled: ctx.pooled.clone(),
                step: t,
                n_context: n_c,
                blocks,
                final_norm,
                final_out: z,
            },
        ))
    }

    fn block_forward(&self, bl: &BlockLayout, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a1, norm1) = layer_norm(x, self.row(bl.ln1_g), self.row(bl.ln1_b));
        let q = a1.dot(self.w(bl.wq)) + self.row(bl.bq);
        let k = a1.dot(self.w(bl.wk)) + self.row(bl.bk);
        let v = a1.dot(self.w(bl.wv)) + self.row(bl.bv);
        let n = x.nrows();
        let mut attn = Array2::zeros((n, c.d_model));
        let mut probs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_inplace(&mut p);
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let hres = x + &(attn.dot(self.w(bl.wo)) + self.row(bl.bo));
        let (a2, norm2) = layer_norm(&hres, self.row(bl.ln2_g), self.row(bl.ln2_b));
        let pre_act = a2.dot(self.w(bl.w1)) + self.row(bl.b1);
        let act = pre_act.mapv(gelu);
        let y = &hres + &(act.dot(self.w(bl.w2)) + self.row(bl.b2));
        (
            y,
            BlockCache {
                norm1,
                a1,
                q,
                k,
                v,
                probs,
                attn,
                norm2,
                a2,
                pre_act,
                act,
            },
        )
    }

    /// Parameter gradients of `sum(dlogits * logits)` for the cached pass.
    pub fn gradients(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        let c = &self.config;
        let l = &self.layout;
        let n_resp = cache.x_t.len();
        if dlogits.dim() != (n_resp, c.vocab_size) {
            return Err(Error::ShapeMismatch {
                what: "logit gradient".into(),
                expected: vec![n_resp, c.vocab_size],
                got: dlogits.shape().to_vec(),
            });
        }
        let mut g: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();

        g[l.out_w] = cache.final_out.t().dot(dlogits);
        g[l.out_b] = sum_rows(dlogits);
        let dz = dlogits.dot(&self.w(l.out_w).t());
        let (dresp, dg, db) = layer_norm_backward(&dz, &cache.final_norm, self.row(l.lnf_g));
        g[l.lnf_g] = dg;
        g[l.lnf_b] = db;

        let n = cache.n_context + n_resp;
        let mut dx = Array2::zeros((n, c.d_model));
        dx.slice_mut(s![cache.n_context.., ..]).assign(&dresp);
        for (bl, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(bl, bc, &dx, &mut g);
        }

        // embeddings
        let n_c = cache.n_context;
        for (i, &id) in cache.x_t.iter().enumerate() {
            let d = dx.row(n_c + i);
            let mut r = g[l.tok_emb].row_mut(id as usize);
            r += &d;
            let mut r = g[l.resp_pos].row_mut(i);
            r += &d;
            let mut r = g[l.step_emb].row_mut(cache.step);
            r += &d;
        }
        let (bos, sep) = (c.bos_id, c.sep_id);
        let mut ctx_tokens = vec![(0usize, bos), (c.n_ctx + 1, sep), (n_c - 1, sep)];
        for (j, &q) in cache.query.iter().enumerate() {
            ctx_tokens.push((c.n_ctx + 2 + j, q));
        }
        for (row, id) in ctx_tokens {
            let mut r = g[l.tok_emb].row_mut(id as usize);
            r += &dx.row(row);
        }
        let dproj = dx.slice(s![1..=c.n_ctx, ..]);
        g[l.frame_w] = cache.pooled.t().dot(&dproj);
        g[l.frame_b] = dproj.sum_axis(Axis(0)).insert_axis(Axis(0));
        g[l.ctx_pos]
            .slice_mut(s![..n_c, ..])
            .assign(&dx.slice(s![..n_c, ..]));

        for (grad, p) in g.iter_mut().zip(&self.params) {
            if self.is_frozen(p.group) {
                grad.fill(0.0);
            }
        }
        Ok(g)
    }

    /// Accumulate parameter gradients for a cached pass into `Param::grad`.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<()> {
        let grads = self.gradients(cache, dlogits)?;
        for (p, gr) in self.params.iter_mut().zip(grads) {
            p.grad += &gr;
        }
        Ok(())
    }

    fn block_backward(
        &self,
        bl: &BlockLayout,
        bc: &BlockCache,
        dy: &Array2<f64>,
        g: &mut [Array2<f64>],
    ) -> Array2<f64> {
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // y = h + act(a2 W1 + b1) W2 + b2
        g[bl.w2] = bc.act.t().dot(dy);
        g[bl.b2] = sum_rows(dy);
        let dact = dy.dot(&self.w(bl.w2).t());
        let dpre = dact * &bc.pre_act.mapv(gelu_grad);
        g[bl.w1] = bc.a2.t().dot(&dpre);
        g[bl.b1] = sum_rows(&dpre);
        let da2 = dpre.dot(&self.w(bl.w1).t());
        let (dn2, dg2, db2) = layer_norm_backward(&da2, &bc.norm2, self.row(bl.ln2_g));
        g[bl.ln2_g] = dg2;
        g[bl.ln2_b] = db2;
        let dhres = dy + &dn2;

        // h = x + attn Wo + bo
        g[bl.wo] = bc.attn.t().dot(&dhres);
        g[bl.bo] = sum_rows(&dhres);
        let dattn = dhres.dot(&self.w(bl.wo).t());
        let n = dy.nrows();
        let mut dq = Array2::zeros((n, c.d_model));
        let mut dk = Array2::zeros((n, c.d_model));
        let mut dv = Array2::zeros((n, c.d_model));
        for (h, p) in bc.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dattn.slice(cols);
            let dp = dout.dot(&bc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (p * &(&dp - &inner)) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
        }
        g[bl.wq] = bc.a1.t().dot(&dq);
        g[bl.bq] = sum_rows(&dq);
        g[bl.wk] = bc.a1.t().dot(&dk);
        g[bl.bk] = sum_rows(&dk);
        g[bl.wv] = bc.a1.t().dot(&dv);
        g[bl.bv] = sum_rows(&dv);
        let da1 =
            dq.dot(&self.w(bl.wq).t()) + dk.dot(&self.w(bl.wk).t()) + dv.dot(&self.w(bl.wv).t());
        let (dn1, dg1, db1) = layer_norm_backward(&da1, &bc.norm1, self.row(bl.ln1_g));
        g[bl.ln1_g] = dg1;
        g[bl.ln1_b] = db1;
        dhres + &dn1
    }
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn sum_rows(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn layer_norm(
    x: &Array2<f64>,
    g: ndarray::ArrayView1<'_, f64>,
    b: ndarray::ArrayView1<'_, f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * rstd.view().insert_axis(Axis(1));
    let y = &xhat * &g + b;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: ndarray::ArrayView1<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = sum_rows(dy);
    let dxhat = dy * &g;
    let d = dy.ncols() as f64;
    let m1 = (dxhat.sum_axis(Axis(1)) / d).insert_axis(Axis(1));
    let m2 = ((&dxhat * &cache.xhat).sum_axis(Axis(1)) / d).insert_axis(Axis(1));
    let dx = (dxhat - &m1 - &(&cache.xhat * &m2)) * cache.rstd.view().insert_axis(Axis(1));
    (dx, dg, db)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows_inplace(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    softmax_rows_inplace(&mut out);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Anything that can score a corrupted response at step `t`.
pub trait Denoise {
    fn logits(&self, x_t: &[u32], t: usize) -> Result<Logits>;
}

/// The trained model bound to one example's context.
pub struct ModelDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub context: &'a VideoContext,
}

impl Denoise for ModelDenoiser<'_> {
    fn logits(&self, x_t: &[u32], t: usize) -> Result<Logits> {
        self.params.forward(x_t, self.context, t)
    }
}

/// Test oracle: `+confidence` at the ground-truth token, 0 elsewhere.
pub struct OracleDenoiser<'a> {
    pub target: &'a TargetSequence,
    pub vocab_size: usize,
    pub confidence: f64,
}

impl<'a> OracleDenoiser<'a> {
    pub fn new(target: &'a TargetSequence, vocab_size: usize) -> Self {
        Self {
            target,
            vocab_size,
            confidence: 50.0,
        }
    }
}

pub fn oracle_forward(target: &TargetSequence, vocab_size: usize, confidence: f64) -> Logits {
    let mut z = Array2::zeros((target.len(), vocab_size));
    for (i, &tok) in target.tokens.iter().enumerate() {
        z[[i, tok as usize]] = confidence;
    }
    z
}

impl Denoise for OracleDenoiser<'_> {
    fn logits(&self, x_t: &[u32], _t: usize) -> Result<Logits> {
        if x_t.len() != self.target.len() {
            return Err(Error::LengthMismatch {
                expected: self.target.len(),
                got: x_t.len(),
            });
        }
        Ok(oracle_forward(
            self.target,
            self.vocab_size,
            self.confidence,
        ))
    }
}
