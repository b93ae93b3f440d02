//! The shared backbone: a pre-layer-norm causal transformer whose attention
//! at every layer also sees injected key/value rows for the image grid and
//! the trait embedding.
//!
//! For layer `l` and text position `t` the attention keys are the row stack
//! `[V·P_k + b'_k ; T·W_k + b_k ; H_t·W_k + b_k]` (values likewise with
//! `P_v`, `W_v`). Queries come from text positions only. Injected rows carry
//! no positional embedding and are visible from every position; text rows
//! are causally masked. The backbone output for a prefix is the final
//! layer-normed hidden vector of its last token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{accum_at_b, accum_col_sums, dot, matmul_bias, matmul_bt, round_to_f32, Matrix};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
const FFN_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub grid_cells: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_traits: usize,
    pub injection_enabled: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            grid_cells: 4,
            visual_dim: 16,
            vocab_size: 512,
            max_len: 24,
            num_traits: 12,
            injection_enabled: true,
        }
    }
}

impl ModelConfig {
    /// The published configuration: 6 layers, 8 heads, 49×2048 grid, 215 traits.
    pub fn full_scale(vocab_size: usize, hidden_dim: usize) -> Self {
        Self {
            num_layers: 6,
            hidden_dim,
            num_heads: 8,
            grid_cells: 49,
            visual_dim: 2048,
            vocab_size,
            max_len: 64,
            num_traits: 215,
            injection_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_layers < 1 {
            return bad("num_layers must be at least 1");
        }
        if self.num_heads == 0 || self.hidden_dim == 0 {
            return bad("hidden_dim and num_heads must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim not divisible by num_heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.vocab_size < crate::tokenizer::NUM_RESERVED {
            return bad("vocab_size must cover the reserved ids");
        }
        if self.num_traits == 0 || self.grid_cells == 0 || self.visual_dim == 0 {
            return bad("num_traits, grid_cells and visual_dim must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    fn injected_rows(&self) -> usize {
        if self.injection_enabled {
            self.grid_cells + 1
        } else {
            0
        }
    }
}

/// The visual grid `V`: one feature row per image cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap(pub Matrix);

impl FeatureMap {
    pub fn new(grid_cells: usize, visual_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid_cells * visual_dim {
            return Err(Error::FeatureShape {
                rows: data.len() / visual_dim.max(1),
                cols: visual_dim,
                want_rows: grid_cells,
                want_cols: visual_dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(Matrix::from_vec(grid_cells, visual_dim, data)))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    /// Image-grid key projection `P_k`.
    pub p_k: Matrix,
    pub pb_k: Matrix,
    /// Image-grid value projection `P_v`.
    pub p_v: Matrix,
    pub pb_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w_fc: Matrix,
    pub b_fc: Matrix,
    pub w_proj: Matrix,
    pub b_proj: Matrix,
}

/// Every trainable tensor. The same type doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    /// Trait table, one row per personality trait.
    pub traits: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    /// Speaker head: hidden → vocabulary logits.
    pub spk_w: Matrix,
    pub spk_b: Matrix,
    /// Listener head: hidden → compatibility score.
    pub ltn_w: Matrix,
    pub ltn_b: Matrix,
}

pub type Gradients = ModelParams;

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, p_k, pb_k, p_v, pb_v, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc,
            w_proj, b_proj
        )
    };
}

impl ModelParams {
    /// All tensors zero (with the given config's shapes).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let z = Matrix::zeros;
        let layer = || LayerParams {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            w_q: z(d, d),
            b_q: z(1, d),
            w_k: z(d, d),
            b_k: z(1, d),
            w_v: z(d, d),
            b_v: z(1, d),
            p_k: z(config.visual_dim, d),
            pb_k: z(1, d),
            p_v: z(config.visual_dim, d),
            pb_v: z(1, d),
            w_o: z(d, d),
            b_o: z(1, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            w_fc: z(d, FFN_MULT * d),
            b_fc: z(1, FFN_MULT * d),
            w_proj: z(FFN_MULT * d, d),
            b_proj: z(1, d),
        };
        Self {
            config: config.clone(),
            tok_emb: z(config.vocab_size, d),
            pos_emb: z(config.max_len, d),
            traits: z(config.num_traits, d),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            lnf_g: z(1, d),
            lnf_b: z(1, d),
            spk_w: z(d, config.vocab_size),
            spk_b: z(1, config.vocab_size),
            ltn_w: z(d, 1),
            ltn_b: z(1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("traits".into(), &self.traits),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push((format!("layers.{i}.{}", stringify!($f)), &l.$f)); )* };
            }
            layer_fields!(push);
        }
        out.extend([
            ("lnf_g".to_string(), &self.lnf_g),
            ("lnf_b".to_string(), &self.lnf_b),
            ("spk_w".to_string(), &self.spk_w),
            ("spk_b".to_string(), &self.spk_b),
            ("ltn_w".to_string(), &self.ltn_w),
            ("ltn_b".to_string(), &self.ltn_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("traits".into(), &mut self.traits),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push((format!("layers.{i}.{}", stringify!($f)), &mut l.$f)); )* };
            }
            layer_fields!(push);
        }
        out.extend([
            ("lnf_g".to_string(), &mut self.lnf_g),
            ("lnf_b".to_string(), &mut self.lnf_b),
            ("spk_w".to_string(), &mut self.spk_w),
            ("spk_b".to_string(), &mut self.spk_b),
            ("ltn_w".to_string(), &mut self.ltn_w),
            ("ltn_b".to_string(), &mut self.ltn_b),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Hex SHA-256 over every parameter value in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            round_to_f32(&mut t.data);
        }
    }
}

/// Draws weights from normal(0, 0.02) and sets biases to zero and layer-norm
/// gains to one. Values are rounded to `f32` so checkpoints store them exactly.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    for (name, t) in p.tensors_mut() {
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        if leaf.ends_with("_g") && leaf.starts_with("ln") {
            t.fill(1.0);
        } else if leaf.starts_with("b_") || leaf.starts_with("pb_") || leaf.ends_with("_b") {
            t.fill(0.0);
        } else {
            for v in &mut t.data {
                *v = normal.sample(&mut rng) as f32 as f64;
            }
        }
    }
    Ok(p)
}

/// Per-layer outputs of the backbone.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// Residual stream after each layer (`num_layers` entries, each t×d).
    pub layers: Vec<Matrix>,
    /// Final layer-normed states (t×d); row `k-1` is the backbone output for the k-prefix.
    pub output: Matrix,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols;
    let mut y = Matrix::zeros(x.rows, d);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for (c, &v) in row.iter().enumerate() {
            let xh = (v - mean) * rs;
            xhat.data[r * d + c] = xh;
            y.data[r * d + c] = xh * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Matrix, g: &Matrix, cache: &LnCache, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            let dxh = dyr[c] * g.data[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            let dxh = dyr[c] * g.data[c];
            out[c] = rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    /// Keys/values: injected rows first (grid then trait), then text rows.
    k: Matrix,
    v: Matrix,
    /// Attention probabilities, indexed `[(head * t + i) * m + j]` with `m = inj + t`.
    probs: Vec<f64>,
    ctx: Matrix,
    ln2: LnCache,
    c: Matrix,
    f_pre: Matrix,
    f_act: Matrix,
}

/// A forward pass with everything needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Forward {
    tokens: Vec<u32>,
    trait_id: usize,
    inj: usize,
    layers: Vec<LayerCache>,
    layer_outputs: Vec<Matrix>,
    lnf: LnCache,
    /// Final layer-normed hidden states (t×d).
    pub output: Matrix,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Backbone output for the whole prefix: the last row of `output`.
    pub fn last_hidden(&self) -> &[f64] {
        self.output.row(self.output.rows - 1)
    }

    pub fn hidden_states(&self) -> HiddenStates {
        HiddenStates {
            layers: self.layer_outputs.clone(),
            output: self.output.clone(),
        }
    }

    /// Attention distribution for a layer, head and 1-based text position,
    /// over `[grid cells…, trait, text positions 1..=position]`.
    pub fn attention_row(&self, layer: usize, head: usize, position: usize) -> Result<Vec<f64>> {
        let t = self.tokens.len();
        let cache = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer}")))?;
        let heads = cache.probs.len() / (t * (self.inj + t));
        if head >= heads {
            return Err(Error::IndexOutOfRange(format!("head {head}")));
        }
        if position == 0 || position > t {
            return Err(Error::IndexOutOfRange(format!("position {position}")));
        }
        let m = self.inj + t;
        let i = position - 1;
        let row = &cache.probs[(head * t + i) * m..(head * t + i + 1) * m];
        Ok(row[..self.inj + position].to_vec())
    }
}

fn check_inputs(params: &ModelParams, features: &FeatureMap, trait_id: usize, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::MalformedSequence("empty prefix".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::ExceedsMaxLen {
            len: tokens.len(),
            max_len: cfg.max_len,
        });
    }
    if trait_id >= cfg.num_traits {
        return Err(Error::TraitOutOfRange {
            id: trait_id,
            num_traits: cfg.num_traits,
        });
    }
    let m = features.matrix();
    if m.rows != cfg.grid_cells || m.cols != cfg.visual_dim {
        return Err(Error::FeatureShape {
            rows: m.rows,
            cols: m.cols,
            want_rows: cfg.grid_cells,
            want_cols: cfg.visual_dim,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::IdOutOfRange(bad));
    }
    Ok(())
}

/// Runs the backbone over `tokens` conditioned on the image grid and trait.
pub fn forward(params: &ModelParams, features: &FeatureMap, trait_id: usize, tokens: &[u32]) -> Result<Forward> {
    check_inputs(params, features, trait_id, tokens)?;
    let cfg = &params.config;
    let (t, d) = (tokens.len(), cfg.hidden_dim);
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let inj = cfg.injected_rows();
    let m = inj + t;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, e), p) in row
            .iter_mut()
            .zip(params.tok_emb.row(tok as usize))
            .zip(params.pos_emb.row(i))
        {
            *o = e + p;
        }
    }
    let trait_row = params.traits.slice_rows(trait_id, trait_id + 1);

    let mut caches = Vec::with_capacity(cfg.num_layers);
    let mut layer_outputs = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let x_in = x;
        let (a, ln1) = layer_norm(&x_in, &lp.ln1_g, &lp.ln1_b);
        let q = matmul_bias(&a, &lp.w_q, Some(&lp.b_q));
        let k_txt = matmul_bias(&a, &lp.w_k, Some(&lp.b_k));
        let v_txt = matmul_bias(&a, &lp.w_v, Some(&lp.b_v));
        let (k, v) = if inj > 0 {
            let k_img = matmul_bias(features.matrix(), &lp.p_k, Some(&lp.pb_k));
            let v_img = matmul_bias(features.matrix(), &lp.p_v, Some(&lp.pb_v));
            let k_tr = matmul_bias(&trait_row, &lp.w_k, Some(&lp.b_k));
            let v_tr = matmul_bias(&trait_row, &lp.w_v, Some(&lp.b_v));
            (
                Matrix::vstack(&[&k_img, &k_tr, &k_txt]),
                Matrix::vstack(&[&v_img, &v_tr, &v_txt]),
            )
        } else {
            (k_txt, v_txt)
        };

        let mut probs = vec![0.0; heads * t * m];
        let mut ctx = Matrix::zeros(t, d);
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            for i in 0..t {
                let visible = inj + i + 1;
                let qi = &q.row(i)[hs.clone()];
                let row = &mut probs[(h * t + i) * m..(h * t + i) * m + visible];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate() {
                    *p = dot(qi, &k.row(j)[hs.clone()]) * scale;
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let out = &mut ctx.data[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, p) in row.iter_mut().enumerate() {
                    *p /= z;
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[hs.clone()]) {
                        *o += *p * vv;
                    }
                }
            }
        }
        let attn = matmul_bias(&ctx, &lp.w_o, Some(&lp.b_o));
        let mut x_mid = x_in.clone();
        x_mid.axpy(1.0, &attn);
        let (c, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let f_pre = matmul_bias(&c, &lp.w_fc, Some(&lp.b_fc));
        let f_act = Matrix::from_vec(f_pre.rows, f_pre.cols, f_pre.data.iter().map(|&z| gelu(z)).collect());
        let ff = matmul_bias(&f_act, &lp.w_proj, Some(&lp.b_proj));
        let mut x_out = x_mid;
        x_out.axpy(1.0, &ff);
        layer_outputs.push(x_out.clone());
        caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            c,
            f_pre,
            f_act,
        });
        x = x_out;
    }
    let (output, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    Ok(Forward {
        tokens: tokens.to_vec(),
        trait_id,
        inj,
        layers: caches,
        layer_outputs,
        lnf,
        output,
    })
}

/// Backpropagates `d_output` (gradient w.r.t. the final hidden states, t×d)
/// and accumulates parameter gradients into `grads`.
pub fn backward(params: &ModelParams, features: &FeatureMap, fwd: &Forward, d_output: &Matrix, grads: &mut Gradients) {
    let cfg = &params.config;
    let (t, d) = (fwd.tokens.len(), cfg.hidden_dim);
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let inj = fwd.inj;
    let m = inj + t;
    let scale = 1.0 / (hd as f64).sqrt();
    let trait_row = params.traits.slice_rows(fwd.trait_id, fwd.trait_id + 1);

    let mut dx = layer_norm_backward(d_output, &params.lnf_g, &fwd.lnf, &mut grads.lnf_g, &mut grads.lnf_b);

    for (li, (lp, cache)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        // feed-forward sublayer
        accum_at_b(&mut g.w_proj, &cache.f_act, &dx);
        accum_col_sums(&mut g.b_proj, &dx);
        let mut d_fpre = matmul_bt(&dx, &lp.w_proj);
        for (dv, &z) in d_fpre.data.iter_mut().zip(&cache.f_pre.data) {
            *dv *= gelu_grad(z);
        }
        accum_at_b(&mut g.w_fc, &cache.c, &d_fpre);
        accum_col_sums(&mut g.b_fc, &d_fpre);
        let dc = matmul_bt(&d_fpre, &lp.w_fc);
        let d_mid = layer_norm_backward(&dc, &lp.ln2_g, &cache.ln2, &mut g.ln2_g, &mut g.ln2_b);
        dx.axpy(1.0, &d_mid);

        // attention sublayer
        accum_at_b(&mut g.w_o, &cache.ctx, &dx);
        accum_col_sums(&mut g.b_o, &dx);
        let d_ctx = matmul_bt(&dx, &lp.w_o);
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(m, d);
        let mut dv = Matrix::zeros(m, d);
        let mut dp = vec![0.0; m];
        for h in 0..heads {
            let hs = h * hd..(h + 1) * hd;
            for i in 0..t {
                let visible = inj + i + 1;
                let p = &cache.probs[(h * t + i) * m..(h * t + i) * m + visible];
                let dout = &d_ctx.row(i)[hs.clone()];
                let mut weighted = 0.0;
                for j in 0..visible {
                    dp[j] = dot(dout, &cache.v.row(j)[hs.clone()]);
                    weighted += p[j] * dp[j];
                    let dvr = &mut dv.data[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in dvr.iter_mut().zip(dout) {
                        *a += p[j] * b;
                    }
                }
                let qi = &cache.q.row(i)[hs.clone()];
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[hs.clone()];
                    let dqr = &mut dq.data[i * d + h * hd..i * d + (h + 1) * hd];
                    for (a, &b) in dqr.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let dkr = &mut dk.data[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in dkr.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        let dk_txt = dk.slice_rows(inj, m);
        let dv_txt = dv.slice_rows(inj, m);
        accum_at_b(&mut g.w_q, &cache.a, &dq);
        accum_col_sums(&mut g.b_q, &dq);
        accum_at_b(&mut g.w_k, &cache.a, &dk_txt);
        accum_col_sums(&mut g.b_k, &dk_txt);
        accum_at_b(&mut g.w_v, &cache.a, &dv_txt);
        accum_col_sums(&mut g.b_v, &dv_txt);
        if inj > 0 {
            let gc = cfg.grid_cells;
            let dk_img = dk.slice_rows(0, gc);
            let dv_img = dv.slice_rows(0, gc);
            accum_at_b(&mut g.p_k, features.matrix(), &dk_img);
            accum_col_sums(&mut g.pb_k, &dk_img);
            accum_at_b(&mut g.p_v, features.matrix(), &dv_img);
            accum_col_sums(&mut g.pb_v, &dv_img);
            let dk_tr = dk.slice_rows(gc, gc + 1);
            let dv_tr = dv.slice_rows(gc, gc + 1);
            accum_at_b(&mut g.w_k, &trait_row, &dk_tr);
            accum_col_sums(&mut g.b_k, &dk_tr);
            accum_at_b(&mut g.w_v, &trait_row, &dv_tr);
            accum_col_sums(&mut g.b_v, &dv_tr);
            let mut d_trait = matmul_bt(&dk_tr, &lp.w_k);
            d_trait.axpy(1.0, &matmul_bt(&dv_tr, &lp.w_v));
            for (a, b) in grads.traits.row_mut(fwd.trait_id).iter_mut().zip(&d_trait.data) {
                *a += b;
            }
        }
        let g = &mut grads.layers[li];
        let mut da = matmul_bt(&dq, &lp.w_q);
        da.axpy(1.0, &matmul_bt(&dk_txt, &lp.w_k));
        da.axpy(1.0, &matmul_bt(&dv_txt, &lp.w_v));
        let d_in = layer_norm_backward(&da, &lp.ln1_g, &cache.ln1, &mut g.ln1_g, &mut g.ln1_b);
        dx.axpy(1.0, &d_in);
    }

    for (i, &tok) in fwd.tokens.iter().enumerate() {
        let src = dx.row(i);
        for (a, b) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
            *a += b;
        }
        for (a, b) in grads.pos_emb.row_mut(i).iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// `G(V, T, prefix)` and the per-layer hidden states.
pub fn encode_triple(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    prefix: &[u32],
) -> Result<(Vec<f64>, HiddenStates)> {
    let fwd = forward(params, features, trait_id, prefix)?;
    Ok((fwd.last_hidden().to_vec(), fwd.hidden_states()))
}

/// Attention probabilities of one head at a 1-based text position.
pub fn attention_weights(
    params: &ModelParams,
    features: &FeatureMap,
    trait_id: usize,
    prefix: &[u32],
    layer: usize,
    head: usize,
    position: usize,
) -> Result<Vec<f64>> {
    forward(params, features, trait_id, prefix)?.attention_row(layer, head, position)
}

/// Logits of an affine map `hidden · w + b` for one hidden row.
pub(crate) fn affine_row(hidden: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let h = Matrix::from_vec(1, hidden.len(), hidden.to_vec());
    matmul_bias(&h, w, Some(b)).data
}
