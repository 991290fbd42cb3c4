//! Detection transformer: small multi-scale CNN backbone, dense cross-scale
//! attention encoder, query-based decoder, and prediction heads.

pub mod boxes;
pub mod loss;
pub mod matcher;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{init, Binder, Element, Graph, ParamMap, TensorId};

use crate::error::{Error, Result};

/// Parameter name of the shared object-query embedding.
pub const QUERY_PARAM: &str = "queries.embed";
/// Prefix of every alignment-head parameter, so detector-only checkpoints
/// can be loaded by evaluation.
pub const ALIGN_PREFIX: &str = "align.";

pub const BACKBONE_CHANNELS: [usize; 5] = [32, 64, 128, 128, 128];
pub const N_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub n_queries: usize,
    /// Foreground classes; background is implicit index `n_classes`.
    pub n_classes: usize,
    pub n_prototypes: usize,
    pub disc_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            n_encoder_layers: 3,
            n_decoder_layers: 3,
            ffn_dim: 256,
            n_queries: 20,
            n_classes: 5,
            n_prototypes: 9,
            disc_hidden: 64,
        }
    }
}

impl DetectorConfig {
    pub fn background_class(&self) -> usize {
        self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be a multiple of 4".into()));
        }
        if self.n_classes < 1 || self.n_queries < 1 {
            return Err(Error::Config("need at least one class and one query".into()));
        }
        Ok(())
    }
}

/// Which alignment attachments the forward pass should carry.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    pub enc_domain_query: bool,
    pub dec_domain_query: bool,
}

/// Flattened multi-scale image tokens plus their metadata.
pub struct MultiScaleTokens {
    /// (B, T, d)
    pub tokens: TensorId,
    /// (T, d) positional encoding (sinusoidal + learned level embedding)
    pub pos: TensorId,
    pub level_index: Vec<usize>,
    pub spatial_shapes: Vec<(usize, usize)>,
}

/// Handles into the graph for one forward pass.
pub struct DetectorForward {
    /// (B, Q, K+1)
    pub class_logits: TensorId,
    /// (B, Q, 4), sigmoid-parameterized cxcywh
    pub box_preds: TensorId,
    /// (B, Q, d) final decoder features
    pub decoder_features: TensorId,
    /// (B, T, d) encoder output image tokens (domain token excluded)
    pub encoder_tokens: TensorId,
    /// (B, d) encoder global token, when requested
    pub enc_domain_token: Option<TensorId>,
    /// (B, d) decoder global token, when requested
    pub dec_domain_token: Option<TensorId>,
    pub level_index: Vec<usize>,
    pub spatial_shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Initialize all parameters (detector plus alignment heads) in a fixed
    /// deterministic order.
    pub fn init_params<F: Element>(&self, rng: &mut ChaCha8Rng) -> ParamMap<F> {
        let d = self.cfg.d_model;
        let mut p = ParamMap::new();

        let conv = |p: &mut ParamMap<F>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
            let fan_in = cin * 9;
            let fan_out = cout * 9;
            p.insert(
                format!("{name}.w"),
                init::xavier_uniform(rng, &[cout, cin, 3, 3], fan_in, fan_out),
            );
            p.insert(format!("{name}.b"), init::zeros(&[cout]));
        };
        let lin = |p: &mut ParamMap<F>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize| {
            p.insert(
                format!("{name}.w"),
                init::xavier_uniform(rng, &[din, dout], din, dout),
            );
            p.insert(format!("{name}.b"), init::zeros(&[dout]));
        };
        let norm = |p: &mut ParamMap<F>, name: &str, d: usize| {
            p.insert(format!("{name}.g"), init::ones(&[d]));
            p.insert(format!("{name}.b"), init::zeros(&[d]));
        };

        let ch = BACKBONE_CHANNELS;
        conv(&mut p, rng, "backbone.conv1", 3, ch[0]);
        conv(&mut p, rng, "backbone.conv2", ch[0], ch[1]);
        conv(&mut p, rng, "backbone.conv3", ch[1], ch[2]);
        conv(&mut p, rng, "backbone.conv4", ch[2], ch[3]);
        conv(&mut p, rng, "backbone.conv5", ch[3], ch[4]);
        for lvl in 0..N_LEVELS {
            lin(&mut p, rng, &format!("proj.{lvl}"), ch[2 + lvl], d);
        }
        p.insert("level_embed", init::normal(rng, &[N_LEVELS, d], 0.0, 1.0));

        for i in 0..self.cfg.n_encoder_layers {
            for part in ["wq", "wk", "wv", "wo"] {
                lin(&mut p, rng, &format!("enc.{i}.attn.{part}"), d, d);
            }
            norm(&mut p, &format!("enc.{i}.norm1"), d);
            lin(&mut p, rng, &format!("enc.{i}.ffn.l1"), d, self.cfg.ffn_dim);
            lin(&mut p, rng, &format!("enc.{i}.ffn.l2"), self.cfg.ffn_dim, d);
            norm(&mut p, &format!("enc.{i}.norm2"), d);
        }
        for i in 0..self.cfg.n_decoder_layers {
            for part in ["wq", "wk", "wv", "wo"] {
                lin(&mut p, rng, &format!("dec.{i}.self.{part}"), d, d);
            }
            norm(&mut p, &format!("dec.{i}.norm1"), d);
            for part in ["wq", "wk", "wv", "wo"] {
                lin(&mut p, rng, &format!("dec.{i}.cross.{part}"), d, d);
            }
            norm(&mut p, &format!("dec.{i}.norm2"), d);
            lin(&mut p, rng, &format!("dec.{i}.ffn.l1"), d, self.cfg.ffn_dim);
            lin(&mut p, rng, &format!("dec.{i}.ffn.l2"), self.cfg.ffn_dim, d);
            norm(&mut p, &format!("dec.{i}.norm3"), d);
        }

        p.insert(QUERY_PARAM, init::normal(rng, &[self.cfg.n_queries, d], 0.0, 1.0));

        lin(&mut p, rng, "head.class", d, self.cfg.n_classes + 1);
        lin(&mut p, rng, "head.box.l1", d, d);
        lin(&mut p, rng, "head.box.l2", d, d);
        lin(&mut p, rng, "head.box.l3", d, 4);

        // alignment attachments (student-only at train time)
        p.insert("align.enc_domain_query", init::normal(rng, &[d], 0.0, 1.0));
        p.insert("align.dec_domain_query", init::normal(rng, &[d], 0.0, 1.0));
        for disc in ["enc_dqfa", "dec_dqfa", "bgpa", "tifa"] {
            lin(&mut p, rng, &format!("align.disc_{disc}.l1"), d, self.cfg.disc_hidden);
            lin(&mut p, rng, &format!("align.disc_{disc}.l2"), self.cfg.disc_hidden, 1);
        }
        lin(&mut p, rng, "align.proto.l1", d, d);
        lin(&mut p, rng, "align.proto.l2", d, self.cfg.n_prototypes * d);
        p.insert("align.gcn.w1", init::xavier_uniform(rng, &[d, d], d, d));
        p.insert("align.gcn.w2", init::xavier_uniform(rng, &[d, d], d, d));

        p
    }

    /// CNN feature maps at strides 8/16/32 (channel widths per
    /// [`BACKBONE_CHANNELS`][3..]).
    pub fn extract_features<F: Element>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<'_, F>,
        images: TensorId,
    ) -> Result<[TensorId; N_LEVELS]> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be (B,3,H,W) with H,W multiples of 32, got {shape:?}"
            )));
        }
        let mut x = images;
        let mut outs = Vec::new();
        for i in 1..=5 {
            let w = b.get(g, &format!("backbone.conv{i}.w"));
            let bias = b.get(g, &format!("backbone.conv{i}.b"));
            x = g.conv2d(x, w, bias, 2, 1);
            x = g.relu(x);
            if i >= 3 {
                outs.push(x);
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }

    /// Flatten, project, and position-encode the level maps.
    pub fn tokenize<F: Element>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<'_, F>,
        features: &[TensorId; N_LEVELS],
    ) -> MultiScaleTokens {
        let d = self.cfg.d_model;
        let level_embed = b.get(g, "level_embed");
        let mut token_parts = Vec::new();
        let mut pos_parts = Vec::new();
        let mut level_index = Vec::new();
        let mut spatial_shapes = Vec::new();
        for (lvl, &fmap) in features.iter().enumerate() {
            let shape = g.shape(fmap).to_vec();
            let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let flat = g.reshape(fmap, &[bs, c, h * w]);
            let seq = g.permute(flat, &[0, 2, 1]); // (B, hw, C)
            let pw = b.get(g, &format!("proj.{lvl}.w"));
            let pb = b.get(g, &format!("proj.{lvl}.b"));
            let tok = g.linear(seq, pw, pb); // (B, hw, d)
            token_parts.push(tok);

            let sin = g.constant(sin_pos_2d::<F>(h, w, d));
            let le = g.index_select(level_embed, 0, &[lvl]); // (1, d)
            let pos = g.add(sin, le); // (hw, d)
            pos_parts.push(pos);

            level_index.extend(std::iter::repeat(lvl).take(h * w));
            spatial_shapes.push((h, w));
        }
        let tokens = g.concat(1, &token_parts);
        let pos = g.concat(0, &pos_parts);
        MultiScaleTokens { tokens, pos, level_index, spatial_shapes }
    }

    /// Dense self-attention over the full multi-scale sequence. When a
    /// domain query is supplied it is prepended as token 0 (attending to and
    /// attended by every image token) and returned separately.
    pub fn encode<F: Element>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<'_, F>,
        tokens: &MultiScaleTokens,
        domain_query: Option<TensorId>,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let d = self.cfg.d_model;
        let tshape = g.shape(tokens.tokens).to_vec();
        if tshape[2] != d {
            return Err(Error::Shape(format!(
                "token width {} does not match model width {d}",
                tshape[2]
            )));
        }
        let (bs, t) = (tshape[0], tshape[1]);
        let (mut x, pos) = match domain_query {
            Some(dq) => {
                let dq2 = g.reshape(dq, &[1, d]);
                let dqb = g.tile_batch(dq2, bs); // (B,1,d)
                let x = g.concat(1, &[dqb, tokens.tokens]);
                let zero = g.constant(ArrayD::zeros(IxDyn(&[1, d])));
                let pos = g.concat(0, &[zero, tokens.pos]);
                (x, pos)
            }
            None => (tokens.tokens, tokens.pos),
        };
        for i in 0..self.cfg.n_encoder_layers {
            let qk = g.add(x, pos);
            let attn = mha(g, b, &format!("enc.{i}.attn"), qk, qk, x, self.cfg.n_heads);
            x = add_norm(g, b, &format!("enc.{i}.norm1"), x, attn);
            let f = ffn(g, b, &format!("enc.{i}.ffn"), x);
            x = add_norm(g, b, &format!("enc.{i}.norm2"), x, f);
        }
        match domain_query {
            Some(_) => {
                let dom = g.narrow(x, 1, 0, 1);
                let dom = g.reshape(dom, &[bs, d]);
                let img = g.narrow(x, 1, 1, t);
                Ok((img, Some(dom)))
            }
            None => Ok((x, None)),
        }
    }

    /// Query decoder: self-attention among queries plus cross-attention to
    /// the encoded tokens. The optional decoder domain query joins both and
    /// is returned separately from the object-query features.
    pub fn decode<F: Element>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<'_, F>,
        memory: TensorId,
        mem_pos: TensorId,
        domain_query: Option<TensorId>,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let d = self.cfg.d_model;
        let q = self.cfg.n_queries;
        let mshape = g.shape(memory).to_vec();
        if mshape[2] != d {
            return Err(Error::Shape(format!(
                "memory width {} does not match model width {d}",
                mshape[2]
            )));
        }
        let bs = mshape[0];
        let queries = b.get(g, QUERY_PARAM);
        let mut tgt = g.tile_batch(queries, bs); // (B,Q,d)
        if let Some(dq) = domain_query {
            let dq2 = g.reshape(dq, &[1, d]);
            let dqb = g.tile_batch(dq2, bs);
            tgt = g.concat(1, &[tgt, dqb]); // domain token appended last
        }
        let kpos = g.add(memory, mem_pos);
        for i in 0..self.cfg.n_decoder_layers {
            let sa = mha(g, b, &format!("dec.{i}.self"), tgt, tgt, tgt, self.cfg.n_heads);
            tgt = add_norm(g, b, &format!("dec.{i}.norm1"), tgt, sa);
            let ca = mha(g, b, &format!("dec.{i}.cross"), tgt, kpos, memory, self.cfg.n_heads);
            tgt = add_norm(g, b, &format!("dec.{i}.norm2"), tgt, ca);
            let f = ffn(g, b, &format!("dec.{i}.ffn"), tgt);
            tgt = add_norm(g, b, &format!("dec.{i}.norm3"), tgt, f);
        }
        match domain_query {
            Some(_) => {
                let obj = g.narrow(tgt, 1, 0, q);
                let dom = g.narrow(tgt, 1, q, 1);
                let dom = g.reshape(dom, &[bs, d]);
                Ok((obj, Some(dom)))
            }
            None => Ok((tgt, None)),
        }
    }

    /// Full forward pass over a pixel batch.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<'_, F>,
        pixels: &Array4<f32>,
        opts: ForwardOpts,
    ) -> Result<DetectorForward> {
        let input = g.constant(centered_input::<F>(pixels));
        let features = self.extract_features(g, b, input)?;
        let tokens = self.tokenize(g, b, &features);
        let enc_dq = opts
            .enc_domain_query
            .then(|| b.get(g, "align.enc_domain_query"));
        let (memory, enc_domain_token) = self.encode(g, b, &tokens, enc_dq)?;
        let dec_dq = opts
            .dec_domain_query
            .then(|| b.get(g, "align.dec_domain_query"));
        let (obj, dec_domain_token) = self.decode(g, b, memory, tokens.pos, dec_dq)?;

        let cw = b.get(g, "head.class.w");
        let cb = b.get(g, "head.class.b");
        let class_logits = g.linear(obj, cw, cb);
        let mut h = obj;
        for layer in ["head.box.l1", "head.box.l2"] {
            let w = b.get(g, &format!("{layer}.w"));
            let bias = b.get(g, &format!("{layer}.b"));
            h = g.linear(h, w, bias);
            h = g.relu(h);
        }
        let w3 = b.get(g, "head.box.l3.w");
        let b3 = b.get(g, "head.box.l3.b");
        let box_logits = g.linear(h, w3, b3);
        let box_preds = g.sigmoid(box_logits);

        Ok(DetectorForward {
            class_logits,
            box_preds,
            decoder_features: obj,
            encoder_tokens: memory,
            enc_domain_token,
            dec_domain_token,
            level_index: tokens.level_index,
            spatial_shapes: tokens.spatial_shapes,
        })
    }
}

/// Pixels in [0,1] mapped to [-1,1] and cast to the graph element type.
pub fn centered_input<F: Element>(pixels: &Array4<f32>) -> ArrayD<F> {
    pixels.mapv(|v| F::from_f64((v as f64) * 2.0 - 1.0)).into_dyn()
}

/// Multi-head dense attention (post-norm convention is applied by callers).
fn mha<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    prefix: &str,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    n_heads: usize,
) -> TensorId {
    let (bs, tq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let tk = g.shape(k_in)[1];
    let dh = d / n_heads;
    let project = |g: &mut Graph<F>, b: &mut Binder<'_, F>, name: &str, x: TensorId, t: usize| {
        let w = b.get(g, &format!("{prefix}.{name}.w"));
        let bias = b.get(g, &format!("{prefix}.{name}.b"));
        let y = g.linear(x, w, bias);
        let y = g.reshape(y, &[bs, t, n_heads, dh]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        g.reshape(y, &[bs * n_heads, t, dh])
    };
    let q = project(g, b, "wq", q_in, tq);
    let k = project(g, b, "wk", k_in, tk);
    let v = project(g, b, "wv", v_in, tk);
    let kt = g.permute(k, &[0, 2, 1]);
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.bmm(attn, v); // (B*H, Tq, dh)
    let ctx = g.reshape(ctx, &[bs, n_heads, tq, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[bs, tq, d]);
    let wo = b.get(g, &format!("{prefix}.wo.w"));
    let bo = b.get(g, &format!("{prefix}.wo.b"));
    g.linear(ctx, wo, bo)
}

fn ffn<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    prefix: &str,
    x: TensorId,
) -> TensorId {
    let w1 = b.get(g, &format!("{prefix}.l1.w"));
    let b1 = b.get(g, &format!("{prefix}.l1.b"));
    let w2 = b.get(g, &format!("{prefix}.l2.w"));
    let b2 = b.get(g, &format!("{prefix}.l2.b"));
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

fn add_norm<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    norm: &str,
    x: TensorId,
    sub: TensorId,
) -> TensorId {
    let gamma = b.get(g, &format!("{norm}.g"));
    let beta = b.get(g, &format!("{norm}.b"));
    let s = g.add(x, sub);
    g.layer_norm(s, gamma, beta, 1e-5)
}

/// Fixed 2-D sinusoidal position encoding for an h x w grid, (hw, d).
fn sin_pos_2d<F: Element>(h: usize, w: usize, d: usize) -> ArrayD<F> {
    let nf = d / 2;
    let temperature: f64 = 10000.0;
    let two_pi = std::f64::consts::TAU;
    let mut out = Array2::<F>::zeros((h * w, d));
    for y in 0..h {
        let py = (y as f64 + 0.5) / h as f64 * two_pi;
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 * two_pi;
            let p = y * w + x;
            for i in 0..nf / 2 {
                let omega = 1.0 / temperature.powf(2.0 * i as f64 / nf as f64);
                out[(p, 2 * i)] = F::from_f64((py * omega).sin());
                out[(p, 2 * i + 1)] = F::from_f64((py * omega).cos());
                out[(p, nf + 2 * i)] = F::from_f64((px * omega).sin());
                out[(p, nf + 2 * i + 1)] = F::from_f64((px * omega).cos());
            }
        }
    }
    out.into_dyn()
}
