//! Adversarial feature alignment heads: DQFA on the two global domain
//! tokens, BGPA over graph-aggregated prototypes of the decoder outputs,
//! and TIFA over every encoder image token. All heads share the same
//! pattern: gradient reversal, a per-head domain discriminator, and the
//! binary log-likelihood the discriminator maximizes.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use tapegrad::{Binder, Element, Graph, TensorId};

use crate::data::Domain;
use crate::error::{Error, Result};

/// Discriminator probabilities are clamped to [PROB_CLAMP, 1-PROB_CLAMP]
/// before the log so adversarial saturation stays finite.
pub const PROB_CLAMP: f64 = 1e-6;

/// Loss weights lambda1..lambda4 for (enc-DQFA, dec-DQFA, BGPA, TIFA).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeights {
    pub enc_dqfa: f64,
    pub dec_dqfa: f64,
    pub bgpa: f64,
    pub tifa: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        Self { enc_dqfa: 1.0, dec_dqfa: 1.0, bgpa: 1.0, tifa: 1.0 }
    }
}

impl AlignmentWeights {
    pub fn zeros() -> Self {
        Self { enc_dqfa: 0.0, dec_dqfa: 0.0, bgpa: 0.0, tifa: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.enc_dqfa),
            ("lambda2", self.dec_dqfa),
            ("lambda3", self.bgpa),
            ("lambda4", self.tifa),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// 2-linear-layer perceptron d -> d/2 -> 1 with sigmoid output, (N,1).
pub fn discriminator<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    name: &str,
    x: TensorId,
) -> TensorId {
    let w1 = b.get(g, &format!("{name}.l1.w"));
    let b1 = b.get(g, &format!("{name}.l1.b"));
    let w2 = b.get(g, &format!("{name}.l2.w"));
    let b2 = b.get(g, &format!("{name}.l2.b"));
    let h = g.linear(x, w1, b1);
    let h = g.relu(h);
    let logits = g.linear(h, w2, b2);
    g.sigmoid(logits)
}

/// One domain's term of the discriminator log-likelihood:
/// mean log D(f) for source features, mean log(1 - D(f)) for target.
pub fn domain_adv_term<F: Element>(
    g: &mut Graph<F>,
    probs: TensorId,
    domain: Domain,
) -> TensorId {
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let inner = match domain {
        Domain::Source => p,
        Domain::Target => {
            let np = g.neg(p);
            g.add_scalar(np, 1.0)
        }
    };
    let lp = g.ln(inner);
    g.mean_all(lp)
}

/// Reverse gradients, discriminate, and score one domain's features (N,d).
pub fn domain_adv_loss<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    disc_name: &str,
    features: TensorId,
    domain: Domain,
    grl_lambda: f64,
) -> TensorId {
    let rev = g.grad_reverse(features, grl_lambda);
    let probs = discriminator(g, b, disc_name, rev);
    domain_adv_term(g, probs, domain)
}

/// DQFA: the encoder and decoder global tokens (B,d) each judged by their
/// own discriminator.
pub fn dqfa_losses<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    enc_token: Option<TensorId>,
    dec_token: Option<TensorId>,
    domain: Domain,
    grl_lambda: f64,
) -> Result<(Option<TensorId>, Option<TensorId>)> {
    let enc = enc_token
        .map(|t| domain_adv_loss(g, b, "align.disc_enc_dqfa", t, domain, grl_lambda));
    let dec = dec_token
        .map(|t| domain_adv_loss(g, b, "align.disc_dec_dqfa", t, domain, grl_lambda));
    Ok((enc, dec))
}

/// Mean-pool decoder features and expand through a 2-layer perceptron into
/// M prototype vectors per image: (B,Q,d) -> (B,M,d).
pub fn build_prototypes<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    decoder_features: TensorId,
    m: usize,
) -> TensorId {
    let shape = g.shape(decoder_features).to_vec();
    let (bs, d) = (shape[0], shape[2]);
    let pooled = g.mean_axis_op(decoder_features, 1, false); // (B, d)
    let w1 = b.get(g, "align.proto.l1.w");
    let b1 = b.get(g, "align.proto.l1.b");
    let w2 = b.get(g, "align.proto.l2.w");
    let b2 = b.get(g, "align.proto.l2.b");
    let h = g.linear(pooled, w1, b1);
    let h = g.relu(h);
    let flat = g.linear(h, w2, b2); // (B, M*d)
    g.reshape(flat, &[bs, m, d])
}

/// Undirected bi-level graph over prototypes followed by instance features.
pub struct BiLevelGraph {
    /// (B, M+Q, d) node features: prototypes first, then decoder outputs.
    pub nodes: TensorId,
    /// (B, M+Q, M+Q) symmetric weights: cosine similarity on the
    /// prototype-prototype and prototype-instance blocks, unit self-loops,
    /// zero elsewhere.
    pub adjacency: TensorId,
    pub n_prototypes: usize,
}

pub fn build_bilevel_graph<F: Element>(
    g: &mut Graph<F>,
    prototypes: TensorId,
    decoder_features: TensorId,
) -> BiLevelGraph {
    let m = g.shape(prototypes)[1];
    let q = g.shape(decoder_features)[1];
    let n = m + q;
    let nodes = g.concat(1, &[prototypes, decoder_features]); // (B,N,d)

    let sq = g.mul(nodes, nodes);
    let ssum = g.sum_axis_op(sq, 2, true); // (B,N,1)
    let norms = g.sqrt(ssum);
    let nt = g.permute(norms, &[0, 2, 1]); // (B,1,N)
    let denom_raw = g.bmm(norms, nt); // (B,N,N)
    let denom = g.add_scalar(denom_raw, 1e-8);
    let xt = g.permute(nodes, &[0, 2, 1]);
    let dots = g.bmm(nodes, xt);
    let cos = g.div(dots, denom);

    // structural mask: keep proto-proto and proto-instance off-diagonal
    // cosine entries; zero the instance-instance block and the diagonal,
    // then put unit self-loops back.
    let mut mask = Array2::<F>::ones((n, n));
    for i in 0..n {
        mask[(i, i)] = F::zero();
    }
    for i in m..n {
        for j in m..n {
            mask[(i, j)] = F::zero();
        }
    }
    let mut eye = Array2::<F>::zeros((n, n));
    for i in 0..n {
        eye[(i, i)] = F::one();
    }
    let mask = g.constant(mask.into_dyn());
    let eye = g.constant(eye.into_dyn());
    let masked = g.mul(cos, mask);
    let adjacency = g.add(masked, eye);
    BiLevelGraph { nodes, adjacency, n_prototypes: m }
}

/// Two symmetric-normalized graph convolutions (ReLU then identity);
/// returns the first M node rows, (B,M,d).
pub fn gcn_aggregate<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    graph: &BiLevelGraph,
) -> TensorId {
    let shape = g.shape(graph.nodes).to_vec();
    let (bs, n, d) = (shape[0], shape[1], shape[2]);
    let deg = g.sum_axis_op(graph.adjacency, 2, true); // (B,N,1)
    let sqrt_deg = g.sqrt(deg);
    let one = g.constant_scalar(F::one());
    let dinv = g.div(one, sqrt_deg); // (B,N,1)
    let dinv_t = g.permute(dinv, &[0, 2, 1]); // (B,1,N)
    let rows = g.mul(graph.adjacency, dinv);
    let ahat = g.mul(rows, dinv_t);

    let mut h = graph.nodes;
    for (layer, relu) in [("align.gcn.w1", true), ("align.gcn.w2", false)] {
        let w = b.get(g, layer);
        let h2 = g.reshape(h, &[bs * n, d]);
        let hw = g.matmul(h2, w);
        let hw = g.reshape(hw, &[bs, n, d]);
        h = g.bmm(ahat, hw);
        if relu {
            h = g.relu(h);
        }
    }
    g.narrow(h, 1, 0, graph.n_prototypes)
}

/// BGPA: prototypes -> bi-level graph -> GCN -> GRL -> discriminator.
pub fn bgpa_loss<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    decoder_features: TensorId,
    n_prototypes: usize,
    domain: Domain,
    grl_lambda: f64,
) -> TensorId {
    let protos = build_prototypes(g, b, decoder_features, n_prototypes);
    let graph = build_bilevel_graph(g, protos, decoder_features);
    let agg = gcn_aggregate(g, b, &graph);
    let shape = g.shape(agg).to_vec();
    let flat = g.reshape(agg, &[shape[0] * shape[1], shape[2]]);
    domain_adv_loss(g, b, "align.disc_bgpa", flat, domain, grl_lambda)
}

/// TIFA: every encoder image token through the shared discriminator.
pub fn tifa_loss<F: Element>(
    g: &mut Graph<F>,
    b: &mut Binder<'_, F>,
    encoder_tokens: TensorId,
    domain: Domain,
    grl_lambda: f64,
) -> TensorId {
    let shape = g.shape(encoder_tokens).to_vec();
    let flat = g.reshape(encoder_tokens, &[shape[0] * shape[1], shape[2]]);
    domain_adv_loss(g, b, "align.disc_tifa", flat, domain, grl_lambda)
}

/// Weighted combination lambda1*enc + lambda2*dec + lambda3*bgpa + lambda4*tifa.
/// Missing heads contribute nothing; with no heads the result is the zero
/// scalar.
pub fn adv_total<F: Element>(
    g: &mut Graph<F>,
    parts: &[(Option<TensorId>, f64)],
) -> TensorId {
    let mut acc: Option<TensorId> = None;
    for &(head, lambda) in parts {
        let Some(head) = head else { continue };
        let scaled = g.scale(head, lambda);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled),
            None => scaled,
        });
    }
    acc.unwrap_or_else(|| g.constant(ArrayD::zeros(IxDyn(&[]))))
}
