//! Graph builders for every forward computation. Training code differentiates
//! through these; the plain-tensor entry points at the bottom wrap them.

use super::params::{BlockSlots, Model};
use super::{ModelConfig, ModelError};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::tokenizer::IMG;

/// Parameters placed on a graph, one node per tensor.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, slot: usize) -> NodeId {
        self.nodes[slot]
    }
}

/// One sequence for [`Model::lm_hidden`]. When `prefix` is set and the first
/// token is `<img>`, that token's slot is replaced by the `n_prefix` prefix rows.
#[derive(Clone, Copy, Debug)]
pub struct LmInput<'a> {
    pub prefix: Option<NodeId>,
    pub tokens: &'a [u32],
}

/// Stacked hidden states of a batch with the bookkeeping to find token rows.
#[derive(Clone, Debug)]
pub struct LmOutput {
    pub hidden: NodeId,
    starts: Vec<usize>,
    shifts: Vec<usize>,
    lens: Vec<usize>,
}

impl LmOutput {
    /// Row holding the output (next-token prediction) at token `j` of sequence `s`.
    pub fn row(&self, s: usize, j: usize) -> usize {
        self.starts[s] + self.shifts[s] + j
    }

    /// Number of positions sequence `s` occupies after prefix expansion.
    pub fn positions(&self, s: usize) -> usize {
        self.lens[s]
    }

    pub fn segments(&self) -> &[usize] {
        &self.lens
    }
}

fn block_forward(
    g: &mut Graph,
    p: &Bound,
    s: &BlockSlots,
    x: NodeId,
    segments: &[usize],
    heads: usize,
    causal: bool,
) -> Result<NodeId, ModelError> {
    let h = g.layer_norm(x, p.node(s.ln1_g), p.node(s.ln1_b))?;
    let q = g.matmul(h, p.node(s.wq))?;
    let k = g.matmul(h, p.node(s.wk))?;
    let v = g.matmul(h, p.node(s.wv))?;
    let a = g.attention(q, k, v, segments, heads, causal)?;
    let a = g.matmul(a, p.node(s.wo))?;
    let a = g.add(a, p.node(s.bo))?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, p.node(s.ln2_g), p.node(s.ln2_b))?;
    let h = g.matmul(h, p.node(s.w1))?;
    let h = g.add(h, p.node(s.b1))?;
    let h = g.gelu(h);
    let h = g.matmul(h, p.node(s.w2))?;
    let h = g.add(h, p.node(s.b2))?;
    Ok(g.add(x, h)?)
}

/// Rearranges an `H×W×C` image into `[n_patches × patch_dim]`, patches in row-major order.
pub(crate) fn patchify(cfg: &ModelConfig, pixels: &[f32], out: &mut Vec<f32>) {
    let (size, ps, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = size / ps;
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..ps {
                let row = (py * ps + y) * size + px * ps;
                out.extend_from_slice(&pixels[row * ch..(row + ps) * ch]);
            }
        }
    }
}

impl Model {
    /// Places every parameter on `g`: trainable ones as gradient leaves, the rest as constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[bool]) -> Bound {
        let nodes = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.get(i).copied().unwrap_or(false) {
                    g.param(i, t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { nodes }
    }

    /// L2-normalized image embeddings `[B×d_img]`.
    pub fn encode_images_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &[&[f32]],
    ) -> Result<NodeId, ModelError> {
        let cfg = self.config();
        let mut data = Vec::with_capacity(images.len() * cfg.pixel_count());
        for img in images {
            if img.len() != cfg.pixel_count() {
                return Err(ModelError::ShapeMismatch(format!(
                    "image has {} values, expected {}",
                    img.len(),
                    cfg.pixel_count()
                )));
            }
            patchify(cfg, img, &mut data);
        }
        let np = cfg.n_patches();
        let x = g.constant(Tensor::new(&[images.len() * np, cfg.patch_dim()], data)?);
        let pooled = self.encoder_trunk(g, p, x, images.len())?;
        Ok(g.l2_normalize_rows(pooled))
    }

    /// Mean-pooled encoder features before normalization.
    fn encoder_trunk(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: NodeId,
        batch: usize,
    ) -> Result<NodeId, ModelError> {
        let cfg = self.config();
        let s = self.slots();
        let np = cfg.n_patches();
        let x = g.matmul(patches, p.node(s.patch_w))?;
        let x = g.add(x, p.node(s.patch_b))?;
        let pos = g.gather_rows(
            p.node(s.enc_pos),
            &(0..batch * np).map(|i| i % np).collect::<Vec<_>>(),
        )?;
        let mut x = g.add(x, pos)?;
        let segments = vec![np; batch];
        for b in &s.enc_blocks {
            x = block_forward(g, p, b, x, &segments, cfg.n_heads, false)?;
        }
        let x = g.layer_norm(x, p.node(s.enc_ln_g), p.node(s.enc_ln_b))?;
        Ok(g.mean_rows(x, &segments)?)
    }

    /// Soft prefix `[B·n_prefix × d_model]` from image embeddings `[B×d_img]`;
    /// rows `i·n_prefix..(i+1)·n_prefix` belong to image `i`.
    pub fn project_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        image_embs: NodeId,
    ) -> Result<NodeId, ModelError> {
        let cfg = self.config();
        let s = self.slots();
        let b = g.value(image_embs).rows();
        let y = g.matmul(image_embs, p.node(s.proj_w))?;
        let y = g.add(y, p.node(s.proj_b))?;
        Ok(g.reshape(y, &[b * cfg.n_prefix, cfg.d_model])?)
    }

    /// Final-norm hidden states for a batch of sequences, stacked row-wise.
    pub fn lm_hidden(
        &self,
        g: &mut Graph,
        p: &Bound,
        seqs: &[LmInput],
    ) -> Result<LmOutput, ModelError> {
        let cfg = self.config();
        let s = self.slots();
        let mut pieces = Vec::new();
        let mut positions = Vec::new();
        let (mut starts, mut shifts, mut lens) = (Vec::new(), Vec::new(), Vec::new());
        let mut row = 0;
        for seq in seqs {
            if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(ModelError::InvalidToken {
                    id: bad,
                    size: cfg.vocab_size,
                });
            }
            let expand = seq.prefix.is_some() && seq.tokens.first() == Some(&IMG);
            let (text, shift) = if expand {
                (&seq.tokens[1..], cfg.n_prefix - 1)
            } else {
                (seq.tokens, 0)
            };
            let len = text.len() + if expand { cfg.n_prefix } else { 0 };
            if len > cfg.context_len {
                return Err(ModelError::ContextOverflow {
                    needed: len,
                    limit: cfg.context_len,
                });
            }
            if len == 0 {
                return Err(ModelError::ShapeMismatch("empty sequence".into()));
            }
            if expand {
                let prefix = seq.prefix.expect("checked");
                if g.value(prefix).shape() != [cfg.n_prefix, cfg.d_model] {
                    return Err(ModelError::ShapeMismatch(format!(
                        "prefix {:?}, expected [{}, {}]",
                        g.value(prefix).shape(),
                        cfg.n_prefix,
                        cfg.d_model
                    )));
                }
                pieces.push(prefix);
            }
            if !text.is_empty() {
                let ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
                pieces.push(g.embedding(p.node(s.tok_emb), &ids)?);
            }
            positions.extend(0..len);
            starts.push(row);
            shifts.push(shift);
            lens.push(len);
            row += len;
        }
        let x = if pieces.len() == 1 {
            pieces[0]
        } else {
            g.concat_rows(&pieces)?
        };
        let pos = g.gather_rows(p.node(s.pos_emb), &positions)?;
        let mut x = g.add(x, pos)?;
        for b in &s.lm_blocks {
            x = block_forward(g, p, b, x, &lens, cfg.n_heads, true)?;
        }
        let hidden = g.layer_norm(x, p.node(s.lm_ln_g), p.node(s.lm_ln_b))?;
        Ok(LmOutput {
            hidden,
            starts,
            shifts,
            lens,
        })
    }

    /// Tied-head logits for selected hidden rows.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        hidden: NodeId,
        rows: &[usize],
    ) -> Result<NodeId, ModelError> {
        let h = g.gather_rows(hidden, rows)?;
        Ok(g.matmul_nt(h, p.node(self.slots().tok_emb))?)
    }

    /// Mean final-norm LM features `[B×d_model]` for text-only sequences.
    pub fn text_features_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        texts: &[&[u32]],
    ) -> Result<NodeId, ModelError> {
        let seqs: Vec<LmInput> = texts
            .iter()
            .map(|t| LmInput {
                prefix: None,
                tokens: t,
            })
            .collect();
        let out = self.lm_hidden(g, p, &seqs)?;
        Ok(g.mean_rows(out.hidden, out.segments())?)
    }

    /// Contrast head applied to LM features, L2-normalized `[B×d_img]`.
    pub fn contrast_head_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: NodeId,
    ) -> Result<NodeId, ModelError> {
        let s = self.slots();
        let y = g.matmul(features, p.node(s.head_w))?;
        let y = g.add(y, p.node(s.head_b))?;
        Ok(g.l2_normalize_rows(y))
    }

    /// Symmetric InfoNCE over the `B×B` similarity matrix, scaled by `1/exp(log_temp)`.
    pub fn contrastive_loss_graph(
        g: &mut Graph,
        image_embs: NodeId,
        text_embs: NodeId,
        log_temp: NodeId,
    ) -> Result<NodeId, ModelError> {
        let (bi, bt) = (
            g.value(image_embs).shape().to_vec(),
            g.value(text_embs).shape().to_vec(),
        );
        if bi != bt {
            return Err(ModelError::ShapeMismatch(format!(
                "image batch {bi:?} vs text batch {bt:?}"
            )));
        }
        let b = bi[0];
        let sims = g.matmul_nt(image_embs, text_embs)?;
        let neg = g.scale(log_temp, -1.0);
        let inv_t = g.exp(neg);
        let logits = g.mul_scalar(sims, inv_t)?;
        let logits_t = g.transpose(logits)?;
        let targets: Vec<usize> = (0..b).collect();
        let ones = vec![1.0; b];
        let l1 = g.cross_entropy(logits, &targets, &ones)?;
        let l2 = g.cross_entropy(logits_t, &targets, &ones)?;
        let total = g.add(l1, l2)?;
        Ok(g.scale(total, 0.5))
    }

    // ---- plain-tensor entry points ----

    fn frozen(&self, g: &mut Graph) -> Bound {
        self.bind(g, &[])
    }

    /// L2-normalized `[d_img]` embedding of one `H×W×C` image with values in `[0,1]`.
    pub fn encode_image(&self, pixels: &[f32]) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let e = self.encode_images_graph(&mut g, &p, &[pixels])?;
        Ok(g.value(e).data().to_vec())
    }

    /// Soft prefix `[n_prefix × d_model]` for one image.
    pub fn image_prefix(&self, pixels: &[f32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let e = self.encode_images_graph(&mut g, &p, &[pixels])?;
        let y = self.project_graph(&mut g, &p, e)?;
        Ok(g.value(y).clone())
    }

    /// L2-normalized `[d_img]` text embedding used for image-text matching.
    pub fn encode_text_for_contrast(&self, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let f = self.text_features_graph(&mut g, &p, &[tokens])?;
        let e = self.contrast_head_graph(&mut g, &p, f)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Logits `[T × vocab]`, one row per input token. With a prefix and a leading
    /// `<img>`, the `<img>` row is the output at the last prefix position.
    pub fn lm_forward(
        &self,
        prefix: Option<&Tensor>,
        tokens: &[u32],
    ) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.frozen(&mut g);
        let prefix = prefix.map(|t| g.constant(t.clone()));
        let out = self.lm_hidden(&mut g, &p, &[LmInput { prefix, tokens }])?;
        let rows: Vec<usize> = (0..tokens.len()).map(|j| out.row(0, j)).collect();
        let logits = self.logits_graph(&mut g, &p, out.hidden, &rows)?;
        Ok(g.value(logits).clone())
    }
}

/// Symmetric InfoNCE on already-normalized embeddings.
pub fn contrastive_loss(
    image_embs: &Tensor,
    text_embs: &Tensor,
    temperature: f32,
) -> Result<f32, ModelError> {
    let mut g = Graph::new();
    let i = g.constant(image_embs.clone());
    let t = g.constant(text_embs.clone());
    let lt = g.constant(Tensor::new(&[1], vec![temperature.ln()])?);
    let l = Model::contrastive_loss_graph(&mut g, i, t, lt)?;
    Ok(g.value(l).item())
}
