//! Forward passes of the three encoders, on a [`Graph`] or for inference.

use std::collections::HashMap;

use super::vocab::{EOS_ID, SOS_ID};
use super::{acq_name, layer_name, AcquirerKind, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Segment, Var};
use crate::tensor::{Real, Tensor};

/// Rows encoded per inference batch.
const INFERENCE_CHUNK: usize = 256;

/// Binds registry parameters to graph leaves, once per graph.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<ParamId, Var>,
    frozen: bool,
}

impl Binder {
    /// Leaves follow each parameter's trainable flag.
    pub fn new() -> Self {
        Self::default()
    }

    /// Every leaf is a constant: nothing receives a gradient.
    pub fn frozen() -> Self {
        Self {
            vars: HashMap::new(),
            frozen: true,
        }
    }

    /// Makes `name` resolve to an existing graph node instead of a fresh
    /// leaf, so callers can substitute their own values.
    pub fn preset<T: Real>(&mut self, model: &Model<T>, name: &str, var: Var) -> Result<()> {
        let id = model.registry().id(name)?;
        self.vars.insert(id, var);
        Ok(())
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, model: &Model<T>, name: &str) -> Result<Var> {
        let id = model.registry().id(name)?;
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let p = model.registry().get(id);
        let v = g.param(id, p.value.clone(), p.trainable && !self.frozen);
        self.vars.insert(id, v);
        Ok(v)
    }
}

/// Token sequences packed row-wise for one batched forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedText {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Row of each sequence's `[EOS]` token.
    pub eos_rows: Vec<usize>,
}

/// Validates framing, length and ids, then packs sequences back to back.
pub fn pack_sequences(
    seqs: &[Vec<usize>],
    vocab_size: usize,
    max_len: usize,
) -> Result<PackedText> {
    if seqs.is_empty() {
        return Err(Error::Data("empty text batch".into()));
    }
    let mut packed = PackedText {
        ids: Vec::new(),
        positions: Vec::new(),
        segments: Vec::new(),
        eos_rows: Vec::new(),
    };
    for s in seqs {
        if s.len() > max_len {
            return Err(Error::Length {
                len: s.len(),
                max: max_len,
            });
        }
        if s.len() < 2 || s[0] != SOS_ID || s[s.len() - 1] != EOS_ID {
            return Err(Error::Framing);
        }
        if let Some(&bad) = s.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenId {
                vocab: "model",
                id: bad,
                size: vocab_size,
            });
        }
        let start = packed.ids.len();
        packed.ids.extend_from_slice(s);
        packed.positions.extend(0..s.len());
        packed.segments.push(Segment {
            start,
            len: s.len(),
        });
        packed.eos_rows.push(start + s.len() - 1);
    }
    Ok(packed)
}

impl<T: Real> Model<T> {
    fn linear(&self, g: &mut Graph<T>, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var> {
        let wv = b.bind(g, self, w)?;
        let bv = b.bind(g, self, bias)?;
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// One pre-norm transformer layer.
    fn transformer_layer(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        prefix: &str,
        layer: usize,
        x: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let n = |p: &str| layer_name(prefix, layer, p);
        let eps = self.config().layer_norm_eps;
        let (g1, b1) = (b.bind(g, self, &n("ln1_g"))?, b.bind(g, self, &n("ln1_b"))?);
        let a = g.layer_norm(x, g1, b1, eps)?;
        let q = self.linear(g, b, a, &n("wq"), &n("bq"))?;
        let k = self.linear(g, b, a, &n("wk"), &n("bk"))?;
        let v = self.linear(g, b, a, &n("wv"), &n("bv"))?;
        let att = g.attention(q, k, v, segments, self.config().num_heads, causal)?;
        let o = self.linear(g, b, att, &n("wo"), &n("bo"))?;
        let h = g.add(x, o)?;
        let (g2, b2) = (b.bind(g, self, &n("ln2_g"))?, b.bind(g, self, &n("ln2_b"))?);
        let c = g.layer_norm(h, g2, b2, eps)?;
        let f = self.linear(g, b, c, &n("w1"), &n("b1"))?;
        let f = g.gelu(f);
        let f = self.linear(g, b, f, &n("w2"), &n("b2"))?;
        g.add(h, f)
    }

    /// Residual bottleneck `X + W_up·act(W_down·X + b_down) + b_up`.
    pub fn acquirer_var(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        x: Var,
        lang: &str,
        layer: usize,
    ) -> Result<Var> {
        self.check_language(lang)?;
        if layer >= self.config().num_layers {
            return Err(Error::Shape(format!(
                "acquirer layer {layer} out of range for {} layers",
                self.config().num_layers
            )));
        }
        let down = self.linear(
            g,
            b,
            x,
            &acq_name(lang, layer, "w_down"),
            &acq_name(lang, layer, "b_down"),
        )?;
        let act = match self.config().acquirer_kind {
            AcquirerKind::Mlp => g.relu(down),
            AcquirerKind::Linear => down,
        };
        let up = self.linear(
            g,
            b,
            act,
            &acq_name(lang, layer, "w_up"),
            &acq_name(lang, layer, "b_up"),
        )?;
        g.add(x, up)
    }

    fn text_stack(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        mut x: Var,
        packed: &PackedText,
        acquirers: Option<&str>,
    ) -> Result<Var> {
        for l in 0..self.config().num_layers {
            x = self.transformer_layer(g, b, "text", l, x, &packed.segments, true)?;
            if let Some(lang) = acquirers {
                x = self.acquirer_var(g, b, x, lang, l)?;
            }
        }
        let eos = g.select_rows(x, &packed.eos_rows)?;
        let wa = b.bind(g, self, "heads.text_proj")?;
        g.matmul(eos, wa)
    }

    /// Native sentence representations, `[B × proj_dim]`.
    pub fn native_text_forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        seqs: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = self.config();
        let packed = pack_sequences(seqs, self.native_vocab().len(), cfg.max_text_len)?;
        let emb = b.bind(g, self, "text.tok_emb")?;
        let pos = b.bind(g, self, "text.pos_emb")?;
        let e = g.select_rows(emb, &packed.ids)?;
        let p = g.select_rows(pos, &packed.positions)?;
        let h0 = g.add(e, p)?;
        self.text_stack(g, b, h0, &packed, None)
    }

    /// Non-native sentence representations through `lang`'s acquirers, or
    /// with the acquirers skipped when `bypass` is set.
    pub fn nonnative_text_forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        seqs: &[Vec<usize>],
        lang: &str,
        bypass: bool,
    ) -> Result<Var> {
        self.check_language(lang)?;
        let cfg = self.config();
        let packed = pack_sequences(seqs, self.nonnative_vocab().len(), cfg.max_text_len)?;
        let emb = b.bind(g, self, "nonnative.tok_emb")?;
        let proj = b.bind(g, self, "nonnative.in_proj")?;
        let pos = b.bind(g, self, "text.pos_emb")?;
        let u = g.select_rows(emb, &packed.ids)?;
        let e = g.matmul(u, proj)?;
        let p = g.select_rows(pos, &packed.positions)?;
        let x0 = g.add(e, p)?;
        self.text_stack(g, b, x0, &packed, (!bypass).then_some(lang))
    }

    /// Image representations, `[B × proj_dim]`, from `[N × patch_dim]` patches.
    pub fn image_forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        images: &[&Tensor<T>],
    ) -> Result<Var> {
        let cfg = self.config();
        let (n, pd) = (cfg.patch_count, cfg.patch_dim);
        if images.is_empty() {
            return Err(Error::Data("empty image batch".into()));
        }
        let mut flat = Vec::with_capacity(images.len() * n * pd);
        for img in images {
            if img.shape() != [n, pd] {
                return Err(Error::Shape(format!(
                    "image of shape {:?}, expected [{n}, {pd}]",
                    img.shape()
                )));
            }
            flat.extend_from_slice(img.data());
        }
        let bsz = images.len();
        let patches = g.constant(Tensor::new(vec![bsz * n, pd], flat)?);
        let wp = b.bind(g, self, "vision.patch_proj")?;
        let proj = g.matmul(patches, wp)?;
        let cls = b.bind(g, self, "vision.class_emb")?;
        let cls_rows = g.select_rows(cls, &vec![0; bsz])?;
        let stacked = g.concat_rows(&[cls_rows, proj])?;
        let mut order = Vec::with_capacity(bsz * (n + 1));
        let mut positions = Vec::with_capacity(bsz * (n + 1));
        let mut segments = Vec::with_capacity(bsz);
        for i in 0..bsz {
            segments.push(Segment {
                start: order.len(),
                len: n + 1,
            });
            order.push(i);
            order.extend((0..n).map(|p| bsz + i * n + p));
            positions.extend(0..=n);
        }
        let z = g.select_rows(stacked, &order)?;
        let pos = b.bind(g, self, "vision.pos_emb")?;
        let pe = g.select_rows(pos, &positions)?;
        let mut z = g.add(z, pe)?;
        for l in 0..cfg.num_layers {
            z = self.transformer_layer(g, b, "vision", l, z, &segments, false)?;
        }
        let class_rows: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let cls_out = g.select_rows(z, &class_rows)?;
        let wb = b.bind(g, self, "heads.image_proj")?;
        g.matmul(cls_out, wb)
    }

    fn infer_chunked<I>(
        &self,
        items: &[I],
        f: impl Fn(&mut Graph<T>, &mut Binder, &[I]) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let p = self.config().proj_dim;
        let mut data = Vec::with_capacity(items.len() * p);
        for chunk in items.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let mut b = Binder::frozen();
            let out = f(&mut g, &mut b, chunk)?;
            data.extend_from_slice(g.value(out).data());
        }
        Tensor::new(vec![items.len(), p], data)
    }

    pub fn encode_native_texts(&self, seqs: &[Vec<usize>]) -> Result<Tensor<T>> {
        self.infer_chunked(seqs, |g, b, c| self.native_text_forward(g, b, c))
    }

    pub fn encode_nonnative_texts(&self, seqs: &[Vec<usize>], lang: &str) -> Result<Tensor<T>> {
        self.check_language(lang)?;
        self.infer_chunked(seqs, |g, b, c| {
            self.nonnative_text_forward(g, b, c, lang, false)
        })
    }

    /// Non-native encoding with every acquirer skipped.
    pub fn encode_nonnative_bypassed(&self, seqs: &[Vec<usize>], lang: &str) -> Result<Tensor<T>> {
        self.check_language(lang)?;
        self.infer_chunked(seqs, |g, b, c| {
            self.nonnative_text_forward(g, b, c, lang, true)
        })
    }

    pub fn encode_images(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.infer_chunked(images, |g, b, c| {
            let refs: Vec<&Tensor<T>> = c.iter().collect();
            self.image_forward(g, b, &refs)
        })
    }

    pub fn encode_native_text(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let out = self.encode_native_texts(&[tokens.to_vec()])?;
        out.reshape(&[self.config().proj_dim])
    }

    pub fn encode_nonnative_text(&self, tokens: &[usize], lang: &str) -> Result<Tensor<T>> {
        let out = self.encode_nonnative_texts(&[tokens.to_vec()], lang)?;
        out.reshape(&[self.config().proj_dim])
    }

    pub fn encode_image(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.encode_images(std::slice::from_ref(patches))?;
        out.reshape(&[self.config().proj_dim])
    }

    /// Applies one acquirer to `[seq × d]` hidden states.
    pub fn acquirer_forward(&self, x: &Tensor<T>, lang: &str, layer: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let xv = g.constant(x.clone());
        let out = self.acquirer_var(&mut g, &mut b, xv, lang, layer)?;
        Ok(g.value(out).clone())
    }
}
