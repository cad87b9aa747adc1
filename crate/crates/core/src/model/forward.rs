use crate::error::{Error, Result};
use crate::layout::{validate_layout, AttentionLayout, Route};
use crate::scalar::Scalar;
use crate::tensor::{dot, gelu, rmsnorm_into, vec_mat_into, Mat};

use super::weights::AttnWeights;
use super::{KvStore, TokenId, Transformer};

/// Per-row results of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<S> {
    /// Final hidden state of each row after the output norm (input to the LM head).
    pub hidden: Mat<S>,
    pub logits: Mat<S>,
    /// Layout rows whose KV was appended to the persistent store, in order.
    pub appended: Vec<usize>,
}

/// Activations of one layer kept for the backward pass. Matrices span every
/// layout row; rows not active in the layer stay zero.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<S> {
    pub layer: usize,
    pub active: Vec<usize>,
    pub x_in: Mat<S>,
    pub a: Mat<S>,
    pub inv_attn: Vec<S>,
    pub q: Mat<S>,
    pub k: Mat<S>,
    pub v: Mat<S>,
    /// `[row][head]` attention weights over that row's visible columns.
    pub probs: Vec<Vec<Vec<S>>>,
    pub o: Mat<S>,
    pub x_mid: Mat<S>,
    pub f: Mat<S>,
    pub inv_ffn: Vec<S>,
    pub h1: Mat<S>,
    pub g: Mat<S>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardTape<S> {
    pub layers: Vec<LayerTape<S>>,
    pub cols: Vec<Vec<usize>>,
    pub x_final: Option<Mat<S>>,
    pub inv_final: Vec<S>,
    pub hidden: Option<Mat<S>>,
}

pub(crate) struct ForwardArgs<'a, S> {
    /// Replaces the mask embedding as the injected state of each mask row (in mask-row order).
    pub mask_init: Option<&'a Mat<S>>,
    pub persist: bool,
    pub tape: Option<&'a mut ForwardTape<S>>,
}

impl<S: Scalar> Transformer<S> {
    /// Runs one forward pass over `layout`.
    ///
    /// Frozen rows take their tokens from `tokens` (one per frozen row, in row
    /// order), run every layer with the frozen projectors, and are appended to
    /// `kv`. Mask rows enter at the first draft layer as the mask embedding and
    /// use the tuned projectors; they never touch `kv`.
    pub fn forward(&self, kv: &mut KvStore<S>, layout: &AttentionLayout, tokens: &[TokenId]) -> Result<ForwardOutput<S>> {
        self.forward_with(kv, layout, tokens, ForwardArgs { mask_init: None, persist: true, tape: None })
    }

    /// Like [`forward`](Self::forward) with the injected mask-row states given explicitly.
    pub fn forward_injected(
        &self,
        kv: &mut KvStore<S>,
        layout: &AttentionLayout,
        tokens: &[TokenId],
        mask_init: &Mat<S>,
    ) -> Result<ForwardOutput<S>> {
        self.forward_with(kv, layout, tokens, ForwardArgs { mask_init: Some(mask_init), persist: true, tape: None })
    }

    /// Forward that leaves `kv` untouched; used by training.
    pub(crate) fn forward_taped(
        &self,
        kv: &KvStore<S>,
        layout: &AttentionLayout,
        tokens: &[TokenId],
        tape: &mut ForwardTape<S>,
    ) -> Result<ForwardOutput<S>> {
        let mut scratch = kv.clone();
        self.forward_with(&mut scratch, layout, tokens, ForwardArgs { mask_init: None, persist: false, tape: Some(tape) })
    }

    pub(crate) fn forward_with(
        &self,
        kv: &mut KvStore<S>,
        layout: &AttentionLayout,
        tokens: &[TokenId],
        mut args: ForwardArgs<'_, S>,
    ) -> Result<ForwardOutput<S>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if layout.cache_len() != kv.len() {
            return Err(Error::Layout(format!(
                "layout expects {} cached positions, store holds {}",
                layout.cache_len(),
                kv.len()
            )));
        }
        if let Err(v) = validate_layout(layout) {
            return Err(Error::Layout(v.to_string()));
        }
        let frozen: Vec<usize> = layout.frozen_rows().collect();
        if tokens.len() != frozen.len() {
            return Err(Error::Layout(format!("{} tokens for {} frozen rows", tokens.len(), frozen.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Token { token: t, vocab: cfg.vocab_size });
        }
        let n_mask = layout.n_mask();
        if let Some(init) = args.mask_init {
            if init.shape() != (n_mask, d) {
                return Err(Error::Shape(format!("mask init {:?}, expected ({n_mask}, {d})", init.shape())));
            }
        }

        let n = layout.n_rows();
        let cols: Vec<Vec<usize>> = (0..n).map(|i| layout.visible_cols(i)).collect();
        let all_rows: Vec<usize> = (0..n).collect();
        let mut x = Mat::zeros(n, d);
        for (&row, &t) in frozen.iter().zip(tokens) {
            x.row_mut(row).copy_from_slice(self.frozen.embed.row(t));
        }

        let mut new_keys = Vec::with_capacity(cfg.n_layers);
        let mut new_values = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let draft_layer = cfg.is_draft_layer(l);
            if l == cfg.first_draft_layer() {
                for (m, row) in layout.mask_rows().enumerate() {
                    let src = match args.mask_init {
                        Some(init) => init.row(m),
                        None => &self.draft.mask_embed[..],
                    };
                    x.row_mut(row).copy_from_slice(src);
                }
            }
            let active = if draft_layer { &all_rows } else { &frozen };
            let tape = args.tape.as_deref_mut();
            let (k, v) = self.run_layer(l, &mut x, active, layout, &cols, kv, tape)?;
            let mut lk = Vec::with_capacity(frozen.len() * d);
            let mut lv = Vec::with_capacity(frozen.len() * d);
            for &row in &frozen {
                lk.extend_from_slice(k.row(row));
                lv.extend_from_slice(v.row(row));
            }
            new_keys.push(lk);
            new_values.push(lv);
        }

        let mut hidden = Mat::zeros(n, d);
        let mut inv_final = vec![S::zero(); n];
        for i in 0..n {
            inv_final[i] = rmsnorm_into(x.row(i), &self.frozen.final_norm, S::of(cfg.norm_eps), hidden.row_mut(i));
        }
        let mut logits = Mat::zeros(n, cfg.vocab_size);
        for i in 0..n {
            vec_mat_into(hidden.row(i), &self.frozen.head, logits.row_mut(i));
        }
        if !hidden.is_finite() || !logits.is_finite() {
            return Err(Error::NonFinite("forward activations"));
        }
        if let Some(tape) = args.tape {
            tape.cols = cols;
            tape.x_final = Some(x);
            tape.inv_final = inv_final;
            tape.hidden = Some(hidden.clone());
        }
        let appended = if args.persist {
            kv.append(new_keys, new_values, frozen.len());
            frozen
        } else {
            Vec::new()
        };
        Ok(ForwardOutput { hidden, logits, appended })
    }

    pub(crate) fn attn_weights(&self, layer: usize, route: Route) -> &AttnWeights<S> {
        match route {
            Route::Frozen => &self.frozen.layers[layer].attn,
            Route::Mask => &self.draft.layers[layer - self.config.first_draft_layer()],
        }
    }

    /// Rotates each head's (2i, 2i+1) pairs by `pos · base^(-2i/head_dim)`;
    /// `inverse` rotates the other way (used by backward).
    pub(crate) fn rope(&self, v: &mut [S], pos: usize, inverse: bool) {
        let hd = self.config.head_dim();
        let p = S::of(pos as f64);
        for head in v.chunks_mut(hd) {
            for (i, &freq) in self.inv_freq.iter().enumerate() {
                let angle = p * freq;
                let (sin, cos) = angle.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layer(
        &self,
        l: usize,
        x: &mut Mat<S>,
        active: &[usize],
        layout: &AttentionLayout,
        cols: &[Vec<usize>],
        kv: &KvStore<S>,
        tape: Option<&mut ForwardTape<S>>,
    ) -> Result<(Mat<S>, Mat<S>)> {
        let cfg = &self.config;
        let (n, d) = x.shape();
        let hd = cfg.head_dim();
        let eps = S::of(cfg.norm_eps);
        let layer = &self.frozen.layers[l];
        let cache = layout.cache_len();
        let rows = layout.rows();

        let mut a = Mat::zeros(n, d);
        let mut inv_attn = vec![S::zero(); n];
        let mut q = Mat::zeros(n, d);
        let mut k = Mat::zeros(n, d);
        let mut v = Mat::zeros(n, d);
        for &i in active {
            inv_attn[i] = rmsnorm_into(x.row(i), &layer.attn_norm, eps, a.row_mut(i));
            let w = self.attn_weights(l, rows[i].route);
            vec_mat_into(a.row(i), &w.wq, q.row_mut(i));
            vec_mat_into(a.row(i), &w.wk, k.row_mut(i));
            vec_mat_into(a.row(i), &w.wv, v.row_mut(i));
            self.rope(q.row_mut(i), rows[i].position, false);
            self.rope(k.row_mut(i), rows[i].position, false);
        }

        let scale = S::one() / S::of(hd as f64).sqrt();
        let mut o = Mat::zeros(n, d);
        let mut probs: Vec<Vec<Vec<S>>> = if tape.is_some() { vec![Vec::new(); n] } else { Vec::new() };
        let mut scores: Vec<S> = Vec::new();
        for &i in active {
            let vis = &cols[i];
            if vis.is_empty() {
                return Err(Error::FullyMasked(i));
            }
            for h in 0..cfg.n_heads {
                let span = h * hd..(h + 1) * hd;
                let qh = &q.row(i)[span.clone()];
                scores.clear();
                for &c in vis {
                    let kc = if c < cache { kv.key(l, c) } else { k.row(c - cache) };
                    scores.push(dot(qh, &kc[span.clone()]) * scale);
                }
                let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                let oh = &mut o.row_mut(i)[span.clone()];
                for (&c, &p) in vis.iter().zip(&scores) {
                    let vc = if c < cache { kv.value(l, c) } else { v.row(c - cache) };
                    for (oj, &vj) in oh.iter_mut().zip(&vc[span.clone()]) {
                        *oj += p * vj;
                    }
                }
                if tape.is_some() {
                    probs[i].push(scores.clone());
                }
            }
        }

        let x_in = tape.is_some().then(|| x.clone());
        let mut attn_out = vec![S::zero(); d];
        for &i in active {
            let w = self.attn_weights(l, rows[i].route);
            vec_mat_into(o.row(i), &w.wo, &mut attn_out);
            for (xj, &y) in x.row_mut(i).iter_mut().zip(&attn_out) {
                *xj += y;
            }
        }
        let x_mid = tape.is_some().then(|| x.clone());

        let mut f = Mat::zeros(n, d);
        let mut inv_ffn = vec![S::zero(); n];
        let mut h1 = Mat::zeros(n, cfg.d_ff);
        let mut g = Mat::zeros(n, cfg.d_ff);
        let mut y = vec![S::zero(); d];
        for &i in active {
            inv_ffn[i] = rmsnorm_into(x.row(i), &layer.ffn_norm, eps, f.row_mut(i));
            vec_mat_into(f.row(i), &layer.w1, h1.row_mut(i));
            for (gj, &hj) in g.row_mut(i).iter_mut().zip(h1.row(i)) {
                *gj = gelu(hj);
            }
            vec_mat_into(g.row(i), &layer.w2, &mut y);
            for (xj, &yj) in x.row_mut(i).iter_mut().zip(&y) {
                *xj += yj;
            }
        }

        if let Some(tape) = tape {
            tape.layers.push(LayerTape {
                layer: l,
                active: active.to_vec(),
                x_in: x_in.expect("taped"),
                a,
                inv_attn,
                q,
                k: k.clone(),
                v: v.clone(),
                probs,
                o,
                x_mid: x_mid.expect("taped"),
                f,
                inv_ffn,
                h1,
                g,
            });
        }
        Ok((k, v))
    }
}
