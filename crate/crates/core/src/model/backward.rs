//! Reverse accumulation through a taped forward.
//!
//! Cached keys and values are constants. Gradients reach the tuned projectors
//! through mask rows and, when a frozen buffer is supplied (target
//! pre-training fixtures only), the frozen parameters through token rows.

use crate::layout::{AttentionLayout, Route};
use crate::scalar::Scalar;
use crate::tensor::{dot, gelu_grad, outer_acc, rmsnorm_backward, vec_mat_t, Mat};

use super::forward::ForwardTape;
use super::weights::{AttnWeights, DraftWeights, FrozenWeights};
use super::{KvStore, TokenId, Transformer};

/// Gradient buffers to accumulate into. `None` means the parameters are constants.
pub struct GradTargets<'a, S> {
    pub draft: Option<&'a mut DraftWeights<S>>,
    pub frozen: Option<&'a mut FrozenWeights<S>>,
}

impl<S: Scalar> Transformer<S> {
    /// Backpropagates `d_logits` (and an optional extra gradient on the final
    /// hidden states) through `tape`. Returns the gradient with respect to each
    /// row's initial state: the token embedding for frozen rows and the
    /// injected mask state for mask rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        tape: &ForwardTape<S>,
        kv: &KvStore<S>,
        layout: &AttentionLayout,
        tokens: &[TokenId],
        d_logits: &Mat<S>,
        d_hidden: Option<&Mat<S>>,
        grads: &mut GradTargets<'_, S>,
    ) -> Mat<S> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = layout.n_rows();
        let hidden = tape.hidden.as_ref().expect("taped forward");
        let x_final = tape.x_final.as_ref().expect("taped forward");

        let mut dx = Mat::zeros(n, d);
        for i in 0..n {
            let mut dh = vec_mat_t(d_logits.row(i), &self.frozen.head);
            if let Some(extra) = d_hidden {
                for (a, &b) in dh.iter_mut().zip(extra.row(i)) {
                    *a += b;
                }
            }
            let dgain = match grads.frozen.as_deref_mut() {
                Some(fg) => {
                    outer_acc(&mut fg.head, hidden.row(i), d_logits.row(i));
                    Some(&mut fg.final_norm[..])
                }
                None => None,
            };
            let dxi = rmsnorm_backward(x_final.row(i), &self.frozen.final_norm, tape.inv_final[i], &dh, dgain);
            dx.row_mut(i).copy_from_slice(&dxi);
        }

        for lt in tape.layers.iter().rev() {
            self.layer_backward(lt, &tape.cols, kv, layout, &mut dx, grads);
        }

        if let Some(fg) = grads.frozen.as_deref_mut() {
            for (row, &t) in layout.frozen_rows().zip(tokens) {
                for (e, &g) in fg.embed.row_mut(t).iter_mut().zip(dx.row(row)) {
                    *e += g;
                }
            }
        }
        dx
    }

    fn layer_backward(
        &self,
        lt: &super::forward::LayerTape<S>,
        cols: &[Vec<usize>],
        kv: &KvStore<S>,
        layout: &AttentionLayout,
        dx: &mut Mat<S>,
        grads: &mut GradTargets<'_, S>,
    ) {
        let cfg = &self.config;
        let l = lt.layer;
        let (n, d) = dx.shape();
        let hd = cfg.head_dim();
        let layer = &self.frozen.layers[l];
        let rows = layout.rows();
        let cache = layout.cache_len();
        let first_draft = cfg.first_draft_layer();

        // Feed-forward block and its residual.
        let mut do_ = Mat::zeros(n, d);
        for &i in &lt.active {
            let dy = dx.row(i).to_vec();
            let dg = vec_mat_t(&dy, &layer.w2);
            let dh1: Vec<S> = dg.iter().zip(lt.h1.row(i)).map(|(&g, &h)| g * gelu_grad(h)).collect();
            let df = vec_mat_t(&dh1, &layer.w1);
            let dgain = match grads.frozen.as_deref_mut() {
                Some(fg) => {
                    let fl = &mut fg.layers[l];
                    outer_acc(&mut fl.w2, lt.g.row(i), &dy);
                    outer_acc(&mut fl.w1, lt.f.row(i), &dh1);
                    Some(&mut fl.ffn_norm[..])
                }
                None => None,
            };
            let dmid_norm = rmsnorm_backward(lt.x_mid.row(i), &layer.ffn_norm, lt.inv_ffn[i], &df, dgain);
            let dmid: Vec<S> = dy.iter().zip(&dmid_norm).map(|(&a, &b)| a + b).collect();

            let w = self.attn_weights(l, rows[i].route);
            do_.row_mut(i).copy_from_slice(&vec_mat_t(&dmid, &w.wo));
            if let Some(g) = attn_grad(grads, l, first_draft, rows[i].route) {
                outer_acc(&mut g.wo, lt.o.row(i), &dmid);
            }
            dx.row_mut(i).copy_from_slice(&dmid);
        }

        // Attention core. Only in-forward keys and values carry gradient.
        let scale = S::one() / S::of(hd as f64).sqrt();
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        for &i in &lt.active {
            let vis = &cols[i];
            for h in 0..cfg.n_heads {
                let span = h * hd..(h + 1) * hd;
                let p = &lt.probs[i][h];
                let doh = do_.row(i)[span.clone()].to_vec();
                let mut dp = Vec::with_capacity(vis.len());
                for &c in vis {
                    let vc = if c < cache { kv.value(l, c) } else { lt.v.row(c - cache) };
                    dp.push(dot(&doh, &vc[span.clone()]));
                }
                let mean = dot(p, &dp);
                let qh = lt.q.row(i)[span.clone()].to_vec();
                let mut dqh = vec![S::zero(); hd];
                for ((&c, &pc), &dpc) in vis.iter().zip(p).zip(&dp) {
                    let ds = pc * (dpc - mean) * scale;
                    let kc = if c < cache { kv.key(l, c) } else { lt.k.row(c - cache) };
                    for (a, &b) in dqh.iter_mut().zip(&kc[span.clone()]) {
                        *a += ds * b;
                    }
                    if c >= cache {
                        let j = c - cache;
                        for (a, &b) in dk.row_mut(j)[span.clone()].iter_mut().zip(&qh) {
                            *a += ds * b;
                        }
                        for (a, &b) in dv.row_mut(j)[span.clone()].iter_mut().zip(&doh) {
                            *a += pc * b;
                        }
                    }
                }
                for (a, &b) in dq.row_mut(i)[span].iter_mut().zip(&dqh) {
                    *a += b;
                }
            }
        }

        // Projections, rotary encoding, and the attention norm.
        for &i in &lt.active {
            let pos = rows[i].position;
            let mut dqi = dq.row(i).to_vec();
            let mut dki = dk.row(i).to_vec();
            self.rope(&mut dqi, pos, true);
            self.rope(&mut dki, pos, true);
            let dvi = dv.row(i);
            let w = self.attn_weights(l, rows[i].route);
            let mut da = vec_mat_t(&dqi, &w.wq);
            for (a, b) in da.iter_mut().zip(vec_mat_t(&dki, &w.wk)) {
                *a += b;
            }
            for (a, b) in da.iter_mut().zip(vec_mat_t(dvi, &w.wv)) {
                *a += b;
            }
            if let Some(g) = attn_grad(grads, l, first_draft, rows[i].route) {
                outer_acc(&mut g.wq, lt.a.row(i), &dqi);
                outer_acc(&mut g.wk, lt.a.row(i), &dki);
                outer_acc(&mut g.wv, lt.a.row(i), dvi);
            }
            let dgain = grads.frozen.as_deref_mut().map(|fg| &mut fg.layers[l].attn_norm[..]);
            let dxa = rmsnorm_backward(lt.x_in.row(i), &layer.attn_norm, lt.inv_attn[i], &da, dgain);
            for (a, b) in dx.row_mut(i).iter_mut().zip(dxa) {
                *a += b;
            }
        }
    }
}

fn attn_grad<'g, S>(
    grads: &'g mut GradTargets<'_, S>,
    layer: usize,
    first_draft: usize,
    route: Route,
) -> Option<&'g mut AttnWeights<S>> {
    match route {
        Route::Frozen => grads.frozen.as_deref_mut().map(|f| &mut f.layers[layer].attn),
        Route::Mask => grads.draft.as_deref_mut().map(|g| &mut g.layers[layer - first_draft]),
    }
}
