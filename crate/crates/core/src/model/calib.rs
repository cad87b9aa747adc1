use crate::scalar::Scalar;
use crate::tensor::{gelu, vec_mat};

use super::weights::CalibMlp;

/// Intermediates of one calibration evaluation, kept for backward.
#[derive(Debug, Clone)]
pub struct CalibTrace<S> {
    /// `concat(e_bonus, h)`
    pub input: Vec<S>,
    pub pre: Vec<S>,
    pub act: Vec<S>,
    pub calibrated: Vec<S>,
}

/// `logits + U₂·gelu(U₁·concat(e_bonus, hidden) + b₁) + b₂`.
pub fn calibrate<S: Scalar>(logits: &[S], hidden: &[S], bonus_embedding: &[S], mlp: &CalibMlp<S>) -> Vec<S> {
    trace(logits, hidden, bonus_embedding, mlp).calibrated
}

pub(crate) fn trace<S: Scalar>(logits: &[S], hidden: &[S], bonus_embedding: &[S], mlp: &CalibMlp<S>) -> CalibTrace<S> {
    let mut input = Vec::with_capacity(bonus_embedding.len() + hidden.len());
    input.extend_from_slice(bonus_embedding);
    input.extend_from_slice(hidden);
    let mut pre = vec_mat(&input, &mlp.u1);
    for (p, &b) in pre.iter_mut().zip(&mlp.b1) {
        *p += b;
    }
    let act: Vec<S> = pre.iter().map(|&p| gelu(p)).collect();
    let bias = vec_mat(&act, &mlp.u2);
    let calibrated = logits.iter().zip(&bias).zip(&mlp.b2).map(|((&l, &b), &c)| l + (b + c)).collect();
    CalibTrace { input, pre, act, calibrated }
}
