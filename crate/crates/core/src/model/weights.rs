use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Query, key, value, and output projections of one attention layer, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<S> {
    pub wq: Mat<S>,
    pub wk: Mat<S>,
    pub wv: Mat<S>,
    pub wo: Mat<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer<S> {
    pub attn_norm: Vec<S>,
    pub attn: AttnWeights<S>,
    pub ffn_norm: Vec<S>,
    /// `d × d_ff`
    pub w1: Mat<S>,
    /// `d_ff × d`
    pub w2: Mat<S>,
}

/// Target model parameters. Never touched by drafter training.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights<S> {
    /// `|V| × d`
    pub embed: Mat<S>,
    pub layers: Vec<FrozenLayer<S>>,
    pub final_norm: Vec<S>,
    /// Untied, `d × |V|`.
    pub head: Mat<S>,
}

/// Two-layer MLP producing an additive logit bias from `concat(e_bonus, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibMlp<S> {
    /// `2d × d_c`
    pub u1: Mat<S>,
    pub b1: Vec<S>,
    /// `d_c × |V|`
    pub u2: Mat<S>,
    pub b2: Vec<S>,
}

/// Every trainable parameter: tuned projectors of the draft layers, the shared
/// mask embedding, and the calibration MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftWeights<S> {
    /// One entry per draft layer, in layer order.
    pub layers: Vec<AttnWeights<S>>,
    pub mask_embed: Vec<S>,
    pub calib: CalibMlp<S>,
}

/// Name, shape, and flat data of one parameter tensor.
pub type TensorView<'a, S> = (String, Vec<usize>, &'a [S]);

fn normal_mat<S: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| S::of(dist.sample(rng))).collect();
    Mat::from_vec(rows, cols, data).expect("sized")
}

fn normal_vec<S: Scalar, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| S::of(dist.sample(rng))).collect()
}

impl<S: Scalar> AttnWeights<S> {
    fn random<R: Rng>(d: usize, out_std: f64, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: normal_mat(d, d, std, rng),
            wk: normal_mat(d, d, std, rng),
            wv: normal_mat(d, d, std, rng),
            wo: normal_mat(d, d, out_std, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self { wq: Mat::zeros(d, d), wk: Mat::zeros(d, d), wv: Mat::zeros(d, d), wo: Mat::zeros(d, d) }
    }

    fn mats(&self) -> [(&'static str, &Mat<S>); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    fn mats_mut(&mut self) -> [(&'static str, &mut Mat<S>); 4] {
        [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv), ("wo", &mut self.wo)]
    }
}

fn view<'a, S>(name: String, m: &'a Mat<S>) -> TensorView<'a, S>
where
    S: Scalar,
{
    (name, vec![m.rows(), m.cols()], m.data())
}

impl<S: Scalar> FrozenWeights<S> {
    /// Scaled Gaussian initialization with unit norm gains.
    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let residual_std = 1.0 / (d as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| FrozenLayer {
                attn_norm: vec![S::one(); d],
                attn: AttnWeights::random(d, residual_std, rng),
                ffn_norm: vec![S::one(); d],
                w1: normal_mat(d, cfg.d_ff, 1.0 / (d as f64).sqrt(), rng),
                w2: normal_mat(cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt(), rng),
            })
            .collect();
        Self {
            embed: normal_mat(cfg.vocab_size, d, 1.0, rng),
            layers,
            final_norm: vec![S::one(); d],
            head: normal_mat(d, cfg.vocab_size, 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            embed: Mat::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers)
                .map(|_| FrozenLayer {
                    attn_norm: vec![S::zero(); d],
                    attn: AttnWeights::zeros(d),
                    ffn_norm: vec![S::zero(); d],
                    w1: Mat::zeros(d, cfg.d_ff),
                    w2: Mat::zeros(cfg.d_ff, d),
                })
                .collect(),
            final_norm: vec![S::zero(); d],
            head: Mat::zeros(d, cfg.vocab_size),
        }
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        check_same_shapes(&FrozenWeights::<S>::zeros(cfg).tensors(), &self.tensors())
    }

    /// Same shapes, every entry zero. Used as a gradient buffer when pre-training a fixture target.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, _, data| data.iter_mut().for_each(|x| *x = S::zero()));
        z
    }

    pub fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let mut out = vec![view("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), vec![layer.attn_norm.len()], &layer.attn_norm));
            for (n, m) in layer.attn.mats() {
                out.push(view(format!("layers.{l}.{n}"), m));
            }
            out.push((format!("layers.{l}.ffn_norm"), vec![layer.ffn_norm.len()], &layer.ffn_norm));
            out.push(view(format!("layers.{l}.w1"), &layer.w1));
            out.push(view(format!("layers.{l}.w2"), &layer.w2));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(view("head".into(), &self.head));
        out
    }

    /// Visits every parameter tensor in checkpoint order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [S])) {
        let shape = |m: &Mat<S>| vec![m.rows(), m.cols()];
        let s = shape(&self.embed);
        f("embed", &s, self.embed.data_mut());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let n = layer.attn_norm.len();
            f(&format!("layers.{l}.attn_norm"), &[n], &mut layer.attn_norm);
            for (name, m) in layer.attn.mats_mut() {
                let s = shape(m);
                f(&format!("layers.{l}.{name}"), &s, m.data_mut());
            }
            f(&format!("layers.{l}.ffn_norm"), &[n], &mut layer.ffn_norm);
            let s = shape(&layer.w1);
            f(&format!("layers.{l}.w1"), &s, layer.w1.data_mut());
            let s = shape(&layer.w2);
            f(&format!("layers.{l}.w2"), &s, layer.w2.data_mut());
        }
        let n = self.final_norm.len();
        f("final_norm", &[n], &mut self.final_norm);
        let s = shape(&self.head);
        f("head", &s, self.head.data_mut());
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }
}

impl<S: Scalar> DraftWeights<S> {
    /// Starting point for training: projectors copied from the frozen ones,
    /// the mask embedding set to the mean token embedding, and a zero output
    /// layer in the calibration MLP so calibration starts as a no-op.
    pub fn from_frozen<R: Rng>(cfg: &ModelConfig, frozen: &FrozenWeights<S>, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let layers = frozen.layers[cfg.first_draft_layer()..].iter().map(|l| l.attn.clone()).collect();
        let mut mean = vec![S::zero(); d];
        for t in 0..frozen.embed.rows() {
            for (m, &e) in mean.iter_mut().zip(frozen.embed.row(t)) {
                *m += e;
            }
        }
        let n = S::of(frozen.embed.rows() as f64);
        mean.iter_mut().for_each(|m| *m /= n);
        Self {
            layers,
            mask_embed: mean,
            calib: CalibMlp {
                u1: normal_mat(2 * d, cfg.calib_hidden, 1.0 / ((2 * d) as f64).sqrt(), rng),
                b1: vec![S::zero(); cfg.calib_hidden],
                u2: Mat::zeros(cfg.calib_hidden, cfg.vocab_size),
                b2: vec![S::zero(); cfg.vocab_size],
            },
        }
    }

    /// Fully random drafter, calibration included. Decoding must stay lossless
    /// for any drafter, so tests use this to exercise rejection paths.
    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dc = cfg.calib_hidden;
        Self {
            layers: (0..cfg.n_draft_layers).map(|_| AttnWeights::random(d, 1.0 / (d as f64).sqrt(), rng)).collect(),
            mask_embed: normal_vec(d, 1.0, rng),
            calib: CalibMlp {
                u1: normal_mat(2 * d, dc, 1.0 / ((2 * d) as f64).sqrt(), rng),
                b1: normal_vec(dc, 0.1, rng),
                u2: normal_mat(dc, cfg.vocab_size, 1.0 / (dc as f64).sqrt(), rng),
                b2: normal_vec(cfg.vocab_size, 0.1, rng),
            },
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            layers: (0..cfg.n_draft_layers).map(|_| AttnWeights::zeros(d)).collect(),
            mask_embed: vec![S::zero(); d],
            calib: CalibMlp {
                u1: Mat::zeros(2 * d, cfg.calib_hidden),
                b1: vec![S::zero(); cfg.calib_hidden],
                u2: Mat::zeros(cfg.calib_hidden, cfg.vocab_size),
                b2: vec![S::zero(); cfg.vocab_size],
            },
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, m) in layer.mats() {
                out.push(view(format!("draft.layers.{i}.{n}"), m));
            }
        }
        out.push(("draft.mask_embed".into(), vec![self.mask_embed.len()], &self.mask_embed));
        out.push(view("draft.calib.u1".into(), &self.calib.u1));
        out.push(("draft.calib.b1".into(), vec![self.calib.b1.len()], &self.calib.b1));
        out.push(view("draft.calib.u2".into(), &self.calib.u2));
        out.push(("draft.calib.b2".into(), vec![self.calib.b2.len()], &self.calib.b2));
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [S])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.mats_mut() {
                let s = [m.rows(), m.cols()];
                f(&format!("draft.layers.{i}.{name}"), &s, m.data_mut());
            }
        }
        let n = self.mask_embed.len();
        f("draft.mask_embed", &[n], &mut self.mask_embed);
        let c = &mut self.calib;
        let s = [c.u1.rows(), c.u1.cols()];
        f("draft.calib.u1", &s, c.u1.data_mut());
        let n = c.b1.len();
        f("draft.calib.b1", &[n], &mut c.b1);
        let s = [c.u2.rows(), c.u2.cols()];
        f("draft.calib.u2", &s, c.u2.data_mut());
        let n = c.b2.len();
        f("draft.calib.b2", &[n], &mut c.b2);
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = DraftWeights::<S>::zeros(cfg);
        check_same_shapes(&reference.tensors(), &self.tensors())
    }
}

pub(crate) fn check_same_shapes<S>(want: &[TensorView<'_, S>], got: &[TensorView<'_, S>]) -> Result<()> {
    if want.len() != got.len() {
        return Err(Error::Shape(format!("expected {} tensors, found {}", want.len(), got.len())));
    }
    for ((wn, ws, _), (gn, gs, _)) in want.iter().zip(got) {
        if wn != gn || ws != gs {
            return Err(Error::Shape(format!("tensor {gn} {gs:?} does not match {wn} {ws:?}")));
        }
    }
    Ok(())
}
