use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::Scalar;
use crate::error::Result;
use crate::rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln_attn: LayerNorm<T>,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
    pub ln_ffn: LayerNorm<T>,
}

/// Dense + GELU + LayerNorm transform, then a projection onto the
/// vocabulary (the token embedding table when tied).
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<T> {
    pub transform_w: Array2<T>,
    pub transform_b: Array1<T>,
    pub ln: LayerNorm<T>,
    /// `None` when tied to the token embeddings.
    pub decoder: Option<Array2<T>>,
    pub bias: Array1<T>,
}

/// tanh hidden layer on the `[CLS]` state, then a linear map to the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub hidden_w: Array2<T>,
    pub hidden_b: Array1<T>,
    pub out_w: Array2<T>,
    pub out_b: Array1<T>,
}

/// Every learnable tensor. Weight matrices are stored `[in, out]`;
/// embedding tables and the untied decoder are `[rows, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_emb: Array2<T>,
    pub position_emb: Array2<T>,
    pub segment_emb: Array2<T>,
    pub emb_ln: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm: MlmHead<T>,
    pub classifier: ClassifierHead<T>,
}

// Expands to a Vec of slices over every tensor in checkpoint order.
macro_rules! tensor_slices {
    ($p:expr, $slice:ident, $iter:ident, $opt:ident) => {{
        let p = $p;
        let mut out = vec![
            p.token_emb.$slice().unwrap(),
            p.position_emb.$slice().unwrap(),
            p.segment_emb.$slice().unwrap(),
            p.emb_ln.gamma.$slice().unwrap(),
            p.emb_ln.beta.$slice().unwrap(),
        ];
        for l in p.layers.$iter() {
            out.push(l.wq.$slice().unwrap());
            out.push(l.bq.$slice().unwrap());
            out.push(l.wk.$slice().unwrap());
            out.push(l.bk.$slice().unwrap());
            out.push(l.wv.$slice().unwrap());
            out.push(l.bv.$slice().unwrap());
            out.push(l.wo.$slice().unwrap());
            out.push(l.bo.$slice().unwrap());
            out.push(l.ln_attn.gamma.$slice().unwrap());
            out.push(l.ln_attn.beta.$slice().unwrap());
            out.push(l.w_in.$slice().unwrap());
            out.push(l.b_in.$slice().unwrap());
            out.push(l.w_out.$slice().unwrap());
            out.push(l.b_out.$slice().unwrap());
            out.push(l.ln_ffn.gamma.$slice().unwrap());
            out.push(l.ln_ffn.beta.$slice().unwrap());
        }
        out.push(p.mlm.transform_w.$slice().unwrap());
        out.push(p.mlm.transform_b.$slice().unwrap());
        out.push(p.mlm.ln.gamma.$slice().unwrap());
        out.push(p.mlm.ln.beta.$slice().unwrap());
        if let Some(d) = p.mlm.decoder.$opt() {
            out.push(d.$slice().unwrap());
        }
        out.push(p.mlm.bias.$slice().unwrap());
        out.push(p.classifier.hidden_w.$slice().unwrap());
        out.push(p.classifier.hidden_b.$slice().unwrap());
        out.push(p.classifier.out_w.$slice().unwrap());
        out.push(p.classifier.out_b.$slice().unwrap());
        out
    }};
}

/// Names and shapes of every tensor, in checkpoint order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, h, f, l) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.num_labels);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("token_emb".into(), vec![v, h]),
        ("position_emb".into(), vec![cfg.max_len, h]),
        ("segment_emb".into(), vec![2, h]),
        ("emb_ln.gamma".into(), vec![h]),
        ("emb_ln.beta".into(), vec![h]),
    ];
    for i in 0..cfg.num_layers {
        for (name, shape) in [
            ("wq", vec![h, h]),
            ("bq", vec![h]),
            ("wk", vec![h, h]),
            ("bk", vec![h]),
            ("wv", vec![h, h]),
            ("bv", vec![h]),
            ("wo", vec![h, h]),
            ("bo", vec![h]),
            ("ln_attn.gamma", vec![h]),
            ("ln_attn.beta", vec![h]),
            ("w_in", vec![h, f]),
            ("b_in", vec![f]),
            ("w_out", vec![f, h]),
            ("b_out", vec![h]),
            ("ln_ffn.gamma", vec![h]),
            ("ln_ffn.beta", vec![h]),
        ] {
            out.push((format!("layers.{i}.{name}"), shape));
        }
    }
    out.push(("mlm.transform_w".into(), vec![h, h]));
    out.push(("mlm.transform_b".into(), vec![h]));
    out.push(("mlm.ln.gamma".into(), vec![h]));
    out.push(("mlm.ln.beta".into(), vec![h]));
    if !cfg.tie_mlm_head {
        out.push(("mlm.decoder".into(), vec![v, h]));
    }
    out.push(("mlm.bias".into(), vec![v]));
    out.push(("classifier.hidden_w".into(), vec![h, h]));
    out.push(("classifier.hidden_b".into(), vec![h]));
    out.push(("classifier.out_w".into(), vec![h, l]));
    out.push(("classifier.out_b".into(), vec![l]));
    out
}

fn trunc_normal<T: Scalar>(rows: usize, cols: usize, rng: &mut rng::Rng) -> Array2<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            break T::c(x);
        }
    })
}

fn layer_norm<T: Scalar>(h: usize) -> LayerNorm<T> {
    LayerNorm {
        gamma: Array1::ones(h),
        beta: Array1::zeros(h),
    }
}

impl<T: Scalar> ClassifierHead<T> {
    fn init(cfg: &ModelConfig, rng: &mut rng::Rng) -> Self {
        let h = cfg.hidden_dim;
        Self {
            hidden_w: trunc_normal(h, h, rng),
            hidden_b: Array1::zeros(h),
            out_w: trunc_normal(h, cfg.num_labels, rng),
            out_b: Array1::zeros(cfg.num_labels),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization: truncated normal(0, 0.02) weights, zero
    /// biases, unit LayerNorm scales. Deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed);
        let (v, h, f) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim);
        let token_emb = trunc_normal(v, h, &mut rng);
        let position_emb = trunc_normal(cfg.max_len, h, &mut rng);
        let segment_emb = trunc_normal(2, h, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                wq: trunc_normal(h, h, &mut rng),
                bq: Array1::zeros(h),
                wk: trunc_normal(h, h, &mut rng),
                bk: Array1::zeros(h),
                wv: trunc_normal(h, h, &mut rng),
                bv: Array1::zeros(h),
                wo: trunc_normal(h, h, &mut rng),
                bo: Array1::zeros(h),
                ln_attn: layer_norm(h),
                w_in: trunc_normal(h, f, &mut rng),
                b_in: Array1::zeros(f),
                w_out: trunc_normal(f, h, &mut rng),
                b_out: Array1::zeros(h),
                ln_ffn: layer_norm(h),
            })
            .collect();
        let mlm = MlmHead {
            transform_w: trunc_normal(h, h, &mut rng),
            transform_b: Array1::zeros(h),
            ln: layer_norm(h),
            decoder: (!cfg.tie_mlm_head).then(|| trunc_normal(v, h, &mut rng)),
            bias: Array1::zeros(v),
        };
        let classifier = ClassifierHead::init(cfg, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            token_emb,
            position_emb,
            segment_emb,
            emb_ln: layer_norm(h),
            layers,
            mlm,
            classifier,
        })
    }

    /// Same shapes, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Fresh classifier head drawn from `seed`, leaving the encoder intact.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = rng::substream(seed, &[rng::label("classifier-head")]);
        self.classifier = ClassifierHead::init(&self.config, &mut rng);
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        tensor_slices!(self, as_slice, iter, as_ref)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        tensor_slices!(self, as_slice_mut, iter_mut, as_mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c2 = |a: &Array2<T>| a.mapv(|x| U::c(x.as_f64()));
        let c1 = |a: &Array1<T>| a.mapv(|x| U::c(x.as_f64()));
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: c1(&l.gamma),
            beta: c1(&l.beta),
        };
        ModelParams {
            config: self.config.clone(),
            token_emb: c2(&self.token_emb),
            position_emb: c2(&self.position_emb),
            segment_emb: c2(&self.segment_emb),
            emb_ln: ln(&self.emb_ln),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    wq: c2(&l.wq),
                    bq: c1(&l.bq),
                    wk: c2(&l.wk),
                    bk: c1(&l.bk),
                    wv: c2(&l.wv),
                    bv: c1(&l.bv),
                    wo: c2(&l.wo),
                    bo: c1(&l.bo),
                    ln_attn: ln(&l.ln_attn),
                    w_in: c2(&l.w_in),
                    b_in: c1(&l.b_in),
                    w_out: c2(&l.w_out),
                    b_out: c1(&l.b_out),
                    ln_ffn: ln(&l.ln_ffn),
                })
                .collect(),
            mlm: MlmHead {
                transform_w: c2(&self.mlm.transform_w),
                transform_b: c1(&self.mlm.transform_b),
                ln: ln(&self.mlm.ln),
                decoder: self.mlm.decoder.as_ref().map(c2),
                bias: c1(&self.mlm.bias),
            },
            classifier: ClassifierHead {
                hidden_w: c2(&self.classifier.hidden_w),
                hidden_b: c1(&self.classifier.hidden_b),
                out_w: c2(&self.classifier.out_w),
                out_b: c1(&self.classifier.out_b),
            },
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    /// The MLM output projection (`[vocab, hidden]`).
    pub fn decoder(&self) -> &Array2<T> {
        self.mlm.decoder.as_ref().unwrap_or(&self.token_emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            max_len: 12,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            dropout_rate: 0.0,
            num_labels: 3,
            tie_mlm_head: false,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(&tiny()).unwrap();
        let b = ModelParams::<f32>::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(&ModelConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_values() {
        let p = ModelParams::<f64>::init(&tiny()).unwrap();
        assert!(p.emb_ln.gamma.iter().all(|&g| g == 1.0));
        for l in &p.layers {
            assert!(l.ln_attn.gamma.iter().chain(l.ln_ffn.gamma.iter()).all(|&g| g == 1.0));
            assert!(l.bq.iter().all(|&b| b == 0.0));
        }
        assert!(p.mlm.ln.gamma.iter().all(|&g| g == 1.0));
        assert!(p.token_emb.iter().all(|&w| w.abs() <= 0.04));
        assert!(p.all_finite());
    }

    #[test]
    fn layout_matches_tensors() {
        for tie in [true, false] {
            let cfg = ModelConfig { tie_mlm_head: tie, ..tiny() };
            let p = ModelParams::<f32>::init(&cfg).unwrap();
            let layout = tensor_layout(&cfg);
            let tensors = p.tensors();
            assert_eq!(layout.len(), tensors.len());
            for ((name, shape), t) in layout.iter().zip(&tensors) {
                assert_eq!(shape.iter().product::<usize>(), t.len(), "{name}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ModelConfig { hidden_dim: 6, num_heads: 4, ..tiny() };
        assert!(ModelParams::<f32>::init(&cfg).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let p = ModelParams::<f32>::init(&tiny()).unwrap();
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
    }
}
