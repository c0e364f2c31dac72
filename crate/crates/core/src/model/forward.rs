//! Forward passes and exact reverse-mode gradients.
//!
//! Each sequence is processed over its real tokens only: PAD positions are
//! never used as attention keys, so their states cannot influence real
//! positions, and they are reported as zero rows.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng as _;
use rayon::prelude::*;

use super::loss::softmax_f64;
use super::params::{EncoderLayer, LayerNorm, ModelParams};
use super::{ClassifierOutput, Scalar};
use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::EncodedPair;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Dropout is applied only in training mode; each batch item draws from its
/// own stream derived from `seed` and the item index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Masked positions of one sequence and the ids they originally held.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedTokens {
    pub positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// KL(target || model) per item, averaged over the batch.
    Classify { targets: &'a [LabelDistribution] },
    /// Cross-entropy averaged over every masked position in the batch.
    MaskedLm { masks: &'a [MaskedTokens] },
}

#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub objective: Objective<'a>,
    /// Multiplies both the loss and every gradient.
    pub scale: f64,
}

impl<'a> LossSpec<'a> {
    pub fn classify(targets: &'a [LabelDistribution]) -> Self {
        Self {
            objective: Objective::Classify { targets },
            scale: 1.0,
        }
    }

    pub fn masked_lm(masks: &'a [MaskedTokens]) -> Self {
        Self {
            objective: Objective::MaskedLm { masks },
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: f64,
    pub grads: ModelParams<T>,
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half, one) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5), T::one());
    half * x * (one + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half, one) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5), T::one());
    let t = (c * (x + a * x * x * x)).tanh();
    half * (one + t) + half * x * (one - t * t) * c * (one + T::c(3.0) * a * x * x)
}

fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, ln: &LayerNorm<T>) -> (Array2<T>, LnCache<T>) {
    let h = T::c(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / h;
        *inv = T::one() / (var + T::c(LN_EPS)).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    ln: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
) -> Array2<T> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let h = T::c(dy.ncols() as f64);
    let mut dx = dy * &ln.gamma;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / h;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &xh| *d = inv * (*d - mean_d - xh * mean_dx));
    }
    dx
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn dropout_mask<T: Scalar>(shape: (usize, usize), rate: f64, rng: &mut rng::Rng) -> Array2<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    ctx: Array2<T>,
    drop_attn: Option<Array2<T>>,
    ln_attn: LnCache<T>,
    y: Array2<T>,
    f: Array2<T>,
    g: Array2<T>,
    drop_ffn: Option<Array2<T>>,
    ln_ffn: LnCache<T>,
}

struct SeqCache<T> {
    ids: Vec<u32>,
    segs: Vec<u8>,
    emb_ln: LnCache<T>,
    drop_emb: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
    hidden: Array2<T>,
}

struct Dropout<'r> {
    rate: f64,
    rng: &'r mut rng::Rng,
}

impl Dropout<'_> {
    fn mask<T: Scalar>(&mut self, shape: (usize, usize)) -> Array2<T> {
        dropout_mask(shape, self.rate, self.rng)
    }
}

fn layer_forward<T: Scalar>(
    x: Array2<T>,
    l: &EncoderLayer<T>,
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> (Array2<T>, LayerCache<T>) {
    let n = x.nrows();
    let hd = l.wq.ncols() / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());
    let q = linear(&x, &l.wq, &l.bq);
    let k = linear(&x, &l.wk, &l.bk);
    let v = linear(&x, &l.wv, &l.bv);
    let mut ctx = Array2::zeros((n, l.wq.ncols()));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|v| v * scale);
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn.push(scores);
    }
    let mut o = linear(&ctx, &l.wo, &l.bo);
    let drop_attn = dropout.as_mut().map(|d| d.mask(o.dim()));
    if let Some(m) = &drop_attn {
        o *= m;
    }
    let (y, ln_attn) = layer_norm(&(&x + &o), &l.ln_attn);
    let f = linear(&y, &l.w_in, &l.b_in);
    let g = f.mapv(gelu);
    let mut z = linear(&g, &l.w_out, &l.b_out);
    let drop_ffn = dropout.as_mut().map(|d| d.mask(z.dim()));
    if let Some(m) = &drop_ffn {
        z *= m;
    }
    let (out, ln_ffn) = layer_norm(&(&y + &z), &l.ln_ffn);
    let cache = LayerCache {
        x,
        q,
        k,
        v,
        attn,
        ctx,
        drop_attn,
        ln_attn,
        y,
        f,
        g,
        drop_ffn,
        ln_ffn,
    };
    (out, cache)
}

fn layer_backward<T: Scalar>(
    dout: &Array2<T>,
    c: &LayerCache<T>,
    l: &EncoderLayer<T>,
    g: &mut EncoderLayer<T>,
    heads: usize,
) -> Array2<T> {
    let hd = l.wq.ncols() / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());

    let dr2 = layer_norm_backward(dout, &c.ln_ffn, &l.ln_ffn, &mut g.ln_ffn);
    let mut dz = dr2.clone();
    if let Some(m) = &c.drop_ffn {
        dz *= m;
    }
    g.w_out += &c.g.t().dot(&dz);
    g.b_out += &dz.sum_axis(Axis(0));
    let mut df = dz.dot(&l.w_out.t());
    Zip::from(&mut df).and(&c.f).for_each(|d, &f| *d *= gelu_grad(f));
    g.w_in += &c.y.t().dot(&df);
    g.b_in += &df.sum_axis(Axis(0));
    let dy = dr2 + df.dot(&l.w_in.t());

    let dr1 = layer_norm_backward(&dy, &c.ln_attn, &l.ln_attn, &mut g.ln_attn);
    let mut d_o = dr1.clone();
    if let Some(m) = &c.drop_attn {
        d_o *= m;
    }
    g.wo += &c.ctx.t().dot(&d_o);
    g.bo += &d_o.sum_axis(Axis(0));
    let dctx = d_o.dot(&l.wo.t());

    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, a) in c.attn.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let mut ds = da.clone();
        // softmax backward: ds = a * (da - rowsum(da * a))
        for ((mut row, arow), darow) in ds.rows_mut().into_iter().zip(a.rows()).zip(da.rows()) {
            let dot = darow.iter().zip(arow.iter()).map(|(&x, &y)| x * y).sum::<T>();
            Zip::from(&mut row)
                .and(&arow)
                .and(&darow)
                .for_each(|d, &p, &dap| *d = p * (dap - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.x.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &c.x.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &c.x.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    dr1 + dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t())
}

fn check_pair<T: Scalar>(p: &ModelParams<T>, pair: &EncodedPair) -> Result<()> {
    pair.validate(p.config.max_len)?;
    if let Some(&bad) = pair.token_ids.iter().find(|&&t| t as usize >= p.config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab size {}",
            p.config.vocab_size
        )));
    }
    Ok(())
}

fn encode_sequence<T: Scalar>(
    p: &ModelParams<T>,
    pair: &EncodedPair,
    dropout: &mut Option<Dropout<'_>>,
) -> SeqCache<T> {
    let n = pair.length;
    let ids = pair.token_ids[..n].to_vec();
    let segs = pair.segment_ids[..n].to_vec();
    let h = p.config.hidden_dim;
    let mut e = Array2::zeros((n, h));
    for (t, mut row) in e.rows_mut().into_iter().enumerate() {
        row += &p.token_emb.row(ids[t] as usize);
        row += &p.position_emb.row(t);
        row += &p.segment_emb.row(segs[t] as usize);
    }
    let (mut x, emb_ln) = layer_norm(&e, &p.emb_ln);
    let drop_emb = dropout.as_mut().map(|d| d.mask(x.dim()));
    if let Some(m) = &drop_emb {
        x *= m;
    }
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (out, cache) = layer_forward(x, l, p.config.num_heads, dropout);
        layers.push(cache);
        x = out;
    }
    SeqCache {
        ids,
        segs,
        emb_ln,
        drop_emb,
        layers,
        hidden: x,
    }
}

fn encoder_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    c: &SeqCache<T>,
    dhidden: Array2<T>,
) {
    let mut dx = dhidden;
    for ((l, gl), lc) in p.layers.iter().zip(g.layers.iter_mut()).zip(&c.layers).rev() {
        dx = layer_backward(&dx, lc, l, gl, p.config.num_heads);
    }
    if let Some(m) = &c.drop_emb {
        dx *= m;
    }
    let de = layer_norm_backward(&dx, &c.emb_ln, &p.emb_ln, &mut g.emb_ln);
    for (t, row) in de.rows().into_iter().enumerate() {
        let mut r = g.token_emb.row_mut(c.ids[t] as usize);
        r += &row;
        let mut r = g.position_emb.row_mut(t);
        r += &row;
        let mut r = g.segment_emb.row_mut(c.segs[t] as usize);
        r += &row;
    }
}

struct ClsCache<T> {
    pooled: Array1<T>,
    drop: Option<Array1<T>>,
    logits: Array1<T>,
}

fn classify_head<T: Scalar>(
    p: &ModelParams<T>,
    cls: ArrayView1<T>,
    dropout: Option<&mut Dropout<'_>>,
) -> ClsCache<T> {
    let c = &p.classifier;
    let pooled = (cls.dot(&c.hidden_w) + &c.hidden_b).mapv(|v| v.tanh());
    let drop = dropout.map(|d| d.mask::<T>((1, pooled.len())).row(0).to_owned());
    let dropped = match &drop {
        Some(m) => &pooled * m,
        None => pooled.clone(),
    };
    let logits = dropped.dot(&c.out_w) + &c.out_b;
    ClsCache {
        pooled,
        drop,
        logits,
    }
}

fn output_of<T: Scalar>(logits: &Array1<T>) -> ClassifierOutput {
    let l = [logits[0].as_f64(), logits[1].as_f64(), logits[2].as_f64()];
    ClassifierOutput {
        logits: l,
        probs: softmax_f64(&l),
    }
}

struct MlmCache<T> {
    rows: Array2<T>,
    pre: Array2<T>,
    ln: LnCache<T>,
    u: Array2<T>,
    logits: Array2<T>,
}

fn mlm_head<T: Scalar>(p: &ModelParams<T>, hidden: &Array2<T>, positions: &[usize]) -> MlmCache<T> {
    let h = p.config.hidden_dim;
    let mut rows = Array2::zeros((positions.len(), h));
    for (i, &pos) in positions.iter().enumerate() {
        rows.row_mut(i).assign(&hidden.row(pos));
    }
    let pre = linear(&rows, &p.mlm.transform_w, &p.mlm.transform_b);
    let (u, ln) = layer_norm(&pre.mapv(gelu), &p.mlm.ln);
    let mut logits = u.dot(&p.decoder().t());
    logits += &p.mlm.bias;
    MlmCache {
        rows,
        pre,
        ln,
        u,
        logits,
    }
}

fn check_positions(pair: &EncodedPair, positions: &[usize]) -> Result<()> {
    for &pos in positions {
        if pos >= pair.padded_len() {
            return Err(Error::Input(format!(
                "masked position {pos} out of range for length {}",
                pair.padded_len()
            )));
        }
        if pos >= pair.length {
            return Err(Error::Input(format!("masked position {pos} points at [PAD]")));
        }
    }
    Ok(())
}

fn pad_hidden<T: Scalar>(hidden: Array2<T>, padded: usize) -> Array2<T> {
    let mut out = Array2::zeros((padded, hidden.ncols()));
    out.slice_mut(s![..hidden.nrows(), ..]).assign(&hidden);
    out
}

/// Final hidden states per item, `[padded_len, hidden]`, PAD rows zero.
/// Evaluation mode.
pub fn forward_encoder<T: Scalar>(p: &ModelParams<T>, batch: &[EncodedPair]) -> Result<Vec<Array2<T>>> {
    for pair in batch {
        check_pair(p, pair)?;
    }
    Ok(batch
        .par_iter()
        .map(|pair| pad_hidden(encode_sequence(p, pair, &mut None).hidden, pair.padded_len()))
        .collect())
}

/// Label distribution per item. Evaluation mode, deterministic.
pub fn forward_classify<T: Scalar>(p: &ModelParams<T>, batch: &[EncodedPair]) -> Result<Vec<ClassifierOutput>> {
    for pair in batch {
        check_pair(p, pair)?;
    }
    Ok(batch
        .par_iter()
        .map(|pair| {
            let c = encode_sequence(p, pair, &mut None);
            output_of(&classify_head(p, c.hidden.row(0), None).logits)
        })
        .collect())
}

/// Vocabulary logits at each requested position, `[positions, vocab]` per
/// item. Evaluation mode.
pub fn forward_mlm<T: Scalar>(
    p: &ModelParams<T>,
    batch: &[EncodedPair],
    positions: &[Vec<usize>],
) -> Result<Vec<Array2<T>>> {
    if batch.len() != positions.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: positions.len(),
        });
    }
    for (pair, pos) in batch.iter().zip(positions) {
        check_pair(p, pair)?;
        check_positions(pair, pos)?;
    }
    Ok(batch
        .par_iter()
        .zip(positions.par_iter())
        .map(|(pair, pos)| {
            if pos.is_empty() {
                return Array2::zeros((0, p.config.vocab_size));
            }
            let c = encode_sequence(p, pair, &mut None);
            mlm_head(p, &c.hidden, pos).logits
        })
        .collect())
}

fn check_objective<T: Scalar>(p: &ModelParams<T>, batch: &[EncodedPair], spec: &LossSpec<'_>) -> Result<()> {
    for pair in batch {
        check_pair(p, pair)?;
    }
    match spec.objective {
        Objective::Classify { targets } => {
            if targets.len() != batch.len() {
                return Err(Error::LengthMismatch {
                    left: batch.len(),
                    right: targets.len(),
                });
            }
        }
        Objective::MaskedLm { masks } => {
            if masks.len() != batch.len() {
                return Err(Error::LengthMismatch {
                    left: batch.len(),
                    right: masks.len(),
                });
            }
            for (pair, m) in batch.iter().zip(masks) {
                check_positions(pair, &m.positions)?;
                if m.positions.len() != m.original_ids.len() {
                    return Err(Error::LengthMismatch {
                        left: m.positions.len(),
                        right: m.original_ids.len(),
                    });
                }
                if let Some(&bad) = m.original_ids.iter().find(|&&t| t as usize >= p.config.vocab_size) {
                    return Err(Error::Input(format!("target id {bad} out of range")));
                }
            }
        }
    }
    Ok(())
}

fn item_dropout<'r>(p: &ModelParams<impl Scalar>, mode: Mode, rng: &'r mut Option<rng::Rng>) -> Option<Dropout<'r>> {
    match (mode, rng.as_mut()) {
        (Mode::Train { .. }, Some(r)) if p.config.dropout_rate > 0.0 => Some(Dropout {
            rate: p.config.dropout_rate,
            rng: r,
        }),
        _ => None,
    }
}

fn item_rng(mode: Mode, index: usize) -> Option<rng::Rng> {
    match mode {
        Mode::Train { seed } => Some(rng::substream(seed, &[index as u64])),
        Mode::Eval => None,
    }
}

/// Loss of the batch under `spec`; accumulates gradients into `grads` when
/// given.
fn run_batch<T: Scalar>(
    p: &ModelParams<T>,
    batch: &[EncodedPair],
    spec: &LossSpec<'_>,
    mode: Mode,
    mut grads: Option<&mut ModelParams<T>>,
) -> Result<f64> {
    check_objective(p, batch, spec)?;
    let mut total = 0.0;
    match spec.objective {
        Objective::Classify { targets } => {
            let n = batch.len().max(1) as f64;
            for (i, (pair, target)) in batch.iter().zip(targets).enumerate() {
                let mut rng = item_rng(mode, i);
                let mut dropout = item_dropout(p, mode, &mut rng);
                let cache = encode_sequence(p, pair, &mut dropout);
                let head = classify_head(p, cache.hidden.row(0), dropout.as_mut());
                let out = output_of(&head.logits);
                total += super::loss::loss_kl(&out, target);
                if let Some(g) = grads.as_deref_mut() {
                    let w = spec.scale / n;
                    let dlogits: Array1<T> =
                        Array1::from_iter((0..3).map(|k| T::c(w * (out.probs[k] - target.p[k]))));
                    let dh0 = classify_backward(p, g, &head, cache.hidden.row(0), &dlogits);
                    let mut dhidden = Array2::zeros(cache.hidden.dim());
                    dhidden.row_mut(0).assign(&dh0);
                    encoder_backward(p, g, &cache, dhidden);
                }
            }
            total /= n;
        }
        Objective::MaskedLm { masks } => {
            let m_total: usize = masks.iter().map(|m| m.positions.len()).sum();
            if m_total == 0 {
                return Ok(0.0);
            }
            let w = spec.scale / m_total as f64;
            for (i, (pair, mask)) in batch.iter().zip(masks).enumerate() {
                if mask.positions.is_empty() {
                    continue;
                }
                let mut rng = item_rng(mode, i);
                let mut dropout = item_dropout(p, mode, &mut rng);
                let cache = encode_sequence(p, pair, &mut dropout);
                let head = mlm_head(p, &cache.hidden, &mask.positions);
                let mut dlogits = head.logits.mapv(|v| v.as_f64());
                for (mut row, &target) in dlogits.rows_mut().into_iter().zip(&mask.original_ids) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let shifted_target = row[target as usize] - max;
                    row.mapv_inplace(|v| (v - max).exp());
                    let z = row.sum();
                    total += z.ln() - shifted_target;
                    row.mapv_inplace(|v| v / z);
                    row[target as usize] -= 1.0;
                }
                if let Some(g) = grads.as_deref_mut() {
                    let dl = dlogits.mapv(|v| T::c(v * w));
                    let dhidden = mlm_backward(p, g, &head, &mask.positions, cache.hidden.nrows(), &dl);
                    encoder_backward(p, g, &cache, dhidden);
                }
            }
            total /= m_total as f64;
        }
    }
    Ok(total * spec.scale)
}

fn classify_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    head: &ClsCache<T>,
    cls: ArrayView1<T>,
    dlogits: &Array1<T>,
) -> Array1<T> {
    let c = &p.classifier;
    let dropped = match &head.drop {
        Some(m) => &head.pooled * m,
        None => head.pooled.clone(),
    };
    let outer = |a: &Array1<T>, b: &Array1<T>| {
        a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
    };
    g.classifier.out_w += &outer(&dropped, dlogits);
    g.classifier.out_b += dlogits;
    let mut dpooled = c.out_w.dot(dlogits);
    if let Some(m) = &head.drop {
        dpooled *= m;
    }
    let dpre = &dpooled * &head.pooled.mapv(|v| T::one() - v * v);
    g.classifier.hidden_w += &outer(&cls.to_owned(), &dpre);
    g.classifier.hidden_b += &dpre;
    c.hidden_w.dot(&dpre)
}

fn mlm_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    head: &MlmCache<T>,
    positions: &[usize],
    n: usize,
    dlogits: &Array2<T>,
) -> Array2<T> {
    g.mlm.bias += &dlogits.sum_axis(Axis(0));
    let ddec = dlogits.t().dot(&head.u);
    match g.mlm.decoder.as_mut() {
        Some(d) => *d += &ddec,
        None => g.token_emb += &ddec,
    }
    let du = dlogits.dot(p.decoder());
    let mut dt = layer_norm_backward(&du, &head.ln, &p.mlm.ln, &mut g.mlm.ln);
    Zip::from(&mut dt).and(&head.pre).for_each(|d, &x| *d *= gelu_grad(x));
    g.mlm.transform_w += &head.rows.t().dot(&dt);
    g.mlm.transform_b += &dt.sum_axis(Axis(0));
    let drows = dt.dot(&p.mlm.transform_w.t());
    let mut dhidden = Array2::zeros((n, p.config.hidden_dim));
    for (i, &pos) in positions.iter().enumerate() {
        let mut r = dhidden.row_mut(pos);
        r += &drows.row(i);
    }
    dhidden
}

/// Loss under `spec` without gradients.
pub fn batch_loss<T: Scalar>(p: &ModelParams<T>, batch: &[EncodedPair], spec: &LossSpec<'_>, mode: Mode) -> Result<f64> {
    run_batch(p, batch, spec, mode, None)
}

/// Exact gradients of the batch loss with respect to every tensor.
pub fn backward<T: Scalar>(
    p: &ModelParams<T>,
    batch: &[EncodedPair],
    spec: &LossSpec<'_>,
    mode: Mode,
) -> Result<Gradients<T>> {
    let mut grads = p.zeros_like();
    let loss = run_batch(p, batch, spec, mode, Some(&mut grads))?;
    Ok(Gradients { loss, grads })
}
