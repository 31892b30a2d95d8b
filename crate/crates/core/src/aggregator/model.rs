//! Forward pass and hand-written backward pass.
//!
//! Layer indices in [`ModelError::NonFinite`]: 0 is the input projection,
//! `l + 1` is block `l`, `n_layers + 1` is the classifier head.
//!
//! Keys and values come from tile tokens only; the classification token
//! queries the tiles but is never attended to. Repeating every tile
//! therefore leaves every representation unchanged. Only the
//! classification token feeds the head, so the last block computes
//! queries, attention output and MLP for that one row.

use rand::{Rng, RngCore};

use super::params::{AggregatorParams, Block, LayerNorm, Linear};
use super::{Mode, ModelError, Result};
use crate::dataset::{FeatureBag, Label};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: [T; 2],
    /// Softmax probability of the high-complexity class.
    pub prob_high: T,
    /// One weight per tile, non-negative, summing to one.
    pub attention: Vec<T>,
    /// Normalized classification-token representation fed to the head.
    pub pooled: Vec<T>,
}

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, ln: &LayerNorm<T>) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = (x.rows(), x.cols());
    let dn = T::of_usize(d);
    let eps = T::of(LN_EPS);
    let mut y = Matrix::zeros(rows, d);
    let mut xhat = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = xhat.get(r, j) * ln.gain[j] + ln.bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates gain/bias gradients.
fn layer_norm_backward<T: Scalar>(dy: &Matrix<T>, ln: &LayerNorm<T>, cache: &LnCache<T>, grad: &mut LayerNorm<T>) -> Matrix<T> {
    let (rows, d) = (dy.rows(), dy.cols());
    let dn = T::of_usize(d);
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            grad.gain[j] += dyr[j] * xh[j];
            grad.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gain[j];
        }
        let sum: T = dxhat.iter().copied().sum();
        let dot: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = cache.inv_std[r] / dn;
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = scale * (dn * dxhat[j] - sum - xh[j] * dot);
        }
    }
    dx
}

fn gelu_constants<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

/// tanh approximation of GELU
fn gelu<T: Scalar>(u: &Matrix<T>) -> Matrix<T> {
    let (c, a) = gelu_constants::<T>();
    let half = T::of(0.5);
    let data = u
        .as_slice()
        .iter()
        .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
        .collect();
    Matrix::from_vec(u.rows(), u.cols(), data)
}

fn gelu_backward<T: Scalar>(u: &Matrix<T>, dg: &Matrix<T>) -> Matrix<T> {
    let (c, a) = gelu_constants::<T>();
    let half = T::of(0.5);
    let three = T::of(3.0);
    let data = u
        .as_slice()
        .iter()
        .zip(dg.as_slice())
        .map(|(&x, &g)| {
            let t = (c * (x + a * x * x * x)).tanh();
            let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
            g * d
        })
        .collect();
    Matrix::from_vec(u.rows(), u.cols(), data)
}

fn softmax_rows<T: Scalar>(s: &mut Matrix<T>) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn accumulate_linear<T: Scalar>(grad: &mut Linear<T>, x: &Matrix<T>, dy: &Matrix<T>) {
    grad.weight.add_assign(&x.matmul_tn(dy));
    for (b, s) in grad.bias.iter_mut().zip(dy.column_sums()) {
        *b += s;
    }
}

fn row_range<T: Scalar>(m: &Matrix<T>, start: usize, end: usize) -> Matrix<T> {
    let c = m.cols();
    Matrix::from_vec(end - start, c, m.as_slice()[start * c..end * c].to_vec())
}

fn first_rows<T: Scalar>(m: &Matrix<T>, rows: usize) -> Matrix<T> {
    if rows == m.rows() {
        return m.clone();
    }
    row_range(m, 0, rows)
}

struct HeadCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Post-softmax, pre-dropout probabilities, `q_rows × tiles`.
    probs: Matrix<T>,
    /// Dropout multipliers (0 or 1/(1-p)); absent in eval mode.
    mask: Option<Matrix<T>>,
}

struct BlockCache<T> {
    q_rows: usize,
    a: Matrix<T>,
    ln1: LnCache<T>,
    heads: Vec<HeadCache<T>>,
    attn: Matrix<T>,
    b: Matrix<T>,
    ln2: LnCache<T>,
    u: Matrix<T>,
    g: Matrix<T>,
}

fn block_forward<T: Scalar>(
    block: &Block<T>,
    z: &Matrix<T>,
    n_heads: usize,
    q_rows: usize,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> (Matrix<T>, BlockCache<T>) {
    let tokens = z.rows();
    let d = z.cols();
    let dh = d / n_heads;
    let scale = T::one() / T::of_usize(dh).sqrt();

    let (a, ln1) = layer_norm(z, &block.norm1);
    let a_q = first_rows(&a, q_rows);
    let a_kv = row_range(&a, 1, tokens);
    let q = block.query.apply(&a_q);
    let k = block.key.apply(&a_kv);
    let v = block.value.apply(&a_kv);

    let mut dropout = dropout;
    let mut attn = Matrix::zeros(q_rows, d);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let mut probs = qh.matmul_nt(&kh);
        for x in probs.as_mut_slice() {
            *x *= scale;
        }
        softmax_rows(&mut probs);
        let mask = dropout.as_mut().map(|(p, rng)| {
            let keep = T::one() / T::of(1.0 - *p);
            let mut m = Matrix::zeros(q_rows, tokens - 1);
            for x in m.as_mut_slice() {
                *x = if rng.random::<f64>() < *p { T::zero() } else { keep };
            }
            m
        });
        let out = match &mask {
            Some(m) => {
                let mut dropped = probs.clone();
                for (x, &w) in dropped.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *x *= w;
                }
                dropped.matmul(&vh)
            }
            None => probs.matmul(&vh),
        };
        attn.set_column_block(h * dh, &out);
        heads.push(HeadCache { q: qh, k: kh, v: vh, probs, mask });
    }

    let mut z1 = first_rows(z, q_rows);
    z1.add_assign(&block.output.apply(&attn));
    let (b, ln2) = layer_norm(&z1, &block.norm2);
    let u = block.fc1.apply(&b);
    let g = gelu(&u);
    let mut z2 = z1;
    z2.add_assign(&block.fc2.apply(&g));
    (z2, BlockCache { q_rows, a, ln1, heads, attn, b, ln2, u, g })
}

/// Backpropagates `dz_out` (`q_rows × d`) through a block; returns the
/// gradient with respect to the block input (`tokens × d`).
fn block_backward<T: Scalar>(block: &Block<T>, cache: &BlockCache<T>, dz_out: &Matrix<T>, grad: &mut Block<T>) -> Matrix<T> {
    let tokens = cache.a.rows();
    let d = cache.a.cols();
    let n_heads = cache.heads.len();
    let dh = d / n_heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let q_rows = cache.q_rows;

    // MLP branch
    accumulate_linear(&mut grad.fc2, &cache.g, dz_out);
    let dg = dz_out.matmul_nt(&block.fc2.weight);
    let du = gelu_backward(&cache.u, &dg);
    accumulate_linear(&mut grad.fc1, &cache.b, &du);
    let db = du.matmul_nt(&block.fc1.weight);
    let mut dz1 = dz_out.clone();
    dz1.add_assign(&layer_norm_backward(&db, &block.norm2, &cache.ln2, &mut grad.norm2));

    // attention branch
    accumulate_linear(&mut grad.output, &cache.attn, &dz1);
    let d_attn = dz1.matmul_nt(&block.output.weight);
    let mut dq = Matrix::zeros(q_rows, d);
    let mut dk = Matrix::zeros(tokens - 1, d);
    let mut dv = Matrix::zeros(tokens - 1, d);
    for (h, hc) in cache.heads.iter().enumerate() {
        let d_out = d_attn.column_block(h * dh, dh);
        let mut dp = d_out.matmul_nt(&hc.v);
        let dvh = match &hc.mask {
            Some(m) => {
                let mut dropped = hc.probs.clone();
                for (x, &w) in dropped.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *x *= w;
                }
                for (x, &w) in dp.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *x *= w;
                }
                dropped.matmul_tn(&d_out)
            }
            None => hc.probs.matmul_tn(&d_out),
        };
        // softmax backward, row-wise
        let mut ds = dp;
        for r in 0..q_rows {
            let p = hc.probs.row(r);
            let row = ds.row_mut(r);
            let dot: T = row.iter().zip(p).map(|(&g, &pp)| g * pp).sum();
            for (g, &pp) in row.iter_mut().zip(p) {
                *g = pp * (*g - dot) * scale;
            }
        }
        dq.set_column_block(h * dh, &ds.matmul(&hc.k));
        dk.set_column_block(h * dh, &ds.matmul_tn(&hc.q));
        dv.set_column_block(h * dh, &dvh);
    }

    let a_q = first_rows(&cache.a, q_rows);
    let a_kv = row_range(&cache.a, 1, tokens);
    accumulate_linear(&mut grad.query, &a_q, &dq);
    accumulate_linear(&mut grad.key, &a_kv, &dk);
    accumulate_linear(&mut grad.value, &a_kv, &dv);
    let mut da_kv = dk.matmul_nt(&block.key.weight);
    da_kv.add_assign(&dv.matmul_nt(&block.value.weight));
    let mut da = Matrix::zeros(tokens, d);
    da.as_mut_slice()[d..].copy_from_slice(da_kv.as_slice());
    let da_q = dq.matmul_nt(&block.query.weight);
    for r in 0..q_rows {
        for (x, &y) in da.row_mut(r).iter_mut().zip(da_q.row(r)) {
            *x += y;
        }
    }
    let mut dz_in = layer_norm_backward(&da, &block.norm1, &cache.ln1, &mut grad.norm1);
    for r in 0..q_rows {
        for (x, &y) in dz_in.row_mut(r).iter_mut().zip(dz1.row(r)) {
            *x += y;
        }
    }
    dz_in
}

struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    pooled: Matrix<T>,
    probs: [T; 2],
}

fn check<T: Scalar>(m: &Matrix<T>, layer: usize) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

fn run<T: Scalar>(params: &AggregatorParams<T>, bag: &FeatureBag<T>, mode: Mode<'_>) -> Result<(Prediction<T>, ForwardCache<T>)> {
    let cfg = params.config();
    if bag.dim() != cfg.feature_dim {
        return Err(ModelError::Shape(format!(
            "bag {} has feature dimension {}, model expects {}",
            bag.case_id(),
            bag.dim(),
            cfg.feature_dim
        )));
    }
    let n = bag.n_tiles();
    let d = cfg.model_dim;
    let embedded = params.input.apply(bag.vectors());
    check(&embedded, 0)?;
    let mut z = Matrix::zeros(n + 1, d);
    z.row_mut(0).copy_from_slice(&params.cls_token);
    for r in 0..n {
        z.row_mut(r + 1).copy_from_slice(embedded.row(r));
    }

    let p = cfg.attention_dropout_p;
    let mut rng = match mode {
        Mode::Train(rng) if p > 0.0 => Some(rng),
        _ => None,
    };
    let n_layers = params.blocks.len();
    let mut caches = Vec::with_capacity(n_layers);
    for (l, block) in params.blocks.iter().enumerate() {
        let q_rows = if l + 1 == n_layers { 1 } else { n + 1 };
        let dropout = rng.as_mut().map(|r| (p, &mut **r as &mut dyn RngCore));
        let (next, cache) = block_forward(block, &z, cfg.n_heads, q_rows, dropout);
        check(&next, l + 1)?;
        z = next;
        caches.push(cache);
    }

    let (pooled, final_ln) = layer_norm(&z, &params.final_norm);
    let logits_m = params.head.apply(&pooled);
    check(&logits_m, n_layers + 1)?;
    let logits = [logits_m.get(0, 0), logits_m.get(0, 1)];
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let probs = [e0 / (e0 + e1), e1 / (e0 + e1)];

    let last = caches.last().expect("at least one block");
    let mut attention = vec![T::zero(); n];
    for hc in &last.heads {
        for (w, &pr) in attention.iter_mut().zip(hc.probs.row(0)) {
            *w += pr;
        }
    }
    let total: T = attention.iter().copied().sum();
    for w in attention.iter_mut() {
        *w /= total;
    }

    let prediction = Prediction { logits, prob_high: probs[1], attention, pooled: pooled.row(0).to_vec() };
    Ok((prediction, ForwardCache { blocks: caches, final_ln, pooled, probs }))
}

pub fn forward<T: Scalar>(params: &AggregatorParams<T>, bag: &FeatureBag<T>, mode: Mode<'_>) -> Result<Prediction<T>> {
    run(params, bag, mode).map(|(p, _)| p)
}

/// Cross-entropy of `label` and its exact gradient for the dropout mask
/// sampled during this call.
pub fn loss_and_grad<T: Scalar>(
    params: &AggregatorParams<T>,
    bag: &FeatureBag<T>,
    label: Label,
    mode: Mode<'_>,
) -> Result<(T, AggregatorParams<T>)> {
    let (pred, cache) = run(params, bag, mode)?;
    let y = label.index();
    let max = pred.logits[0].max(pred.logits[1]);
    let lse = max + ((pred.logits[0] - max).exp() + (pred.logits[1] - max).exp()).ln();
    let loss = lse - pred.logits[y];

    let mut grad = params.zeros_like();
    let mut dlogits = Matrix::from_vec(1, 2, cache.probs.to_vec());
    dlogits.set(0, y, dlogits.get(0, y) - T::one());
    accumulate_linear(&mut grad.head, &cache.pooled, &dlogits);
    let dpooled = dlogits.matmul_nt(&params.head.weight);
    let mut dz = layer_norm_backward(&dpooled, &params.final_norm, &cache.final_ln, &mut grad.final_norm);

    for l in (0..params.blocks.len()).rev() {
        dz = block_backward(&params.blocks[l], &cache.blocks[l], &dz, &mut grad.blocks[l]);
    }

    grad.cls_token.copy_from_slice(dz.row(0));
    let n = bag.n_tiles();
    let d_embedded = Matrix::from_vec(n, dz.cols(), dz.as_slice()[dz.cols()..].to_vec());
    accumulate_linear(&mut grad.input, bag.vectors(), &d_embedded);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{ensemble_predict, AggregatorConfig};
    use crate::dataset::TileMeta;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(dim: usize, layers: usize, heads: usize, p: f64) -> AggregatorConfig {
        AggregatorConfig {
            feature_dim: dim,
            model_dim: dim,
            n_layers: layers,
            n_heads: heads,
            mlp_ratio: 2,
            attention_dropout_p: p,
            n_classes: 2,
        }
    }

    fn meta(n: usize) -> Vec<TileMeta> {
        (0..n)
            .map(|i| TileMeta { slide_id: "s".into(), section_id: 0, grid_x: i as u32, grid_y: 0 })
            .collect()
    }

    fn random_bag(n: usize, dim: usize, seed: u64) -> FeatureBag<f64> {
        let mut r = rng::seeded(seed);
        let m = Matrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut r));
        FeatureBag::new("c", m, meta(n)).unwrap()
    }

    /// Every tensor, head included, drawn at random so no gradient is
    /// structurally zero.
    fn random_params(config: &AggregatorConfig, seed: u64) -> AggregatorParams<f64> {
        let mut p = AggregatorParams::<f64>::init(config, seed).unwrap();
        let mut r = rng::seeded(seed ^ 0xabcdef);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *x += 0.3 * z;
            }
        }
        p
    }

    fn loss_at(p: &AggregatorParams<f64>, bag: &FeatureBag<f64>, label: Label, seed: Option<u64>) -> f64 {
        match seed {
            Some(s) => {
                let mut r = rng::seeded(s);
                loss_and_grad(p, bag, label, Mode::Train(&mut r)).unwrap().0
            }
            None => loss_and_grad(p, bag, label, Mode::Eval).unwrap().0,
        }
    }

    fn gradient_check(config: &AggregatorConfig, n_tiles: usize, seed: u64, dropout_seed: Option<u64>) {
        let params = random_params(config, seed);
        let bag = random_bag(n_tiles, config.feature_dim, seed + 100);
        let label = if seed % 2 == 0 { Label::High } else { Label::Low };
        let grad = match dropout_seed {
            Some(s) => {
                let mut r = rng::seeded(s);
                loss_and_grad(&params, &bag, label, Mode::Train(&mut r)).unwrap().1
            }
            None => loss_and_grad(&params, &bag, label, Mode::Eval).unwrap().1,
        };
        let h = 1e-4;
        let names = params.layout();
        for (t, (name, _)) in names.iter().enumerate() {
            let len = params.tensors()[t].len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t][i] -= h;
                let numeric = (loss_at(&plus, &bag, label, dropout_seed) - loss_at(&minus, &bag, label, dropout_seed)) / (2.0 * h);
                let analytic = grad.tensors()[t][i];
                let denom = analytic.abs().max(numeric.abs());
                // entries below 1e-7 are dominated by finite-difference noise
                if denom > 1e-7 {
                    let rel = (analytic - numeric).abs() / denom;
                    assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            gradient_check(&cfg(8, 1, 2, 0.0), 3, seed, None);
        }
    }

    #[test]
    fn gradients_match_with_two_layers_and_dropout() {
        for seed in 0..4 {
            gradient_check(&cfg(8, 2, 2, 0.5), 4, seed, Some(seed + 7));
        }
        gradient_check(&cfg(6, 2, 3, 0.0), 1, 11, None);
    }

    #[test]
    fn permutation_invariance() {
        let config = cfg(8, 2, 2, 0.5);
        let params = random_params(&config, 1);
        let bag = random_bag(7, 8, 2);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let shuffled = bag.select(&perm).unwrap();
        let a = forward(&params, &bag, Mode::Eval).unwrap();
        let b = forward(&params, &shuffled, Mode::Eval).unwrap();
        assert!((a.prob_high - b.prob_high).abs() < 1e-12);
        for (j, &src) in perm.iter().enumerate() {
            assert!((b.attention[j] - a.attention[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_a_distribution() {
        let config = cfg(8, 2, 2, 0.5);
        let params = random_params(&config, 4);
        let single = forward(&params, &random_bag(1, 8, 5), Mode::Eval).unwrap();
        assert_eq!(single.attention, vec![1.0]);
        let many = forward(&params, &random_bag(20, 8, 6), Mode::Eval).unwrap();
        assert!(many.attention.iter().all(|&w| w >= 0.0));
        assert!((many.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_tiles_get_uniform_attention() {
        let config = cfg(8, 2, 2, 0.0);
        let params = random_params(&config, 8);
        let one = random_bag(1, 8, 9);
        let rows = vec![0; 5];
        let five = one.select(&rows).unwrap();
        let a = forward(&params, &one, Mode::Eval).unwrap();
        let b = forward(&params, &five, Mode::Eval).unwrap();
        assert!((a.prob_high - b.prob_high).abs() < 1e-9);
        for w in b.attention {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_every_tile_keeps_prediction() {
        let config = cfg(8, 2, 2, 0.5);
        for seed in 0..5 {
            let params = random_params(&config, seed);
            let bag = random_bag(6, 8, seed + 1);
            let rows: Vec<usize> = (0..6).chain(0..6).collect();
            let doubled = bag.select(&rows).unwrap();
            let a = forward(&params, &bag, Mode::Eval).unwrap();
            let b = forward(&params, &doubled, Mode::Eval).unwrap();
            assert!((a.prob_high - b.prob_high).abs() < 1e-9);
            for j in 0..6 {
                assert!((b.attention[j] - a.attention[j] / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let config = cfg(8, 2, 2, 0.5);
        let params = AggregatorParams::<f64>::init(&config, 0).unwrap();
        let bag = random_bag(4, 8, 1);
        let p = forward(&params, &bag, Mode::Eval).unwrap();
        assert_eq!(p.prob_high, 0.5);
        let (loss, _) = loss_and_grad(&params, &bag, Label::High, Mode::Eval).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_stays_finite_for_huge_logits() {
        let config = cfg(8, 1, 2, 0.0);
        let mut params = AggregatorParams::<f64>::init(&config, 0).unwrap();
        params.head.bias = vec![1e4, -1e4];
        let bag = random_bag(2, 8, 0);
        let (loss, grad) = loss_and_grad(&params, &bag, Label::High, Mode::Eval).unwrap();
        assert!((loss - 2e4).abs() < 1e-9);
        assert!(grad.is_finite());
        let (loss, _) = loss_and_grad(&params, &bag, Label::Low, Mode::Eval).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn head_gradient_closed_form() {
        let config = cfg(8, 1, 2, 0.0);
        let params = random_params(&config, 12);
        let bag = random_bag(5, 8, 13);
        let pred = forward(&params, &bag, Mode::Eval).unwrap();
        let (_, grad) = loss_and_grad(&params, &bag, Label::High, Mode::Eval).unwrap();
        let delta = [1.0 - pred.prob_high, pred.prob_high - 1.0];
        for (i, &y) in pred.pooled.iter().enumerate() {
            for (c, &dc) in delta.iter().enumerate() {
                assert!((grad.head.weight.get(i, c) - y * dc).abs() < 1e-12);
            }
        }
        assert!((grad.head.bias[0] - delta[0]).abs() < 1e-12);
    }

    #[test]
    fn train_mode_is_deterministic_per_seed() {
        let config = cfg(8, 2, 2, 0.5);
        let params = random_params(&config, 3);
        let bag = random_bag(6, 8, 4);
        let run = |s| {
            let mut r = rng::seeded(s);
            loss_and_grad(&params, &bag, Label::Low, Mode::Train(&mut r)).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1).0, run(2).0);
        let e1 = forward(&params, &bag, Mode::Eval).unwrap();
        let e2 = forward(&params, &bag, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn shape_and_non_finite_errors() {
        let config = cfg(8, 1, 2, 0.0);
        let mut params = random_params(&config, 3);
        assert!(matches!(forward(&params, &random_bag(2, 6, 0), Mode::Eval), Err(ModelError::Shape(_))));
        params.blocks[0].fc2.bias[0] = f64::INFINITY;
        assert!(matches!(forward(&params, &random_bag(2, 8, 0), Mode::Eval), Err(ModelError::NonFinite { layer: 1 })));
    }

    #[test]
    fn f32_agrees_with_f64() {
        let config = cfg(8, 2, 2, 0.0);
        let p64 = random_params(&config, 5);
        let p32: AggregatorParams<f32> = p64.cast();
        let bag = random_bag(9, 8, 6);
        let a = forward(&p64, &bag, Mode::Eval).unwrap();
        let b = forward(&p32, &bag.cast(), Mode::Eval).unwrap();
        assert!((a.prob_high - b.prob_high as f64).abs() < 1e-4);
    }

    #[test]
    fn ensemble_is_arithmetic_mean() {
        let config = cfg(8, 1, 2, 0.0);
        let bag = random_bag(3, 8, 0);
        // members whose head bias alone fixes the probability
        let member = |prob: f64| {
            let mut p = AggregatorParams::<f64>::init(&config, 0).unwrap();
            p.head.bias[1] = (prob / (1.0 - prob)).ln();
            p
        };
        let probs = [0.2, 0.4, 0.6, 0.8, 0.5];
        let members: Vec<_> = probs.iter().map(|&p| member(p)).collect();
        let mean = ensemble_predict(&members, &bag).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);

        let single = random_params(&config, 9);
        let copies = vec![single.clone(); 5];
        let alone = forward(&single, &bag, Mode::Eval).unwrap().prob_high;
        assert_eq!(ensemble_predict(&copies, &bag).unwrap(), alone);
        assert!(ensemble_predict::<f64>(&[], &bag).is_err());
    }

    #[test]
    fn ensemble_lies_within_member_range() {
        let config = cfg(8, 1, 2, 0.0);
        for seed in 0..20 {
            let members: Vec<_> = (0..5).map(|m| random_params(&config, seed * 10 + m)).collect();
            let bag = random_bag(4, 8, seed);
            let ps: Vec<f64> = members.iter().map(|m| forward(m, &bag, Mode::Eval).unwrap().prob_high).collect();
            let e = ensemble_predict(&members, &bag).unwrap();
            let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(e >= lo - 1e-15 && e <= hi + 1e-15);
        }
    }
}
