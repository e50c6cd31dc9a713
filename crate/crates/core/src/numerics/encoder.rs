use super::tape::{Segment, Tape, Var};
use super::tensor::Scalar;
use super::LAYER_NORM_EPS;
use crate::error::Result;

/// Tape handles for one post-norm transformer encoder layer.
///
/// Projection weights are `in x out`; biases and norm parameters are rows.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// One encoder layer over a packed batch of sequences:
///
/// ```text
/// h = LN(x + MHA(x))
/// y = LN(h + W2 relu(W1 h))
/// ```
///
/// Attention never crosses `segments`. No positional term is added, so the
/// layer is equivariant to row permutations within a segment.
pub fn transformer_encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &EncoderVars,
    segments: &[Segment],
    heads: usize,
) -> Result<Var> {
    let eps = T::lit(LAYER_NORM_EPS);
    let q = tape.linear(x, w.wq, w.bq)?;
    let k = tape.linear(x, w.wk, w.bk)?;
    let v = tape.linear(x, w.wv, w.bv)?;
    let attn = tape.attention(q, k, v, heads, segments)?;
    let proj = tape.linear(attn, w.wo, w.bo)?;
    let res1 = tape.add(x, proj)?;
    let h = tape.layer_norm(res1, w.ln1_gain, w.ln1_bias, eps)?;
    let f1 = tape.linear(h, w.ff_w1, w.ff_b1)?;
    let f1 = tape.relu(f1);
    let f2 = tape.linear(f1, w.ff_w2, w.ff_b2)?;
    let res2 = tape.add(h, f2)?;
    tape.layer_norm(res2, w.ln2_gain, w.ln2_bias, eps)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::{central_difference, worst_relative_error};
    use crate::numerics::Tensor;

    type M = Vec<Vec<f64>>;

    struct Weights {
        mats: Vec<Tensor<f64>>,
    }

    const SHAPES: [(usize, usize); 16] = [
        (16, 16), (1, 16), (16, 16), (1, 16), (16, 16), (1, 16), (16, 16), (1, 16),
        (1, 16), (1, 16), (16, 24), (1, 24), (24, 16), (1, 16), (1, 16), (1, 16),
    ];

    fn weights(seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = SHAPES
            .iter()
            .map(|&(r, c)| {
                let data = (0..r * c).map(|_| rng.random_range(-0.5..0.5)).collect();
                Tensor::matrix(r, c, data).unwrap()
            })
            .collect();
        Weights { mats }
    }

    fn run(x: &Tensor<f64>, w: &Weights, segs: &[Segment], heads: usize) -> (Tape<f64>, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p: Vec<Var> = w.mats.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
        let vars = EncoderVars {
            wq: p[0], bq: p[1], wk: p[2], bk: p[3], wv: p[4], bv: p[5], wo: p[6], bo: p[7],
            ln1_gain: p[8], ln1_bias: p[9], ff_w1: p[10], ff_b1: p[11], ff_w2: p[12],
            ff_b2: p[13], ln2_gain: p[14], ln2_bias: p[15],
        };
        let y = transformer_encoder_layer(&mut tape, xv, &vars, segs, heads).unwrap();
        let mut handles = vec![xv];
        handles.extend(p);
        (tape, y, handles)
    }

    fn rows(t: &Tensor<f64>) -> M {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn lin(x: &M, w: &Tensor<f64>, b: &Tensor<f64>) -> M {
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| b.data()[j] + (0..w.rows()).map(|k| row[k] * w.get(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(x: &M, g: &Tensor<f64>, b: &Tensor<f64>) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                    .collect()
            })
            .collect()
    }

    fn oracle(x: &M, w: &Weights, heads: usize) -> M {
        let m = &w.mats;
        let (q, k, v) = (lin(x, &m[0], &m[1]), lin(x, &m[2], &m[3]), lin(x, &m[4], &m[5]));
        let (t, d) = (x.len(), x[0].len());
        let dh = d / heads;
        let mut attn = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    for c in cols.clone() {
                        attn[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        let proj = lin(&attn, &m[6], &m[7]);
        let res1: M = x.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let h = ln(&res1, &m[8], &m[9]);
        let f1: M = lin(&h, &m[10], &m[11]).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        let f2 = lin(&f1, &m[12], &m[13]);
        let res2: M = h.iter().zip(&f2).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        ln(&res2, &m[14], &m[15])
    }

    fn input(seed: u64, t: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, 16, (0..t * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_diff(a: &M, b: &M) -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matches_loop_oracle() {
        let w = weights(3);
        let x = input(4, 4);
        let (tape, y, _) = run(&x, &w, &[Segment::new(0, 4)], 2);
        assert!(max_diff(&rows(tape.value(y)), &oracle(&rows(&x), &w, 2)) < 1e-9);
    }

    #[test]
    fn single_token_sequence() {
        let w = weights(5);
        let x = input(6, 1);
        let (tape, y, _) = run(&x, &w, &[Segment::new(0, 1)], 2);
        assert!(max_diff(&rows(tape.value(y)), &oracle(&rows(&x), &w, 2)) < 1e-9);
    }

    #[test]
    fn permutation_equivariant() {
        let w = weights(7);
        let x = input(8, 5);
        let perm = [3, 0, 4, 1, 2];
        let (t1, y1, _) = run(&x, &w, &[Segment::new(0, 5)], 4);
        let (t2, y2, _) = run(&x.select_rows(&perm), &w, &[Segment::new(0, 5)], 4);
        let permuted = t1.value(y1).select_rows(&perm);
        assert!(permuted.max_abs_diff(t2.value(y2)) < 1e-12);
    }

    #[test]
    fn segments_do_not_interact() {
        let w = weights(9);
        let a = input(10, 3);
        let b = input(11, 4);
        let packed = Tensor::vstack(&[&a, &b]).unwrap();
        let (tp, yp, _) = run(&packed, &w, &Segment::packed(&[3, 4]), 2);
        let (ta, ya, _) = run(&a, &w, &[Segment::new(0, 3)], 2);
        let (tb, yb, _) = run(&b, &w, &[Segment::new(0, 4)], 2);
        let joined = Tensor::vstack(&[ta.value(ya), tb.value(yb)]).unwrap();
        assert!(tp.value(yp).max_abs_diff(&joined) < 1e-12);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let w = weights(1);
        let mut tape = Tape::new();
        let xv = tape.leaf(input(2, 3));
        let p: Vec<Var> = w.mats.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect();
        let vars = EncoderVars {
            wq: p[0], bq: p[1], wk: p[2], bk: p[3], wv: p[4], bv: p[5], wo: p[6], bo: p[7],
            ln1_gain: p[8], ln1_bias: p[9], ff_w1: p[10], ff_b1: p[11], ff_w2: p[12],
            ff_b2: p[13], ln2_gain: p[14], ln2_bias: p[15],
        };
        assert!(transformer_encoder_layer(&mut tape, xv, &vars, &[Segment::new(0, 3)], 3).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = weights(12);
        let x = input(13, 4);
        let segs = Segment::packed(&[1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seed = Tensor::matrix(4, 16, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (tape, y, p) = run(&x, &w, &segs, 2);
        let grads = tape.backward(y, &seed).unwrap();
        let mut inputs = vec![x.clone()];
        inputs.extend(w.mats.iter().cloned());
        let analytic: Vec<Tensor<f64>> = p.iter().map(|&v| grads.of(v).unwrap().clone()).collect();
        let numeric = central_difference(&inputs, 1e-4, |xs| {
            let w = Weights { mats: xs[1..].to_vec() };
            let (t, y, _) = run(&xs[0], &w, &segs, 2);
            t.value(y).data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
        });
        let err = worst_relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "relative error {err:e}");
    }
}
