//! Causal Linformer attention.
//!
//! Keys and values are compressed along the sequence axis by the
//! projections `E` and `F` (`k × L`). To stay causal, query `j` sees the
//! projections of the prefix `0..=j` only:
//!
//! `K̃_j[r] = Σ_{m ≤ j} E[r, m] K[m]`, for slots `r < min(j + 1, k)`.
//!
//! With `k = n` and `E = F = I` this is exactly masked softmax attention.
//! Memory is `O(n · k · d)`.

use std::cell::Cell;

use ndarray::{Array3, Axis};

use crate::autograd::{CustomOp, Mat};

thread_local! {
    static CACHE_ELEMENTS: Cell<usize> = const { Cell::new(0) };
}

/// Number of `f64` values cached by the last attention forward pass on
/// this thread.
pub fn last_cache_elements() -> usize {
    CACHE_ELEMENTS.with(Cell::get)
}

pub(crate) struct LinformerCache {
    slots: usize,
    pk: Array3<f64>,
    pv: Array3<f64>,
    attn: Mat,
}

fn visible(j: usize, slots: usize) -> usize {
    (j + 1).min(slots)
}

/// Forward pass. `e` and `f` must have at least `n` columns.
pub(crate) fn forward(q: &Mat, k: &Mat, v: &Mat, e: &Mat, f: &Mat) -> (Mat, LinformerCache) {
    let n = q.nrows();
    let dk = q.ncols();
    let dv = v.ncols();
    let slots = e.nrows().min(n);
    let scale = 1.0 / (dk as f64).sqrt();

    let mut pk = Array3::<f64>::zeros((n, slots, dk));
    let mut pv = Array3::<f64>::zeros((n, slots, dv));
    let mut attn = Mat::zeros((n, slots));
    let mut out = Mat::zeros((n, dv));
    let mut run_k = Mat::zeros((slots, dk));
    let mut run_v = Mat::zeros((slots, dv));
    let mut scores = vec![0.0; slots];

    for j in 0..n {
        for r in 0..slots {
            let ek = e[[r, j]];
            let fv = f[[r, j]];
            run_k.row_mut(r).scaled_add(ek, &k.row(j));
            run_v.row_mut(r).scaled_add(fv, &v.row(j));
        }
        let vis = visible(j, slots);
        pk.index_axis_mut(Axis(0), j).assign(&run_k);
        pv.index_axis_mut(Axis(0), j).assign(&run_v);

        let qj = q.row(j);
        let mut max = f64::NEG_INFINITY;
        for r in 0..vis {
            scores[r] = qj.dot(&run_k.row(r)) * scale;
            max = max.max(scores[r]);
        }
        let mut z = 0.0;
        for s in scores.iter_mut().take(vis) {
            *s = (*s - max).exp();
            z += *s;
        }
        let mut oj = out.row_mut(j);
        for r in 0..vis {
            let a = scores[r] / z;
            attn[[j, r]] = a;
            oj.scaled_add(a, &run_v.row(r));
        }
    }
    let cached = pk.len() + pv.len() + attn.len();
    CACHE_ELEMENTS.with(|c| c.set(cached));
    (
        out,
        LinformerCache {
            slots,
            pk,
            pv,
            attn,
        },
    )
}

/// Causal Linformer attention for one head.
pub fn causal_linformer(q: &Mat, k: &Mat, v: &Mat, e: &Mat, f: &Mat) -> Mat {
    forward(q, k, v, e, f).0
}

/// Reference masked softmax attention without projections.
pub fn causal_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Mat::zeros((n, v.ncols()));
    for j in 0..n {
        let s: Vec<f64> = (0..=j).map(|m| q.row(j).dot(&k.row(m)) * scale).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for (m, wm) in w.iter().enumerate() {
            out.row_mut(j).scaled_add(wm / z, &v.row(m));
        }
    }
    out
}

pub(crate) struct LinformerOp(pub(crate) LinformerCache);

impl CustomOp for LinformerOp {
    fn backward(&self, inputs: &[&Mat], _output: &Mat, g: &Mat) -> Vec<Mat> {
        let (q, k, v, e, f) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let c = &self.0;
        let n = q.nrows();
        let dk = q.ncols();
        let dv = v.ncols();
        let slots = c.slots;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut dq = Mat::zeros(q.raw_dim());
        let mut dpk = Array3::<f64>::zeros((n, slots, dk));
        let mut dpv = Array3::<f64>::zeros((n, slots, dv));
        let mut da = vec![0.0; slots];
        for j in 0..n {
            let vis = visible(j, slots);
            let gj = g.row(j);
            let pv = c.pv.index_axis(Axis(0), j);
            let pk = c.pk.index_axis(Axis(0), j);
            let mut dot = 0.0;
            for r in 0..vis {
                da[r] = gj.dot(&pv.row(r));
                dot += c.attn[[j, r]] * da[r];
                dpv.index_axis_mut(Axis(0), j)
                    .row_mut(r)
                    .scaled_add(c.attn[[j, r]], &gj);
            }
            for r in 0..vis {
                let ds = c.attn[[j, r]] * (da[r] - dot) * scale;
                dq.row_mut(j).scaled_add(ds, &pk.row(r));
                dpk.index_axis_mut(Axis(0), j)
                    .row_mut(r)
                    .scaled_add(ds, &q.row(j));
            }
        }

        let mut dk_ = Mat::zeros(k.raw_dim());
        let mut dv_ = Mat::zeros(v.raw_dim());
        let mut de = Mat::zeros(e.raw_dim());
        let mut df = Mat::zeros(f.raw_dim());
        let mut sk = Mat::zeros((slots, dk));
        let mut sv = Mat::zeros((slots, dv));
        for m in (0..n).rev() {
            sk += &dpk.index_axis(Axis(0), m);
            sv += &dpv.index_axis(Axis(0), m);
            for r in 0..slots {
                dk_.row_mut(m).scaled_add(e[[r, m]], &sk.row(r));
                dv_.row_mut(m).scaled_add(f[[r, m]], &sv.row(r));
                de[[r, m]] = k.row(m).dot(&sk.row(r));
                df[[r, m]] = v.row(m).dot(&sv.row(r));
            }
        }
        vec![dq, dk_, dv_, de, df]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_projections_match_plain_attention() {
        let mut rng = crate::rng::seeded(3);
        for n in [1, 2, 7, 20] {
            let q = random(&mut rng, n, 4);
            let k = random(&mut rng, n, 4);
            let v = random(&mut rng, n, 3);
            let eye = Mat::eye(n);
            let a = causal_linformer(&q, &k, &v, &eye, &eye);
            let b = causal_attention(&q, &k, &v);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_rows_ignore_later_positions() {
        let mut rng = crate::rng::seeded(4);
        let n = 9;
        let q = random(&mut rng, n, 4);
        let mut k = random(&mut rng, n, 4);
        let v = random(&mut rng, n, 4);
        let e = random(&mut rng, 5, 12);
        let f = random(&mut rng, 5, 12);
        let base = causal_linformer(&q, &k, &v, &e, &f);
        k.row_mut(6).fill(3.0);
        let moved = causal_linformer(&q, &k, &v, &e, &f);
        for j in 0..6 {
            assert_eq!(base.row(j), moved.row(j));
        }
        assert_ne!(base.row(6), moved.row(6));
    }

    #[test]
    fn cache_grows_linearly_at_fixed_k() {
        let mut rng = crate::rng::seeded(5);
        let mut sizes = Vec::new();
        for n in [64, 128] {
            let q = random(&mut rng, n, 4);
            let e = random(&mut rng, 8, 200);
            causal_linformer(&q, &q, &q, &e, &e);
            sizes.push(last_cache_elements());
        }
        assert_eq!(sizes[1], 2 * sizes[0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded(6);
        let n = 6;
        let ins = [
            random(&mut rng, n, 3),
            random(&mut rng, n, 3),
            random(&mut rng, n, 2),
            random(&mut rng, 4, 8),
            random(&mut rng, 4, 8),
        ];
        let w = random(&mut rng, n, 2);
        let loss = |ins: &[Mat]| -> f64 {
            let o = causal_linformer(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4]);
            (&o * &w).sum()
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|m| tape.param(m.clone())).collect();
        let (out, cache) = forward(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4]);
        let o = tape.custom(&vars, out, Box::new(LinformerOp(cache)));
        let wc = tape.constant(w.clone());
        let p = tape.mul(o, wc);
        let l = tape.sum_all(p);
        let grads = tape.backward(l);
        for (i, m) in ins.iter().enumerate() {
            let an = grads.get_or_zeros(vars[i], m);
            for idx in 0..m.len() {
                let mut plus = ins.clone();
                plus[i].as_slice_mut().unwrap()[idx] += 1e-6;
                let mut minus = ins.clone();
                minus[i].as_slice_mut().unwrap()[idx] -= 1e-6;
                let num = (loss(&plus) - loss(&minus)) / 2e-6;
                let a = an.as_slice().unwrap()[idx];
                assert!((a - num).abs() < 1e-6 * (1.0 + num.abs()), "{i}/{idx}: {a} vs {num}");
            }
        }
    }
}
