//! Positional encoding and single-instance attention.
//!
//! These are the unbatched reference forms; the model itself runs the
//! batched kernel in [`crate::graph::attention_kernel`].

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Sinusoidal encoding of position `pos` in a width-`d` embedding.
pub fn positional_encoding(pos: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("positional encoding width must be even, got {d}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows `0..len` of the positional encoding table.
pub fn positional_table(len: usize, d: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(len, d);
    for p in 0..len {
        m.row_mut(p).copy_from_slice(&positional_encoding(p, d)?);
    }
    Ok(m)
}

/// Additive mask that blocks keys after each query position.
pub fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = f64::NEG_INFINITY;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// `softmax((Q Wq)(K Wk)ᵀ / √d_head + mask) · (V Wv)`.
///
/// Returns the head output and the attention weights. Fully masked query
/// rows produce zero output.
pub fn attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    proj: &HeadProjections,
    mask: Option<&Matrix>,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != proj.query.rows() || k.cols() != proj.key.rows() || v.cols() != proj.value.rows() {
        return Err(Error::Shape("input width does not match projection".into()));
    }
    if proj.query.cols() != proj.key.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            proj.query.cols(),
            proj.key.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape("key and value lengths differ".into()));
    }
    let qp = q.matmul(&proj.query);
    let kp = k.matmul(&proj.key);
    let vp = v.matmul(&proj.value);
    let scale = 1.0 / (qp.cols() as f64).sqrt();
    let mut scores = qp.matmul(&kp.transpose());
    scores.scale_assign(scale);
    if let Some(m) = mask {
        if m.shape() != scores.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match scores {:?}",
                m.shape(),
                scores.shape()
            )));
        }
        scores.add_assign(m);
    }
    for i in 0..scores.rows() {
        softmax_in_place(scores.row_mut(i));
    }
    let out = scores.matmul(&vp);
    Ok((out, scores))
}

/// Concatenated heads projected by `combine` (`heads·d_v × d_out`).
pub fn multi_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: &[HeadProjections],
    combine: &Matrix,
    mask: Option<&Matrix>,
) -> Result<(Matrix, Vec<Matrix>)> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("at least one head required".into()));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for h in heads {
        let (o, w) = attention_head(q, k, v, h, mask)?;
        outs.push(o);
        weights.push(w);
    }
    let width: usize = outs.iter().map(Matrix::cols).sum();
    if width != combine.rows() {
        return Err(Error::Shape(format!(
            "concatenated width {width} != combine rows {}",
            combine.rows()
        )));
    }
    let mut cat = Matrix::zeros(q.rows(), width);
    for i in 0..q.rows() {
        let mut c = 0;
        for o in &outs {
            cat.row_mut(i)[c..c + o.cols()].copy_from_slice(o.row(i));
            c += o.cols();
        }
    }
    Ok((cat.matmul(combine), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attention_kernel, AttentionLayout};
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
        for d in [2, 8, 512] {
            assert!((positional_encoding(1, d).unwrap()[0] - 0.841_470_98).abs() < 1e-8);
        }
        for pos in [0, 1, 17, 999] {
            assert!(positional_encoding(pos, 16).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(positional_encoding(3, 7).is_err());
    }

    fn identity_proj(d: usize) -> HeadProjections {
        HeadProjections {
            query: Matrix::identity(d),
            key: Matrix::identity(d),
            value: Matrix::identity(d),
        }
    }

    #[test]
    fn single_position_returns_its_value() {
        let mut rng = RngStream::new(1);
        let proj = HeadProjections {
            query: random(3, 2, &mut rng),
            key: random(3, 2, &mut rng),
            value: random(3, 2, &mut rng),
        };
        let x = random(1, 3, &mut rng);
        let (out, w) = attention_head(&x, &x, &x, &proj, None).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert!(out.max_abs_diff(&x.matmul(&proj.value)) < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let k = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let q = Matrix::from_rows(&[vec![0.3, -1.0], vec![5.0, 4.0]]);
        let (_, w) = attention_head(&q, &k, &k, &identity_proj(2), Some(&Matrix::zeros(2, 3))).unwrap();
        assert!(w.data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]);
        let v = Matrix::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]);
        let (out, _) = attention_head(&q, &k, &v, &identity_proj(2), None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // query 0 scores: [1, 0]·s ; query 1 scores: [1, 2]·s
        for (i, (a, b)) in [(1.0 * s, 0.0), (1.0 * s, 2.0 * s)].into_iter().enumerate() {
            let wa = a.exp() / (a.exp() + f64::exp(b));
            let wb = 1.0 - wa;
            assert!((out[(i, 0)] - 10.0 * wa).abs() < 1e-12);
            assert!((out[(i, 1)] - 10.0 * wb).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = RngStream::new(2);
        let x = random(4, 2, &mut rng);
        let (_, w) = attention_head(&x, &x, &x, &identity_proj(2), Some(&causal_mask(4))).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(w[(i, j)], 0.0);
            }
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_head_identity_combine_equals_head() {
        let mut rng = RngStream::new(3);
        let proj = HeadProjections {
            query: random(4, 4, &mut rng),
            key: random(4, 4, &mut rng),
            value: random(4, 4, &mut rng),
        };
        let x = random(3, 4, &mut rng);
        let (head, _) = attention_head(&x, &x, &x, &proj, None).unwrap();
        let (mh, w) = multi_head(&x, &x, &x, std::slice::from_ref(&proj), &Matrix::identity(4), None).unwrap();
        assert!(mh.max_abs_diff(&head) < 1e-15);
        assert!(w[0].data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn batched_kernel_matches_per_head_loop() {
        let mut rng = RngStream::new(4);
        let (d, heads, tq, tk) = (6, 3, 4, 5);
        let dh = d / heads;
        let xq = random(tq, d, &mut rng);
        let xk = random(tk, d, &mut rng);
        let wq = random(d, d, &mut rng);
        let wk = random(d, d, &mut rng);
        let wv = random(d, d, &mut rng);
        let wm = random(d, d, &mut rng);
        let cols = |m: &Matrix, h: usize| {
            let mut out = Matrix::zeros(m.rows(), dh);
            for r in 0..m.rows() {
                out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        };
        let projs: Vec<HeadProjections> = (0..heads)
            .map(|h| HeadProjections {
                query: cols(&wq, h),
                key: cols(&wk, h),
                value: cols(&wv, h),
            })
            .collect();
        let (oracle, oracle_w) = multi_head(&xq, &xk, &xk, &projs, &wm, None).unwrap();

        let layout = AttentionLayout {
            batch: 1,
            q_len: tq,
            k_len: tk,
            heads,
            causal: false,
            key_valid: vec![true; tk],
        };
        let (cat, w) = attention_kernel(&xq.matmul(&wq), &xk.matmul(&wk), &xk.matmul(&wv), &layout);
        assert!(cat.matmul(&wm).max_abs_diff(&oracle) < 1e-6);
        for h in 0..heads {
            assert!(w[h].max_abs_diff(&oracle_w[h]) < 1e-9);
            for i in 0..tq {
                assert!((w[h].row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = Matrix::zeros(2, 3);
        let proj = HeadProjections {
            query: Matrix::zeros(3, 2),
            key: Matrix::zeros(3, 4),
            value: Matrix::zeros(3, 2),
        };
        assert!(attention_head(&x, &x, &x, &proj, None).is_err());
    }
}
