//! Single-step LSTM and GRU cells.
//!
//! Gate order is (input, forget, cell, output) for the LSTM and
//! (update, reset, candidate) for the GRU; the batched layers in
//! [`crate::nn::network`] use the same row layout.

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<F> {
    /// `[4H × D]`
    pub w: Tensor<F>,
    /// `[4H × H]`
    pub u: Tensor<F>,
    /// `[4H]`
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams<F> {
    /// `[3H × D]`
    pub w: Tensor<F>,
    /// `[3H × H]`
    pub u: Tensor<F>,
    /// `[3H]`
    pub b: Tensor<F>,
}

/// Checks `w: [gates·H × D]`, `u: [gates·H × H]`, `b: [gates·H]` against the
/// input and state vectors and returns `(H, D)`.
fn check_shapes<F: Real>(
    gates: usize,
    w: &Tensor<F>,
    u: &Tensor<F>,
    b: &Tensor<F>,
    x: &Tensor<F>,
    h: &Tensor<F>,
) -> Result<(usize, usize)> {
    let hidden = h.len();
    let input = x.len();
    w.expect_shape("W", &[gates * hidden, input])?;
    u.expect_shape("U", &[gates * hidden, hidden])?;
    b.expect_shape("b", &[gates * hidden])?;
    Ok((hidden, input))
}

fn affine<F: Real>(w: &[F], cols: usize, row: usize, v: &[F]) -> F {
    w[row * cols..(row + 1) * cols]
        .iter()
        .zip(v)
        .map(|(a, b)| *a * *b)
        .sum()
}

pub fn lstm_step<F: Real>(
    p: &LstmCellParams<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (hidden, input) = check_shapes(4, &p.w, &p.u, &p.b, x, h_prev)?;
    if c_prev.len() != hidden {
        return Err(Error::Shape(format!(
            "c_prev has {} values, h_prev has {hidden}",
            c_prev.len()
        )));
    }
    let pre = |row: usize| {
        affine(p.w.data(), input, row, x.data()) + affine(p.u.data(), hidden, row, h_prev.data()) + p.b.data()[row]
    };
    let mut h = Vec::with_capacity(hidden);
    let mut c = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let i = pre(j).sigmoid();
        let f = pre(hidden + j).sigmoid();
        let g = pre(2 * hidden + j).tanh();
        let o = pre(3 * hidden + j).sigmoid();
        let cj = f * c_prev.data()[j] + i * g;
        c.push(cj);
        h.push(o * cj.tanh());
    }
    Ok((Tensor::from_vec(h), Tensor::from_vec(c)))
}

pub fn gru_step<F: Real>(p: &GruCellParams<F>, x: &Tensor<F>, h_prev: &Tensor<F>) -> Result<Tensor<F>> {
    let (hidden, input) = check_shapes(3, &p.w, &p.u, &p.b, x, h_prev)?;
    let hp = h_prev.data();
    let mut z = Vec::with_capacity(hidden);
    let mut rh = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let zj = (affine(p.w.data(), input, j, x.data()) + affine(p.u.data(), hidden, j, hp) + p.b.data()[j]).sigmoid();
        let rj = (affine(p.w.data(), input, hidden + j, x.data())
            + affine(p.u.data(), hidden, hidden + j, hp)
            + p.b.data()[hidden + j])
            .sigmoid();
        z.push(zj);
        rh.push(rj * hp[j]);
    }
    let h = (0..hidden)
        .map(|j| {
            let row = 2 * hidden + j;
            let n = (affine(p.w.data(), input, row, x.data()) + affine(p.u.data(), hidden, row, &rh) + p.b.data()[row])
                .tanh();
            (F::ONE - z[j]) * hp[j] + z[j] * n
        })
        .collect();
    Ok(Tensor::from_vec(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn lstm_zero(h: usize, d: usize) -> LstmCellParams<f64> {
        LstmCellParams {
            w: Tensor::zeros(vec![4 * h, d]),
            u: Tensor::zeros(vec![4 * h, h]),
            b: Tensor::zeros(vec![4 * h]),
        }
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn lstm_zero_params() {
        let p = lstm_zero(2, 3);
        let x = Tensor::from_vec(vec![0.3, -0.1, 2.0]);
        let (h, c) = lstm_step(&p, &x, &Tensor::zeros(vec![2]), &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(h.data(), [0.0, 0.0]);
        assert_eq!(c.data(), [0.0, 0.0]);
        let (h, c) = lstm_step(&p, &x, &Tensor::zeros(vec![2]), &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(c.data(), [0.5, 0.5]);
        assert_eq!(h.data()[0], 0.5 * 0.5f64.tanh());
    }

    #[test]
    fn lstm_shape_errors_name_tensors() {
        let p = lstm_zero(2, 3);
        let err = lstm_step(
            &p,
            &Tensor::zeros(vec![4]),
            &Tensor::zeros(vec![2]),
            &Tensor::zeros(vec![2]),
        )
        .unwrap_err();
        assert!(err.to_string().contains('W'), "{err}");
    }

    #[test]
    fn lstm_matches_straight_line_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, d) = (3, 3);
        let p = LstmCellParams {
            w: rand_tensor(&mut rng, vec![4 * h, d]),
            u: rand_tensor(&mut rng, vec![4 * h, h]),
            b: rand_tensor(&mut rng, vec![4 * h]),
        };
        let x = rand_tensor(&mut rng, vec![d]);
        let hp = rand_tensor(&mut rng, vec![h]);
        let cp = rand_tensor(&mut rng, vec![h]);
        let (hn, cn) = lstm_step(&p, &x, &hp, &cp).unwrap();

        let (w, u, b) = (p.w.data(), p.u.data(), p.b.data());
        let gate = |g: usize, j: usize| {
            let r = g * h + j;
            let mut s = b[r];
            for k in 0..d {
                s += w[r * d + k] * x.data()[k];
            }
            for k in 0..h {
                s += u[r * h + k] * hp.data()[k];
            }
            s
        };
        for j in 0..h {
            let c = sig(gate(1, j)) * cp.data()[j] + sig(gate(0, j)) * gate(2, j).tanh();
            let hh = sig(gate(3, j)) * c.tanh();
            assert!((cn.data()[j] - c).abs() < 1e-14);
            assert!((hn.data()[j] - hh).abs() < 1e-14);
            assert!(hn.data()[j].abs() <= 1.0);
        }
    }

    #[test]
    fn gru_zero_params() {
        let p = GruCellParams {
            w: Tensor::zeros(vec![6, 1]),
            u: Tensor::zeros(vec![6, 2]),
            b: Tensor::zeros(vec![6]),
        };
        let x = Tensor::from_vec(vec![1.0]);
        let h = gru_step(&p, &x, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(h.data(), [0.0, 0.0]);
        let h = gru_step(&p, &x, &Tensor::from_vec(vec![0.8, -2.0])).unwrap();
        assert_eq!(h.data(), [0.4, -1.0]);
    }

    #[test]
    fn gru_matches_straight_line_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, d) = (3, 2);
        let p = GruCellParams {
            w: rand_tensor(&mut rng, vec![3 * h, d]),
            u: rand_tensor(&mut rng, vec![3 * h, h]),
            b: rand_tensor(&mut rng, vec![3 * h]),
        };
        let x = rand_tensor(&mut rng, vec![d]);
        let hp = rand_tensor(&mut rng, vec![h]);
        let out = gru_step(&p, &x, &hp).unwrap();
        let (w, u, b) = (p.w.data(), p.u.data(), p.b.data());
        let wx = |r: usize| (0..d).map(|k| w[r * d + k] * x.data()[k]).sum::<f64>();
        let uv = |r: usize, v: &[f64]| (0..h).map(|k| u[r * h + k] * v[k]).sum::<f64>();
        let z: Vec<f64> = (0..h).map(|j| sig(wx(j) + uv(j, hp.data()) + b[j])).collect();
        let r: Vec<f64> = (0..h)
            .map(|j| sig(wx(h + j) + uv(h + j, hp.data()) + b[h + j]))
            .collect();
        let rh: Vec<f64> = (0..h).map(|j| r[j] * hp.data()[j]).collect();
        for j in 0..h {
            let n = (wx(2 * h + j) + uv(2 * h + j, &rh) + b[2 * h + j]).tanh();
            let expect = (1.0 - z[j]) * hp.data()[j] + z[j] * n;
            assert!((out.data()[j] - expect).abs() < 1e-14);
            let bound = hp.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(out.data()[j].abs() <= bound);
        }
    }
}
