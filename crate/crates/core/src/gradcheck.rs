//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with step `h`.
///
/// Returns the max over coordinates of
/// `|analytic − central| / max(1, |central|)`.
///
/// `f` must be deterministic: it is re-evaluated 2·numel times on perturbed
/// copies of `x`, plus once with gradients enabled.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite_difference_check: h must be > 0".into()));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Contract(
            "finite_difference_check: f must produce a scalar".into(),
        ));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .ok_or_else(|| Error::Internal("leaf missing gradient after backward".into()))?
        .to_vec();

    // Central differences, one coordinate at a time.
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape(), data.to_vec())?);
        let loss = f(&mut g, v)?;
        g.value(loss).item()
    };

    let base = x.data().to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Outcome of one gradient check in the op-family suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub family: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Keep kinked elementwise ops away from their kink.
    fn rt_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                s * rng.gen_range(0.1..2.0)
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn fd_of_sum_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rt(&mut rng, &[3, 4], -2.0, 2.0);
        let err = finite_difference_check(|g, v| g.sum(v), &x, H).unwrap();
        assert!(err < 1e-10, "err={err}");
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rt(&mut rng, &[4, 5], -2.0, 2.0);
        let c = rt(&mut rng, &[4, 5], -2.0, 2.0);

        for (name, f) in [
            ("gelu", 0usize),
            ("sigmoid", 1),
            ("scale", 2),
            ("mul", 3),
            ("sub", 4),
            ("add", 5),
        ] {
            let c = c.clone();
            let err = finite_difference_check(
                |g, v| {
                    let cv = g.constant(c.clone());
                    let y = match f {
                        0 => g.gelu(v)?,
                        1 => g.sigmoid(v)?,
                        2 => g.scale(v, -1.7)?,
                        3 => g.mul(v, cv)?,
                        4 => g.sub(cv, v)?,
                        _ => g.add(v, cv)?,
                    };
                    let weighted = g.mul(y, cv)?;
                    g.sum(weighted)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err < TOL, "{name}: err={err}");
        }
    }

    #[test]
    fn fd_relu_and_abs_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rt_away_from_zero(&mut rng, &[4, 4]);
        let w = rt(&mut rng, &[4, 4], -2.0, 2.0);
        for op in 0..2 {
            let w = w.clone();
            let err = finite_difference_check(
                |g, v| {
                    let y = if op == 0 { g.relu(v)? } else { g.abs(v)? };
                    let wv = g.constant(w.clone());
                    let weighted = g.mul(y, wv)?;
                    g.sum(weighted)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err < TOL, "op {op}: err={err}");
        }
    }

    #[test]
    fn fd_matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rt(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rt(&mut rng, &[4, 2], -2.0, 2.0);
        let w = rt(&mut rng, &[3, 2], -2.0, 2.0);

        let (b2, w2) = (b.clone(), w.clone());
        let err = finite_difference_check(
            |g, v| {
                let bv = g.constant(b2.clone());
                let y = g.matmul(v, bv)?;
                let wv = g.constant(w2.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &a,
            H,
        )
        .unwrap();
        assert!(err < TOL, "lhs err={err}");

        let err = finite_difference_check(
            |g, v| {
                let av = g.constant(a.clone());
                let y = g.matmul(av, v)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(err < TOL, "rhs err={err}");
    }

    #[test]
    fn fd_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rt(&mut rng, &[3, 5], -2.0, 2.0);
        let w = rt(&mut rng, &[3, 5], -2.0, 2.0);
        let err = finite_difference_check(
            |g, v| {
                let s = g.softmax_rows(v)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(s, wv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "err={err}");
    }

    #[test]
    fn fd_layer_norm_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rt(&mut rng, &[4, 6], -2.0, 2.0);
        let gamma = rt(&mut rng, &[6], 0.5, 1.5);
        let beta = rt(&mut rng, &[6], -0.5, 0.5);
        let w = rt(&mut rng, &[4, 6], -2.0, 2.0);

        // w.r.t. x
        let (ga, be, wc) = (gamma.clone(), beta.clone(), w.clone());
        let err = finite_difference_check(
            |g, v| {
                let gv = g.constant(ga.clone());
                let bv = g.constant(be.clone());
                let y = g.layer_norm_rows(v, gv, bv, 1e-5)?;
                let wv = g.constant(wc.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "x err={err}");

        // w.r.t. gamma
        let (xc, be, wc) = (x.clone(), beta.clone(), w.clone());
        let err = finite_difference_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(be.clone());
                let y = g.layer_norm_rows(xv, v, bv, 1e-5)?;
                let wv = g.constant(wc.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &gamma,
            H,
        )
        .unwrap();
        assert!(err < TOL, "gamma err={err}");

        // w.r.t. beta
        let err = finite_difference_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let gv = g.constant(gamma.clone());
                let y = g.layer_norm_rows(xv, gv, v, 1e-5)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &beta,
            H,
        )
        .unwrap();
        assert!(err < TOL, "beta err={err}");
    }

    #[test]
    fn fd_batch_norm_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rt(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let gamma = rt(&mut rng, &[3], 0.5, 1.5);
        let beta = rt(&mut rng, &[3], -0.5, 0.5);
        let w = rt(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);

        let (ga, be, wc) = (gamma.clone(), beta.clone(), w.clone());
        let err = finite_difference_check(
            |g, v| {
                let gv = g.constant(ga.clone());
                let bv = g.constant(be.clone());
                let y = g.batch_norm_train(v, gv, bv, 1e-5)?;
                let wv = g.constant(wc.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "x err={err}");

        let err = finite_difference_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let bv = g.constant(beta.clone());
                let y = g.batch_norm_train(xv, v, bv, 1e-5)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &gamma,
            H,
        )
        .unwrap();
        assert!(err < TOL, "gamma err={err}");
    }

    #[test]
    fn fd_batch_norm_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rt(&mut rng, &[2, 2, 3, 3], -2.0, 2.0);
        let gamma = rt(&mut rng, &[2], 0.5, 1.5);
        let beta = rt(&mut rng, &[2], -0.5, 0.5);
        let rm = vec![0.3, -0.2];
        let rv = vec![1.1, 0.7];
        let w = rt(&mut rng, &[2, 2, 3, 3], -2.0, 2.0);
        let err = finite_difference_check(
            |g, v| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let y = g.batch_norm_eval(v, gv, bv, &rm, &rv, 1e-5)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "err={err}");
    }

    #[test]
    fn fd_conv3x3_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rt(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
        let w = rt(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rt(&mut rng, &[3], -0.5, 0.5);
        let mask = rt(&mut rng, &[2, 3, 5, 5], -2.0, 2.0);

        let (wc, bc, mc) = (w.clone(), b.clone(), mask.clone());
        let err = finite_difference_check(
            |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv3x3(v, wv, bv)?;
                let mv = g.constant(mc.clone());
                let weighted = g.mul(y, mv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "x err={err}");

        let (xc, bc, mc) = (x.clone(), b.clone(), mask.clone());
        let err = finite_difference_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv3x3(xv, v, bv)?;
                let mv = g.constant(mc.clone());
                let weighted = g.mul(y, mv)?;
                g.sum(weighted)
            },
            &w,
            H,
        )
        .unwrap();
        assert!(err < TOL, "w err={err}");

        let err = finite_difference_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let y = g.conv3x3(xv, wv, v)?;
                let mv = g.constant(mask.clone());
                let weighted = g.mul(y, mv)?;
                g.sum(weighted)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(err < TOL, "bias err={err}");
    }

    #[test]
    fn fd_structure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rt(&mut rng, &[3, 8, 8], -2.0, 2.0);
        let w = rt(&mut rng, &[4, 48], -2.0, 2.0);
        let err = finite_difference_check(
            |g, v| {
                let tok = g.extract_patches(v, 4)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(tok, wv)?;
                g.sum(weighted)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "extract err={err}");

        let t = rt(&mut rng, &[4, 16], -2.0, 2.0);
        let w = rt(&mut rng, &[1, 8, 8], -2.0, 2.0);
        let err = finite_difference_check(
            |g, v| {
                let img = g.tile_patches(v, 4, 1, 8, 8)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(img, wv)?;
                g.sum(weighted)
            },
            &t,
            H,
        )
        .unwrap();
        assert!(err < TOL, "tile err={err}");

        let m = rt(&mut rng, &[3, 6], -2.0, 2.0);
        let w = rt(&mut rng, &[6, 3], -2.0, 2.0);
        let err = finite_difference_check(
            |g, v| {
                let a = g.slice_cols(v, 0, 2)?;
                let b = g.slice_cols(v, 2, 4)?;
                let cat = g.concat_cols(&[b, a])?;
                let tr = g.transpose(cat)?;
                let wv = g.constant(w.clone());
                let weighted = g.mul(tr, wv)?;
                g.sum(weighted)
            },
            &m,
            H,
        )
        .unwrap();
        assert!(err < TOL, "slice/concat/transpose err={err}");
    }

    #[test]
    fn fd_norm_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rt_away_from_zero(&mut rng, &[3, 4]);
        let err = finite_difference_check(|g, v| g.frob_norm(v), &x, H).unwrap();
        assert!(err < TOL, "frob err={err}");

        let a = rt(&mut rng, &[3, 4], -2.0, 2.0);
        let row = rt(&mut rng, &[4], -2.0, 2.0);
        let w = rt(&mut rng, &[3, 4], -2.0, 2.0);
        let (ac, wc) = (a.clone(), w.clone());
        let err = finite_difference_check(
            |g, v| {
                let av = g.constant(ac.clone());
                let y = g.add_row(av, v)?;
                let wv = g.constant(wc.clone());
                let weighted = g.mul(y, wv)?;
                g.sum(weighted)
            },
            &row,
            H,
        )
        .unwrap();
        assert!(err < TOL, "add_row err={err}");

        let err = finite_difference_check(
            |g, v| {
                let flat = g.reshape(v, &[12])?;
                let m = g.mean(flat)?;
                let n = g.frob_norm(v)?;
                g.add(m, n)
            },
            &a,
            H,
        )
        .unwrap();
        let _ = w;
        assert!(err < TOL, "reshape/mean err={err}");
    }
}
