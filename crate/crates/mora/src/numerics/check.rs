use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{NamedParam, Param, Tensor};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// where the numeric gradient comes from central differences of `eval`.
pub fn finite_diff_error<F>(mut eval: F, x: &Tensor, analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be > 0, got {h}")));
    }
    if analytic.len() != x.numel() {
        return Err(Error::Shape {
            op: "finite_diff_error",
            lhs: x.shape().to_vec(),
            rhs: vec![analytic.len()],
        });
    }
    let mut worst = 0.0_f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let f_plus = eval(&Tensor::new(plus, x.shape().to_vec())?)?;
        let f_minus = eval(&Tensor::new(minus, x.shape().to_vec())?)?;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check for a differentiable scalar function expressed as a graph
/// builder: `f` receives a graph and the node holding `x` and returns the
/// scalar output node. The analytic gradient comes from one backward pass,
/// the numeric one from central differences (`h` defaults to 1e-5 at call
/// sites). Returns the max relative error over the coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let param = Param::trainable(x.clone());
    let mut graph = Graph::new();
    let leaf = graph.leaf(&param)?;
    let out = f(&mut graph, leaf)?;
    if graph.data(out).len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got output shape {:?}",
            graph.shape(out)
        )));
    }
    graph.backward(out)?;
    let analytic = match param.borrow().grad() {
        Some(g) => g.to_vec(),
        // Nothing reaches the loss; the analytic gradient is identically 0.
        None => vec![0.0; x.numel()],
    };

    finite_diff_error(
        |point| {
            let mut g = Graph::new();
            let xn = g.constant(point)?;
            let out = f(&mut g, xn)?;
            g.scalar(out)
        },
        x,
        &analytic,
        h,
    )
}

/// Gradient check over a set of named parameters against a loss produced by
/// `build`, which constructs a fresh graph each call (the model's own
/// forward path). Returns `(name, max relative error)` per parameter.
///
/// Parameter values are perturbed in place and restored afterwards; existing
/// gradient accumulators are cleared.
pub fn finite_diff_params<F>(params: &[NamedParam], build: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn() -> Result<(Graph, NodeId)>,
{
    for p in params {
        p.param.borrow_mut().zero_grad();
    }
    let (mut graph, loss) = build()?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.param
                .borrow()
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.param.borrow().numel()])
        })
        .collect();

    let mut report = Vec::with_capacity(params.len());
    for (p, analytic) in params.iter().zip(&analytic) {
        let x = p.param.borrow().clone();
        let err = finite_diff_error(
            |point| {
                p.param.borrow_mut().set_data(point.data().to_vec())?;
                let (g, loss) = build()?;
                g.scalar(loss)
            },
            &x,
            analytic,
            h,
        );
        // Restore before surfacing any error.
        p.param.borrow_mut().set_data(x.data().to_vec())?;
        report.push((p.name.clone(), err?));
    }
    for p in params {
        p.param.borrow_mut().zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_form_is_nearly_exact() {
        // f(x) = sum((x Q) * x), central differences are exact for
        // quadratics up to rounding.
        let q = t(&[2.0, -0.5, 1.0, -0.5, 3.0, 0.25, 1.0, 0.25, 1.5], &[3, 3]);
        let x = t(&[0.7, -1.3, 0.4], &[1, 3]);
        let err = finite_diff_check(
            |g, xn| {
                let qn = g.constant(&q)?;
                let xq = g.matmul(xn, qn)?;
                let prod = g.mul(xq, xn)?;
                g.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic form error {err}");
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let x = t(&[1.0, 2.0], &[1, 2]);
        let c = t(&[42.0], &[1]);
        let err = finite_diff_check(|g, _xn| g.constant(&c), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composite_matmul_gelu_bce_matches() {
        let w = t(&[0.3, -0.7, 0.2, 0.9, -0.1, 0.5], &[2, 3]);
        let targets = t(&[1.0, 0.0, 1.0], &[1, 3]);
        let x = t(&[0.25, -0.6], &[1, 2]);
        let err = finite_diff_check(
            |g, xn| {
                let wn = g.constant(&w)?;
                let h = g.matmul(xn, wn)?;
                let a = g.gelu(h)?;
                g.bce_with_logits(a, &targets)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "composite error {err}");
    }

    #[test]
    fn every_differentiable_op_passes_at_1e4() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let mut rand_t = |shape: &[usize]| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();
            t(&data, shape)
        };

        // matmul (both sides), transpose, add, add_row, mul, scale, gelu,
        // softmax, layer_norm (all three inputs), slices and concats.
        let other = rand_t(&[4, 3]);
        let x = rand_t(&[3, 4]);
        let err = finite_diff_check(
            |g, xn| {
                let o = g.constant(&other)?;
                let prod = g.matmul(xn, o)?; // 3x3
                g.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul lhs {err}");

        let left = rand_t(&[2, 3]);
        let xr = rand_t(&[3, 2]);
        let err = finite_diff_check(
            |g, xn| {
                let l = g.constant(&left)?;
                let prod = g.matmul(l, xn)?;
                let tr = g.transpose(prod)?;
                g.sum(tr)
            },
            &xr,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul rhs + transpose {err}");

        let x2 = rand_t(&[2, 5]);
        let row = rand_t(&[5]);
        let err = finite_diff_check(
            |g, xn| {
                let r = g.constant(&row)?;
                let s = g.add_row(xn, r)?;
                let doubled = g.add(s, s)?;
                let scaled = g.scale(doubled, 0.5)?;
                let sq = g.mul(scaled, scaled)?;
                g.sum(sq)
            },
            &x2,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "add/add_row/mul/scale {err}");

        let xrow = rand_t(&[5]);
        let mat = rand_t(&[2, 5]);
        let err = finite_diff_check(
            |g, xn| {
                let m = g.constant(&mat)?;
                let s = g.add_row(m, xn)?;
                g.sum(s)
            },
            &xrow,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "add_row row side {err}");

        let x3 = rand_t(&[2, 4]);
        let err = finite_diff_check(
            |g, xn| {
                let a = g.gelu(xn)?;
                let s = g.softmax_rows(a)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            },
            &x3,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gelu+softmax {err}");

        let x4 = rand_t(&[3, 4]);
        let gain = rand_t(&[4]);
        let bias = rand_t(&[4]);
        let err = finite_diff_check(
            |g, xn| {
                let gn = g.constant(&gain)?;
                let bn = g.constant(&bias)?;
                let ln = g.layer_norm(xn, gn, bn, 1e-5)?;
                let sq = g.mul(ln, ln)?;
                g.sum(sq)
            },
            &x4,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm x {err}");

        let xgain = rand_t(&[4]);
        let base = rand_t(&[3, 4]);
        let err = finite_diff_check(
            |g, xn| {
                let b = g.constant(&base)?;
                let bn = g.constant(&bias)?;
                let ln = g.layer_norm(b, xn, bn, 1e-5)?;
                g.sum(ln)
            },
            &xgain,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm gain {err}");

        let x5 = rand_t(&[2, 6]);
        let err = finite_diff_check(
            |g, xn| {
                let a = g.slice_cols(xn, 0, 3)?;
                let b = g.slice_cols(xn, 3, 3)?;
                let joined = g.concat_rows(&[a, b])?;
                let top = g.slice_rows(joined, 0, 2)?;
                let cc = g.concat_cols(&[top, top])?;
                let sq = g.mul(cc, cc)?;
                g.sum(sq)
            },
            &x5,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "slice/concat {err}");

        let x6 = rand_t(&[2, 3]);
        let targets = t(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[2, 3]);
        let err = finite_diff_check(
            |g, xn| g.bce_with_logits(xn, &targets),
            &x6,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bce {err}");
    }

    #[test]
    fn finite_diff_params_checks_each_named_tensor() {
        let w = Param::trainable(t(&[0.4, -0.2, 0.1, 0.8], &[2, 2]));
        let b = Param::trainable(t(&[0.05, -0.3], &[2]));
        let x = t(&[1.0, -1.5], &[1, 2]);
        let targets = t(&[1.0, 0.0], &[1, 2]);
        let named = vec![
            NamedParam::new("w", w.clone(), true),
            NamedParam::new("b", b.clone(), false),
        ];
        let report = finite_diff_params(
            &named,
            || {
                let mut g = Graph::new();
                let xn = g.constant(&x)?;
                let wn = g.leaf(&w)?;
                let bn = g.leaf(&b)?;
                let wt = g.transpose(wn)?;
                let h = g.matmul(xn, wt)?;
                let z = g.add_row(h, bn)?;
                let loss = g.bce_with_logits(z, &targets)?;
                Ok((g, loss))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.len(), 2);
        for (name, err) in &report {
            assert!(*err < 1e-6, "{name} error {err}");
        }
        // Values restored, grads cleared.
        assert_eq!(w.borrow().data(), &[0.4, -0.2, 0.1, 0.8]);
        assert!(w.borrow().grad().is_none() || w.borrow().grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
