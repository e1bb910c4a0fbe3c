use super::params::ParameterSet;
use super::tape::{ParamVars, Tape, Var};
use crate::error::{contract, Error, Result};

fn evaluate<F>(loss: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.params(params);
    let out = loss(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss` against central differences with step `eps`
/// and returns the worst elementwise relative error, using `max(|a|, |b|, 1e-8)` as the
/// denominator.
///
/// `loss` is re-run once per perturbed scalar, so it must be deterministic (freeze any noise).
pub fn finite_diff_check<F>(loss: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(eps > 0.0) {
        return contract(format!("finite-difference step must be positive, got {eps}"));
    }
    let mut tape = Tape::new();
    let vars = tape.params(params);
    let out = loss(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    let analytic = tape.backward(out)?.by_name();

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let grad = &analytic[name];
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = orig + eps;
            let up = evaluate(&loss, &probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig - eps;
            let down = evaluate(&loss, &probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward_mlp, init_mlp, Activation, LayerSpec, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(values: Vec<f64>) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Matrix::row_vector(values)).unwrap();
        p
    }

    #[test]
    fn linear_loss_is_exact() {
        let p = params(vec![0.3, -1.2, 4.0]);
        let c = Matrix::row_vector(vec![2.0, -0.5, 1.5]);
        let err = finite_diff_check(
            |t, v| {
                let c = t.constant(c.clone());
                let prod = t.mul(v["w"], c);
                Ok(t.sum(prod))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_loss() {
        let p = params(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.square(v["w"]);
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = params(vec![-1.0]);
        let r = finite_diff_check(
            |t, v| {
                let l = t.ln(v["w"]);
                Ok(t.sum(l))
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_diff_check(|t, v| Ok(t.sum(v["w"])), &p, 0.0).is_err());
    }

    #[test]
    fn two_layer_tanh_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = LayerSpec::new(vec![4, 6, 3], Activation::Tanh);
        let mut p = ParameterSet::new();
        init_mlp(&mut p, "net", &spec, &mut rng).unwrap();
        // nonzero biases so every parameter carries signal
        for l in 0..2 {
            let name = crate::autodiff::mlp::bias_name("net", l);
            let w = spec.widths[l + 1];
            p.set(&name, Matrix::row_vector((0..w).map(|_| rng.gen_range(-0.5..0.5)).collect())).unwrap();
        }
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let target = Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = finite_diff_check(
            |t, v| {
                let xi = t.constant(x.clone());
                let y = forward_mlp(t, v, "net", xi, &spec)?;
                let tgt = t.constant(target.clone());
                let d = t.sub(y, tgt);
                let sq = t.square(d);
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_tape_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParameterSet::new();
        let rand_m = |rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
        };
        p.insert("a", rand_m(&mut rng, 3, 4, -1.0, 1.0)).unwrap();
        p.insert("b", rand_m(&mut rng, 4, 2, -1.0, 1.0)).unwrap();
        p.insert("pos", rand_m(&mut rng, 3, 2, 0.5, 2.0)).unwrap();
        p.insert("row", rand_m(&mut rng, 1, 2, -1.0, 1.0)).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let ab = t.matmul(v["a"], v["b"]);
                let ab = t.add_row(ab, v["row"]);
                let th = t.tanh(ab);
                let e = t.exp(th);
                let l = t.ln(v["pos"]);
                let r = t.recip(v["pos"]);
                let s = t.sqrt(v["pos"]);
                let q = t.div(e, s);
                let m = t.mul(q, r);
                let m = t.sub(m, l);
                let m = t.scale(m, 0.7);
                let m = t.add_scalar(m, 0.1);
                let n = t.neg(m);
                let ab2 = t.abs(n);
                let cl = t.clamp(ab2, -100.0, 100.0);
                let sl = t.slice_cols(cl, 1, 2);
                let cat = t.concat_cols(&[cl, sl, th]);
                let lse = t.logsumexp_rows(cat);
                let rs = t.row_sum(cat);
                let both = t.add(lse, rs);
                let sq = t.square(both);
                let relu_in = t.add_scalar(ab, 0.05);
                let rl = t.relu(relu_in);
                let rl = t.sum(rl);
                let mean = t.mean(sq);
                Ok(t.add(mean, rl))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
