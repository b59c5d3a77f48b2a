//! Central-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::Rng;

use super::array::Array;
use super::rng::derive_rng;
use super::tape::{Graph, Var};
use crate::error::Result;

/// A scalar function of named parameters, built on a fresh graph each
/// call so it can be evaluated with or without recording.
pub trait ScalarFn {
    fn eval(&self, graph: &Graph, params: &BTreeMap<String, Var>) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    fn eval(&self, graph: &Graph, params: &BTreeMap<String, Var>) -> Result<Var> {
        self(graph, params)
    }
}

fn run_value(f: &impl ScalarFn, params: &BTreeMap<String, Array>) -> Result<f64> {
    let graph = Graph::inference();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
        .collect();
    Ok(f.eval(&graph, &vars)?.value().scalar_value())
}

/// Checks analytic gradients of `f` against central finite differences
/// on `n_coords` coordinates sampled across all parameters.
///
/// Returns the max over sampled coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check(
    f: &impl ScalarFn,
    params: &BTreeMap<String, Array>,
    n_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    // sample coordinates uniformly over the flattened parameter set
    let total: usize = params.values().map(|a| a.len()).sum();
    let mut rng = derive_rng(seed, &[0x6fd1]);
    let mut coords: Vec<(String, usize)> = Vec::with_capacity(n_coords.min(total));
    for _ in 0..n_coords.min(total) {
        let mut flat = rng.gen_range(0..total);
        for (name, a) in params {
            if flat < a.len() {
                coords.push((name.clone(), flat));
                break;
            }
            flat -= a.len();
        }
    }
    finite_diff_check_coords(f, params, &coords, eps)
}

/// As [`finite_diff_check`], for an explicit coordinate list of
/// (parameter name, flat index) pairs.
pub fn finite_diff_check_coords(
    f: &impl ScalarFn,
    params: &BTreeMap<String, Array>,
    coords: &[(String, usize)],
    eps: f64,
) -> Result<f64> {
    // analytic pass
    let graph = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
        .collect();
    let loss = f.eval(&graph, &vars)?;
    let grads = graph.backward(&loss)?;

    let mut worst = 0.0f64;
    for (name, idx) in coords {
        let analytic = grads
            .get(&vars[name])
            .map(|g| g.data()[*idx])
            .unwrap_or(0.0);

        let mut perturbed = params.clone();
        perturbed.get_mut(name).unwrap().data_mut()[*idx] += eps;
        let plus = run_value(f, &perturbed)?;
        perturbed.get_mut(name).unwrap().data_mut()[*idx] -= 2.0 * eps;
        let minus = run_value(f, &perturbed)?;
        let numeric = (plus - minus) / (2.0 * eps);

        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ssm_scan;

    #[test]
    fn linear_function_is_exact() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Array::from_vec(vec![0.3, -1.2, 0.8]));
        let f = |_g: &Graph, p: &BTreeMap<String, Var>| {
            Ok(p["w"].mul_scalar(2.5).sum_all())
        };
        let err = finite_diff_check(&f, &params, 3, 1e-4, 0).unwrap();
        assert!(err < 1e-8, "linear rel err {err}");
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Array::from_vec(vec![1.5, -0.4]));
        let f = |_g: &Graph, p: &BTreeMap<String, Var>| {
            let x = &p["x"];
            Ok(x.mul(x)?.sum_all())
        };
        let err = finite_diff_check(&f, &params, 2, 1e-4, 0).unwrap();
        assert!(err < 1e-6, "quadratic rel err {err}");
    }

    #[test]
    fn matmul_backward_matches_differences() {
        let mut rng = derive_rng(42, &[1]);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Array::randn(&[3, 4], 1.0, &mut rng));
        params.insert("b".to_string(), Array::randn(&[4, 2], 1.0, &mut rng));
        let f = |_g: &Graph, p: &BTreeMap<String, Var>| {
            Ok(p["a"].matmul(&p["b"])?.gelu().sum_all())
        };
        let err = finite_diff_check(&f, &params, 20, 1e-4, 7).unwrap();
        assert!(err < 1e-4, "matmul rel err {err}");
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = derive_rng(9, &[2]);
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Array::randn(&[4, 6], 0.8, &mut rng));
        params.insert("y".to_string(), Array::randn(&[4, 6], 0.8, &mut rng));
        params.insert("g".to_string(), Array::randn(&[6], 0.2, &mut rng).map(|v| v + 1.0));
        params.insert("b".to_string(), Array::randn(&[6], 0.2, &mut rng));
        let f = |gr: &Graph, p: &BTreeMap<String, Var>| {
            let x = &p["x"];
            let y = &p["y"];
            let ln = x.layernorm(&p["g"], &p["b"])?;
            let s = ln.softmax(1)?;
            let l = x.log_softmax(0)?;
            let mix = s
                .mul(y)?
                .add(&x.silu().sub(&y.relu())?)?
                .add(&l.mul_scalar(0.3))?
                .add(&x.softplus().exp().mul_scalar(0.05))?;
            let sliced = mix.slice_rows(1, 2)?.slice_cols(2, 3)?;
            let joined = super::super::tape::concat_rows(gr, &[sliced.clone(), sliced])?;
            Ok(joined.gelu().sum_all())
        };
        let err = finite_diff_check(&f, &params, 40, 1e-5, 3).unwrap();
        assert!(err < 1e-3, "composite rel err {err}");
    }

    #[test]
    fn scan_backward_matches_differences() {
        let mut rng = derive_rng(5, &[3]);
        let t = 5;
        let di = 3;
        let n = 2;
        let mut params = BTreeMap::new();
        params.insert("u".to_string(), Array::randn(&[t, di], 1.0, &mut rng));
        params.insert(
            "delta_raw".to_string(),
            Array::randn(&[t, di], 0.5, &mut rng),
        );
        params.insert("b".to_string(), Array::randn(&[t, n], 1.0, &mut rng));
        params.insert("c".to_string(), Array::randn(&[t, n], 1.0, &mut rng));
        params.insert("a_log".to_string(), Array::randn(&[di, n], 0.5, &mut rng));
        let f = |_g: &Graph, p: &BTreeMap<String, Var>| {
            let delta = p["delta_raw"].softplus();
            let y = ssm_scan(&p["u"], &delta, &p["b"], &p["c"], &p["a_log"])?;
            Ok(y.mul(&y)?.sum_all())
        };
        let err = finite_diff_check(&f, &params, 60, 1e-5, 11).unwrap();
        assert!(err < 1e-3, "scan rel err {err}");
    }
}
