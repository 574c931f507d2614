//! Finite-difference verification of reverse-mode gradients.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `a` is the reverse-mode value and `n` the central difference
//! `(f(θ+ε) - f(θ-ε)) / 2ε`. The floor keeps coordinates whose true
//! gradient is essentially zero from dominating through round-off.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng::{streams, Rng};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub floor: f64,
    /// Total coordinates to probe across all parameters; `None` probes all.
    pub coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            floor: 1e-6,
            coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest |analytic gradient| among probed coordinates.
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval_loss<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = f(&mut g, params).map_err(|e| Error::Probe(e.to_string()))?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::Probe(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Probe("non-finite loss".into()));
    }
    Ok(v)
}

/// Picks `budget` distinct indices in `0..len`, or all when `budget >= len`.
fn pick_coords(len: usize, budget: usize, rng: &mut Rng) -> Vec<usize> {
    if budget >= len {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    // partial Fisher–Yates
    for i in 0..budget {
        let j = rng.int_range(i, len - 1);
        idx.swap(i, j);
    }
    idx.truncate(budget);
    idx.sort_unstable();
    idx
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences for every parameter in `params`.
///
/// `f` must register each parameter it uses through [`Graph::param`] under
/// its store name.
pub fn gradient_check<F>(params: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = f(&mut g, params).map_err(|e| Error::Probe(e.to_string()))?;
    if !g.value(root).is_finite() {
        return Err(Error::Probe("non-finite loss".into()));
    }
    g.backward(root)?;

    let total = params.num_scalars();
    let mut rng = Rng::new(opts.seed, streams::GRADCHECK);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_err: 0.0,
    };

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let value = params.get(&name)?.clone();
        let analytic = g
            .param_grad(&name)
            .unwrap_or_else(|| crate::tensor::Tensor::zeros(value.shape()));
        let budget = match opts.coords {
            None => value.len(),
            Some(n) => ((n * value.len()) / total.max(1)).max(1),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: 0.0,
        };
        for j in pick_coords(value.len(), budget, &mut rng) {
            let orig = value.data()[j];
            work.get_mut(&name)?.data_mut()[j] = orig + opts.eps;
            let plus = eval_loss(&f, &work)?;
            work.get_mut(&name)?.data_mut()[j] = orig - opts.eps;
            let minus = eval_loss(&f, &work)?;
            work.get_mut(&name)?.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.coords_checked += 1;
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_grad = check.max_grad.max(a.abs());
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let f = |g: &mut Graph, p: &ParamStore| {
            let t = g.param("theta", p.get("theta")?);
            let sq = g.mul(t, t)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let root = f(&mut g, &p).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.param_grad("theta").unwrap().data(), &[2.0, 4.0]);

        let report = gradient_check(&p, f, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_probe_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(1e308));
        let f = |g: &mut Graph, p: &ParamStore| {
            let x = g.param("x", p.get("x")?);
            g.scale(x, 10.0)
        };
        assert!(matches!(
            gradient_check(&p, f, &GradCheckOptions::default()),
            Err(Error::Probe(_))
        ));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Parameter used only through a constant copy: reverse mode sees no
        // gradient while the finite difference does.
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let f = |g: &mut Graph, p: &ParamStore| {
            let _ = g.param("x", p.get("x")?);
            let c = g.constant(p.get("x")?.clone());
            let sq = g.mul(c, c)?;
            g.sum(sq)
        };
        let report = gradient_check(&p, f, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn coordinate_sampling_covers_every_parameter() {
        let mut rng = Rng::new(3, 9);
        let picked = pick_coords(100, 10, &mut rng);
        assert_eq!(picked.len(), 10);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pick_coords(5, 10, &mut rng), vec![0, 1, 2, 3, 4]);
    }
}
