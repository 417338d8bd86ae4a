//! Central finite-difference gradient checks (64-bit only).

use super::{derive_seed, numel, Graph, ParamId, ParamStore, Rng, Tensor, Var, PRIMITIVES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation size.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    /// Corrupts the backward of this primitive (see [`Graph::inject_fault`]).
    pub fault: Option<&'static str>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

/// Compares backward gradients of `f` against `(f(θ+h) - f(θ-h)) / 2h` for
/// every trainable parameter in `store`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    cfg: GradCheckConfig,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut g = Graph::new();
        if let Some(op) = cfg.fault {
            g.inject_fault(op);
        }
        let loss = f(&mut g, store)?;
        g.backward_into(loss, store)?;
    }
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.data(loss)[0])
    };

    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.get(id).requires_grad)
        .collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &i in &entries {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + cfg.h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - cfg.h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient check of `{}` at index {i}", check.name),
                });
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tol: cfg.tol,
    })
}

/// Redraws inputs until `margin` exceeds `min_margin`, for functions with
/// non-differentiable points (e.g. argmax routing). Returns the accepted
/// draw and how many draws were rejected.
pub fn draw_away_from_kinks<X>(
    rng: &mut Rng,
    max_tries: usize,
    min_margin: f64,
    mut draw: impl FnMut(&mut Rng) -> Result<X>,
    margin: impl Fn(&X) -> Result<f64>,
) -> Result<(X, usize)> {
    for rejected in 0..max_tries {
        let x = draw(rng)?;
        if margin(&x)? >= min_margin {
            return Ok((x, rejected));
        }
    }
    Err(Error::invalid(
        "grad_check",
        format!("no draw with decision margin >= {min_margin} in {max_tries} tries"),
    ))
}

/// Worst relative error for one primitive across its random trials.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Primary input shape of the trial with the worst error.
    pub worst_shape: Vec<usize>,
}

impl PrimitiveCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn random_shape(rng: &mut Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = min_rank + rng.below(max_rank - min_rank + 1);
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

/// A shape that broadcasts against `shape`: some axes set to 1, some leading
/// axes dropped.
fn broadcast_partner(rng: &mut Rng, shape: &[usize]) -> Vec<usize> {
    let drop = rng.below(shape.len());
    shape[drop..]
        .iter()
        .map(|&d| if rng.uniform() < 0.4 { 1 } else { d })
        .collect()
}

fn weights(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `sum(y * r)` with a fixed random `r`, so every output entry carries a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.input(r.clone())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Magnitudes in [0.5, 2] with random sign, so `div` stays well conditioned.
fn nonzero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let data = (0..numel(shape))
        .map(|_| {
            let m = rng.uniform_range(0.5, 2.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized above")
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// One random trial for `op`: a store of inputs, the scalar function to
/// check and the primary input shape.
fn primitive_trial(
    op: &'static str,
    rng: &mut Rng,
) -> Result<(ParamStore<f64>, Builder, Vec<usize>)> {
    let mut store = ParamStore::new();
    let mut shape = random_shape(rng, 1, 4);
    let f: Builder = match op {
        "add" | "sub" | "mul" | "div" => {
            let (sa, sb) = if rng.uniform() < 0.5 {
                (shape.clone(), broadcast_partner(rng, &shape))
            } else {
                (broadcast_partner(rng, &shape), shape.clone())
            };
            let a = store.randn("a", &sa, 1.0, rng);
            let b = if op == "div" {
                store.add("b", nonzero(rng, &sb), true)
            } else {
                store.randn("b", &sb, 1.0, rng)
            };
            let r = weights(rng, &shape);
            Box::new(move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = match op {
                    "add" => g.add(a, b)?,
                    "sub" => g.sub(a, b)?,
                    "mul" => g.mul(a, b)?,
                    _ => g.div(a, b)?,
                };
                project(g, y, &r)
            })
        }
        "scale" | "add_scalar" | "silu" | "reshape" | "sum" | "mean" => {
            let x = store.randn("x", &shape, 1.0, rng);
            let out_shape = match op {
                "sum" | "mean" => vec![],
                "reshape" => vec![numel(&shape)],
                _ => shape.clone(),
            };
            let r = weights(rng, &out_shape);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = match op {
                    "scale" => g.scale(x, -1.7)?,
                    "add_scalar" => g.add_scalar(x, 0.3)?,
                    "silu" => g.silu(x)?,
                    "reshape" => g.reshape(x, &out_shape)?,
                    "sum" => g.sum(x)?,
                    _ => g.mean(x)?,
                };
                project(g, y, &r)
            })
        }
        "matmul" => {
            shape = random_shape(rng, 2, 4);
            let (ta, tb) = (rng.uniform() < 0.5, rng.uniform() < 0.5);
            let batch = shape[..shape.len() - 2].to_vec();
            let (m, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let n = 1 + rng.below(4);
            let sa: Vec<usize> = batch
                .iter()
                .copied()
                .chain(if ta { [k, m] } else { [m, k] })
                .collect();
            let mut sb: Vec<usize> = if rng.uniform() < 0.5 {
                vec![]
            } else {
                batch.clone()
            };
            sb.extend(if tb { [n, k] } else { [k, n] });
            let a = store.randn("a", &sa, 1.0, rng);
            let b = store.randn("b", &sb, 1.0, rng);
            let out: Vec<usize> = batch.iter().copied().chain([m, n]).collect();
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.matmul_t(a, b, ta, tb)?;
                project(g, y, &r)
            })
        }
        "permute" => {
            let x = store.randn("x", &shape, 1.0, rng);
            let mut axes: Vec<usize> = (0..shape.len()).collect();
            rng.shuffle(&mut axes);
            let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = g.permute(x, &axes)?;
                project(g, y, &r)
            })
        }
        "softmax" | "layer_norm" => {
            *shape.last_mut().unwrap() += 1;
            let x = store.randn("x", &shape, 1.0, rng);
            let r = weights(rng, &shape);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = if op == "softmax" {
                    g.softmax(x)?
                } else {
                    g.layer_norm(x, 1e-5)?
                };
                project(g, y, &r)
            })
        }
        "mask" => {
            *shape.last_mut().unwrap() += 1;
            let cols = *shape.last().unwrap();
            // Column 0 stays open so every softmax row is finite.
            let mask: Vec<bool> = (0..cols).map(|c| c > 0 && rng.uniform() < 0.5).collect();
            let mask: std::sync::Arc<[bool]> = mask.into();
            let x = store.randn("x", &shape, 1.0, rng);
            let r = weights(rng, &shape);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = g.mask_fill_neg_inf(x, mask.clone())?;
                let y = g.softmax(y)?;
                project(g, y, &r)
            })
        }
        "embedding" => {
            let (v, d) = (1 + rng.below(5), 1 + rng.below(4));
            let table = store.randn("table", &[v, d], 1.0, rng);
            let ids_shape = random_shape(rng, 1, 3);
            let ids: Vec<usize> = (0..numel(&ids_shape)).map(|_| rng.below(v)).collect();
            let out: Vec<usize> = ids_shape.iter().copied().chain([d]).collect();
            let r = weights(rng, &out);
            shape = vec![v, d];
            Box::new(move |g, s| {
                let t = g.param(s, table);
                let y = g.embedding(t, &ids, &ids_shape)?;
                project(g, y, &r)
            })
        }
        "sum_axis" => {
            let axis = rng.below(shape.len());
            let keepdim = rng.uniform() < 0.5;
            let x = store.randn("x", &shape, 1.0, rng);
            let mut out = shape.clone();
            if keepdim {
                out[axis] = 1;
            } else {
                out.remove(axis);
            }
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = g.sum_axis(x, axis, keepdim)?;
                project(g, y, &r)
            })
        }
        "cross_entropy" => {
            shape = random_shape(rng, 2, 4);
            *shape.last_mut().unwrap() += 1;
            let classes = *shape.last().unwrap();
            let rows = numel(&shape) / classes;
            let targets: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
            let x = store.randn("logits", &shape, 1.0, rng);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                g.cross_entropy(x, &targets)
            })
        }
        "concat" => {
            let axis = rng.below(shape.len());
            let mut other = shape.clone();
            other[axis] = 1 + rng.below(4);
            let a = store.randn("a", &shape, 1.0, rng);
            let b = store.randn("b", &other, 1.0, rng);
            let mut out = shape.clone();
            out[axis] += other[axis];
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let y = g.concat(&[a, b], axis)?;
                project(g, y, &r)
            })
        }
        "narrow" => {
            let axis = rng.below(shape.len());
            let start = rng.below(shape[axis]);
            let len = 1 + rng.below(shape[axis] - start);
            let x = store.randn("x", &shape, 1.0, rng);
            let mut out = shape.clone();
            out[axis] = len;
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = g.narrow(x, axis, start, len)?;
                project(g, y, &r)
            })
        }
        "gather_rows" | "scatter_rows" => {
            let rows = shape[0];
            let n_idx = 1 + rng.below(5);
            let idx: Vec<usize> = (0..n_idx).map(|_| rng.below(rows)).collect();
            let (mut src, mut out) = (shape.clone(), shape.clone());
            if op == "gather_rows" {
                out[0] = n_idx;
            } else {
                src[0] = n_idx;
            }
            let x = store.randn("x", &src, 1.0, rng);
            let r = weights(rng, &out);
            Box::new(move |g, s| {
                let x = g.param(s, x);
                let y = if op == "gather_rows" {
                    g.gather_rows(x, &idx)?
                } else {
                    g.scatter_rows(x, &idx, rows)?
                };
                project(g, y, &r)
            })
        }
        other => {
            return Err(Error::invalid(
                "grad_check",
                format!("unknown primitive `{other}`"),
            ))
        }
    };
    Ok((store, f, shape))
}

/// Checks every differentiable primitive against central differences at
/// `trials` random shapes of rank 1 to 4. With `cfg.fault` set, that
/// primitive's backward is deliberately corrupted.
pub fn check_primitives(
    seed: u64,
    trials: usize,
    cfg: GradCheckConfig,
) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (k, &op) in PRIMITIVES.iter().enumerate() {
        let mut rng = Rng::new(derive_seed(seed, k as u64));
        let mut check = PrimitiveCheck {
            op,
            trials,
            max_rel_error: 0.0,
            worst_shape: vec![],
        };
        for _ in 0..trials {
            let (mut store, f, shape) = primitive_trial(op, &mut rng)?;
            let err = grad_check(&mut store, f, cfg, &mut rng)?.max_rel_error();
            if err > check.max_rel_error || check.worst_shape.is_empty() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_shape = shape;
            }
        }
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_matches_analytic() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let a = Tensor::<f64>::randn(vec![4, 4], 1.0, &mut rng);
        let theta = store.randn("theta", &[4, 1], 1.0, &mut rng);
        let report = grad_check(
            &mut store,
            |g, s| {
                let th = g.param(s, theta);
                let av = g.input(a.clone())?;
                let at = g.matmul(av, th)?;
                let q = g.matmul_t(th, at, true, false)?;
                g.sum(q)
            },
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn kink_redraw_rejects_small_margins() {
        let mut rng = Rng::new(1);
        let mut calls = 0;
        let (x, rejected) = draw_away_from_kinks(
            &mut rng,
            100,
            0.5,
            |_| {
                calls += 1;
                Ok(if calls < 3 { 0.1 } else { 0.9 })
            },
            |&x: &f64| Ok(x),
        )
        .unwrap();
        assert_eq!((x, rejected), (0.9, 2));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let report = check_primitives(3, 6, GradCheckConfig::default()).unwrap();
        assert_eq!(report.len(), PRIMITIVES.len());
        for c in &report {
            assert!(c.passed(1e-4), "{c:?}");
        }
    }

    #[test]
    fn injected_fault_is_caught_for_each_primitive() {
        for &op in PRIMITIVES {
            let cfg = GradCheckConfig {
                fault: Some(op),
                ..Default::default()
            };
            let report = check_primitives(5, 3, cfg).unwrap();
            let hit = report.iter().find(|c| c.op == op).unwrap();
            assert!(!hit.passed(1e-4), "fault in {op} went unnoticed: {hit:?}");
        }
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let used = store.randn("used", &[3], 1.0, &mut rng);
        let unused = store.randn("unused", &[2], 1.0, &mut rng);
        let report = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, used);
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed());
        let grad = store.get(unused).grad.clone().unwrap_or(vec![0.0; 2]);
        assert!(grad.iter().all(|&v| v == 0.0));
    }
}
