use super::schedule::time_grid;
use crate::error::{Error, Result};

/// A velocity field evaluated on a batch of states sharing one time.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// `z` is row-major `[batch, dim]`.
    fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// `v(z, t) = c`.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, z: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(z.chunks(self.0.len())
            .flat_map(|_| self.0.iter().copied())
            .collect())
    }
}

/// `v(z, t) = (a − z) / (1 − t)`: straight paths into the point `a`.
#[derive(Debug, Clone)]
pub struct PointTargetField(pub Vec<f64>);

impl VelocityField for PointTargetField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.0.len();
        Ok(z.iter()
            .enumerate()
            .map(|(i, zi)| (self.0[i % d] - zi) / (1.0 - t))
            .collect())
    }
}

/// `v(z, t) = k · z`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub k: f64,
    pub dim: usize,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(z.iter().map(|v| self.k * v).collect())
    }
}

/// States at every grid point, `states[k]` is `[batch, dim]` at `t = k/N`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        self.states.last().expect("trajectory holds z0")
    }
}

/// Forward Euler on the uniform grid: `z_{k+1} = z_k + v(z_k, k/N) / N`.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    n_steps: usize,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("euler_sample", "n_steps must be >= 1"));
    }
    let d = field.dim();
    if z0.is_empty() || z0.len() % d != 0 {
        return Err(Error::invalid(
            "euler_sample",
            format!("{} values do not form rows of {d}", z0.len()),
        ));
    }
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0.to_vec());
    for (k, t) in time_grid(n_steps).into_iter().enumerate() {
        let z = states.last().expect("non-empty");
        let v = field.velocity(z, t)?;
        let next: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("Euler state after step {k} of {n_steps}"),
            });
        }
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Mean over trajectories and fine-grid points of `‖v(z_t, t) − (z1 − z0)‖²`.
/// Zero exactly when every path is a straight line at constant speed.
pub fn straightness<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    n_fine: usize,
) -> Result<f64> {
    if n_fine < 50 {
        return Err(Error::invalid(
            "straightness",
            format!("n_fine must be >= 50, got {n_fine}"),
        ));
    }
    let d = field.dim();
    let traj = euler_sample(field, z0, n_fine)?;
    let disp: Vec<f64> = traj.end().iter().zip(z0).map(|(a, b)| a - b).collect();
    let n = z0.len() / d;
    let mut total = 0.0;
    for (k, t) in time_grid(n_fine).into_iter().enumerate() {
        let v = field.velocity(&traj.states[k], t)?;
        total += v
            .iter()
            .zip(&disp)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / (n * n_fine) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_exact() {
        let f = ConstantField(vec![0.3, -1.7]);
        for n in [1, 3, 4, 7, 100] {
            let t = euler_sample(&f, &[0.5, 2.0], n).unwrap();
            let want = [0.5 + 0.3, 2.0 - 1.7];
            // One rounding per step.
            for (a, b) in t.end().iter().zip(want) {
                assert!(
                    (a - b).abs() <= 2.0 * n as f64 * f64::EPSILON * 2.5,
                    "n={n}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn point_target_four_steps() {
        let f = PointTargetField(vec![1.0]);
        let t = euler_sample(&f, &[0.0], 4).unwrap();
        let got: Vec<f64> = t.states.iter().map(|s| s[0]).collect();
        let want = [0.0, 0.25, 0.5, 0.75, 1.0];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_field_first_order() {
        let f = LinearField { k: -1.0, dim: 1 };
        let exact = (-1f64).exp() * 2.0;
        let err = |n| (euler_sample(&f, &[2.0], n).unwrap().end()[0] - exact).abs();
        let order = (err(10) / err(100)).log10();
        assert!(order >= 0.9, "order {order}");
    }

    #[test]
    fn straightness_zero_for_straight_fields() {
        let z0 = [0.1, -0.3, 1.0, 2.0];
        assert!(straightness(&ConstantField(vec![1.0, -2.0]), &z0, 50).unwrap() < 1e-24);
        assert!(straightness(&PointTargetField(vec![1.0, 1.0]), &z0, 64).unwrap() < 1e-20);
        assert!(straightness(&LinearField { k: -1.0, dim: 2 }, &z0, 50).unwrap() > 1e-3);
        assert!(straightness(&ConstantField(vec![1.0]), &[0.0], 10).is_err());
    }

    #[test]
    fn non_finite_reports_step() {
        let f = LinearField { k: 1e308, dim: 1 };
        let e = euler_sample(&f, &[1e10], 4).unwrap_err();
        assert!(e.to_string().contains("step 0"), "{e}");
    }

    #[test]
    fn translation_equivariance() {
        struct Shifted<'a>(&'a LinearField, f64);
        impl VelocityField for Shifted<'_> {
            fn dim(&self) -> usize {
                1
            }
            fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
                let s: Vec<f64> = z.iter().map(|v| v - self.1).collect();
                self.0.velocity(&s, t)
            }
        }
        let base = LinearField { k: -0.7, dim: 1 };
        let a = euler_sample(&base, &[0.4], 8).unwrap();
        let b = euler_sample(&Shifted(&base, 3.0), &[3.4], 8).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x[0] + 3.0 - y[0]).abs() < 1e-12);
        }
    }
}
