use crate::error::{Error, Result};

fn mean_pairwise(x: &[f64], y: &[f64], d: usize) -> f64 {
    let (n, m) = (x.len() / d, y.len() / d);
    let mut total = 0.0;
    for a in x.chunks_exact(d) {
        let mut row = 0.0;
        for b in y.chunks_exact(d) {
            row += a
                .iter()
                .zip(b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
        total += row;
    }
    total / (n * m) as f64
}

/// Energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between two point sets
/// (row-major, `d` columns). V-statistic: self-pairs are included, so the
/// estimate is non-negative and has a small positive bias.
pub fn energy_distance(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    if d == 0 || x.is_empty() || y.is_empty() || x.len() % d != 0 || y.len() % d != 0 {
        return Err(Error::invalid(
            "energy_distance",
            format!(
                "cannot split {} and {} values into rows of {d}",
                x.len(),
                y.len()
            ),
        ));
    }
    Ok(2.0 * mean_pairwise(x, y, d) - mean_pairwise(x, x, d) - mean_pairwise(y, y, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_zero() {
        let x = [0.0, 1.0, 2.0, -1.0, 3.0, 0.5];
        assert!(energy_distance(&x, &x, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_points_hand_computed() {
        // X = {0}, Y = {1} in 1-D: 2·1 − 0 − 0.
        assert_eq!(energy_distance(&[0.0], &[1.0], 1).unwrap(), 2.0);
        // X = {0, 2}, Y = {1}: 2·1 − (0+2+2+0)/4 − 0 = 1.
        assert_eq!(energy_distance(&[0.0, 2.0], &[1.0], 1).unwrap(), 1.0);
    }

    #[test]
    fn symmetric() {
        let x = [0.3, 1.2, -0.5, 0.0];
        let y = [1.0, 1.0, 2.0, -2.0, 0.1, 0.1];
        let a = energy_distance(&x, &y, 2).unwrap();
        let b = energy_distance(&y, &x, 2).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
