#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
pub mod reference;

/// Central-difference step for coordinate value `x`.
pub fn step(x: f64) -> f64 {
    1e-3 * x.abs().max(1.0)
}

fn central(probe: &mut [f64], i: usize, h: f64, f: &impl Fn(&[f64]) -> f64) -> f64 {
    let x = probe[i];
    probe[i] = x + h;
    let up = f(probe);
    probe[i] = x - h;
    let down = f(probe);
    probe[i] = x;
    (up - down) / (2.0 * h)
}

/// Central differences of `f` at `x` with steps `h` and `h/2`, combined by
/// Richardson extrapolation to cancel the `h^2` truncation term.
pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            let coarse = central(&mut probe, i, h, &f);
            let fine = central(&mut probe, i, h / 2.0, &f);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

/// As [`numeric_gradient`] for piecewise-smooth `f` that also reports its
/// branch pattern: when a probe crosses a branch boundary the step is
/// halved until both probes stay on the branch of `x`.
pub fn numeric_gradient_piecewise(
    x: &[f64],
    f: impl Fn(&[f64]) -> (f64, Vec<bool>),
) -> Vec<f64> {
    let (_, base_pattern) = f(x);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut h = step(x[i]);
            for _ in 0..20 {
                let mut same_branch = true;
                let mut value = |h: f64, probe: &mut Vec<f64>| {
                    probe[i] = x[i] + h;
                    let (up, p_up) = f(probe);
                    probe[i] = x[i] - h;
                    let (down, p_down) = f(probe);
                    probe[i] = x[i];
                    same_branch &= p_up == base_pattern && p_down == base_pattern;
                    (up - down) / (2.0 * h)
                };
                let coarse = value(h, &mut probe);
                let fine = value(h / 2.0, &mut probe);
                if same_branch {
                    return (4.0 * fine - coarse) / 3.0;
                }
                h *= 0.5;
            }
            panic!("coordinate {i} sits on a branch boundary");
        })
        .collect()
}

/// Largest error between analytic and numeric gradients: relative where
/// `|analytic| >= 1e-6`, absolute below that. Differences under the `f32`
/// resolution of the gradient (`f32::EPSILON * max |numeric|`) count as zero.
pub fn max_gradient_error(analytic: &[f32], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = f32::EPSILON as f64 * scale;
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let diff = (a - n).abs();
        let err = if a.abs() < 1e-6 {
            diff
        } else if diff <= floor {
            0.0
        } else {
            diff / a.abs().max(n.abs())
        };
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
