//! Projected limited-memory BFGS with Armijo backtracking. Only steps that
//! decrease the objective are accepted, so the iterates are monotone.

use std::collections::VecDeque;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Minimises `f` (value and gradient) over the set `project` maps onto.
pub(crate) fn minimize(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    project: impl Fn(&mut [f64]),
    mut x: Vec<f64>,
    max_iters: usize,
    memory: usize,
) -> Minimum {
    project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut stalls = 0;
    for _ in 0..max_iters {
        let mut d = direction(&g, &hist);
        if dot(&d, &g) >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let gnorm = dot(&g, &g).sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            break;
        }
        let mut eta = if hist.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..50 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + eta * b).collect();
            project(&mut xt);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let slope = dot(&g, &step);
            if slope < 0.0 {
                let (ft, gt) = f(&xt);
                if ft <= fx + 1e-4 * slope && ft < fx {
                    accepted = Some((xt, step, ft, gt));
                    break;
                }
            }
            eta *= 0.5;
        }
        let Some((xt, s, ft, gt)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let gain = fx - ft;
        x = xt;
        fx = ft;
        g = gt;
        if gain <= 1e-14 * fx.abs().max(1e-300) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Minimum { x, value: fx }
}

/// Two-loop recursion: `−H g`.
fn direction(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alpha.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alpha.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_and_bounds() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            (
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2),
                vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)],
            )
        };
        let m = minimize(f, |_| {}, vec![-1.2, 1.0], 500, 8);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);

        let m = minimize(
            |x: &[f64]| ((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)]),
            |x: &mut [f64]| x[0] = x[0].min(1.0),
            vec![0.0],
            100,
            5,
        );
        assert_eq!(m.x[0], 1.0);
    }
}
