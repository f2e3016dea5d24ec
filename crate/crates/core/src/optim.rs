//! Derivative-free minimization (Nelder–Mead).

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub max_evaluations: usize,
    /// Stop when every vertex is within this distance (max norm) of the best.
    pub x_tol: f64,
    /// ... and every vertex value is within this of the best value.
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { max_evaluations: 500, x_tol: 1e-4, f_tol: 1e-7, initial_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl NelderMead {
    /// Minimize `f` from `x0`. Non-finite values are treated as `+∞`.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64]) -> Minimum {
        let dim = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((x0.to_vec(), eval(x0, &mut evals)));
        for i in 0..dim {
            let mut x = x0.to_vec();
            x[i] += self.initial_step;
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        let mut converged = false;
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best_x, best_f) = (&simplex[0].0, simplex[0].1);
            let spread_f = simplex[1..].iter().map(|(_, v)| (v - best_f).abs()).fold(0.0, f64::max);
            let spread_x = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(best_x).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread_f <= self.f_tol && spread_x <= self.x_tol {
                converged = true;
                break;
            }
            if evals >= self.max_evaluations {
                break;
            }

            let worst = simplex[dim].clone();
            let centroid: Vec<f64> =
                (0..dim).map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64).collect();
            let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };

            let xr = along(1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(2.0);
                let fe = eval(&xe, &mut evals);
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < worst.1.min(fr) {
                simplex[dim] = (xc, fc);
                continue;
            }
            let anchor = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = anchor.iter().zip(&vertex.0).map(|(a, v)| a + 0.5 * (v - a)).collect();
                let v = eval(&x, &mut evals);
                *vertex = (x, v);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum { x, value, evaluations: evals, converged }
    }
}
