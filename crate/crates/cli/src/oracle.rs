//! Reference computations for `verify`, written against the math rather than
//! against the library: nothing here calls the proximal-gradient solver, its
//! objective or KKT routines, or the network's forward and backward passes.

use dfr_core::mlp::Layer;
use ndarray::{Array1, Array2, ArrayView2};

/// An ℓ1-penalized multinomial logistic regression problem:
/// `Σ_i (c_{y_i}/n) CE_i(W x_i + b) + λ ‖W‖₁`, bias unpenalized.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_weights: Vec<f64>,
    pub lambda: f64,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(z);
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - lse).exp();
    }
}

impl Instance {
    fn n(&self) -> usize {
        self.x.nrows()
    }

    fn row_weight(&self, i: usize) -> f64 {
        self.class_weights[self.labels[i]] / self.n() as f64
    }

    fn logits(&self, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let (n, d) = self.x.dim();
        let mut z = Array2::zeros((n, self.n_classes));
        for i in 0..n {
            for k in 0..self.n_classes {
                let mut s = b[k];
                for j in 0..d {
                    s += w[[k, j]] * self.x[[i, j]];
                }
                z[[i, k]] = s;
            }
        }
        z
    }

    fn data_loss(&self, z: &Array2<f64>) -> f64 {
        (0..self.n())
            .map(|i| {
                let row = z.row(i).to_vec();
                self.row_weight(i) * (log_sum_exp(&row) - row[self.labels[i]])
            })
            .sum()
    }

    pub fn objective(&self, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
        self.data_loss(&self.logits(w, b)) + self.lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Gradient of the smooth part with respect to `W` and `b`.
    fn gradient(&self, w: &Array2<f64>, b: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let z = self.logits(w, b);
        let (n, d) = self.x.dim();
        let mut gw = Array2::zeros((self.n_classes, d));
        let mut gb = Array1::zeros(self.n_classes);
        let mut p = vec![0.0; self.n_classes];
        for i in 0..n {
            softmax(&z.row(i).to_vec(), &mut p);
            let r = self.row_weight(i);
            for k in 0..self.n_classes {
                let e = r * (p[k] - f64::from(u8::from(self.labels[i] == k)));
                gb[k] += e;
                for j in 0..d {
                    gw[[k, j]] += e * self.x[[i, j]];
                }
            }
        }
        (gw, gb)
    }

    /// Largest violation of the ℓ1 optimality conditions.
    pub fn kkt(&self, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
        let (gw, gb) = self.gradient(w, b);
        let weights = w.iter().zip(gw.iter()).map(|(&wv, &g)| {
            if wv == 0.0 {
                (g.abs() - self.lambda).max(0.0)
            } else {
                (g + self.lambda * wv.signum()).abs()
            }
        });
        weights.chain(gb.iter().map(|g| g.abs())).fold(0.0, f64::max)
    }
}

/// Output of [`coordinate_descent`].
#[derive(Debug, Clone)]
pub struct CdSolution {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub objective: f64,
    pub sweeps: usize,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Cyclic coordinate descent: each coordinate takes a Newton step on its
/// exact second derivative, soft-thresholded for the ℓ1 term, and halves it
/// until the objective does not increase.
pub fn coordinate_descent(inst: &Instance, max_sweeps: usize, rel_tol: f64) -> CdSolution {
    let (n, d) = inst.x.dim();
    let c = inst.n_classes;
    let mut w = Array2::<f64>::zeros((c, d));
    let mut b = Array1::<f64>::zeros(c);
    let mut z = inst.logits(&w, &b);
    let rw: Vec<f64> = (0..n).map(|i| inst.row_weight(i)).collect();
    let mut p = vec![0.0; c];
    let mut prev = inst.objective(&w, &b);
    let mut sweeps = 0;
    let mut column = vec![0.0; n];
    while sweeps < max_sweeps {
        sweeps += 1;
        for k in 0..c {
            for j in 0..=d {
                let is_bias = j == d;
                for (i, v) in column.iter_mut().enumerate() {
                    *v = if is_bias { 1.0 } else { inst.x[[i, j]] };
                }
                let (mut g, mut h) = (0.0, 0.0);
                for i in 0..n {
                    softmax(&z.row(i).to_vec(), &mut p);
                    let t = f64::from(u8::from(inst.labels[i] == k));
                    g += rw[i] * (p[k] - t) * column[i];
                    h += rw[i] * p[k] * (1.0 - p[k]) * column[i] * column[i];
                }
                if h <= 1e-300 {
                    continue;
                }
                let old = if is_bias { b[k] } else { w[[k, j]] };
                let target = if is_bias {
                    old - g / h
                } else {
                    soft_threshold(h * old - g, inst.lambda) / h
                };
                let step = target - old;
                if step == 0.0 {
                    continue;
                }
                let penalty = |v: f64| if is_bias { 0.0 } else { inst.lambda * v.abs() };
                // Objective along the coordinate, as a function of the move.
                let local = |delta: f64, z: &Array2<f64>| -> f64 {
                    let mut s = 0.0;
                    let mut row = vec![0.0; c];
                    for i in 0..n {
                        row.copy_from_slice(z.row(i).as_slice().expect("standard layout"));
                        row[k] += delta * column[i];
                        s += rw[i] * (log_sum_exp(&row) - row[inst.labels[i]]);
                    }
                    s + penalty(old + delta)
                };
                let base = local(0.0, &z);
                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..60 {
                    if local(t * step, &z) <= base {
                        accepted = Some(t * step);
                        break;
                    }
                    t *= 0.5;
                }
                if let Some(delta) = accepted {
                    for i in 0..n {
                        z[[i, k]] += delta * column[i];
                    }
                    if is_bias {
                        b[k] = old + delta;
                    } else {
                        w[[k, j]] = old + delta;
                    }
                }
            }
        }
        // Rebuild logits so rounding from incremental updates cannot drift.
        z = inst.logits(&w, &b);
        let obj = inst.objective(&w, &b);
        let done = prev - obj <= rel_tol * obj.abs().max(1e-300);
        prev = obj;
        if done {
            break;
        }
    }
    CdSolution {
        objective: inst.objective(&w, &b),
        weights: w,
        bias: b,
        sweeps,
    }
}

/// Minimizer of a unimodal `f` on `[lo, hi]` to interval width `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Minimum of a two-class, one-feature instance. Only the logit difference
/// `δ·x + β` matters, and the cheapest split of `δ` across the two weight
/// rows costs `λ|δ|`, so the problem is two-dimensional: `β` is minimized by
/// golden section inside a golden section over `δ`.
pub fn two_parameter_minimum(inst: &Instance, bound: f64, tol: f64) -> (f64, f64, f64) {
    assert!(inst.n_classes == 2 && inst.x.ncols() == 1, "two-class, one-feature instances only");
    let n = inst.n();
    let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    let f = |delta: f64, beta: f64| -> f64 {
        let data: f64 = (0..n)
            .map(|i| {
                let margin = delta * inst.x[[i, 0]] + beta;
                let s = if inst.labels[i] == 1 { 1.0 } else { -1.0 };
                inst.row_weight(i) * softplus(-s * margin)
            })
            .sum();
        data + inst.lambda * delta.abs()
    };
    let inner = |delta: f64| golden_section(|beta| f(delta, beta), -bound, bound, tol);
    let (delta, value) = golden_section(|delta| inner(delta).1, -bound, bound, tol);
    (delta, inner(delta).0, value)
}

/// Mean cross-entropy of a ReLU network given by its layers.
pub fn network_loss(layers: &[Layer], x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let mut act: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    for (l, layer) in layers.iter().enumerate() {
        let last = l + 1 == layers.len();
        act = act
            .iter()
            .map(|a| {
                (0..layer.weights.nrows())
                    .map(|o| {
                        let s = layer.bias[o] + (0..a.len()).map(|i| layer.weights[[o, i]] * a[i]).sum::<f64>();
                        if last {
                            s
                        } else {
                            s.max(0.0)
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let total: f64 = act.iter().zip(labels).map(|(z, &y)| log_sum_exp(z) - z[y]).sum();
    total / labels.len() as f64
}

/// Central differences of [`network_loss`] for every parameter.
pub fn finite_difference_gradient(layers: &[Layer], x: ArrayView2<'_, f64>, labels: &[usize], eps: f64) -> Vec<Layer> {
    let mut work = layers.to_vec();
    let mut grads: Vec<Layer> = layers
        .iter()
        .map(|l| Layer {
            weights: Array2::zeros(l.weights.dim()),
            bias: Array1::zeros(l.bias.len()),
        })
        .collect();
    let probe = |work: &mut Vec<Layer>, l: usize, get: &dyn Fn(&mut Layer) -> &mut f64| -> f64 {
        let orig = *get(&mut work[l]);
        *get(&mut work[l]) = orig + eps;
        let up = network_loss(work, x, labels);
        *get(&mut work[l]) = orig - eps;
        let down = network_loss(work, x, labels);
        *get(&mut work[l]) = orig;
        (up - down) / (2.0 * eps)
    };
    for l in 0..layers.len() {
        let (rows, cols) = layers[l].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                grads[l].weights[[r, c]] = probe(&mut work, l, &|layer| &mut layer.weights[[r, c]]);
            }
            grads[l].bias[r] = probe(&mut work, l, &|layer| &mut layer.bias[r]);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn golden_section_finds_a_parabola_vertex() {
        let (x, fx) = golden_section(|t| (t - 1.25).powi(2) + 3.0, -10.0, 10.0, 1e-10);
        assert!((x - 1.25).abs() < 1e-7);
        assert!((fx - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_model_objective_is_log_c() {
        let inst = Instance {
            x: array![[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]],
            labels: vec![0, 1, 2],
            n_classes: 3,
            class_weights: vec![1.0; 3],
            lambda: 0.1,
        };
        let v = inst.objective(&Array2::zeros((3, 2)), &Array1::zeros(3));
        assert!((v - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn coordinate_descent_meets_kkt_and_matches_two_parameter_search() {
        let x = array![[-2.0], [-1.0], [-0.5], [0.3], [0.1], [1.0], [2.0], [-0.2]];
        let inst = Instance {
            x,
            labels: vec![0, 0, 1, 0, 1, 1, 1, 0],
            n_classes: 2,
            class_weights: vec![1.0, 2.0],
            lambda: 0.05,
        };
        let cd = coordinate_descent(&inst, 100_000, 1e-15);
        assert!(inst.kkt(&cd.weights, &cd.bias) < 1e-6, "{}", inst.kkt(&cd.weights, &cd.bias));
        let (_, _, best) = two_parameter_minimum(&inst, 50.0, 1e-10);
        assert!((cd.objective - best).abs() < 1e-9 * best, "{} {}", cd.objective, best);
    }

    #[test]
    fn strong_penalty_zeroes_every_weight() {
        let inst = Instance {
            x: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]],
            labels: vec![0, 1, 1, 0],
            n_classes: 2,
            class_weights: vec![1.0; 2],
            lambda: 10.0,
        };
        let cd = coordinate_descent(&inst, 1000, 1e-15);
        assert!(cd.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_differences_of_a_linear_softmax_match_the_closed_form() {
        // One layer: d/dW = (softmax(z) - onehot) x^T averaged over rows.
        let layers = vec![Layer {
            weights: array![[0.2, -0.1], [0.4, 0.3]],
            bias: array![0.05, -0.2],
        }];
        let x = array![[1.0, 2.0], [-0.5, 0.25]];
        let labels = [1, 0];
        let fd = finite_difference_gradient(&layers, x.view(), &labels, 1e-6);
        let mut expect = Array2::<f64>::zeros((2, 2));
        for (i, row) in x.outer_iter().enumerate() {
            let z: Vec<f64> = (0..2)
                .map(|k| layers[0].bias[k] + layers[0].weights.row(k).dot(&row))
                .collect();
            let mut p = vec![0.0; 2];
            softmax(&z, &mut p);
            for k in 0..2 {
                let e = p[k] - f64::from(u8::from(labels[i] == k));
                for j in 0..2 {
                    expect[[k, j]] += e * row[j] / 2.0;
                }
            }
        }
        for (a, b) in fd[0].weights.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
