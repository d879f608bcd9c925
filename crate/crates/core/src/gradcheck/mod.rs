//! Central finite-difference verification of autodiff gradients (f64 only).

mod suite;

pub use suite::{run_suite, SuiteCase, OP_TOLERANCE, NET_TOLERANCE};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Which coordinates of each input get perturbed.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// Random subset: `fraction` of each input, at least `min` coordinates
    /// (capped at the input size).
    Sample { fraction: f64, min: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub coords: Coords,
    /// When set, a coordinate whose forward and backward one-sided slopes
    /// differ by more than `threshold * max(1, |fd|)` is treated as sitting
    /// next to a kink (ReLU zero, pooling tie) and excluded.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords: Coords::All,
            kink_threshold: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|ad - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Compares autodiff gradients of the scalar function `f` with respect to
/// every tensor in `inputs` against central differences.
pub fn check_gradients<F>(mut f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    let f0 = graph.value(out)?.item().map_err(|_| non_scalar(&graph, out))?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();
    drop(graph);

    let mut eval_at = |idx: usize, coord: usize, value: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == idx {
                    let mut data = t.to_vec();
                    data[coord] = value;
                    Tensor::new(t.shape(), data).map(|t| g.leaf(t))
                } else {
                    Ok(g.leaf(t.clone()))
                }
            })
            .collect::<Result<_>>()?;
        let out = f(&mut g, &vars)?;
        g.value(out)?.item()
    };

    let mut report = GradCheckReport::default();
    for (idx, input) in inputs.iter().enumerate() {
        for coord in select_coords(&opts.coords, idx, input.numel()) {
            let x = input.data()[coord];
            let plus = eval_at(idx, coord, x + opts.eps)?;
            let minus = eval_at(idx, coord, x - opts.eps)?;
            let fd = (plus - minus) / (2.0 * opts.eps);
            let scale = fd.abs().max(1.0);
            if let Some(threshold) = opts.kink_threshold {
                let forward = (plus - f0) / opts.eps;
                let backward = (f0 - minus) / opts.eps;
                if (forward - backward).abs() > threshold * scale {
                    report.skipped_kinks += 1;
                    continue;
                }
            }
            let ad = analytic[idx].data()[coord];
            let err = (ad - fd).abs() / scale;
            report.merge(GradCheckReport {
                max_rel_error: err,
                checked: 1,
                skipped_kinks: 0,
                worst: Some((idx, coord)),
            });
        }
    }
    Ok(report)
}

/// Single-input form: max relative error of the gradient of `f` at `x`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), &opts).map(|r| r.max_rel_error)
}

fn non_scalar(graph: &Graph<f64>, out: Var) -> Error {
    let shape = graph.shape(out).map(|s| s.to_string()).unwrap_or_default();
    Error::NonScalarLoss(shape)
}

fn select_coords(coords: &Coords, input_index: usize, len: usize) -> Vec<usize> {
    match *coords {
        Coords::All => (0..len).collect(),
        Coords::Sample { fraction, min, seed } => {
            let want = ((len as f64 * fraction).ceil() as usize).max(min).min(len);
            let mut all: Vec<usize> = (0..len).collect();
            SeededRng::for_item(seed, input_index as u64).shuffle(&mut all);
            all.truncate(want);
            all.sort_unstable();
            all
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_slice(&[2, 3], &[0.1, -2.0, 3.5, 4.0, 0.0, -0.7]).unwrap();
        let err = finite_difference_check(|g, x| g.mean(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // sum(relu(x)) at x = 0 has a one-sided slope; the tape reports 0
        let x = Tensor::zeros(Shape::new(&[3]).unwrap());
        let err = finite_difference_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn kinks_can_be_excluded() {
        let x = Tensor::from_slice(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let opts = GradCheckOptions {
            kink_threshold: Some(1e-4),
            ..Default::default()
        };
        let report = check_gradients(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(|g, x| g.relu(x), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::from_slice(&[1], &[1.0]).unwrap();
        assert!(finite_difference_check(|g, x| g.mean(x), &x, 1e-2).is_err());
        assert!(finite_difference_check(|g, x| g.mean(x), &x, 1e-9).is_err());
    }

    #[test]
    fn sampling_respects_bounds() {
        let picked = select_coords(&Coords::Sample { fraction: 0.01, min: 5, seed: 3 }, 0, 1000);
        assert_eq!(picked.len(), 10);
        let picked = select_coords(&Coords::Sample { fraction: 0.01, min: 5, seed: 3 }, 0, 3);
        assert_eq!(picked, vec![0, 1, 2]);
    }
}
