//! Network architectures, the supervised sine-fitting loss and its gradients.
//!
//! Two architectures are supported, both with a single input and a single
//! linear output:
//!
//! * [`Architecture::Shallow`]: one hidden tanh layer without an output bias.
//!   Parameters are stored as consecutive triples `(a, b, c)` per hidden
//!   node, and the output is `sum_i a_i * tanh(b_i * theta + c_i)`.
//! * [`Architecture::Deep`]: `layers` fully-connected tanh layers of equal
//!   `width` followed by a linear output node with one bias.
//!
//! Deep parameters are laid out layer by layer. Each layer stores its weight
//! matrix row-major with the output index major (`w[out * fan_in + in]`),
//! followed by its biases. The output layer stores `width` weights and then
//! a single bias.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default standard deviation of the initial parameters (variance `1e-4`).
pub const DEFAULT_INIT_STD: f64 = 1e-2;

/// A differentiable scalar objective over a flat parameter vector.
///
/// Implementations must be deterministic functions of the parameters.
pub trait Objective: Sync {
    /// Number of parameters.
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes the exact gradient at `x` into `grad`.
    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient(x, &mut g);
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Shallow { hidden: usize },
    Deep { layers: usize, width: usize },
}

impl Architecture {
    pub fn shallow(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("arch.hidden", "must be at least 1"));
        }
        Ok(Self::Shallow { hidden })
    }

    pub fn deep(layers: usize, width: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("arch.layers", "must be at least 1"));
        }
        if width == 0 {
            return Err(Error::invalid("arch.width", "must be at least 1"));
        }
        Ok(Self::Deep { layers, width })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Shallow { hidden } => Self::shallow(hidden).map(|_| ()),
            Self::Deep { layers, width } => Self::deep(layers, width).map(|_| ()),
        }
    }

    /// Number of trainable parameters `N`.
    pub fn param_count(&self) -> usize {
        match *self {
            Self::Shallow { hidden } => 3 * hidden,
            Self::Deep { layers, width } => {
                (width + width) + (layers - 1) * (width * width + width) + (width + 1)
            }
        }
    }

    /// Network output at input `theta`.
    pub fn forward(&self, x: &[f64], theta: f64) -> f64 {
        match *self {
            Self::Shallow { .. } => forward_shallow(x, theta),
            Self::Deep { layers, width } => forward_deep(x, layers, width, theta),
        }
    }
}

/// Grid of inputs in `[0, 1)` with regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    /// `K` points `j / K` with targets `sin(2 pi theta)`.
    pub fn sine(k: usize) -> Result<Self> {
        Self::grid(k, |theta| (2.0 * std::f64::consts::PI * theta).sin())
    }

    /// `K` points `j / K` with targets given by `target`.
    pub fn grid(k: usize, target: impl Fn(f64) -> f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("dataset.k", "must be at least 1"));
        }
        let inputs: Vec<f64> = (0..k).map(|j| j as f64 / k as f64).collect();
        let targets = inputs.iter().map(|&t| target(t)).collect();
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Draws every parameter independently from `N(0, init_std^2)`.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, init_std: f64, rng: &mut R) -> Vec<f64> {
    assert!(init_std >= 0.0, "init_std must be nonnegative");
    (0..arch.param_count())
        .map(|_| init_std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn forward_shallow(x: &[f64], theta: f64) -> f64 {
    debug_assert_eq!(x.len() % 3, 0);
    x.chunks_exact(3)
        .map(|p| p[0] * (p[1] * theta + p[2]).tanh())
        .sum()
}

pub fn forward_deep(x: &[f64], layers: usize, width: usize, theta: f64) -> f64 {
    debug_assert_eq!(x.len(), Architecture::Deep { layers, width }.param_count());
    let mut h = vec![0.0; width];
    let mut next = vec![0.0; width];
    let mut off = 0;
    for (o, h_o) in h.iter_mut().enumerate() {
        *h_o = (x[off + o] * theta + x[off + width + o]).tanh();
    }
    off += 2 * width;
    for _ in 1..layers {
        let (w, b) = x[off..off + width * width + width].split_at(width * width);
        for (o, n_o) in next.iter_mut().enumerate() {
            let row = &w[o * width..(o + 1) * width];
            let z: f64 = row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum();
            *n_o = (z + b[o]).tanh();
        }
        std::mem::swap(&mut h, &mut next);
        off += width * width + width;
    }
    let v = &x[off..off + width];
    v.iter().zip(&h).map(|(vi, hi)| vi * hi).sum::<f64>() + x[off + width]
}

/// Mean-squared error of the network over the dataset.
pub fn loss(x: &[f64], arch: &Architecture, data: &Dataset) -> f64 {
    let k = data.len() as f64;
    data.inputs
        .iter()
        .zip(&data.targets)
        .map(|(&t, &y)| {
            let r = arch.forward(x, t) - y;
            r * r
        })
        .sum::<f64>()
        / k
}

/// Exact gradient of [`loss`] for a shallow network.
pub fn grad_shallow(x: &[f64], data: &Dataset, grad: &mut [f64]) {
    debug_assert_eq!(x.len(), grad.len());
    grad.fill(0.0);
    let scale = 2.0 / data.len() as f64;
    let hidden = x.len() / 3;
    let mut act = vec![0.0; hidden];
    for (&theta, &y) in data.inputs.iter().zip(&data.targets) {
        let mut f = 0.0;
        for (a, p) in act.iter_mut().zip(x.chunks_exact(3)) {
            *a = (p[1] * theta + p[2]).tanh();
            f += p[0] * *a;
        }
        let r = scale * (f - y);
        for ((g, p), &t) in grad.chunks_exact_mut(3).zip(x.chunks_exact(3)).zip(&act) {
            let sech2 = 1.0 - t * t;
            g[0] += r * t;
            g[1] += r * p[0] * sech2 * theta;
            g[2] += r * p[0] * sech2;
        }
    }
}

/// Exact gradient of [`loss`] for a deep network by reverse accumulation.
pub fn grad_deep(x: &[f64], layers: usize, width: usize, data: &Dataset, grad: &mut [f64]) {
    debug_assert_eq!(x.len(), grad.len());
    grad.fill(0.0);
    let scale = 2.0 / data.len() as f64;
    let block = width * width + width;
    // Offset of layer l (l >= 1) weights; layer 0 sits at 0 and output after all.
    let layer_off = |l: usize| 2 * width + (l - 1) * block;
    let out_off = 2 * width + (layers - 1) * block;

    let mut acts = vec![0.0; layers * width];
    let mut dh = vec![0.0; width];
    let mut dz = vec![0.0; width];

    for (&theta, &y) in data.inputs.iter().zip(&data.targets) {
        for o in 0..width {
            acts[o] = (x[o] * theta + x[width + o]).tanh();
        }
        for l in 1..layers {
            let off = layer_off(l);
            let (prev, cur) = acts.split_at_mut(l * width);
            let prev = &prev[(l - 1) * width..];
            for o in 0..width {
                let row = &x[off + o * width..off + (o + 1) * width];
                let z: f64 = row.iter().zip(prev).map(|(w, h)| w * h).sum();
                cur[o] = (z + x[off + width * width + o]).tanh();
            }
        }
        let last = &acts[(layers - 1) * width..];
        let f = x[out_off..out_off + width]
            .iter()
            .zip(last)
            .map(|(v, h)| v * h)
            .sum::<f64>()
            + x[out_off + width];

        let delta = scale * (f - y);
        for o in 0..width {
            grad[out_off + o] += delta * last[o];
            dh[o] = delta * x[out_off + o];
        }
        grad[out_off + width] += delta;

        for l in (1..layers).rev() {
            let off = layer_off(l);
            let h = &acts[l * width..(l + 1) * width];
            let prev = &acts[(l - 1) * width..l * width];
            for o in 0..width {
                dz[o] = dh[o] * (1.0 - h[o] * h[o]);
            }
            dh.fill(0.0);
            for o in 0..width {
                let d = dz[o];
                let row = off + o * width;
                for i in 0..width {
                    grad[row + i] += d * prev[i];
                    dh[i] += d * x[row + i];
                }
                grad[off + width * width + o] += d;
            }
        }
        for o in 0..width {
            let d = dh[o] * (1.0 - acts[o] * acts[o]);
            grad[o] += d * theta;
            grad[width + o] += d;
        }
    }
}

/// Fourth-order central-difference gradient with per-coordinate step
/// `h * max(1, |x_i|)`.
pub fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len()).map(|i| fd_coordinate(&f, &mut probe, i, h)).collect()
}

/// Five-point central difference along coordinate `i` only. `probe` must
/// equal the base point on entry and is restored on exit.
pub fn fd_coordinate<F: Fn(&[f64]) -> f64>(f: &F, probe: &mut [f64], i: usize, h: f64) -> f64 {
    let xi = probe[i];
    // snap the step so that xi + step is exactly representable
    let step = (xi + h * xi.abs().max(1.0)) - xi;
    let mut at = |offset: f64| {
        probe[i] = xi + offset * step;
        f(probe)
    };
    let (u1, d1, u2, d2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
    probe[i] = xi;
    (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step)
}

/// The supervised loss of a network on a dataset as an [`Objective`].
#[derive(Debug, Clone)]
pub struct NetworkLoss {
    pub arch: Architecture,
    pub data: Dataset,
}

impl NetworkLoss {
    pub fn new(arch: Architecture, data: Dataset) -> Self {
        Self { arch, data }
    }
}

impl Objective for NetworkLoss {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value(&self, x: &[f64]) -> f64 {
        loss(x, &self.arch, &self.data)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        match self.arch {
            Architecture::Shallow { .. } => grad_shallow(x, &self.data, grad),
            Architecture::Deep { layers, width } => grad_deep(x, layers, width, &self.data, grad),
        }
    }
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn param_counts() {
        assert_eq!(Architecture::Shallow { hidden: 30 }.param_count(), 90);
        assert_eq!(Architecture::Deep { layers: 8, width: 32 }.param_count(), 7489);
        assert_eq!(Architecture::Deep { layers: 4, width: 16 }.param_count(), 865);
        assert!(Architecture::shallow(0).is_err());
        assert!(Architecture::deep(0, 3).is_err());
        assert!(Architecture::deep(2, 0).is_err());
    }

    #[test]
    fn init_shapes_and_zero_variance() {
        let shallow = Architecture::Shallow { hidden: 30 };
        let x = init_params(&shallow, DEFAULT_INIT_STD, &mut rng(1));
        assert_eq!(x.len(), 90);
        assert!(x.iter().all(|v| v.is_finite() && v.abs() < 0.1));
        let deep = Architecture::Deep { layers: 8, width: 32 };
        assert_eq!(init_params(&deep, DEFAULT_INIT_STD, &mut rng(2)).len(), 7489);
        assert!(init_params(&shallow, 0.0, &mut rng(3)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_grid() {
        let d = Dataset::sine(1000).unwrap();
        assert_eq!(d.len(), 1000);
        for (j, &t) in d.inputs().iter().enumerate() {
            assert_eq!(t, j as f64 / 1000.0);
            assert!((0.0..1.0).contains(&t));
        }
        assert!(d.targets().iter().all(|y| y.abs() <= 1.0));
        assert!(Dataset::sine(0).is_err());
    }

    #[test]
    fn shallow_forward_cases() {
        assert_eq!(forward_shallow(&[0.0; 9], 0.3), 0.0);
        let c = 0.7;
        assert_eq!(forward_shallow(&[1.0, 0.0, c], 0.42), c.tanh());
        let x = [0.3, -1.2, 0.5, -0.8, 2.0, -0.1];
        let expected = 0.3 * (0.25 * -1.2 + 0.5f64).tanh() + -0.8 * (0.25 * 2.0 - 0.1f64).tanh();
        assert!((forward_shallow(&x, 0.25) - expected).abs() < 1e-15);
    }

    #[test]
    fn negating_output_weights_negates_output() {
        let mut x = init_params(&Architecture::Shallow { hidden: 7 }, 1.0, &mut rng(4));
        let f = forward_shallow(&x, 0.37);
        for p in x.chunks_exact_mut(3) {
            p[0] = -p[0];
        }
        assert_eq!(forward_shallow(&x, 0.37), -f);
    }

    #[test]
    fn deep_single_layer_matches_shallow() {
        let m = 5;
        let shallow = init_params(&Architecture::Shallow { hidden: m }, 1.0, &mut rng(5));
        let mut deep = vec![0.0; Architecture::Deep { layers: 1, width: m }.param_count()];
        for i in 0..m {
            deep[i] = shallow[3 * i + 1];
            deep[m + i] = shallow[3 * i + 2];
            deep[2 * m + i] = shallow[3 * i];
        }
        for theta in [0.0, 0.25, 0.5, 0.9] {
            let a = forward_shallow(&shallow, theta);
            let b = forward_deep(&deep, 1, m, theta);
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_params_loss_is_half() {
        let data = Dataset::sine(1000).unwrap();
        let arch = Architecture::Shallow { hidden: 30 };
        let u = loss(&vec![0.0; 90], &arch, &data);
        assert!((u - 0.5).abs() < 1e-12, "{u}");
        let deep = Architecture::Deep { layers: 2, width: 4 };
        let u = loss(&vec![0.0; deep.param_count()], &deep, &data);
        assert!((u - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let x = [0.6, 1.3, -0.2, -0.4, 0.5, 0.9];
        let data = Dataset::grid(20, |t| forward_shallow(&x, t)).unwrap();
        let arch = Architecture::Shallow { hidden: 2 };
        assert_eq!(loss(&x, &arch, &data), 0.0);
        let mut g = vec![1.0; 6];
        grad_shallow(&x, &data, &mut g);
        assert!(g.iter().all(|&v| v == 0.0));

        let deep = Architecture::Deep { layers: 2, width: 3 };
        let xd = init_params(&deep, 0.8, &mut rng(6));
        let data = Dataset::grid(7, |t| forward_deep(&xd, 2, 3, t)).unwrap();
        let mut g = vec![1.0; xd.len()];
        grad_deep(&xd, 2, 3, &data, &mut g);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shallow_gradient_hand_expanded() {
        // M = 1, one data point: f = a tanh(b t + c), U = (f - y)^2.
        let (a, b, c) = (0.7, -1.1, 0.3);
        let (t, y) = (0.4, 0.2);
        let data = Dataset::grid(1, |_| y).unwrap();
        let data = Dataset { inputs: vec![t], ..data };
        let th = (b * t + c).tanh();
        let r = a * th - y;
        let s2 = 1.0 - th * th;
        let expected = [2.0 * r * th, 2.0 * r * a * s2 * t, 2.0 * r * a * s2];
        let mut g = [0.0; 3];
        grad_shallow(&[a, b, c], &data, &mut g);
        for (gi, ei) in g.iter().zip(expected) {
            assert!((gi - ei).abs() < 1e-15);
        }
    }

    #[test]
    fn fd_exact_on_quadratic() {
        let x = [0.5, -1.5, 3.0, 0.0];
        let g = fd_grad(|v: &[f64]| v.iter().map(|a| 0.5 * a * a).sum(), &x, 1e-3);
        for (gi, xi) in g.iter().zip(x) {
            assert!((gi - xi).abs() < 1e-9, "{gi} vs {xi}");
        }
    }

    #[test]
    fn analytic_gradients_match_fd() {
        let shallow = NetworkLoss::new(Architecture::Shallow { hidden: 4 }, Dataset::sine(13).unwrap());
        let deep = NetworkLoss::new(Architecture::Deep { layers: 2, width: 3 }, Dataset::sine(5).unwrap());
        for (obj, seed) in [(&shallow, 7u64), (&deep, 8)] {
            let x = init_params(&obj.arch, 1.0, &mut rng(seed));
            let g = obj.gradient_vec(&x);
            let fd = fd_grad(|v: &[f64]| obj.value(v), &x, 1e-4);
            for (a, b) in g.iter().zip(&fd) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                assert!(rel < 1e-8, "{a} vs {b}");
            }
        }
    }
}
