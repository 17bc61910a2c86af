use rand::Rng;
use rand_distr::StandardNormal;

use crate::ad::Tensor;
use crate::nets::DriftNet;
use crate::seed;

const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-9;

/// Largest singular value of a `[rows, cols]` matrix by power iteration on
/// `WᵀW` from a fixed pseudo-random start.
pub fn spectral_norm(w: &Tensor) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let a = w.data();
    let mut rng = seed::rng(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let u: Vec<f64> = (0..m)
            .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
            .collect();
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_u == 0.0 {
            return 0.0;
        }
        let mut next: Vec<f64> = (0..n)
            .map(|j| (0..m).map(|i| a[i * n + j] * u[i]).sum())
            .collect();
        let prev = est;
        est = normalize(&mut next) / norm_u;
        v = next;
        if (est - prev).abs() <= POWER_TOL * est {
            break;
        }
    }
    est
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Upper bound on the state-to-drift Lipschitz constant: the product of
/// layer spectral norms (activations are 1-Lipschitz). The time row of a
/// time-conditioned first layer is left out.
pub fn estimate_lipschitz(net: &DriftNet) -> f64 {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = &l.weights;
            if i == 0 && net.time_conditioning {
                let (r, c) = (w.rows() - 1, w.cols());
                let state = Tensor::new(vec![r, c], w.data()[..r * c].to_vec()).expect("non-empty state rows");
                spectral_norm(&state)
            } else {
                spectral_norm(w)
            }
        })
        .product()
}
