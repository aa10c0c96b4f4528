//! Spectral-norm estimation by power iteration, plus an exact reference.

use std::collections::BTreeMap;
use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::layers::{MatrixView, SpectralEntry};
use crate::network::Network;
use crate::rng::{stream, RngState};
use crate::tensor::Real;

/// Iterations used for the converged estimate when weights are baked.
pub const BAKE_ITERS: usize = 100;

/// Warm-start vectors for one constrained matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Left vector, length `rows`.
    pub u: Vec<f64>,
    /// Right vector, length `cols`.
    pub v: Vec<f64>,
    /// Rounds per training step.
    pub iters: usize,
    /// Norm below which an iterate is treated as zero.
    pub eps_div: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerEstimate {
    pub sigma: f64,
    /// The matrix annihilated an iterate; `sigma` is `eps_div`.
    pub degenerate: bool,
}

impl SpectralState {
    pub fn new(rows: usize, cols: usize, rng: &mut RngState) -> Self {
        SpectralState {
            u: rng.unit_vector(rows),
            v: rng.unit_vector(cols),
            iters: 1,
            eps_div: 1e-12,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs `iters` rounds of `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖` and returns `σ̂ = uᵀWv`.
pub fn power_iteration<T: Real>(w: MatrixView<'_, T>, state: &mut SpectralState, iters: usize) -> Result<PowerEstimate> {
    let (m, n) = (w.rows, w.cols);
    if state.u.len() != m || state.v.len() != n {
        return Err(Error::shape(
            "power_iteration",
            format!("state ({}, {}) for a {m}×{n} matrix", state.u.len(), state.v.len()),
        ));
    }
    let a = w.to_f64();
    let mut wt_u = vec![0.0; n];
    let mut w_v = vec![0.0; m];
    for _ in 0..iters {
        wt_u.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in state.u.iter().enumerate() {
            for (acc, &x) in wt_u.iter_mut().zip(&a[r * n..(r + 1) * n]) {
                *acc += x * ur;
            }
        }
        let nv = norm(&wt_u);
        if !(nv > state.eps_div) {
            return Ok(PowerEstimate {
                sigma: state.eps_div,
                degenerate: true,
            });
        }
        for (v, x) in state.v.iter_mut().zip(&wt_u) {
            *v = x / nv;
        }
        for (r, out) in w_v.iter_mut().enumerate() {
            *out = a[r * n..(r + 1) * n].iter().zip(&state.v).map(|(x, v)| x * v).sum();
        }
        let nu = norm(&w_v);
        if !(nu > state.eps_div) {
            return Ok(PowerEstimate {
                sigma: state.eps_div,
                degenerate: true,
            });
        }
        for (u, x) in state.u.iter_mut().zip(&w_v) {
            *u = x / nu;
        }
    }
    let sigma = crate::autograd::bilinear(w.data, m, n, &state.u, &state.v);
    if !(sigma > state.eps_div) {
        return Ok(PowerEstimate {
            sigma: state.eps_div,
            degenerate: true,
        });
    }
    Ok(PowerEstimate {
        sigma,
        degenerate: false,
    })
}

/// Largest singular value via a full SVD (reporting only).
pub fn spectral_norm_exact<T: Real>(w: MatrixView<'_, T>) -> f64 {
    let m = DMatrix::from_row_slice(w.rows, w.cols, &w.to_f64());
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Power-iteration state for every constrained weight of a sub-model.
#[derive(Clone, Debug)]
pub struct SpectralNormalizer {
    pub beta: f64,
    pub states: BTreeMap<String, SpectralState>,
}

/// Outcome of baking one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedWeight {
    pub name: String,
    /// Converged estimate the stored weight was divided by.
    pub sigma_estimate: f64,
    /// Exact spectral norm of the stored weight after baking.
    pub baked_norm: f64,
}

impl SpectralNormalizer {
    /// Seeds warm-start vectors for every dense/conv weight in blocks `split..L`.
    pub fn for_submodel<T: Real>(net: &Network<T>, beta: f64, iters: usize, seed: u64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1], got {beta}")));
        }
        let mut states = BTreeMap::new();
        for (i, block) in net.blocks().iter().enumerate().skip(net.split_index()) {
            for (j, layer) in block.layers().enumerate() {
                if let Some(p) = layer.spectral_weight() {
                    let view = MatrixView::of(&p.value);
                    let mut rng = RngState::derive(seed, &[stream::SPECTRAL, i as u64, j as u64]);
                    let mut st = SpectralState::new(view.rows, view.cols, &mut rng);
                    st.iters = iters.max(1);
                    states.insert(p.name.clone(), st);
                }
            }
        }
        Ok(SpectralNormalizer { beta, states })
    }

    /// Advances every state on the current weights and returns the forward-pass map.
    pub fn step<T: Real>(&mut self, net: &Network<T>) -> Result<HashMap<String, SpectralEntry>> {
        let mut out = HashMap::with_capacity(self.states.len());
        for p in net.params() {
            if let Some(st) = self.states.get_mut(&p.name) {
                let iters = st.iters;
                power_iteration(MatrixView::of(&p.value), st, iters)?;
                out.insert(
                    p.name.clone(),
                    SpectralEntry {
                        u: st.u.clone(),
                        v: st.v.clone(),
                        beta: self.beta,
                    },
                );
            }
        }
        Ok(out)
    }

    /// Current single-step estimates `σ̂ = uᵀWv` without advancing the states.
    pub fn estimates<T: Real>(&self, net: &Network<T>) -> Vec<(String, f64)> {
        net.params()
            .into_iter()
            .filter_map(|p| {
                let st = self.states.get(&p.name)?;
                let v = MatrixView::of(&p.value);
                Some((p.name.clone(), crate::autograd::bilinear(v.data, v.rows, v.cols, &st.u, &st.v)))
            })
            .collect()
    }

    /// Replaces each stored weight by `β·W/σ̂` with σ̂ from a converged power iteration.
    pub fn bake<T: Real>(&mut self, net: &mut Network<T>) -> Result<Vec<BakedWeight>> {
        let beta = self.beta;
        let mut report = Vec::new();
        for p in net.params_mut() {
            let Some(st) = self.states.get_mut(&p.name) else {
                continue;
            };
            let est = power_iteration(MatrixView::of(&p.value), st, BAKE_ITERS)?;
            if est.degenerate {
                return Err(Error::DegenerateSpectrum {
                    param: p.name.clone(),
                    sigma: est.sigma,
                });
            }
            let f = beta / est.sigma;
            for x in p.value.data_mut() {
                *x = T::of(x.f64() * f);
            }
            p.value.check_finite("bake")?;
            report.push(BakedWeight {
                name: p.name.clone(),
                sigma_estimate: est.sigma,
                baked_norm: spectral_norm_exact(MatrixView::of(&p.value)),
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn est(rows: usize, cols: usize, data: &[f64], iters: usize) -> PowerEstimate {
        let t = Tensor::<f64>::from_f64(&[rows, cols], data).unwrap();
        let mut st = SpectralState::new(rows, cols, &mut RngState::new(1));
        power_iteration(MatrixView::of(&t), &mut st, iters).unwrap()
    }

    #[test]
    fn diagonal_spectrum() {
        let e = est(2, 2, &[3.0, 0.0, 0.0, 1.0], 5);
        assert!((e.sigma - 3.0).abs() < 1e-6, "{e:?}");
    }

    #[test]
    fn antidiagonal_spectrum() {
        let e = est(2, 2, &[0.0, 2.0, 1.0, 0.0], 30);
        assert!((e.sigma - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_is_flagged() {
        let e = est(3, 2, &[0.0; 6], 3);
        assert!(e.degenerate);
        assert_eq!(e.sigma, 1e-12);
    }

    #[test]
    fn state_vectors_stay_unit() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap();
        let mut st = SpectralState::new(2, 3, &mut RngState::new(4));
        power_iteration(MatrixView::of(&t), &mut st, 1).unwrap();
        assert!((norm(&st.u) - 1.0).abs() < 1e-12);
        assert!((norm(&st.v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_state_rejected() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(3, 2, &mut RngState::new(0));
        assert!(power_iteration(MatrixView::of(&t), &mut st, 1).is_err());
    }

    #[test]
    fn exact_norm_of_scaled_matrix() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 2.0, 1.0, 0.0]).unwrap();
        let scaled = t.map(|x| x * 0.2);
        assert!((spectral_norm_exact(MatrixView::of(&scaled)) - 0.4).abs() < 1e-12);
    }
}
