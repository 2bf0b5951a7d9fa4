//! Channel-wise influence.
//!
//! For a source window `z'` and a destination window `z`, entry `(i, j)` of
//! the influence matrix is `η · ∇L(c'_i) · ∇L(c_j)`, where `c'_i` is channel
//! `i` of `z'`. Because window losses are sums of channel losses, the entries
//! of the matrix sum to the whole-window first-order influence `tracin`.
//! The diagonal of `M(z, z)` is the per-channel self-influence.

use std::io::Write;

use rayon::prelude::*;

use crate::autodiff::{GradientVector, ParamSubset};
use crate::error::{invalid, Error, Result};
use crate::models::{GradientSelector, ModelState};
use crate::scalar::Scalar;
use crate::series::MtsWindow;

/// `N × N` influence matrix with the learning rate and selector it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix<T> {
    values: Vec<T>,
    n: usize,
    pub eta: T,
    pub selector_id: String,
}

impl<T: Scalar> InfluenceMatrix<T> {
    pub fn n_channels(&self) -> usize {
        self.n
    }

    /// Influence of source channel `i` on destination channel `j`.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Sum of all entries; equals the whole-window influence.
    pub fn total(&self) -> T {
        self.values.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    /// CSV with a header of channel names followed by one row per source channel.
    pub fn write_csv<W: Write>(&self, mut out: W, channel_names: &[String]) -> Result<()> {
        if channel_names.len() != self.n {
            return Err(invalid("channel name count does not match matrix size"));
        }
        writeln!(out, "{}", channel_names.join(","))?;
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_eta<T: Scalar>(eta: T) -> Result<()> {
    if !(eta > T::zero() && eta.is_finite()) {
        return Err(invalid("learning rate eta must be positive and finite"));
    }
    Ok(())
}

/// Learning rate to scale influence by: the override, else the one the
/// model was trained with.
pub fn resolve_eta<T: Scalar>(state: &ModelState<T>, eta_override: Option<T>) -> Result<T> {
    let eta = eta_override.or(state.trained_lr).ok_or(Error::Untrained)?;
    check_eta(eta)?;
    Ok(eta)
}

/// Channel-wise influence of one gradient on another: `η · g_src · g_dst`.
pub fn cif<T: Scalar>(g_src: &GradientVector<T>, g_dst: &GradientVector<T>, eta: T) -> Result<T> {
    check_eta(eta)?;
    Ok(eta * g_src.dot(g_dst)?)
}

/// Builds the matrix from precomputed per-channel gradients.
pub fn influence_matrix_from_gradients<T: Scalar>(
    src: &[GradientVector<T>],
    dst: &[GradientVector<T>],
    eta: T,
) -> Result<InfluenceMatrix<T>> {
    check_eta(eta)?;
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::Shape {
            op: "influence matrix",
            left: vec![src.len()],
            right: vec![dst.len()],
        });
    }
    let n = src.len();
    let values = src
        .par_iter()
        .map(|gs| dst.iter().map(|gd| cif(gs, gd, eta)).collect::<Result<Vec<T>>>())
        .collect::<Result<Vec<Vec<T>>>>()?
        .concat();
    Ok(InfluenceMatrix {
        values,
        n,
        eta,
        selector_id: src[0].selector_id.clone(),
    })
}

fn check_pair<T: Scalar>(state: &ModelState<T>, a: &MtsWindow<T>, b: &MtsWindow<T>) -> Result<()> {
    if a.n_channels() != state.spec.channels || b.n_channels() != state.spec.channels {
        return Err(Error::Shape {
            op: "influence windows",
            left: vec![a.n_channels(), b.n_channels()],
            right: vec![state.spec.channels],
        });
    }
    Ok(())
}

/// Full `N × N` channel-wise influence of `z_src` on `z_dst`. Each window's
/// `N` channel gradients are computed once.
pub fn influence_matrix<T: Scalar>(
    state: &ModelState<T>,
    z_src: &MtsWindow<T>,
    z_dst: &MtsWindow<T>,
    eta: T,
    selector: &GradientSelector,
) -> Result<InfluenceMatrix<T>> {
    check_pair(state, z_src, z_dst)?;
    let subset = selector.resolve(state)?;
    let src = state.channel_gradients(z_src, &subset)?;
    let dst = if z_src == z_dst {
        src.clone()
    } else {
        state.channel_gradients(z_dst, &subset)?
    };
    influence_matrix_from_gradients(&src, &dst, eta)
}

/// Whole-window first-order influence, from whole-window gradients.
pub fn tracin<T: Scalar>(
    state: &ModelState<T>,
    z_src: &MtsWindow<T>,
    z_dst: &MtsWindow<T>,
    eta: T,
    selector: &GradientSelector,
) -> Result<T> {
    check_pair(state, z_src, z_dst)?;
    let subset = selector.resolve(state)?;
    let g_src = state.window_gradient(z_src, &subset)?;
    let g_dst = state.window_gradient(z_dst, &subset)?;
    cif(&g_src, &g_dst, eta)
}

/// Unscaled per-channel squared gradient norms `‖∇L(c_i)‖²`.
pub(crate) fn channel_sq_norms<T: Scalar>(
    state: &ModelState<T>,
    z: &MtsWindow<T>,
    subset: &ParamSubset,
) -> Result<Vec<T>> {
    Ok(state
        .channel_gradients(z, subset)?
        .iter()
        .map(GradientVector::sq_norm)
        .collect())
}

/// Diagonal of `M(z, z)`: `η ‖∇L(c_i)‖²` for every channel.
pub fn self_influence_per_channel<T: Scalar>(
    state: &ModelState<T>,
    z: &MtsWindow<T>,
    eta: T,
    selector: &GradientSelector,
) -> Result<Vec<T>> {
    check_eta(eta)?;
    check_pair(state, z, z)?;
    let subset = selector.resolve(state)?;
    Ok(channel_sq_norms(state, z, &subset)?
        .into_iter()
        .map(|s| eta * s)
        .collect())
}

/// Self-influence for every window of a list, in parallel.
pub fn self_influence_batch<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    eta: T,
    selector: &GradientSelector,
) -> Result<Vec<Vec<T>>> {
    windows
        .par_iter()
        .map(|w| self_influence_per_channel(state, w, eta, selector))
        .collect()
}
