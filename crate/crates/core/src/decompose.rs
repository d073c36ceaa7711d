//! Whitening, symmetric FastICA (single and group level) and xDAWN spatial
//! filters.

use log::warn;
use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance, from_dmatrix, pinv, sym_eigen_desc, to_dmatrix};
use crate::model::{Epoch, NeuralSignal};

pub const ICA_TOL: f64 = 1e-6;
pub const ICA_MAX_ITER: usize = 500;
/// Eigenvalues below this fraction of the largest are treated as null.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ica,
    Xdawn,
}

/// Linear map from sensor space to component space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmixingModel {
    pub kind: ModelKind,
    /// `[k × n_channels]`; identity-sized rows for xDAWN.
    pub whitener: Array2<f64>,
    /// `[k × k]` for ICA; identity for xDAWN.
    pub unmixing: Array2<f64>,
    /// Combined sensor-to-component filters, `[k × n_channels]`.
    pub filters: Array2<f64>,
    pub channel_ids: Vec<String>,
    #[serde(default)]
    pub fitted_on: Vec<String>,
    pub converged: bool,
    pub n_iter: usize,
    /// Generalised eigenvalues (xDAWN) or whitening eigenvalues (ICA).
    pub eigenvalues: Vec<f64>,
}

impl UnmixingModel {
    pub fn n_components(&self) -> usize {
        self.filters.nrows()
    }

    pub fn identity(channel_ids: Vec<String>) -> Self {
        let n = channel_ids.len();
        UnmixingModel {
            kind: ModelKind::Ica,
            whitener: Array2::eye(n),
            unmixing: Array2::eye(n),
            filters: Array2::eye(n),
            channel_ids,
            fitted_on: Vec::new(),
            converged: true,
            n_iter: 0,
            eigenvalues: vec![1.0; n],
        }
    }

    /// Estimated mixing matrix `[n_channels × k]` (pseudo-inverse of the filters).
    pub fn mixing(&self) -> Result<Array2<f64>> {
        pinv(self.filters.view())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSignal {
    /// `[n_samples × k]`
    pub components: Array2<f64>,
    pub component_ids: Vec<String>,
    pub kind: ModelKind,
    pub fs: f64,
}

impl SourceSignal {
    /// Components as a signal so the rest of the chain can consume them.
    pub fn into_signal(self) -> Result<NeuralSignal> {
        NeuralSignal::new(self.components, self.fs, self.component_ids)
    }
}

#[derive(Clone, Debug)]
pub struct Whitening {
    /// `[k × n]`
    pub whitener: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub means: Vec<f64>,
    /// Centred, whitened data `[n_samples × k]`.
    pub whitened: Array2<f64>,
}

/// Whitens `x` (`[n_samples × n_channels]`) to `k` components (all
/// non-null ones when `k` is `None`).
pub fn whiten(x: ArrayView2<f64>, k: Option<usize>) -> Result<Whitening> {
    if x.nrows() < 2 {
        return Err(Error::TooShort { needed: 2, got: x.nrows() });
    }
    let cov = covariance(x);
    let (vals, vecs) = sym_eigen_desc(&cov);
    let max = vals.first().copied().unwrap_or(0.0);
    let rank = if max > 0.0 { vals.iter().filter(|&&v| v >= RANK_RTOL * max).count() } else { 0 };
    let k = k.unwrap_or(rank);
    if k == 0 || k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    let n = x.ncols();
    let whitener = Array2::from_shape_fn((k, n), |(i, j)| vecs[(j, i)] / vals[i].sqrt());
    let means = crate::linalg::column_means(x);
    let m = Array1::from(means.clone());
    let centred = &x - &m;
    let whitened = centred.dot(&whitener.t());
    Ok(Whitening { whitener, eigenvalues: vals[..k].to_vec(), means, whitened })
}

/// `(W Wᵀ)^(-1/2) W`
fn sym_decorrelate(w: &Array2<f64>) -> Array2<f64> {
    let wwt = to_dmatrix(w.dot(&w.t()).view());
    let (vals, vecs) = sym_eigen_desc(&wwt);
    let k = vals.len();
    let d = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 / vals[i].max(f64::MIN_POSITIVE).sqrt() } else { 0.0 });
    let inv_sqrt = &vecs * d * vecs.transpose();
    from_dmatrix(&inv_sqrt).dot(w)
}

/// Symmetric FastICA with a `tanh` contrast on `[n_samples × n_channels]` data.
pub fn fastica_fit(signal: &NeuralSignal, k: usize, seed: u64) -> Result<UnmixingModel> {
    let need = 50 * k;
    if signal.n_samples() < need {
        return Err(Error::TooShort { needed: need, got: signal.n_samples() });
    }
    let wh = whiten(signal.data.view(), Some(k))?;
    let z = &wh.whitened;
    let n = z.nrows() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_simple_fn((k, k), || StandardNormal.sample(&mut rng));
    let mut w = sym_decorrelate(&init);
    let mut best = (f64::INFINITY, w.clone());
    let mut converged = false;
    let mut n_iter = 0;
    for it in 1..=ICA_MAX_ITER {
        n_iter = it;
        let mut g = z.dot(&w.t());
        let mut g_prime_mean = vec![0.0; k];
        for row in g.outer_iter_mut() {
            for (j, v) in row.into_iter().enumerate() {
                let t = v.tanh();
                *v = t;
                g_prime_mean[j] += 1.0 - t * t;
            }
        }
        let mut w_new = g.t().dot(z) / n;
        for (j, mut row) in w_new.outer_iter_mut().enumerate() {
            let c = g_prime_mean[j] / n;
            row.scaled_add(-c, &w.row(j));
        }
        let w_new = sym_decorrelate(&w_new);
        let lim = w_new
            .outer_iter()
            .zip(w.outer_iter())
            .map(|(a, b)| (1.0 - a.dot(&b).abs()).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if lim < best.0 {
            best = (lim, w.clone());
        }
        if lim < ICA_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("FastICA did not converge in {ICA_MAX_ITER} iterations (best change {:.3e})", best.0);
        w = best.1;
    }
    let filters = w.dot(&wh.whitener);
    let (w, filters) = canonicalise(w, filters)?;
    Ok(UnmixingModel {
        kind: ModelKind::Ica,
        whitener: wh.whitener,
        unmixing: w,
        filters,
        channel_ids: signal.channel_ids.clone(),
        fitted_on: Vec::new(),
        converged,
        n_iter,
        eigenvalues: wh.eigenvalues,
    })
}

/// Orders components by descending back-projected variance (unit-variance
/// components, so the squared norm of the mixing column) and flips signs so
/// the largest-magnitude sensor loading is positive.
fn canonicalise(w: Array2<f64>, filters: Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let a = pinv(filters.view())?;
    let k = filters.nrows();
    let norms: Vec<f64> = (0..k).map(|j| a.column(j).dot(&a.column(j))).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut w_out = Array2::zeros(w.dim());
    let mut f_out = Array2::zeros(filters.dim());
    for (dst, &src) in order.iter().enumerate() {
        let col = a.column(src);
        let peak = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        w_out.row_mut(dst).assign(&(&w.row(src) * sign));
        f_out.row_mut(dst).assign(&(&filters.row(src) * sign));
    }
    Ok((w_out, f_out))
}

/// FastICA on the temporal concatenation of several recordings sharing one
/// channel set.
pub fn group_ica_fit(signals: &[&NeuralSignal], k: usize, seed: u64) -> Result<UnmixingModel> {
    let first = signals.first().ok_or_else(|| Error::InvalidInput("group ICA needs at least one session".into()))?;
    for (i, s) in signals.iter().enumerate().skip(1) {
        if s.channel_ids != first.channel_ids {
            return Err(Error::ChannelMismatch(format!(
                "session {i} channels {:?} differ from {:?}",
                s.channel_ids, first.channel_ids
            )));
        }
    }
    if signals.len() == 1 {
        return fastica_fit(first, k, seed);
    }
    let views: Vec<ArrayView2<f64>> = signals.iter().map(|s| s.data.view()).collect();
    let data = concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let joined = NeuralSignal::new(data, first.fs, first.channel_ids.clone())?;
    fastica_fit(&joined, k, seed)
}

/// Applies the model sample-wise: `ŝ(t) = F·x(t)`. No centring is applied.
pub fn apply_unmixing(model: &UnmixingModel, signal: &NeuralSignal) -> Result<SourceSignal> {
    check_channels(model, &signal.channel_ids)?;
    let prefix = match model.kind {
        ModelKind::Ica => "ic",
        ModelKind::Xdawn => "xdawn",
    };
    Ok(SourceSignal {
        components: signal.data.dot(&model.filters.t()),
        component_ids: (0..model.n_components()).map(|i| format!("{prefix}{i}")).collect(),
        kind: model.kind,
        fs: signal.fs,
    })
}

pub fn check_channels(model: &UnmixingModel, channel_ids: &[String]) -> Result<()> {
    if model.channel_ids != channel_ids {
        return Err(Error::ChannelMismatch(format!(
            "model fitted on {:?}, signal has {:?}",
            model.channel_ids, channel_ids
        )));
    }
    Ok(())
}

/// Applies spatial filters to every epoch.
pub fn apply_to_epochs(model: &UnmixingModel, epochs: &[Epoch]) -> Vec<Epoch> {
    epochs
        .iter()
        .map(|e| Epoch { data: e.data.dot(&model.filters.t()), ..e.clone() })
        .collect()
}

/// Amari index of a square matrix `P`, normalised to `[0, 1]`; zero iff
/// `P` is a scaled permutation.
pub fn amari_distance(p: ArrayView2<f64>) -> f64 {
    let k = p.nrows();
    assert_eq!(k, p.ncols(), "Amari distance needs a square matrix");
    if k < 2 {
        return 0.0;
    }
    let a = p.mapv(f64::abs);
    let rows: f64 = a
        .outer_iter()
        .map(|r| r.sum() / r.iter().copied().fold(0.0, f64::max) - 1.0)
        .sum();
    let cols: f64 = a
        .columns()
        .into_iter()
        .map(|c| c.sum() / c.iter().copied().fold(0.0, f64::max) - 1.0)
        .sum();
    (rows + cols) / (2.0 * k as f64 * (k as f64 - 1.0))
}

fn same_shape(epochs: &[&Epoch]) -> Result<(usize, usize)> {
    let first = epochs.first().ok_or_else(|| Error::InvalidInput("no epochs".into()))?;
    let dim = first.data.dim();
    if let Some(e) = epochs.iter().find(|e| e.data.dim() != dim) {
        return Err(Error::InvalidInput(format!("epoch shape {:?} differs from {:?}", e.data.dim(), dim)));
    }
    Ok(dim)
}

/// Class-average of `[T × n]` epochs.
pub fn class_average(epochs: &[&Epoch]) -> Result<Array2<f64>> {
    let dim = same_shape(epochs)?;
    let mut avg = Array2::zeros(dim);
    for e in epochs {
        avg += &e.data;
    }
    Ok(avg / epochs.len() as f64)
}

/// Fits xDAWN filters maximising evoked over total variance, with the
/// epochs flagged in `is_target` as the evoked class.
pub fn xdawn_fit(epochs: &[Epoch], is_target: &[bool], n_components: usize, channel_ids: &[String]) -> Result<UnmixingModel> {
    if epochs.len() != is_target.len() {
        return Err(Error::InvalidInput("one target flag per epoch is required".into()));
    }
    let targets: Vec<&Epoch> = epochs.iter().zip(is_target).filter(|(_, &t)| t).map(|(e, _)| e).collect();
    if targets.len() < 5 {
        return Err(Error::InvalidInput(format!("xDAWN needs >= 5 target epochs, got {}", targets.len())));
    }
    let all: Vec<&Epoch> = epochs.iter().collect();
    let (_, n) = same_shape(&all)?;
    if channel_ids.len() != n {
        return Err(Error::ChannelMismatch(format!("{} channel ids for {n} channels", channel_ids.len())));
    }
    if n_components == 0 || n_components > n {
        return Err(Error::InvalidConfig(format!("n_components must lie in 1..={n}, got {n_components}")));
    }
    let evoked = class_average(&targets)?;
    let sigma_e = covariance(evoked.view());
    let views: Vec<ArrayView2<f64>> = epochs.iter().map(|e| e.data.view()).collect();
    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut sigma_t = covariance(stacked.view());

    let chol = match sigma_t.clone().cholesky() {
        Some(c) if min_diag(&c) > 1e-12 * max_diag(&c) => c,
        _ => {
            let ridge = 1e-9 * sigma_t.trace() / n as f64;
            warn!("total covariance is singular; adding ridge {ridge:.3e}");
            for i in 0..n {
                sigma_t[(i, i)] += ridge.max(f64::MIN_POSITIVE);
            }
            sigma_t
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("total covariance is not positive definite".into()))?
        }
    };
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Cholesky factor is singular".into()))?;
    let m = &l_inv * &sigma_e * l_inv.transpose();
    let (vals, u) = sym_eigen_desc(&m);
    let v = l_inv.transpose() * u;
    let mut filters = Array2::zeros((n_components, n));
    for c in 0..n_components {
        let col = v.column(c);
        let norm = col.norm();
        let peak = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if peak < 0.0 { -1.0 } else { 1.0 } / norm;
        for j in 0..n {
            filters[[c, j]] = col[j] * s;
        }
    }
    Ok(UnmixingModel {
        kind: ModelKind::Xdawn,
        whitener: Array2::eye(n),
        unmixing: Array2::eye(n),
        filters,
        channel_ids: channel_ids.to_vec(),
        fitted_on: Vec::new(),
        converged: true,
        n_iter: 0,
        eigenvalues: vals[..n_components].to_vec(),
    })
}

fn min_diag(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_diag(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().copied().fold(0.0, f64::max)
}

/// Signal-to-residual ratio of the projection `w`: variance of the target
/// class average over the variance of each epoch's deviation from its own
/// class average.
pub fn ssnr(epochs: &[Epoch], is_target: &[bool], w: &[f64]) -> Result<f64> {
    let project = |e: &Epoch| -> Vec<f64> { e.data.outer_iter().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect() };
    let mut resid = Vec::new();
    let mut evoked_var = 0.0;
    for class in [true, false] {
        let members: Vec<&Epoch> = epochs.iter().zip(is_target).filter(|(_, &t)| t == class).map(|(e, _)| e).collect();
        if members.is_empty() {
            continue;
        }
        let avg = project(&Epoch { data: class_average(&members)?, ..members[0].clone() });
        if class {
            evoked_var = crate::dsp::variance(&avg);
        }
        for e in members {
            resid.extend(project(e).iter().zip(&avg).map(|(a, b)| a - b));
        }
    }
    let rv = crate::dsp::variance(&resid);
    Ok(if rv > 0.0 { evoked_var / rv } else { f64::INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_channel_ids, TrialLabel};
    use rand::Rng;

    fn laplace_sources(n: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, k), || {
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    }

    fn sig(data: Array2<f64>) -> NeuralSignal {
        NeuralSignal::with_default_ids(data, 1000.0).unwrap()
    }

    #[test]
    fn whitening_diagonal_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20000;
        let raw = Array2::from_shape_simple_fn((n, 2), || StandardNormal.sample(&mut rng));
        // force exact covariance [[4,0],[0,1]]
        let wh0 = whiten(raw.view(), None).unwrap();
        let mut x = wh0.whitened.clone();
        x.column_mut(0).mapv_inplace(|v| 2.0 * v);
        let wh = whiten(x.view(), None).unwrap();
        assert!((wh.eigenvalues[0] - 4.0).abs() < 1e-8 && (wh.eigenvalues[1] - 1.0).abs() < 1e-8);
        assert!((wh.whitener[[0, 0]].abs() - 0.5).abs() < 1e-8 && wh.whitener[[0, 1]].abs() < 1e-8);
        assert!((wh.whitener[[1, 1]].abs() - 1.0).abs() < 1e-8);
        let c = covariance(wh.whitened.view());
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[(i, j)] - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whitening_drops_null_directions() {
        let mut x = laplace_sources(5000, 3, 1);
        let s = &x.column(0) + &x.column(1);
        x.column_mut(2).assign(&s);
        assert_eq!(whiten(x.view(), None).unwrap().whitener.nrows(), 2);
        assert!(matches!(whiten(x.view(), Some(3)), Err(Error::RankDeficient { rank: 2, .. })));
    }

    #[test]
    fn ica_recovers_laplacian_sources() {
        let s = laplace_sources(30_000, 3, 11);
        let a = random_matrix(3, 3, 12);
        let x = s.dot(&a.t());
        let m = fastica_fit(&sig(x), 3, 5).unwrap();
        assert!(m.converged);
        assert!(amari_distance(m.filters.dot(&a).view()) <= 0.05);
        let again = fastica_fit(&sig(s.dot(&a.t())), 3, 5).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn ica_noiseless_sources_correlate() {
        let s = laplace_sources(20_000, 3, 21);
        let a = random_matrix(6, 3, 22);
        let x = sig(s.dot(&a.t()));
        let m = fastica_fit(&x, 3, 1).unwrap();
        let rec = apply_unmixing(&m, &x).unwrap().components;
        for j in 0..3 {
            let truth = s.column(j).to_vec();
            let best = (0..3)
                .map(|i| crate::dsp::correlation(&rec.column(i).to_vec(), &truth).abs())
                .fold(0.0, f64::max);
            assert!(best >= 0.999, "source {j}: {best}");
        }
    }

    #[test]
    fn gaussian_sources_do_not_crash() {
        let g = random_matrix(2000, 3, 7);
        let m = fastica_fit(&sig(g), 3, 0).unwrap();
        assert!(m.filters.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sign_and_order_conventions() {
        let s = laplace_sources(20_000, 3, 31);
        let a = random_matrix(4, 3, 32);
        let m = fastica_fit(&sig(s.dot(&a.t())), 3, 2).unwrap();
        let mix = m.mixing().unwrap();
        let norms: Vec<f64> = (0..3).map(|j| mix.column(j).dot(&mix.column(j))).collect();
        assert!(norms.windows(2).all(|w| w[0] >= w[1]));
        for j in 0..3 {
            let peak = mix.column(j).iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(peak > 0.0);
        }
    }

    #[test]
    fn group_ica_on_duplicates_matches_single() {
        let s = laplace_sources(10_000, 3, 41);
        let a = random_matrix(3, 3, 42);
        let x = sig(s.dot(&a.t()));
        let single = fastica_fit(&x, 3, 9).unwrap();
        let group = group_ica_fit(&[&x, &x], 3, 9).unwrap();
        let p = single.filters.dot(&group.mixing().unwrap());
        assert!(amari_distance(p.view()) < 1e-6);
        assert_eq!(group_ica_fit(&[&x], 3, 9).unwrap(), single);
        let mut swapped = x.clone();
        swapped.channel_ids.swap(0, 1);
        assert!(matches!(group_ica_fit(&[&x, &swapped], 3, 9), Err(Error::ChannelMismatch(_))));
    }

    #[test]
    fn identity_model_and_zero_signal() {
        let x = sig(random_matrix(100, 3, 1));
        let id = UnmixingModel::identity(default_channel_ids(3));
        assert_eq!(apply_unmixing(&id, &x).unwrap().components, x.data);
        let z = sig(Array2::zeros((100, 3)));
        assert!(apply_unmixing(&id, &z).unwrap().components.iter().all(|&v| v == 0.0));
        let other = NeuralSignal::new(x.data.clone(), 1000.0, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert!(apply_unmixing(&id, &other).is_err());
    }

    #[test]
    fn amari_anchor() {
        let a = random_matrix(4, 4, 5);
        let inv = crate::linalg::pinv(a.view()).unwrap();
        assert!(amari_distance(inv.dot(&a).view()) < 1e-12);
        let perm = ndarray::array![[0.0, 2.0], [-3.0, 0.0]];
        assert_eq!(amari_distance(perm.view()), 0.0);
        let mixed = ndarray::array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(amari_distance(mixed.view()), 1.0);
    }

    fn erp_epochs(n_target: usize, n_other: usize, seed: u64) -> (Vec<Epoch>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 100;
        let mut out = Vec::new();
        let mut flags = Vec::new();
        for i in 0..n_target + n_other {
            let target = i < n_target;
            let data = Array2::from_shape_fn((t, 2), |(s, c)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                if c == 0 {
                    if target { 3.0 * (s as f64 / 10.0).sin() + 0.1 * noise } else { 0.1 * noise }
                } else {
                    noise
                }
            });
            out.push(Epoch { data, t0_offset: 0.5, fs: 100.0, label: TrialLabel::fixation(0) });
            flags.push(target);
        }
        (out, flags)
    }

    #[test]
    fn xdawn_finds_erp_channel() {
        let (epochs, flags) = erp_epochs(30, 30, 1);
        let m = xdawn_fit(&epochs, &flags, 1, &default_channel_ids(2)).unwrap();
        assert!(m.filters[[0, 0]].abs() >= 0.99);
        let full = xdawn_fit(&epochs, &flags, 2, &default_channel_ids(2)).unwrap();
        assert_eq!(crate::linalg::rank(full.filters.view(), 1e-10), 2);
    }

    #[test]
    fn xdawn_needs_five_targets() {
        let (epochs, mut flags) = erp_epochs(4, 10, 2);
        flags.truncate(epochs.len());
        assert!(xdawn_fit(&epochs, &flags, 1, &default_channel_ids(2)).is_err());
    }

    #[test]
    fn xdawn_top_beats_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(5, 3, 8);
        let mut epochs = Vec::new();
        let mut flags = Vec::new();
        for i in 0..80 {
            let target = i % 2 == 0;
            let src = Array2::from_shape_fn((64, 3), |(s, c)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let erp = if c == 0 && target { 1.5 * (-((s as f64 - 32.0) / 6.0).powi(2)).exp() } else { 0.0 };
                erp + noise
            });
            epochs.push(Epoch { data: src.dot(&a.t()), t0_offset: 0.5, fs: 64.0, label: TrialLabel::fixation(0) });
            flags.push(target);
        }
        let m = xdawn_fit(&epochs, &flags, 2, &default_channel_ids(5)).unwrap();
        let top = ssnr(&epochs, &flags, &m.filters.row(0).to_vec()).unwrap();
        let best_channel = (0..5)
            .map(|c| {
                let mut w = vec![0.0; 5];
                w[c] = 1.0;
                ssnr(&epochs, &flags, &w).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(top >= best_channel, "{top} vs {best_channel}");
        assert!(m.eigenvalues[0] >= m.eigenvalues[1]);
    }

    #[test]
    fn scale_equivariance() {
        let s = laplace_sources(5000, 2, 3);
        let x = sig(s.clone());
        let m = fastica_fit(&x, 2, 0).unwrap();
        let y1 = apply_unmixing(&m, &x).unwrap().components;
        let y2 = apply_unmixing(&m, &sig(s * 2.0)).unwrap().components;
        assert_eq!(y1 * 2.0, y2);
    }

    #[test]
    fn json_round_trip() {
        let s = laplace_sources(2000, 2, 3);
        let m = fastica_fit(&sig(s), 2, 0).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: UnmixingModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }
}
