//! Kernel two-sample statistics.
//!
//! Squared maximum mean discrepancy with the biased (V-statistic) estimator
//!
//! ```text
//! MMD²(S, T) = 1/n_s² ΣΣ k(s_i, s_j) + 1/n_t² ΣΣ k(t_i, t_j) − 2/(n_s n_t) ΣΣ k(s_i, t_j)
//! ```
//!
//! plus its class-wise sum and the gradients needed to backpropagate it
//! through a feature extractor.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kernel defining the RKHS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(−‖a−b‖² / (2σ²))`
    Rbf { bandwidth: f64 },
    /// `a · b`
    Linear,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("rbf bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec::Rbf { bandwidth })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { bandwidth } => Self::rbf(bandwidth).map(|_| ()),
            KernelSpec::Linear => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Rbf { bandwidth } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    /// Gram matrix `K[i, j] = k(x_i, y_j)`.
    pub fn gram(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
        match *self {
            KernelSpec::Linear => x.dot(&y.t()),
            KernelSpec::Rbf { bandwidth } => {
                // Direct differences rather than the ‖x‖²+‖y‖²−2x·y expansion,
                // which loses coincident points to cancellation at small σ.
                let scale = 1.0 / (2.0 * bandwidth * bandwidth);
                let mut k = Array2::zeros((x.nrows(), y.nrows()));
                for (xr, mut krow) in x.rows().into_iter().zip(k.rows_mut()) {
                    for (yr, v) in y.rows().into_iter().zip(krow.iter_mut()) {
                        let d2: f64 = xr.iter().zip(yr.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        *v = (-d2 * scale).exp();
                    }
                }
                k
            }
        }
    }
}

fn check_dims(xs: ArrayView2<'_, f64>, xt: ArrayView2<'_, f64>) -> Result<()> {
    if xs.ncols() != xt.ncols() {
        return Err(Error::Shape(format!(
            "source has {} features but target has {}",
            xs.ncols(),
            xt.ncols()
        )));
    }
    if xs.nrows() == 0 || xt.nrows() == 0 {
        return Err(Error::Data("MMD needs at least one sample per side".into()));
    }
    Ok(())
}

/// Median of the nonzero pairwise Euclidean distances over the pooled rows,
/// or 1 when every distance is zero.
pub fn median_bandwidth(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.ncols() != y.ncols() && x.nrows() > 0 && y.nrows() > 0 {
        return Err(Error::Shape(format!(
            "pooled sets differ in width: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let rows: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    if rows.len() < 2 {
        return Err(Error::Data("median bandwidth needs at least two rows".into()));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

/// Biased squared MMD; tiny negative rounding results are clamped to zero.
pub fn mmd2_biased(xs: ArrayView2<'_, f64>, xt: ArrayView2<'_, f64>, k: &KernelSpec) -> Result<f64> {
    check_dims(xs, xt)?;
    Ok(mmd2_unchecked(xs, xt, k))
}

fn mmd2_unchecked(xs: ArrayView2<'_, f64>, xt: ArrayView2<'_, f64>, k: &KernelSpec) -> f64 {
    let ns = xs.nrows() as f64;
    let nt = xt.nrows() as f64;
    let kss = k.gram(xs, xs).sum();
    let ktt = k.gram(xt, xt).sum();
    let kst = k.gram(xs, xt).sum();
    (kss / (ns * ns) + ktt / (nt * nt) - 2.0 * kst / (ns * nt)).max(0.0)
}

/// Squared MMD together with its gradient with respect to every row of both sets.
pub fn mmd2_with_grad(
    xs: ArrayView2<'_, f64>,
    xt: ArrayView2<'_, f64>,
    k: &KernelSpec,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_dims(xs, xt)?;
    let ns = xs.nrows() as f64;
    let nt = xt.nrows() as f64;
    let kss = k.gram(xs, xs);
    let ktt = k.gram(xt, xt);
    let kst = k.gram(xs, xt);
    let value =
        (kss.sum() / (ns * ns) + ktt.sum() / (nt * nt) - 2.0 * kst.sum() / (ns * nt)).max(0.0);

    // d/dx_p of Σ_j c_j k(x_p, z_j):
    //   rbf:    Σ_j c_j k(x_p, z_j) (z_j − x_p) / σ²
    //   linear: Σ_j c_j z_j
    let pull = |x: ArrayView2<'_, f64>, gram: &Array2<f64>, z: ArrayView2<'_, f64>| -> Array2<f64> {
        match *k {
            KernelSpec::Linear => {
                let colsum = z.sum_axis(Axis(0));
                let mut g = Array2::zeros(x.raw_dim());
                g.rows_mut().into_iter().for_each(|mut r| r.assign(&colsum));
                g
            }
            KernelSpec::Rbf { bandwidth } => {
                let s2 = bandwidth * bandwidth;
                let weighted = gram.dot(&z);
                let rowsum = gram.sum_axis(Axis(1));
                let mut g = weighted;
                for (mut row, (xr, &w)) in g.rows_mut().into_iter().zip(x.rows().into_iter().zip(&rowsum)) {
                    row.scaled_add(-w, &xr);
                    row /= s2;
                }
                g
            }
        }
    };

    // The self-term Σ_ij k(x_i, x_j) contributes twice per row by symmetry.
    let mut gs = pull(xs, &kss, xs) * (2.0 / (ns * ns));
    gs.scaled_add(-2.0 / (ns * nt), &pull(xs, &kst, xt));
    let kts = kst.t().to_owned();
    let mut gt = pull(xt, &ktt, xt) * (2.0 / (nt * nt));
    gt.scaled_add(-2.0 / (ns * nt), &pull(xt, &kts, xs));
    Ok((value, gs, gt))
}

fn class_rows(labels: &[usize], c: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| (y == c).then_some(i))
        .collect()
}

fn check_coverage(
    fs: ArrayView2<'_, f64>,
    ys: &[usize],
    ft: ArrayView2<'_, f64>,
    yt: &[usize],
    n_classes: usize,
) -> Result<()> {
    if fs.nrows() != ys.len() || ft.nrows() != yt.len() {
        return Err(Error::Shape("label count differs from feature rows".into()));
    }
    if fs.ncols() != ft.ncols() {
        return Err(Error::Shape(format!(
            "source has {} features but target has {}",
            fs.ncols(),
            ft.ncols()
        )));
    }
    for (domain, labels) in [("source", ys), ("target", yt)] {
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Data(format!("{domain} label {bad} outside 0..{n_classes}")));
        }
        let missing: Vec<usize> = (0..n_classes).filter(|&c| !labels.contains(&c)).collect();
        if !missing.is_empty() {
            return Err(Error::Coverage {
                domain: domain.into(),
                missing,
            });
        }
    }
    Ok(())
}

/// `Σ_c MMD²(source rows of class c, target rows of class c)`.
///
/// Every class must appear in both domains.
pub fn classwise_mmd2(
    fs: ArrayView2<'_, f64>,
    ys: &[usize],
    ft: ArrayView2<'_, f64>,
    yt: &[usize],
    n_classes: usize,
    k: &KernelSpec,
) -> Result<f64> {
    check_coverage(fs, ys, ft, yt, n_classes)?;
    let mut total = 0.0;
    for c in 0..n_classes {
        let s = fs.select(Axis(0), &class_rows(ys, c));
        let t = ft.select(Axis(0), &class_rows(yt, c));
        total += mmd2_unchecked(s.view(), t.view(), k);
    }
    Ok(total)
}

/// Class-wise squared MMD and its gradient with respect to both feature matrices.
pub fn classwise_mmd2_with_grad(
    fs: ArrayView2<'_, f64>,
    ys: &[usize],
    ft: ArrayView2<'_, f64>,
    yt: &[usize],
    n_classes: usize,
    k: &KernelSpec,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_coverage(fs, ys, ft, yt, n_classes)?;
    let mut total = 0.0;
    let mut gs = Array2::zeros(fs.raw_dim());
    let mut gt = Array2::zeros(ft.raw_dim());
    for c in 0..n_classes {
        let si = class_rows(ys, c);
        let ti = class_rows(yt, c);
        let s = fs.select(Axis(0), &si);
        let t = ft.select(Axis(0), &ti);
        let (v, dgs, dgt) = mmd2_with_grad(s.view(), t.view(), k)?;
        total += v;
        for (r, &i) in si.iter().enumerate() {
            gs.row_mut(i).assign(&dgs.row(r));
        }
        for (r, &i) in ti.iter().enumerate() {
            gt.row_mut(i).assign(&dgt.row(r));
        }
    }
    Ok((total, gs, gt))
}

/// Squared-MMD values under random relabelings of the pooled sample, for
/// calibrating a two-sample test.
pub fn permutation_null(
    xs: ArrayView2<'_, f64>,
    xt: ArrayView2<'_, f64>,
    k: &KernelSpec,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_dims(xs, xt)?;
    let pooled = ndarray::concatenate(Axis(0), &[xs, xt]).expect("matching widths");
    let ns = xs.nrows();
    // One Gram matrix over the pooled set; each permutation only re-indexes it.
    let gram = k.gram(pooled.view(), pooled.view());
    let n = pooled.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_permutations);
    for _ in 0..n_permutations {
        idx.shuffle(&mut rng);
        let (a, b) = idx.split_at(ns);
        let block = |p: &[usize], q: &[usize]| -> f64 {
            p.iter().map(|&i| q.iter().map(|&j| gram[[i, j]]).sum::<f64>()).sum()
        };
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let v = block(a, a) / (na * na) + block(b, b) / (nb * nb) - 2.0 * block(a, b) / (na * nb);
        out.push(v.max(0.0));
    }
    Ok(out)
}

/// Empirical quantile (nearest-rank) of a sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
