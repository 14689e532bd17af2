//! Mass-univariate permutation statistics: voxel-wise OLS t maps with
//! max-statistic FWE correction, and significance-masked effect size maps.
//!
//! The contrast column is orthogonalized against the intercept and
//! confounds; the null is built by permuting the orthogonalized contrast
//! across subjects (same permutation for all voxels per iteration).

use crate::error::{Error, Result};
use crate::volcore::Volume;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Regression design: one contrast column of interest plus optional
/// confound columns. The intercept is always implicit.
#[derive(Debug, Clone)]
pub struct Design {
    pub contrast: Vec<f64>,
    pub confounds: Vec<Vec<f64>>,
}

impl Design {
    pub fn new(contrast: Vec<f64>, confounds: Vec<Vec<f64>>) -> Result<Self> {
        let n = contrast.len();
        if contrast.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite contrast value".into()));
        }
        for c in &confounds {
            if c.len() != n {
                return Err(Error::DimMismatch("confound column length".into()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite confound value".into()));
            }
        }
        if n < 3 + confounds.len() {
            return Err(Error::DegenerateDesign(format!(
                "need at least {} subjects, got {n}",
                3 + confounds.len()
            )));
        }
        Ok(Self { contrast, confounds })
    }

    pub fn n_subjects(&self) -> usize {
        self.contrast.len()
    }
}

/// Voxel-wise t statistics with FWE-corrected p values.
#[derive(Debug, Clone)]
pub struct StatMap {
    pub t_values: Volume,
    pub fwe_p: Volume,
    pub n_perm: usize,
    pub seed: u64,
}

impl StatMap {
    /// Significance mask at level alpha.
    pub fn significant(&self, alpha: f64) -> crate::volcore::RegionMask {
        crate::volcore::RegionMask {
            dims: self.fwe_p.dims,
            spacing_mm: self.fwe_p.spacing_mm,
            membership: self.fwe_p.data.iter().map(|&p| p <= alpha).collect(),
        }
    }
}

/// Residual-maker application: orthogonalize `v` against the intercept and
/// the given columns via least squares (Gram-Schmidt on the design).
fn residualize_against(v: &[f64], columns: &[Vec<f64>]) -> Vec<f64> {
    let n = v.len();
    // Build orthonormal basis of [1, columns] with modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.len() + 1);
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    basis.push(ones);
    for col in columns {
        let mut u = col.clone();
        for b in &basis {
            let d: f64 = u.iter().zip(b).map(|(a, c)| a * c).sum();
            for (ui, bi) in u.iter_mut().zip(b) {
                *ui -= d * bi;
            }
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * (n as f64).sqrt() {
            for ui in &mut u {
                *ui /= norm;
            }
            basis.push(u);
        }
    }
    let mut r = v.to_vec();
    for b in &basis {
        let d: f64 = r.iter().zip(b).map(|(a, c)| a * c).sum();
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri -= d * bi;
        }
    }
    r
}

/// t statistic of the contrast coefficient for every voxel, given the
/// confound-orthogonalized contrast. `df` is n - (2 + n_confounds).
fn t_map_for_contrast(
    contrast_resid: &[f64],
    y_resid: &[Vec<f64>],
    n_voxels: usize,
    df: f64,
) -> Vec<f64> {
    let cc: f64 = contrast_resid.iter().map(|x| x * x).sum();
    (0..n_voxels)
        .into_par_iter()
        .map(|vox| {
            let mut cy = 0.0;
            let mut yy = 0.0;
            for (s, ys) in y_resid.iter().enumerate() {
                let y = ys[vox];
                cy += contrast_resid[s] * y;
                yy += y * y;
            }
            if yy <= 1e-24 || cc <= 1e-24 {
                return 0.0;
            }
            let beta = cy / cc;
            let rss = (yy - beta * cy).max(0.0);
            if rss <= 1e-24 {
                // Perfect fit: report a large finite t.
                return beta.signum() * 1e12;
            }
            let sigma2 = rss / df;
            beta / (sigma2 / cc).sqrt()
        })
        .collect()
}

fn orthogonalized_contrast(design: &Design) -> Result<Vec<f64>> {
    let c = residualize_against(&design.contrast, &design.confounds);
    let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-10 * (design.n_subjects() as f64).sqrt() {
        return Err(Error::DegenerateDesign(
            "contrast is constant after orthogonalization against intercept/confounds".into(),
        ));
    }
    Ok(c)
}

/// Permutation OLS with an explicit permutation list (each permutation is a
/// subject-index reordering applied to the orthogonalized contrast).
pub fn permuted_ols_with_perms(
    design: &Design,
    y_per_voxel: &[Volume],
    perms: &[Vec<usize>],
    seed: u64,
) -> Result<StatMap> {
    let n = design.n_subjects();
    if y_per_voxel.len() != n {
        return Err(Error::DimMismatch("number of subject volumes vs design".into()));
    }
    let dims = y_per_voxel[0].dims;
    let spacing = y_per_voxel[0].spacing_mm;
    if y_per_voxel.iter().any(|v| v.dims != dims) {
        return Err(Error::DimMismatch("subject volumes share dims".into()));
    }
    if perms.is_empty() {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let c_orth = orthogonalized_contrast(design)?;
    let n_vox = dims.0 * dims.1 * dims.2;
    let df = (n - 2 - design.confounds.len()) as f64;

    // Residualize y against [intercept, confounds] once per subject set
    // (Frisch-Waugh: the contrast t in the full model equals the simple
    // regression of residualized y on residualized contrast).
    let y_resid: Vec<Vec<f64>> = {
        // Transpose to per-voxel is avoided; residualize per voxel column.
        let mut cols: Vec<Vec<f64>> = vec![vec![0.0; n_vox]; n];
        let per_voxel: Vec<Vec<f64>> = (0..n_vox)
            .into_par_iter()
            .map(|vox| {
                let col: Vec<f64> = y_per_voxel.iter().map(|v| v.data[vox]).collect();
                residualize_against(&col, &design.confounds)
            })
            .collect();
        for (vox, col) in per_voxel.iter().enumerate() {
            for s in 0..n {
                cols[s][vox] = col[s];
            }
        }
        cols
    };

    let t_obs = t_map_for_contrast(&c_orth, &y_resid, n_vox, df);

    // Max-|t| null distribution; each permutation reorders the
    // orthogonalized contrast, which is re-orthogonalized against the
    // confounds to match a full OLS on the permuted design.
    let max_null: Vec<f64> = perms
        .par_iter()
        .map(|perm| {
            let permuted: Vec<f64> = perm.iter().map(|&i| c_orth[i]).collect();
            let c_perm = residualize_against(&permuted, &design.confounds);
            let t = t_map_for_contrast(&c_perm, &y_resid, n_vox, df);
            t.iter().cloned().fold(0.0f64, |m, x| m.max(x.abs()))
        })
        .collect();

    let n_perm = perms.len();
    let fwe: Vec<f64> = t_obs
        .iter()
        .map(|&t| {
            let exceed = max_null.iter().filter(|&&m| m >= t.abs()).count();
            (1 + exceed) as f64 / (1 + n_perm) as f64
        })
        .collect();

    Ok(StatMap {
        t_values: Volume { dims, spacing_mm: spacing, data: t_obs },
        fwe_p: Volume { dims, spacing_mm: spacing, data: fwe },
        n_perm,
        seed,
    })
}

/// Permutation OLS with `n_perm` seeded random permutations.
pub fn permuted_ols(
    design: &Design,
    y_per_voxel: &[Volume],
    n_perm: usize,
    seed: u64,
) -> Result<StatMap> {
    if n_perm < 1 {
        return Err(Error::InvalidArgument("n_perm must be >= 1".into()));
    }
    let n = design.n_subjects();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..n_perm)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    permuted_ols_with_perms(design, y_per_voxel, &perms, seed)
}

/// Per-voxel Cohen's d between two groups, zeroed where the statistic map
/// is not significant at `alpha`. Requires at least two subjects per group.
pub fn effect_size_map(
    group_a: &[Volume],
    group_b: &[Volume],
    sig: &StatMap,
    alpha: f64,
) -> Result<Volume> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::InvalidArgument("need >= 2 subjects per group".into()));
    }
    let dims = sig.fwe_p.dims;
    if group_a.iter().chain(group_b).any(|v| v.dims != dims) {
        return Err(Error::DimMismatch("effect size group dims".into()));
    }
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let n_vox = dims.0 * dims.1 * dims.2;
    let data: Vec<f64> = (0..n_vox)
        .into_par_iter()
        .map(|vox| {
            if sig.fwe_p.data[vox] > alpha {
                return 0.0;
            }
            let ma: f64 = group_a.iter().map(|v| v.data[vox]).sum::<f64>() / na;
            let mb: f64 = group_b.iter().map(|v| v.data[vox]).sum::<f64>() / nb;
            let va: f64 =
                group_a.iter().map(|v| (v.data[vox] - ma).powi(2)).sum::<f64>() / (na - 1.0);
            let vb: f64 =
                group_b.iter().map(|v| (v.data[vox] - mb).powi(2)).sum::<f64>() / (nb - 1.0);
            let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
            if pooled <= 0.0 {
                0.0
            } else {
                (ma - mb) / pooled
            }
        })
        .collect();
    Ok(Volume { dims, spacing_mm: sig.fwe_p.spacing_mm, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_vols(values: &[f64]) -> Vec<Volume> {
        values
            .iter()
            .map(|&v| Volume::new((1, 1, 1), [1.0; 3], vec![v]).unwrap())
            .collect()
    }

    #[test]
    fn t_matches_pearson_identity_without_confounds() {
        let x = vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9, -1.8, 0.2, 1.1, -0.6];
        let y = vec![0.5, -0.9, 0.3, 1.7, -0.1, 1.2, -1.5, -0.2, 0.8, -0.9];
        let n = x.len() as f64;
        let design = Design::new(x.clone(), vec![]).unwrap();
        let sm = permuted_ols(&design, &scalar_vols(&y), 10, 7).unwrap();
        // Closed-form Pearson-t oracle.
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let r = sxy / (sxx * syy).sqrt();
        let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
        assert_abs_diff_eq!(sm.t_values.data[0], t, epsilon = 1e-10);
    }

    #[test]
    fn constant_voxel_gets_t_zero_p_one() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![7.0; 5];
        let design = Design::new(x, vec![]).unwrap();
        let sm = permuted_ols(&design, &scalar_vols(&y), 20, 1).unwrap();
        assert_eq!(sm.t_values.data[0], 0.0);
        assert_eq!(sm.fwe_p.data[0], 1.0);
    }

    #[test]
    fn fwe_matches_exhaustive_permutation_oracle() {
        // n = 5, all 24 permutations that are not checked... use a fixed
        // list of 24 distinct permutations of 0..5.
        let x = vec![0.1, 1.3, -0.7, 0.9, -1.6];
        let ys = [
            vec![0.4, 1.0, -0.2, 0.6, -1.1],
            vec![-0.3, 0.2, 0.9, -0.5, 0.1],
        ];
        let vols: Vec<Volume> = (0..5)
            .map(|s| Volume::new((2, 1, 1), [1.0; 3], vec![ys[0][s], ys[1][s]]).unwrap())
            .collect();
        let design = Design::new(x.clone(), vec![]).unwrap();
        // 24 permutations: cyclic shifts and swaps, deterministic list.
        let mut perms = Vec::new();
        for a in 0..5usize {
            for b in 0..5usize {
                if a != b {
                    let mut p: Vec<usize> = (0..5).collect();
                    p.swap(a, b);
                    perms.push(p);
                    if perms.len() == 24 {
                        break;
                    }
                }
            }
        }
        assert_eq!(perms.len(), 20); // 5 choose 2 * 2 orders = 20 swaps
        // pad with 4 cyclic shifts to reach 24
        for k in 1..5usize {
            let p: Vec<usize> = (0..5).map(|i| (i + k) % 5).collect();
            perms.push(p);
        }
        assert_eq!(perms.len(), 24);
        let sm = permuted_ols_with_perms(&design, &vols, &perms, 0).unwrap();

        // Brute-force oracle: recompute t for each permutation via direct
        // simple-regression formulas on the centered data.
        let t_of = |xs: &[f64], ys: &[f64]| -> f64 {
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = ys.iter().map(|b| (b - my).powi(2)).sum();
            let beta = sxy / sxx;
            let rss = syy - beta * sxy;
            if rss <= 1e-24 {
                return beta.signum() * 1e12;
            }
            beta / (rss / (n - 2.0) / sxx).sqrt()
        };
        // The implementation permutes the centered (orthogonalized)
        // contrast; centering is permutation-invariant so permuting raw x
        // gives the same t values.
        let t_obs: Vec<f64> = ys.iter().map(|y| t_of(&x, y)).collect();
        for (vox, &t) in t_obs.iter().enumerate() {
            let mut exceed = 0;
            for p in &perms {
                let xp: Vec<f64> = p.iter().map(|&i| x[i]).collect();
                let max_t = ys
                    .iter()
                    .map(|y| t_of(&xp, y).abs())
                    .fold(0.0f64, f64::max);
                if max_t >= t.abs() {
                    exceed += 1;
                }
            }
            let want = (1 + exceed) as f64 / 25.0;
            assert_abs_diff_eq!(sm.fwe_p.data[vox], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn fwe_p_invariant_to_affine_contrast_rescale() {
        let x = vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9];
        let y = vec![0.5, -0.9, 0.3, 1.7, -0.1, 1.2];
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 10.0).collect();
        let d1 = Design::new(x, vec![]).unwrap();
        let d2 = Design::new(x2, vec![]).unwrap();
        let v = scalar_vols(&y);
        let s1 = permuted_ols(&d1, &v, 16, 42).unwrap();
        let s2 = permuted_ols(&d2, &v, 16, 42).unwrap();
        assert_abs_diff_eq!(s1.fwe_p.data[0], s2.fwe_p.data[0], epsilon = 1e-12);
        assert_abs_diff_eq!(s1.t_values.data[0], s2.t_values.data[0], epsilon = 1e-9);
    }

    #[test]
    fn contrast_equal_to_confound_is_degenerate() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let design = Design::new(x.clone(), vec![x]).unwrap();
        let y = scalar_vols(&[0.1, 0.4, 0.2, 0.9, 0.5, 0.3]);
        assert!(matches!(
            permuted_ols(&design, &y, 5, 0),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn fwe_p_lower_bound() {
        let x = vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9, 1.4, -2.0];
        let y = vec![0.31, -1.18, 0.72, 2.09, -0.38, 0.91, 1.39, -2.01];
        let design = Design::new(x, vec![]).unwrap();
        let sm = permuted_ols(&design, &scalar_vols(&y), 19, 3).unwrap();
        assert!(sm.fwe_p.data[0] >= 1.0 / 20.0);
    }

    #[test]
    fn effect_size_identical_groups_is_zero() {
        let g: Vec<Volume> = scalar_vols(&[1.0, 2.0, 3.0]);
        let sig = StatMap {
            t_values: Volume::zeros((1, 1, 1), [1.0; 3]),
            fwe_p: Volume::zeros((1, 1, 1), [1.0; 3]),
            n_perm: 1,
            seed: 0,
        };
        let d = effect_size_map(&g, &g.clone(), &sig, 0.05).unwrap();
        assert_eq!(d.data[0], 0.0);
    }

    #[test]
    fn effect_size_requires_two_per_group() {
        let a = scalar_vols(&[1.0]);
        let b = scalar_vols(&[2.0, 3.0]);
        let sig = StatMap {
            t_values: Volume::zeros((1, 1, 1), [1.0; 3]),
            fwe_p: Volume::zeros((1, 1, 1), [1.0; 3]),
            n_perm: 1,
            seed: 0,
        };
        assert!(effect_size_map(&a, &b, &sig, 0.05).is_err());
    }

    #[test]
    fn effect_size_unit_shift_gives_d_one() {
        // Within-group sd exactly 1, means differ by 1.
        let b: Vec<f64> = vec![0.0, 1.0, 2.0, 1.0, 0.0, 2.0, 1.5, 0.5];
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let sd = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (b.len() as f64 - 1.0)).sqrt();
        let bn: Vec<f64> = b.iter().map(|x| (x - mb) / sd).collect();
        let an: Vec<f64> = bn.iter().map(|x| x + 1.0).collect();
        let sig = StatMap {
            t_values: Volume::zeros((1, 1, 1), [1.0; 3]),
            fwe_p: Volume::zeros((1, 1, 1), [1.0; 3]),
            n_perm: 1,
            seed: 0,
        };
        let d = effect_size_map(&scalar_vols(&an), &scalar_vols(&bn), &sig, 0.05).unwrap();
        assert_abs_diff_eq!(d.data[0], 1.0, epsilon = 1e-12);
    }
}
