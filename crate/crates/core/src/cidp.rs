//! Confound-corrected image-derived phenotypes (IDPs): residualize a
//! target phenotype against principal components of the remaining,
//! family-excluded phenotypes so that its image correlates localize to
//! the target region, and validate the localization by region-masked
//! retraining.

use crate::error::{Error, Result};
use crate::net::{test_r2, train, Network, NetworkSpec, TrainConfig};
use crate::stats::{permuted_ols, Design, StatMap};
use crate::synthcohort::{IdpDescriptor, PhenotypeTable};
use crate::volcore::{dilate, mask_zero, RegionMask, Volume};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Phenotype columns eligible to explain the target away: everything
/// outside the target's region family.
#[derive(Debug, Clone)]
pub struct CorrectionSet {
    /// `columns[j][subject]`, length-m list of length-n columns.
    pub columns: Vec<Vec<f64>>,
    pub descriptors: Vec<IdpDescriptor>,
    pub excluded_family: Option<u32>,
}

/// Correlation-matrix PCA of a correction set (columns z-scored with
/// ddof-1 before the SVD, so eigenvalues sum to m).
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// `components[c][j]`: orthonormal direction rows, eigenvalue order.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing, non-negative.
    pub eigenvalues: Vec<f64>,
    /// `scores[c][subject]`: projections of the (standardized) data onto
    /// each component, cached at fit time.
    pub scores: Vec<Vec<f64>>,
}

/// A corrected IDP: standardized target residualized against the first
/// k PC scores.
#[derive(Debug, Clone)]
pub struct Cidp {
    pub values: Vec<f64>,
    pub target: IdpDescriptor,
    pub k_used: usize,
}

impl Cidp {
    /// Column name used when appending to a phenotype table / CSV.
    pub fn column_name(&self) -> String {
        format!("{}_cidp_k{}", self.target.name, self.k_used)
    }

    /// Append this corrected IDP as a new phenotype column.
    pub fn append_to(&self, table: &mut PhenotypeTable) {
        let mut d = self.target.clone();
        d.name = self.column_name();
        table.push_column(d, &self.values);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocalizationScore {
    pub score: f64,
    pub n_significant: usize,
    /// True when no voxel was significant and the score of 1 is a
    /// convention rather than a measurement.
    pub degenerate: bool,
}

/// Drop every column in the target's region family (including the target
/// itself).
pub fn build_correction_set(
    table: &PhenotypeTable,
    target: &IdpDescriptor,
) -> Result<CorrectionSet> {
    let mut columns = Vec::new();
    let mut descriptors = Vec::new();
    for (j, d) in table.descriptors.iter().enumerate() {
        let same_family = match (d.family_id, target.family_id) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if !same_family {
            columns.push(table.column(j));
            descriptors.push(d.clone());
        }
    }
    if columns.len() < 2 {
        return Err(Error::EmptyDomain(format!(
            "correction set for '{}' has {} columns; need at least 2",
            target.name,
            columns.len()
        )));
    }
    Ok(CorrectionSet { columns, descriptors, excluded_family: target.family_id })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

pub fn fit_pca(set: &CorrectionSet) -> Result<PcaModel> {
    let m = set.columns.len();
    let n = set.columns[0].len();
    if set.columns.iter().any(|c| c.len() != n) {
        return Err(Error::DimMismatch("correction-set column lengths differ".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 subjects for PCA".into()));
    }
    let mut means = Vec::with_capacity(m);
    let mut sds = Vec::with_capacity(m);
    for (j, col) in set.columns.iter().enumerate() {
        let (mu, sd) = mean_sd(col);
        if sd <= 0.0 {
            return Err(Error::DegenerateDesign(format!(
                "constant correction-set column '{}'",
                set.descriptors.get(j).map_or("?", |d| d.name.as_str())
            )));
        }
        means.push(mu);
        sds.push(sd);
    }
    // n x m standardized matrix.
    let z = DMatrix::from_fn(n, m, |i, j| (set.columns[j][i] - means[j]) / sds[j]);
    let svd = z.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::DegenerateDesign("svd failed".into()))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::DegenerateDesign("svd failed".into()))?;
    let k_max = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k_max).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut components = Vec::with_capacity(k_max);
    let mut eigenvalues = Vec::with_capacity(k_max);
    let mut scores = Vec::with_capacity(k_max);
    for &c in &order {
        let s = svd.singular_values[c];
        eigenvalues.push(s * s / (n as f64 - 1.0));
        let mut comp: Vec<f64> = (0..m).map(|j| vt[(c, j)]).collect();
        let mut score: Vec<f64> = (0..n).map(|i| u[(i, c)] * s).collect();
        // Sign convention: the largest-magnitude loading is positive.
        let lead = comp
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
            score.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(comp);
        scores.push(score);
    }
    Ok(PcaModel { means, sds, components, eigenvalues, scores })
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Serialize as a labelled CSV: means, sds, eigenvalues, then one
    /// row per component.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let row = |vals: &[f64]| {
            vals.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(",")
        };
        writeln!(f, "means,{}", row(&self.means))?;
        writeln!(f, "sds,{}", row(&self.sds))?;
        writeln!(f, "eigenvalues,{}", row(&self.eigenvalues))?;
        for (i, c) in self.components.iter().enumerate() {
            writeln!(f, "component_{i},{}", row(c))?;
        }
        Ok(())
    }
}

/// Standardize the target and regress it on [intercept, first k PC
/// scores]; the residuals are the corrected IDP.
pub fn residualize(target: &[f64], descriptor: &IdpDescriptor, model: &PcaModel, k: usize) -> Result<Cidp> {
    if k > model.n_components() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} components",
            model.n_components()
        )));
    }
    let n = target.len();
    if model.scores.iter().any(|s| s.len() != n) {
        return Err(Error::DimMismatch("target length vs PCA scores".into()));
    }
    let (mu, sd) = mean_sd(target);
    if sd <= 0.0 {
        return Err(Error::DegenerateDesign("constant target phenotype".into()));
    }
    let mut r: Vec<f64> = target.iter().map(|v| (v - mu) / sd).collect();
    // PC scores are mean-zero and mutually orthogonal, but run modified
    // Gram-Schmidt over [1, s_1..s_k] anyway for numerical safety.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    basis.push(vec![1.0 / (n as f64).sqrt(); n]);
    for s in model.scores.iter().take(k) {
        let mut v = s.clone();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    for b in &basis {
        let d: f64 = r.iter().zip(b).map(|(a, c)| a * c).sum();
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri -= d * bi;
        }
    }
    Ok(Cidp { values: r, target: descriptor.clone(), k_used: k })
}

/// Fraction of significant voxels that fall inside the (dilated) target
/// mask; 1 with a degenerate flag when nothing is significant.
pub fn localization_score(
    stat: &StatMap,
    mask: &RegionMask,
    alpha: f64,
    dilation_mm: f64,
) -> Result<LocalizationScore> {
    if stat.fwe_p.dims != mask.dims {
        return Err(Error::DimMismatch("stat map vs mask dims".into()));
    }
    let sig = stat.significant(alpha);
    let total = sig.count();
    if total == 0 {
        return Ok(LocalizationScore { score: 1.0, n_significant: 0, degenerate: true });
    }
    let dilated = dilate(mask, dilation_mm)?;
    let inside = sig
        .membership
        .iter()
        .zip(&dilated.membership)
        .filter(|(&s, &m)| s && m)
        .count();
    Ok(LocalizationScore {
        score: inside as f64 / total as f64,
        n_significant: total,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct KSweepEntry {
    pub k: usize,
    pub localization: LocalizationScore,
}

/// Sweep the k grid, score localization of each residualized target, and
/// pick the smallest k whose score is within 95% of the best.
#[allow(clippy::too_many_arguments)]
pub fn select_k(
    target: &[f64],
    descriptor: &IdpDescriptor,
    model: &PcaModel,
    volumes: &[Volume],
    mask: &RegionMask,
    grid: &[usize],
    n_perm: usize,
    alpha: f64,
    dilation_mm: f64,
    seed: u64,
) -> Result<(usize, Vec<KSweepEntry>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty k grid".into()));
    }
    let entries: Vec<KSweepEntry> = grid
        .par_iter()
        .map(|&k| {
            let cidp = residualize(target, descriptor, model, k)?;
            let design = Design::new(cidp.values, Vec::new())?;
            let stat = permuted_ols(&design, volumes, n_perm, seed)?;
            let loc = localization_score(&stat, mask, alpha, dilation_mm)?;
            Ok(KSweepEntry { k, localization: loc })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = entries
        .iter()
        .map(|e| e.localization.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = entries
        .iter()
        .filter(|e| e.localization.score >= 0.95 * best)
        .map(|e| e.k)
        .min()
        .expect("non-empty grid");
    Ok((chosen, entries))
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingResult {
    pub r2_full: f64,
    pub r2_masked: f64,
}

/// Train the same architecture on intact images and on images with the
/// (dilated) target region zeroed out; report held-out R^2 for both.
pub fn masking_experiment(
    volumes: &[Volume],
    targets: &[f64],
    mask: &RegionMask,
    dilation_mm: f64,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<MaskingResult> {
    let dilated = dilate(mask, dilation_mm)?;
    let masked: Vec<Volume> = volumes
        .iter()
        .map(|v| mask_zero(v, &dilated))
        .collect::<Result<Vec<_>>>()?;
    let r2_of = |vols: &[Volume]| -> Result<f64> {
        let mut net = Network::init(spec, cfg.seed)?;
        let outcome = train(&mut net, vols, targets, cfg)?;
        test_r2(&net, vols, targets, &outcome)
    };
    Ok(MaskingResult { r2_full: r2_of(volumes)?, r2_masked: r2_of(&masked)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::IdpKind;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn desc(name: &str, family: Option<u32>) -> IdpDescriptor {
        IdpDescriptor {
            name: name.into(),
            region_id: None,
            family_id: family,
            kind: IdpKind::MeanIntensity,
        }
    }

    fn table_from_columns(cols: Vec<(IdpDescriptor, Vec<f64>)>) -> PhenotypeTable {
        let n = cols[0].1.len();
        let mut values = vec![Vec::new(); n];
        let mut descriptors = Vec::new();
        for (d, c) in cols {
            descriptors.push(d);
            for (i, v) in c.into_iter().enumerate() {
                values[i].push(v);
            }
        }
        PhenotypeTable { values, descriptors }
    }

    fn set_of(columns: Vec<Vec<f64>>) -> CorrectionSet {
        let descriptors =
            (0..columns.len()).map(|j| desc(&format!("c{j}"), Some(j as u32))).collect();
        CorrectionSet { columns, descriptors, excluded_family: None }
    }

    #[test]
    fn correction_set_filters_target_family() {
        // 10 IDPs across 5 families, 2 per family; target in family 3.
        let cols: Vec<(IdpDescriptor, Vec<f64>)> = (0..10)
            .map(|j| {
                (
                    desc(&format!("idp{j}"), Some(j as u32 / 2)),
                    vec![j as f64, 1.0, 2.0, 3.0],
                )
            })
            .collect();
        let table = table_from_columns(cols);
        let target = desc("idp6", Some(3));
        let set = build_correction_set(&table, &target).unwrap();
        assert_eq!(set.columns.len(), 8);
        assert!(set.descriptors.iter().all(|d| d.family_id != Some(3)));
    }

    #[test]
    fn correction_set_keeps_all_when_family_absent() {
        let table = table_from_columns(vec![
            (desc("a", Some(0)), vec![1.0, 2.0, 3.0]),
            (desc("b", Some(1)), vec![2.0, 1.0, 0.0]),
        ]);
        let set = build_correction_set(&table, &desc("t", Some(9))).unwrap();
        assert_eq!(set.columns.len(), 2);
    }

    #[test]
    fn correction_set_errors_when_everything_excluded() {
        let table = table_from_columns(vec![
            (desc("a", Some(0)), vec![1.0, 2.0, 3.0]),
            (desc("b", Some(0)), vec![2.0, 1.0, 0.0]),
        ]);
        assert!(build_correction_set(&table, &desc("t", Some(0))).is_err());
    }

    #[test]
    fn pca_of_two_identical_columns_has_eigenvalues_two_and_zero() {
        let base = vec![1.0, -0.5, 2.0, 0.25, -1.75, 0.5];
        let set = set_of(vec![base.clone(), base.iter().map(|v| 3.0 * v + 1.0).collect()]);
        let model = fit_pca(&set).unwrap();
        assert_abs_diff_eq!(model.eigenvalues[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(model.eigenvalues[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn pca_components_orthonormal_and_eigenvalues_sum_to_m() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let shared: Vec<f64> = (0..200).map(|_| dist.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|j| {
                shared
                    .iter()
                    .map(|&s| 0.5 * s * (j as f64 + 1.0) + dist.sample(&mut rng))
                    .collect()
            })
            .collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        let m = model.components[0].len();
        for a in 0..model.n_components() {
            for b in 0..model.n_components() {
                let dot: f64 = (0..m)
                    .map(|j| model.components[a][j] * model.components[b][j])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, want, epsilon = 1e-8);
            }
        }
        assert_abs_diff_eq!(model.eigenvalues.iter().sum::<f64>(), m as f64, epsilon = 1e-6);
        for w in model.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn pca_independent_columns_eigenvalues_near_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let cols: Vec<Vec<f64>> =
            (0..4).map(|_| (0..10000).map(|_| dist.sample(&mut rng)).collect()).collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        for &l in &model.eigenvalues {
            assert!((0.9..=1.1).contains(&l), "eigenvalue {l}");
        }
    }

    #[test]
    fn pca_rejects_constant_column() {
        let set = set_of(vec![vec![1.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert!(fit_pca(&set).is_err());
    }

    #[test]
    fn pca_sign_convention_largest_loading_positive() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let cols: Vec<Vec<f64>> =
            (0..3).map(|_| (0..50).map(|_| dist.sample(&mut rng)).collect()).collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        for comp in &model.components {
            let lead = comp
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn residualize_k0_is_standardized_target() {
        let set = set_of(vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 1.0, 3.0, 2.0]]);
        let model = fit_pca(&set).unwrap();
        let target = vec![10.0, 20.0, 30.0, 40.0];
        let c = residualize(&target, &desc("t", None), &model, 0).unwrap();
        let (mu, sd) = mean_sd(&target);
        for (got, want) in c.values.iter().zip(target.iter().map(|v| (v - mu) / sd)) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_orthogonal_to_retained_scores() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let cols: Vec<Vec<f64>> =
            (0..4).map(|_| (0..100).map(|_| dist.sample(&mut rng)).collect()).collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        let target: Vec<f64> = (0..100).map(|_| dist.sample(&mut rng)).collect();
        let c = residualize(&target, &desc("t", None), &model, 3).unwrap();
        assert!(c.values.iter().sum::<f64>().abs() < 1e-10);
        for s in model.scores.iter().take(3) {
            let r = crate::synthcohort::pearson(&c.values, s);
            assert!(r.abs() < 1e-8, "corr {r}");
        }
    }

    #[test]
    fn constructed_mixture_residual_recovers_local_part() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n = 400;
        let shared: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        // Columns loaded on a single shared factor, plus small noise:
        // PC1 tracks `shared`.
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| shared.iter().map(|&s| s + 0.1 * dist.sample(&mut rng)).collect())
            .collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        let local: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let target: Vec<f64> = (0..n).map(|i| 2.0 * model.scores[0][i] + local[i]).collect();
        let c = residualize(&target, &desc("t", None), &model, 1).unwrap();
        let r = crate::synthcohort::pearson(&c.values, &local);
        assert!(r >= 0.99, "corr {r}");
    }

    #[test]
    fn residualize_k_out_of_range_errors() {
        let set = set_of(vec![vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0]]);
        let model = fit_pca(&set).unwrap();
        assert!(residualize(&[1.0, 2.0, 3.0], &desc("t", None), &model, 5).is_err());
    }

    fn stat_map_with_ps(dims: (usize, usize, usize), ps: Vec<f64>) -> StatMap {
        StatMap {
            t_values: Volume::zeros(dims, [1.0; 3]),
            fwe_p: Volume { dims, spacing_mm: [1.0; 3], data: ps },
            n_perm: 100,
            seed: 0,
        }
    }

    #[test]
    fn localization_score_counting_oracle() {
        let dims = (4, 1, 1);
        // Voxels 0,1,2 significant inside-candidates; voxel 3 significant too.
        let ps = vec![0.01, 0.01, 0.01, 0.01];
        let stat = stat_map_with_ps(dims, ps);
        let mut mask = RegionMask::empty(dims, [1.0; 3]);
        mask.set_at(0, 0, 0);
        mask.set_at(1, 0, 0);
        mask.set_at(2, 0, 0);
        let loc = localization_score(&stat, &mask, 0.05, 0.0).unwrap();
        assert_abs_diff_eq!(loc.score, 0.75, epsilon = 1e-12);
        assert_eq!(loc.n_significant, 4);
        assert!(!loc.degenerate);
    }

    #[test]
    fn localization_score_edge_cases_and_dilation_monotone() {
        let dims = (5, 1, 1);
        let mut mask = RegionMask::empty(dims, [1.0; 3]);
        mask.set_at(2, 0, 0);
        // Nothing significant -> 1 flagged.
        let none = stat_map_with_ps(dims, vec![0.9; 5]);
        let loc = localization_score(&none, &mask, 0.05, 0.0).unwrap();
        assert_eq!(loc.score, 1.0);
        assert!(loc.degenerate);
        // All inside -> 1; all outside -> 0.
        let inside = stat_map_with_ps(dims, vec![0.9, 0.9, 0.01, 0.9, 0.9]);
        assert_eq!(localization_score(&inside, &mask, 0.05, 0.0).unwrap().score, 1.0);
        let outside = stat_map_with_ps(dims, vec![0.01, 0.9, 0.9, 0.9, 0.01]);
        assert_eq!(localization_score(&outside, &mask, 0.05, 0.0).unwrap().score, 0.0);
        // Dilation can only increase the score.
        let mixed = stat_map_with_ps(dims, vec![0.01, 0.01, 0.01, 0.9, 0.9]);
        let s0 = localization_score(&mixed, &mask, 0.05, 0.0).unwrap().score;
        let s1 = localization_score(&mixed, &mask, 0.05, 1.0).unwrap().score;
        let s2 = localization_score(&mixed, &mask, 0.05, 2.0).unwrap().score;
        assert!(s1 >= s0 && s2 >= s1);
    }

    /// Tiny synthetic image set whose voxel block 0..2 tracks `local` and
    /// block 3..5 tracks `shared`.
    fn two_source_volumes(shared: &[f64], local: &[f64]) -> Vec<Volume> {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let dist = Normal::new(0.0, 0.05).unwrap();
        shared
            .iter()
            .zip(local)
            .map(|(&s, &l)| {
                let mut v = Volume::zeros((6, 1, 1), [1.0; 3]);
                for i in 0..3 {
                    v.data[i] = l + dist.sample(&mut rng);
                }
                for i in 3..6 {
                    v.data[i] = s + dist.sample(&mut rng);
                }
                v
            })
            .collect()
    }

    #[test]
    fn select_k_prefers_zero_for_already_local_target_and_singleton_grid() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let shared: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let local: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| shared.iter().map(|&s| s + 0.1 * dist.sample(&mut rng)).collect())
            .collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        let volumes = two_source_volumes(&shared, &local);
        let mut mask = RegionMask::empty((6, 1, 1), [1.0; 3]);
        for i in 0..3 {
            mask.set_at(i, 0, 0);
        }
        // A target that is already purely local: k = 0 wins.
        let (k, entries) = select_k(
            &local,
            &desc("t", None),
            &model,
            &volumes,
            &mask,
            &[0, 1, 2],
            200,
            0.05,
            0.0,
            7,
        )
        .unwrap();
        assert_eq!(k, 0);
        assert_eq!(entries.len(), 3);
        // Singleton grid short-circuits.
        let (k1, _) = select_k(
            &local,
            &desc("t", None),
            &model,
            &volumes,
            &mask,
            &[0],
            50,
            0.05,
            0.0,
            7,
        )
        .unwrap();
        assert_eq!(k1, 0);
    }

    #[test]
    fn select_k_removes_shared_component_from_mixture() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n = 40;
        let shared: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let local: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| shared.iter().map(|&s| s + 0.1 * dist.sample(&mut rng)).collect())
            .collect();
        let model = fit_pca(&set_of(cols)).unwrap();
        let volumes = two_source_volumes(&shared, &local);
        let mut mask = RegionMask::empty((6, 1, 1), [1.0; 3]);
        for i in 0..3 {
            mask.set_at(i, 0, 0);
        }
        // Target dominated by the shared factor, with a local part.
        let target: Vec<f64> = (0..n).map(|i| 3.0 * shared[i] + local[i]).collect();
        let (k, entries) = select_k(
            &target,
            &desc("t", None),
            &model,
            &volumes,
            &mask,
            &[0, 1],
            200,
            0.05,
            0.0,
            7,
        )
        .unwrap();
        assert_eq!(k, 1, "sweep: {:?}", entries.iter().map(|e| e.localization.score).collect::<Vec<_>>());
    }

    #[test]
    fn masking_experiment_directional_on_tiny_synthetic() {
        // Targets readable only from voxels 0..3 of an 8-voxel image.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n = 60;
        let targets: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let volumes: Vec<Volume> = targets
            .iter()
            .map(|&t| {
                let mut v = Volume::zeros((8, 1, 1), [1.0; 3]);
                for i in 0..4 {
                    v.data[i] = t + 0.05 * dist.sample(&mut rng);
                }
                for i in 4..8 {
                    v.data[i] = dist.sample(&mut rng);
                }
                v
            })
            .collect();
        let mut mask = RegionMask::empty((8, 1, 1), [1.0; 3]);
        for i in 0..4 {
            mask.set_at(i, 0, 0);
        }
        let spec = NetworkSpec {
            input_dims: (8, 1, 1),
            in_ch: 1,
            layers: vec![
                crate::net::LayerSpec::GlobalAvgPool,
                crate::net::LayerSpec::Dense { in_dim: 1, out_dim: 1, bias: true },
            ],
        };
        // A GAP + dense model can read the mean signal.
        let cfg = TrainConfig { steps: 800, batch_size: 8, max_lr: 0.05, seed: 3, ..Default::default() };
        let res = masking_experiment(&volumes, &targets, &mask, 0.0, &spec, &cfg).unwrap();
        assert!(res.r2_full > 0.5, "r2_full {}", res.r2_full);
        assert!(res.r2_masked < 0.2, "r2_masked {}", res.r2_masked);
    }

    #[test]
    fn cidp_appends_with_k_suffix() {
        let table_cols = vec![
            (desc("a", Some(0)), vec![1.0, 2.0, 3.0, 4.0]),
            (desc("b", Some(1)), vec![4.0, 3.0, 1.0, 2.0]),
        ];
        let mut table = table_from_columns(table_cols);
        let set = build_correction_set(&table, &desc("t", Some(9))).unwrap();
        let model = fit_pca(&set).unwrap();
        let c = residualize(&[5.0, 6.0, 8.0, 7.0], &desc("t", Some(9)), &model, 1).unwrap();
        c.append_to(&mut table);
        assert_eq!(table.descriptors.last().unwrap().name, "t_cidp_k1");
        assert_eq!(table.values[0].len(), 3);
    }

    #[test]
    fn pca_model_csv_roundtrip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let set = set_of(vec![vec![1.0, 2.0, 3.0, 5.0], vec![2.0, 1.0, 4.0, 3.0]]);
        let model = fit_pca(&set).unwrap();
        let p = dir.path().join("pca.csv");
        model.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("means,"));
        assert!(lines[1].starts_with("sds,"));
        assert!(lines[2].starts_with("eigenvalues,"));
        assert_eq!(lines.len(), 3 + model.n_components());
    }
}
