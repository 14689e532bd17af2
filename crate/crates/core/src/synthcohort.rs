//! Synthetic volumetric cohorts in which the causal source of every
//! phenotype is known by construction.
//!
//! Images are rendered once per subject from a smooth template plus
//! region interiors; phenotypes (mean intensity, volume, lesion load,
//! age-like scores) are then *measured from the rendered image*, never
//! copied from the generating latents. Shared global factors enter both
//! intensity and geometry, giving raw phenotypes the widespread
//! cross-region correlations the correction stage must remove.

use crate::error::{Error, Result};
use crate::volcore::{Atlas, Laterality, RegionInfo, RegionMask, Volume};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Realized region radii are clamped to this multiplier range around the
/// base radius; non-overlap is validated at the upper bound.
pub const RADIUS_CLAMP: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

/// Blueprint for one atlas region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: u32,
    pub family_id: u32,
    pub laterality: Laterality,
    pub shape: Shape,
    pub center_mm: [f64; 3],
    pub base_radius_mm: f64,
    /// Constant intensity offset of the region interior over the template.
    pub contrast: f64,
    /// Standard deviation of the per-subject local intensity latent.
    pub tau: f64,
    /// Scale of the per-subject local radius jitter (fraction of radius).
    pub rho: f64,
}

/// Per-global-factor effect sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorLoading {
    /// Intensity added to every region interior per unit of the factor.
    pub intensity_gain: f64,
    /// Image-wide linear gradient along x per unit of the factor.
    pub spatial_gradient_amplitude: f64,
    /// Fractional change of every region radius per unit of the factor.
    pub global_radius_scale: f64,
}

/// Smooth baseline image: constant plus a fixed linear gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub base: f64,
    pub gradient_per_mm: [f64; 3],
}

impl Template {
    pub fn value_at(&self, pos_mm: [f64; 3]) -> f64 {
        self.base
            + self.gradient_per_mm[0] * pos_mm[0]
            + self.gradient_per_mm[1] * pos_mm[1]
            + self.gradient_per_mm[2] * pos_mm[2]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub dims: (usize, usize, usize),
    pub spacing_mm: [f64; 3],
    pub regions: Vec<RegionSpec>,
    pub loadings: Vec<FactorLoading>,
    pub noise_sd: f64,
    pub template: Template,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidSpec("n_subjects must be >= 1".into()));
        }
        if self.loadings.is_empty() {
            return Err(Error::InvalidSpec("need at least one global factor".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidSpec("noise_sd must be >= 0".into()));
        }
        for r in &self.regions {
            if r.tau < 0.0 || r.rho < 0.0 || r.base_radius_mm <= 0.0 {
                return Err(Error::InvalidSpec(format!("region {} parameters", r.id)));
            }
        }
        // Non-overlap at the radius clamp upper bound.
        for (i, a) in self.regions.iter().enumerate() {
            for b in self.regions.iter().skip(i + 1) {
                let d: f64 = a
                    .center_mm
                    .iter()
                    .zip(&b.center_mm)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // Box shapes reach sqrt(3) * r at the corners.
                let reach = |r: &RegionSpec| {
                    let m = r.base_radius_mm * RADIUS_CLAMP.1;
                    match r.shape {
                        Shape::Sphere => m,
                        Shape::Box => m * 3f64.sqrt(),
                    }
                };
                if d <= reach(a) + reach(b) {
                    return Err(Error::InvalidSpec(format!(
                        "regions {} and {} can overlap after jitter",
                        a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coordinates of a voxel center in mm.
    pub fn voxel_center_mm(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) * self.spacing_mm[0],
            (y as f64 + 0.5) * self.spacing_mm[1],
            (z as f64 + 0.5) * self.spacing_mm[2],
        ]
    }

    /// Canonical atlas: region labels rendered at base radii.
    pub fn atlas(&self) -> Atlas {
        let (nx, ny, nz) = self.dims;
        let mut labels = vec![0u32; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = self.voxel_center_mm(x, y, z);
                    for r in &self.regions {
                        if region_contains(r, r.base_radius_mm, pos) {
                            labels[x + nx * (y + ny * z)] = r.id;
                            break;
                        }
                    }
                }
            }
        }
        Atlas {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            labels,
            regions: self
                .regions
                .iter()
                .map(|r| RegionInfo {
                    id: r.id,
                    name: format!("region_{}", r.id),
                    laterality: r.laterality,
                    family_id: r.family_id,
                })
                .collect(),
        }
    }
}

fn region_contains(r: &RegionSpec, radius_mm: f64, pos_mm: [f64; 3]) -> bool {
    let d = [
        pos_mm[0] - r.center_mm[0],
        pos_mm[1] - r.center_mm[1],
        pos_mm[2] - r.center_mm[2],
    ];
    match r.shape {
        Shape::Sphere => d.iter().map(|x| x * x).sum::<f64>() <= radius_mm * radius_mm,
        Shape::Box => d.iter().all(|x| x.abs() <= radius_mm),
    }
}

/// Kinds of scalar phenotype measured from the rendered data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdpKind {
    MeanIntensity,
    Volume,
    LesionLoad,
    AgeLike,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdpDescriptor {
    pub name: String,
    pub region_id: Option<u32>,
    pub family_id: Option<u32>,
    pub kind: IdpKind,
}

/// Subject-by-IDP matrix with per-column descriptors.
#[derive(Debug, Clone)]
pub struct PhenotypeTable {
    /// `values[subject][idp]`
    pub values: Vec<Vec<f64>>,
    pub descriptors: Vec<IdpDescriptor>,
}

impl PhenotypeTable {
    pub fn n_subjects(&self) -> usize {
        self.values.len()
    }

    pub fn n_idps(&self) -> usize {
        self.descriptors.len()
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[idx]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.descriptors.iter().position(|d| d.name == name)?;
        Some(self.column(idx))
    }

    pub fn descriptor_by_name(&self, name: &str) -> Option<&IdpDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn push_column(&mut self, descriptor: IdpDescriptor, values: &[f64]) {
        assert_eq!(values.len(), self.values.len());
        self.descriptors.push(descriptor);
        for (row, &v) in self.values.iter_mut().zip(values) {
            row.push(v);
        }
    }
}

/// One generated subject: rendered image, realized masks and latents.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: usize,
    pub volume: Volume,
    /// Realized (post-jitter) mask per region, in spec region order.
    pub region_masks: Vec<RegionMask>,
    pub global_factors: Vec<f64>,
    /// Per-region intensity latents (delta_r).
    pub intensity_latents: Vec<f64>,
    /// Per-region radius jitter draws (u_r).
    pub radius_latents: Vec<f64>,
    pub lesion_mask: Option<RegionMask>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub subjects: Vec<Subject>,
    pub phenotypes: PhenotypeTable,
    pub atlas: Atlas,
}

/// Synthetic lesion task parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionParams {
    /// Mean number of lesion blobs per subject (Poisson rate).
    pub rate: f64,
    pub radius_range_mm: (f64, f64),
    pub intensity_boost: f64,
    /// Axis-aligned box of eligible blob centers, in mm.
    pub zone_min_mm: [f64; 3],
    pub zone_max_mm: [f64; 3],
}

impl LesionParams {
    fn validate(&self, spec: &CohortSpec) -> Result<()> {
        let extent = [
            spec.dims.0 as f64 * spec.spacing_mm[0],
            spec.dims.1 as f64 * spec.spacing_mm[1],
            spec.dims.2 as f64 * spec.spacing_mm[2],
        ];
        for a in 0..3 {
            if self.zone_min_mm[a] < 0.0
                || self.zone_max_mm[a] > extent[a]
                || self.zone_min_mm[a] >= self.zone_max_mm[a]
            {
                return Err(Error::InvalidSpec("lesion zone outside the volume".into()));
            }
        }
        if self.rate < 0.0 || self.radius_range_mm.0 > self.radius_range_mm.1 {
            return Err(Error::InvalidSpec("lesion rate/radius parameters".into()));
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, subject_id: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(subject_id as u64 + 1);
    rng
}

fn render_subject(spec: &CohortSpec, id: usize, lesions: Option<&LesionParams>) -> Subject {
    let mut rng = subject_rng(spec.seed, id);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let g: Vec<f64> = (0..spec.loadings.len()).map(|_| std_normal.sample(&mut rng)).collect();
    let radius_latents: Vec<f64> =
        spec.regions.iter().map(|_| std_normal.sample(&mut rng)).collect();
    let intensity_latents: Vec<f64> = spec
        .regions
        .iter()
        .map(|r| if r.tau > 0.0 { r.tau * std_normal.sample(&mut rng) } else { 0.0 })
        .collect();

    let (nx, ny, nz) = spec.dims;
    let n_vox = nx * ny * nz;

    // Realized region radii.
    let global_scale: f64 = g
        .iter()
        .zip(&spec.loadings)
        .map(|(gf, l)| gf * l.global_radius_scale)
        .sum();
    let radii: Vec<f64> = spec
        .regions
        .iter()
        .zip(&radius_latents)
        .map(|(r, &u)| {
            r.base_radius_mm * (1.0 + global_scale + r.rho * u).clamp(RADIUS_CLAMP.0, RADIUS_CLAMP.1)
        })
        .collect();

    let gain: f64 = g
        .iter()
        .zip(&spec.loadings)
        .map(|(gf, l)| gf * l.intensity_gain)
        .sum();
    let grad_amp: f64 = g
        .iter()
        .zip(&spec.loadings)
        .map(|(gf, l)| gf * l.spatial_gradient_amplitude)
        .sum();
    let extent_x = nx as f64 * spec.spacing_mm[0];

    let mut data = vec![0.0; n_vox];
    let mut region_masks: Vec<RegionMask> = spec
        .regions
        .iter()
        .map(|_| RegionMask::empty(spec.dims, spec.spacing_mm))
        .collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = spec.voxel_center_mm(x, y, z);
                let i = x + nx * (y + ny * z);
                let mut v = spec.template.value_at(pos) + grad_amp * (pos[0] / extent_x - 0.5);
                for (ri, r) in spec.regions.iter().enumerate() {
                    if region_contains(r, radii[ri], pos) {
                        v += r.contrast + gain + intensity_latents[ri];
                        region_masks[ri].membership[i] = true;
                        break;
                    }
                }
                data[i] = v;
            }
        }
    }

    // Lesions are stamped before voxel noise.
    let lesion_mask = lesions.map(|p| {
        let mut mask = RegionMask::empty(spec.dims, spec.spacing_mm);
        let k = if p.rate > 0.0 {
            Poisson::new(p.rate).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..k {
            let center = [
                rng.gen_range(p.zone_min_mm[0]..p.zone_max_mm[0]),
                rng.gen_range(p.zone_min_mm[1]..p.zone_max_mm[1]),
                rng.gen_range(p.zone_min_mm[2]..p.zone_max_mm[2]),
            ];
            let radius = if p.radius_range_mm.1 > p.radius_range_mm.0 {
                rng.gen_range(p.radius_range_mm.0..p.radius_range_mm.1)
            } else {
                p.radius_range_mm.0
            };
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let pos = spec.voxel_center_mm(x, y, z);
                        let d2: f64 = pos
                            .iter()
                            .zip(&center)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum();
                        if d2 <= radius * radius {
                            mask.membership[x + nx * (y + ny * z)] = true;
                        }
                    }
                }
            }
        }
        for (v, &m) in data.iter_mut().zip(&mask.membership) {
            if m {
                *v += p.intensity_boost;
            }
        }
        mask
    });

    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).unwrap();
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }

    Subject {
        id,
        volume: Volume { dims: spec.dims, spacing_mm: spec.spacing_mm, data },
        region_masks,
        global_factors: g,
        intensity_latents,
        radius_latents,
        lesion_mask,
    }
}

/// Measure mean-intensity and volume IDPs from a rendered image and its
/// realized region masks. This is the only path phenotype values take.
pub fn measure_idps(spec: &CohortSpec, volume: &Volume, masks: &[RegionMask]) -> Vec<f64> {
    let voxvol = volume.voxel_volume_mm3();
    let mut out = Vec::with_capacity(2 * spec.regions.len());
    for mask in masks {
        let n = mask.count();
        let mean = if n == 0 {
            0.0
        } else {
            volume
                .data
                .iter()
                .zip(&mask.membership)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .sum::<f64>()
                / n as f64
        };
        out.push(mean);
        out.push(n as f64 * voxvol);
    }
    out
}

pub fn idp_descriptors(spec: &CohortSpec) -> Vec<IdpDescriptor> {
    spec.regions
        .iter()
        .flat_map(|r| {
            [
                IdpDescriptor {
                    name: format!("region_{}_mean_intensity", r.id),
                    region_id: Some(r.id),
                    family_id: Some(r.family_id),
                    kind: IdpKind::MeanIntensity,
                },
                IdpDescriptor {
                    name: format!("region_{}_volume", r.id),
                    region_id: Some(r.id),
                    family_id: Some(r.family_id),
                    kind: IdpKind::Volume,
                },
            ]
        })
        .collect()
}

fn generate(spec: &CohortSpec, lesions: Option<&LesionParams>) -> Result<Cohort> {
    spec.validate()?;
    if let Some(p) = lesions {
        p.validate(spec)?;
    }
    let subjects: Vec<Subject> = (0..spec.n_subjects)
        .into_par_iter()
        .map(|id| render_subject(spec, id, lesions))
        .collect();
    let mut descriptors = idp_descriptors(spec);
    let mut values: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| measure_idps(spec, &s.volume, &s.region_masks))
        .collect();
    if lesions.is_some() {
        descriptors.push(IdpDescriptor {
            name: "lesion_load".into(),
            region_id: None,
            family_id: None,
            kind: IdpKind::LesionLoad,
        });
        for (row, s) in values.iter_mut().zip(&subjects) {
            let load = s.lesion_mask.as_ref().map_or(0.0, |m| {
                m.count() as f64 * s.volume.voxel_volume_mm3()
            });
            row.push(load);
        }
    }
    Ok(Cohort {
        spec: spec.clone(),
        subjects,
        phenotypes: PhenotypeTable { values, descriptors },
        atlas: spec.atlas(),
    })
}

/// Generate a cohort of rendered subjects, their measured phenotype table
/// and the canonical atlas. Same spec + seed gives identical output.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    generate(spec, None)
}

/// Generate a cohort with synthetic hyperintense lesion blobs and a
/// `lesion_load` phenotype; each subject carries its own lesion mask.
pub fn generate_lesion_task(spec: &CohortSpec, params: &LesionParams) -> Result<Cohort> {
    generate(spec, Some(params))
}

/// Scalar target driven by a known set of regions: a weighted sum of the
/// standardized local intensity latents plus noise. Returns the phenotype
/// values and echoes the reference region set.
pub fn generate_age_task(
    cohort: &Cohort,
    region_set: &[u32],
    weights: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<u32>)> {
    if region_set.len() < 2 {
        return Err(Error::InvalidArgument("age task needs >= 2 regions".into()));
    }
    if region_set.len() != weights.len() {
        return Err(Error::InvalidArgument("weights length != region set".into()));
    }
    let spec = &cohort.spec;
    let indices: Vec<usize> = region_set
        .iter()
        .map(|id| {
            spec.regions
                .iter()
                .position(|r| r.id == *id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown region {id}")))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let values: Vec<f64> = cohort
        .subjects
        .iter()
        .map(|s| {
            let mut v = 0.0;
            for (&ri, &w) in indices.iter().zip(weights) {
                let tau = spec.regions[ri].tau;
                let std = if tau > 0.0 { s.intensity_latents[ri] / tau } else { 0.0 };
                v += w * std;
            }
            v + noise_sd * noise.sample(&mut rng)
        })
        .collect();
    Ok((values, region_set.to_vec()))
}

/// Desk-scale default: six spherical regions in three families on a cubic
/// grid, one global factor driving intensity, geometry and a spatial
/// gradient.
pub fn default_spec(n_subjects: usize, edge: usize, seed: u64) -> CohortSpec {
    let e = edge as f64;
    let lo = e * 0.28;
    let hi = e * 0.72;
    let mid = e * 0.5;
    let centers = [
        [lo, lo, lo],
        [hi, lo, lo],
        [lo, hi, mid],
        [hi, hi, mid],
        [lo, mid, hi],
        [hi, mid, hi],
    ];
    let radius = e * 0.10;
    CohortSpec {
        n_subjects,
        dims: (edge, edge, edge),
        spacing_mm: [1.0; 3],
        regions: centers
            .iter()
            .enumerate()
            .map(|(i, &c)| RegionSpec {
                id: i as u32 + 1,
                family_id: (i / 2) as u32 + 1,
                laterality: if i % 2 == 0 { Laterality::Left } else { Laterality::Right },
                shape: Shape::Sphere,
                center_mm: c,
                base_radius_mm: radius,
                contrast: 1.0,
                tau: 0.5,
                rho: 0.12,
            })
            .collect(),
        loadings: vec![FactorLoading {
            intensity_gain: 1.0,
            spatial_gradient_amplitude: 1.0,
            global_radius_scale: 0.08,
        }],
        noise_sd: 0.2,
        template: Template { base: 1.0, gradient_per_mm: [0.0; 3] },
        seed,
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn seeded_determinism() {
        let spec = default_spec(8, 16, 7);
        let a = generate_cohort(&spec).unwrap();
        let b = generate_cohort(&spec).unwrap();
        assert_eq!(a.phenotypes.values, b.phenotypes.values);
        assert_eq!(a.subjects[3].volume.data, b.subjects[3].volume.data);
    }

    #[test]
    fn noiseless_mean_intensity_matches_analytic_template() {
        let mut spec = default_spec(4, 16, 3);
        spec.noise_sd = 0.0;
        for r in &mut spec.regions {
            r.tau = 0.0;
            r.rho = 0.0;
            r.contrast = 0.0;
        }
        spec.loadings = vec![FactorLoading {
            intensity_gain: 0.0,
            spatial_gradient_amplitude: 0.0,
            global_radius_scale: 0.0,
        }];
        spec.template = Template { base: 2.0, gradient_per_mm: [0.1, 0.0, -0.05] };
        let cohort = generate_cohort(&spec).unwrap();
        // Analytic oracle: average the template over mask voxel centers.
        for s in &cohort.subjects {
            for (ri, mask) in s.region_masks.iter().enumerate() {
                let mut want = 0.0;
                let mut n = 0usize;
                let (nx, ny, nz) = spec.dims;
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            if mask.membership[x + nx * (y + ny * z)] {
                                want += spec.template.value_at(spec.voxel_center_mm(x, y, z));
                                n += 1;
                            }
                        }
                    }
                }
                want /= n as f64;
                let got = cohort.phenotypes.values[s.id][2 * ri];
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn raw_idps_correlate_with_gain_factor() {
        let spec = default_spec(500, 16, 11);
        let cohort = generate_cohort(&spec).unwrap();
        let g0: Vec<f64> = cohort.subjects.iter().map(|s| s.global_factors[0]).collect();
        for (i, d) in cohort.phenotypes.descriptors.iter().enumerate() {
            if d.kind == IdpKind::MeanIntensity {
                let col = cohort.phenotypes.column(i);
                assert!(
                    pearson(&col, &g0).abs() >= 0.3,
                    "IDP {} |r| = {}",
                    d.name,
                    pearson(&col, &g0).abs()
                );
            }
        }
    }

    #[test]
    fn region_masks_disjoint_and_phenotypes_recomputable() {
        let spec = default_spec(12, 16, 5);
        let cohort = generate_cohort(&spec).unwrap();
        for s in &cohort.subjects {
            let mut seen = vec![false; s.volume.len()];
            for m in &s.region_masks {
                for (i, &b) in m.membership.iter().enumerate() {
                    if b {
                        assert!(!seen[i], "overlapping region masks");
                        seen[i] = true;
                    }
                }
            }
            let recomputed = measure_idps(&spec, &s.volume, &s.region_masks);
            assert_eq!(recomputed, cohort.phenotypes.values[s.id]);
        }
    }

    #[test]
    fn lesion_rate_zero_gives_empty_masks() {
        let spec = default_spec(6, 16, 2);
        let params = LesionParams {
            rate: 0.0,
            radius_range_mm: (1.0, 2.0),
            intensity_boost: 3.0,
            zone_min_mm: [4.0; 3],
            zone_max_mm: [12.0; 3],
        };
        let cohort = generate_lesion_task(&spec, &params).unwrap();
        let li = cohort.phenotypes.descriptors.len() - 1;
        for s in &cohort.subjects {
            assert_eq!(s.lesion_mask.as_ref().unwrap().count(), 0);
            assert_eq!(cohort.phenotypes.values[s.id][li], 0.0);
        }
    }

    #[test]
    fn unit_radius_blob_covers_seven_voxels() {
        // A ball of radius exactly one voxel spacing centered on a voxel
        // center covers the center plus 6 face neighbors (offset oracle).
        let spec = default_spec(1, 16, 2);
        let mut mask = RegionMask::empty(spec.dims, spec.spacing_mm);
        let center = spec.voxel_center_mm(8, 8, 8);
        let (nx, ny, nz) = spec.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = spec.voxel_center_mm(x, y, z);
                    let d2: f64 =
                        pos.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
                    if d2 <= 1.0 {
                        mask.set_at(x, y, z);
                    }
                }
            }
        }
        let offsets = crate::volcore::ball_offsets(1.0, spec.spacing_mm);
        assert_eq!(mask.count(), offsets.len());
        assert_eq!(mask.count(), 7);
    }

    #[test]
    fn mean_lesion_load_matches_analytic_expectation() {
        let mut spec = default_spec(1000, 12, 9);
        spec.regions.clear();
        spec.noise_sd = 0.0;
        let params = LesionParams {
            rate: 1.5,
            radius_range_mm: (1.0, 2.5),
            intensity_boost: 2.0,
            zone_min_mm: [3.0; 3],
            zone_max_mm: [9.0; 3],
        };
        let cohort = generate_lesion_task(&spec, &params).unwrap();
        let li = cohort.phenotypes.descriptors.len() - 1;
        let mean_load: f64 = cohort
            .phenotypes
            .values
            .iter()
            .map(|row| row[li])
            .sum::<f64>()
            / spec.n_subjects as f64;
        // Analytic expectation of a single blob's voxel count, averaged
        // over the continuous radius distribution and sub-voxel center
        // placement, via fine Monte Carlo-free grid quadrature over the
        // (radius, fractional offset) space.
        let mut acc = 0.0;
        let mut cnt = 0usize;
        let steps = 20;
        for ir in 0..steps {
            let r = params.radius_range_mm.0
                + (ir as f64 + 0.5) / steps as f64
                    * (params.radius_range_mm.1 - params.radius_range_mm.0);
            for ox in 0..4 {
                for oy in 0..4 {
                    for oz in 0..4 {
                        let c = [
                            0.125 + ox as f64 * 0.25,
                            0.125 + oy as f64 * 0.25,
                            0.125 + oz as f64 * 0.25,
                        ];
                        let reach = r.ceil() as i64 + 1;
                        let mut n = 0;
                        for dz in -reach..=reach {
                            for dy in -reach..=reach {
                                for dx in -reach..=reach {
                                    let p = [
                                        dx as f64 + 0.5,
                                        dy as f64 + 0.5,
                                        dz as f64 + 0.5,
                                    ];
                                    let d2: f64 = p
                                        .iter()
                                        .zip(&c)
                                        .map(|(a, b)| (a - b).powi(2))
                                        .sum();
                                    if d2 <= r * r {
                                        n += 1;
                                    }
                                }
                            }
                        }
                        acc += n as f64;
                        cnt += 1;
                    }
                }
            }
        }
        let expected_blob_voxels = acc / cnt as f64;
        // Overlap between blobs makes the union slightly smaller than the
        // sum; with this zone (~6^3 voxels of placements vs blobs of ~15
        // voxels) the correction is within the 10% tolerance.
        let expected = params.rate * expected_blob_voxels * spec.spacing_mm[0].powi(3);
        let rel = (mean_load - expected).abs() / expected;
        assert!(rel < 0.10, "mean load {mean_load} vs expectation {expected}");
    }

    #[test]
    fn age_task_single_dominant_region_rank_correlates() {
        let spec = default_spec(64, 16, 13);
        let cohort = generate_cohort(&spec).unwrap();
        let (vals, set) =
            generate_age_task(&cohort, &[1, 2], &[1.0, 0.0], 0.0, 99).unwrap();
        assert_eq!(set, vec![1, 2]);
        let latents: Vec<f64> = cohort
            .subjects
            .iter()
            .map(|s| s.intensity_latents[0])
            .collect();
        // Monotone transform of the dominant latent: perfect correlation.
        assert!(pearson(&vals, &latents) > 0.999999);
    }

    #[test]
    fn age_task_ols_recovers_two_region_weights() {
        let spec = default_spec(4000, 16, 17);
        let cohort = generate_cohort(&spec).unwrap();
        let (w1, w2) = (0.8, 0.5);
        let (vals, _) =
            generate_age_task(&cohort, &[1, 4], &[w1, w2], 0.05, 123).unwrap();
        // OLS oracle on the two standardized latents.
        let x1: Vec<f64> = cohort
            .subjects
            .iter()
            .map(|s| s.intensity_latents[0] / cohort.spec.regions[0].tau)
            .collect();
        let x2: Vec<f64> = cohort
            .subjects
            .iter()
            .map(|s| s.intensity_latents[3] / cohort.spec.regions[3].tau)
            .collect();
        // Solve the 2x2 normal equations directly.
        let n = vals.len() as f64;
        let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let m1 = x1.iter().sum::<f64>() / n;
        let m2 = x2.iter().sum::<f64>() / n;
        let my = vals.iter().sum::<f64>() / n;
        for i in 0..vals.len() {
            let (a, b, y) = (x1[i] - m1, x2[i] - m2, vals[i] - my);
            s11 += a * a;
            s12 += a * b;
            s22 += b * b;
            s1y += a * y;
            s2y += b * y;
        }
        let det = s11 * s22 - s12 * s12;
        let b1 = (s22 * s1y - s12 * s2y) / det;
        let b2 = (s11 * s2y - s12 * s1y) / det;
        assert!((b1 - w1).abs() / w1 < 0.05, "b1 = {b1}");
        assert!((b2 - w2).abs() / w2 < 0.05, "b2 = {b2}");
    }

    #[test]
    fn overlapping_blueprint_rejected() {
        let mut spec = default_spec(2, 16, 1);
        spec.regions[1].center_mm = spec.regions[0].center_mm;
        assert!(matches!(generate_cohort(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_weight_age_task_is_pure_noise() {
        let spec = default_spec(128, 16, 21);
        let cohort = generate_cohort(&spec).unwrap();
        let (vals, _) = generate_age_task(&cohort, &[1, 2], &[0.0, 0.0], 1.0, 5).unwrap();
        for (ri, _) in cohort.spec.regions.iter().enumerate() {
            let latents: Vec<f64> = cohort
                .subjects
                .iter()
                .map(|s| s.intensity_latents[ri])
                .collect();
            assert!(pearson(&vals, &latents).abs() < 0.25);
        }
    }
}
