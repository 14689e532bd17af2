//! End-to-end experiment orchestration: TOML experiment configuration,
//! cohort generation, phenotype correction, training, explanation,
//! scoring from stored artifacts, and report rendering, plus the on-disk
//! run layout used by the command-line tool.

use crate::attribution::{explain, Baseline, LrpComposite, Method};
use crate::cidp::{build_correction_set, fit_pca, residualize, select_k};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, fpr_flag, overlap_topk, postprocess, region_scores, rma, tpr_hit,
    write_aggregate_csv, write_scores_csv, AggregateRow, PostprocessConfig, SubjectScore,
};
use crate::net::{network_hash, save_checkpoint, train, Loss, Network, NetworkSpec, TrainConfig};
use crate::synthcohort::{
    default_spec, generate_age_task, generate_cohort, generate_lesion_task, Cohort, LesionParams,
};
use crate::volcore::{
    read_atlas, read_volume, write_atlas, write_volume, Atlas, RegionMask, Volume,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// --- Configuration --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Localized,
    ArtificialDisease,
    Lesion,
    Plausibility,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "localized" => Ok(Stage::Localized),
            "artificial_disease" => Ok(Stage::ArtificialDisease),
            "lesion" => Ok(Stage::Lesion),
            "plausibility" => Ok(Stage::Plausibility),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Localized => "localized",
            Stage::ArtificialDisease => "artificial_disease",
            Stage::Lesion => "lesion",
            Stage::Plausibility => "plausibility",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSection {
    pub n_subjects: usize,
    pub edge: usize,
    pub seed: u64,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self { n_subjects: 512, edge: 24, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSection {
    pub name: String,
    /// Localized stage: phenotype columns to localize.
    pub targets: Vec<String>,
    /// Principal-component counts swept when choosing the correction depth.
    pub k_grid: Vec<usize>,
    pub n_perm: usize,
    pub alpha: f64,
    /// Mask dilation used by the correction-depth localization score.
    pub localization_dilation_mm: f64,
    /// Artificial-disease stage: the two phenotype columns defining cases.
    pub disease_targets: Vec<String>,
    /// Plausibility stage: regions driving the synthetic scalar target.
    pub reference_regions: Vec<u32>,
    pub plausibility_noise_sd: f64,
    /// Lesion stage parameters.
    pub lesion_rate: f64,
    pub lesion_radius_mm: (f64, f64),
    pub lesion_intensity_boost: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            name: "localized".into(),
            targets: (1..=4).map(|i| format!("region_{i}_mean_intensity")).collect(),
            k_grid: vec![0, 1],
            n_perm: 64,
            alpha: 0.05,
            localization_dilation_mm: 2.0,
            disease_targets: vec![
                "region_1_mean_intensity".into(),
                "region_4_mean_intensity".into(),
            ],
            reference_regions: vec![1, 2, 3, 4],
            plausibility_noise_sd: 0.5,
            lesion_rate: 2.0,
            lesion_radius_mm: (1.5, 3.0),
            lesion_intensity_boost: 2.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection {
    pub base_ch: usize,
    pub n_blocks: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { base_ch: 4, n_blocks: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodsSection {
    pub names: Vec<String>,
    pub smoothgrad_noise: f64,
    pub smoothgrad_samples: usize,
}

pub fn default_method_names() -> Vec<String> {
    [
        "gradient",
        "input_x_gradient",
        "smoothgrad",
        "guided_backprop",
        "excitation_backprop",
        "gradcam",
        "guided_gradcam",
        "deeplift",
        "lrp_epsilon",
        "lrp_epsilon_alpha2beta1",
        "lrp_epsilon_alpha2beta1_flat",
        "lrp_epsilon_plus",
        "lrp_epsilon_plus_flat",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self { names: default_method_names(), smoothgrad_noise: 0.1, smoothgrad_samples: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub rma_dilation_mm: f64,
    pub fpr_dilation_mm: f64,
    pub top_k: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { rma_dilation_mm: 2.0, fpr_dilation_mm: 20.0, top_k: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedsSection {
    pub replicates: Vec<u64>,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { replicates: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    /// Named task groups for aggregate tables; empty means one group of all tasks.
    pub groups: BTreeMap<String, Vec<String>>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { groups: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Subjects from the test split explained and scored per task/seed.
    pub n_eval_subjects: usize,
    pub cohort: CohortSection,
    pub stage: StageSection,
    pub net: NetSection,
    pub train: TrainConfig,
    pub methods: MethodsSection,
    pub postprocess: PostprocessConfig,
    pub metrics: MetricsSection,
    pub seeds: SeedsSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            n_eval_subjects: 8,
            cohort: CohortSection::default(),
            stage: StageSection::default(),
            net: NetSection::default(),
            // Shorter schedule than the library default: twelve nets are
            // trained per default run and one core must stay inside the
            // pipeline budget.
            train: TrainConfig { steps: 400, ..TrainConfig::default() },
            methods: MethodsSection::default(),
            postprocess: PostprocessConfig::default(),
            metrics: MetricsSection::default(),
            seeds: SeedsSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn stage_kind(&self) -> Result<Stage> {
        self.stage.name.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let stage = self.stage_kind()?;
        self.postprocess.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.replicates.is_empty() {
            return Err(Error::Config("at least one seed replicate required".into()));
        }
        if self.n_eval_subjects == 0 {
            return Err(Error::Config("n_eval_subjects must be >= 1".into()));
        }
        if stage == Stage::Localized && self.stage.targets.is_empty() {
            return Err(Error::Config("localized stage needs at least one target".into()));
        }
        if stage == Stage::ArtificialDisease && self.stage.disease_targets.len() != 2 {
            return Err(Error::Config("artificial_disease needs exactly two targets".into()));
        }
        resolve_methods(&self.methods, self.net.n_blocks).map(|_| ())
    }
}

pub fn load_config<P: AsRef<Path>>(path: P) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve configured method names to concrete method descriptions.
/// `gradcam`/`guided_gradcam` default to the deepest residual tap; a
/// `gradcam:block0` form selects an explicit tap.
pub fn resolve_methods(section: &MethodsSection, n_blocks: usize) -> Result<Vec<Method>> {
    // Residual taps are numbered from 1; default to the deepest block.
    let last_tap = format!("block{}", n_blocks.max(1));
    let mut out = Vec::new();
    for name in &section.names {
        let (head, tap) = match name.split_once(':') {
            Some((h, t)) => (h, t.to_string()),
            None => (name.as_str(), last_tap.clone()),
        };
        let m = match head {
            "gradient" => Method::Gradient,
            "input_x_gradient" => Method::InputXGradient,
            "smoothgrad" => Method::SmoothGrad {
                noise_level: section.smoothgrad_noise,
                n: section.smoothgrad_samples,
                seed: 0,
            },
            "guided_backprop" => Method::GuidedBackprop,
            "excitation_backprop" => Method::ExcitationBackprop,
            "gradcam" => Method::GradCam { tap },
            "guided_gradcam" => Method::GuidedGradCam { tap },
            "deeplift" => Method::DeepLift { baseline: Baseline::TrainingMean },
            "lrp_zero" => Method::Lrp { composite: LrpComposite::zero() },
            "lrp_epsilon" => Method::Lrp { composite: LrpComposite::epsilon(1e-6) },
            "lrp_zplus" => Method::Lrp { composite: LrpComposite::zplus() },
            "lrp_epsilon_alpha2beta1" => {
                Method::Lrp { composite: LrpComposite::epsilon_alpha2_beta1() }
            }
            "lrp_epsilon_alpha2beta1_flat" => {
                Method::Lrp { composite: LrpComposite::epsilon_alpha2_beta1_flat() }
            }
            "lrp_epsilon_plus" => Method::Lrp { composite: LrpComposite::epsilon_plus() },
            "lrp_epsilon_plus_flat" => {
                Method::Lrp { composite: LrpComposite::epsilon_plus_flat() }
            }
            other => return Err(Error::Config(format!("unknown method '{other}'"))),
        };
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Config("no methods configured".into()));
    }
    Ok(out)
}

// --- Artificial-disease labeling --------------------------------------------------

/// Label synthetic cases from two corrected phenotypes: subjects with
/// either value strictly between its 40th and 60th percentiles are
/// excluded; the rest are cases iff the first value exceeds its upper
/// threshold and the second does not exceed its lower threshold.
/// Returns (subject index, is_case) pairs for retained subjects plus the
/// excluded indices.
pub fn artificial_disease_labels(
    c1: &[f64],
    c2: &[f64],
    hi: f64,
    lo: f64,
) -> Result<(Vec<(usize, bool)>, Vec<usize>)> {
    if c1.len() != c2.len() || c1.is_empty() {
        return Err(Error::InvalidArgument("label inputs must be equal-length".into()));
    }
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::InvalidArgument("need 0 < lo < hi < 1".into()));
    }
    let p = |vals: &[f64], q: f64| crate::volcore::percentile_of(vals, q * 100.0);
    let (p60_1, p40_1) = (p(c1, hi)?, p(c1, lo)?);
    let (p60_2, p40_2) = (p(c2, hi)?, p(c2, lo)?);
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..c1.len() {
        let mid1 = c1[i] > p40_1 && c1[i] < p60_1;
        let mid2 = c2[i] > p40_2 && c2[i] < p60_2;
        if mid1 || mid2 {
            excluded.push(i);
        } else {
            labels.push((i, c1[i] > p60_1 && c2[i] <= p40_2));
        }
    }
    let n_case = labels.iter().filter(|(_, c)| *c).count();
    if n_case == 0 || n_case == labels.len() {
        return Err(Error::EmptyDomain(
            "artificial disease labeling produced an empty class".into(),
        ));
    }
    Ok((labels, excluded))
}

// --- Run layout and manifest ------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Content hash per artifact, keyed by path relative to the run dir.
    pub hashes: BTreeMap<String, String>,
}

pub fn sha256_file<P: AsRef<Path>>(path: P) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn hash_tree(run_dir: &Path, sub: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
    let dir = run_dir.join(sub);
    if !dir.exists() {
        return Ok(());
    }
    let mut stack = vec![dir];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    for f in files {
        let rel = f.strip_prefix(run_dir).unwrap().to_string_lossy().into_owned();
        out.insert(rel, sha256_file(&f)?);
    }
    Ok(())
}

/// One stored (heatmap, ground truth) pair awaiting scoring, with enough
/// provenance to recompute its score row from disk alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalUnit {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub subject_id: usize,
    /// Relative to the run directory.
    pub heatmap: String,
    pub gt_mask: String,
    pub checkpoint_hash: String,
    pub kind: TaskKind,
}

/// How a task's ground truth is scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TaskKind {
    /// Single localized region: mass, rank hit and false-positive flag.
    Region { region: u32 },
    /// Composite of several regions (mask union); rank hit if any member
    /// region ranks in the top k.
    Composite { regions: Vec<u32> },
    /// Per-subject mask scored with zero dilation; no region ranking.
    SubjectMask,
    /// Distributed target: adds the top-|reference| region overlap.
    Distributed { reference: Vec<u32> },
}

fn mask_to_volume(m: &RegionMask) -> Volume {
    Volume {
        dims: m.dims,
        spacing_mm: m.spacing_mm,
        data: m.membership.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

fn volume_to_mask(v: &Volume) -> RegionMask {
    let mut m = RegionMask::empty(v.dims, v.spacing_mm);
    for (slot, &x) in m.membership.iter_mut().zip(&v.data) {
        *slot = x > 0.5;
    }
    m
}

// --- Scoring stored artifacts --------------------------------------------------

/// Score stored heatmaps against stored ground-truth masks. Pure function
/// of the on-disk artifacts and configuration; the pipeline and the
/// standalone `evaluate` command both go through here.
pub fn score_units(
    run_dir: &Path,
    units: &[EvalUnit],
    atlas: &Atlas,
    pp: &PostprocessConfig,
    metrics: &MetricsSection,
) -> Result<Vec<SubjectScore>> {
    let mut idx: Vec<usize> = (0..units.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ua, ub) = (&units[a], &units[b]);
        (&ua.task, &ua.method, ua.seed, ua.subject_id)
            .cmp(&(&ub.task, &ub.method, ub.seed, ub.subject_id))
    });
    idx.into_par_iter()
        .map(|i| {
            let u = &units[i];
            let heat = read_volume(run_dir.join(&u.heatmap))?;
            let gt = volume_to_mask(&read_volume(run_dir.join(&u.gt_mask))?);
            score_one(u, &heat, &gt, atlas, pp, metrics)
        })
        .collect()
}

fn score_one(
    u: &EvalUnit,
    heat: &Volume,
    gt: &RegionMask,
    atlas: &Atlas,
    pp: &PostprocessConfig,
    metrics: &MetricsSection,
) -> Result<SubjectScore> {
    let (post, pp_degen) = postprocess(heat, pp)?;
    let rma_dilation = match u.kind {
        TaskKind::SubjectMask => 0.0,
        _ => metrics.rma_dilation_mm,
    };
    let mass = rma(&post, gt, rma_dilation)?;
    let (fpr, fpr_degen) = fpr_flag(&post, gt, metrics.fpr_dilation_mm)?;
    let degenerate = pp_degen || mass.is_none() || fpr_degen;
    let (tpr, overlap) = if degenerate {
        (None, None)
    } else {
        match &u.kind {
            TaskKind::Region { region } => {
                let rows = region_scores(&post, atlas)?;
                (Some(tpr_hit(&rows, *region, metrics.top_k)?), None)
            }
            TaskKind::Composite { regions } => {
                let rows = region_scores(&post, atlas)?;
                let hit = regions
                    .iter()
                    .map(|r| tpr_hit(&rows, *r, metrics.top_k))
                    .collect::<Result<Vec<bool>>>()?
                    .into_iter()
                    .any(|b| b);
                (Some(hit), None)
            }
            TaskKind::SubjectMask => (None, None),
            TaskKind::Distributed { reference } => {
                let rows = region_scores(&post, atlas)?;
                let ov = overlap_topk(&rows, reference, reference.len())?;
                (None, Some(ov))
            }
        }
    };
    Ok(SubjectScore {
        task: u.task.clone(),
        method: u.method.clone(),
        subject_id: u.subject_id,
        rma: if degenerate { None } else { mass },
        tpr_hit: tpr,
        fpr_flag: if degenerate { None } else { Some(fpr) },
        overlap,
        degenerate,
    })
}

// --- Stage orchestration ----------------------------------------------------------

/// One prediction task derived from the configured stage.
struct TaskDef {
    name: String,
    /// Indices into the cohort of the subjects this task trains on.
    subjects: Vec<usize>,
    /// Training target per entry of `subjects`.
    targets: Vec<f64>,
    loss: Loss,
    kind: TaskKind,
    /// Ground-truth mask shared by all subjects, if the task has one.
    shared_gt: Option<RegionMask>,
}

/// How far through the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Generate,
    Correct,
    Train,
    Explain,
    Evaluate,
    Report,
}

pub struct RunSummary {
    pub run_dir: PathBuf,
    pub scores: Vec<SubjectScore>,
    pub aggregates: Vec<AggregateRow>,
}

fn cohort_spec(cfg: &ExperimentConfig) -> crate::synthcohort::CohortSpec {
    default_spec(cfg.cohort.n_subjects, cfg.cohort.edge, cfg.cohort.seed)
}

fn lesion_params(cfg: &ExperimentConfig) -> LesionParams {
    let e = cfg.cohort.edge as f64;
    LesionParams {
        rate: cfg.stage.lesion_rate,
        radius_range_mm: cfg.stage.lesion_radius_mm,
        intensity_boost: cfg.stage.lesion_intensity_boost,
        zone_min_mm: [e * 0.15; 3],
        zone_max_mm: [e * 0.85; 3],
    }
}

fn write_cohort_dir(dir: &Path, cohort: &Cohort) -> Result<()> {
    std::fs::create_dir_all(dir.join("subjects"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    write_atlas(dir.join("atlas.vlab"), &cohort.atlas)?;
    for s in &cohort.subjects {
        write_volume(dir.join(format!("subjects/{}.vlab", s.id)), &s.volume)?;
    }
    let mut csv = String::from("subject_id,idp_name,value\n");
    for (sid, row) in cohort.phenotypes.values.iter().enumerate() {
        for (d, v) in cohort.phenotypes.descriptors.iter().zip(row) {
            csv.push_str(&format!("{sid},{},{v:.12e}\n", d.name));
        }
    }
    std::fs::write(dir.join("phenotypes.csv"), csv)?;
    let manifest = serde_json::json!({ "spec": cohort.spec, "seed": cohort.spec.seed });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

/// Correct a phenotype column: build the cross-family correction set, fit
/// its principal components, choose the correction depth on the sweep
/// grid, and residualize. Writes the component summary next to the cohort.
fn correct_target(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    volumes: &[Volume],
    target_name: &str,
    cohort_dir: &Path,
) -> Result<crate::cidp::Cidp> {
    let desc = cohort
        .phenotypes
        .descriptor_by_name(target_name)
        .ok_or_else(|| Error::Config(format!("unknown target phenotype '{target_name}'")))?
        .clone();
    let region = desc
        .region_id
        .ok_or_else(|| Error::Config(format!("target '{target_name}' has no region")))?;
    let values = cohort.phenotypes.column_by_name(target_name).unwrap();
    let set = build_correction_set(&cohort.phenotypes, &desc)?;
    let model = fit_pca(&set)?;
    model.write_csv(cohort_dir.join(format!("pca_{target_name}.csv")))?;
    let k = if cfg.stage.k_grid.len() == 1 {
        cfg.stage.k_grid[0]
    } else {
        let mask = cohort.atlas.region_mask(region);
        let (k, _sweep) = select_k(
            &values,
            &desc,
            &model,
            volumes,
            &mask,
            &cfg.stage.k_grid,
            cfg.stage.n_perm,
            cfg.stage.alpha,
            cfg.stage.localization_dilation_mm,
            cfg.cohort.seed,
        )?;
        k
    };
    residualize(&values, &desc, &model, k)
}

fn build_tasks(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    volumes: &[Volume],
    cohort_dir: &Path,
    run_correction: bool,
) -> Result<Vec<TaskDef>> {
    let stage = cfg.stage_kind()?;
    let all: Vec<usize> = (0..cohort.subjects.len()).collect();
    let mut cidp_csv = String::from("subject_id,column,value\n");
    let mut tasks = Vec::new();
    match stage {
        Stage::Localized => {
            for t in &cfg.stage.targets {
                let cidp = if run_correction {
                    correct_target(cfg, cohort, volumes, t, cohort_dir)?
                } else {
                    // Raw column (used by the generate-only phase).
                    let desc = cohort
                        .phenotypes
                        .descriptor_by_name(t)
                        .ok_or_else(|| Error::Config(format!("unknown target '{t}'")))?
                        .clone();
                    crate::cidp::Cidp {
                        values: cohort.phenotypes.column_by_name(t).unwrap(),
                        target: desc,
                        k_used: 0,
                    }
                };
                for (sid, v) in cidp.values.iter().enumerate() {
                    cidp_csv.push_str(&format!("{sid},{},{v:.12e}\n", cidp.column_name()));
                }
                let region = cidp.target.region_id.unwrap();
                tasks.push(TaskDef {
                    name: t.clone(),
                    subjects: all.clone(),
                    targets: cidp.values.clone(),
                    loss: Loss::Mse,
                    kind: TaskKind::Region { region },
                    shared_gt: Some(cohort.atlas.region_mask(region)),
                });
            }
        }
        Stage::ArtificialDisease => {
            let mut cidps = Vec::new();
            for t in &cfg.stage.disease_targets {
                let c = correct_target(cfg, cohort, volumes, t, cohort_dir)?;
                for (sid, v) in c.values.iter().enumerate() {
                    cidp_csv.push_str(&format!("{sid},{},{v:.12e}\n", c.column_name()));
                }
                cidps.push(c);
            }
            let (labels, _excluded) =
                artificial_disease_labels(&cidps[0].values, &cidps[1].values, 0.60, 0.40)?;
            let regions: Vec<u32> =
                cidps.iter().map(|c| c.target.region_id.unwrap()).collect();
            let mut gt = cohort.atlas.region_mask(regions[0]);
            for &r in &regions[1..] {
                let m = cohort.atlas.region_mask(r);
                for (a, b) in gt.membership.iter_mut().zip(&m.membership) {
                    *a |= b;
                }
            }
            tasks.push(TaskDef {
                name: "artificial_disease".into(),
                subjects: labels.iter().map(|&(i, _)| i).collect(),
                targets: labels.iter().map(|&(_, c)| if c { 1.0 } else { 0.0 }).collect(),
                loss: Loss::Bce,
                kind: TaskKind::Composite { regions },
                shared_gt: Some(gt),
            });
        }
        Stage::Lesion => {
            let targets = cohort
                .phenotypes
                .column_by_name("lesion_load")
                .ok_or_else(|| Error::Config("cohort has no lesion_load phenotype".into()))?;
            tasks.push(TaskDef {
                name: "lesion_load".into(),
                subjects: all,
                targets,
                loss: Loss::Mse,
                kind: TaskKind::SubjectMask,
                shared_gt: None,
            });
        }
        Stage::Plausibility => {
            let refs = &cfg.stage.reference_regions;
            let weights = vec![1.0; refs.len()];
            let (targets, reference) = generate_age_task(
                cohort,
                refs,
                &weights,
                cfg.stage.plausibility_noise_sd,
                cfg.cohort.seed ^ 0xa9e,
            )?;
            let mut gt = cohort.atlas.region_mask(reference[0]);
            for &r in &reference[1..] {
                let m = cohort.atlas.region_mask(r);
                for (a, b) in gt.membership.iter_mut().zip(&m.membership) {
                    *a |= b;
                }
            }
            tasks.push(TaskDef {
                name: "age_like".into(),
                subjects: all,
                targets,
                loss: Loss::Mse,
                kind: TaskKind::Distributed { reference },
                shared_gt: Some(gt),
            });
        }
    }
    if run_correction {
        std::fs::write(cohort_dir.join("cidp.csv"), cidp_csv)?;
    }
    Ok(tasks)
}

/// Run the configured stage up to `phase`, writing artifacts under
/// `out_root/<run_id>/`. Returns the scores when the evaluate phase ran.
pub fn run_stage(cfg: &ExperimentConfig, out_root: &Path, phase: Phase) -> Result<RunSummary> {
    cfg.validate()?;
    let stage = cfg.stage_kind()?;
    let run_dir = out_root.join(&cfg.run_id);
    let cohort_dir = run_dir.join("cohort");
    std::fs::create_dir_all(&cohort_dir)?;

    let spec = cohort_spec(cfg);
    let cohort = match stage {
        Stage::Lesion => generate_lesion_task(&spec, &lesion_params(cfg))?,
        _ => generate_cohort(&spec)?,
    };
    write_cohort_dir(&cohort_dir, &cohort)?;
    if phase == Phase::Generate {
        return Ok(RunSummary { run_dir, scores: vec![], aggregates: vec![] });
    }

    let volumes: Vec<Volume> = cohort.subjects.iter().map(|s| s.volume.clone()).collect();
    let tasks = build_tasks(cfg, &cohort, &volumes, &cohort_dir, true)?;
    if phase == Phase::Correct {
        return Ok(RunSummary { run_dir, scores: vec![], aggregates: vec![] });
    }

    // Persist the ground-truth masks the evaluation will read back.
    for t in &tasks {
        if let Some(gt) = &t.shared_gt {
            write_volume(
                cohort_dir.join(format!("masks/task_{}_gt.vlab", t.name)),
                &mask_to_volume(gt),
            )?;
        } else {
            for &sid in &t.subjects {
                let m = cohort.subjects[sid]
                    .lesion_mask
                    .clone()
                    .unwrap_or_else(|| RegionMask::empty(spec.dims, spec.spacing_mm));
                write_volume(
                    cohort_dir.join(format!("masks/{sid}_lesion.vlab")),
                    &mask_to_volume(&m),
                )?;
            }
        }
    }

    let ckpt_dir = run_dir.join("checkpoints");
    let heat_dir = run_dir.join("heatmaps");
    let scores_dir = run_dir.join("scores");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(&heat_dir)?;
    std::fs::create_dir_all(&scores_dir)?;

    let methods = resolve_methods(&cfg.methods, cfg.net.n_blocks)?;
    let mut units: Vec<EvalUnit> = Vec::new();

    for task in &tasks {
        let task_vols: Vec<Volume> =
            task.subjects.iter().map(|&i| volumes[i].clone()).collect();
        for &seed in &cfg.seeds.replicates {
            let net_spec =
                NetworkSpec::tiny_resnet(spec.dims, cfg.net.base_ch, cfg.net.n_blocks);
            let mut net = Network::init(&net_spec, seed)?;
            let train_cfg = TrainConfig { seed, loss: task.loss, ..cfg.train.clone() };
            let outcome = train(&mut net, &task_vols, &task.targets, &train_cfg)?;
            let ckpt = ckpt_dir.join(format!("{}_seed{seed}.xckp", task.name));
            save_checkpoint(&ckpt, &net, seed, train_cfg.steps as u64)?;
            let ckpt_hash = network_hash(&net);
            if phase == Phase::Train {
                continue;
            }

            // Explained subjects: first n from the (sorted) test split.
            let mut test = outcome.test_idx.clone();
            test.sort_unstable();
            let eval_local: Vec<usize> =
                test.into_iter().take(cfg.n_eval_subjects).collect();
            let train_mean_vols: Vec<Volume> =
                outcome.train_idx.iter().map(|&i| task_vols[i].clone()).collect();
            let baseline = Baseline::training_mean(&train_mean_vols)?;

            for method in &methods {
                let method = match method {
                    Method::DeepLift { .. } => Method::DeepLift { baseline: baseline.clone() },
                    Method::SmoothGrad { noise_level, n, .. } => Method::SmoothGrad {
                        noise_level: *noise_level,
                        n: *n,
                        seed,
                    },
                    m => m.clone(),
                };
                let mname = method.name();
                let mdir = heat_dir.join(&task.name).join(format!("seed{seed}")).join(&mname);
                std::fs::create_dir_all(&mdir)?;
                let maps: Vec<(usize, crate::attribution::Heatmap)> = eval_local
                    .par_iter()
                    .map(|&li| {
                        let sid = task.subjects[li];
                        explain(&net, &task_vols[li], &method, 0).map(|h| (sid, h))
                    })
                    .collect::<Result<_>>()?;
                for (sid, heat) in maps {
                    let hp = mdir.join(format!("{sid}.vlab"));
                    heat.save(&hp)?;
                    let gt_mask = match task.kind {
                        TaskKind::SubjectMask => format!("cohort/masks/{sid}_lesion.vlab"),
                        _ => format!("cohort/masks/task_{}_gt.vlab", task.name),
                    };
                    units.push(EvalUnit {
                        task: task.name.clone(),
                        method: mname.clone(),
                        seed,
                        subject_id: sid,
                        heatmap: hp.strip_prefix(&run_dir).unwrap().to_string_lossy().into(),
                        gt_mask,
                        checkpoint_hash: ckpt_hash.clone(),
                        kind: task.kind.clone(),
                    });
                }
            }
        }
    }

    units.sort_by(|a, b| {
        (&a.task, &a.method, a.seed, a.subject_id)
            .cmp(&(&b.task, &b.method, b.seed, b.subject_id))
    });
    std::fs::write(
        scores_dir.join("eval_inputs.json"),
        serde_json::to_string_pretty(&units).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    if phase <= Phase::Explain {
        return Ok(RunSummary { run_dir, scores: vec![], aggregates: vec![] });
    }

    let scores = score_units(&run_dir, &units, &cohort.atlas, &cfg.postprocess, &cfg.metrics)?;
    write_scores_csv(scores_dir.join("scores.csv"), &scores)?;
    let aggregates = aggregate(&scores);
    write_aggregate_csv(scores_dir.join("aggregate.csv"), &aggregates)?;

    if phase >= Phase::Report {
        report(&run_dir, cfg)?;
    }

    let mut hashes = BTreeMap::new();
    for sub in ["cohort", "checkpoints", "heatmaps", "scores"] {
        hash_tree(&run_dir, sub, &mut hashes)?;
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        seeds: cfg.seeds.replicates.clone(),
        hashes,
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    Ok(RunSummary { run_dir, scores, aggregates })
}

/// Recompute scores from stored heatmaps and masks (the dual evaluation
/// path) and write them next to the pipeline's tables.
pub fn evaluate_stored(run_dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<SubjectScore>> {
    let units: Vec<EvalUnit> = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("scores/eval_inputs.json"))?,
    )
    .map_err(|e| Error::Serde(e.to_string()))?;
    let atlas = read_atlas(run_dir.join("cohort/atlas.vlab"))?;
    let scores = score_units(run_dir, &units, &atlas, &cfg.postprocess, &cfg.metrics)?;
    write_scores_csv(run_dir.join("scores/scores_reevaluated.csv"), &scores)?;
    Ok(scores)
}

// --- Reporting --------------------------------------------------------------------

/// Row-wise min-max scaling of a task-by-method mean-RMA matrix. Rows with
/// all-equal values scale to all zeros and are flagged.
pub fn min_max_rows(matrix: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut out = Vec::with_capacity(matrix.len());
    let mut flat_rows = Vec::with_capacity(matrix.len());
    for row in matrix {
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            out.push(row.iter().map(|v| (v - lo) / (hi - lo)).collect());
            flat_rows.push(false);
        } else {
            out.push(vec![0.0; row.len()]);
            flat_rows.push(true);
        }
    }
    (out, flat_rows)
}

/// Mean RMA per named task group. Groups are lists of task names; a
/// missing task is an error.
pub fn group_means(
    aggregates: &[AggregateRow],
    groups: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (gname, members) in groups {
        let mut vals = Vec::new();
        for task in members {
            let rows: Vec<&AggregateRow> =
                aggregates.iter().filter(|a| &a.task == task).collect();
            if rows.is_empty() {
                return Err(Error::Config(format!("group '{gname}': unknown task '{task}'")));
            }
            vals.extend(rows.iter().filter_map(|a| a.mean_rma));
        }
        if vals.is_empty() {
            return Err(Error::EmptyDomain(format!("group '{gname}' has no scores")));
        }
        out.insert(gname.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
    }
    Ok(out)
}

/// Write an axial slice as PGM with the mask boundary burned in white.
pub fn render_slice_overlay<P: AsRef<Path>>(
    path: P,
    v: &Volume,
    mask: &RegionMask,
    z: usize,
) -> Result<()> {
    if v.dims != mask.dims {
        return Err(Error::DimMismatch("volume vs mask dims".into()));
    }
    if z >= v.dims.2 {
        return Err(Error::InvalidArgument("slice index out of range".into()));
    }
    let (nx, ny, _) = v.dims;
    let at = |x: usize, y: usize| x + nx * (y + ny * z);
    let mut slice: Vec<f64> = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            slice.push(v.data[at(x, y)]);
        }
    }
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut px: Vec<u8> = slice
        .iter()
        .map(|&g| (((g - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    // Boundary: in-mask voxel with an in-plane neighbour outside it.
    for y in 0..ny {
        for x in 0..nx {
            if !mask.membership[at(x, y)] {
                continue;
            }
            let mut edge = x == 0 || y == 0 || x == nx - 1 || y == ny - 1;
            if !edge {
                edge = !mask.membership[at(x - 1, y)]
                    || !mask.membership[at(x + 1, y)]
                    || !mask.membership[at(x, y - 1)]
                    || !mask.membership[at(x, y + 1)];
            }
            if edge {
                px[x + nx * y] = 255;
            }
        }
    }
    let mut out = format!("P2\n{nx} {ny}\n255\n").into_bytes();
    for y in 0..ny {
        let row: Vec<String> = (0..nx).map(|x| px[x + nx * y].to_string()).collect();
        out.extend_from_slice(row.join(" ").as_bytes());
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Build the report directory: group-mean table, row-wise min-max matrix,
/// and axial heatmap renders with ground-truth outlines.
pub fn report(run_dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let scores = read_scores_csv(run_dir.join("scores/scores.csv"))?;
    let aggregates = aggregate(&scores);
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;

    // Group means (default: a single group containing every task).
    let groups = if cfg.report.groups.is_empty() {
        let mut tasks: Vec<String> = aggregates.iter().map(|a| a.task.clone()).collect();
        tasks.sort();
        tasks.dedup();
        BTreeMap::from([("all".to_string(), tasks)])
    } else {
        cfg.report.groups.clone()
    };
    let means = group_means(&aggregates, &groups)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(report_dir.join("group_means.csv"))?);
    writeln!(f, "group,mean_rma")?;
    for (g, m) in &means {
        writeln!(f, "{g},{m:.6}")?;
    }
    drop(f);

    // Task-by-method mean-RMA matrix, min-max scaled within rows.
    let mut tasks: Vec<String> = aggregates.iter().map(|a| a.task.clone()).collect();
    tasks.sort();
    tasks.dedup();
    let mut methods: Vec<String> = aggregates.iter().map(|a| a.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let matrix: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| {
            methods
                .iter()
                .map(|m| {
                    aggregates
                        .iter()
                        .find(|a| &a.task == t && &a.method == m)
                        .and_then(|a| a.mean_rma)
                        .unwrap_or(0.0)
                })
                .collect()
        })
        .collect();
    let (scaled, flat) = min_max_rows(&matrix);
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(report_dir.join("rma_matrix_scaled.csv"))?);
    writeln!(f, "task,{},degenerate_row", methods.join(","))?;
    for ((t, row), flag) in tasks.iter().zip(&scaled).zip(&flat) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{t},{},{}", cells.join(","), *flag as u8)?;
    }
    drop(f);

    // Renders: per task, mean and single-subject heatmap of the first method.
    let units: Vec<EvalUnit> = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("scores/eval_inputs.json"))?,
    )
    .map_err(|e| Error::Serde(e.to_string()))?;
    for t in &tasks {
        let mut task_units: Vec<&EvalUnit> = units.iter().filter(|u| &u.task == t).collect();
        if task_units.is_empty() {
            continue;
        }
        task_units.sort_by(|a, b| (&a.method, a.seed, a.subject_id)
            .cmp(&(&b.method, b.seed, b.subject_id)));
        let first_method = task_units[0].method.clone();
        let chosen: Vec<&&EvalUnit> =
            task_units.iter().filter(|u| u.method == first_method).collect();
        let gt = volume_to_mask(&read_volume(run_dir.join(&chosen[0].gt_mask))?);
        let mut mean: Option<Volume> = None;
        for u in &chosen {
            let (post, _) =
                postprocess(&read_volume(run_dir.join(&u.heatmap))?, &cfg.postprocess)?;
            match &mut mean {
                None => mean = Some(post),
                Some(m) => {
                    for (a, b) in m.data.iter_mut().zip(&post.data) {
                        *a += b;
                    }
                }
            }
        }
        let mut mean = mean.unwrap();
        for a in &mut mean.data {
            *a /= chosen.len() as f64;
        }
        let z = mean.dims.2 / 2;
        render_slice_overlay(
            report_dir.join(format!("{t}_{first_method}_mean.pgm")),
            &mean,
            &gt,
            z,
        )?;
        let (single, _) =
            postprocess(&read_volume(run_dir.join(&chosen[0].heatmap))?, &cfg.postprocess)?;
        render_slice_overlay(
            report_dir.join(format!("{t}_{first_method}_subject{}.pgm", chosen[0].subject_id)),
            &single,
            &gt,
            z,
        )?;
    }
    Ok(())
}

/// Read back a scores table written by `write_scores_csv`.
pub fn read_scores_csv<P: AsRef<Path>>(path: P) -> Result<Vec<SubjectScore>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Format(format!("scores row {i}: expected 8 columns")));
        }
        let opt_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Format(format!("bad float '{s}'")))
            }
        };
        let opt_b = |s: &str| -> Result<Option<bool>> {
            match s {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                _ => Err(Error::Format(format!("bad flag '{s}'"))),
            }
        };
        out.push(SubjectScore {
            task: cols[0].into(),
            method: cols[1].into(),
            subject_id: cols[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad subject id '{}'", cols[2])))?,
            rma: opt_f(cols[3])?,
            tpr_hit: opt_b(cols[4])?,
            fpr_flag: opt_b(cols[5])?,
            overlap: opt_f(cols[6])?,
            degenerate: cols[7] == "1",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.stage.name, "localized");

        let mut bad = ExperimentConfig::default();
        bad.stage.name = "frobnicate".into();
        assert!(bad.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.methods.names = vec!["no_such_method".into()];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_resolution_covers_defaults_and_taps() {
        let section = MethodsSection::default();
        let methods = resolve_methods(&section, 2).unwrap();
        assert_eq!(methods.len(), section.names.len());
        let tapped = MethodsSection {
            names: vec!["gradcam:block1".into(), "gradcam".into()],
            ..Default::default()
        };
        let ms = resolve_methods(&tapped, 2).unwrap();
        assert_eq!(ms[0].name(), "gradcam_block1");
        assert_eq!(ms[1].name(), "gradcam_block2");
    }

    #[test]
    fn disease_labels_match_brute_force_on_uniform_draws() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let n = 100_000;
        let c1: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let c2: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let (labels, excluded) = artificial_disease_labels(&c1, &c2, 0.60, 0.40).unwrap();
        assert_eq!(labels.len() + excluded.len(), n);

        // Independent brute-force labeling over the same sample.
        let thr = |vals: &[f64], q: f64| {
            let mut s = vals.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[((q * n as f64).ceil() as usize - 1).min(n - 1)]
        };
        let (h1, l1) = (thr(&c1, 0.60), thr(&c1, 0.40));
        let (h2, l2) = (thr(&c2, 0.60), thr(&c2, 0.40));
        let mut expect = Vec::new();
        for i in 0..n {
            let mid = (c1[i] > l1 && c1[i] < h1) || (c2[i] > l2 && c2[i] < h2);
            if !mid {
                expect.push((i, c1[i] > h1 && c2[i] <= l2));
            }
        }
        assert_eq!(labels, expect);

        // Patient fraction among retained: independent uniforms retain a
        // subject with probability 0.8 per variable; cases need
        // c1 in the top 0.4 and c2 in the bottom 0.4.
        let frac = labels.iter().filter(|(_, c)| *c).count() as f64 / labels.len() as f64;
        assert_abs_diff_eq!(frac, 0.16 / 0.64, epsilon = 0.01);
    }

    #[test]
    fn disease_labels_reject_degenerate_input() {
        let same = vec![1.0; 50];
        assert!(artificial_disease_labels(&same, &same, 0.60, 0.40).is_err());
    }

    #[test]
    fn min_max_rows_hand_example_and_flat_row() {
        let m = vec![vec![0.2, 0.6], vec![0.5, 0.5]];
        let (scaled, flat) = min_max_rows(&m);
        assert_eq!(scaled[0], vec![0.0, 1.0]);
        assert_eq!(scaled[1], vec![0.0, 0.0]);
        assert_eq!(flat, vec![false, true]);
    }

    #[test]
    fn group_means_single_task_equals_task_mean() {
        let aggregates = vec![
            AggregateRow {
                task: "a".into(),
                method: "m".into(),
                n: 2,
                n_degenerate: 0,
                mean_rma: Some(0.7),
                sd_rma: Some(0.0),
                tpr: None,
                fpr: None,
                mean_overlap: None,
            },
        ];
        let groups = BTreeMap::from([("solo".to_string(), vec!["a".to_string()])]);
        let means = group_means(&aggregates, &groups).unwrap();
        assert_abs_diff_eq!(means["solo"], 0.7, epsilon = 1e-12);
        let missing = BTreeMap::from([("g".to_string(), vec!["nope".to_string()])]);
        assert!(group_means(&aggregates, &missing).is_err());
    }

    #[test]
    fn render_overlay_writes_nonempty_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume {
            dims: (8, 8, 3),
            spacing_mm: [1.0; 3],
            data: (0..192).map(|i| i as f64).collect(),
        };
        let mut m = RegionMask::empty((8, 8, 3), [1.0; 3]);
        for x in 2..5 {
            for y in 2..5 {
                m.membership[x + 8 * (y + 8)] = true; // z = 1
            }
        }
        let path = dir.path().join("slice.pgm");
        render_slice_overlay(&path, &v, &m, 1).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("P2\n8 8\n255"));
        assert!(text.contains("255\n") || text.contains(" 255"));
        assert!(render_slice_overlay(dir.path().join("bad.pgm"), &v, &m, 9).is_err());
    }

    #[test]
    fn scores_csv_roundtrip_through_reader() {
        let dir = tempfile::tempdir().unwrap();
        let scores = vec![SubjectScore {
            task: "t".into(),
            method: "m".into(),
            subject_id: 3,
            rma: Some(0.5),
            tpr_hit: Some(true),
            fpr_flag: None,
            overlap: None,
            degenerate: false,
        }];
        let p = dir.path().join("s.csv");
        write_scores_csv(&p, &scores).unwrap();
        let back = read_scores_csv(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].subject_id, 3);
        assert_eq!(back[0].rma, Some(0.5));
        assert_eq!(back[0].tpr_hit, Some(true));
        assert_eq!(back[0].fpr_flag, None);
        assert!(!back[0].degenerate);
    }

    /// Miniature end-to-end run: tiny cohort, one seed, two methods,
    /// then the stored-artifact evaluation path must reproduce the
    /// pipeline's scores exactly.
    #[test]
    fn pipeline_and_stored_evaluation_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config("mini");
        let summary = run_stage(&cfg, dir.path(), Phase::Report).unwrap();
        assert!(!summary.scores.is_empty());
        assert!(summary.run_dir.join("manifest.json").exists());
        assert!(summary.run_dir.join("scores/scores.csv").exists());
        assert!(summary.run_dir.join("report/group_means.csv").exists());
        assert!(summary.run_dir.join("report/rma_matrix_scaled.csv").exists());

        let re = evaluate_stored(&summary.run_dir, &cfg).unwrap();
        assert_eq!(re.len(), summary.scores.len());
        for (a, b) in re.iter().zip(&summary.scores) {
            assert_eq!(a.task, b.task);
            assert_eq!(a.method, b.method);
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.rma, b.rma);
            assert_eq!(a.tpr_hit, b.tpr_hit);
            assert_eq!(a.fpr_flag, b.fpr_flag);
            assert_eq!(a.degenerate, b.degenerate);
        }
    }

    #[test]
    fn rerun_reproduces_identical_score_csv_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_config("det");
        let s1 = run_stage(&cfg, d1.path(), Phase::Evaluate).unwrap();
        let s2 = run_stage(&cfg, d2.path(), Phase::Evaluate).unwrap();
        let b1 = std::fs::read(s1.run_dir.join("scores/scores.csv")).unwrap();
        let b2 = std::fs::read(s2.run_dir.join("scores/scores.csv")).unwrap();
        assert_eq!(b1, b2);
        let a1 = std::fs::read(s1.run_dir.join("scores/aggregate.csv")).unwrap();
        let a2 = std::fs::read(s2.run_dir.join("scores/aggregate.csv")).unwrap();
        assert_eq!(a1, a2);
    }

    fn tiny_config(run_id: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run_id = run_id.into();
        cfg.cohort = CohortSection { n_subjects: 24, edge: 10, seed: 5 };
        cfg.stage.targets = vec!["region_1_mean_intensity".into()];
        cfg.stage.k_grid = vec![1];
        cfg.net = NetSection { base_ch: 2, n_blocks: 1 };
        cfg.train.steps = 30;
        cfg.train.batch_size = 4;
        cfg.methods.names = vec!["gradient".into(), "lrp_epsilon".into()];
        cfg.seeds.replicates = vec![0];
        cfg.n_eval_subjects = 2;
        cfg
    }
}
