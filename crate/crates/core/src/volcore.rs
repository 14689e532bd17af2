//! Volumetric primitives shared by every other module: dense scalar
//! volumes with physical spacing, boolean region masks, labeled atlases,
//! Gaussian smoothing, morphological dilation, nearest-rank percentiles
//! and trilinear upsampling.
//!
//! Layout is row-major with the x index fastest:
//! `idx = x + nx * (y + ny * z)`. 2D data uses `nz = 1`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Voxel counts per axis.
pub type Dims = (usize, usize, usize);

/// FWHM of a Gaussian relates to sigma by this constant: 2*sqrt(2*ln 2).
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Dense scalar grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing_mm: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::InvalidArgument("all dims must be >= 1".into()));
        }
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "data length {} != product of dims {}",
                data.len(),
                n
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite voxel value".into()));
        }
        Ok(Self { dims, spacing_mm, data })
    }

    pub fn zeros(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Self { dims, spacing_mm, data: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    pub fn constant(dims: Dims, spacing_mm: [f64; 3], c: f64) -> Self {
        Self { dims, spacing_mm, data: vec![c; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]
    }

    pub fn same_grid(&self, other_dims: Dims) -> bool {
        self.dims == other_dims
    }
}

/// Boolean voxel mask on the same grid as a Volume.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub membership: Vec<bool>,
}

impl RegionMask {
    pub fn empty(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Self { dims, spacing_mm, membership: vec![false; dims.0 * dims.1 * dims.2] }
    }

    pub fn full(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Self { dims, spacing_mm, membership: vec![true; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    pub fn set_at(&mut self, x: usize, y: usize, z: usize) {
        let i = self.idx(x, y, z);
        self.membership[i] = true;
    }

    pub fn count(&self) -> usize {
        self.membership.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.dims == other.dims
            && self
                .membership
                .iter()
                .zip(&other.membership)
                .all(|(&a, &b)| !a || b)
    }

    /// Union of two masks on the same grid.
    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch("mask union dims".into()));
        }
        let membership = self
            .membership
            .iter()
            .zip(&other.membership)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(RegionMask { dims: self.dims, spacing_mm: self.spacing_mm, membership })
    }
}

/// Laterality of an atlas region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
    None,
}

/// Metadata for one atlas region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionInfo {
    pub id: u32,
    pub name: String,
    pub laterality: Laterality,
    pub family_id: u32,
}

/// Labeled voxel regions (0 = background) with a region table.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub labels: Vec<u32>,
    pub regions: Vec<RegionInfo>,
}

impl Atlas {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.regions.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.regions.len() {
            return Err(Error::InvalidArgument("duplicate region ids".into()));
        }
        for &l in &self.labels {
            if l != 0 && !ids.contains(&l) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} missing from region table"
                )));
            }
        }
        Ok(())
    }

    pub fn region(&self, id: u32) -> Option<&RegionInfo> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Binary mask of one region.
    pub fn region_mask(&self, id: u32) -> RegionMask {
        RegionMask {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            membership: self.labels.iter().map(|&l| l == id).collect(),
        }
    }
}

fn sigma_per_axis(fwhm_mm: f64, spacing: [f64; 3]) -> [f64; 3] {
    [
        fwhm_mm / (spacing[0] * FWHM_TO_SIGMA),
        fwhm_mm / (spacing[1] * FWHM_TO_SIGMA),
        fwhm_mm / (spacing[2] * FWHM_TO_SIGMA),
    ]
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn convolve_axis(v: &Volume, kernel: &[f64], axis: usize) -> Volume {
    let (nx, ny, nz) = v.dims;
    let radius = (kernel.len() / 2) as i64;
    let mut out = Volume::zeros(v.dims, v.spacing_mm);
    let axis_len = [nx, ny, nz][axis] as i64;
    // Per-source renormalization of the boundary-truncated kernel: each
    // source voxel spreads exactly its own mass, so total mass is conserved.
    let src_wsum: Vec<f64> = (0..axis_len)
        .map(|p| {
            kernel
                .iter()
                .enumerate()
                .filter(|(ki, _)| {
                    let q = p + *ki as i64 - radius;
                    q >= 0 && q < axis_len
                })
                .map(|(_, &w)| w)
                .sum()
        })
        .collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x as i64, y as i64, z as i64];
                let mut acc = 0.0;
                for (ki, &w) in kernel.iter().enumerate() {
                    let off = ki as i64 - radius;
                    let p = pos[axis] + off;
                    if p < 0 || p >= axis_len {
                        continue;
                    }
                    let mut q = pos;
                    q[axis] = p;
                    acc += w * v.get(q[0] as usize, q[1] as usize, q[2] as usize)
                        / src_wsum[p as usize];
                }
                out.set(x, y, z, acc);
            }
        }
    }
    out
}

/// Separable Gaussian smoothing with a physical FWHM.
///
/// Per-axis sigma is `fwhm_mm / (spacing_axis * 2*sqrt(2 ln 2))`; the kernel
/// is truncated at 4 sigma and renormalized to unit sum, with boundary
/// renormalization of the truncated part.
pub fn gaussian_smooth(v: &Volume, fwhm_mm: f64) -> Result<Volume> {
    if !fwhm_mm.is_finite() || fwhm_mm < 0.0 {
        return Err(Error::InvalidArgument("fwhm must be finite and >= 0".into()));
    }
    if fwhm_mm == 0.0 {
        return Ok(v.clone());
    }
    let sigmas = sigma_per_axis(fwhm_mm, v.spacing_mm);
    let mut out = v.clone();
    let dims = [v.dims.0, v.dims.1, v.dims.2];
    for axis in 0..3 {
        if dims[axis] == 1 {
            continue;
        }
        let k = gaussian_kernel(sigmas[axis]);
        if k.len() > 1 {
            out = convolve_axis(&out, &k, axis);
        }
    }
    Ok(out)
}

/// Nearest-rank percentile over a slice: sort ascending, take the element
/// at index `ceil(p/100 * N) - 1`, clamped to the valid range.
pub fn percentile_of(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDomain("percentile of empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument("percentile out of [0,100]".into()));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as isize - 1;
    let i = rank.clamp(0, n as isize - 1) as usize;
    Ok(sorted[i])
}

/// Nearest-rank percentile of a volume, optionally restricted to a mask.
pub fn percentile(v: &Volume, p: f64, mask: Option<&RegionMask>) -> Result<f64> {
    match mask {
        None => percentile_of(&v.data, p),
        Some(m) => {
            if m.dims != v.dims {
                return Err(Error::DimMismatch("percentile mask dims".into()));
            }
            let vals: Vec<f64> = v
                .data
                .iter()
                .zip(&m.membership)
                .filter_map(|(&x, &b)| if b { Some(x) } else { None })
                .collect();
            percentile_of(&vals, p)
        }
    }
}

/// Offsets (in voxels) whose physical distance is within `radius_mm`.
pub fn ball_offsets(radius_mm: f64, spacing: [f64; 3]) -> Vec<(i64, i64, i64)> {
    let rx = (radius_mm / spacing[0]).floor() as i64;
    let ry = (radius_mm / spacing[1]).floor() as i64;
    let rz = (radius_mm / spacing[2]).floor() as i64;
    let r2 = radius_mm * radius_mm;
    let mut out = Vec::new();
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let d2 = (dx as f64 * spacing[0]).powi(2)
                    + (dy as f64 * spacing[1]).powi(2)
                    + (dz as f64 * spacing[2]).powi(2);
                if d2 <= r2 + 1e-12 {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Euclidean dilation: a voxel is set iff its distance (in mm) to some set
/// input voxel is at most `radius_mm`.
pub fn dilate(m: &RegionMask, radius_mm: f64) -> Result<RegionMask> {
    if !radius_mm.is_finite() || radius_mm < 0.0 {
        return Err(Error::InvalidArgument("radius must be finite and >= 0".into()));
    }
    if radius_mm == 0.0 {
        return Ok(m.clone());
    }
    let offsets = ball_offsets(radius_mm, m.spacing_mm);
    let (nx, ny, nz) = m.dims;
    let mut out = m.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.membership[m.idx(x, y, z)] {
                    continue;
                }
                for &(dx, dy, dz) in &offsets {
                    let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if px < 0 || py < 0 || pz < 0 {
                        continue;
                    }
                    let (px, py, pz) = (px as usize, py as usize, pz as usize);
                    if px >= nx || py >= ny || pz >= nz {
                        continue;
                    }
                    out.membership[m.idx(px, py, pz)] = true;
                }
            }
        }
    }
    Ok(out)
}

/// Set voxels inside the mask to zero, leaving others unchanged.
pub fn mask_zero(v: &Volume, m: &RegionMask) -> Result<Volume> {
    if v.dims != m.dims {
        return Err(Error::DimMismatch("mask_zero dims".into()));
    }
    let data = v
        .data
        .iter()
        .zip(&m.membership)
        .map(|(&x, &b)| if b { 0.0 } else { x })
        .collect();
    Ok(Volume { dims: v.dims, spacing_mm: v.spacing_mm, data })
}

/// Trilinear (bilinear in 2D) upsampling with align-corners semantics:
/// source coordinate = target index * (src-1)/(tgt-1) per axis.
pub fn upsample(v: &Volume, target_dims: Dims) -> Result<Volume> {
    let (sx, sy, sz) = v.dims;
    let (tx, ty, tz) = target_dims;
    if tx < sx || ty < sy || tz < sz || tx < 1 || ty < 1 || tz < 1 {
        return Err(Error::InvalidArgument(
            "target dims must be >= source dims componentwise".into(),
        ));
    }
    if target_dims == v.dims {
        return Ok(v.clone());
    }
    let scale = |s: usize, t: usize, i: usize| -> f64 {
        if t <= 1 || s <= 1 {
            0.0
        } else {
            i as f64 * (s - 1) as f64 / (t - 1) as f64
        }
    };
    let spacing = [
        v.spacing_mm[0] * (sx.max(2) - 1) as f64 / (tx.max(2) - 1) as f64,
        v.spacing_mm[1] * (sy.max(2) - 1) as f64 / (ty.max(2) - 1) as f64,
        v.spacing_mm[2] * (sz.max(2) - 1) as f64 / (tz.max(2) - 1) as f64,
    ];
    let mut out = Volume::zeros(target_dims, spacing);
    for z in 0..tz {
        let fz = scale(sz, tz, z);
        let z0 = fz.floor() as usize;
        let z1 = (z0 + 1).min(sz - 1);
        let wz = fz - z0 as f64;
        for y in 0..ty {
            let fy = scale(sy, ty, y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sy - 1);
            let wy = fy - y0 as f64;
            for x in 0..tx {
                let fx = scale(sx, tx, x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sx - 1);
                let wx = fx - x0 as f64;
                let c000 = v.get(x0, y0, z0);
                let c100 = v.get(x1, y0, z0);
                let c010 = v.get(x0, y1, z0);
                let c110 = v.get(x1, y1, z0);
                let c001 = v.get(x0, y0, z1);
                let c101 = v.get(x1, y0, z1);
                let c011 = v.get(x0, y1, z1);
                let c111 = v.get(x1, y1, z1);
                let c00 = c000 * (1.0 - wx) + c100 * wx;
                let c10 = c010 * (1.0 - wx) + c110 * wx;
                let c01 = c001 * (1.0 - wx) + c101 * wx;
                let c11 = c011 * (1.0 - wx) + c111 * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.set(x, y, z, c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }
    Ok(out)
}

// --- On-disk container ("VLAB") -------------------------------------------
//
// header: magic "VLAB", version u32, dims 3xu32, spacing 3xf64, dtype u8
// payload: little-endian values; dtype 0 = f64 volume, 1 = u8 mask,
// 2 = u32 labels followed by a u64-length-prefixed JSON region table.

const VLAB_MAGIC: &[u8; 4] = b"VLAB";
const VLAB_VERSION: u32 = 1;

fn write_header<W: Write>(w: &mut W, dims: Dims, spacing: [f64; 3], dtype: u8) -> Result<()> {
    w.write_all(VLAB_MAGIC)?;
    w.write_all(&VLAB_VERSION.to_le_bytes())?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dims, [f64; 3], u8)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VLAB_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VLAB_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut spacing = [0f64; 3];
    let mut b8 = [0u8; 8];
    for s in &mut spacing {
        r.read_exact(&mut b8)?;
        *s = f64::from_le_bytes(b8);
    }
    let mut dt = [0u8; 1];
    r.read_exact(&mut dt)?;
    Ok(((dims[0], dims[1], dims[2]), spacing, dt[0]))
}

pub fn write_volume<P: AsRef<Path>>(path: P, v: &Volume) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, v.dims, v.spacing_mm, 0)?;
    for &x in &v.data {
        f.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume<P: AsRef<Path>>(path: P) -> Result<Volume> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, spacing, dtype) = read_header(&mut f)?;
    if dtype != 0 {
        return Err(Error::Format(format!("expected volume dtype 0, got {dtype}")));
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut data = Vec::with_capacity(n);
    let mut b8 = [0u8; 8];
    for _ in 0..n {
        f.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Volume::new(dims, spacing, data)
}

pub fn write_mask<P: AsRef<Path>>(path: P, m: &RegionMask) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, m.dims, m.spacing_mm, 1)?;
    let bytes: Vec<u8> = m.membership.iter().map(|&b| b as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask<P: AsRef<Path>>(path: P) -> Result<RegionMask> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, spacing, dtype) = read_header(&mut f)?;
    if dtype != 1 {
        return Err(Error::Format(format!("expected mask dtype 1, got {dtype}")));
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut bytes = vec![0u8; n];
    f.read_exact(&mut bytes)?;
    Ok(RegionMask {
        dims,
        spacing_mm: spacing,
        membership: bytes.into_iter().map(|b| b != 0).collect(),
    })
}

pub fn write_atlas<P: AsRef<Path>>(path: P, a: &Atlas) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, a.dims, a.spacing_mm, 2)?;
    for &l in &a.labels {
        f.write_all(&l.to_le_bytes())?;
    }
    let table = serde_json::to_vec(&a.regions).map_err(|e| Error::Serde(e.to_string()))?;
    f.write_all(&(table.len() as u64).to_le_bytes())?;
    f.write_all(&table)?;
    Ok(())
}

pub fn read_atlas<P: AsRef<Path>>(path: P) -> Result<Atlas> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, spacing, dtype) = read_header(&mut f)?;
    if dtype != 2 {
        return Err(Error::Format(format!("expected atlas dtype 2, got {dtype}")));
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut labels = Vec::with_capacity(n);
    let mut b4 = [0u8; 4];
    for _ in 0..n {
        f.read_exact(&mut b4)?;
        labels.push(u32::from_le_bytes(b4));
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut table = vec![0u8; len];
    f.read_exact(&mut table)?;
    let regions: Vec<RegionInfo> =
        serde_json::from_slice(&table).map_err(|e| Error::Serde(e.to_string()))?;
    let atlas = Atlas { dims, spacing_mm: spacing, labels, regions };
    atlas.validate()?;
    Ok(atlas)
}

/// Export one axial slice (fixed z) as a plain-text PGM, scaled to 0..255.
pub fn write_pgm_slice<P: AsRef<Path>>(path: P, v: &Volume, z: usize) -> Result<()> {
    if z >= v.dims.2 {
        return Err(Error::InvalidArgument("slice index out of range".into()));
    }
    let (nx, ny, _) = v.dims;
    let slice: Vec<f64> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .map(|(x, y)| v.get(x, y, z))
        .collect();
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("P2\n{nx} {ny}\n255\n");
    for y in 0..ny {
        let row: Vec<String> = (0..nx)
            .map(|x| {
                let g = ((v.get(x, y, z) - lo) / range * 255.0).round() as i64;
                g.clamp(0, 255).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
