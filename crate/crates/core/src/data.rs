//! Synthetic multi-tensor phantoms, normalisation, patches and the
//! training-example sampler.
//!
//! Intensities are held as `f64` in memory with layout `[X×Y×Z×V]`
//! row-major; the on-disk copy is little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    dot, farthest_point_subset, parse_bvecs, write_bvecs, Direction, GradientEntry, Rotation,
    Shell, Vec3,
};
use crate::model::INPUT_SLOTS;
use crate::pcconv::{AngularSample, QGrid};
use crate::{Error, Result};

/// Fibre orientation as a function of position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Fixed(Direction),
    /// Tangent of circles around `axis` through `center` (normalised coordinates).
    Tangential { center: Vec3, axis: Direction },
}

impl Orientation {
    pub fn at(&self, c: Vec3) -> Direction {
        match self {
            Orientation::Fixed(d) => *d,
            Orientation::Tangential { center, axis } => {
                let a = axis.unit();
                let r = [c[0] - center[0], c[1] - center[1], c[2] - center[2]];
                let t = [a[1] * r[2] - a[2] * r[1], a[2] * r[0] - a[0] * r[2], a[0] * r[1] - a[1] * r[0]];
                Direction::normalize(t).unwrap_or(*axis)
            }
        }
    }

    fn rotated(&self, rot: &Rotation) -> Self {
        match self {
            Orientation::Fixed(d) => Orientation::Fixed(rot.apply(d)),
            Orientation::Tangential { center, axis } => Orientation::Tangential {
                center: *center,
                axis: rot.apply(axis),
            },
        }
    }
}

/// One compartment: weight, orientation, diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fiber {
    pub weight: f64,
    pub orientation: Orientation,
    pub d_axial: f64,
    pub d_radial: f64,
}

impl Fiber {
    pub fn isotropic(weight: f64, d: f64) -> Self {
        Self {
            weight,
            orientation: Orientation::Fixed(Direction::placeholder()),
            d_axial: d,
            d_radial: d,
        }
    }

    /// `gᵀ D g` for unit `g` with `D = λ_r I + (λ_a − λ_r) v vᵀ`.
    pub fn adc(&self, v: &Direction, g: &Direction) -> f64 {
        let c = dot(v.unit(), g.unit());
        self.d_radial + (self.d_axial - self.d_radial) * c * c
    }
}

/// Spatial predicate in normalised coordinates `c = voxel / (size − 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Everywhere,
    Box { lo: Vec3, hi: Vec3 },
    /// Annulus around the z-parallel line through `center`, limited in z.
    Annulus { center: [f64; 2], r_in: f64, r_out: f64, z_lo: f64, z_hi: f64 },
}

impl Region {
    pub fn contains(&self, c: Vec3) -> bool {
        match self {
            Region::Everywhere => true,
            Region::Box { lo, hi } => (0..3).all(|d| c[d] >= lo[d] && c[d] <= hi[d]),
            Region::Annulus {
                center,
                r_in,
                r_out,
                z_lo,
                z_hi,
            } => {
                let r = (c[0] - center[0]).hypot(c[1] - center[1]);
                r >= *r_in && r <= *r_out && c[2] >= *z_lo && c[2] <= *z_hi
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub region: Region,
    pub fibers: Vec<Fiber>,
}

/// Regions are tested in order and the first match wins. Voxels inside the
/// ellipsoidal mask that match no region get `background`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub mask_radius: f64,
    pub regions: Vec<RegionSpec>,
    pub background: Vec<Fiber>,
    pub s0: f64,
    /// Rician noise standard deviation as a fraction of `s0`.
    pub noise_sigma: f64,
    pub seed: u64,
}

const WM_AXIAL: f64 = 1.7e-3;
const WM_RADIAL: f64 = 0.3e-3;

impl PhantomSpec {
    /// Two straight bundles crossing, one curved bundle and isotropic
    /// background. `seed` jitters bundle placement and orientation.
    pub fn standard(size: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_fa4e);
        let tilt = rng.random_range(0.05..0.25);
        let rot = {
            let axis = Direction::random(&mut rng).unit();
            let (s, c) = (tilt / 2.0_f64).sin_cos();
            Rotation::from_quaternion(c, s * axis[0], s * axis[1], s * axis[2])
        };
        let mut shift = || rng.random_range(-0.05..0.05);
        let wm = |orientation: Orientation, weight: f64| Fiber {
            weight,
            orientation: orientation.rotated(&rot),
            d_axial: WM_AXIAL,
            d_radial: WM_RADIAL,
        };
        let along_x = Orientation::Fixed(Direction::x());
        let along_y = Orientation::Fixed(Direction::y());
        let (za, xb) = (0.3 + shift(), 0.62 + shift());
        let slab_a = |lo: f64, hi: f64| Region::Box {
            lo: [lo, 0.0, za - 0.1],
            hi: [hi, 1.0, za + 0.1],
        };
        let curved_center = [0.5 + shift(), 0.5 + shift()];
        let regions = vec![
            RegionSpec {
                region: Region::Box {
                    lo: [xb - 0.1, 0.0, za - 0.1],
                    hi: [xb + 0.1, 1.0, za + 0.1],
                },
                fibers: vec![wm(along_x, 0.5), wm(along_y, 0.5)],
            },
            RegionSpec {
                region: slab_a(0.0, 1.0),
                fibers: vec![wm(along_x, 0.8), Fiber::isotropic(0.2, 0.9e-3)],
            },
            RegionSpec {
                region: Region::Box {
                    lo: [xb - 0.1, 0.0, 0.0],
                    hi: [xb + 0.1, 1.0, 0.55],
                },
                fibers: vec![wm(along_y, 0.8), Fiber::isotropic(0.2, 0.9e-3)],
            },
            RegionSpec {
                region: Region::Annulus {
                    center: curved_center,
                    r_in: 0.2,
                    r_out: 0.36,
                    z_lo: 0.6,
                    z_hi: 0.85,
                },
                fibers: vec![
                    wm(
                        Orientation::Tangential {
                            center: [curved_center[0], curved_center[1], 0.0],
                            axis: Direction::z(),
                        },
                        0.85,
                    ),
                    Fiber::isotropic(0.15, 0.9e-3),
                ],
            },
        ];
        Self {
            dims: [size; 3],
            mask_radius: 0.48,
            regions,
            background: vec![
                Fiber {
                    weight: 0.6,
                    orientation: Orientation::Fixed(rot.apply(&Direction::z())),
                    d_axial: 1.2e-3,
                    d_radial: 0.6e-3,
                },
                Fiber::isotropic(0.4, 1.0e-3),
            ],
            s0: 100.0,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidConfig("phantom dims must be ≥ 1".into()));
        }
        if !(self.s0 > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("s0 must be > 0 and noise ≥ 0".into()));
        }
        for fibers in self.regions.iter().map(|r| &r.fibers).chain([&self.background]) {
            if fibers.iter().any(|f| !(f.d_axial > 0.0 && f.d_radial > 0.0)) {
                return Err(Error::DegenerateDiffusivity(format!("{fibers:?}")));
            }
            let w: f64 = fibers.iter().map(|f| f.weight).sum();
            if (w - 1.0).abs() > 1e-9 || fibers.iter().any(|f| f.weight < 0.0) {
                return Err(Error::InvalidConfig(format!("fibre weights must be ≥ 0 and sum to 1, got {w}")));
            }
        }
        Ok(())
    }

    pub fn normalized(&self, voxel: [usize; 3]) -> Vec3 {
        std::array::from_fn(|d| {
            if self.dims[d] > 1 {
                voxel[d] as f64 / (self.dims[d] - 1) as f64
            } else {
                0.5
            }
        })
    }

    pub fn in_mask(&self, voxel: [usize; 3]) -> bool {
        let c = self.normalized(voxel);
        c.iter().map(|v| ((v - 0.5) / self.mask_radius).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn fibers_at(&self, voxel: [usize; 3]) -> &[Fiber] {
        let c = self.normalized(voxel);
        self.regions
            .iter()
            .find(|r| r.region.contains(c))
            .map(|r| r.fibers.as_slice())
            .unwrap_or(&self.background)
    }

    /// Noiseless signal `S0 Σ w_f exp(−b gᵀ D_f g)` at any voxel and direction.
    pub fn signal(&self, voxel: [usize; 3], bval: f64, g: &Direction) -> f64 {
        let c = self.normalized(voxel);
        self.s0
            * self
                .fibers_at(voxel)
                .iter()
                .map(|f| f.weight * (-bval * f.adc(&f.orientation.at(c), g)).exp())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSet {
    pub dims: [usize; 3],
    pub gradients: Vec<GradientEntry>,
    pub intensities: Vec<f64>,
    pub mask: Vec<bool>,
    pub norm: Option<NormalizationRecord>,
}

impl VolumeSet {
    pub fn new(dims: [usize; 3], gradients: Vec<GradientEntry>, intensities: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let nvox: usize = dims.iter().product();
        if mask.len() != nvox || intensities.len() != nvox * gradients.len() {
            return Err(Error::shape(
                "volume_set",
                format!(
                    "dims {dims:?}, {} volumes, {} values, {} mask entries",
                    gradients.len(),
                    intensities.len(),
                    mask.len()
                ),
            ));
        }
        Ok(Self {
            dims,
            gradients,
            intensities,
            mask,
            norm: None,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_volumes(&self) -> usize {
        self.gradients.len()
    }

    pub fn voxel_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn voxel_coords(&self, voxel: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [voxel / (ny * nz), (voxel / nz) % ny, voxel % nz]
    }

    pub fn value(&self, voxel: usize, volume: usize) -> f64 {
        self.intensities[voxel * self.n_volumes() + volume]
    }

    /// Distinct non-zero b-values in order of first appearance.
    pub fn shells(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for g in &self.gradients {
            if g.bval > 0.0 && !out.contains(&g.bval) {
                out.push(g.bval);
            }
        }
        out
    }

    /// Volume indices of shell `bval`.
    pub fn shell_volumes(&self, bval: f64) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.n_volumes()).filter(|&v| self.gradients[v].bval == bval).collect();
        if idx.is_empty() || bval == 0.0 {
            return Err(Error::MissingShell(bval));
        }
        Ok(idx)
    }

    /// Bounding box of the mask as inclusive voxel coordinates.
    pub fn mask_bbox(&self) -> Result<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for v in (0..self.n_voxels()).filter(|&v| self.mask[v]) {
            let c = self.voxel_coords(v);
            for d in 0..3 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        if lo[0] == usize::MAX {
            return Err(Error::EmptyMask);
        }
        Ok((lo, hi))
    }
}

/// Simulates every shell plus one leading `b = 0` volume.
pub fn generate_phantom(spec: &PhantomSpec, shells: &[Shell]) -> Result<VolumeSet> {
    spec.validate()?;
    let mut gradients = vec![GradientEntry {
        bval: 0.0,
        dir: Direction::placeholder(),
    }];
    for s in shells {
        gradients.extend(s.directions.iter().map(|&dir| GradientEntry { bval: s.bval, dir }));
    }
    let nvox: usize = spec.dims.iter().product();
    let nv = gradients.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma * spec.s0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut intensities = vec![0.0; nvox * nv];
    let mut mask = vec![false; nvox];
    for v in 0..nvox {
        let c = [v / (spec.dims[1] * spec.dims[2]), (v / spec.dims[2]) % spec.dims[1], v % spec.dims[2]];
        if !spec.in_mask(c) {
            continue;
        }
        mask[v] = true;
        for (k, g) in gradients.iter().enumerate() {
            let s = spec.signal(c, g.bval, &g.dir);
            intensities[v * nv + k] = if spec.noise_sigma > 0.0 {
                let (n1, n2) = (noise.sample(&mut rng), noise.sample(&mut rng));
                (s + n1).hypot(n2)
            } else {
                s
            };
        }
    }
    VolumeSet::new(spec.dims, gradients, intensities, mask)
}

/// Shells with Fibonacci-lattice directions, each under its own seeded
/// rotation.
pub fn fibonacci_shells(bvals: &[f64], n_dirs: usize, seed: u64) -> Vec<Shell> {
    bvals
        .iter()
        .enumerate()
        .map(|(i, &b)| Shell::fibonacci(b, n_dirs, seed.wrapping_add(i as u64 + 1)))
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Divides all intensities by the 99th percentile of masked `|values|`.
pub fn normalize_99(vols: &VolumeSet) -> Result<(VolumeSet, NormalizationRecord)> {
    let nv = vols.n_volumes();
    let mut masked: Vec<f64> = (0..vols.n_voxels())
        .filter(|&v| vols.mask[v])
        .flat_map(|v| vols.intensities[v * nv..(v + 1) * nv].iter().map(|x| x.abs()))
        .collect();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    let scale = percentile(&mut masked, 99.0);
    if !(scale > 0.0) {
        return Err(Error::ZeroData);
    }
    let rec = NormalizationRecord { scale };
    let mut out = vols.clone();
    for x in &mut out.intensities {
        *x /= scale;
    }
    out.norm = Some(rec);
    Ok((out, rec))
}

pub fn denormalize(vols: &VolumeSet, rec: &NormalizationRecord) -> VolumeSet {
    let mut out = vols.clone();
    for x in &mut out.intensities {
        *x *= rec.scale;
    }
    out.norm = None;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchDescriptor {
    pub origin: [usize; 3],
    pub size: usize,
    pub centroid: [f64; 3],
}

fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = dim - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Patch origins on a stride grid (plus a final flush origin per axis),
/// keeping those that intersect the mask.
pub fn extract_patches(vols: &VolumeSet, size: usize, stride: usize) -> Result<Vec<PatchDescriptor>> {
    if size == 0 || vols.dims.iter().any(|&d| d < size) {
        return Err(Error::InvalidConfig(format!(
            "patch size {size} does not fit volume {:?}",
            vols.dims
        )));
    }
    let (lo, hi) = vols.mask_bbox()?;
    let origins: Vec<Vec<usize>> = (0..3).map(|d| axis_origins(vols.dims[d], size, stride)).collect();
    let mut out = Vec::new();
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                let origin = [ox, oy, oz];
                let hit = (0..size.pow(3)).any(|i| {
                    let c = [ox + i / (size * size), oy + (i / size) % size, oz + i % size];
                    vols.mask[vols.voxel_index(c)]
                });
                if !hit {
                    continue;
                }
                let centroid = std::array::from_fn(|d| {
                    let center = origin[d] as f64 + (size as f64 - 1.0) / 2.0;
                    let extent = (hi[d] - lo[d]) as f64;
                    if extent == 0.0 {
                        0.5
                    } else {
                        ((center - lo[d] as f64) / extent).clamp(0.0, 1.0)
                    }
                });
                out.push(PatchDescriptor { origin, size, centroid });
            }
        }
    }
    Ok(out)
}

/// Values of `volumes` (in order) for every voxel of a patch, laid out as
/// `[voxel × slot]`, followed by `pad` zero slots per voxel.
pub fn gather_patch(vols: &VolumeSet, patch: &PatchDescriptor, volumes: &[usize], pad: usize) -> Vec<f64> {
    let s = patch.size;
    let width = volumes.len() + pad;
    let mut out = vec![0.0; s * s * s * width];
    for i in 0..s * s * s {
        let c = [
            patch.origin[0] + i / (s * s),
            patch.origin[1] + (i / s) % s,
            patch.origin[2] + i % s,
        ];
        let v = vols.voxel_index(c);
        for (k, &vol) in volumes.iter().enumerate() {
            out[i * width + k] = vols.value(v, vol);
        }
    }
    out
}

pub fn patch_mask(vols: &VolumeSet, patch: &PatchDescriptor) -> Vec<bool> {
    let s = patch.size;
    (0..s * s * s)
        .map(|i| {
            let c = [
                patch.origin[0] + i / (s * s),
                patch.origin[1] + (i / s) % s,
                patch.origin[2] + i % s,
            ];
            vols.mask[vols.voxel_index(c)]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub q_in_min: usize,
    pub q_in_max: usize,
    /// Output directions per example; `None` takes every remaining direction.
    pub q_out: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            patch_size: 10,
            stride: 5,
            q_in_min: 6,
            q_in_max: INPUT_SLOTS,
            q_out: None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_in_min == 0 || self.q_in_min > self.q_in_max || self.q_in_max > INPUT_SLOTS {
            return Err(Error::InvalidConfig(format!(
                "q_in range {}..={} must lie within 1..={INPUT_SLOTS}",
                self.q_in_min, self.q_in_max
            )));
        }
        if self.q_out == Some(0) || self.patch_size == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("q_out, patch size and stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch: PatchDescriptor,
    pub b_in: f64,
    pub b_out: f64,
    pub q_in: usize,
    /// Volume indices of the input and output directions.
    pub in_volumes: Vec<usize>,
    pub out_volumes: Vec<usize>,
    /// `[voxel × 20]`, zero beyond `q_in`.
    pub x_in: Vec<f64>,
    pub in_grid: QGrid,
    /// `[voxel × q_out]`.
    pub x_out: Vec<f64>,
    pub out_grid: QGrid,
    /// Target validity, `[voxel × q_out]`.
    pub valid: Vec<bool>,
}

impl PatchPair {
    pub fn centroid(&self) -> [f64; 3] {
        self.patch.centroid
    }
}

/// Input grid of `volumes` zero-filled to `slots` entries.
pub fn angular_grid(vols: &VolumeSet, size: usize, volumes: &[usize], slots: usize) -> QGrid {
    let mut s: Vec<AngularSample> = volumes
        .iter()
        .map(|&v| AngularSample::new(vols.gradients[v].bval, vols.gradients[v].dir))
        .collect();
    s.resize(slots.max(volumes.len()), AngularSample::padding());
    QGrid::new([size; 3], s)
}

/// Input and output direction subsets for one draw. Each set is a greedy
/// spread from its own random start; on a shared shell the output set is
/// drawn from the directions not used as inputs.
pub fn sample_directions<R: Rng + ?Sized>(
    vols: &VolumeSet,
    b_in: f64,
    b_out: f64,
    q_in: usize,
    q_out: Option<usize>,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let in_shell = vols.shell_volumes(b_in)?;
    let dirs_in: Vec<Direction> = in_shell.iter().map(|&v| vols.gradients[v].dir).collect();
    let q0 = rng.random_range(0..dirs_in.len());
    let inputs: Vec<usize> = farthest_point_subset(&dirs_in, q0, q_in.min(dirs_in.len()))?
        .into_iter()
        .map(|i| in_shell[i])
        .collect();
    let candidates: Vec<usize> = vols
        .shell_volumes(b_out)?
        .into_iter()
        .filter(|v| !inputs.contains(v))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Protocol(format!("no output directions left on shell {b_out}")));
    }
    let dirs_out: Vec<Direction> = candidates.iter().map(|&v| vols.gradients[v].dir).collect();
    let n = q_out.unwrap_or(dirs_out.len()).min(dirs_out.len());
    let q0 = rng.random_range(0..dirs_out.len());
    let outputs = farthest_point_subset(&dirs_out, q0, n)?
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok((inputs, outputs))
}

/// Draws one example; fully determined by `seed`.
pub fn sample_training_example(
    vols: &VolumeSet,
    patches: &[PatchDescriptor],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<PatchPair> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyMask);
    }
    let shells = vols.shells();
    if shells.is_empty() {
        return Err(Error::MissingShell(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = patches[rng.random_range(0..patches.len())];
    let b_in = shells[rng.random_range(0..shells.len())];
    let b_out = shells[rng.random_range(0..shells.len())];
    let q_in = rng.random_range(cfg.q_in_min..=cfg.q_in_max);
    let (in_volumes, out_volumes) = sample_directions(vols, b_in, b_out, q_in, cfg.q_out, &mut rng)?;
    let q_in = in_volumes.len();

    let x_in = gather_patch(vols, &patch, &in_volumes, INPUT_SLOTS - q_in);
    let x_out = gather_patch(vols, &patch, &out_volumes, 0);
    let mask = patch_mask(vols, &patch);
    let valid = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, out_volumes.len()))
        .collect();
    Ok(PatchPair {
        patch,
        b_in,
        b_out,
        q_in,
        in_grid: angular_grid(vols, patch.size, &in_volumes, INPUT_SLOTS),
        out_grid: angular_grid(vols, patch.size, &out_volumes, 0),
        in_volumes,
        out_volumes,
        x_in,
        x_out,
        valid,
    })
}

/// Contents of `header.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dims: [usize; 3],
    pub n_volumes: usize,
    pub dtype: String,
    pub shells: Vec<f64>,
    /// `[x, y, z, b]` per volume.
    pub directions: Vec<[f64; 4]>,
    pub norm_scale: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub const HEADER_FILE: &str = "header.json";
pub const INTENSITY_FILE: &str = "intensities.f32";
pub const MASK_FILE: &str = "mask.u8";
pub const BVECS_FILE: &str = "bvecs";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, vols: &VolumeSet, seed: Option<u64>, extra: BTreeMap<String, serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = DatasetHeader {
        dims: vols.dims,
        n_volumes: vols.n_volumes(),
        dtype: "float32".into(),
        shells: vols.shells(),
        directions: vols
            .gradients
            .iter()
            .map(|g| {
                let u = g.dir.unit();
                [u[0], u[1], u[2], g.bval]
            })
            .collect(),
        norm_scale: vols.norm.map(|n| n.scale),
        seed,
        extra,
    };
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    write(&dir.join(HEADER_FILE), json.as_bytes())?;
    let bytes: Vec<u8> = vols.intensities.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    write(&dir.join(INTENSITY_FILE), &bytes)?;
    let mask: Vec<u8> = vols.mask.iter().map(|&m| m as u8).collect();
    write(&dir.join(MASK_FILE), &mask)?;
    write(&dir.join(BVECS_FILE), write_bvecs(&vols.gradients).as_bytes())
}

pub fn read_header(dir: &Path) -> Result<DatasetHeader> {
    let bytes = read(&dir.join(HEADER_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<VolumeSet> {
    let header = read_header(dir)?;
    if header.dtype != "float32" {
        return Err(Error::Parse(format!("unsupported dtype {}", header.dtype)));
    }
    let bvecs_path = dir.join(BVECS_FILE);
    let text = fs::read_to_string(&bvecs_path).map_err(|e| Error::io(&bvecs_path, e))?;
    let gradients = parse_bvecs(&text)?;
    if gradients.len() != header.n_volumes {
        return Err(Error::Parse(format!(
            "bvecs lists {} volumes, header {}",
            gradients.len(),
            header.n_volumes
        )));
    }
    let bytes = read(&dir.join(INTENSITY_FILE))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse("intensity file length is not a multiple of 4".into()));
    }
    let intensities = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mask = read(&dir.join(MASK_FILE))?.into_iter().map(|b| b != 0).collect();
    let mut vols = VolumeSet::new(header.dims, gradients, intensities, mask)?;
    vols.norm = header.norm_scale.map(|scale| NormalizationRecord { scale });
    Ok(vols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tiny(noise: f64, seed: u64) -> (PhantomSpec, VolumeSet) {
        let spec = PhantomSpec::standard(12, noise, seed);
        let shells = fibonacci_shells(&[1000.0, 2000.0, 3000.0], 30, seed);
        let vols = generate_phantom(&spec, &shells).unwrap();
        (spec, vols)
    }

    #[test]
    fn b0_is_s0_and_isotropic_is_analytic() {
        let (spec, vols) = tiny(0.0, 1);
        for v in (0..vols.n_voxels()).filter(|&v| vols.mask[v]) {
            assert_eq!(vols.value(v, 0), spec.s0);
        }
        let iso = PhantomSpec {
            regions: vec![],
            background: vec![Fiber::isotropic(1.0, 0.8e-3)],
            ..spec.clone()
        };
        let shells = fibonacci_shells(&[2000.0], 10, 0);
        let v = generate_phantom(&iso, &shells).unwrap();
        let want = iso.s0 * (-2000.0 * 0.8e-3_f64).exp();
        let centre = v.voxel_index([6, 6, 6]);
        for k in 1..=10 {
            assert!((v.value(centre, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_fibre_matches_direct_formula() {
        let spec = PhantomSpec {
            regions: vec![],
            background: vec![Fiber {
                weight: 1.0,
                orientation: Orientation::Fixed(Direction::normalize([1.0, 2.0, 0.5]).unwrap()),
                d_axial: 1.7e-3,
                d_radial: 0.2e-3,
            }],
            ..PhantomSpec::standard(5, 0.0, 0)
        };
        let shells = fibonacci_shells(&[1000.0], 90, 3);
        let vols = generate_phantom(&spec, &shells).unwrap();
        let v = vols.voxel_index([2, 2, 2]);
        let fdir = Direction::normalize([1.0, 2.0, 0.5]).unwrap().unit();
        for k in 1..=90 {
            let g = vols.gradients[k].dir.unit();
            // D as an explicit matrix
            let d: [[f64; 3]; 3] = std::array::from_fn(|i| {
                std::array::from_fn(|j| 0.2e-3 * (i == j) as u8 as f64 + 1.5e-3 * fdir[i] * fdir[j])
            });
            let q: f64 = (0..3).map(|i| (0..3).map(|j| g[i] * d[i][j] * g[j]).sum::<f64>()).sum();
            assert!((vols.value(v, k) - spec.s0 * (-1000.0 * q).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_diffusivity_rejected() {
        let mut spec = PhantomSpec::standard(6, 0.0, 0);
        spec.background[0].d_radial = 0.0;
        assert!(matches!(generate_phantom(&spec, &[]), Err(Error::DegenerateDiffusivity(_))));
    }

    #[test]
    fn phantom_is_seeded_and_noise_is_rician() {
        let (_, a) = tiny(0.02, 4);
        let (_, b) = tiny(0.02, 4);
        assert_eq!(a, b);
        let (_, clean) = tiny(0.0, 4);
        assert!(a.intensities.iter().all(|&x| x >= 0.0));
        assert_ne!(a.intensities, clean.intensities);
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        // numpy linear: h = (n − 1)·q
        let h = 999.0 * 0.99;
        let want = sorted[989] + (h - 989.0) * (sorted[990] - sorted[989]);
        assert!((percentile(&mut vals.clone(), 99.0) - want).abs() < 1e-12);
        assert_eq!(percentile(&mut [3.0], 99.0), 3.0);
    }

    #[test]
    fn normalization_properties() {
        let (_, vols) = tiny(0.02, 2);
        let (n, rec) = normalize_99(&vols).unwrap();
        let (n2, rec2) = normalize_99(&n).unwrap();
        assert!((rec2.scale - 1.0).abs() < 1e-12);
        assert!(n.intensities.iter().zip(&n2.intensities).all(|(a, b)| (a - b).abs() < 1e-12));
        let back = denormalize(&n, &rec);
        for (a, b) in back.intensities.iter().zip(&vols.intensities) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
        let c = VolumeSet::new([2, 1, 1], vols.gradients[..1].to_vec(), vec![4.0, 4.0], vec![true, true]).unwrap();
        assert!(normalize_99(&c).unwrap().0.intensities.iter().all(|&x| x == 1.0));
        let z = VolumeSet::new([2, 1, 1], vols.gradients[..1].to_vec(), vec![0.0, 0.0], vec![true, true]).unwrap();
        assert!(matches!(normalize_99(&z), Err(Error::ZeroData)));
    }

    fn full(dims: [usize; 3]) -> VolumeSet {
        let n: usize = dims.iter().product();
        let g = vec![GradientEntry {
            bval: 0.0,
            dir: Direction::placeholder(),
        }];
        VolumeSet::new(dims, g, vec![1.0; n], vec![true; n]).unwrap()
    }

    #[test]
    fn patch_grid_examples() {
        let p = extract_patches(&full([10, 10, 10]), 10, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].centroid, [0.5, 0.5, 0.5]);
        assert_eq!(extract_patches(&full([20, 20, 20]), 10, 10).unwrap().len(), 8);
        assert_eq!(extract_patches(&full([25, 10, 10]), 10, 10).unwrap().len(), 3);
    }

    #[test]
    fn patches_intersect_random_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = full([16, 14, 12]);
        for m in &mut v.mask {
            *m = rng.random_bool(0.01);
        }
        v.mask[0] = true;
        let patches = extract_patches(&v, 6, 4).unwrap();
        assert!(!patches.is_empty());
        for p in &patches {
            assert!(patch_mask(&v, p).iter().any(|&m| m));
            assert!(p.centroid.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        // every masked voxel is covered
        for vox in (0..v.n_voxels()).filter(|&i| v.mask[i]) {
            let c = v.voxel_coords(vox);
            assert!(patches.iter().any(|p| (0..3).all(|d| c[d] >= p.origin[d] && c[d] < p.origin[d] + 6)));
        }
    }

    #[test]
    fn training_examples() {
        let (_, vols) = tiny(0.0, 3);
        let patches = extract_patches(&vols, 6, 6).unwrap();
        let cfg = SamplingConfig {
            patch_size: 6,
            q_out: Some(8),
            ..SamplingConfig::default()
        };
        let a = sample_training_example(&vols, &patches, &cfg, 11).unwrap();
        assert_eq!(a, sample_training_example(&vols, &patches, &cfg, 11).unwrap());
        for seed in 0..50 {
            let e = sample_training_example(&vols, &patches, &cfg, seed).unwrap();
            assert!((6..=20).contains(&e.q_in));
            assert_eq!(e.in_grid.n_slots(), INPUT_SLOTS);
            assert_eq!(e.out_grid.n_slots(), 8);
            let mut seen = e.in_volumes.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), e.q_in);
            if e.b_in == e.b_out {
                assert!(e.out_volumes.iter().all(|v| !e.in_volumes.contains(v)));
            }
            for v in 0..216 {
                for s in 0..20 {
                    let pad = e.in_grid.slots[s].padding;
                    assert_eq!(pad, s >= e.q_in);
                    if pad {
                        assert_eq!(e.x_in[v * 20 + s], 0.0);
                    }
                }
            }
        }
        let full_q = SamplingConfig {
            q_in_min: 20,
            patch_size: 6,
            ..SamplingConfig::default()
        };
        let e = sample_training_example(&vols, &patches, &full_q, 1).unwrap();
        assert!(e.in_grid.slots.iter().all(|s| !s.padding));
        if e.b_in == e.b_out {
            assert_eq!(e.out_volumes.len(), 10);
        } else {
            assert_eq!(e.out_volumes.len(), 30);
        }
    }

    #[test]
    fn q_in_is_uniform() {
        let (_, vols) = tiny(0.0, 3);
        let patches = extract_patches(&vols, 6, 6).unwrap();
        let cfg = SamplingConfig {
            patch_size: 6,
            q_out: Some(1),
            ..SamplingConfig::default()
        };
        let mut counts = [0usize; 15];
        let n = 10_000;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // same draw order as sample_training_example
            let _ = rng.random_range(0..patches.len());
            let _ = rng.random_range(0..3);
            let _ = rng.random_range(0..3);
            counts[rng.random_range(cfg.q_in_min..=cfg.q_in_max) - 6] += 1;
        }
        let e = n as f64 / 15.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(14.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
        let first = sample_training_example(&vols, &patches, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = rng.random_range(0..patches.len());
        let _ = rng.random_range(0..3);
        let _ = rng.random_range(0..3);
        assert_eq!(first.q_in, rng.random_range(6..=20));
    }

    #[test]
    fn dataset_round_trip() {
        let (_, vols) = tiny(0.02, 6);
        let (vols, _) = normalize_99(&vols).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &vols, Some(6), BTreeMap::new()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.dims, vols.dims);
        assert_eq!(back.mask, vols.mask);
        assert_eq!(back.norm, vols.norm);
        assert_eq!(back.n_volumes(), 91);
        for (a, b) in back.intensities.iter().zip(&vols.intensities) {
            assert_eq!(*a as f32, *b as f32);
        }
        let h = read_header(dir.path()).unwrap();
        assert_eq!(h.shells, vec![1000.0, 2000.0, 3000.0]);
    }
}
