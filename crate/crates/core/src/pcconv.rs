//! Parametric continuous convolution over q-space.
//!
//! A layer maps features on an input point set to features on an output
//! point set. Both sets live on the same regular spatial grid and differ only
//! in their angular samples ([`QGrid`]). For each output point the
//! neighbourhood is the cross product of the grid voxels within the spatial
//! extent (truncated at the patch border) and the `k_q` angularly nearest
//! non-padding input directions. A radius mask `d_ang ≤ d_max` multiplies
//! every weight·feature product.
//!
//! Weights come from a per-layer hypernetwork applied to the embedding of
//! each pair. Because the embedding only depends on (spatial offset, input
//! slot, output slot), the hypernetwork is evaluated once per distinct
//! triple and the result is shared by every voxel.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_centroid, embed, EmbeddingConfig};
use crate::geometry::{d_ang, k_nearest_angular, Direction, QSpacePoint};
use crate::tensor::{Contraction, PairPlanBuilder, PairPlan, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Negative slope of the hypernetwork activations.
pub const HYPERNET_SLOPE: f64 = 0.1;

/// Angular coordinate of one slot of a [`QGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularSample {
    pub rho: f64,
    pub dir: Direction,
    /// Zero-filled slot; never part of any neighbourhood.
    pub padding: bool,
}

impl AngularSample {
    pub fn new(rho: f64, dir: Direction) -> Self {
        Self {
            rho,
            dir,
            padding: false,
        }
    }

    pub fn padding() -> Self {
        Self {
            rho: 0.0,
            dir: Direction::placeholder(),
            padding: true,
        }
    }
}

/// Point set `voxels × slots`. Row `r` of a feature matrix on this grid is
/// voxel `r / slots.len()` (row-major over `dims`) and slot `r % slots.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct QGrid {
    pub dims: [usize; 3],
    pub slots: Vec<AngularSample>,
}

impl QGrid {
    pub fn new(dims: [usize; 3], slots: Vec<AngularSample>) -> Self {
        Self { dims, slots }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_voxels() * self.n_slots()
    }

    pub fn voxel_coords(&self, voxel: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [voxel / (ny * nz), (voxel / nz) % ny, voxel % nz]
    }

    pub fn voxel_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn point(&self, row: usize) -> QSpacePoint {
        let s = &self.slots[row % self.n_slots()];
        let c = self.voxel_coords(row / self.n_slots());
        QSpacePoint::new(c[0] as f64, c[1] as f64, c[2] as f64, s.rho, s.dir)
    }

    pub fn points(&self) -> Vec<QSpacePoint> {
        (0..self.n_points()).map(|r| self.point(r)).collect()
    }

    pub fn padding_mask(&self) -> Vec<bool> {
        (0..self.n_points())
            .map(|r| self.slots[r % self.n_slots()].padding)
            .collect()
    }
}

/// Geometric part of a layer: spatial extent per axis, angular kernel size
/// and angular radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelGeometry {
    pub extent: [usize; 3],
    pub k_q: usize,
    pub d_max: f64,
}

impl KernelGeometry {
    pub fn pointwise(k_q: usize, d_max: f64) -> Self {
        Self {
            extent: [1, 1, 1],
            k_q,
            d_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e == 0 || e % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "spatial extents must be odd, got {:?}",
                self.extent
            )));
        }
        if self.k_q == 0 {
            return Err(Error::InvalidConfig("k_q must be ≥ 1".into()));
        }
        if !(self.d_max > 0.0 && self.d_max <= PI) {
            return Err(Error::InvalidConfig(format!(
                "d_max must lie in (0, π], got {}",
                self.d_max
            )));
        }
        Ok(())
    }
}

/// How the hypernetwork output is turned into a `C → K` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// The hypernetwork emits all `C·K` kernel weights.
    Full,
    /// `C` weights per pair followed by a `C×K` projection.
    PerChannel,
    /// One weight per pair followed by a `C×K` projection.
    Scalar,
}

impl WeightMode {
    pub fn head_dim(self, c_in: usize, c_out: usize) -> usize {
        match self {
            WeightMode::Full => c_in * c_out,
            WeightMode::PerChannel => c_in,
            WeightMode::Scalar => 1,
        }
    }

    fn contraction(self, c_out: usize) -> Contraction {
        match self {
            WeightMode::Full => Contraction::Full {
                out_channels: c_out,
            },
            WeightMode::PerChannel => Contraction::PerChannel,
            WeightMode::Scalar => Contraction::Scalar,
        }
    }

    pub fn has_projection(self) -> bool {
        !matches!(self, WeightMode::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PCConvLayerConfig {
    pub geometry: KernelGeometry,
    pub c_in: usize,
    pub c_out: usize,
    /// Hidden width of the hypernetwork.
    pub hidden: usize,
    pub weight_mode: WeightMode,
    pub embedding: EmbeddingConfig,
}

impl PCConvLayerConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.embedding.validate()?;
        if self.c_in == 0 || self.c_out == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "channel counts and hidden width must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Pairs contributing to each output point, with one embedding row per
/// distinct (offset, output slot, neighbour rank) entry.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    plan: Arc<PairPlan>,
    embeddings: Vec<f64>,
    width: usize,
}

impl Neighborhood {
    pub fn plan(&self) -> &Arc<PairPlan> {
        &self.plan
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of distinct hypernetwork inputs.
    pub fn n_entries(&self) -> usize {
        self.plan.n_entries()
    }

    pub fn embedding(&self, entry: usize) -> &[f64] {
        &self.embeddings[entry * self.width..(entry + 1) * self.width]
    }

    pub fn embeddings<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![self.n_entries(), self.width], &self.embeddings)
            .expect("embedding table is rectangular")
    }

    /// Pair list of output point `j` as `(input point, entry, mask)`.
    pub fn pairs(&self, j: usize) -> Vec<(usize, usize, bool)> {
        self.plan.row(j).collect()
    }

    /// The same neighbourhood with masked pairs dropped before summation.
    pub fn without_masked(&self) -> Self {
        Self {
            plan: Arc::new(self.plan.without_masked()),
            embeddings: self.embeddings.clone(),
            width: self.width,
        }
    }
}

fn offsets_for(extent: [usize; 3], dims: [usize; 3]) -> Vec<[isize; 3]> {
    let range = |axis: usize| {
        let r = (extent[axis] / 2) as isize;
        let limit = dims[axis] as isize - 1;
        (-r..=r).filter(move |d| d.abs() <= limit)
    };
    let mut out = Vec::new();
    for du in range(0) {
        for dv in range(1) {
            for dw in range(2) {
                out.push([du, dv, dw]);
            }
        }
    }
    out
}

/// Builds the pair lists and embedding table for a layer mapping `x` to `y`.
pub fn build_neighborhood(
    x: &QGrid,
    y: &QGrid,
    geometry: &KernelGeometry,
    embedding: &EmbeddingConfig,
    centroid: Option<[f64; 3]>,
) -> Result<Neighborhood> {
    geometry.validate()?;
    if x.dims != y.dims {
        return Err(Error::shape(
            "build_neighborhood",
            format!("input grid {:?} vs output grid {:?}", x.dims, y.dims),
        ));
    }
    let centroid = check_centroid(embedding.variant, centroid)?;

    let live: Vec<usize> = (0..x.n_slots()).filter(|&s| !x.slots[s].padding).collect();
    let live_dirs: Vec<Direction> = live.iter().map(|&s| x.slots[s].dir).collect();
    // angular[a] = (input slot, mask bit) ordered by distance
    let angular: Vec<Vec<(usize, bool)>> = y
        .slots
        .iter()
        .map(|ys| {
            k_nearest_angular(&ys.dir, &live_dirs, geometry.k_q, PI)
                .into_iter()
                .map(|i| (live[i], d_ang(&ys.dir, &live_dirs[i]) <= geometry.d_max))
                .collect()
        })
        .collect();

    let offsets = offsets_for(geometry.extent, x.dims);
    let width = embedding.width();
    let mut entry_base = vec![0usize; offsets.len() * y.n_slots()];
    let mut n_entries = 0;
    let mut embeddings = Vec::new();
    for (o, off) in offsets.iter().enumerate() {
        for (a, ys) in y.slots.iter().enumerate() {
            entry_base[o * y.n_slots() + a] = n_entries;
            let yp = QSpacePoint::new(0.0, 0.0, 0.0, ys.rho, ys.dir);
            for &(s, _) in &angular[a] {
                let xs = &x.slots[s];
                let xp = QSpacePoint::new(off[0] as f64, off[1] as f64, off[2] as f64, xs.rho, xs.dir);
                embeddings.extend(embed(&xp, &yp, embedding, centroid)?);
                n_entries += 1;
            }
        }
    }

    let mut builder = PairPlanBuilder::new(x.n_points(), n_entries);
    for vy in 0..y.n_voxels() {
        let cy = y.voxel_coords(vy);
        for (a, ang) in angular.iter().enumerate() {
            let out_row = vy * y.n_slots() + a;
            let mut any = false;
            for (o, off) in offsets.iter().enumerate() {
                let c: [isize; 3] = std::array::from_fn(|d| cy[d] as isize + off[d]);
                if (0..3).any(|d| c[d] < 0 || c[d] >= x.dims[d] as isize) {
                    continue;
                }
                let vx = x.voxel_index([c[0] as usize, c[1] as usize, c[2] as usize]);
                let base = entry_base[o * y.n_slots() + a];
                for (rank, &(s, m)) in ang.iter().enumerate() {
                    builder.push(vx * x.n_slots() + s, base + rank, m)?;
                    any = true;
                }
            }
            if !any {
                return Err(Error::EmptyNeighborhood { index: out_row });
            }
            builder.finish_row();
        }
    }
    Ok(Neighborhood {
        plan: Arc::new(builder.build()),
        embeddings,
        width,
    })
}

fn uniform_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Dense layer parameters `(weight [in×out], bias [out])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Weights and biases drawn from `U(−√(1/fan_in), √(1/fan_in))`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(rng, vec![fan_in, fan_out], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), uniform_tensor(rng, vec![fan_out], fan_in));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

/// Kernel function `g(e; θ)`: two leaky-ReLU dense layers shared by one or
/// more linear output heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    pub dense1: Dense,
    pub dense2: Dense,
    pub heads: Vec<Dense>,
}

impl HyperNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_width: usize,
        hidden: usize,
        head_dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let dense1 = Dense::new(store, &format!("{name}.dense1"), in_width, hidden, rng);
        let dense2 = Dense::new(store, &format!("{name}.dense2"), hidden, hidden, rng);
        let heads = head_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let label = if head_dims.len() == 1 {
                    format!("{name}.out")
                } else {
                    format!("{name}.out{i}")
                };
                Dense::new(store, &label, hidden, d, rng)
            })
            .collect();
        Self {
            dense1,
            dense2,
            heads,
        }
    }

    pub fn in_width(&self) -> usize {
        self.dense1.fan_in
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for d in [&self.dense1, &self.dense2].into_iter().chain(&self.heads) {
            out.push(d.weight);
            out.push(d.bias);
        }
        out
    }

    /// Batched evaluation of head `head` on the rows of `embeddings`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embeddings: Var,
        head: usize,
    ) -> Result<Var> {
        let cols = tape.value(embeddings).cols();
        if cols != self.in_width() {
            return Err(Error::shape(
                "hypernet",
                format!("embedding width {cols}, hypernet expects {}", self.in_width()),
            ));
        }
        let slope = T::of(HYPERNET_SLOPE);
        let h = self.dense1.forward(tape, store, embeddings)?;
        let h = tape.leaky_relu(h, slope)?;
        let h = self.dense2.forward(tape, store, h)?;
        let h = tape.leaky_relu(h, slope)?;
        self.heads[head].forward(tape, store, h)
    }
}

/// Kernel weights for every embedding row: `g(e; θ)`.
pub fn sample_weights<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    hypernet: &HyperNet,
    embeddings: &Tensor<T>,
    head: usize,
) -> Result<Var> {
    let e = tape.input(embeddings.clone());
    hypernet.forward(tape, store, e, head)
}

/// Inference-time memo of sampled weights keyed by quantised embeddings.
///
/// Entries are only valid for the parameter values they were computed
/// with; call [`WeightCache::clear`] after any update.
#[derive(Debug, Default)]
pub struct WeightCache<T> {
    map: RwLock<HashMap<(u64, Vec<i64>), Vec<T>>>,
    hits: AtomicUsize,
    evaluations: AtomicUsize,
}

/// Quantisation step of cache keys.
pub const CACHE_QUANTUM: f64 = 1e-9;

impl<T: Real> WeightCache<T> {
    pub fn new() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn key(embedding: &[f64]) -> Vec<i64> {
        embedding
            .iter()
            .map(|v| (v / CACHE_QUANTUM).round() as i64)
            .collect()
    }

    pub fn lookup(&self, tag: u64, embedding: &[f64]) -> Option<Vec<T>> {
        let map = self.map.read().expect("cache lock");
        let hit = map.get(&(tag, Self::key(embedding))).cloned();
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Hypernetwork rows evaluated through this cache.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock").clear();
    }

    /// Weights for every entry of `nbhd`, evaluating the hypernetwork only
    /// on rows not seen before under `tag`.
    pub fn sample(
        &self,
        tag: u64,
        store: &ParamStore<T>,
        hypernet: &HyperNet,
        nbhd: &Neighborhood,
        head: usize,
    ) -> Result<Tensor<T>> {
        let n = nbhd.n_entries();
        let mut rows: Vec<Option<Vec<T>>> = (0..n).map(|e| self.lookup(tag, nbhd.embedding(e))).collect();
        let missing: Vec<usize> = (0..n).filter(|&e| rows[e].is_none()).collect();
        let mut dim = rows.iter().flatten().next().map(|r| r.len());
        if !missing.is_empty() {
            let mut data = Vec::with_capacity(missing.len() * nbhd.width());
            for &e in &missing {
                data.extend(nbhd.embedding(e).iter().map(|&v| T::of(v)));
            }
            let emb = Tensor::new(vec![missing.len(), nbhd.width()], data)?;
            let mut tape = Tape::new();
            let w = sample_weights(&mut tape, store, hypernet, &emb, head)?;
            let out = tape.value(w);
            let d = out.cols();
            dim = Some(d);
            self.evaluations.fetch_add(missing.len(), Ordering::Relaxed);
            let mut map = self.map.write().expect("cache lock");
            for (k, &e) in missing.iter().enumerate() {
                let row = out.data()[k * d..(k + 1) * d].to_vec();
                map.insert((tag, Self::key(nbhd.embedding(e))), row.clone());
                rows[e] = Some(row);
            }
        }
        let d = dim.unwrap_or(0);
        let data = rows.into_iter().flat_map(|r| r.expect("filled")).collect();
        Tensor::new(vec![n, d], data)
    }
}

/// One PCConv layer with its own hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct PCConvLayer {
    pub cfg: PCConvLayerConfig,
    pub hypernet: HyperNet,
    pub w_out: Option<ParamId>,
}

impl PCConvLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: PCConvLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let head = cfg.weight_mode.head_dim(cfg.c_in, cfg.c_out);
        let hypernet = HyperNet::new(
            store,
            &format!("{name}.hypernet"),
            cfg.embedding.width(),
            cfg.hidden,
            &[head],
            rng,
        );
        let w_out = cfg.weight_mode.has_projection().then(|| {
            store.add(
                format!("{name}.w_out"),
                uniform_tensor(rng, vec![cfg.c_in, cfg.c_out], cfg.c_in),
            )
        });
        Ok(Self {
            cfg,
            hypernet,
            w_out,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        nbhd: &Neighborhood,
    ) -> Result<Var> {
        let weights = sample_weights(tape, store, &self.hypernet, &nbhd.embeddings(), 0)?;
        apply_pass(tape, store, features, weights, nbhd, self.cfg.weight_mode, self.cfg.c_out, self.w_out)
    }

    /// Forward pass with weights taken from `cache`; no gradient reaches the
    /// hypernetwork.
    pub fn forward_cached<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        nbhd: &Neighborhood,
        cache: &WeightCache<T>,
        tag: u64,
    ) -> Result<Var> {
        let w = cache.sample(tag, store, &self.hypernet, nbhd, 0)?;
        let weights = tape.input(w);
        apply_pass(tape, store, features, weights, nbhd, self.cfg.weight_mode, self.cfg.c_out, self.w_out)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_pass<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    features: Var,
    weights: Var,
    nbhd: &Neighborhood,
    mode: WeightMode,
    c_out: usize,
    w_out: Option<ParamId>,
) -> Result<Var> {
    if tape.value(features).rows() != nbhd.plan.n_in() {
        return Err(Error::shape(
            "pcconv",
            format!(
                "{} feature rows for {} input points",
                tape.value(features).rows(),
                nbhd.plan.n_in()
            ),
        ));
    }
    let t = tape.contract(features, weights, nbhd.plan.clone(), mode.contraction(c_out))?;
    match w_out {
        Some(w) => {
            let w = tape.param(store, w);
            tape.matmul(t, w)
        }
        None => Ok(t),
    }
}

/// Neighbourhoods of the four passes of an axis-factorised layer.
#[derive(Debug, Clone)]
pub struct AxisNeighborhoods {
    pub passes: [Neighborhood; 4],
}

/// Passes `(3,1,1,1)`, `(1,3,1,1)`, `(1,1,3,1)` on `x`'s angular set, then
/// `(1,1,1,k_q)` from `x` to `y`.
pub fn build_axis_neighborhoods(
    x: &QGrid,
    y: &QGrid,
    geometry: &KernelGeometry,
    embedding: &EmbeddingConfig,
    centroid: Option<[f64; 3]>,
) -> Result<AxisNeighborhoods> {
    let spatial = |axis: usize| {
        let mut extent = [1, 1, 1];
        extent[axis] = geometry.extent[axis];
        KernelGeometry {
            extent,
            k_q: 1,
            d_max: geometry.d_max,
        }
    };
    let angular = KernelGeometry::pointwise(geometry.k_q, geometry.d_max);
    Ok(AxisNeighborhoods {
        passes: [
            build_neighborhood(x, x, &spatial(0), embedding, centroid)?,
            build_neighborhood(x, x, &spatial(1), embedding, centroid)?,
            build_neighborhood(x, x, &spatial(2), embedding, centroid)?,
            build_neighborhood(x, y, &angular, embedding, centroid)?,
        ],
    })
}

/// A `3×3×3×k_q` kernel factorised into four sequential passes sharing one
/// hypernetwork trunk with one output head per pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFactorizedLayer {
    pub cfg: PCConvLayerConfig,
    pub hypernet: HyperNet,
    pub w_out: [Option<ParamId>; 4],
}

impl AxisFactorizedLayer {
    fn pass_channels(cfg: &PCConvLayerConfig, pass: usize) -> (usize, usize) {
        if pass == 0 {
            (cfg.c_in, cfg.c_out)
        } else {
            (cfg.c_out, cfg.c_out)
        }
    }

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: PCConvLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let heads: Vec<usize> = (0..4)
            .map(|p| {
                let (ci, co) = Self::pass_channels(&cfg, p);
                cfg.weight_mode.head_dim(ci, co)
            })
            .collect();
        let hypernet = HyperNet::new(
            store,
            &format!("{name}.hypernet"),
            cfg.embedding.width(),
            cfg.hidden,
            &heads,
            rng,
        );
        let w_out = std::array::from_fn(|p| {
            let (ci, co) = Self::pass_channels(&cfg, p);
            cfg.weight_mode
                .has_projection()
                .then(|| store.add(format!("{name}.w_out{p}"), uniform_tensor(rng, vec![ci, co], ci)))
        });
        Ok(Self { cfg, hypernet, w_out })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        nbhds: &AxisNeighborhoods,
    ) -> Result<Var> {
        let mut h = features;
        for (p, nbhd) in nbhds.passes.iter().enumerate() {
            let weights = sample_weights(tape, store, &self.hypernet, &nbhd.embeddings(), p)?;
            let (_, co) = Self::pass_channels(&self.cfg, p);
            h = apply_pass(tape, store, h, weights, nbhd, self.cfg.weight_mode, co, self.w_out[p])?;
        }
        Ok(h)
    }

    /// Cached forward pass; pass `p` is stored under tag `tag + p`.
    pub fn forward_cached<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: Var,
        nbhds: &AxisNeighborhoods,
        cache: &WeightCache<T>,
        tag: u64,
    ) -> Result<Var> {
        let mut h = features;
        for (p, nbhd) in nbhds.passes.iter().enumerate() {
            let w = cache.sample(tag + p as u64, store, &self.hypernet, nbhd, p)?;
            let weights = tape.input(w);
            let (_, co) = Self::pass_channels(&self.cfg, p);
            h = apply_pass(tape, store, h, weights, nbhd, self.cfg.weight_mode, co, self.w_out[p])?;
        }
        Ok(h)
    }
}

/// Builds the neighbourhood and runs one layer in one call.
pub fn pcconv_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &PCConvLayer,
    features: Var,
    x: &QGrid,
    y: &QGrid,
    centroid: Option<[f64; 3]>,
) -> Result<Var> {
    let nbhd = build_neighborhood(x, y, &layer.cfg.geometry, &layer.cfg.embedding, centroid)?;
    layer.forward(tape, store, features, &nbhd)
}

/// Builds the four pass neighbourhoods and runs an axis-factorised layer.
pub fn axis_factorized_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &AxisFactorizedLayer,
    features: Var,
    x: &QGrid,
    y: &QGrid,
    centroid: Option<[f64; 3]>,
) -> Result<Var> {
    let nbhds = build_axis_neighborhoods(x, y, &layer.cfg.geometry, &layer.cfg.embedding, centroid)?;
    layer.forward(tape, store, features, &nbhds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Variant;
    use crate::geometry::{d_ang, Rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_slots(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> Vec<AngularSample> {
        (0..n).map(|_| AngularSample::new(rho, Direction::random(rng))).collect()
    }

    fn layer_cfg(geometry: KernelGeometry, c_in: usize, c_out: usize, mode: WeightMode) -> PCConvLayerConfig {
        PCConvLayerConfig {
            geometry,
            c_in,
            c_out,
            hidden: 6,
            weight_mode: mode,
            embedding: EmbeddingConfig::new(Variant::Standard, 2),
        }
    }

    fn rand_features(rng: &mut ChaCha8Rng, rows: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, c], (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Exhaustive filter over all (x point, y point) pairs.
    fn oracle_pairs(x: &QGrid, y: &QGrid, g: &KernelGeometry) -> Vec<Vec<(usize, bool)>> {
        let xp = x.points();
        let yp = y.points();
        let pad = x.padding_mask();
        let live_dirs: Vec<_> = x.slots.iter().filter(|s| !s.padding).map(|s| s.dir).collect();
        yp.iter()
            .map(|yj| {
                // rank of each live direction among candidates by (distance, slot)
                let mut order: Vec<usize> = (0..live_dirs.len()).collect();
                order.sort_by(|&a, &b| {
                    d_ang(&yj.dir, &live_dirs[a])
                        .partial_cmp(&d_ang(&yj.dir, &live_dirs[b]))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let chosen: Vec<Direction> = order.iter().take(g.k_q).map(|&i| live_dirs[i]).collect();
                let mut out = Vec::new();
                for (i, xi) in xp.iter().enumerate() {
                    if pad[i] {
                        continue;
                    }
                    let inside = [(xi.u - yj.u).abs(), (xi.v - yj.v).abs(), (xi.w - yj.w).abs()]
                        .iter()
                        .zip(g.extent)
                        .all(|(d, e)| *d <= (e / 2) as f64);
                    if inside && chosen.contains(&xi.dir) {
                        out.push((i, d_ang(&yj.dir, &xi.dir) <= g.d_max));
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn neighborhood_without_restriction_is_all_same_voxel_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = QGrid::new([2, 2, 1], random_slots(&mut rng, 5, 1000.0));
        let y = QGrid::new([2, 2, 1], random_slots(&mut rng, 3, 1000.0));
        let g = KernelGeometry::pointwise(5, PI);
        let nb = build_neighborhood(&x, &y, &g, &EmbeddingConfig::default(), None).unwrap();
        for j in 0..y.n_points() {
            let vy = j / 3;
            let mut ins: Vec<usize> = nb.pairs(j).iter().map(|p| p.0).collect();
            ins.sort();
            assert_eq!(ins, (vy * 5..vy * 5 + 5).collect::<Vec<_>>());
            assert!(nb.pairs(j).iter().all(|p| p.2));
        }
    }

    #[test]
    fn k1_picks_exact_direction_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random_slots(&mut rng, 6, 1000.0);
        let y = QGrid::new([2, 1, 1], vec![xs[4], xs[1]]);
        let x = QGrid::new([2, 1, 1], xs);
        let nb = build_neighborhood(&x, &y, &KernelGeometry::pointwise(1, PI), &EmbeddingConfig::default(), None).unwrap();
        assert_eq!(nb.pairs(0), vec![(4, 0, true)]);
        assert_eq!(nb.pairs(1), vec![(1, 1, true)]);
        assert_eq!(nb.pairs(2)[0].0, 6 + 4);
        assert_eq!(nb.pairs(3)[0].0, 6 + 1);
    }

    #[test]
    fn joint_kernel_matches_exhaustive_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs = random_slots(&mut rng, 8, 1000.0);
        xs.push(AngularSample::padding());
        let x = QGrid::new([5, 5, 5], xs);
        let y = QGrid::new([5, 5, 5], random_slots(&mut rng, 3, 1000.0));
        for d_max in [PI, PI / 4.0] {
            let g = KernelGeometry {
                extent: [3, 3, 3],
                k_q: 4,
                d_max,
            };
            let nb = build_neighborhood(&x, &y, &g, &EmbeddingConfig::default(), None).unwrap();
            let oracle = oracle_pairs(&x, &y, &g);
            for (j, want) in oracle.iter().enumerate() {
                let mut got: Vec<(usize, bool)> = nb.pairs(j).iter().map(|p| (p.0, p.2)).collect();
                got.sort();
                let mut want = want.clone();
                want.sort();
                assert_eq!(got, want, "output point {j}");
            }
        }
    }

    #[test]
    fn entries_bounded_by_offsets_times_direction_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = QGrid::new([10, 10, 10], random_slots(&mut rng, 6, 1000.0));
        let y = QGrid::new([10, 10, 10], random_slots(&mut rng, 4, 1000.0));
        let g = KernelGeometry {
            extent: [3, 3, 3],
            k_q: 6,
            d_max: PI,
        };
        let nb = build_neighborhood(&x, &y, &g, &EmbeddingConfig::default(), None).unwrap();
        assert!(nb.n_entries() <= 27 * 6 * 4);
        assert_eq!(nb.plan().n_pairs(), {
            // per axis: 10 voxels, 28 neighbour positions in total
            let per_axis = 28usize;
            per_axis.pow(3) * 4 * 6
        });
    }

    #[test]
    fn all_padding_is_an_empty_neighborhood() {
        let x = QGrid::new([1, 1, 1], vec![AngularSample::padding(); 3]);
        let y = QGrid::new([1, 1, 1], vec![AngularSample::new(1000.0, Direction::x())]);
        let err = build_neighborhood(&x, &y, &KernelGeometry::pointwise(2, PI), &EmbeddingConfig::default(), None);
        assert!(matches!(err, Err(Error::EmptyNeighborhood { index: 0 })));
    }

    #[test]
    fn sample_weights_constant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let hn = HyperNet::new(&mut store, "h", 4, 5, &[3], &mut rng);
        let emb = rand_features(&mut rng, 7, 4);
        for id in hn.params() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let w = sample_weights(&mut t, &store, &hn, &emb, 0).unwrap();
        assert!(t.value(w).data().iter().all(|&v| v == 0.0));
        store.get_mut(hn.heads[0].bias).value.data_mut().fill(0.25);
        let mut t = Tape::new();
        let w = sample_weights(&mut t, &store, &hn, &emb, 0).unwrap();
        assert!(t.value(w).data().iter().all(|&v| v == 0.25));
        let bad = rand_features(&mut rng, 2, 3);
        assert!(sample_weights(&mut t, &store, &hn, &bad, 0).is_err());
    }

    #[test]
    fn batched_weights_equal_row_by_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let hn = HyperNet::new(&mut store, "h", 4, 5, &[3], &mut rng);
        let emb = rand_features(&mut rng, 9, 4);
        let mut t = Tape::new();
        let all = sample_weights(&mut t, &store, &hn, &emb, 0).unwrap();
        let all = t.value(all).clone();
        for r in 0..9 {
            let row = Tensor::new(vec![1, 4], emb.data()[r * 4..r * 4 + 4].to_vec()).unwrap();
            let mut t = Tape::new();
            let w = sample_weights(&mut t, &store, &hn, &row, 0).unwrap();
            assert_eq!(t.value(w).data(), &all.data()[r * 3..r * 3 + 3]);
        }
    }

    #[test]
    fn zero_features_give_zero_output_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = QGrid::new([2, 2, 2], random_slots(&mut rng, 4, 1000.0));
        let y = QGrid::new([2, 2, 2], random_slots(&mut rng, 3, 1000.0));
        for mode in [WeightMode::Full, WeightMode::PerChannel, WeightMode::Scalar] {
            let mut store = ParamStore::new();
            let g = KernelGeometry {
                extent: [3, 3, 3],
                k_q: 3,
                d_max: PI,
            };
            let layer = PCConvLayer::new(&mut store, "l", layer_cfg(g, 2, 3, mode), &mut rng).unwrap();
            let mut t = Tape::<f64>::new();
            let f = t.input(Tensor::zeros(vec![x.n_points(), 2]));
            let h = pcconv_forward(&mut t, &store, &layer, f, &x, &y, None).unwrap();
            assert_eq!(t.value(h).shape(), &[y.n_points(), 3]);
            assert!(t.value(h).data().iter().all(|&v| v == 0.0));

            let al = AxisFactorizedLayer::new(&mut store, "a", layer_cfg(g, 2, 3, mode), &mut rng).unwrap();
            let h = axis_factorized_forward(&mut t, &store, &al, f, &x, &y, None).unwrap();
            assert!(t.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_unit_kernel_is_neighbourhood_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = QGrid::new([3, 2, 1], random_slots(&mut rng, 4, 1000.0));
        let y = QGrid::new([3, 2, 1], random_slots(&mut rng, 2, 1000.0));
        let g = KernelGeometry {
            extent: [3, 1, 1],
            k_q: 2,
            d_max: PI / 2.0,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = PCConvLayer::new(&mut store, "l", layer_cfg(g, 2, 2, WeightMode::Scalar), &mut rng).unwrap();
        for id in layer.hypernet.params() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        store.get_mut(layer.hypernet.heads[0].bias).value.data_mut().fill(1.0);
        store
            .get_mut(layer.w_out.unwrap())
            .value
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let f = rand_features(&mut rng, x.n_points(), 2);
        let nb = build_neighborhood(&x, &y, &g, &layer.cfg.embedding, None).unwrap();
        let mut t = Tape::new();
        let fv = t.input(f.clone());
        let h = layer.forward(&mut t, &store, fv, &nb).unwrap();
        for (j, want) in oracle_pairs(&x, &y, &g).iter().enumerate() {
            for c in 0..2 {
                let s: f64 = want.iter().filter(|p| p.1).map(|p| f.data()[p.0 * 2 + c]).sum();
                assert!((t.value(h).data()[j * 2 + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_channel_with_identity_matches_diagonal_full_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3;
        let x = QGrid::new([2, 2, 1], random_slots(&mut rng, 5, 2000.0));
        let y = QGrid::new([2, 2, 1], random_slots(&mut rng, 3, 1000.0));
        let g = KernelGeometry {
            extent: [3, 3, 1],
            k_q: 3,
            d_max: PI,
        };
        let mut store = ParamStore::<f64>::new();
        let pc = PCConvLayer::new(&mut store, "pc", layer_cfg(g, c, c, WeightMode::PerChannel), &mut rng).unwrap();
        let full = PCConvLayer::new(&mut store, "full", layer_cfg(g, c, c, WeightMode::Full), &mut rng).unwrap();
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        store.get_mut(pc.w_out.unwrap()).value.data_mut().copy_from_slice(&eye);
        for (src, dst) in [(&pc.hypernet.dense1, &full.hypernet.dense1), (&pc.hypernet.dense2, &full.hypernet.dense2)] {
            let (w, b) = (store.get(src.weight).value.clone(), store.get(src.bias).value.clone());
            store.get_mut(dst.weight).value = w;
            store.get_mut(dst.bias).value = b;
        }
        // full head column c·K + k carries per-channel column c when k == c
        let hidden = pc.cfg.hidden;
        let pw = store.get(pc.hypernet.heads[0].weight).value.clone();
        let pb = store.get(pc.hypernet.heads[0].bias).value.clone();
        let mut fw = vec![0.0; hidden * c * c];
        let mut fb = vec![0.0; c * c];
        for ch in 0..c {
            for h in 0..hidden {
                fw[h * c * c + ch * c + ch] = pw.data()[h * c + ch];
            }
            fb[ch * c + ch] = pb.data()[ch];
        }
        store.get_mut(full.hypernet.heads[0].weight).value.data_mut().copy_from_slice(&fw);
        store.get_mut(full.hypernet.heads[0].bias).value.data_mut().copy_from_slice(&fb);

        let f = rand_features(&mut rng, x.n_points(), c);
        let mut t = Tape::new();
        let fv = t.input(f);
        let a = pcconv_forward(&mut t, &store, &pc, fv, &x, &y, None).unwrap();
        let b = pcconv_forward(&mut t, &store, &full, fv, &x, &y, None).unwrap();
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_equals_pre_exclusion_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = QGrid::new([3, 3, 1], random_slots(&mut rng, 10, 1000.0));
        let y = QGrid::new([3, 3, 1], random_slots(&mut rng, 4, 1000.0));
        let g = KernelGeometry {
            extent: [3, 3, 1],
            k_q: 6,
            d_max: PI / 4.0,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = PCConvLayer::new(&mut store, "l", layer_cfg(g, 2, 3, WeightMode::PerChannel), &mut rng).unwrap();
        let nb = build_neighborhood(&x, &y, &g, &layer.cfg.embedding, None).unwrap();
        assert!(nb.plan().n_pairs() > nb.without_masked().plan().n_pairs());
        let f = rand_features(&mut rng, x.n_points(), 2);
        let mut t = Tape::new();
        let fv = t.input(f);
        let a = layer.forward(&mut t, &store, fv, &nb).unwrap();
        let b = layer.forward(&mut t, &store, fv, &nb.without_masked()).unwrap();
        let bits = |v| t.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    #[test]
    fn padding_slots_are_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let live = random_slots(&mut rng, 6, 1000.0);
        let y = QGrid::new([3, 3, 3], random_slots(&mut rng, 5, 3000.0));
        let g = KernelGeometry {
            extent: [3, 3, 3],
            k_q: 20,
            d_max: PI,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = PCConvLayer::new(&mut store, "l", layer_cfg(g, 1, 2, WeightMode::PerChannel), &mut rng).unwrap();
        let plain = QGrid::new([3, 3, 3], live.clone());
        let mut padded_slots = live.clone();
        padded_slots.extend(std::iter::repeat_n(AngularSample::padding(), 14));
        let padded = QGrid::new([3, 3, 3], padded_slots);
        let f: Vec<f64> = (0..plain.n_points()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fp = vec![0.0; padded.n_points()];
        for v in 0..27 {
            fp[v * 20..v * 20 + 6].copy_from_slice(&f[v * 6..v * 6 + 6]);
        }
        let mut t = Tape::new();
        let a = t.input(Tensor::new(vec![plain.n_points(), 1], f).unwrap());
        let b = t.input(Tensor::new(vec![padded.n_points(), 1], fp).unwrap());
        let ha = pcconv_forward(&mut t, &store, &layer, a, &plain, &y, None).unwrap();
        let hb = pcconv_forward(&mut t, &store, &layer, b, &padded, &y, None).unwrap();
        let bits = |v| t.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ha), bits(hb));
    }

    #[test]
    fn rotation_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = QGrid::new([2, 2, 2], random_slots(&mut rng, 7, 1000.0));
        let y = QGrid::new([2, 2, 2], random_slots(&mut rng, 4, 2000.0));
        let g = KernelGeometry {
            extent: [3, 3, 3],
            k_q: 5,
            d_max: PI,
        };
        let mut store = ParamStore::<f64>::new();
        let mut cfg = layer_cfg(g, 2, 2, WeightMode::PerChannel);
        cfg.embedding = EmbeddingConfig::new(Variant::Bv, 3);
        let layer = PCConvLayer::new(&mut store, "l", cfg, &mut rng).unwrap();
        let f = rand_features(&mut rng, x.n_points(), 2);
        let run = |x: &QGrid, y: &QGrid| {
            let mut t = Tape::new();
            let fv = t.input(f.clone());
            let h = pcconv_forward(&mut t, &store, &layer, fv, x, y, None).unwrap();
            t.value(h).clone()
        };
        let base = run(&x, &y);
        for _ in 0..5 {
            let r = Rotation::random(&mut rng);
            let rot = |q: &QGrid| {
                let slots = q.slots.iter().map(|s| AngularSample { dir: r.apply(&s.dir), ..*s }).collect();
                QGrid::new(q.dims, slots)
            };
            let out = run(&rot(&x), &rot(&y));
            for (a, b) in base.data().iter().zip(out.data()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_voxel_axis_layer_degenerates_to_channel_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = QGrid::new([1, 1, 1], random_slots(&mut rng, 5, 1000.0));
        let y = QGrid::new([1, 1, 1], random_slots(&mut rng, 3, 1000.0));
        let g = KernelGeometry {
            extent: [3, 3, 3],
            k_q: 4,
            d_max: PI,
        };
        let cfg = layer_cfg(g, 2, 3, WeightMode::PerChannel);
        let nbhds = build_axis_neighborhoods(&x, &y, &g, &cfg.embedding, None).unwrap();
        for p in 0..3 {
            let nb = &nbhds.passes[p];
            assert_eq!(nb.n_entries(), 5);
            for j in 0..5 {
                assert_eq!(nb.pairs(j).len(), 1);
                assert_eq!(nb.pairs(j)[0].0, j);
            }
            // same voxel, same direction: p = [0, 0, 0, 0, 1] for every entry
            let e0 = nb.embedding(0).to_vec();
            for e in 0..5 {
                assert!(nb.embedding(e).iter().zip(&e0).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        let mut store = ParamStore::<f64>::new();
        let layer = AxisFactorizedLayer::new(&mut store, "a", cfg, &mut rng).unwrap();
        let f = rand_features(&mut rng, 5, 2);
        let mut t = Tape::new();
        let fv = t.input(f.clone());
        let h = layer.forward(&mut t, &store, fv, &nbhds).unwrap();

        // reference: three per-row channel maps diag(g_p)·W_p then the angular pass
        let mut cur = f.to_f64_vec();
        let mut width = 2;
        for p in 0..3 {
            let mut tt = Tape::new();
            let w = sample_weights(&mut tt, &store, &layer.hypernet, &nbhds.passes[p].embeddings(), p).unwrap();
            let g_row = tt.value(w).data()[..width].to_vec();
            let wo = store.get(layer.w_out[p].unwrap()).value.clone();
            let co = wo.cols();
            let mut next = vec![0.0; 5 * co];
            for r in 0..5 {
                for k in 0..co {
                    next[r * co + k] = (0..width).map(|c| cur[r * width + c] * g_row[c] * wo.data()[c * co + k]).sum();
                }
            }
            cur = next;
            width = co;
        }
        let mut tt = Tape::new();
        let fin = tt.input(Tensor::new(vec![5, width], cur).unwrap());
        let w = sample_weights(&mut tt, &store, &layer.hypernet, &nbhds.passes[3].embeddings(), 3).unwrap();
        let last = apply_pass(&mut tt, &store, fin, w, &nbhds.passes[3], WeightMode::PerChannel, 3, layer.w_out[3]).unwrap();
        for (a, b) in t.value(h).data().iter().zip(tt.value(last).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_cache_is_transparent_and_counts_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = QGrid::new([10, 10, 10], random_slots(&mut rng, 6, 1000.0));
        let y = QGrid::new([10, 10, 10], random_slots(&mut rng, 4, 1000.0));
        let g = KernelGeometry {
            extent: [3, 3, 3],
            k_q: 6,
            d_max: PI,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = PCConvLayer::new(&mut store, "l", layer_cfg(g, 1, 2, WeightMode::PerChannel), &mut rng).unwrap();
        let nb = build_neighborhood(&x, &y, &g, &layer.cfg.embedding, None).unwrap();
        let f = rand_features(&mut rng, x.n_points(), 1);
        let cache = WeightCache::new();
        let mut t = Tape::new();
        let fv = t.input(f);
        let plain = layer.forward(&mut t, &store, fv, &nb).unwrap();
        let cached = layer.forward_cached(&mut t, &store, fv, &nb, &cache, 0).unwrap();
        assert_eq!(t.value(plain), t.value(cached));
        let evals = cache.evaluations();
        assert!(evals <= 27 * (6 * 4));
        let again = layer.forward_cached(&mut t, &store, fv, &nb, &cache, 0).unwrap();
        assert_eq!(cache.evaluations(), evals);
        assert_eq!(cache.hits(), nb.n_entries());
        // integer offsets ±1 alias under the sine map, so their keys coincide
        for (a, b) in t.value(again).data().iter().zip(t.value(plain).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let key = nb.embedding(0);
        let row = cache.lookup(0, key).unwrap();
        let mut tt = Tape::new();
        let w = sample_weights(&mut tt, &store, &layer.hypernet, &nb.embeddings(), 0).unwrap();
        assert_eq!(row.as_slice(), &tt.value(w).data()[..1]);
    }

    #[test]
    fn geometry_validation() {
        assert!(KernelGeometry::pointwise(0, PI).validate().is_err());
        assert!(KernelGeometry::pointwise(1, 0.0).validate().is_err());
        assert!(KernelGeometry::pointwise(1, 4.0).validate().is_err());
        let g = KernelGeometry {
            extent: [2, 1, 1],
            k_q: 1,
            d_max: PI,
        };
        assert!(g.validate().is_err());
    }
}
