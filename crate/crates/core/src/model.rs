//! The PCCNN: a stack of PCConv layers and residual blocks.
//!
//! Layer 1 resamples from the input angular set to the target set; every
//! later layer works on the target set. Each block sums a pointwise branch
//! and an axis-factorised `3×3×3×k_q` branch, adds the identity, and applies
//! ReLU. The final pointwise layer emits one channel and has no activation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingConfig, Variant};
use crate::pcconv::{
    build_axis_neighborhoods, build_neighborhood, AxisFactorizedLayer, AxisNeighborhoods, KernelGeometry,
    Neighborhood, PCConvLayer, PCConvLayerConfig, QGrid, WeightCache, WeightMode,
};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Fixed number of zero-filled input slots.
pub const INPUT_SLOTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PCCNNConfig {
    pub n_pointwise: usize,
    pub n_blocks: usize,
    pub c1: usize,
    pub c3: usize,
    pub hidden: usize,
    pub bands: usize,
    pub k_q: usize,
    pub variant: Variant,
    pub weight_mode: WeightMode,
    pub d_max: f64,
    pub fourier: bool,
    pub include_dcos: bool,
    pub b_scale: f64,
}

impl Default for PCCNNConfig {
    fn default() -> Self {
        Self {
            n_pointwise: 2,
            n_blocks: 2,
            c1: 16,
            c3: 16,
            hidden: 32,
            bands: 4,
            k_q: 20,
            variant: Variant::Standard,
            weight_mode: WeightMode::PerChannel,
            d_max: PI,
            fourier: true,
            include_dcos: true,
            b_scale: 3000.0,
        }
    }
}

impl PCCNNConfig {
    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            variant: self.variant,
            bands: self.bands,
            b_scale: self.b_scale,
            fourier: self.fourier,
            include_dcos: self.include_dcos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_pointwise", self.n_pointwise),
            ("n_blocks", self.n_blocks),
            ("c1", self.c1),
            ("c3", self.c3),
            ("hidden", self.hidden),
            ("bands", self.bands),
            ("k_q", self.k_q),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
        }
        if self.k_q > INPUT_SLOTS {
            return Err(Error::InvalidConfig(format!(
                "k_q = {} exceeds the {INPUT_SLOTS} input slots",
                self.k_q
            )));
        }
        if self.c1 != self.c3 {
            return Err(Error::InvalidConfig(format!(
                "block branches are summed, so c1 ({}) must equal c3 ({})",
                self.c1, self.c3
            )));
        }
        KernelGeometry::pointwise(self.k_q, self.d_max).validate()?;
        self.embedding().validate()
    }

    fn layer(&self, extent: [usize; 3], c_in: usize, c_out: usize) -> PCConvLayerConfig {
        PCConvLayerConfig {
            geometry: KernelGeometry {
                extent,
                k_q: self.k_q,
                d_max: self.d_max,
            },
            c_in,
            c_out,
            hidden: self.hidden,
            weight_mode: self.weight_mode,
            embedding: self.embedding(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Pointwise(PCConvLayer),
    Block {
        pointwise: PCConvLayer,
        axis: AxisFactorizedLayer,
        skip: bool,
    },
}

/// Neighbourhoods shared by all layers for one pair of angular sets.
#[derive(Debug, Clone)]
pub struct ModelGeometry {
    pub n_in: usize,
    pub n_out: usize,
    pub q_out: usize,
    pub in_to_out: Neighborhood,
    pub out_to_out: Neighborhood,
    pub axis: AxisNeighborhoods,
}

#[derive(Debug, Clone)]
pub struct PCCNN<T> {
    pub cfg: PCCNNConfig,
    pub params: ParamStore<T>,
    pub stages: Vec<Stage>,
    pub head: PCConvLayer,
}

impl<T: Real> PCCNN<T> {
    pub fn build(cfg: PCCNNConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let point = [1, 1, 1];
        let mut width = 1;
        for i in 0..cfg.n_pointwise {
            let layer = PCConvLayer::new(&mut params, &format!("pointwise{i}"), cfg.layer(point, width, cfg.c1), &mut rng)?;
            stages.push(Stage::Pointwise(layer));
            width = cfg.c1;
        }
        for b in 0..cfg.n_blocks {
            let pointwise = PCConvLayer::new(
                &mut params,
                &format!("block{b}.pointwise"),
                cfg.layer(point, width, cfg.c1),
                &mut rng,
            )?;
            let axis = AxisFactorizedLayer::new(
                &mut params,
                &format!("block{b}.axis"),
                cfg.layer([3, 3, 3], width, cfg.c3),
                &mut rng,
            )?;
            stages.push(Stage::Block {
                pointwise,
                axis,
                skip: width == cfg.c1,
            });
            width = cfg.c1;
        }
        let head = PCConvLayer::new(&mut params, "head", cfg.layer(point, width, 1), &mut rng)?;
        Ok(Self {
            cfg,
            params,
            stages,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Builds every neighbourhood the model needs for input grid `x` and
    /// target grid `y`.
    pub fn prepare(&self, x: &QGrid, y: &QGrid, centroid: Option<[f64; 3]>) -> Result<ModelGeometry> {
        let emb = self.cfg.embedding();
        let point = KernelGeometry::pointwise(self.cfg.k_q, self.cfg.d_max);
        let cube = KernelGeometry {
            extent: [3, 3, 3],
            ..point
        };
        Ok(ModelGeometry {
            n_in: x.n_points(),
            n_out: y.n_points(),
            q_out: y.n_slots(),
            in_to_out: build_neighborhood(x, y, &point, &emb, centroid)?,
            out_to_out: build_neighborhood(y, y, &point, &emb, centroid)?,
            axis: build_axis_neighborhoods(y, y, &cube, &emb, centroid)?,
        })
    }

    /// Records the forward pass; `features` is `[n_in × 1]`, the result
    /// `[n_out × 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var, geom: &ModelGeometry) -> Result<Var> {
        self.run(&self.params, tape, features, geom, None)
    }

    /// Forward pass reading parameter values from `store`, which must have
    /// the layout of `self.params`.
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        features: Var,
        geom: &ModelGeometry,
    ) -> Result<Var> {
        self.run(store, tape, features, geom, None)
    }

    fn run(
        &self,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        features: Var,
        geom: &ModelGeometry,
        cache: Option<&WeightCache<T>>,
    ) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape != [geom.n_in, 1] {
            return Err(Error::shape(
                "pccnn",
                format!("features {shape:?}, geometry expects [{}, 1]", geom.n_in),
            ));
        }
        let point = |tape: &mut Tape<T>, layer: &PCConvLayer, h: Var, nb: &Neighborhood, tag: u64| match cache {
            Some(c) => layer.forward_cached(tape, p, h, nb, c, tag),
            None => layer.forward(tape, p, h, nb),
        };
        let mut h = features;
        for (i, stage) in self.stages.iter().enumerate() {
            let tag = 8 * i as u64;
            h = match stage {
                Stage::Pointwise(layer) => {
                    let nb = if i == 0 { &geom.in_to_out } else { &geom.out_to_out };
                    point(tape, layer, h, nb, tag)?
                }
                Stage::Block { pointwise, axis, skip } => {
                    let a = point(tape, pointwise, h, &geom.out_to_out, tag)?;
                    let b = match cache {
                        Some(c) => axis.forward_cached(tape, p, h, &geom.axis, c, tag + 1)?,
                        None => axis.forward(tape, p, h, &geom.axis)?,
                    };
                    let s = tape.add(a, b)?;
                    if *skip {
                        tape.add(s, h)?
                    } else {
                        s
                    }
                }
            };
            h = tape.relu(h)?;
        }
        let tag = 8 * self.stages.len() as u64;
        point(tape, &self.head, h, &geom.out_to_out, tag)
    }

    /// Inference: `features` is `[voxels × slots]`, the result `[voxels × q_out]`.
    pub fn predict(&self, features: &Tensor<T>, geom: &ModelGeometry, cache: Option<&WeightCache<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = tape.input(features.clone().reshape(vec![features.len(), 1])?);
        let out = self.run(&self.params, &mut tape, f, geom, cache)?;
        tape.value(out)
            .clone()
            .reshape(vec![geom.n_out / geom.q_out, geom.q_out])
    }
}
