//! Central finite-difference verification of reverse-mode gradients.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{EmbeddingConfig, Variant};
use crate::geometry::Direction;
use crate::model::{PCCNNConfig, PCCNN};
use crate::pcconv::{
    build_axis_neighborhoods, build_neighborhood, AngularSample, AxisFactorizedLayer, KernelGeometry, PCConvLayer,
    PCConvLayerConfig, QGrid, WeightMode,
};
use crate::tensor::{Contraction, PairPlan, ParamStore, Tape, Tensor, Var};
use crate::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass bound on the relative error at float64.
pub const F64_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Names of the differentiable tape ops, as accepted by fault injection.
pub const OPS: [&str; 10] = [
    "matmul",
    "add_row",
    "add",
    "scale",
    "leaky_relu",
    "relu",
    "sum",
    "reshape",
    "l1_loss",
    "contract",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `loss` against central differences for
/// every scalar in `store`. `flip` injects a sign error into the named
/// backward rule of the analytic pass only.
pub fn check_params<F>(store: &mut ParamStore<f64>, flip: Option<&'static str>, loss: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = flip {
        tape.flip_backward_sign(op);
    }
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.param_grads() {
        analytic[id.index()] = g.to_f64_vec();
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };
    let mut res = CheckResult {
        name: String::new(),
        n_checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_err(analytic[id.index()][k], numeric);
            res.n_checked += 1;
            if err > res.max_rel_err || err.is_nan() {
                res.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                res.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero so kinks sit outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = random(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Scalar `⟨x, probe⟩` so every output element reaches the loss with a
/// distinct weight.
fn project(tape: &mut Tape<f64>, x: Var, probe: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, vec![1, n])?;
    let p = tape.input(probe.clone().reshape(vec![n, 1])?);
    let s = tape.matmul(flat, p)?;
    Ok(tape.sum(s))
}

fn slots(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> Vec<AngularSample> {
    (0..n).map(|_| AngularSample::new(rho, Direction::random(rng))).collect()
}

type Case = (&'static str, ParamStore<f64>, Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();

    let mut s = ParamStore::new();
    let a = s.add("a", random(rng, vec![5, 4], -1.0, 1.0));
    let b = s.add("b", random(rng, vec![4, 3], -1.0, 1.0));
    let probe = random(rng, vec![15], -1.0, 1.0);
    cases.push((
        "matmul",
        s,
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let c = t.matmul(a, b)?;
            project(t, c, &probe)
        }),
    ));

    let mut s = ParamStore::new();
    let a = s.add("a", random(rng, vec![4, 3], -1.0, 1.0));
    let bias = s.add("bias", random(rng, vec![3], -1.0, 1.0));
    let c = s.add("c", random(rng, vec![4, 3], -1.0, 1.0));
    let probe = random(rng, vec![12], -1.0, 1.0);
    cases.push((
        "add_row, add, scale",
        s,
        Box::new(move |t, s| {
            let (a, bias, c) = (t.param(s, a), t.param(s, bias), t.param(s, c));
            let h = t.add_row(a, bias)?;
            let c = t.scale(c, -0.7)?;
            let h = t.add(h, c)?;
            project(t, h, &probe)
        }),
    ));

    let mut s = ParamStore::new();
    let x = s.add("x", away_from_zero(rng, vec![4, 5]));
    let probe = random(rng, vec![20], -1.0, 1.0);
    cases.push((
        "leaky_relu, relu, reshape",
        s,
        Box::new(move |t, s| {
            let x = t.param(s, x);
            let a = t.leaky_relu(x, 0.1)?;
            let b = t.relu(x)?;
            let h = t.add(a, b)?;
            let h = t.reshape(h, vec![5, 4])?;
            project(t, h, &probe)
        }),
    ));

    let mut s = ParamStore::new();
    let x = s.add("x", random(rng, vec![6, 2], -1.0, 1.0));
    let mut target = s.get(x).value.clone();
    for v in target.data_mut() {
        *v += if rng.random_bool(0.5) { 0.3 } else { -0.3 };
    }
    let valid: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    cases.push((
        "l1_loss, sum",
        s,
        Box::new(move |t, s| {
            let x = t.param(s, x);
            let l = t.l1_loss(x, &target, &valid)?;
            let x2 = t.scale(x, 0.25)?;
            let s2 = t.sum(x2);
            t.add(l, s2)
        }),
    ));

    let mut s = ParamStore::new();
    let f = s.add("features", random(rng, vec![6, 3], -1.0, 1.0));
    let w = s.add("weights", random(rng, vec![6, 3], -1.0, 1.0));
    let w1 = s.add("scalar_weights", random(rng, vec![6, 1], -1.0, 1.0));
    let mask: Vec<bool> = (0..6).map(|i| i != 2).collect();
    let probe = random(rng, vec![3], -1.0, 1.0);
    cases.push((
        "gather_weighted_sum",
        s,
        Box::new(move |t, s| {
            let (f, w, w1) = (t.param(s, f), t.param(s, w), t.param(s, w1));
            let a = t.gather_weighted_sum(f, w, &mask)?;
            let b = t.gather_weighted_sum(f, w1, &mask)?;
            let h = t.add(a, b)?;
            project(t, h, &probe)
        }),
    ));

    let n_in = 7;
    let rows: Vec<Vec<(usize, usize, bool)>> = (0..4)
        .map(|_| {
            (0..3)
                .map(|_| (rng.random_range(0..n_in), rng.random_range(0..5), rng.random_bool(0.8)))
                .collect()
        })
        .collect();
    let plan = std::sync::Arc::new(PairPlan::from_rows(&rows, n_in, 5)?);
    for (mode, wdim, kdim) in [
        (Contraction::Full { out_channels: 2 }, 6, 2),
        (Contraction::PerChannel, 3, 3),
        (Contraction::Scalar, 1, 3),
    ] {
        let mut s = ParamStore::new();
        let f = s.add("features", random(rng, vec![n_in, 3], -1.0, 1.0));
        let w = s.add("weights", random(rng, vec![5, wdim], -1.0, 1.0));
        let probe = random(rng, vec![4 * kdim], -1.0, 1.0);
        let plan = plan.clone();
        let name = match mode {
            Contraction::Full { .. } => "contract (full)",
            Contraction::PerChannel => "contract (per_channel)",
            Contraction::Scalar => "contract (scalar)",
        };
        cases.push((
            name,
            s,
            Box::new(move |t, s| {
                let (f, w) = (t.param(s, f), t.param(s, w));
                let h = t.contract(f, w, plan.clone(), mode)?;
                project(t, h, &probe)
            }),
        ));
    }
    Ok(cases)
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    let x = QGrid::new([2, 2, 1], slots(rng, 4, 1000.0));
    let y = QGrid::new([2, 2, 1], slots(rng, 3, 2000.0));
    let embedding = EmbeddingConfig::new(Variant::Bv, 2);
    let geometry = KernelGeometry {
        extent: [3, 3, 1],
        k_q: 3,
        d_max: PI / 2.0,
    };
    let nb = build_neighborhood(&x, &y, &geometry, &embedding, None)?;
    for (mode, name) in [
        (WeightMode::Full, "pcconv layer (full)"),
        (WeightMode::PerChannel, "pcconv layer (per_channel)"),
        (WeightMode::Scalar, "pcconv layer (scalar)"),
    ] {
        let mut s = ParamStore::new();
        let cfg = PCConvLayerConfig {
            geometry,
            c_in: 2,
            c_out: 2,
            hidden: 4,
            weight_mode: mode,
            embedding,
        };
        let layer = PCConvLayer::new(&mut s, "layer", cfg, rng)?;
        let f = s.add("features", random(rng, vec![x.n_points(), 2], -1.0, 1.0));
        let probe = random(rng, vec![y.n_points() * 2], -1.0, 1.0);
        let nb = nb.clone();
        cases.push((
            name,
            s,
            Box::new(move |t, s| {
                let f = t.param(s, f);
                let h = layer.forward(t, s, f, &nb)?;
                project(t, h, &probe)
            }),
        ));
    }

    let cube = KernelGeometry {
        extent: [3, 3, 3],
        ..geometry
    };
    let xa = QGrid::new([2, 2, 2], slots(rng, 4, 1000.0));
    let ya = QGrid::new([2, 2, 2], slots(rng, 3, 1000.0));
    let nbhds = build_axis_neighborhoods(&xa, &ya, &cube, &embedding, None)?;
    let mut s = ParamStore::new();
    let cfg = PCConvLayerConfig {
        geometry: cube,
        c_in: 2,
        c_out: 2,
        hidden: 4,
        weight_mode: WeightMode::PerChannel,
        embedding,
    };
    let layer = AxisFactorizedLayer::new(&mut s, "axis", cfg, rng)?;
    let f = s.add("features", random(rng, vec![xa.n_points(), 2], -1.0, 1.0));
    let probe = random(rng, vec![ya.n_points() * 2], -1.0, 1.0);
    cases.push((
        "axis-factorized layer",
        s,
        Box::new(move |t, s| {
            let f = t.param(s, f);
            let h = layer.forward(t, s, f, &nbhds)?;
            project(t, h, &probe)
        }),
    ));
    Ok(cases)
}

fn model_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = PCCNNConfig {
        n_pointwise: 2,
        n_blocks: 1,
        c1: 3,
        c3: 3,
        hidden: 4,
        bands: 2,
        k_q: 4,
        ..PCCNNConfig::default()
    };
    let model = PCCNN::<f64>::build(cfg, rng.random())?;
    let x = QGrid::new([2, 2, 2], slots(rng, 4, 1000.0));
    let y = QGrid::new([2, 2, 2], slots(rng, 4, 1000.0));
    let geom = model.prepare(&x, &y, None)?;
    let f = random(rng, vec![x.n_points(), 1], 0.0, 1.0);
    let probe = random(rng, vec![y.n_points()], -1.0, 1.0);
    let store = model.params.clone();
    Ok((
        "pccnn end-to-end (2³ patch)",
        store,
        Box::new(move |t, s| {
            let fv = t.input(f.clone());
            let h = model.forward_with(s, t, fv, &geom)?;
            project(t, h, &probe)
        }),
    ))
}

/// Runs every check; `flip` corrupts one backward rule for fault injection.
pub fn run_suite(seed: u64, flip: Option<&'static str>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng)?;
    cases.extend(layer_cases(&mut rng)?);
    cases.push(model_case(&mut rng)?);
    let mut checks = Vec::new();
    for (name, mut store, loss) in cases {
        let mut r = check_params(&mut store, flip, loss)?;
        r.name = name.to_string();
        checks.push(r);
    }
    Ok(GradcheckReport {
        tolerance: F64_TOLERANCE,
        checks,
    })
}
