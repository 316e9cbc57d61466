//! Image-quality metrics, real spherical harmonics and the SH baseline.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::geometry::Direction;
use crate::{Error, Result};

fn check_lengths(op: &'static str, a: usize, b: usize, mask: usize) -> Result<()> {
    if a != b || a != mask {
        return Err(Error::shape(op, format!("pred {a}, target {b}, mask {mask}")));
    }
    Ok(())
}

/// Mean absolute error over masked entries.
pub fn mae(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    check_lengths("mae", pred.len(), target.len(), mask.len())?;
    let (mut s, mut n) = (0.0, 0usize);
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        s += (pred[i] - target[i]).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

/// `10·log10(peak² / MSE)`; `f64::INFINITY` for identical inputs. The
/// default peak is the masked dynamic range of `target`.
pub fn psnr(pred: &[f64], target: &[f64], mask: &[bool], peak: Option<f64>) -> Result<f64> {
    check_lengths("psnr", pred.len(), target.len(), mask.len())?;
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let peak = match peak {
        Some(p) => p,
        None => {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(target[i]), hi.max(target[i])));
            hi - lo
        }
    };
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!("PSNR peak must be > 0, got {peak}")));
    }
    let mse = idx.iter().map(|&i| (pred[i] - target[i]).powi(2)).sum::<f64>() / idx.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Inclusive-prefix sums over a 3-D grid with a zero border.
struct Integral {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sy, sz) = (ny + 1, nz + 1);
        let idx = |x: usize, y: usize, z: usize| (x * sy + y) * sz + z;
        let mut data = vec![0.0; (nx + 1) * sy * sz];
        for x in 1..=nx {
            for y in 1..=ny {
                for z in 1..=nz {
                    let v = f(((x - 1) * ny + (y - 1)) * nz + (z - 1));
                    data[idx(x, y, z)] = v + data[idx(x - 1, y, z)] + data[idx(x, y - 1, z)] + data[idx(x, y, z - 1)]
                        - data[idx(x - 1, y - 1, z)]
                        - data[idx(x - 1, y, z - 1)]
                        - data[idx(x, y - 1, z - 1)]
                        + data[idx(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { dims, data }
    }

    /// Sum over the box `[lo, lo + w)` per axis.
    fn boxed(&self, lo: [usize; 3], w: usize) -> f64 {
        let (sy, sz) = (self.dims[1] + 1, self.dims[2] + 1);
        let idx = |x: usize, y: usize, z: usize| (x * sy + y) * sz + z;
        let [x0, y0, z0] = lo;
        let [x1, y1, z1] = [x0 + w, y0 + w, z0 + w];
        self.data[idx(x1, y1, z1)] - self.data[idx(x0, y1, z1)] - self.data[idx(x1, y0, z1)] - self.data[idx(x1, y1, z0)]
            + self.data[idx(x0, y0, z1)]
            + self.data[idx(x0, y1, z0)]
            + self.data[idx(x1, y0, z0)]
            - self.data[idx(x0, y0, z0)]
    }
}

fn ssim_value(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over volumes `[voxel × n_dirs]` on grid `dims`, averaged over
/// window centres inside the voxel mask and over directions. The dynamic
/// range is that of `target` within the mask.
pub fn mssim(pred: &[f64], target: &[f64], dims: [usize; 3], n_dirs: usize, mask: &[bool]) -> Result<f64> {
    mssim_with_range(pred, target, dims, n_dirs, mask, None)
}

/// [`mssim`] with an explicit dynamic range.
pub fn mssim_with_range(
    pred: &[f64],
    target: &[f64],
    dims: [usize; 3],
    n_dirs: usize,
    mask: &[bool],
    range: Option<f64>,
) -> Result<f64> {
    let nvox: usize = dims.iter().product();
    check_lengths("mssim", pred.len(), target.len(), mask.len() * n_dirs)?;
    if mask.len() != nvox {
        return Err(Error::shape("mssim", format!("mask {} for grid {dims:?}", mask.len())));
    }
    let w = SSIM_WINDOW;
    if dims.iter().any(|&d| d < w) {
        return Err(Error::InvalidConfig(format!("volume {dims:?} smaller than the {w}³ window")));
    }
    let (lo, hi) = (0..nvox)
        .filter(|&v| mask[v])
        .flat_map(|v| target[v * n_dirs..(v + 1) * n_dirs].iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if lo > hi {
        return Err(Error::EmptyMask);
    }
    let range = range.unwrap_or(hi - lo);
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let r = w / 2;
    let centers: Vec<[usize; 3]> = (0..nvox)
        .filter(|&v| mask[v])
        .map(|v| [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]])
        .filter(|c| (0..3).all(|d| c[d] >= r && c[d] + r < dims[d]))
        .collect();
    if centers.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    for d in 0..n_dirs {
        let x = |v: usize| pred[v * n_dirs + d];
        let y = |v: usize| target[v * n_dirs + d];
        let sx = Integral::new(dims, x);
        let sy = Integral::new(dims, y);
        let sxx = Integral::new(dims, |v| x(v) * x(v));
        let syy = Integral::new(dims, |v| y(v) * y(v));
        let sxy = Integral::new(dims, |v| x(v) * y(v));
        for c in &centers {
            let lo = [c[0] - r, c[1] - r, c[2] - r];
            let (mx, my) = (sx.boxed(lo, w) / n, sy.boxed(lo, w) / n);
            let vx = (sxx.boxed(lo, w) / n - mx * mx).max(0.0);
            let vy = (syy.boxed(lo, w) / n - my * my).max(0.0);
            let cxy = sxy.boxed(lo, w) / n - mx * my;
            total += ssim_value(mx, my, vx, vy, cxy, c1, c2);
        }
    }
    Ok(total / (centers.len() * n_dirs) as f64)
}

/// Coefficient count of an even-order symmetric basis.
pub fn sh_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// `(l, m)` of every basis function in storage order.
pub fn sh_indices(order: usize) -> Vec<(usize, i64)> {
    (0..=order)
        .step_by(2)
        .flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m)))
        .collect()
}

/// Associated Legendre `P_l^m(x)` for `0 ≤ m ≤ l`, Condon–Shortley phase.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut out = 0.0;
    for ll in m + 2..=l {
        out = (x * (2 * ll - 1) as f64 * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = out;
    }
    out
}

fn normalization(l: usize, m: usize) -> f64 {
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| k as f64).product();
    ((2 * l + 1) as f64 / (4.0 * PI) / ratio).sqrt()
}

/// Real symmetric basis: `√2·Re Y_l^{|m|}` for `m < 0`, `Y_l^0`, and
/// `√2·Im Y_l^m` for `m > 0`.
pub fn sh_basis(order: usize, dir: &Direction) -> Vec<f64> {
    let u = dir.unit();
    let cos_polar = u[2].clamp(-1.0, 1.0);
    let phi = u[1].atan2(u[0]);
    sh_indices(order)
        .into_iter()
        .map(|(l, m)| {
            let am = m.unsigned_abs() as usize;
            let base = normalization(l, am) * legendre(l, am, cos_polar);
            match m.cmp(&0) {
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * base * (am as f64 * phi).cos(),
                std::cmp::Ordering::Equal => base,
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * base * (am as f64 * phi).sin(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl ShCoefficients {
    pub fn evaluate(&self, dir: &Direction) -> f64 {
        sh_basis(self.order, dir).iter().zip(&self.coeffs).map(|(b, c)| b * c).sum()
    }
}

/// Condition-number bound above which a design matrix counts as rank
/// deficient.
pub const MAX_CONDITION: f64 = 1e10;

/// Least-squares SH fit on a fixed direction set via the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct ShFitter {
    pub order: usize,
    pinv: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(directions: &[Direction], order: usize) -> Result<Self> {
        if order % 2 != 0 {
            return Err(Error::InvalidConfig(format!("SH order must be even, got {order}")));
        }
        let r = sh_count(order);
        let n = directions.len();
        if n < r {
            return Err(Error::RankDeficient(f64::INFINITY));
        }
        let b = design(directions, order);
        let svd = b.svd(true, true);
        let (smax, smin) = svd
            .singular_values
            .iter()
            .fold((0.0_f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
        let cond = smax / smin;
        if !(cond < MAX_CONDITION) {
            return Err(Error::RankDeficient(cond));
        }
        let pinv = svd.pseudo_inverse(0.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Self { order, pinv })
    }

    pub fn fit(&self, values: &[f64]) -> Result<ShCoefficients> {
        if values.len() != self.pinv.ncols() {
            return Err(Error::shape(
                "sh_fit",
                format!("{} values for {} directions", values.len(), self.pinv.ncols()),
            ));
        }
        let coeffs = (0..self.pinv.nrows())
            .map(|i| (0..values.len()).map(|j| self.pinv[(i, j)] * values[j]).sum())
            .collect();
        Ok(ShCoefficients {
            order: self.order,
            coeffs,
        })
    }

    /// Linear map from fitted values to values at `targets`, as a
    /// `[targets × inputs]` row-major matrix.
    pub fn interpolation_matrix(&self, targets: &[Direction]) -> Vec<f64> {
        let bt = design(targets, self.order);
        let m = bt * &self.pinv;
        let mut out = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push(m[(i, j)]);
            }
        }
        out
    }
}

fn design(directions: &[Direction], order: usize) -> DMatrix<f64> {
    let r = sh_count(order);
    let rows: Vec<f64> = directions.iter().flat_map(|d| sh_basis(order, d)).collect();
    DMatrix::from_row_slice(directions.len(), r, &rows)
}

pub fn sh_fit(values: &[f64], directions: &[Direction], order: usize) -> Result<ShCoefficients> {
    ShFitter::new(directions, order)?.fit(values)
}

/// Per-voxel order-`order` fit of `[voxel × inputs]` evaluated at
/// `targets`; returns `[voxel × targets]`.
pub fn sh_interpolate(values: &[f64], inputs: &[Direction], targets: &[Direction], order: usize) -> Result<Vec<f64>> {
    let fitter = ShFitter::new(inputs, order)?;
    let m = fitter.interpolation_matrix(targets);
    let (ni, nt) = (inputs.len(), targets.len());
    if values.len() % ni != 0 {
        return Err(Error::shape("sh_interpolate", format!("{} values, {ni} inputs", values.len())));
    }
    let mut out = Vec::with_capacity(values.len() / ni * nt);
    for v in values.chunks_exact(ni) {
        for t in 0..nt {
            out.push((0..ni).map(|j| m[t * ni + j] * v[j]).sum());
        }
    }
    Ok(out)
}

/// Order used for angular correlation.
pub const ACC_ORDER: usize = 8;

/// Cosine similarity of two coefficient vectors with equal layout.
pub fn acc(alpha: &ShCoefficients, beta: &ShCoefficients) -> Result<f64> {
    if alpha.order != beta.order || alpha.coeffs.len() != beta.coeffs.len() {
        return Err(Error::shape(
            "acc",
            format!("orders {} and {}", alpha.order, beta.order),
        ));
    }
    let dotp: f64 = alpha.coeffs.iter().zip(&beta.coeffs).map(|(a, b)| a * b).sum();
    let na = alpha.coeffs.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = beta.coeffs.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dotp / (na * nb))
}

/// Per-subject means and the population spread of those means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "float_repr::many")]
    pub per_subject: Vec<f64>,
    #[serde(with = "float_repr")]
    pub mean: f64,
    #[serde(with = "float_repr")]
    pub std: f64,
}

/// JSON has no infinities: non-finite values travel as "inf", "-inf" or
/// "nan".
mod float_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    fn to_repr(v: f64) -> Repr {
        match v {
            v if v.is_finite() => Repr::Num(v),
            v if v.is_nan() => Repr::Tag("nan".into()),
            v if v > 0.0 => Repr::Tag("inf".into()),
            _ => Repr::Tag("-inf".into()),
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Tag(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(E::custom(format!("unexpected float tag {t:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod many {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

impl Summary {
    pub fn from_subject_means(per_subject: Vec<f64>) -> Result<Self> {
        if per_subject.is_empty() {
            return Err(Error::InvalidConfig("aggregation needs at least one subject".into()));
        }
        let n = per_subject.len() as f64;
        let mean = per_subject.iter().sum::<f64>() / n;
        let std = (per_subject.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { per_subject, mean, std })
    }
}

/// Groups per-voxel values by subject id (ascending), averages each group,
/// then summarises.
pub fn aggregate(values: &[f64], subjects: &[usize]) -> Result<Summary> {
    if values.len() != subjects.len() {
        return Err(Error::shape("aggregate", format!("{} values, {} ids", values.len(), subjects.len())));
    }
    let mut groups: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (&v, &s) in values.iter().zip(subjects) {
        let e = groups.entry(s).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Summary::from_subject_means(groups.values().map(|(s, n)| s / *n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub protocol: String,
    pub shell: String,
    pub q_in: usize,
    pub metric: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn find(&self, method: &str, shell: &str, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.shell == shell && r.metric == metric)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "protocol", "shell", "q_in", "metric", "mean", "std"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.protocol.clone(),
                r.shell.clone(),
                r.q_in.to_string(),
                r.metric.clone(),
                format!("{}", r.summary.mean),
                format!("{}", r.summary.std),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        for (path, text) in [(json_path, self.to_json()?), (csv_path, self.to_csv()?)] {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fibonacci_sphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mae_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 50);
        let b = rand_vec(&mut rng, 50);
        let m: Vec<bool> = (0..50).map(|i| i % 3 != 0).collect();
        assert_eq!(mae(&a, &a, &m).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        assert!((mae(&shifted, &a, &m).unwrap() - 2.0).abs() < 1e-12);
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..50 {
            if m[i] {
                s += (a[i] - b[i]).abs();
                n += 1.0;
            }
        }
        assert!((mae(&a, &b, &m).unwrap() - s / n).abs() < 1e-15);
        assert!(mae(&a, &b, &[false; 50]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let t = vec![0.0, 2.0, 1.0, 1.0];
        let m = vec![true; 4];
        assert_eq!(psnr(&t, &t, &m, None).unwrap(), f64::INFINITY);
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((psnr(&p, &t, &m, Some(2.0)).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_vec(&mut rng, 30);
        let b = rand_vec(&mut rng, 30);
        let m = vec![true; 30];
        let mse: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 30.0;
        let range = b.iter().cloned().fold(f64::MIN, f64::max) - b.iter().cloned().fold(f64::MAX, f64::min);
        assert!((psnr(&a, &b, &m, None).unwrap() - 10.0 * (range * range / mse).log10()).abs() < 1e-9);
    }

    /// Direct windowed SSIM with explicit loops.
    fn ssim_reference(x: &[f64], y: &[f64], dims: [usize; 3], nd: usize, mask: &[bool]) -> f64 {
        let idx = |a: usize, b: usize, c: usize| (a * dims[1] + b) * dims[2] + c;
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for v in 0..mask.len() {
            if mask[v] {
                for d in 0..nd {
                    lo = lo.min(y[v * nd + d]);
                    hi = hi.max(y[v * nd + d]);
                }
            }
        }
        let (c1, c2) = ((0.01 * (hi - lo)).powi(2), (0.03 * (hi - lo)).powi(2));
        let (mut total, mut count) = (0.0, 0);
        for d in 0..nd {
            for a in 3..dims[0] - 3 {
                for b in 3..dims[1] - 3 {
                    for c in 3..dims[2] - 3 {
                        if !mask[idx(a, b, c)] {
                            continue;
                        }
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for i in a - 3..=a + 3 {
                            for j in b - 3..=b + 3 {
                                for k in c - 3..=c + 3 {
                                    xs.push(x[idx(i, j, k) * nd + d]);
                                    ys.push(y[idx(i, j, k) * nd + d]);
                                }
                            }
                        }
                        let n = xs.len() as f64;
                        let mx = xs.iter().sum::<f64>() / n;
                        let my = ys.iter().sum::<f64>() / n;
                        let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                        let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                        let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
                        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        count += 1;
                    }
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn mssim_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [9, 10, 8];
        let n = 720;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let got = mssim(&x, &y, dims, 2, &mask).unwrap();
        assert!((got - ssim_reference(&x, &y, dims, 2, &mask)).abs() < 1e-9);
        assert_eq!(mssim(&x, &x, dims, 2, &mask).unwrap(), 1.0);
        let ab = mssim_with_range(&x, &y, dims, 2, &mask, Some(1.0)).unwrap();
        let ba = mssim_with_range(&y, &x, dims, 2, &mask, Some(1.0)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(mssim(&x[..2 * 6 * 10 * 8], &y[..2 * 6 * 10 * 8], [6, 10, 8], 2, &mask[..480]).is_err());
    }

    #[test]
    fn mssim_negated_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [7, 7, 7];
        let x: Vec<f64> = (0..343).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = x.iter().sum::<f64>() / 343.0;
        let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let v = mssim(&neg, &x, dims, 1, &[true; 343]).unwrap();
        assert!(v < 0.0, "{v}");
    }

    #[test]
    fn sh_basis_is_orthonormal_on_a_dense_lattice() {
        let dirs = fibonacci_sphere(4000);
        let r = sh_count(4);
        let mut gram = vec![0.0; r * r];
        for d in &dirs {
            let b = sh_basis(4, d);
            for i in 0..r {
                for j in 0..r {
                    gram[i * r + j] += b[i] * b[j] * 4.0 * PI / dirs.len() as f64;
                }
            }
        }
        for i in 0..r {
            for j in 0..r {
                let want = (i == j) as u8 as f64;
                assert!((gram[i * r + j] - want).abs() < 1e-3, "{i} {j} {}", gram[i * r + j]);
            }
        }
        assert_eq!(sh_count(8), 45);
        assert_eq!(sh_indices(2), vec![(0, 0), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2)]);
    }

    #[test]
    fn sh_fit_examples() {
        let dirs = fibonacci_sphere(90);
        let c = sh_fit(&[3.0; 90], &dirs, 2).unwrap();
        assert!((c.coeffs[0] - 3.0 * (4.0 * PI).sqrt()).abs() < 1e-10);
        assert!(c.coeffs[1..].iter().all(|v| v.abs() < 1e-10));
        assert!(sh_fit(&[0.0; 90], &dirs, 2).unwrap().coeffs.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = ShCoefficients {
            order: 4,
            coeffs: rand_vec(&mut rng, 15),
        };
        let vals: Vec<f64> = dirs.iter().map(|d| truth.evaluate(d)).collect();
        let fit = sh_fit(&vals, &dirs, 4).unwrap();
        for (a, b) in fit.coeffs.iter().zip(&truth.coeffs) {
            assert!((a - b).abs() < 1e-8);
        }
        let same = vec![Direction::x(); 10];
        assert!(matches!(sh_fit(&[1.0; 10], &same, 2), Err(Error::RankDeficient(_))));
        assert!(matches!(sh_fit(&[1.0; 4], &dirs[..4], 2), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn interpolation_examples() {
        let dirs = fibonacci_sphere(30);
        let (inp, tgt) = dirs.split_at(8);
        let vals = [vec![2.5; 8], vec![-1.0; 8]].concat();
        let out = sh_interpolate(&vals, inp, tgt, 2).unwrap();
        assert!(out[..22].iter().all(|v| (v - 2.5).abs() < 1e-10));
        assert!(out[22..].iter().all(|v| (v + 1.0).abs() < 1e-10));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = ShCoefficients {
            order: 2,
            coeffs: rand_vec(&mut rng, 6),
        };
        let vals: Vec<f64> = inp.iter().map(|d| truth.evaluate(d)).collect();
        let out = sh_interpolate(&vals, inp, tgt, 2).unwrap();
        for (o, d) in out.iter().zip(tgt) {
            assert!((o - truth.evaluate(d)).abs() < 1e-8);
        }
    }

    #[test]
    fn acc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = ShCoefficients {
            order: 8,
            coeffs: rand_vec(&mut rng, 45),
        };
        let b = ShCoefficients {
            coeffs: a.coeffs.iter().map(|v| v * 2.0).collect(),
            ..a.clone()
        };
        assert!((acc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((acc(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let mut p = vec![0.0; 45];
        let mut q = vec![0.0; 45];
        p[..20].copy_from_slice(&a.coeffs[..20]);
        q[20..].copy_from_slice(&a.coeffs[20..]);
        let (p, q) = (ShCoefficients { order: 8, coeffs: p }, ShCoefficients { order: 8, coeffs: q });
        assert_eq!(acc(&p, &q).unwrap(), 0.0);
        let z = ShCoefficients { order: 8, coeffs: vec![0.0; 45] };
        assert!(matches!(acc(&a, &z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[1.0, 2.0, 3.0], &[0, 0, 0]).unwrap();
        assert_eq!((one.mean, one.std), (2.0, 0.0));
        let two = aggregate(&[1.0, 1.0, 3.0], &[4, 4, 9]).unwrap();
        assert_eq!((two.mean, two.std), (2.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals = rand_vec(&mut rng, 100);
        let ids: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let got = aggregate(&vals, &ids).unwrap();
        let mut means = Vec::new();
        for s in 0..5 {
            let g: Vec<f64> = (0..100).filter(|&i| ids[i] == s).map(|i| vals[i]).collect();
            if !g.is_empty() {
                means.push(g.iter().sum::<f64>() / g.len() as f64);
            }
        }
        for (a, b) in got.per_subject.iter().zip(&means) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_serialises() {
        let r = MetricReport {
            rows: vec![ReportRow {
                method: "sh".into(),
                protocol: "single".into(),
                shell: "1000".into(),
                q_in: 6,
                metric: "mae".into(),
                summary: Summary::from_subject_means(vec![1.0, 3.0]).unwrap(),
            }],
        };
        let csv = r.to_csv().unwrap();
        assert_eq!(csv, "method,protocol,shell,q_in,metric,mean,std\nsh,single,1000,6,mae,2,1\n");
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
