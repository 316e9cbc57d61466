use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{Matrix3, Vector3};
use pccnn::cli::{digest_path, BEST_DIR, LAST_DIR, LOSS_FILE, MANIFEST_FILE, REPORT_JSON};
use pccnn::data::{read_dataset, write_dataset, PhantomSpec, VolumeSet};
use pccnn::geometry::{fibonacci_sphere, GradientEntry};
use pccnn::metrics::MetricReport;
use pccnn::model::PCCNN;
use pccnn::trainer::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pccnn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pccnn")).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["phantom", "--size", "8", "--out", s(&out)];
    args.extend_from_slice(extra);
    let (code, _, err) = pccnn(&args);
    assert_eq!(code, 0, "{err}");
    out
}

#[test]
fn phantom_is_reproducible_and_matches_the_tensor_formula() {
    let tmp = tempfile::tempdir().unwrap();
    let a = phantom(tmp.path(), "a", &["--noise", "0", "--seed", "1", "--shells", "1000,3000", "--dirs", "12"]);
    let b = phantom(tmp.path(), "b", &["--noise", "0", "--seed", "1", "--shells", "1000,3000", "--dirs", "12"]);
    assert_eq!(digest_path(&a).unwrap(), digest_path(&b).unwrap());
    assert_eq!(std::fs::read(a.join(MANIFEST_FILE)).unwrap().len(), std::fs::read(b.join(MANIFEST_FILE)).unwrap().len());

    let vols = read_dataset(&a).unwrap();
    assert_eq!(vols.n_volumes(), 25);
    let spec = PhantomSpec::standard(8, 0.0, 1);
    let masked: Vec<usize> = (0..vols.n_voxels()).filter(|&v| vols.mask[v]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let v = masked[rng.random_range(0..masked.len())];
        let k = rng.random_range(0..vols.n_volumes());
        let c = vols.voxel_coords(v);
        let pos = spec.normalized(c);
        let g = &vols.gradients[k];
        let gv = Vector3::from(g.dir.unit());
        let expected: f64 = spec
            .fibers_at(c)
            .iter()
            .map(|f| {
                let u = Vector3::from(f.orientation.at(pos).unit());
                let d = Matrix3::identity() * f.d_radial + u * u.transpose() * (f.d_axial - f.d_radial);
                f.weight * (-g.bval * (gv.transpose() * d * gv)[0]).exp()
            })
            .sum::<f64>()
            * spec.s0;
        // stored as float32
        assert!((vols.value(v, k) - expected).abs() <= 1e-5 * expected.max(1.0), "{} vs {expected}", vols.value(v, k));
    }
}

#[test]
fn bad_flags_and_missing_inputs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(pccnn(&["phantom", "--size", "abc", "--out", s(&out)]).0, 1);
    assert_eq!(pccnn(&["phantom", "--size", "0", "--out", s(&out)]).0, 2);
    assert_eq!(pccnn(&["train", "--data", s(&tmp.path().join("none")), "--out", s(&out)]).0, 2);
    assert_eq!(pccnn(&["eval", "--data", s(&out), "--baseline", "sh", "--checkpoint", s(&out), "--out", s(&out)]).0, 1);
}

const TOY: &[&str] = &[
    "--n-pointwise",
    "1",
    "--n-blocks",
    "1",
    "--channels",
    "4",
    "--hidden",
    "8",
    "--bands",
    "2",
    "--k-q",
    "6",
    "--patch-size",
    "4",
    "--stride",
    "4",
    "--q-out",
    "4",
    "--batch",
    "2",
    "--log-every",
    "1",
    "--q-in-max",
    "10",
];

fn train(data: &Path, out: &Path, iters: &str, seed: &str) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--iters", iters, "--seed", seed];
    args.extend_from_slice(TOY);
    let (code, _, err) = pccnn(&args);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn train_is_reproducible_and_zero_iterations_keep_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantom(tmp.path(), "d", &["--shells", "1000", "--dirs", "16"]);
    let (r1, r2, z) = (tmp.path().join("r1"), tmp.path().join("r2"), tmp.path().join("z"));
    train(&data, &r1, "3", "5");
    train(&data, &r2, "3", "5");
    assert_eq!(digest_path(&r1).unwrap(), digest_path(&r2).unwrap());
    assert_eq!(std::fs::read(r1.join(MANIFEST_FILE)).unwrap(), std::fs::read(r2.join(MANIFEST_FILE)).unwrap());
    let csv = std::fs::read_to_string(r1.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);

    train(&data, &z, "0", "5");
    let ck = Checkpoint::load(&z.join(BEST_DIR)).unwrap();
    let init = PCCNN::<f32>::build(ck.descriptor.model, 5).unwrap();
    let loaded = ck.model().unwrap();
    for (a, b) in init.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(Checkpoint::load(&z.join(LAST_DIR)).unwrap(), ck);
}

fn report(dir: &Path) -> MetricReport {
    serde_json::from_slice(&std::fs::read(dir.join(REPORT_JSON)).unwrap()).unwrap()
}

#[test]
fn eval_baselines_and_protocol_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantom(tmp.path(), "d", &["--shells", "1000,2000", "--dirs", "20"]);
    let out = tmp.path().join("gt");
    let (code, _, err) = pccnn(&["eval", "--data", s(&data), "--baseline", "ground-truth", "--patch-size", "4", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(report(&out).find("ground_truth", "1000", "mae").unwrap().summary.mean, 0.0);

    let bad = tmp.path().join("bad");
    let (code, _, err) = pccnn(&["eval", "--data", s(&data), "--baseline", "sh", "--protocol", "multi", "--out", s(&bad)]);
    assert_eq!(code, 2);
    assert!(err.contains("input shell"), "{err}");
    assert_eq!(pccnn(&["eval", "--data", s(&data), "--baseline", "sh", "--b-in", "3000", "--out", s(&bad)]).0, 2);

    let model = tmp.path().join("m");
    train(&data, &model, "1", "0");
    let out = tmp.path().join("m_eval");
    let ck = model.join(BEST_DIR);
    let (code, _, err) = pccnn(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ck), "--protocol", "multi", "--patch-size", "4", "--chunk", "4", "--out", s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let r = report(&out);
    assert!(r.find("pccnn", "2000", "mae").is_some());
    assert!(std::fs::read_to_string(out.join("report.csv")).unwrap().starts_with("method,protocol,shell,q_in,metric,mean,std"));
}

#[test]
fn sh_baseline_is_exact_on_band_limited_signals() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = [3, 3, 3];
    let dirs = fibonacci_sphere(30);
    let mut gradients = vec![GradientEntry { bval: 0.0, dir: dirs[0] }];
    gradients.extend(dirs.iter().map(|&dir| GradientEntry { bval: 1000.0, dir }));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut intensities = Vec::new();
    for _ in 0..27 {
        // constant plus a quadratic form: at most order 2
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let m = a + a.transpose();
        intensities.push(1.0);
        for d in &dirs {
            let g = Vector3::from(d.unit());
            intensities.push(0.5 + 0.1 * (g.transpose() * m * g)[0]);
        }
    }
    let vols = VolumeSet::new(dims, gradients, intensities, vec![true; 27]).unwrap();
    let data = tmp.path().join("bl");
    write_dataset(&data, &vols, None, BTreeMap::new()).unwrap();
    let out = tmp.path().join("e");
    let (code, _, err) = pccnn(&["eval", "--data", s(&data), "--baseline", "sh", "--qin", "6", "--patch-size", "3", "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let mae = report(&out).find("sh", "1000", "mae").unwrap().summary.mean;
    assert!(mae < 1e-6, "{mae}");
}

#[test]
fn gradcheck_passes_and_catches_injected_faults() {
    let (code, stdout, _) = pccnn(&["gradcheck"]);
    assert_eq!(code, 0, "{stdout}");
    let (code, _, err) = pccnn(&["gradcheck", "--flip", "matmul"]);
    assert_ne!(code, 0);
    assert!(err.contains("worst offender"), "{err}");
}
