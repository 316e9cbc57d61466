//! Builds PCConv neighbourhoods for a small grid and shows how k_q and d_max
//! shape the pair lists, and how one layer's output responds.
//!
//! Usage: `neighbourhoods [k_q] [d_max]`

use pccnn::embedding::EmbeddingConfig;
use pccnn::geometry::{d_ang, Shell};
use pccnn::pcconv::{build_neighborhood, pcconv_forward, AngularSample, KernelGeometry, PCConvLayer, PCConvLayerConfig, QGrid, WeightMode};
use pccnn::tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let k_q = args.next().map_or(4, |s| s.parse().expect("k_q"));
    let d_max = args.next().map_or(std::f64::consts::FRAC_PI_2, |s| s.parse().expect("d_max"));

    let dirs = Shell::fibonacci(1000.0, 12, 1).directions;
    let mut slots: Vec<AngularSample> = dirs[..8].iter().map(|&d| AngularSample::new(1000.0, d)).collect();
    slots.push(AngularSample::padding());
    let x = QGrid::new([3, 3, 3], slots);
    let y = QGrid::new([3, 3, 3], dirs[8..].iter().map(|&d| AngularSample::new(1000.0, d)).collect());

    let emb = EmbeddingConfig::default();
    for geometry in [
        KernelGeometry::pointwise(k_q, d_max),
        KernelGeometry { extent: [3, 3, 3], k_q, d_max },
    ] {
        let nb = build_neighborhood(&x, &y, &geometry, &emb, None)?;
        // centre voxel, first target direction
        let j = y.voxel_index([1, 1, 1]) * y.n_slots();
        let pairs = nb.pairs(j);
        let kept = pairs.iter().filter(|p| p.2).count();
        println!(
            "extent {:?}: {} distinct embeddings, target {j} has {} pairs ({kept} inside d_max)",
            geometry.extent,
            nb.n_entries(),
            pairs.len()
        );
        for &(i, entry, inside) in pairs.iter().take(4) {
            let xi = x.point(i);
            println!(
                "  input {i:3} at {:?}, angle {:.3}, inside {inside}, embedding[..4] {:.3?}",
                [xi.u, xi.v, xi.w],
                d_ang(&xi.dir, &y.point(j).dir),
                &nb.embedding(entry)[..4]
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = PCConvLayerConfig {
        geometry: KernelGeometry::pointwise(k_q, d_max),
        c_in: 1,
        c_out: 4,
        hidden: 16,
        weight_mode: WeightMode::PerChannel,
        embedding: emb,
    };
    let layer = PCConvLayer::new(&mut store, "demo", cfg, &mut rng)?;
    let mut tape = Tape::new();
    let f = tape.input(Tensor::filled(vec![x.n_points(), 1], 1.0));
    let h = pcconv_forward(&mut tape, &store, &layer, f, &x, &y, None)?;
    println!("layer output {:?}, first row {:.4?}", tape.value(h).shape(), &tape.value(h).data()[..4]);
    Ok(())
}
