//! Fixtures shared by the benchmarks: a smooth one-dimensional field on a
//! lattice and the Burgers term library.

use ndarray::Array2;

use pdelearn_core::trainer::{DatasetSpec, PhaseConfig, PhaseKind};
use pdelearn_core::{Architecture, Library, LibraryTerm, PointDataset, ProblemDomain, TrainConfig};

pub const BURGERS_TERMS: [&str; 17] = [
    "U",
    "D_x U",
    "D_x^2 U",
    "D_x^3 U",
    "(U)^2",
    "(D_x U)(U)",
    "(D_x^2 U)(U)",
    "(D_x U)^2",
    "(U)^3",
    "(D_x U)(U)^2",
    "(D_x^2 U)(U)^2",
    "(D_x U)^2(U)",
    "(U)^4",
    "(D_x U)(U)^3",
    "(D_x^2 U)(U)^3",
    "(D_x U)^2(U)^2",
    "(D_x U)^3(U)",
];

pub fn burgers_library() -> Library {
    let rhs = BURGERS_TERMS
        .iter()
        .map(|t| t.parse::<LibraryTerm>().unwrap())
        .collect();
    Library::new("D_t U".parse().unwrap(), rhs, 1).unwrap()
}

/// `n` points on a near-square lattice over `(0, 10] × [−8, 8]`.
pub fn lattice(n: usize) -> Array2<f64> {
    let side = (n as f64).sqrt().ceil() as usize;
    Array2::from_shape_fn((n, 2), |(i, c)| {
        if c == 0 {
            10.0 * ((i / side) + 1) as f64 / side as f64
        } else {
            -8.0 + 16.0 * (i % side) as f64 / (side - 1).max(1) as f64
        }
    })
}

pub fn dataset(n: usize) -> PointDataset {
    let coords = lattice(n);
    let values = coords
        .rows()
        .into_iter()
        .map(|r| -(std::f64::consts::PI * r[1] / 8.0).sin() * (-0.1 * r[0]).exp())
        .collect();
    PointDataset::new(
        coords,
        values,
        ProblemDomain::new(10.0, vec![-8.0], vec![8.0]).unwrap(),
    )
    .unwrap()
}

/// One dataset, a 5×20 surrogate and the full Burgers library, with a single
/// epoch per phase.
pub fn train_config(n_data: usize, n_coll: usize) -> TrainConfig {
    let spec = DatasetSpec {
        train: dataset(n_data),
        test: None,
        architecture: Architecture::new(2, 5, 20),
        network_seed: 1,
        collocation_seed: 1,
    };
    let phases = vec![
        PhaseConfig::new(PhaseKind::BurnIn, 1, 0.0),
        PhaseConfig::new(PhaseKind::Sparsification, 1, 1e-4),
        PhaseConfig::new(PhaseKind::FineTune, 1, 0.0),
    ];
    let mut cfg = TrainConfig::new(burgers_library(), vec![spec], phases);
    cfg.n_random_coll = n_coll;
    cfg
}
