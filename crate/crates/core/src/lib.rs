//! Core algorithms for discovering governing PDEs from scattered data.
//!
//! A surrogate network is fitted to each dataset while a sparse coefficient
//! vector over a library of candidate terms is learned jointly; see
//! [`trainer::train`] for the schedule.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod rational_net;
pub mod solvers;
pub mod term_library;
pub mod trainer;

pub use config::RunConfig;
pub use data::{GridDataset, PointDataset, ProblemDomain};
pub use error::{Error, Result};
pub use rational_net::{Architecture, Network};
pub use term_library::{Library, LibraryTerm};
pub use trainer::{train, IdentifiedPde, TrainConfig};
