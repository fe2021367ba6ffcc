//! Rotation-equivariant group convolutions with filters parametrized by a
//! masked, frequency-recentered Fourier basis.

pub mod bases;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod experiment;
pub mod gconv;
pub mod grid;
pub mod io;
pub mod network;
pub mod parametrize;
pub mod trials;

pub use bases::{BasisKind, BasisSet, MaskSpec};
pub use error::{Error, Result};
pub use gconv::{FeatureMap, FilterBank, LayerKind, Padding, PlanarImage};
pub use grid::{GridSpec, RotationGroup};
pub use network::{NetworkConfig, NetworkKind, ToyNetwork, TrainConfig};
pub use parametrize::{FitResult, NormalizedBasis, RidgeFitter};
