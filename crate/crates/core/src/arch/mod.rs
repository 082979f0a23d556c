//! Differentiable cell-based architecture search: mixed-operation DAG
//! cells, network assembly, argmax discretization and the search-space
//! counter.

pub mod cell;
pub mod genotype;
pub mod network;
pub mod ops;
pub mod space;

pub use cell::{cell_forward, edge_list, mixed_op_forward, CellSpec};
pub use genotype::{discretize, genotype_parse, genotype_serialize, DiscreteCell, DiscreteEdge};
pub use network::{default_cell_specs, register_alphas, DiscreteNet, NetworkConfig, SuperNet};
pub use ops::{CellOp, OpInstance};
pub use space::search_space_size;
