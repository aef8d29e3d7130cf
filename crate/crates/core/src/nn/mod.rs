//! Network building blocks and the assembled segmentation network.

pub mod blocks;
pub mod config;
pub mod network;

pub use blocks::{Act, Forward, ParamBuilder};
pub use config::{norm_groups, Ablation, NetConfig};
pub use network::{build_network, check_input_shape, network_forward, NetOutput, NetworkParams};
