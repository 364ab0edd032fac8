//! Split federated learning with mutual learning and layer-wise model
//! inversion, a joint trainer-selection and resource-allocation optimizer,
//! and a deterministic O-RAN round simulator.

pub mod data;
pub mod harness;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod ridge;
pub mod simnet;
pub mod sysopt;
