//! Quantization parameters, calibration and integer-faithful simulation.

mod calibrate;
mod materialize;
mod params;
mod profile;
mod quantsim;

pub use calibrate::{calibrate, calibrate_graph, weight_ranges, RangeStats};
pub(crate) use calibrate::min_max;
pub use materialize::materialize;
pub use params::{compute_quant_params, dequantize, fake_quant, q_bounds, quantize, QuantParams};
pub use profile::{activation_tensors, weight_tensors, Policy, QuantProfile};
pub use quantsim::{execute_quantsim, QuantSim};
