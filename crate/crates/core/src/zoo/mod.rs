//! Model configs, builders, parameter/MAC accounting and checkpoints.

mod checkpoint;
mod config;
mod count;
mod model;

pub use checkpoint::{from_bytes, to_bytes, DTYPE_F32, MAGIC, VERSION};
pub use config::{Family, ModelConfig, ULTRASEG_CHANNELS, UNET_LADDER, VARIANTS};
pub use count::{analytic_param_count, count_flops, map_to_input, receptive_field, FlopReport, ShapeTracer};
pub use model::{BnUse, Buffers, Forward, Model, Outputs, Params, Registry};
