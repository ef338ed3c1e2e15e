//! Network building blocks: time embedding, the time-conditioned DiT-style
//! stack, affine couplings and the deterministic convolutional predictor.

mod coupling;
mod det;
mod dit;
mod layers;
mod time;

pub use coupling::{log_det_per_sequence, CouplingConfig, CouplingLayer, CouplingStack};
pub use det::{DetConfig, DetPredictor};
pub use dit::{DitConfig, DitStack};
pub use layers::{modulate, Init, Linear, TokenConv};
pub use time::{time_embed, time_embed_batch, TIME_SCALE};
