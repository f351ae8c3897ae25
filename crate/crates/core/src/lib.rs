//! Variational hyper RNN toolkit: autodiff, probability kernels, recurrent
//! cells, sequence models, particle-filter objectives, the synthetic
//! regime-switching benchmark, dataset I/O and diagnostic traces.

pub mod cells;
pub mod dataio;
pub mod diagnostics;
pub mod distributions;
pub mod models;
pub mod objectives;
pub mod synthdata;
pub mod tensor;
