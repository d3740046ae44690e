//! Dense-array math, the FFT pair, and reverse-mode differentiation.

pub mod fft;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{Gradients, Primitive, Tape, Value, Var};
pub use tensor::{ComplexTensor, Tensor};
