pub mod bench;
mod binio;
pub mod featurizer;
pub mod model;
pub mod oracle;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use binio::FormatError;
