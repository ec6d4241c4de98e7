pub mod corpus;
pub mod encoder;
pub mod error;
pub mod label_scheme;
pub mod par;
pub mod tensor;
pub mod decoder_heads;
pub mod evaluation;
pub mod model;
pub mod seed;
pub mod trainer;
pub mod checkpoint;
pub mod synthetic;
