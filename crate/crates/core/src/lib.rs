pub mod annotation;
pub mod convnet;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod image_ops;
pub mod motion;
pub mod pipeline;
pub mod scalar;
pub mod spatial;
pub mod tensor;
pub mod training;
pub mod workflow;

pub use annotation::Annotation;
pub use error::{Error, Result};
pub use geometry::SimilarityTransform;
pub use image_ops::{Image, Pyramid};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Pyramid32 = Pyramid<f32>;
