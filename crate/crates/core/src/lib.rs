pub mod audio;
pub mod backbone;
pub mod checkpoint;
pub mod colorspace;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod relevance;
pub mod semantics;
pub mod tensor;
