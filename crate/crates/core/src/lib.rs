pub mod backbone;
pub mod evalkit;
pub mod extractor;
pub mod heads;
pub mod locdata;
pub mod synth;
pub mod tensorops;
pub mod trainer;
pub mod weights;
