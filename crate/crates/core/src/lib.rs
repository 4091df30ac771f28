pub mod annotation;
pub mod backends;
pub mod embed;
pub mod evalmetrics;
pub mod kg;
pub mod mmkgc;
pub mod pipeline;
pub mod prompts;
pub mod sns;
pub mod util;
pub mod vns;
