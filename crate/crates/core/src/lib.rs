pub mod framing2d;
pub mod genproto;
pub mod isorender;
pub mod latentops;
pub mod occupancy;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod splat;
pub mod splatpost;
pub mod worldspec;
