mod bytes;
pub mod diffcore;
pub mod losses;
pub mod model;
pub mod gradcheck;
pub mod synthdata;
pub mod dataio;
pub mod trainer;
pub mod exec;
pub mod evalharness;
