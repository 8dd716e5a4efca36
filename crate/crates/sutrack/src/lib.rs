pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod encoder;
pub mod geom;
pub mod heads;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod tracker;
pub mod train;
