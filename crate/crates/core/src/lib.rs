pub mod agent;
pub mod decoder;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod tokenizer;
pub mod training;
pub mod world;
