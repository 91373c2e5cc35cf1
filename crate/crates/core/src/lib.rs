pub mod arena;
pub mod forest;
pub mod numeric;
pub mod orchestrator;
pub mod pheromone;
pub mod policy;
pub mod qnet;
pub mod scenario;
pub mod trainer;
pub mod world;
