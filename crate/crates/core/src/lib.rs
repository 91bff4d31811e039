pub mod aggregation;
pub mod device;
pub mod estimator;
pub mod model;
pub mod orchestrator;
pub mod protocol;
pub mod seeding;
pub mod selection;
