//! Simulation and learning loop for an instruction follower trained from a
//! leader's realtime binary feedback on a hex grid.

pub mod eval;
pub mod hexgeom;
pub mod policy;
pub mod rewards;
pub mod simleader;
pub mod trainer;
pub mod world;
pub mod orchestrator;
