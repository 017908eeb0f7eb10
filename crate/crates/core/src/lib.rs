pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod orchestrator;
pub mod ppo;
pub mod task;
pub mod teachers;
pub mod vae;

pub use error::{Error, Result};
pub use eval::{EvalMode, SuiteResult, TestTask};
pub use orchestrator::{Algo, RunConfig, RunSummary};
pub use ppo::{PpoConfig, StudentConfig};
pub use task::{TaskSpaceConfig, TaskSpec};
pub use teachers::{ClutrTeacherConfig, PairedTeacherConfig, RegretFlavor};
pub use vae::{TaskVae, VaeConfig};
